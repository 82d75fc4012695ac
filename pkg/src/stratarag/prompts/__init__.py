"""Prompt templates shipped as package data.

Templates use literal ``{placeholder}`` markers that are substituted with
:func:`render` (plain string replacement, so JSON braces in the template body
need no escaping).
"""

from __future__ import annotations

from importlib import resources

_NAMES = ("filter", "merge", "extract", "summarize", "consolidate")


def load_template(name: str) -> str:
    """Return the raw template text for one of the shipped prompt names."""
    if name not in _NAMES:
        raise KeyError(f"unknown prompt template: {name!r}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text("utf-8")


def render(template: str, **values: str) -> str:
    """Substitute {key} markers; unknown markers in the template are left as-is."""
    out = template
    for key, val in values.items():
        out = out.replace("{" + key + "}", val)
    return out
