"""Exception types shared across the package.

Every failure a caller is expected to handle gets its own class so that
tests and the CLI can map errors to stages without string matching.
"""


class StrataragError(Exception):
    """Base class for all package-specific errors."""


# --- gateway ---------------------------------------------------------------

class NetworkError(StrataragError):
    """Transport failed after the configured number of retries."""


class MalformedResponse(StrataragError):
    """A json_object completion could not be parsed as JSON."""


class BudgetExceeded(StrataragError):
    """The cumulative token budget for the run was exhausted."""


# --- corpus / knowledge graph ---------------------------------------------

class EmptyCorpus(StrataragError):
    """No readable documents were supplied to the ingestion stage."""


# --- clustering -------------------------------------------------------------

class MissingEmbedding(StrataragError):
    """A graph node reached the clustering loop without an embedding."""


# --- index ------------------------------------------------------------------

class DimensionMismatch(StrataragError):
    """Vector dimensionality disagrees with the structure it joins."""


class EmptyLayer(StrataragError):
    """An index layer was given zero nodes."""


class StartNotInLayer(StrataragError):
    """search_layer received a start node absent from the layer."""


class CorruptIndex(StrataragError):
    """Stored index bytes fail their manifest checksum."""


class VersionMismatch(StrataragError):
    """Stored index was written by an incompatible format version."""


# --- metrics ----------------------------------------------------------------

class SingleCluster(StrataragError):
    """A dispersion ratio needs at least two clusters."""


class DegenerateDispersion(StrataragError):
    """Within-cluster dispersion is zero, the ratio is undefined."""


class ZeroVector(StrataragError):
    """Cosine against a zero-norm vector is undefined."""


# --- configuration / pipeline ------------------------------------------------

class ConfigError(StrataragError):
    """A configuration value is missing, unparsable, or out of range."""


class MissingArtifact(StrataragError):
    """A pipeline stage needs an artifact that has not been built."""


class StageFailure(StrataragError):
    """A build stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
