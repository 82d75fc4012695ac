"""Command-line interface: subcommands, exit codes, and output contracts.
Runs in-process through main(argv); one subprocess test covers the installed
executable."""

import json
import subprocess
import sys

import pytest

from stratarag.cli import main

from conftest import CORPUS, QA_FILE


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cli_workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli") / "artifacts"
    code = main(
        ["--mock", "--workdir", str(wd), "build", "--corpus", str(CORPUS)]
    )
    assert code == 0
    return wd


class TestBuild:
    def test_build_payload(self, tmp_path, capsys):
        wd = tmp_path / "w"
        code, out, _ = _run(
            capsys, "--mock", "--workdir", str(wd), "build", "--corpus", str(CORPUS)
        )
        assert code == 0
        payload = json.loads(out)
        assert [s["stage"] for s in payload["stages"]] == [
            "ingest",
            "extract",
            "cluster",
            "index",
        ]
        assert all(not s["skipped"] for s in payload["stages"])
        assert payload["network_ops"] == 0
        usage = payload["usage"]
        assert set(usage) == {"prompt_tokens", "completion_tokens", "total_tokens"}
        assert usage["total_tokens"] == (
            usage["prompt_tokens"] + usage["completion_tokens"]
        )

    def test_rebuild_skips(self, cli_workdir, capsys):
        code, out, _ = _run(
            capsys,
            "--mock",
            "--workdir",
            str(cli_workdir),
            "build",
            "--corpus",
            str(CORPUS),
        )
        assert code == 0
        payload = json.loads(out)
        assert all(s["skipped"] for s in payload["stages"])

    def test_missing_corpus_exit_2(self, tmp_path, capsys):
        code, out, err = _run(
            capsys,
            "--mock",
            "--workdir",
            str(tmp_path / "w"),
            "build",
            "--corpus",
            str(tmp_path / "absent.jsonl"),
        )
        assert code == 2
        assert out == ""


class TestQuery:
    def test_query_payload(self, cli_workdir, capsys):
        code, out, _ = _run(
            capsys,
            "--mock",
            "--workdir",
            str(cli_workdir),
            "query",
            "Sam Altman leads among backers?",
        )
        assert code == 0
        payload = json.loads(out)
        assert "sam altman" in payload["answer"].casefold()
        assert payload["network_ops"] == 0
        assert set(payload["usage"]) == {
            "prompt_tokens",
            "completion_tokens",
            "total_tokens",
        }
        for point in payload["points"]:
            assert set(point) == {"description", "score", "layer"}
            assert 0.0 <= point["score"] <= 100.0

    def test_query_k_override(self, cli_workdir, capsys):
        code, out, _ = _run(
            capsys,
            "--mock",
            "--workdir",
            str(cli_workdir),
            "query",
            "-k",
            "2",
            "Who runs Microsoft?",
        )
        assert code == 0
        assert "satya nadella" in json.loads(out)["answer"].casefold()

    def test_unbuilt_workdir_exit_2(self, tmp_path, capsys):
        code, out, _ = _run(
            capsys, "--mock", "--workdir", str(tmp_path / "nope"), "query", "hi?"
        )
        assert code == 2
        assert out == ""


class TestEval:
    def test_eval_generated_only(self, tmp_path, capsys):
        qa = tmp_path / "qa.jsonl"
        qa.write_text(
            json.dumps(
                {"question": "who?", "gold": "Ada", "generated": "Ada Lovelace"}
            )
            + "\n"
            + "this line is not json\n"
            + json.dumps(
                {"question": "what?", "gold": "graphs", "generated": "trees"}
            )
            + "\n",
            encoding="utf-8",
        )
        code, out, _ = _run(
            capsys, "--mock", "--workdir", str(tmp_path / "unused"), "eval", str(qa)
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["questions"] == 2
        assert payload["skipped_malformed"] == 1
        assert payload["mean_accuracy"] == 0.5
        assert payload["network_ops"] == 0

    def test_eval_runs_engine_for_missing_generated(self, cli_workdir, capsys):
        code, out, _ = _run(
            capsys, "--mock", "--workdir", str(cli_workdir), "eval", str(QA_FILE)
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["questions"] == 10
        assert payload["mean_accuracy"] == 1.0

    def test_eval_missing_file_exit_2(self, tmp_path, capsys):
        code, _, _ = _run(
            capsys,
            "--mock",
            "--workdir",
            str(tmp_path),
            "eval",
            str(tmp_path / "absent.jsonl"),
        )
        assert code == 2

    def test_eval_no_usable_records_exit_2(self, tmp_path, capsys):
        qa = tmp_path / "qa.jsonl"
        qa.write_text('{"question": "", "gold": ""}\n', encoding="utf-8")
        code, _, _ = _run(capsys, "--mock", "--workdir", str(tmp_path), "eval", str(qa))
        assert code == 2


class TestBench:
    def test_bench_csv_and_plot(self, tmp_path, capsys):
        csv_path = tmp_path / "bench.csv"
        svg_path = tmp_path / "bench.svg"
        code, out, _ = _run(
            capsys,
            "bench",
            "--bottom-size",
            "80",
            "--dimension",
            "16",
            "--max-layers",
            "2",
            "--queries",
            "5",
            "--k",
            "3",
            "--csv",
            str(csv_path),
            "--plot",
            str(svg_path),
        )
        assert code == 0
        assert out.splitlines()[0] == "layer,system,queries,mean_ms,dist_evals,recall"
        assert csv_path.read_text("utf-8") == out
        assert svg_path.stat().st_size > 0

    def test_bench_bad_sizes_exit_1(self, capsys):
        code, out, _ = _run(capsys, "bench", "--queries", "0")
        assert code == 1
        assert out == ""


class TestUsageAndConfig:
    def test_no_subcommand_exit_1(self, capsys):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_unknown_flag_exit_1(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--bogus", "build"])
        assert err.value.code == 1

    def test_bad_config_file_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "run.ini"
        bad.write_text("[index]\nef_serach = 100\n", encoding="utf-8")
        code, out, _ = _run(
            capsys,
            "--config",
            str(bad),
            "--mock",
            "--workdir",
            str(tmp_path / "w"),
            "build",
        )
        assert code == 1
        assert out == ""

    def test_config_file_drives_build(self, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text(
            f"[corpus]\npath = {CORPUS}\n\n[gateway]\nmode = mock\n",
            encoding="utf-8",
        )
        code, out, _ = _run(
            capsys, "--config", str(ini), "--workdir", str(tmp_path / "w"), "build"
        )
        assert code == 0
        assert json.loads(out)["network_ops"] == 0


class TestExecutable:
    def test_installed_script_verbose_build(self, tmp_path):
        proc = subprocess.run(
            [
                "stratarag",
                "--mock",
                "--verbose",
                "--workdir",
                str(tmp_path / "w"),
                "build",
                "--corpus",
                str(CORPUS),
            ],
            capture_output=True,
            text=True,
            timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        payload = json.loads(proc.stdout)  # stdout stays machine-readable
        assert payload["network_ops"] == 0
        assert "ingest" in proc.stderr and "index" in proc.stderr
