"""Unit tests for the vitstem command line."""

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

from tests.test_trainer import TINY
from vitstem_cli import GRADCHECK_TOLERANCE, emit, gradcheck_suite, main


def run_cli(*argv: str) -> tuple[int, str]:
    """Run the command line and capture its exit code and stdout."""
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
        code = main(list(argv))
    return code, stdout.getvalue()


class TestAnalyze(unittest.TestCase):
    """The analyze subcommand."""

    def setUp(self) -> None:
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.common = ["--out", self.tmp.name, "--no-log-file", "--no-progress"]

    def tearDown(self) -> None:
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_json_envelope(self) -> None:
        """Test the JSON envelope."""
        code, out = run_cli("analyze", "--model", "ViT_P-18GF", "--json", *self.common)
        assert code == 0
        payload = json.loads(out)
        assert payload["command"] == "analyze"
        assert payload["status"] == "ok"
        name, flops, params, _ = payload["result"]["rows"][0]
        assert name == "ViT_P-18GF"
        assert abs(flops - 17.5) / 17.5 < 0.03
        assert abs(params - 86.7) / 86.7 < 0.01

    def test_stem_csv(self) -> None:
        """Test stem output as CSV."""
        code, out = run_cli("analyze", "--stem", "S3", "--format", "csv", *self.common)
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "stem,flops_M,params_M,acts_M"
        assert lines[1].startswith("S3,")

    def test_all_canonical_writes_csv_files(self) -> None:
        """Test writing CSV files for every canonical model."""
        code, _ = run_cli("analyze", "--all-canonical", *self.common)
        assert code == 0
        table = Path(self.tmp.name) / "analysis" / "models.csv"
        stems = Path(self.tmp.name) / "analysis" / "stems.csv"
        assert len(table.read_text(encoding="utf-8").splitlines()) == 9
        assert len(stems.read_text(encoding="utf-8").splitlines()) == 7

    def test_unknown_model_fails(self) -> None:
        """Test failing on an unknown model."""
        code, _ = run_cli("analyze", "--model", "ViT_Z-4GF", *self.common)
        assert code == 1

    def test_nothing_to_analyze_fails(self) -> None:
        """Test failing without anything to analyze."""
        code, _ = run_cli("analyze", *self.common)
        assert code == 1


class TestExperimentCommands(unittest.TestCase):
    """Train, sweep, stability and report on a tiny configuration."""

    def setUp(self) -> None:
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / "tiny.json"
        self.config.write_text(json.dumps(TINY), encoding="utf-8")
        self.common = ["--out", str(self.root / "out"), "--no-log-file", "--no-progress"]

    def tearDown(self) -> None:
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_train(self) -> None:
        """Test training one configuration."""
        code, out = run_cli("train", "--config", str(self.config), "--json", *self.common)
        assert code == 0
        result = json.loads(out)["result"]
        assert result["record"]["model_name"] == "ViT_P-tiny"
        assert Path(result["curve"]).exists()
        assert (self.root / "out" / "store" / "runs.jsonl").exists()

    def test_train_twice_into_the_same_store(self) -> None:
        """Test that repeating train with one config succeeds and keeps the first curve."""
        code, out = run_cli("train", "--config", str(self.config), "--json", *self.common)
        assert code == 0
        first = json.loads(out)["result"]
        curve = Path(first["curve"])
        before = curve.read_bytes()

        code, out = run_cli("train", "--config", str(self.config), "--json", *self.common)
        assert code == 0
        second = json.loads(out)["result"]
        assert second["curve"] != first["curve"]
        assert second["record"]["final_top1_err"] == first["record"]["final_top1_err"]
        assert curve.read_bytes() == before
        log = self.root / "out" / "store" / "runs.jsonl"
        assert len(log.read_text(encoding="utf-8").splitlines()) == 2

    def test_epoch_override(self) -> None:
        """Test overriding the epochs."""
        code, out = run_cli("train", "--config", str(self.config), "--epochs", "1", "--json", *self.common)
        assert code == 0
        assert json.loads(out)["result"]["record"]["epochs"] == 1.0

    def test_sweep_then_stability_and_report(self) -> None:
        """Test a sweep followed by stability and report."""
        sweep = ["sweep", "--config", str(self.config), "--n-samples", "2", "--parallel", "2", "--json"]
        code, out = run_cli(*sweep, *self.common)
        assert code == 0
        stats = json.loads(out)["result"]["statistics"]
        assert stats["success"] == 2
        assert stats["skipped"] == 0

        code, out = run_cli(*sweep, *self.common)
        assert code == 0
        result = json.loads(out)["result"]
        assert result["statistics"]["skipped"] == 2
        edf = Path(result["edf_files"][0])
        assert edf.name == "edf_adamw_2ep.csv"
        assert len(edf.read_text(encoding="utf-8").splitlines()) == 3

        code, out = run_cli("stability", "--json", *self.common)
        assert code == 0
        deltas = json.loads(out)["result"]["delta_to_asymptotic"]
        assert [row["delta"] for row in deltas] == [0.0]
        assert (self.root / "out" / "stability" / "optimizer_gap.csv").exists()

        code, out = run_cli("report", "--json", *self.common)
        assert code == 0
        svgs = json.loads(out)["result"]["svg"]
        assert {Path(p).name for p in svgs} == {"edf.svg", "lr_wd_scatter.svg", "training_curves.svg"}

    def test_missing_config_returns_error_status(self) -> None:
        """Test a missing configuration file."""
        code, _ = run_cli("train", "--config", str(self.root / "missing.json"), *self.common)
        assert code == 1

    def test_output_dir_from_config(self) -> None:
        """Test the output directory from the configuration."""
        configured = self.root / "configured"
        self.config.write_text(json.dumps({**TINY, "epochs": 1, "output_dir": str(configured)}), encoding="utf-8")
        code, _ = run_cli("train", "--config", str(self.config), "--no-log-file", "--no-progress")
        assert code == 0
        assert (configured / "store" / "runs.jsonl").exists()


class TestGradcheck(unittest.TestCase):
    """The gradient-check suite."""

    def test_every_op_passes(self) -> None:
        """Test that every op passes."""
        summary = gradcheck_suite(seeds=(0, 1))
        assert len(summary) == 16
        for name, entry in summary.items():
            assert entry["max_rel_error"] < GRADCHECK_TOLERANCE, name
            assert entry["passed"]

    def test_command_reports_ops(self) -> None:
        """Test the gradcheck command output."""
        with tempfile.TemporaryDirectory() as tmp:
            code, out = run_cli("gradcheck", "--cases", "1", "--json", "--out", tmp, "--no-log-file")
        assert code == 0
        result = json.loads(out)["result"]
        assert result["passed"]
        assert "conv2d" in result["ops"]


class TestEmit(unittest.TestCase):
    """Output formatting."""

    def test_table_aligns_columns(self) -> None:
        """Test aligning table columns."""
        stream = io.StringIO()
        emit("analyze", {"columns": ["name", "x"], "rows": [["a", 1.5], ["bbb", 2.0]]}, "table", stream)
        lines = stream.getvalue().splitlines()
        assert lines == ["name  x", "a     1.5", "bbb   2"]


if __name__ == "__main__":
    unittest.main()
