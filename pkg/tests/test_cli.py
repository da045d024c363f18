"""Command-line interface: the three subcommands and their failure exits."""

import numpy as np
import pytest

from lalign.cli import main
from lalign.metrics import parse_metrics_csv
from lalign.synthdata import load_dataset

RUN_CFG = """
seed = 11
run_id = clirun
stages = [gen_data, pretrain_teacher, probe]
data.grid = 4
data.patch_size = 4
data.num_classes = 6
data.classes_min = 1
data.classes_max = 3
data.align_count = 16
data.probe_train_count = 12
data.probe_eval_count = 8
model.dim = 16
model.depth = 2
model.heads = 2
teacher.epochs = 1
teacher.warmup_steps = 1
probe.epochs = 1
probe.warmup_steps = 1
probe.targets = [teacher]
"""

SPEC_CFG = """
grid_rows = 4
grid_cols = 4
patch_size = 4
num_classes = 6
classes_min = 1
classes_max = 3
"""


@pytest.fixture
def run_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(RUN_CFG)
    return path


class TestGenData:
    def test_writes_loadable_dataset(self, tmp_path):
        spec = tmp_path / "spec.cfg"
        spec.write_text(SPEC_CFG)
        out = tmp_path / "ds.lads"
        rc = main(["gen-data", str(spec), "--count", "5", "--seed", "3", "--out", str(out)])
        assert rc == 0
        assert len(load_dataset(out)) == 5

    def test_deterministic_across_invocations(self, tmp_path):
        spec = tmp_path / "spec.cfg"
        spec.write_text(SPEC_CFG)
        main(["gen-data", str(spec), "--count", "3", "--seed", "9", "--out", str(tmp_path / "a.lads")])
        main(["gen-data", str(spec), "--count", "3", "--seed", "9", "--out", str(tmp_path / "b.lads")])
        assert (tmp_path / "a.lads").read_bytes() == (tmp_path / "b.lads").read_bytes()

    def test_bad_spec_exits_nonzero(self, tmp_path, capsys):
        spec = tmp_path / "spec.cfg"
        spec.write_text("grid_rowz = 4\n")
        rc = main(["gen-data", str(spec), "--count", "1", "--seed", "0",
                   "--out", str(tmp_path / "x.lads")])
        assert rc == 1 and "error:" in capsys.readouterr().err


class TestRun:
    def test_full_run_and_inspect(self, tmp_path, run_cfg, capsys):
        out = tmp_path / "out"
        assert main(["run", str(run_cfg), "--out", str(out)]) == 0
        rows = parse_metrics_csv(out / "metrics.csv")
        assert any(r.stage == "probe" for r in rows)
        assert main(["inspect", str(out / "ckpt_pretrain_teacher.laln")]) == 0
        printed = capsys.readouterr().out
        assert "model.teacher.patch_proj.w" in printed and "fingerprint" in printed

    def test_seed_override_changes_fingerprint(self, tmp_path, run_cfg):
        main(["run", str(run_cfg), "--out", str(tmp_path / "a")])
        main(["run", str(run_cfg), "--out", str(tmp_path / "b"), "--seed", "12"])
        rows = parse_metrics_csv(tmp_path / "b" / "metrics.csv")
        assert all(r.seed == 12 for r in rows)

    def test_threads_env_fallback(self, tmp_path, run_cfg, monkeypatch):
        monkeypatch.setenv("LALIGN_THREADS", "2")
        assert main(["run", str(run_cfg), "--out", str(tmp_path / "env")]) == 0

    def test_resume_via_cli(self, tmp_path, run_cfg):
        out = tmp_path / "resume"
        assert main(["run", str(run_cfg), "--out", str(out)]) == 0
        assert main(["run", str(run_cfg), "--out", str(out),
                     "--resume", str(out / "checkpoint.laln")]) == 0

    def test_missing_config_exits_nonzero(self, tmp_path, capsys):
        rc = main(["run", str(tmp_path / "nope.cfg")])
        assert rc == 1 and "error:" in capsys.readouterr().err

    def test_invalid_stage_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("seed = 1\nstages = [warp_drive]\n")
        rc = main(["run", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1 and "unknown stage" in capsys.readouterr().err


class TestInspect:
    def test_bad_file_exits_nonzero(self, tmp_path, capsys):
        junk = tmp_path / "junk.laln"
        junk.write_bytes(b"JUNKJUNK")
        rc = main(["inspect", str(junk)])
        assert rc == 1 and "error:" in capsys.readouterr().err
