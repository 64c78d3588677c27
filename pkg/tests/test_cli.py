from __future__ import annotations

import hashlib
import json

import pytest

from tgd import config as C
from tgd.cli import ALPHA_SWEEP, run
from tgd.data import read_pi_cache
from tgd.errors import ConfigError

TINY = """
data.source=bars
data.n_train=96
data.n_test=24
data.size=12
data.label_noise=0.1
pi.grid_size=8
teacher1.num_blocks=2
teacher2.num_blocks=2
student.num_blocks=2
distill.epochs=2
distill.batch_size=16
distill.lr=0.05
distill.lr_decay_epochs=1,
distill.grad_clip=2.0
distill.val_fraction=0.25
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    base = ["--config", str(cfg), "--out", str(out)]
    steps = [
        ["extract"],
        ["train-teacher", "--modality", "raw"],
        ["train-teacher", "--modality", "pi"],
        ["distill", "distill.mode=scratch"],
        ["distill", "distill.mode=kd_single"],
        ["distill", "distill.mode=tgd"],
    ]
    for step in steps:
        assert run([step[0], *base, *step[1:]]) == 0, step
    return root, cfg, out, base


class TestConfig:
    def test_round_trip(self):
        cfg = C.build_config(C.parse_lines(TINY)).resolved()
        again = C.build_config(C.parse_lines(C.dump_config(cfg)))
        assert C.dump_config(again) == C.dump_config(cfg)

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("distill.lr=0.5\nrun.seed=3\n")
        cfg = C.load_config(path, {"distill.lr": "0.25"})
        assert cfg.distill.lr == 0.25 and cfg.run.seed == 3

    def test_mode_resolves_alpha(self):
        assert C.build_config({"distill.mode": "base"}).distill.alpha == 0.9
        assert C.build_config({"distill.mode": "base", "distill.alpha": "0.4"}).distill.alpha == 0.4

    @pytest.mark.parametrize("values", [{"nosection": "1"}, {"distill.bogus": "1"}, {"distill.epochs": "2.5"}, {"distill.eskd": "maybe"}, {"distill.seed": "1"}, {"data.source": "mnist"}])
    def test_rejects(self, values):
        with pytest.raises(ConfigError):
            C.build_config(values)

    def test_float_repr_exact(self):
        cfg = C.build_config({"distill.lr": "0.1"})
        text = C.dump_config(cfg)
        assert "distill.lr=0.1\n" in text and "distill.weight_decay=0.0001\n" in text


class TestCommands:
    def test_outputs_and_configs(self, pipeline):
        root, cfg, out, base = pipeline
        for name in ("extract", "teacher1", "teacher2", "distill"):
            assert (out / f"{name}.config").exists()
        for stem in ("teacher1", "teacher2", "student_scratch", "student_kd_single", "student_tgd"):
            assert (out / f"{stem}.ckpt").exists() and (out / f"{stem}.metrics.csv").exists()
        assert not list(out.glob("*.tmp"))
        assert len(read_pi_cache(out / "pi_cache.bin")) == 96

    def test_extract_idempotent(self, pipeline):
        root, cfg, out, base = pipeline
        digest = hashlib.sha256((out / "pi_cache.bin").read_bytes()).hexdigest()
        assert run(["extract", *base]) == 0
        assert hashlib.sha256((out / "pi_cache.bin").read_bytes()).hexdigest() == digest

    def test_row_only_cache(self, pipeline, tmp_path):
        root, cfg, out, base = pipeline
        assert run(["extract", "--config", str(cfg), "--out", str(tmp_path), "pi.channel_mode=row_only"]) == 0
        assert read_pi_cache(tmp_path / "pi_cache.bin").grids.shape[1] == 3

    def test_tgd_logs_all_loss_columns(self, pipeline):
        root, cfg, out, base = pipeline
        last = (out / "student_tgd.metrics.csv").read_text().splitlines()[-1].split(",")
        assert len(last) == 8 and all(float(v) > 0 for v in last[2:5])

    def test_kd_single_is_degenerate_tgd(self, pipeline, tmp_path):
        root, cfg, out, base = pipeline
        args = ["--config", str(cfg), "--out", str(tmp_path), f"run.teacher1_ckpt={out / 'teacher1.ckpt'}", f"run.teacher2_ckpt={out / 'teacher2.ckpt'}", f"run.pi_cache={out / 'pi_cache.bin'}"]
        assert run(["distill", *args, "distill.mode=tgd", "distill.alpha=1.0", "distill.gamma=0.0", "distill.anneal=false"]) == 0
        assert (tmp_path / "student_tgd.metrics.csv").read_bytes() == (out / "student_kd_single.metrics.csv").read_bytes()

    @pytest.mark.parametrize("name", ["teacher1", "distill"])
    def test_rerun_from_resolved_config(self, pipeline, tmp_path, name):
        root, cfg, out, base = pipeline
        command = ["train-teacher", "--modality", "raw"] if name == "teacher1" else ["distill"]
        resolved = out / f"{name}.config"
        # the resolved file pins the original checkpoint paths; write the rerun's own checkpoints elsewhere
        extra = [f"run.teacher1_ckpt={tmp_path / 't1.ckpt'}"] if name == "teacher1" else []
        assert run([command[0], "--config", str(resolved), "--out", str(tmp_path), *command[1:], *extra]) == 0
        stem = "teacher1" if name == "teacher1" else "student_tgd"
        assert (tmp_path / f"{stem}.metrics.csv").read_bytes() == (out / f"{stem}.metrics.csv").read_bytes()

    def test_eval_report(self, pipeline):
        root, cfg, out, base = pipeline
        ckpt = str(out / "student_tgd.ckpt")
        assert run(["eval", *base, "--checkpoint", ckpt, "--noise-level", "4"]) == 0
        first = (out / "eval_student_noise4.json").read_bytes()
        assert run(["eval", *base, "--checkpoint", ckpt, "--noise-level", "4"]) == 0
        assert (out / "eval_student_noise4.json").read_bytes() == first
        report = json.loads(first)
        assert report["noise_level"] == 4 and set(report) == {"accuracy", "ece", "nll", "nll_clamped", "num_samples", "noise_level", "noise_seed", "checkpoint"}
        assert run(["eval", *base, "--checkpoint", str(out / "teacher2.ckpt"), "--role", "teacher2"]) == 0

    def test_eval_spec_mismatch(self, pipeline):
        root, cfg, out, base = pipeline
        assert run(["eval", *base, "--checkpoint", str(out / "teacher1.ckpt")]) == 3

    def test_export_sim(self, pipeline):
        root, cfg, out, base = pipeline
        assert run(["export-sim", *base, "--student", str(out / "student_tgd.ckpt"), "--batch-size", "8"]) == 0
        assert len(list((out / "similarity_layer1").glob("*.pgm"))) == 4
        assert run(["export-sim", *base, "--student", str(out / "student_tgd.ckpt"), "--layer", "5"]) == 2

    def test_alpha_sweep(self, pipeline, tmp_path):
        root, cfg, out, base = pipeline
        args = ["--config", str(cfg), "--out", str(tmp_path), "distill.mode=base", "distill.epochs=1"]
        args += [f"run.teacher1_ckpt={out / 'teacher1.ckpt'}", f"run.teacher2_ckpt={out / 'teacher2.ckpt'}", f"run.pi_cache={out / 'pi_cache.bin'}"]
        assert run(["distill", *args, "--alpha-sweep"]) == 0
        dirs = sorted(p.name for p in tmp_path.glob("alpha_*"))
        assert dirs == sorted(f"alpha_{a}" for a in ALPHA_SWEEP)
        assert "distill.alpha=0.3\n" in (tmp_path / "alpha_0.3" / "distill.config").read_text()

    def test_error_exit_codes(self, pipeline, tmp_path):
        root, cfg, out, base = pipeline
        assert run(["distill", *base, "distill.lam=2"]) == 2
        assert run(["distill", "--config", str(tmp_path / "missing.cfg")]) == 2
        assert run(["distill", "--config", str(cfg), "--out", str(tmp_path), "distill.mode=kd_single"]) == 3
        assert run(["distill", "--config", str(cfg), "--out", str(tmp_path), "distill.mode=tgd"]) == 3
        (tmp_path / "bad.bin").write_bytes(b"\0" * 100)
        assert run(["extract", "--config", str(cfg), "--out", str(tmp_path), "data.source=cifar", f"data.path={tmp_path / 'bad.bin'}"]) == 3

    def test_gradcheck_command(self, tmp_path, capsys):
        assert run(["gradcheck", "--out", str(tmp_path), "--instances", "1"]) == 0
        assert "loss_total_tgd,0," in capsys.readouterr().out
        assert run(["gradcheck", "--out", str(tmp_path), "--instances", "1", "--tol", "1e-30"]) == 4
