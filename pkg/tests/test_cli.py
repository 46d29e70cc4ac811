"""CLI contract tests: exit codes, determinism, manifests, and fault injection."""

import json
import subprocess
import sys

import numpy as np
import pytest

from balora import variational
from balora.cli import main
from balora.config import ConfigError, load_config, parse_config

FAST_CONFIG = """
task = heteroscedastic-regression
d_in = 4
d_out = 1
n_train = 96
n_val = 16
n_test = 64
hidden = 12,12
adapter = balora
rank = 2
lora_alpha = 4.0
alphanet_hidden = 6
prior_p = 0.5
kl_weight = 1.0
lr = 0.01
epochs = 3
batch_size = 32
pretrain_epochs = 4
seed = 3
"""


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "fast.cfg"
    path.write_text(FAST_CONFIG)
    return path


def _train(tmp_path, fast_config, name="run", extra=()):
    out = tmp_path / name
    code = main(["train", "--config", str(fast_config), "--out", str(out), *extra])
    return code, out


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = parse_config("lr = 0.5\nhidden = 8,8,8\nadapt_layers = all\n")
        assert cfg["lr"] == 0.5
        assert cfg["hidden"] == (8, 8, 8)
        assert cfg["adapt_layers"] is None
        assert cfg["epochs"] == 10  # untouched default

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as err:
            parse_config("learning_rate = 0.1\n")
        assert "learning_rate" in str(err.value)
        assert err.value.key == "learning_rate"

    def test_bad_value_named(self):
        with pytest.raises(ConfigError) as err:
            parse_config("epochs = many\n")
        assert "epochs" in str(err.value)

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# a comment\n\nlr = 0.25  # trailing\n")
        assert cfg["lr"] == 0.25

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")


class TestTrain:
    def test_deterministic_metrics(self, tmp_path, fast_config):
        code1, out1 = _train(tmp_path, fast_config, "a")
        code2, out2 = _train(tmp_path, fast_config, "b")
        assert code1 == 0 and code2 == 0
        assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()

    def test_deterministic_across_processes(self, tmp_path, fast_config):
        _, out1 = _train(tmp_path, fast_config, "inproc")
        out2 = tmp_path / "subproc"
        code = ("import sys; from balora.cli import main; "
                f"sys.exit(main(['train', '--config', r'{fast_config}', "
                f"'--out', r'{out2}']))")
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()

    def test_missing_config_exits_2(self, tmp_path):
        code = main(["train", "--config", str(tmp_path / "no.cfg"),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("learning_rate = 0.1\n")
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_outputs_and_manifest(self, tmp_path, fast_config):
        _, out = _train(tmp_path, fast_config)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["command"] == "train"
        assert manifest["started"] <= manifest["finished"]
        for name in ("checkpoint.bin", "metrics.jsonl", "train.csv", "test.csv"):
            assert (out / name).exists()
        lines = (out / "metrics.jsonl").read_text().splitlines()
        record = json.loads(lines[0])
        for key in ("loss", "nll", "kl_normalized", "alpha_per_layer", "lr"):
            assert key in record

    def test_kl_weight_zero_logged_but_excluded(self, tmp_path, fast_config):
        cfg = tmp_path / "klzero.cfg"
        cfg.write_text(FAST_CONFIG + "kl_weight = 0.0\n")
        code, out = _train(tmp_path, cfg, "klzero")
        assert code == 0
        record = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
        assert record["kl_normalized"] > 0.0
        assert record["loss"] == pytest.approx(record["nll"])


class TestEval:
    def test_both_modes_and_determinism(self, tmp_path, fast_config):
        _, out = _train(tmp_path, fast_config)
        ckpt = out / "checkpoint.bin"
        det = tmp_path / "det"
        code = main(["eval", "--checkpoint", str(ckpt), "--mode", "deterministic",
                     "--out", str(det)])
        assert code == 0
        payload = json.loads((det / "eval.json").read_text())
        assert payload["mode"] == "deterministic"
        assert payload["merge_gap"] <= 1e-12
        mc1, mc2 = tmp_path / "mc1", tmp_path / "mc2"
        for out_dir in (mc1, mc2):
            code = main(["eval", "--checkpoint", str(ckpt), "--mode", "mc",
                         "--mc-steps", "16", "--csv", "--out", str(out_dir)])
            assert code == 0
        assert (mc1 / "eval.json").read_bytes() == (mc2 / "eval.json").read_bytes()
        header = (mc1 / "eval.csv").read_text().splitlines()[0]
        assert header == "id,pred,target,var_total,var_epi,var_ale,sq_error"

    def test_mc_steps_below_two_exits_2(self, tmp_path, fast_config):
        _, out = _train(tmp_path, fast_config)
        code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                     "--mode", "mc", "--mc-steps", "1", "--out", str(tmp_path / "x")])
        assert code == 2

    def test_corrupt_checkpoint_exits_3(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"garbage bytes that are not a checkpoint")
        code = main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "x")])
        assert code == 3


class TestSample:
    def test_samples_written(self, tmp_path, fast_config):
        _, out = _train(tmp_path, fast_config)
        code = main(["sample", "--checkpoint", str(out / "checkpoint.bin"),
                     "--n", "8", "--out", str(tmp_path / "s")])
        assert code == 0
        payload = json.loads((tmp_path / "s" / "samples.json").read_text())
        assert len(payload["samples"]) == 8
        assert len(payload["input"]) == 4


class TestBench:
    def test_csv_schema_and_slopes(self, tmp_path):
        out = tmp_path / "bench"
        code = main(["bench", "--k-range", "16,32,64", "--r", "2",
                     "--samples", "32", "--reps", "2", "--out", str(out)])
        assert code == 0
        lines = (out / "bench.csv").read_text().splitlines()
        assert lines[0] == "k,r,method,median_ns,p10_ns,p90_ns"
        assert len(lines) == 1 + 3 * 2
        slopes = json.loads((out / "slopes.json").read_text())
        assert set(slopes) == {"lowrank", "full_cov"}


class TestVerify:
    def test_filter_runs_subset(self, tmp_path, capsys):
        code = main(["verify", "--filter", "merge", "--out", str(tmp_path / "v")])
        assert code == 0
        results = json.loads((tmp_path / "v" / "verify.json").read_text())
        assert [r["name"] for r in results] == ["merge_equivalence"]

    def test_covariance_filter(self, capsys):
        code = main(["verify", "--filter", "covariance"])
        assert code == 0
        out = capsys.readouterr().out
        assert "covariance_mc_match" in out
        assert "sampler_equivalence" in out
        assert "merge_equivalence" not in out

    def test_full_suite_passes_within_budget(self, tmp_path):
        import time
        t0 = time.perf_counter()
        code = main(["verify", "--out", str(tmp_path / "full")])
        elapsed = time.perf_counter() - t0
        assert code == 0
        assert elapsed < 300.0
        results = json.loads((tmp_path / "full" / "verify.json").read_text())
        assert all(r["passed"] for r in results)
        assert len(results) == 9

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("BALORA_THREADS", "1")
        assert main(["verify", "--filter", "kl_minimum"]) == 0
        monkeypatch.setenv("BALORA_THREADS", "lots")
        assert main(["verify", "--filter", "kl_minimum"]) == 2

    def test_sign_flip_in_kl_caught(self, monkeypatch, capsys):
        real = variational.kl_per_entry

        def flipped(alpha, p, alpha_min=1e-6, alpha_max=1e3):
            value = real(alpha, p, alpha_min, alpha_max)
            return -value

        monkeypatch.setattr(variational, "kl_per_entry", flipped)
        code = main(["verify", "--filter", "kl_vs_quadrature"])
        assert code == 1
        captured = capsys.readouterr()
        assert "kl_vs_quadrature" in captured.err
