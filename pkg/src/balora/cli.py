"""Command-line surface: train, eval, sample, bench, verify.

Every run writes a manifest before doing work and finalizes it on exit.
Exit codes: 0 success, 1 verification/assertion failure, 2 configuration
error, 3 I/O or corrupt-artifact error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as B
from . import checkpoint as CK
from . import config as C
from . import tasks as TK
from . import uncertainty as U
from . import verify as VF
from .rng import Rng
from .tensor import TensorError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _thread_cap():
    """Honor BALORA_THREADS by capping BLAS worker pools for the process."""
    raw = os.environ.get("BALORA_THREADS", "")
    if not raw:
        return contextlib.nullcontext()
    try:
        limit = max(1, int(raw))
    except ValueError:
        raise C.ConfigError(f"BALORA_THREADS must be an integer, got {raw!r}")
    if B.threadpool_limits is None:
        return contextlib.nullcontext()
    return B.threadpool_limits(limits=limit)


class _Manifest:
    """Run manifest written before work starts and finalized on exit."""

    def __init__(self, out_dir: Path, command: str, config_path, seed):
        self.path = out_dir / "manifest.json"
        self.data = {
            "command": command,
            "config_path": str(config_path) if config_path else None,
            "seed": seed,
            "version": __version__,
            "started": _now(),
            "finished": None,
            "outputs": [],
            "status": "running",
            "error": None,
        }
        self._flush()

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def finish(self, status: str, error: str = None) -> None:
        self.data["status"] = status
        self.data["error"] = error
        self.data["finished"] = _now()
        self._flush()

    def _flush(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _prepare_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_split_csv(path: Path, split: TK.Split) -> None:
    X = np.atleast_2d(split.X)
    y = np.atleast_2d(np.asarray(split.y, dtype=np.float64).reshape(X.shape[0], -1))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(X.shape[1])]
                        + [f"y{i}" for i in range(y.shape[1])])
        for xi, yi in zip(X, y):
            writer.writerow([repr(v) for v in xi] + [repr(v) for v in yi])


def _config_echo(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _prepare_out(args.out)
    manifest = _Manifest(out, "train", args.config, cfg["seed"])
    try:
        task = C.task_from_config(cfg)
        aspec = C.adapter_spec_from_config(cfg)
        pre_cfg, adapt_cfg, prior = C.train_configs_from_config(cfg)
        trained = TK.pretrain_then_adapt(task, cfg["hidden"], aspec, cfg["adapter"],
                                         pre_cfg, adapt_cfg, prior, seed=cfg["seed"])
        for name, split in (("train", trained.target.train), ("val", trained.target.val),
                            ("test", trained.target.test)):
            path = out / f"{name}.csv"
            _write_split_csv(path, split)
            manifest.add_output(path)
        metrics_path = out / "metrics.jsonl"
        with open(metrics_path, "w") as fh:
            for record in trained.adapt_records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        manifest.add_output(metrics_path)
        ckpt_path = out / "checkpoint.bin"
        CK.save_model(ckpt_path, trained.model, extra={"config": _config_echo(cfg)})
        manifest.add_output(ckpt_path)
        manifest.finish("ok")
        final = trained.adapt_records[-1]
        print(f"trained {cfg['adapter']} on {task.kind}: "
              f"final loss {final['loss']:.6f} (nll {final['nll']:.6f}, "
              f"kl {final['kl_normalized']:.6f}) -> {ckpt_path}")
        return EXIT_OK
    except Exception as err:
        manifest.finish("error", str(err))
        raise


def _eval_splits(cfg: dict):
    task = C.task_from_config(cfg)
    return task, TK.generate(task, shifted=True)


def cmd_eval(args) -> int:
    out = _prepare_out(args.out)
    try:
        model, extra = CK.load_model(args.checkpoint)
    except CK.CheckpointError:
        _Manifest(out, "eval", args.config, None).finish("error", "corrupt checkpoint")
        raise
    cfg = C.load_config(args.config) if args.config else C.parse_config("")
    if not args.config and "config" in extra:
        stored = {k: (tuple(v) if isinstance(v, list) else v) for k, v in extra["config"].items()}
        cfg.update(stored)
        cfg["adapt_layers"] = None if stored.get("adapt_layers") in (None, "all") \
            else tuple(stored["adapt_layers"])
    manifest = _Manifest(out, "eval", args.config, cfg["seed"])
    try:
        task, splits = _eval_splits(cfg)
        X, y = splits.test.X, splits.test.y
        if args.mode == "deterministic":
            layered = model.predict(X)
            merged = model.merged_forward(X)
            scale = max(1.0, float(np.max(np.abs(layered))))
            gap = float(np.max(np.abs(layered - merged))) / scale
            if gap > 1e-12:
                manifest.finish("error", f"merge equivalence violated: {gap:.3e}")
                print(f"merge-equivalence assertion failed: {gap:.3e}", file=sys.stderr)
                return EXIT_VERIFY
            if task.is_classification:
                probs = U._softmax(merged)
                metrics = {"accuracy": U.accuracy(probs, y), "ece": U.ece(probs, y)}
            else:
                y2 = np.asarray(y, dtype=np.float64).reshape(merged.shape)
                metrics = {"mse": float(np.mean((merged - y2) ** 2)),
                           "mae": U.mae(merged.ravel(), y2.ravel())}
            payload = {"mode": "deterministic", "merge_gap": gap, "metrics": metrics}
            report_path = out / "eval.json"
            report_path.write_text(json.dumps(payload, sort_keys=True) + "\n")
        else:
            if args.mc_steps < 2:
                raise C.ConfigError("mc mode needs --mc-steps >= 2", key="mc_steps")
            report = U.uq_report(model, X, y, args.mc_steps, Rng(cfg["seed"]).stream_of(7))
            report_path = out / "eval.json"
            report_path.write_text(report.to_json() + "\n")
            if args.csv:
                csv_path = out / "eval.csv"
                with open(csv_path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["id", "pred", "target", "var_total", "var_epi",
                                     "var_ale", "sq_error"])
                    writer.writerows(report.csv_rows())
                manifest.add_output(csv_path)
        manifest.add_output(report_path)
        manifest.finish("ok")
        print(f"eval ({args.mode}) written to {report_path}")
        return EXIT_OK
    except Exception as err:
        manifest.finish("error", str(err))
        raise


def cmd_sample(args) -> int:
    out = _prepare_out(args.out)
    manifest = _Manifest(out, "sample", None, args.seed)
    try:
        model, extra = CK.load_model(args.checkpoint)
        d_in = model.backbone.spec.d_in
        if args.input:
            x = np.asarray([float(v) for v in args.input.split(",")])
            if x.shape != (d_in,):
                raise C.ConfigError(f"--input needs {d_in} comma-separated floats")
        else:
            x = Rng(args.seed).normal((d_in,))
        rng = Rng(args.seed).stream_of(11)
        draws = U._stochastic_draws(model, x, args.n, rng)[:, 0, :]
        payload = {
            "input": [float(v) for v in x],
            "deterministic": [float(v) for v in model.predict(x[None, :])[0]],
            "samples": [[float(v) for v in row] for row in draws],
        }
        path = out / "samples.json"
        path.write_text(json.dumps(payload, sort_keys=True) + "\n")
        manifest.add_output(path)
        manifest.finish("ok")
        print(f"{args.n} samples written to {path}")
        return EXIT_OK
    except Exception as err:
        manifest.finish("error", str(err))
        raise


def cmd_bench(args) -> int:
    out = _prepare_out(args.out)
    manifest = _Manifest(out, "bench", None, args.seed)
    try:
        k_values = [int(v) for v in args.k_range.split(",")]
        if any(k < 1 for k in k_values):
            raise C.ConfigError("--k-range values must be positive")
        rows, slopes = B.run_bench(k_values, r=args.r, n_samples=args.samples,
                                   reps=args.reps, seed=args.seed)
        csv_path = out / "bench.csv"
        B.write_csv(csv_path, rows)
        slopes_path = out / "slopes.json"
        slopes_path.write_text(json.dumps(slopes, sort_keys=True) + "\n")
        manifest.add_output(csv_path)
        manifest.add_output(slopes_path)
        manifest.finish("ok")
        for method, slope in slopes.items():
            print(f"{method}: log-log slope vs k = {slope:.3f}")
        return EXIT_OK
    except Exception as err:
        manifest.finish("error", str(err))
        raise


def cmd_verify(args) -> int:
    out = _prepare_out(args.out) if args.out else None
    manifest = _Manifest(out, "verify", None, args.seed) if out else None
    results = VF.run_oracles(args.filter or "", seed=args.seed)
    failures = [r for r in results if not r.passed]
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"[{flag}] {r.name} ({r.family}): measured {r.measured:.3e} "
              f"vs tolerance {r.tolerance:.3e}")
    if out:
        path = out / "verify.json"
        path.write_text(json.dumps([r.as_dict() for r in results], indent=2,
                                   sort_keys=True) + "\n")
        manifest.add_output(path)
        manifest.finish("ok" if not failures else "failed")
        print(f"summary written to {path}")
    if failures:
        print("failed oracles: " + ", ".join(r.name for r in failures), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balora",
        description="Bayesian low-rank adaptation: train, evaluate, sample, "
                    "benchmark, and verify against brute-force oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="pretrain a backbone and train adapters")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the task test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", default=None,
                        help="task config; defaults to the one stored in the checkpoint")
    p_eval.add_argument("--mode", choices=("deterministic", "mc"), default="mc")
    p_eval.add_argument("--mc-steps", type=int, default=100)
    p_eval.add_argument("--csv", action="store_true")
    p_eval.add_argument("--out", required=True)

    p_sample = sub.add_parser("sample", help="draw stochastic outputs for one input")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, default=16)
    p_sample.add_argument("--input", default=None)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True)

    p_bench = sub.add_parser("bench", help="time low-rank vs dense-covariance sampling")
    p_bench.add_argument("--k-range", default="64,128,256,512,1024,2048")
    p_bench.add_argument("--r", type=int, default=8)
    p_bench.add_argument("--samples", type=int, default=4096,
                         help="draws per timed call on the low-rank arm; the dense "
                              "arm caps at 256 so factorization cost dominates")
    p_bench.add_argument("--reps", type=int, default=9)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True)

    p_verify = sub.add_parser("verify", help="run the brute-force oracle suite")
    p_verify.add_argument("--filter", default="")
    p_verify.add_argument("--seed", type=int, default=VF.DEFAULT_SEED)
    p_verify.add_argument("--out", default=None)
    return parser


_HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
             "bench": cmd_bench, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap():
            return _HANDLERS[args.command](args)
    except C.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CK.CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (TensorError, AssertionError) as err:
        print(f"verification error: {err}", file=sys.stderr)
        return EXIT_VERIFY


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
