"""Flat ``key = value`` run configuration with typed parsing.

Unknown keys are rejected by name so config drift fails loudly. Blank
lines and ``#`` comments are allowed. The documented keys map one-to-one
onto the task, model, and training dataclasses.
"""

from __future__ import annotations

from pathlib import Path

from .model import AdapterSpec
from .tasks import KINDS, SyntheticTask
from .variational import PriorConfig, TrainConfig


class ConfigError(Exception):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _str(s: str) -> str:
    return s


def _choice(*options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {options}")
        return s
    return parse


def _int_list(s: str) -> tuple:
    if s.strip() == "":
        return ()
    return tuple(int(part) for part in s.split(","))


def _layers(s: str):
    if s.strip() == "all":
        return None
    return _int_list(s)


SCHEMA = {
    # task
    "task": (_choice(*KINDS), "heteroscedastic-regression"),
    "d_in": (_int, 6),
    "d_out": (_int, 1),
    "n_train": (_int, 512),
    "n_val": (_int, 128),
    "n_test": (_int, 256),
    "n_classes": (_int, 3),
    "noise_std": (_float, 0.1),
    "noise_base": (_float, 0.05),
    "noise_slope": (_float, 0.4),
    "shift_rank": (_int, 2),
    "shift_scale": (_float, 1.0),
    # model
    "hidden": (_int_list, (32, 32)),
    "adapter": (_choice("balora", "lora"), "balora"),
    "adapt_layers": (_layers, None),
    "rank": (_int, 4),
    "lora_alpha": (_float, 8.0),
    "init_std": (_float, 0.02),
    "init_alpha": (_float, 0.05),
    "alphanet_hidden": (_int_list, (16, 16)),
    "alpha_min": (_float, 1e-6),
    "alpha_max": (_float, 1e3),
    # objective
    "prior_p": (_float, 0.5),
    "kl_weight": (_float, 1.0),
    "nll": (_choice("gaussian", "l1"), "gaussian"),
    # optimization
    "lr": (_float, 1e-2),
    "epochs": (_int, 10),
    "batch_size": (_int, 64),
    "warmup_fraction": (_float, 0.1),
    "weight_decay": (_float, 0.0),
    "grad_clip_norm": (_float, 1.0),
    "seed": (_int, 0),
    "pretrain_lr": (_float, 1e-2),
    "pretrain_epochs": (_int, 30),
    "pretrain_batch_size": (_int, 64),
    # evaluation
    "mc_steps": (_int, 100),
}


def parse_config(text: str) -> dict:
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}", key=key)
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"invalid value for {key}: {value!r} ({err})", key=key) from err
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def format_config(cfg: dict) -> str:
    lines = []
    for key in SCHEMA:
        value = cfg[key]
        if value is None:
            value = "all"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- dataclass builders -----------------------------------------------------


def task_from_config(cfg: dict) -> SyntheticTask:
    return SyntheticTask(
        kind=cfg["task"], d_in=cfg["d_in"], d_out=cfg["d_out"],
        n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        n_classes=cfg["n_classes"], noise_std=cfg["noise_std"],
        noise_base=cfg["noise_base"], noise_slope=cfg["noise_slope"],
        shift_rank=cfg["shift_rank"], shift_scale=cfg["shift_scale"],
        seed=cfg["seed"])


def adapter_spec_from_config(cfg: dict) -> AdapterSpec:
    return AdapterSpec(
        rank=cfg["rank"], lora_alpha=cfg["lora_alpha"], init_std=cfg["init_std"],
        adapt_layers=cfg["adapt_layers"], alphanet_hidden=cfg["alphanet_hidden"],
        alpha_min=cfg["alpha_min"], alpha_max=cfg["alpha_max"],
        init_alpha=cfg["init_alpha"])


def train_configs_from_config(cfg: dict):
    pretrain = TrainConfig(lr=cfg["pretrain_lr"], epochs=cfg["pretrain_epochs"],
                           batch_size=cfg["pretrain_batch_size"], kl_weight=0.0,
                           warmup_fraction=0.0, weight_decay=0.0,
                           grad_clip_norm=cfg["grad_clip_norm"], seed=cfg["seed"],
                           nll=cfg["nll"])
    adapt = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                        kl_weight=cfg["kl_weight"], warmup_fraction=cfg["warmup_fraction"],
                        weight_decay=cfg["weight_decay"],
                        grad_clip_norm=cfg["grad_clip_norm"], seed=cfg["seed"],
                        nll=cfg["nll"])
    prior = PriorConfig(p=cfg["prior_p"])
    return pretrain, adapt, prior
