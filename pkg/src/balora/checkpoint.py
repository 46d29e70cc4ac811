"""Checkpoint container: JSON header plus raw little-endian float64 arrays.

Layout: 8-byte magic, uint64-LE header length, UTF-8 JSON header, then the
arrays back to back in the order declared by the header's ``arrays``
manifest. Layer checkpoints carry {d, k, r, lora_scale, alpha_min,
alpha_max, seed} and the arrays W0, WA, WB, then AlphaNet parameters;
model checkpoints describe a full backbone + adapters + head.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .adapter import AlphaNet, BaLoRALayer
from .model import AdaptedModel, BackboneSpec, ToyBackbone
from .rng import Rng
from .tensor import Tensor, TensorError

MAGIC = b"BALORA1\n"


class CheckpointError(TensorError):
    """Unreadable, truncated, or inconsistent checkpoint file."""


def _write(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint: {err}") from err
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from err
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated array data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError("trailing bytes after declared arrays")
    return header, arrays


def _alphanet_arrays(net: AlphaNet, prefix: str = "alphanet") -> list[tuple[str, np.ndarray]]:
    out = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out.append((f"{prefix}.w{i}", w.data))
        out.append((f"{prefix}.b{i}", b.data))
    return out


def _alphanet_meta(net: AlphaNet) -> dict:
    return {"feature_dim": net.feature_dim, "num_layers": net.num_layers,
            "hidden_dims": list(net.hidden_dims), "alpha_min": net.alpha_min,
            "alpha_max": net.alpha_max}


def _load_alphanet(meta: dict, arrays: dict, prefix: str = "alphanet") -> AlphaNet:
    net = AlphaNet(feature_dim=int(meta["feature_dim"]), num_layers=int(meta["num_layers"]),
                   hidden_dims=tuple(int(h) for h in meta["hidden_dims"]),
                   alpha_min=float(meta["alpha_min"]), alpha_max=float(meta["alpha_max"]))
    i = 0
    while f"{prefix}.w{i}" in arrays:
        net.weights.append(Tensor(arrays[f"{prefix}.w{i}"], requires_grad=True))
        net.biases.append(Tensor(arrays[f"{prefix}.b{i}"], requires_grad=True))
        i += 1
    return net


# -- single layer ---------------------------------------------------------------


def save_layer(path, layer: BaLoRALayer, alphanet: Optional[AlphaNet] = None) -> None:
    header = {"kind": "layer", "d": layer.d, "k": layer.k, "r": layer.rank,
              "lora_scale": layer.lora_scale, "alpha_min": layer.alpha_min,
              "alpha_max": layer.alpha_max, "seed": layer.seed}
    arrays = [("W0", layer.W0.data), ("WA", layer.WA.data), ("WB", layer.WB.data)]
    if alphanet is not None:
        header["alphanet"] = _alphanet_meta(alphanet)
        arrays.extend(_alphanet_arrays(alphanet))
    _write(path, header, arrays)


def load_layer(path) -> tuple[BaLoRALayer, Optional[AlphaNet]]:
    header, arrays = _read(path)
    if header.get("kind") != "layer":
        raise CheckpointError(f"expected a layer checkpoint, got kind={header.get('kind')}")
    for name in ("W0", "WA", "WB"):
        if name not in arrays:
            raise CheckpointError(f"layer checkpoint missing array {name}")
    layer = BaLoRALayer(
        W0=Tensor(arrays["W0"]),
        WA=Tensor(arrays["WA"], requires_grad=True),
        WB=Tensor(arrays["WB"], requires_grad=True),
        rank=int(header["r"]), lora_scale=float(header["lora_scale"]),
        alpha_min=float(header["alpha_min"]), alpha_max=float(header["alpha_max"]),
        seed=int(header["seed"]))
    net = _load_alphanet(header["alphanet"], arrays) if "alphanet" in header else None
    return layer, net


# -- full model -------------------------------------------------------------------


def save_model(path, model: AdaptedModel, extra: Optional[dict] = None) -> None:
    spec = model.backbone.spec
    header = {
        "kind": "model",
        "adapter_kind": model.kind,
        "backbone": {"d_in": spec.d_in, "d_out": spec.d_out,
                     "hidden": list(spec.hidden), "head": spec.head},
        "adapters": {str(i): {"d": l.d, "k": l.k, "r": l.rank,
                              "lora_scale": l.lora_scale, "alpha_min": l.alpha_min,
                              "alpha_max": l.alpha_max, "seed": l.seed}
                     for i, l in model.adapters.items()},
        "has_log_sigma": model.log_sigma is not None,
        "extra": extra or {},
    }
    arrays: list[tuple[str, np.ndarray]] = []
    for i, (w, b) in enumerate(zip(model.backbone.weights, model.backbone.biases)):
        arrays.append((f"backbone.w{i}", w.data))
        arrays.append((f"backbone.b{i}", b.data))
    for i, layer in model.adapters.items():
        arrays.append((f"adapter{i}.WA", layer.WA.data))
        arrays.append((f"adapter{i}.WB", layer.WB.data))
    if model.alphanet is not None:
        header["alphanet"] = _alphanet_meta(model.alphanet)
        arrays.extend(_alphanet_arrays(model.alphanet))
    if model.log_sigma is not None:
        arrays.append(("log_sigma", model.log_sigma.data))
    _write(path, header, arrays)


def load_model(path) -> tuple[AdaptedModel, dict]:
    header, arrays = _read(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"expected a model checkpoint, got kind={header.get('kind')}")
    meta = header["backbone"]
    spec = BackboneSpec(d_in=int(meta["d_in"]), d_out=int(meta["d_out"]),
                        hidden=tuple(int(h) for h in meta["hidden"]), head=meta["head"])
    backbone = ToyBackbone(spec, Rng(0))
    n_layers = backbone.n_layers
    backbone.weights = []
    backbone.biases = []
    for i in range(n_layers):
        try:
            backbone.weights.append(Tensor(arrays[f"backbone.w{i}"]))
            backbone.biases.append(Tensor(arrays[f"backbone.b{i}"]))
        except KeyError as err:
            raise CheckpointError(f"model checkpoint missing array {err}") from None
    backbone.frozen = True
    adapters = {}
    for key, ameta in header.get("adapters", {}).items():
        i = int(key)
        adapters[i] = BaLoRALayer(
            W0=backbone.weights[i],
            WA=Tensor(arrays[f"adapter{i}.WA"], requires_grad=True),
            WB=Tensor(arrays[f"adapter{i}.WB"], requires_grad=True),
            rank=int(ameta["r"]), lora_scale=float(ameta["lora_scale"]),
            alpha_min=float(ameta["alpha_min"]), alpha_max=float(ameta["alpha_max"]),
            seed=int(ameta["seed"]))
    alphanet = _load_alphanet(header["alphanet"], arrays) if "alphanet" in header else None
    model = AdaptedModel(backbone, adapters, alphanet, header["adapter_kind"])
    if header.get("has_log_sigma") and "log_sigma" in arrays:
        model.log_sigma = Tensor(arrays["log_sigma"], requires_grad=True)
    return model, header.get("extra", {})
