"""Shared test helpers."""

import numpy as np

from balora import adapter as A
from balora.model import AdaptedModel, BackboneSpec, ToyBackbone
from balora.rng import Rng
from balora.tensor import Tensor


def single_linear_model(seed: int, d: int = 3, k: int = 2, r: int = 1,
                        init_alpha: float = 0.8) -> AdaptedModel:
    """One adapted linear layer without activation: the predictive law of the
    whole model is exactly the layer's Gaussian, handy for exactness tests."""
    rng = Rng(seed)
    backbone = ToyBackbone(BackboneSpec(d_in=d, d_out=k, hidden=(), head="regression"),
                           rng.stream_of(0))
    backbone.biases = [Tensor(np.zeros(k), requires_grad=True)]
    backbone.freeze()
    layer = A.init_layer(rng.stream_of(1), d=d, k=k, r=r, init_std=0.6,
                         w0=backbone.weights[0], lora_scale=1.0)
    layer.WB = Tensor(rng.stream_of(2).normal((k, r)), requires_grad=True)
    net = A.init_alphanet(rng.stream_of(3), feature_dim=d, num_layers=1,
                          hidden_dims=(4,), init_alpha=init_alpha)
    return AdaptedModel(backbone, {0: layer}, net, "balora")
