"""Training objective: closed-form KL, normalized KL, single-sample ELBO,
and the AdamW optimizer with linear warmup/decay and global-norm clipping.

The per-entry KL is the Gaussian divergence between the posterior
``N(W, alpha * W**2)`` and the scaled dropout prior
``N(0, (p / (1 - p)) * W**2)``. The ``W**2`` factor cancels in every term,
so the divergence depends only on ``alpha`` and ``p``:

    KL(alpha, p) = 0.5 * ((alpha + 1) * (1 - p) / p - 1
                          + log(p / (1 - p)) - log(alpha))

It is convex in ``alpha`` with minimum ``(1 - p) / (2 * p)`` at
``alpha* = p / (1 - p)`` and diverges at both 0 and infinity, which is why
noise scales are clamped to ``[alpha_min, alpha_max]`` and the normalized
KL divides by the clamp-endpoint maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .adapter import ALPHA_MAX, ALPHA_MIN
from .model import AdaptedModel
from .rng import Rng
from .tensor import DomainError, NonFiniteError, Tensor

_LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergence(RuntimeError):
    """Training step produced a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class PriorConfig:
    """Dropout prior probability; the prior variance scale is p / (1 - p)."""

    p: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise DomainError(f"prior probability must lie strictly in (0, 1), got {self.p}")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    kl_weight: float = 1.0
    warmup_fraction: float = 0.0
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    seed: int = 0
    nll: str = "gaussian"  # regression: "gaussian" or "l1"; classification uses CE

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise DomainError("lr, epochs, and batch_size must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise DomainError("warmup_fraction must lie in [0, 1]")
        if self.kl_weight < 0 or self.weight_decay < 0:
            raise DomainError("kl_weight and weight_decay must be non-negative")
        if self.grad_clip_norm <= 0:
            raise DomainError("grad_clip_norm must be positive")
        if self.nll not in ("gaussian", "l1"):
            raise DomainError(f"unknown nll kind: {self.nll}")


# -- closed-form KL ---------------------------------------------------------


def kl_per_entry(alpha: float, p: float, alpha_min: float = ALPHA_MIN,
                 alpha_max: float = ALPHA_MAX) -> float:
    """Per-entry KL between posterior and dropout prior (W-independent)."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie strictly in (0, 1), got {p}")
    if not alpha_min <= alpha <= alpha_max:
        raise DomainError(f"alpha {alpha} outside clamp range [{alpha_min}, {alpha_max}]")
    c = (1.0 - p) / p
    return 0.5 * ((alpha + 1.0) * c - 1.0 - math.log(c) - math.log(alpha))


def alpha_star(p: float) -> float:
    """Minimizer of the per-entry KL."""
    return p / (1.0 - p)


def kl_max(p: float, alpha_min: float = ALPHA_MIN, alpha_max: float = ALPHA_MAX) -> float:
    """Largest attainable per-entry KL on the clamp interval.

    The KL is convex with an interior minimum, so the maximum sits at one
    of the clamp endpoints.
    """
    return max(kl_per_entry(alpha_min, p, alpha_min, alpha_max),
               kl_per_entry(alpha_max, p, alpha_min, alpha_max))


def kl_normalized(alpha_per_layer, p: float, ranks_dims,
                  alpha_min: float = ALPHA_MIN, alpha_max: float = ALPHA_MAX) -> float:
    """Mean over layers of per-entry KL divided by the clamp-endpoint maximum.

    Every entry of one layer shares the same alpha, so the per-parameter
    average over the r*d entries equals the per-entry value; the rank/dim
    list is validated but cancels out of the arithmetic.
    """
    alphas = [float(a) for a in np.atleast_1d(np.asarray(alpha_per_layer, dtype=np.float64))]
    if len(alphas) == 0:
        raise DomainError("kl_normalized needs at least one layer")
    ranks_dims = list(ranks_dims)
    if len(ranks_dims) != len(alphas):
        raise DomainError("one (rank, dim) pair per layer is required")
    for r, d in ranks_dims:
        if r < 1 or d < 1:
            raise DomainError("ranks and dims must be positive")
    norm = kl_max(p, alpha_min, alpha_max)
    return float(np.mean([kl_per_entry(a, p, alpha_min, alpha_max) / norm for a in alphas]))


def kl_normalized_tensor(alphas: Tensor, p: float, alpha_min: float,
                         alpha_max: float) -> Tensor:
    """Taped normalized KL, averaged over layers (and batch rows if present)."""
    c = (1.0 - p) / p
    const = -1.0 - math.log(c)
    kl = T.mul(T.sub(T.add(T.mul(T.add(alphas, Tensor(1.0)), Tensor(c)), Tensor(const)),
                     T.log(alphas)), Tensor(0.5))
    return T.mul(T.tmean(kl), Tensor(1.0 / kl_max(p, alpha_min, alpha_max)))


# -- likelihoods -------------------------------------------------------------


def gaussian_nll(pred: Tensor, target: np.ndarray, log_sigma: Tensor) -> Tensor:
    """Mean Gaussian negative log-likelihood with homoscedastic learned noise."""
    y = Tensor(np.asarray(target, dtype=np.float64).reshape(pred.shape))
    sq = T.square(T.sub(y, pred))
    inv_var = T.exp(T.mul(log_sigma, Tensor(-2.0)))
    per = T.add(T.mul(sq, inv_var), T.add(T.mul(log_sigma, Tensor(2.0)), Tensor(_LOG_2PI)))
    return T.mul(T.tmean(per), Tensor(0.5))


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    y = Tensor(np.asarray(target, dtype=np.float64).reshape(pred.shape))
    return T.tmean(T.absval(T.sub(y, pred)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DomainError(f"labels of shape {labels.shape} for logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError("label index out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels.astype(int)] = 1.0
    logp = T.log_softmax(logits)
    return T.mul(T.tsum(T.mul(logp, Tensor(onehot))), Tensor(-1.0 / n))


# -- ELBO step -----------------------------------------------------------------


def elbo_step(model: AdaptedModel, batch, prior: PriorConfig, cfg: TrainConfig,
              rng: Rng):
    """One single-sample ELBO evaluation: NLL of a stochastic forward plus
    the KL-weighted normalized divergence (averaged over the batch when the
    noise scale varies per sample).

    Returns the taped scalar loss and a metrics dict. The KL term is always
    measured and logged, but enters the loss only when ``kl_weight > 0``.
    """
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    try:
        if model.kind == "balora":
            alphas = model.alphas(X)
            pred = model.forward(X, rng=rng, alphas=alphas, stochastic=True)
        else:
            alphas = None
            pred = model.forward(X, stochastic=False)
        if model.head == "classification":
            nll = cross_entropy(pred, y)
        elif cfg.nll == "l1":
            nll = l1_loss(pred, y)
        else:
            nll = gaussian_nll(pred, y, model.log_sigma)

        metrics = {"nll": nll.item()}
        if alphas is not None:
            a = np.atleast_2d(alphas.data)
            kl_value = kl_normalized(a.mean(axis=0), prior.p,
                                     [(l.rank, l.d) for l in model.adapters.values()],
                                     model.alphanet.alpha_min, model.alphanet.alpha_max)
            metrics["alpha_per_layer"] = [float(v) for v in a.mean(axis=0)]
        else:
            kl_value = 0.0
        metrics["kl_normalized"] = kl_value

        if alphas is not None and cfg.kl_weight > 0:
            kl_t = kl_normalized_tensor(alphas, prior.p, model.alphanet.alpha_min,
                                        model.alphanet.alpha_max)
            loss = T.add(nll, T.mul(kl_t, Tensor(cfg.kl_weight)))
        else:
            loss = nll
        metrics["loss"] = loss.item()
    except NonFiniteError as err:
        raise TrainingDivergence(
            f"non-finite loss during ELBO step: {err}",
            diagnostics={"batch_size": int(X.shape[0]), "kind": model.kind}) from err
    return loss, metrics


# -- optimizer -------------------------------------------------------------------


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Uses beta1=0.9, beta2=0.999, eps=1e-8, gradient clipping at
    ``cfg.grad_clip_norm`` on the global norm, and a linear
    warmup-then-decay learning-rate schedule over ``total_steps``.
    Parameters without gradients (frozen or unused) are left untouched.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, cfg: TrainConfig, total_steps: int):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.total_steps = max(1, int(total_steps))
        self.warmup_steps = int(round(cfg.warmup_fraction * self.total_steps))
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.cfg.lr * (step + 1) / self.warmup_steps
        denom = max(1, self.total_steps - self.warmup_steps)
        return self.cfg.lr * max(0.0, self.total_steps - step) / denom

    def step(self) -> dict:
        lr = self.lr_at(self.t)
        raw_norm = global_grad_norm(self.params)
        clip = self.cfg.grad_clip_norm
        scale = clip / raw_norm if raw_norm > clip else 1.0
        self.t += 1
        bc1 = 1.0 - self.BETA1 ** self.t
        bc2 = 1.0 - self.BETA2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self._m[i] = self.BETA1 * self._m[i] + (1.0 - self.BETA1) * g
            self._v[i] = self.BETA2 * self._v[i] + (1.0 - self.BETA2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            new = p.data - lr * m_hat / (np.sqrt(v_hat) + self.EPS)
            if self.cfg.weight_decay > 0:
                new = new - lr * self.cfg.weight_decay * p.data
            # 0-d arrays decay to numpy scalars under arithmetic; rewrap.
            new = np.array(new, dtype=np.float64)
            new.flags.writeable = False
            p.data = new
        return {"lr": lr, "grad_norm": raw_norm, "applied_norm": min(raw_norm, clip)}


def train_model(model: AdaptedModel, train_xy, prior: PriorConfig, cfg: TrainConfig,
                rng: Rng, record_hook=None) -> list[dict]:
    """Minibatch training loop; returns one metrics record per step.

    Asserts the freeze contract on every step: frozen backbone parameters
    must never accumulate gradient.
    """
    X, y = train_xy
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    params = model.trainables()
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    opt = AdamW(params, cfg, total_steps=cfg.epochs * steps_per_epoch)
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.stream_of(900_000 + epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            try:
                loss, metrics = elbo_step(model, (X[idx], y[idx]), prior, cfg,
                                          rng.stream_of(step))
            except TrainingDivergence as err:
                err.diagnostics.update({"step": step, "epoch": epoch})
                raise
            T.backward(loss)
            frozen_norm = global_grad_norm(model.backbone.parameters()) \
                if model.backbone.frozen else 0.0
            if frozen_norm != 0.0:
                raise AssertionError("frozen backbone accumulated gradient")
            stats = opt.step()
            zero_grad(params)
            records.append({"step": step, "epoch": epoch, **metrics, **stats})
            step += 1
            if record_hook is not None:
                record_hook(records[-1])
    return records
