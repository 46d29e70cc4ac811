"""Self-contained oracle suite behind ``balora verify``.

Each oracle checks an implementation against an independent route:
numerical quadrature for the closed-form KL, Monte Carlo moments for the
sampler, central finite differences for tape gradients, merged-weight
forwards for the deterministic path, and orthogonal-complement residuals
for the subspace claims. Oracles are looked up through their modules at
call time so fault-injection tests can monkeypatch the implementation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import quad

from . import adapter as A
from . import variational as V
from .model import AdapterSpec, BackboneSpec, ToyBackbone, attach_adapters
from .rng import Rng
from .tensor import Tensor, backward

DEFAULT_SEED = 20250801


@dataclass
class OracleResult:
    name: str
    family: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


# -- independent oracles ------------------------------------------------------


def kl_quadrature(alpha: float, p: float, w: float = 1.0) -> float:
    """Gaussian KL via adaptive quadrature in the standardized posterior
    variable; never touches the closed form."""
    var_q = alpha * w * w
    var_p = (p / (1.0 - p)) * w * w
    sq = math.sqrt(var_q)
    log_norm_q = -0.5 * math.log(2.0 * math.pi * var_q)
    log_norm_p = -0.5 * math.log(2.0 * math.pi * var_p)

    def integrand(u: float) -> float:
        t = w + sq * u
        log_q = log_norm_q - 0.5 * u * u
        log_p = log_norm_p - t * t / (2.0 * var_p)
        return math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi) * (log_q - log_p)

    val, _ = quad(integrand, -40.0, 40.0, epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


def finite_difference_grads(loss_fn, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter entry.

    ``loss_fn`` must rebuild its forward pass (and redraw any noise from a
    fixed seed) on every call so the only change between evaluations is the
    perturbed entry.
    """
    grads = []
    for p in params:
        original = p.data
        g = np.zeros(p.size)
        for i in range(p.size):
            for sign, slot in ((+1.0, 0), (-1.0, 1)):
                bumped = original.copy().ravel()
                bumped[i] += sign * h
                p.data = bumped.reshape(original.shape)
                p.data.flags.writeable = False
                if slot == 0:
                    f_plus = loss_fn()
                else:
                    f_minus = loss_fn()
            g[i] = (f_plus - f_minus) / (2.0 * h)
        p.data = original
        grads.append(g.reshape(original.shape))
    return grads


def scaled_gradient_error(analytic: np.ndarray, numeric: np.ndarray,
                          rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Max of |a - n| / (atol + rtol * |n|); values <= 1 mean agreement."""
    denom = atol + rtol * np.abs(numeric)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _random_layer(rng: Rng, d: int, k: int, r: int, scale: float = 1.5) -> A.BaLoRALayer:
    layer = A.init_layer(rng, d=d, k=k, r=r, init_std=0.5, lora_scale=scale)
    layer.WB = Tensor(rng.normal((k, r)), requires_grad=True)
    return layer


def _cov_z_scores(emp_mean, emp_cov, ref_mean, ref_cov, n: int):
    """Entrywise z-scores of empirical vs reference moments under the
    Gaussian sampling distribution of the estimators."""
    k = len(ref_mean)
    se_mean = np.sqrt(np.maximum(np.diag(ref_cov), 1e-300) / n)
    z_mean = np.abs(emp_mean - ref_mean) / se_mean
    dd = np.outer(np.diag(ref_cov), np.diag(ref_cov))
    var_cov = (dd + ref_cov ** 2) / n
    z_cov = np.abs(emp_cov - ref_cov) / np.sqrt(np.maximum(var_cov, 1e-300))
    iu = np.triu_indices(k)
    return float(np.max(z_mean)), float(np.max(z_cov[iu]))


def _empirical_moments(samples: np.ndarray):
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / samples.shape[0]
    return mean, cov


def _two_sample_z(samples_a: np.ndarray, samples_b: np.ndarray, ref_cov: np.ndarray):
    na, nb = samples_a.shape[0], samples_b.shape[0]
    mean_a, cov_a = _empirical_moments(samples_a)
    mean_b, cov_b = _empirical_moments(samples_b)
    se_mean = np.sqrt(np.diag(ref_cov) * (1.0 / na + 1.0 / nb) + 1e-300)
    z_mean = np.abs(mean_a - mean_b) / se_mean
    dd = np.outer(np.diag(ref_cov), np.diag(ref_cov))
    var_cov = (dd + ref_cov ** 2) * (1.0 / na + 1.0 / nb)
    z_cov = np.abs(cov_a - cov_b) / np.sqrt(np.maximum(var_cov, 1e-300))
    iu = np.triu_indices(len(mean_a))
    return float(np.max(z_mean)), float(np.max(z_cov[iu]))


# -- oracle checks -----------------------------------------------------------------


def check_kl_quadrature(seed: int) -> OracleResult:
    worst = 0.0
    for p in (0.1, 0.3, 0.5, 0.7, 0.9):
        for alpha in (1e-4, 1e-2, 1.0, 10.0, 1e3):
            ref = kl_quadrature(alpha, p, w=3.7)
            got = V.kl_per_entry(alpha, p)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
    return OracleResult("kl_vs_quadrature", "kl", worst < 1e-6, worst, 1e-6,
                        "closed form vs adaptive quadrature, grid over (alpha, p)")


def check_kl_w_independence(seed: int) -> OracleResult:
    worst = 0.0
    for p in (0.1, 0.5, 0.9):
        for alpha in (1e-3, 1.0, 50.0):
            vals = [kl_quadrature(alpha, p, w=w) for w in (0.1, 1.0, 10.0)]
            got = V.kl_per_entry(alpha, p)
            spread = max(abs(v - got) / max(abs(got), 1e-12) for v in vals)
            worst = max(worst, spread)
    return OracleResult("kl_w_independence", "kl", worst < 1e-6, worst, 1e-6,
                        "quadrature value is invariant to the weight magnitude")


def check_kl_minimum(seed: int) -> OracleResult:
    worst = 0.0
    for p in (0.1, 0.3, 0.5, 0.7, 0.9):
        a_star = V.alpha_star(p)
        expect = (1.0 - p) / (2.0 * p)
        worst = max(worst, abs(V.kl_per_entry(a_star, p) - expect))
        for eps in (1e-3, 1e-2):
            if V.kl_per_entry(a_star * (1 + eps), p) < V.kl_per_entry(a_star, p) or \
               V.kl_per_entry(a_star * (1 - eps), p) < V.kl_per_entry(a_star, p):
                worst = max(worst, 1.0)
    return OracleResult("kl_minimum", "kl", worst < 1e-9, worst, 1e-9,
                        "analytic minimizer alpha* = p/(1-p) attains (1-p)/(2p)")


def check_covariance_mc(seed: int, n_configs: int = 10, n_samples: int = 100_000) -> OracleResult:
    rng = Rng(seed)
    worst = 0.0
    for c in range(n_configs):
        crng = rng.stream_of(c)
        dims = crng.integers(2, 9, (2,))
        d, k = int(dims[0]), int(dims[1])
        r = int(crng.integers(1, min(d, k) + 1, ()))
        layer = _random_layer(crng.stream_of(1), d, k, r)
        x = crng.stream_of(2).normal((d,))
        alpha = float(crng.stream_of(3).uniform(0.2, 2.0, ()))
        law = A.analytic_predictive(layer, Tensor(x), alpha)
        samples = A.sample_lowrank(layer, Tensor(x), alpha, crng.stream_of(4),
                                   n=n_samples).data
        z_mean, z_cov = _cov_z_scores(*_empirical_moments(samples),
                                      law.mean.data, law.covariance(), n_samples)
        worst = max(worst, z_mean, z_cov)
    return OracleResult("covariance_mc_match", "covariance", worst < 3.0, worst, 3.0,
                        f"{n_configs} random configs, {n_samples} draws, entrywise z-scores")


def check_sampler_equivalence(seed: int, n_configs: int = 8, n_samples: int = 100_000) -> OracleResult:
    rng = Rng(seed + 1)
    worst = 0.0
    for c in range(n_configs):
        crng = rng.stream_of(c)
        dims = crng.integers(2, 9, (2,))
        d, k = int(dims[0]), int(dims[1])
        r = int(crng.integers(1, min(d, k) + 1, ()))
        layer = _random_layer(crng.stream_of(1), d, k, r)
        x = crng.stream_of(2).normal((d,))
        alpha = float(crng.stream_of(3).uniform(0.2, 2.0, ()))
        fast = A.sample_lowrank(layer, Tensor(x), alpha, crng.stream_of(4), n=n_samples).data
        slow = A.sample_full_cov_oracle(layer, Tensor(x), alpha, crng.stream_of(5),
                                        n=n_samples).data
        ref_cov = A.analytic_predictive(layer, Tensor(x), alpha).covariance()
        z_mean, z_cov = _two_sample_z(fast, slow, ref_cov)
        worst = max(worst, z_mean, z_cov)
    return OracleResult("sampler_equivalence", "covariance", worst < 3.0, worst, 3.0,
                        "low-rank vs dense-factorization sampler, two-sample moments")


def _tiny_model(seed: int):
    task_rng = Rng(seed)
    backbone = ToyBackbone(BackboneSpec(d_in=3, d_out=2, hidden=(5,), head="regression"),
                           task_rng.stream_of(0))
    backbone.freeze()
    model = attach_adapters(
        backbone,
        AdapterSpec(rank=2, lora_alpha=4.0, init_std=0.4, alphanet_hidden=(4,),
                    init_alpha=0.3),
        "balora", task_rng.stream_of(1))
    # Non-zero WB so gradients flow through every factor.
    for layer in model.adapters.values():
        layer.WB = Tensor(task_rng.stream_of(2).normal(layer.WB.shape) * 0.5,
                          requires_grad=True)
    X = task_rng.stream_of(3).normal((4, 3))
    y = task_rng.stream_of(4).normal((4, 2))
    return model, X, y


def check_gradient_fd(seed: int) -> OracleResult:
    model, X, y = _tiny_model(seed)
    prior = V.PriorConfig(0.4)
    cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4, kl_weight=0.7)
    params = model.trainables()
    worst = 0.0

    def nll_value() -> float:
        alphas = model.alphas(X)
        pred = model.forward(X, rng=Rng(seed + 9), alphas=alphas, stochastic=True)
        return V.gaussian_nll(pred, y, model.log_sigma).item()

    def kl_value() -> float:
        alphas = model.alphas(X)
        return V.kl_normalized_tensor(alphas, prior.p, model.alphanet.alpha_min,
                                      model.alphanet.alpha_max).item()

    for loss_fn, term in ((nll_value, "nll"), (kl_value, "kl")):
        alphas = model.alphas(X)
        if term == "nll":
            pred = model.forward(X, rng=Rng(seed + 9), alphas=alphas, stochastic=True)
            loss = V.gaussian_nll(pred, y, model.log_sigma)
        else:
            loss = V.kl_normalized_tensor(alphas, prior.p, model.alphanet.alpha_min,
                                          model.alphanet.alpha_max)
        V.zero_grad(params)
        backward(loss)
        numeric = finite_difference_grads(loss_fn, params)
        for p, g_num in zip(params, numeric):
            g_ana = p.grad if p.grad is not None else np.zeros(p.shape)
            worst = max(worst, scaled_gradient_error(np.asarray(g_ana), g_num))
    V.zero_grad(params)
    return OracleResult("gradient_finite_difference", "gradient", worst < 1.0, worst, 1.0,
                        "tape vs central differences with frozen noise; scaled by rtol=1e-4, atol=1e-7")


def check_merge_equivalence(seed: int, n_layers: int = 100) -> OracleResult:
    rng = Rng(seed + 2)
    worst = 0.0
    for c in range(n_layers):
        crng = rng.stream_of(c)
        dims = crng.integers(2, 12, (2,))
        d, k = int(dims[0]), int(dims[1])
        r = int(crng.integers(1, min(d, k) + 1, ()))
        layer = _random_layer(crng.stream_of(1), d, k, r, scale=float(crng.uniform(0.25, 4.0, ())))
        merged = A.merge_weights(layer).data
        x = crng.stream_of(2).normal((d,))
        direct = A.forward_deterministic(layer, Tensor(x)).data
        scale = max(1.0, float(np.max(np.abs(direct))))
        worst = max(worst, float(np.max(np.abs(merged @ x - direct))) / scale)
    return OracleResult("merge_equivalence", "merge", worst < 1e-12, worst, 1e-12,
                        f"{n_layers} random layers, merged forward vs layered forward")


def check_subspace_residual(seed: int, n_cases: int = 50) -> OracleResult:
    rng = Rng(seed + 3)
    worst = 0.0
    for c in range(n_cases):
        crng = rng.stream_of(c)
        d, k, r = 6, 9, 3
        layer = _random_layer(crng.stream_of(1), d, k, r)
        x = crng.stream_of(2).normal((d,))
        y = A.sample_lowrank(layer, Tensor(x), 1.3, crng.stream_of(3)).data
        residual = y - layer.W0.data @ x
        q, _ = np.linalg.qr(layer.WB.data)
        ortho = residual - q @ (q.T @ residual)
        worst = max(worst, float(np.linalg.norm(ortho) /
                                 max(np.linalg.norm(residual), 1e-30)))
    return OracleResult("subspace_confinement", "subspace", worst < 1e-9, worst, 1e-9,
                        "sample residuals lie in the update column space")


def check_nullspace_variance(seed: int) -> OracleResult:
    rng = Rng(seed + 4)
    d, k, r = 6, 5, 2
    layer = _random_layer(rng.stream_of(0), d, k, r)
    # Zero the reduction-matrix columns touching the input's support, so the
    # latent variance vanishes identically for that input.
    wa = layer.WA.data.copy()
    wa[:, :3] = 0.0
    layer.WA = Tensor(wa, requires_grad=True)
    x = np.zeros(d)
    x[:3] = rng.stream_of(1).normal((3,))
    det = A.forward_deterministic(layer, Tensor(x)).data
    worst = 0.0
    for s in range(20):
        y = A.sample_lowrank(layer, Tensor(x), 0.9, rng.stream_of(10 + s)).data
        worst = max(worst, float(np.max(np.abs(y - det))))
    return OracleResult("nullspace_zero_variance", "subspace", worst < 1e-12, worst, 1e-12,
                        "inputs orthogonal to the reduction rows sample deterministically")


ORACLES = (
    ("kl_vs_quadrature", "kl", check_kl_quadrature),
    ("kl_w_independence", "kl", check_kl_w_independence),
    ("kl_minimum", "kl", check_kl_minimum),
    ("covariance_mc_match", "covariance", check_covariance_mc),
    ("sampler_equivalence", "covariance", check_sampler_equivalence),
    ("gradient_finite_difference", "gradient", check_gradient_fd),
    ("merge_equivalence", "merge", check_merge_equivalence),
    ("subspace_confinement", "subspace", check_subspace_residual),
    ("nullspace_zero_variance", "subspace", check_nullspace_variance),
)


def run_oracles(name_filter: str = "", seed: int = DEFAULT_SEED) -> list[OracleResult]:
    """Run every oracle whose name or family contains ``name_filter``."""
    results = []
    for name, family, oracle in ORACLES:
        if name_filter and name_filter not in name and name_filter not in family:
            continue
        results.append(oracle(seed))
    return results
