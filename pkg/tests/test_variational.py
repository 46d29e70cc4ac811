"""Objective and optimizer checks: quadrature oracle for the KL, frozen-noise
finite differences for the ELBO, and closed-form first-step behavior for AdamW."""

import numpy as np
import pytest

from balora import tensor as T
from balora import variational as V
from balora.model import AdapterSpec, BackboneSpec, ToyBackbone, attach_adapters
from balora.rng import Rng
from balora.tensor import DomainError, Tensor, backward
from balora.verify import (_tiny_model, finite_difference_grads, kl_quadrature,
                           scaled_gradient_error)


class TestKlPerEntry:
    def test_reference_point(self):
        # p = 0.5, alpha = 1: (2)(1) - 1 + 0 - 0 halved.
        assert abs(V.kl_per_entry(1.0, 0.5) - 0.5) < 1e-15

    def test_matches_quadrature_grid(self):
        for p in (0.1, 0.3, 0.5, 0.7, 0.9):
            for alpha in (1e-4, 1e-2, 1.0, 10.0, 1e3):
                ref = kl_quadrature(alpha, p, w=3.7)
                got = V.kl_per_entry(alpha, p)
                assert abs(got - ref) / max(abs(ref), 1e-12) < 1e-6

    def test_w_independence_of_quadrature(self):
        for w in (0.1, 1.0, 10.0):
            ref = kl_quadrature(0.37, 0.3, w=w)
            assert abs(ref - V.kl_per_entry(0.37, 0.3)) / abs(ref) < 1e-6

    def test_minimum_location_and_value(self):
        for p in (0.1, 0.3, 0.5, 0.7, 0.9):
            a_star = V.alpha_star(p)
            assert abs(V.kl_per_entry(a_star, p) - (1 - p) / (2 * p)) < 1e-9
            # Golden-section search over the clamp interval lands on a_star.
            lo, hi = 1e-6, 1e3
            phi = (np.sqrt(5.0) - 1) / 2
            a, b = np.log(lo), np.log(hi)
            for _ in range(200):
                c, d = b - phi * (b - a), a + phi * (b - a)
                if V.kl_per_entry(np.exp(c), p) < V.kl_per_entry(np.exp(d), p):
                    b = d
                else:
                    a = c
            assert abs(np.exp(0.5 * (a + b)) - a_star) < 1e-6 * max(1.0, a_star)

    def test_global_lower_bound(self):
        rng = Rng(0)
        for p in (0.2, 0.5, 0.8):
            floor = (1 - p) / (2 * p)
            alphas = np.exp(rng.uniform(np.log(1e-6), np.log(1e3), (200,)))
            for a in alphas:
                assert V.kl_per_entry(float(a), p) >= floor - 1e-12

    def test_monotone_above_minimizer(self):
        p = 0.3
        grid = np.geomspace(V.alpha_star(p) * 1.001, 1e3, 50)
        vals = [V.kl_per_entry(float(a), p) for a in grid]
        assert np.all(np.diff(vals) > 0)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            V.kl_per_entry(1e-9, 0.5)
        with pytest.raises(DomainError):
            V.kl_per_entry(1.0, 1.0)


class TestKlNormalized:
    def test_minimum_value(self):
        p = 0.5
        a_star = V.alpha_star(p)
        got = V.kl_normalized([a_star, a_star], p, [(2, 8), (4, 16)])
        expect = ((1 - p) / (2 * p)) / V.kl_max(p)
        assert abs(got - expect) < 1e-12

    def test_endpoint_is_one(self):
        p = 0.4
        assert V.kl_max(p) == V.kl_per_entry(1e3, p)  # upper clamp dominates
        assert abs(V.kl_normalized([1e3], p, [(2, 4)]) - 1.0) < 1e-12

    def test_bounded_in_unit_interval(self):
        rng = Rng(1)
        p = 0.25
        alphas = np.exp(rng.uniform(np.log(1e-6), np.log(1e3), (100,)))
        for a in alphas:
            val = V.kl_normalized([float(a)], p, [(3, 5)])
            assert 0.0 <= val <= 1.0

    def test_empty_layer_list_rejected(self):
        with pytest.raises(DomainError):
            V.kl_normalized([], 0.5, [])

    def test_tensor_path_matches_scalar_path(self):
        alphas = np.array([0.3, 1.7, 42.0])
        got = V.kl_normalized_tensor(Tensor(alphas), 0.3, 1e-6, 1e3).item()
        expect = V.kl_normalized(alphas, 0.3, [(1, 1)] * 3)
        assert abs(got - expect) < 1e-12


class TestElboStep:
    def test_deterministic_limit(self):
        # Clamp forces alpha to its floor: the single-sample objective
        # collapses onto the deterministic adapter loss up to noise of
        # order sqrt(alpha_min).
        model, X, y = _tiny_model(77)
        model.alphanet.alpha_min = 1e-6
        model.alphanet.alpha_max = 1e-6
        cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4, kl_weight=0.0)
        loss, metrics = V.elbo_step(model, (X, y), V.PriorConfig(0.5), cfg, Rng(5))
        det_pred = model.forward_deterministic(X)
        det_nll = V.gaussian_nll(det_pred, y, model.log_sigma)
        assert abs(loss.item() - det_nll.item()) < 1e-2
        assert metrics["kl_normalized"] >= 0.0

    def test_kl_logged_but_excluded_when_weight_zero(self):
        model, X, y = _tiny_model(78)
        cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4, kl_weight=0.0)
        loss, metrics = V.elbo_step(model, (X, y), V.PriorConfig(0.5), cfg, Rng(6))
        assert metrics["kl_normalized"] > 0.0
        assert abs(loss.item() - metrics["nll"]) < 1e-12

    def test_gradients_match_finite_differences(self):
        model, X, y = _tiny_model(79)
        prior = V.PriorConfig(0.4)
        cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4, kl_weight=0.7)
        params = model.trainables()

        def loss_fn():
            loss, _ = V.elbo_step(model, (X, y), prior, cfg, Rng(80))
            return loss.item()

        loss, _ = V.elbo_step(model, (X, y), prior, cfg, Rng(80))
        backward(loss)
        numeric = finite_difference_grads(loss_fn, params)
        for p, g in zip(params, numeric):
            g_ana = p.grad if p.grad is not None else np.zeros(p.shape)
            assert scaled_gradient_error(np.asarray(g_ana), g) <= 1.0
        V.zero_grad(params)

    def test_empty_batch_rejected(self):
        model, X, y = _tiny_model(81)
        cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4)
        with pytest.raises(DomainError):
            V.elbo_step(model, (X[:0], y[:0]), V.PriorConfig(0.5), cfg, Rng(0))

    def test_divergence_aborts_with_diagnostics(self):
        model, X, y = _tiny_model(82)
        model.log_sigma = Tensor(np.array(-400.0), requires_grad=True)  # exp overflows
        cfg = V.TrainConfig(lr=1e-3, epochs=1, batch_size=4)
        with pytest.raises(V.TrainingDivergence) as err:
            V.elbo_step(model, (X, y), V.PriorConfig(0.5), cfg, Rng(83))
        assert err.value.diagnostics["batch_size"] == 4

    def test_training_loss_decreases_on_linear_task(self):
        # Full-batch steps on an exactly linear target; the deterministic
        # full-train loss should fall monotonically early in training for
        # nearly every seed.
        wins = 0
        for seed in range(20):
            rng = Rng(1000 + seed)
            g = rng.stream_of(0).normal((2, 5))
            X = rng.stream_of(1).normal((64, 5))
            y = X @ g.T
            backbone = ToyBackbone(BackboneSpec(d_in=5, d_out=2, hidden=(16,),
                                                head="regression"), rng.stream_of(2))
            backbone.freeze()
            model = attach_adapters(backbone,
                                    AdapterSpec(rank=2, lora_alpha=4.0, init_std=0.05,
                                                alphanet_hidden=(8,), init_alpha=0.01),
                                    "balora", rng.stream_of(3))
            cfg = V.TrainConfig(lr=2e-3, epochs=50, batch_size=64, kl_weight=0.1)
            losses = []
            opt = V.AdamW(model.trainables(), cfg, total_steps=50)
            for step in range(50):
                with T.no_grad():
                    det = model.forward_deterministic(X)
                    losses.append(float(np.mean((det.data - y) ** 2)))
                loss, _ = V.elbo_step(model, (X, y), V.PriorConfig(0.5), cfg,
                                      rng.stream_of(100 + step))
                backward(loss)
                opt.step()
                V.zero_grad(model.trainables())
            if np.all(np.diff(losses) < 1e-9):
                wins += 1
        assert wins >= 18, f"monotone decrease in only {wins}/20 seeds"


class TestAlphaDrift:
    def test_alpha_drifts_toward_prior_optimum(self, capsys):
        # Soft property, reported rather than hard-failed: on exactly linear
        # labels (no residual uncertainty needed) the KL term pulls the noise
        # scales toward alpha* = p/(1-p). kl_weight is set near the
        # normalization constant so the regularizer acts at raw-KL scale.
        from balora import tasks as TK
        from balora.model import AdapterSpec

        p = 0.5
        finals = []
        for seed in range(10):
            task = TK.SyntheticTask(kind="linear-regression", d_in=5, d_out=2,
                                    n_train=256, n_val=16, n_test=64,
                                    noise_std=0.0, seed=4000 + seed)
            aspec = AdapterSpec(rank=4, lora_alpha=4.0, alphanet_hidden=(8,),
                                init_alpha=0.05)
            pre = V.TrainConfig(lr=1e-2, epochs=30, batch_size=64, kl_weight=0.0)
            ad = V.TrainConfig(lr=1e-2, epochs=40, batch_size=64,
                               kl_weight=round(V.kl_max(p)))
            trained = TK.pretrain_then_adapt(task, (16,), aspec, "balora", pre, ad,
                                             V.PriorConfig(p), seed=4000 + seed)
            finals.append(np.median(trained.adapt_records[-1]["alpha_per_layer"]))
        med = float(np.median(finals))
        a_star = V.alpha_star(p)
        inside = a_star / 3 <= med <= 3 * a_star
        flag = "PASS" if inside else "WARN"
        with capsys.disabled():
            print(f"\n[{flag}] soft property (alpha drift): median final alpha "
                  f"{med:.3f} vs alpha*={a_star} window [{a_star / 3:.3f}, {3 * a_star:.1f}] "
                  f"over 10 seeds (reported, not gated)")


class TestAdamW:
    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        cfg = V.TrainConfig(lr=0.1, epochs=1, batch_size=1, grad_clip_norm=1e9)
        opt = V.AdamW([p], cfg, total_steps=1)
        p.grad = np.asarray(0.37)
        opt.step()
        # Bias-corrected first step is -lr * g / (|g| + eps) within eps.
        assert abs(float(p.data) - (1.0 - 0.1)) < 1e-6

    def test_clipping_caps_global_norm(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        cfg = V.TrainConfig(lr=0.01, epochs=1, batch_size=1, grad_clip_norm=1.0)
        opt = V.AdamW([p], cfg, total_steps=1)
        p.grad = np.full(4, 5.0)  # norm 10
        stats = opt.step()
        assert abs(stats["grad_norm"] - 10.0) < 1e-12
        assert abs(stats["applied_norm"] - 1.0) < 1e-12

    def test_decoupled_decay_shrinks_param(self):
        p = Tensor(np.array(2.0), requires_grad=True)
        cfg = V.TrainConfig(lr=0.1, epochs=1, batch_size=1, weight_decay=0.5,
                            grad_clip_norm=1e9)
        opt = V.AdamW([p], cfg, total_steps=1)
        p.grad = np.asarray(0.0)
        opt.step()
        assert abs(float(p.data) - 2.0 * (1.0 - 0.1 * 0.5)) < 1e-12

    def test_frozen_params_untouched(self):
        p = Tensor(np.array(3.0), requires_grad=False)
        cfg = V.TrainConfig(lr=0.1, epochs=1, batch_size=1)
        opt = V.AdamW([p], cfg, total_steps=1)
        opt.step()
        assert float(p.data) == 3.0

    def test_warmup_then_decay_schedule(self):
        cfg = V.TrainConfig(lr=1.0, epochs=1, batch_size=1, warmup_fraction=0.5)
        opt = V.AdamW([], cfg, total_steps=10)
        lrs = [opt.lr_at(s) for s in range(10)]
        assert lrs[0] == pytest.approx(0.2)
        assert lrs[4] == pytest.approx(1.0)
        assert lrs[9] == pytest.approx(0.2)
        assert np.all(np.diff(lrs[:5]) > 0)
        assert np.all(np.diff(lrs[5:]) < 0)


class TestConfigs:
    def test_prior_validation(self):
        with pytest.raises(DomainError):
            V.PriorConfig(0.0)
        with pytest.raises(DomainError):
            V.PriorConfig(1.0)

    def test_train_config_validation(self):
        with pytest.raises(DomainError):
            V.TrainConfig(lr=-1.0)
        with pytest.raises(DomainError):
            V.TrainConfig(warmup_fraction=1.5)
