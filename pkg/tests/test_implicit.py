"""Tests for the numpy SDF network, its gradients and the optimizers."""

from __future__ import annotations

import math
import os
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from toothfuse.implicit import (
    Adam,
    FitConfig,
    NetworkShape,
    SdfNetwork,
    TrainConfig,
    TrainedModel,
    forward,
    loss,
    optimize_latent,
    relu_pattern,
    train_auto_decoder,
)
from toothfuse.sdf import SdfSamples
from toothfuse.workers import THREADS_ENV

TINY = NetworkShape(latent_dim=2, hidden=4, layers=3, skip_layer=1)
SMALL = NetworkShape(latent_dim=4, hidden=16, layers=4, skip_layer=2)


def _ball(n: int, radius: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * (radius * rng.random((n, 1)))


def _sphere_samples(radius: float, n: int, seed: int) -> SdfSamples:
    x = _ball(n, 0.9, seed)
    return SdfSamples(x, np.linalg.norm(x, axis=1) - radius)


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


class TestNetworkShape:
    """Tests for layer bookkeeping."""

    def test_parameter_count(self) -> None:
        # 5x4+4, (4+5)x4+4, 4x4+4, 4x1+1
        assert TINY.n_params == 89

    def test_skip_layer_widened(self) -> None:
        dims = NetworkShape().layer_dims()
        assert dims[4] == (256 + 35, 256)
        assert dims[-1] == (256, 1)
        assert len(dims) == 9

    def test_invalid(self) -> None:
        with pytest.raises(ValueError):
            NetworkShape(layers=4, skip_layer=4)
        with pytest.raises(ValueError):
            NetworkShape(latent_dim=0)

    def test_wrong_parameter_count(self) -> None:
        with pytest.raises(ValueError, match="parameters"):
            SdfNetwork(TINY, np.zeros(88))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class TestForward:
    """Tests for network evaluation."""

    def test_batch_matches_single_rows(self) -> None:
        net = SdfNetwork.create(SMALL, seed=1)
        z = np.random.default_rng(0).normal(size=4) * 0.1
        x = _ball(1500, 1.0, 2)
        batch = forward(net, z, x)
        single = np.concatenate([forward(net, z, row) for row in x[:40]])
        np.testing.assert_array_equal(batch[:40], single)
        np.testing.assert_array_equal(forward(net, z, x[1024:1100]), batch[1024:1100])

    def test_threads_do_not_change_values(self) -> None:
        net = SdfNetwork.create(SMALL, seed=1)
        x = _ball(3000, 1.0, 3)
        single = forward(net, np.zeros(4), x)
        with patch.dict(os.environ, {THREADS_ENV: "3"}):
            threaded = forward(net, np.zeros(4), x)
        np.testing.assert_array_equal(single, threaded)

    def test_geometric_init_at_origin(self) -> None:
        net = SdfNetwork.create(SMALL, seed=0)
        assert forward(net, np.zeros(4), np.zeros(3))[0] == pytest.approx(math.tanh(-0.5))

    def test_geometric_init_is_roughly_a_sphere(self) -> None:
        net = SdfNetwork.create(SMALL, seed=0)
        inside = forward(net, np.zeros(4), _ball(200, 0.1, 4))
        assert np.all(inside < 0)

    def test_zero_output(self) -> None:
        net = SdfNetwork.create(SMALL, seed=0, output_init="zero")
        np.testing.assert_array_equal(forward(net, np.ones(4), _ball(10, 1.0, 5)), 0.0)
        zeroed = SdfNetwork.create(SMALL, seed=0).with_output_zeroed()
        np.testing.assert_array_equal(forward(zeroed, np.ones(4), _ball(10, 1.0, 5)), 0.0)

    def test_output_range(self) -> None:
        net = SdfNetwork.create(SMALL, seed=3)
        f = forward(net, np.ones(4), _ball(100, 1.0, 6))
        assert np.all(np.abs(f) < 1.0)

    def test_latent_length_checked(self) -> None:
        with pytest.raises(ValueError, match="latent"):
            forward(SdfNetwork.create(SMALL), np.zeros(3), np.zeros(3))

    def test_relu_pattern_shape(self) -> None:
        pattern = relu_pattern(SdfNetwork.create(SMALL), np.zeros(4), _ball(7, 1.0, 7))
        assert pattern.shape == (7, SMALL.layers * SMALL.hidden)
        assert pattern.dtype == np.bool_

    def test_layers_view_theta(self) -> None:
        net = SdfNetwork.create(TINY, seed=2)
        flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in net.layers()])
        np.testing.assert_array_equal(flat, net.theta)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


class TestLoss:
    """Tests for the clamped L1 objective and its gradients."""

    @pytest.fixture
    def setup(self) -> tuple[SdfNetwork, np.ndarray, SdfSamples]:
        net = SdfNetwork.create(TINY, seed=11)
        z = np.array([0.3, -0.2])
        x = _ball(30, 0.8, 12)
        f = forward(net, z, x)
        offsets = np.where(np.arange(30) % 2 == 0, 0.05, -0.05)
        return net, z, SdfSamples(x, f + offsets)

    @staticmethod
    def _same_kinks(
        a: tuple[SdfNetwork, np.ndarray], b: tuple[SdfNetwork, np.ndarray], x: np.ndarray
    ) -> bool:
        return bool(np.array_equal(relu_pattern(*a, x), relu_pattern(*b, x)))

    def test_theta_gradient_matches_finite_differences(
        self, setup: tuple[SdfNetwork, np.ndarray, SdfSamples]
    ) -> None:
        net, z, samples = setup
        res = loss(net, z, samples, delta=1.0, lam=0.01)
        assert res.grad_theta is not None
        h = 1e-4
        checked = 0
        for k in range(TINY.n_params):
            up = net.theta.copy()
            up[k] += h
            down = net.theta.copy()
            down[k] -= h
            net_up, net_down = net.with_theta(up), net.with_theta(down)
            # central differences are only meaningful where no ReLU switches
            if not self._same_kinks((net_up, z), (net_down, z), samples.positions):
                continue
            numeric = (
                loss(net_up, z, samples, 1.0, 0.01).value
                - loss(net_down, z, samples, 1.0, 0.01).value
            ) / (2 * h)
            assert res.grad_theta[k] == pytest.approx(numeric, rel=1e-4, abs=1e-7)
            checked += 1
        assert checked > 0.9 * TINY.n_params

    def test_latent_gradient_matches_finite_differences(
        self, setup: tuple[SdfNetwork, np.ndarray, SdfSamples]
    ) -> None:
        net, z, samples = setup
        res = loss(net, z, samples, delta=1.0, lam=0.01)
        assert res.grad_latents.shape == (1, 2)
        h = 1e-4
        checked = 0
        for k in range(2):
            up, down = z.copy(), z.copy()
            up[k] += h
            down[k] -= h
            if not self._same_kinks((net, up), (net, down), samples.positions):
                continue
            numeric = (
                loss(net, up, samples, 1.0, 0.01).value - loss(net, down, samples, 1.0, 0.01).value
            ) / (2 * h)
            assert res.grad_latents[0, k] == pytest.approx(numeric, rel=1e-4, abs=1e-7)
            checked += 1
        assert checked > 0

    def test_perfect_fit_leaves_regularizer(self) -> None:
        net = SdfNetwork.create(TINY, seed=11)
        z = np.array([0.3, -0.2])
        x = _ball(20, 0.8, 13)
        res = loss(net, z, SdfSamples(x, forward(net, z, x)), delta=0.1, lam=0.5)
        assert res.value == pytest.approx(0.5 * float(z @ z))
        np.testing.assert_allclose(res.grad_latents[0], 2 * 0.5 * z)

    def test_clamped_targets(self) -> None:
        net = SdfNetwork.create(TINY, seed=11, output_init="zero")
        x = _ball(10, 0.5, 14)
        res = loss(net, np.zeros(2), SdfSamples(x, np.full(10, 5.0)), delta=0.1, lam=0.0)
        # f = 0 everywhere; the target is clamped to delta
        assert res.value == pytest.approx(0.1)

    def test_invalid_delta(self, setup: tuple[SdfNetwork, np.ndarray, SdfSamples]) -> None:
        net, z, samples = setup
        with pytest.raises(ValueError):
            loss(net, z, samples, delta=0.0, lam=0.0)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class TestAdam:
    """Tests for the Adam update rule."""

    def test_first_step_size(self) -> None:
        opt = Adam(3)
        out = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]), lr=0.1)
        np.testing.assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-6)

    def test_converges_on_quadratic(self) -> None:
        target = np.array([1.0, -2.0, 0.5])
        p = np.zeros(3)
        opt = Adam(3)
        for _ in range(3000):
            p = opt.step(p, 2.0 * (p - target), lr=0.01)
        np.testing.assert_allclose(p, target, atol=0.05)


class TestOptimizeLatent:
    """Tests for latent fitting with frozen weights."""

    @pytest.fixture
    def net(self) -> SdfNetwork:
        return SdfNetwork.create(SMALL, seed=5)

    def test_zero_iterations_returns_init(self, net: SdfNetwork) -> None:
        init = np.full(4, 0.2)
        fit = optimize_latent(net, _sphere_samples(0.4, 200, 0), FitConfig(iterations=0), init)
        np.testing.assert_array_equal(fit.z, init)
        assert len(fit.loss_trace) == 1
        assert fit.best_iteration == 0

    def test_returns_best_latent(self, net: SdfNetwork) -> None:
        cfg = FitConfig(iterations=30, lr=0.05)
        fit = optimize_latent(net, _sphere_samples(0.4, 300, 1), cfg, np.zeros(4))
        assert len(fit.loss_trace) == 31
        assert fit.best_loss == min(fit.loss_trace)
        assert fit.loss_trace[fit.best_iteration] == fit.best_loss
        assert fit.best_loss <= fit.loss_trace[0]

    def test_deterministic(self, net: SdfNetwork) -> None:
        cfg = FitConfig(iterations=10, max_samples=100, seed=3)
        samples = _sphere_samples(0.4, 300, 2)
        a = optimize_latent(net, samples, cfg, np.zeros(4))
        b = optimize_latent(net, samples, cfg, np.zeros(4))
        np.testing.assert_array_equal(a.z, b.z)

    def test_no_finite_samples(self, net: SdfNetwork) -> None:
        samples = SdfSamples(np.zeros((2, 3)), np.full(2, np.nan))
        with pytest.raises(ValueError):
            optimize_latent(net, samples, FitConfig(iterations=1), np.zeros(4))


class TestTrainAutoDecoder:
    """Tests for joint training of weights and latents."""

    @staticmethod
    def _cfg(**overrides: object) -> TrainConfig:
        values: dict[str, object] = {
            "network": SMALL,
            "epochs": 2,
            "batch_size": 128,
            "seed": 7,
        }
        values.update(overrides)
        return TrainConfig(**values)  # type: ignore[arg-type]

    @pytest.fixture
    def shapes(self) -> list[SdfSamples]:
        return [_sphere_samples(0.3, 200, 0), _sphere_samples(0.6, 200, 1)]

    def test_needs_two_shapes(self, shapes: list[SdfSamples]) -> None:
        with pytest.raises(ValueError, match="two"):
            train_auto_decoder(shapes[:1], self._cfg())

    def test_zero_step_size_keeps_initialization(self, shapes: list[SdfSamples]) -> None:
        init = train_auto_decoder(shapes, self._cfg(epochs=0))
        model = train_auto_decoder(shapes, self._cfg(epochs=1, lr=0.0, latent_lr=0.0))
        rng = np.random.default_rng(7)
        created = SdfNetwork.create(SMALL, seed=int(rng.integers(2**31)))
        np.testing.assert_array_equal(init.network.theta, created.theta)
        np.testing.assert_array_equal(model.network.theta, init.network.theta)
        np.testing.assert_array_equal(model.latents, init.latents)
        assert init.loss_trace == ()
        assert len(model.loss_trace) == 1

    def test_loss_decreases(self, shapes: list[SdfSamples]) -> None:
        cfg = self._cfg(epochs=30, batch_size=100)
        init = train_auto_decoder(shapes, replace(cfg, epochs=0))
        model = train_auto_decoder(shapes, cfg)

        def total(m: TrainedModel) -> float:
            # equal-sized shapes: the joint objective is the mean of the per-shape ones
            values = [
                loss(m.network, m.latents[k], s, cfg.clamp, cfg.latent_reg).value
                for k, s in enumerate(shapes)
            ]
            return float(np.mean(values))

        assert total(model) < total(init)
        assert model.loss_trace[-1] < model.loss_trace[0]

    def test_deterministic(self, shapes: list[SdfSamples]) -> None:
        a = train_auto_decoder(shapes, self._cfg())
        b = train_auto_decoder(shapes, self._cfg())
        np.testing.assert_array_equal(a.network.theta, b.network.theta)
        np.testing.assert_array_equal(a.latents, b.latents)
        assert a.loss_trace == b.loss_trace

    def test_trace_and_model(self, shapes: list[SdfSamples]) -> None:
        model = train_auto_decoder(shapes, self._cfg(epochs=3))
        assert len(model.loss_trace) == 3
        assert model.latents.shape == (2, 4)
        assert model.mean_latent().shape == (4,)

    def test_latent_index(self, shapes: list[SdfSamples]) -> None:
        model = TrainedModel(SdfNetwork.create(SMALL), np.zeros((2, 4)))
        np.testing.assert_array_equal(model.latent(1), np.zeros(4))
        with pytest.raises(IndexError):
            model.latent(2)
