"""Auto-decoder signed-distance network: f(x, z) = s.

The network is a plain MLP in numpy with hand-written backpropagation.
Inputs are [z, x]; hidden layers use ReLU; the input is concatenated
again in front of the skip layer; the scalar output goes through tanh.

Rows are always pushed through the network in fixed-size, zero-padded
blocks so that the arithmetic applied to a row does not depend on how many
other rows share its batch: batch and single evaluations agree bitwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import numpy.typing as npt

from toothfuse.errors import Diverged
from toothfuse.geometry import FloatArray, IntArray
from toothfuse.sdf import SdfSamples
from toothfuse.workers import chunk_ranges, map_ordered

log = logging.getLogger(__name__)

_BLOCK_ROWS = 1024


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkShape:
    latent_dim: int = 32
    hidden: int = 256
    layers: int = 8
    skip_layer: int = 4

    def __post_init__(self) -> None:
        if self.latent_dim < 1 or self.hidden < 1 or self.layers < 2:
            raise ValueError("network dimensions must be positive (at least two hidden layers)")
        if not 1 <= self.skip_layer < self.layers:
            raise ValueError("skip layer must be one of the hidden layers after the first")

    @property
    def input_dim(self) -> int:
        return self.latent_dim + 3

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer, output layer last."""
        dims = []
        for i in range(self.layers):
            fan_in = self.input_dim if i == 0 else self.hidden
            if i == self.skip_layer:
                fan_in += self.input_dim
            dims.append((fan_in, self.hidden))
        dims.append((self.hidden, 1))
        return dims

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkShape = field(default_factory=NetworkShape)
    n_surface: int = 8000
    n_free: int = 2000
    clamp: float = 0.1
    latent_reg: float = 1e-4
    lr: float = 1e-3
    latent_lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 40
    epochs: int = 100
    batch_size: int = 4096
    latent_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clamp <= 0:
            raise ValueError("clamp delta must be positive")
        if self.latent_reg < 0 or self.lr < 0 or self.latent_lr < 0:
            raise ValueError("regularization weight and step sizes must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch size and decay interval must be positive")


@dataclass(frozen=True)
class FitConfig:
    n_surface: int = 8000
    n_free: int = 2000
    clamp: float = 0.1
    latent_reg: float = 1e-2
    lr: float = 5e-3
    # step size is multiplied by lr_decay once, halfway through
    lr_decay: float = 0.1
    iterations: int = 800
    max_samples: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clamp <= 0:
            raise ValueError("clamp delta must be positive")
        if self.latent_reg < 0 or self.lr < 0:
            raise ValueError("regularization weight and step size must be non-negative")
        if self.iterations < 0 or self.max_samples < 1:
            raise ValueError("iterations must be non-negative and max_samples positive")


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _single_precision(a: FloatArray) -> FloatArray:
    """Round to float32 values so the model file stores parameters exactly."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class SdfNetwork:
    """Immutable parameter vector plus architecture; layers are views into ``theta``."""

    shape: NetworkShape
    theta: FloatArray

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if len(theta) != self.shape.n_params:
            raise ValueError(f"expected {self.shape.n_params} parameters, got {len(theta)}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("network parameters must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @classmethod
    def create(
        cls,
        shape: NetworkShape,
        seed: int = 0,
        output_init: Literal["geometric", "zero"] = "geometric",
        radius: float = 0.5,
    ) -> SdfNetwork:
        """Geometric initialization: the untrained field is roughly |x| - radius.

        Parameters are drawn as float32 values, like everything a model file stores.
        """
        rng = np.random.default_rng(seed)
        parts: list[FloatArray] = []
        dims = shape.layer_dims()
        for fan_in, fan_out in dims[:-1]:
            std = math.sqrt(2.0) / math.sqrt(fan_out)
            parts.append(rng.normal(0.0, std, (fan_in, fan_out)).ravel())
            parts.append(np.zeros(fan_out))
        fan_in, _ = dims[-1]
        if output_init == "zero":
            parts += [np.zeros(fan_in), np.zeros(1)]
        else:
            parts.append(rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, fan_in))
            parts.append(np.array([-radius]))
        return cls(shape, _single_precision(np.concatenate(parts)))

    def layers(self) -> list[tuple[FloatArray, FloatArray]]:
        out = []
        offset = 0
        for fan_in, fan_out in self.shape.layer_dims():
            w = self.theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.theta[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def with_theta(self, theta: FloatArray) -> SdfNetwork:
        return SdfNetwork(self.shape, theta)

    def with_output_zeroed(self) -> SdfNetwork:
        theta = self.theta.copy()
        fan_in, _ = self.shape.layer_dims()[-1]
        theta[-(fan_in + 1) :] = 0.0
        return self.with_theta(theta)


@dataclass
class _Tape:
    inputs: list[FloatArray]
    pre: list[FloatArray]
    f: FloatArray


def _pad(rows: FloatArray) -> FloatArray:
    n = len(rows)
    out = np.zeros((_BLOCK_ROWS, rows.shape[1]))
    out[:n] = rows
    return out


def _forward_block(net: SdfNetwork, inp: FloatArray) -> _Tape:
    layers = net.layers()
    skip = net.shape.skip_layer
    h = inp
    inputs: list[FloatArray] = []
    pre: list[FloatArray] = []
    for i, (w, b) in enumerate(layers[:-1]):
        x_in = np.concatenate([h, inp], axis=1) if i == skip else h
        z = x_in @ w + b
        inputs.append(x_in)
        pre.append(z)
        h = np.maximum(z, 0.0)
    w, b = layers[-1]
    inputs.append(h)
    f = np.tanh((h @ w + b)[:, 0])
    return _Tape(inputs, pre, f)


def _backward_block(
    net: SdfNetwork, tape: _Tape, g_out: FloatArray, need_theta: bool
) -> tuple[FloatArray | None, FloatArray]:
    """Gradients w.r.t. theta (optional) and the block input, given dL/d(pre-tanh output)."""
    layers = net.layers()
    skip = net.shape.skip_layer
    hidden = net.shape.hidden
    grads: list[FloatArray] = []
    w_out, _ = layers[-1]
    g = g_out[:, None]
    if need_theta:
        grads.append(g.sum(axis=0))
        grads.append((tape.inputs[-1].T @ g).ravel())
    gh = g @ w_out.T
    g_inp = np.zeros_like(tape.inputs[0])
    for i in range(len(layers) - 2, -1, -1):
        w, _ = layers[i]
        g_pre = gh * (tape.pre[i] > 0.0)
        if need_theta:
            grads.append(g_pre.sum(axis=0))
            grads.append((tape.inputs[i].T @ g_pre).ravel())
        gx = g_pre @ w.T
        if i == skip:
            gh = gx[:, :hidden]
            g_inp += gx[:, hidden:]
        elif i == 0:
            g_inp += gx
        else:
            gh = gx
    theta_grad = np.concatenate(grads[::-1]) if need_theta else None
    return theta_grad, g_inp


def _inputs(latents: FloatArray, x: FloatArray) -> FloatArray:
    return np.concatenate([latents, x], axis=1)


def _evaluate_rows(net: SdfNetwork, rows: FloatArray) -> FloatArray:
    def run(r: tuple[int, int]) -> FloatArray:
        block = _pad(rows[r[0] : r[1]])
        return _forward_block(net, block).f[: r[1] - r[0]]

    parts = map_ordered(run, chunk_ranges(len(rows), _BLOCK_ROWS))
    return np.concatenate(parts) if parts else np.zeros(0)


def forward(net: SdfNetwork, z: npt.ArrayLike, x: npt.ArrayLike) -> FloatArray:
    """f(x, z) for each row of x (one shared latent). Values lie in (-1, 1)."""
    latent = np.asarray(z, dtype=np.float64).reshape(-1)
    if len(latent) != net.shape.latent_dim:
        raise ValueError(
            f"latent has {len(latent)} entries, network expects {net.shape.latent_dim}"
        )
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    return _evaluate_rows(net, _inputs(np.broadcast_to(latent, (len(pts), len(latent))), pts))


def relu_pattern(net: SdfNetwork, z: npt.ArrayLike, x: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    """Active/inactive state of every hidden unit for each row (kink detection)."""
    latent = np.asarray(z, dtype=np.float64).reshape(-1)
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    rows = _inputs(np.broadcast_to(latent, (len(pts), len(latent))), pts)
    out = []
    for start, stop in chunk_ranges(len(rows), _BLOCK_ROWS):
        tape = _forward_block(net, _pad(rows[start:stop]))
        out.append(np.concatenate([p[: stop - start] > 0.0 for p in tape.pre], axis=1))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_theta: FloatArray | None
    grad_latents: FloatArray


def _loss_rows(
    net: SdfNetwork,
    latents: FloatArray,
    shape_ids: IntArray,
    x: FloatArray,
    s: FloatArray,
    delta: float,
    lam: float,
    need_theta: bool,
) -> LossResult:
    n = len(s)
    if n == 0:
        raise ValueError("loss needs at least one sample")
    rows = _inputs(latents[shape_ids], x)
    target = np.clip(s, -delta, delta)
    d = latents.shape[1]

    def run(r: tuple[int, int]) -> tuple[float, FloatArray | None, FloatArray]:
        m = r[1] - r[0]
        tape = _forward_block(net, _pad(rows[r[0] : r[1]]))
        f = tape.f[:m]
        resid = np.clip(f, -delta, delta) - target[r[0] : r[1]]
        # one-sided kinks: zero slope at the clamp boundary, sign(0) = 0
        g_f = np.sign(resid) * (np.abs(f) < delta) / n
        g_out = np.zeros(_BLOCK_ROWS)
        g_out[:m] = g_f * (1.0 - f * f)
        g_theta, g_inp = _backward_block(net, tape, g_out, need_theta)
        return float(np.abs(resid).sum()), g_theta, g_inp[:m, :d]

    parts = map_ordered(run, chunk_ranges(n, _BLOCK_ROWS))
    data_term = 0.0
    grad_theta = np.zeros(net.shape.n_params) if need_theta else None
    g_rows = []
    for value, g_theta, g_lat in parts:
        data_term += value
        if grad_theta is not None and g_theta is not None:
            grad_theta += g_theta
        g_rows.append(g_lat)

    grad_latents = np.zeros_like(latents)
    np.add.at(grad_latents, shape_ids, np.concatenate(g_rows))
    counts = np.bincount(shape_ids, minlength=len(latents)).astype(np.float64)
    reg = float(np.sum(counts * np.einsum("kd,kd->k", latents, latents)) / n)
    grad_latents += (2.0 * lam) * (counts / n)[:, None] * latents
    return LossResult(data_term / n + lam * reg, grad_theta, grad_latents)


def loss(
    net: SdfNetwork, z: npt.ArrayLike, samples: SdfSamples, delta: float, lam: float
) -> LossResult:
    """Clamped L1 data term plus lam·|z|², with exact (sub)gradients.

    ``grad_latents`` has shape (1, d) for the single latent ``z``.
    """
    if delta <= 0:
        raise ValueError("clamp delta must be positive")
    latent = np.asarray(z, dtype=np.float64).reshape(1, -1)
    ids = np.zeros(len(samples), dtype=np.int64)
    return _loss_rows(net, latent, ids, samples.positions, samples.values, delta, lam, True)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation over a flat parameter array."""

    def __init__(
        self,
        size: int | tuple[int, ...],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, params: FloatArray, grad: FloatArray, lr: float) -> FloatArray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return np.asarray(params - lr * (m_hat / (np.sqrt(v_hat) + self.eps)))


@dataclass(frozen=True, eq=False)
class TrainedModel:
    network: SdfNetwork
    latents: FloatArray
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        dim = self.network.shape.latent_dim
        latents = np.array(self.latents, dtype=np.float64).reshape(-1, dim)
        latents.flags.writeable = False
        object.__setattr__(self, "latents", latents)

    def mean_latent(self) -> FloatArray:
        return np.asarray(self.latents.mean(axis=0))

    def latent(self, index: int) -> FloatArray:
        if not 0 <= index < len(self.latents):
            raise IndexError(f"latent index {index} out of range 0..{len(self.latents) - 1}")
        return np.asarray(self.latents[index])


def train_auto_decoder(shapes: list[SdfSamples], cfg: TrainConfig | None = None) -> TrainedModel:
    """Jointly fit network weights and one latent per shape with Adam on shuffled mini-batches."""
    cfg = cfg or TrainConfig()
    if len(shapes) < 2:
        raise ValueError("auto-decoder training needs at least two shapes")
    clean = [s.sanitized() for s in shapes]
    x = np.concatenate([s.positions for s in clean])
    s_all = np.concatenate([s.values for s in clean])
    ids = np.concatenate([np.full(len(s), k, dtype=np.int64) for k, s in enumerate(clean)])
    if len(s_all) == 0:
        raise ValueError("no finite training samples")

    rng = np.random.default_rng(cfg.seed)
    net = SdfNetwork.create(cfg.network, seed=int(rng.integers(2**31)))
    latents = _single_precision(
        rng.normal(0.0, cfg.latent_init_std, (len(shapes), cfg.network.latent_dim))
    )
    theta = net.theta.copy()
    opt_theta = Adam(len(theta))
    opt_latent = Adam(latents.shape)

    trace: list[float] = []
    n = len(s_all)
    for epoch in range(cfg.epochs):
        scale = cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(n)
        total = 0.0
        for start, stop in chunk_ranges(n, cfg.batch_size):
            batch = order[start:stop]
            res = _loss_rows(
                net, latents, ids[batch], x[batch], s_all[batch], cfg.clamp, cfg.latent_reg, True
            )
            if not math.isfinite(res.value):
                raise Diverged(f"training loss became non-finite in epoch {epoch}")
            assert res.grad_theta is not None
            theta = opt_theta.step(theta, res.grad_theta, cfg.lr * scale)
            latents = opt_latent.step(latents, res.grad_latents, cfg.latent_lr * scale)
            if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(latents))):
                raise Diverged(f"parameters became non-finite in epoch {epoch}")
            net = net.with_theta(theta)
            total += res.value * (stop - start)
        trace.append(total / n)
        log.info("epoch %d/%d: loss %.6f", epoch + 1, cfg.epochs, trace[-1])

    final = net.with_theta(_single_precision(net.theta))
    return TrainedModel(final, _single_precision(latents), cfg, tuple(trace))


@dataclass(frozen=True, eq=False)
class LatentFit:
    z: FloatArray
    best_loss: float
    best_iteration: int
    loss_trace: tuple[float, ...]


def optimize_latent(
    net: SdfNetwork, samples: SdfSamples, cfg: FitConfig, init: npt.ArrayLike
) -> LatentFit:
    """Fit z with frozen weights; returns the best latent seen, not the last."""
    clean = samples.sanitized()
    if len(clean) == 0:
        raise ValueError("no finite samples to fit")
    rng = np.random.default_rng(cfg.seed)
    if len(clean) > cfg.max_samples:
        clean = clean.subset(np.sort(rng.choice(len(clean), cfg.max_samples, replace=False)))
    z = np.asarray(init, dtype=np.float64).reshape(1, -1).copy()
    ids = np.zeros(len(clean), dtype=np.int64)
    opt = Adam(z.shape)
    half = max(1, cfg.iterations // 2)

    best_z = z.copy()
    best_loss = math.inf
    best_it = 0
    trace: list[float] = []
    for it in range(cfg.iterations + 1):
        res = _loss_rows(
            net, z, ids, clean.positions, clean.values, cfg.clamp, cfg.latent_reg, False
        )
        if not math.isfinite(res.value):
            raise Diverged(f"latent fit loss became non-finite at iteration {it}")
        trace.append(res.value)
        if res.value < best_loss:
            best_loss, best_z, best_it = res.value, z.copy(), it
        if it == cfg.iterations:
            break
        lr = cfg.lr * (cfg.lr_decay if it >= half else 1.0)
        z = opt.step(z, res.grad_latents, lr)
    log.info("Latent fit: best loss %.6f at iteration %d", best_loss, best_it)
    return LatentFit(best_z[0], best_loss, best_it, tuple(trace))

