"""Finite-difference checks for every differentiable primitive and both training losses.

Single primitives are held to 1e-6. Fused ops (log_softmax, sigmoid
cross-entropy, the LSTM cell), the fan-out case and the composed losses are held
to 1e-4: their O(step**2) truncation error is divided by gradients that can
nearly cancel at random points, which pushes the relative error past 1e-6.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CompoundRecord, DomainSpec
from .embedder import EmbedderConfig, embed_batch
from .extractor import stage1_batch_loss
from .multitask import ModelConfig, batch_logits, init_model, stage2_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
STEP = 1e-3


@dataclass
class GradCase:
    name: str
    shape: tuple[int, ...]
    build: Callable[[np.random.Generator], Callable[[Tensor], Tensor]]
    tolerance: float


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _weighted(op, out_shape):
    """Scalarise ``op`` with a fixed random weighting so every output matters."""

    def build(rng):
        w = Tensor(rng.uniform(0.5, 1.5, size=out_shape) * rng.choice([-1.0, 1.0], size=out_shape))
        return lambda x: ad.sum_(ad.mul(op(x), w))

    return build


def _primitive_cases() -> list[GradCase]:
    cases: list[GradCase] = []

    def add(name, shape, out_shape, op, tol):
        cases.append(GradCase(name, shape, _weighted(op, out_shape), tol))

    fixed = np.random.default_rng(12345)
    other = Tensor(fixed.uniform(-1, 1, size=(3, 4)))
    mat_b = Tensor(fixed.uniform(-1, 1, size=(4, 2)))
    kernels = Tensor(fixed.uniform(-1, 1, size=(3, 2, 3)))
    bias = Tensor(fixed.uniform(-1, 1, size=3))
    xin = Tensor(fixed.uniform(-1, 1, size=(2, 9)))

    add("add", (3, 4), (3, 4), lambda x: ad.add(x, other), PRIMITIVE_TOL)
    add("sub", (3, 4), (3, 4), lambda x: ad.sub(other, x), PRIMITIVE_TOL)
    add("mul", (3, 4), (3, 4), lambda x: ad.mul(x, x), PRIMITIVE_TOL)
    add("matmul", (3, 4), (3, 2), lambda x: ad.matmul(x, mat_b), PRIMITIVE_TOL)
    add("matmul_rhs", (4, 2), (3, 2), lambda x: ad.matmul(other, x), PRIMITIVE_TOL)
    add("sum", (3, 4), (4,), lambda x: ad.sum_(x, axis=0), PRIMITIVE_TOL)
    add("mean", (3, 4), (3,), lambda x: ad.mean(x, axis=1), PRIMITIVE_TOL)
    add("concat", (3, 4), (3, 8), lambda x: ad.concat([x, ad.mul(x, x)], axis=1), PRIMITIVE_TOL)
    add("slice", (3, 4), (2, 2), lambda x: ad.slice_(x, (slice(1, 3), slice(0, 2))), PRIMITIVE_TOL)
    add("conv1d_input", (2, 9), (3, 7), lambda x: ad.conv1d(x, kernels, bias), PRIMITIVE_TOL)
    add(
        "conv1d_kernels",
        (3, 2, 3),
        (3, 7),
        lambda x: ad.conv1d(xin, x, bias),
        PRIMITIVE_TOL,
    )
    add("conv1d_bias", (3,), (3, 7), lambda x: ad.conv1d(xin, kernels, x), PRIMITIVE_TOL)
    add("sigmoid", (3, 4), (3, 4), ad.sigmoid, PRIMITIVE_TOL)
    add("tanh", (3, 4), (3, 4), ad.tanh, PRIMITIVE_TOL)
    add("relu", (3, 4), (3, 4), ad.relu, PRIMITIVE_TOL)
    add("softmax", (3, 4), (3, 4), ad.softmax, PRIMITIVE_TOL)
    add("log_softmax", (3, 4), (3, 4), ad.log_softmax, COMPOSITE_TOL)
    add("max_pool1d", (2, 9), (2, 4), lambda x: ad.max_pool1d(x, 3, 2), PRIMITIVE_TOL)
    add("roi_pool1d", (2, 9), (2, 4), lambda x: ad.roi_pool1d(x, 4), PRIMITIVE_TOL)
    add("roi_pool1d_short", (2, 3), (2, 5), lambda x: ad.roi_pool1d(x, 5), PRIMITIVE_TOL)
    y = (fixed.uniform(size=(3, 4)) > 0.5).astype(float)
    add("sigmoid_cross_entropy", (3, 4), (3, 4), lambda x: ad.sigmoid_cross_entropy(ad.mul(x, 4.0), y), COMPOSITE_TOL)

    hidden, d = 3, 4
    w_x = Tensor(fixed.uniform(-1, 1, size=(d, 4 * hidden)))
    w_h = Tensor(fixed.uniform(-1, 1, size=(hidden, 4 * hidden)))
    b = Tensor(fixed.uniform(-1, 1, size=4 * hidden))
    h0 = Tensor(fixed.uniform(-1, 1, size=(2, hidden)))
    c0 = Tensor(fixed.uniform(-1, 1, size=(2, hidden)))

    def cell_x(x):
        h, c = ad.lstm_cell(x, h0, c0, w_x, w_h, b)
        return ad.concat([h, c], axis=-1)

    def cell_wx(w):
        x = Tensor(np.linspace(-1, 1, 2 * d).reshape(2, d))
        h, c = ad.lstm_cell(x, h0, c0, w, w_h, b)
        return ad.concat([h, c], axis=-1)

    add("lstm_cell_input", (2, d), (2, 2 * hidden), cell_x, COMPOSITE_TOL)
    add("lstm_cell_weights", (d, 4 * hidden), (2, 2 * hidden), cell_wx, COMPOSITE_TOL)

    # fan-out: y = g(x) + h(x)
    add("fan_out", (3, 4), (3, 4), lambda x: ad.add(ad.tanh(x), ad.mul(x, x)), COMPOSITE_TOL)
    return cases


# ----------------------------------------------------------- composed losses

SMALL_MODEL = ModelConfig(
    embedder=EmbedderConfig(channels=[3, 4, 3], kernel_width=3, pool_width=2, pool_stride=1, roi_bins=3),
    hidden=3,
)
SMALL_SPECS = [DomainSpec(0, "a", 12), DomainSpec(1, "b", 15)]
SMALL_Q = 4


def _small_batch(rng: np.random.Generator, n: int = 2):
    feats = {s.id: rng.uniform(-1, 1, size=(n, s.dim)) for s in SMALL_SPECS}
    y = np.zeros((n, SMALL_Q))
    y[np.arange(n), rng.integers(0, SMALL_Q, size=n)] = 1.0
    return feats, y


def _loss_case(name: str, stage: int, param: str) -> GradCase:
    probe = init_model(SMALL_SPECS, SMALL_Q, SMALL_MODEL, np.random.default_rng(0))
    shape = probe[param].shape if param != "raw" else (2, SMALL_SPECS[0].dim)

    def build(rng):
        params = init_model(SMALL_SPECS, SMALL_Q, SMALL_MODEL, rng)
        feats, y = _small_batch(rng)

        def f(x: Tensor) -> Tensor:
            p = dict(params)
            fx = dict(feats)
            if param == "raw":
                fx[0] = x
            else:
                p[param] = x
            if stage == 1:
                return stage1_batch_loss(embed_batch(fx, p, SMALL_MODEL.embedder), p)
            return stage2_loss(batch_logits(fx, p, SMALL_MODEL)[0], y)

        return f

    return GradCase(name, shape, build, COMPOSITE_TOL)


def _loss_cases() -> list[GradCase]:
    return [
        _loss_case("stage1_loss/raw", 1, "raw"),
        _loss_case("stage1_loss/conv1", 1, "embed.conv1.kernels"),
        _loss_case("stage1_loss/conv3", 1, "embed.conv3.kernels"),
        _loss_case("stage1_loss/classifier", 1, "domain.W"),
        _loss_case("stage2_loss/raw", 2, "raw"),
        _loss_case("stage2_loss/conv2", 2, "embed.conv2.kernels"),
        _loss_case("stage2_loss/lstm_fwd", 2, "lstm.fwd.w_x"),
        _loss_case("stage2_loss/lstm_bwd_h", 2, "lstm.bwd.w_h"),
        _loss_case("stage2_loss/heads", 2, "heads.W"),
    ]


def all_cases() -> list[GradCase]:
    return _primitive_cases() + _loss_cases()


def run_case(case: GradCase, points: int = 10, seed: int = 0, step: float = STEP) -> GradResult:
    worst = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(points):
        point = rng.uniform(-1.0, 1.0, size=case.shape)
        f = case.build(rng)
        worst = max(worst, ad.grad_check(f, point, step))
    return GradResult(case.name, worst, case.tolerance)


def run_gradient_suite(points: int = 10, seed: int = 0) -> tuple[list[GradResult], float]:
    """Run every case at ``points`` random points; returns results and elapsed seconds."""
    start = time.perf_counter()
    results = [run_case(c, points, seed) for c in all_cases()]
    return results, time.perf_counter() - start
