"""Reconstruction loss, temporal regularizers and the blended training objective.

Every distance is the mean of squared differences over pixels and channels
(and batch), so the blend weight ``alpha`` means the same thing for any patch
size. The regularized objective is

    total = (1 - alpha) * rec + alpha * reg

evaluated with one set of weights applied to both the clean and the perturbed
input (siamese evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import GradientTape, backward, forward
from .tensorcore import (
    AffineTransform,
    NoiseSpec,
    TransformRanges,
    build_matrix,
    perturb_noise,
    sample_transform,
    warp,
    warp_gradient,
)

REG_KINDS = (
    "none",
    "stability-noise",
    "stability-transform",
    "transform-invariance",
    "sparse-jacobian",
    "augmentation",
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    reg_kind: str = "none"
    transform_ranges: TransformRanges = field(default_factory=TransformRanges)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise ConfigError(f"unknown reg_kind {self.reg_kind!r}; expected one of {REG_KINDS}")
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.reg_kind == "none" and self.alpha != 0.0:
            raise ConfigError("reg_kind 'none' has no regularizer to weight; alpha must be 0")


@dataclass
class LossBreakdown:
    total: float
    rec: float
    reg: float
    grads: list[np.ndarray]


def _apply(net, x: np.ndarray) -> np.ndarray:
    if hasattr(net, "params"):
        return forward(net, x)
    return np.asarray(net(x))


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same(a, b)
    d = a.astype(np.float64) - b
    return float(np.mean(d * d))


def loss_rec(fx: np.ndarray, y: np.ndarray) -> float:
    return mse(fx, y)


def loss_stability(net, x: np.ndarray, perturbed: np.ndarray) -> float:
    """Distance between predictions for ``x`` and for its perturbed copy."""
    _check_same(np.asarray(x), np.asarray(perturbed))
    return mse(_apply(net, x), _apply(net, perturbed))


def loss_transform_invariance(net, x: np.ndarray, t) -> float:
    """Distance between f(T(x)) and T(f(x))."""
    return mse(_apply(net, warp(x, t)), warp(_apply(net, x), t))


def loss_sparse_jacobian(net, x: np.ndarray, y: np.ndarray, t, ty: np.ndarray) -> float:
    """Mismatch between the error on the warped patch and the error on the original.

    ``ty`` must be ``y`` warped with the same transform as ``x``.
    """
    _check_same(np.asarray(y), np.asarray(ty))
    fx = _apply(net, x).astype(np.float64)
    ftx = _apply(net, warp(x, t)).astype(np.float64)
    _check_same(fx, np.asarray(y))
    r = (ftx - ty) - (fx - y)
    return float(np.mean(r * r))


def loss_augmentation(net, x: np.ndarray, t, ty: np.ndarray) -> float:
    """Plain reconstruction loss on a warped input/target pair."""
    return mse(_apply(net, warp(x, t)), ty)


def sample_transforms(ranges: TransformRanges, n: int, h: int, w: int,
                      rng: np.random.Generator) -> list[AffineTransform]:
    return [build_matrix(sample_transform(ranges, rng), w, h) for _ in range(n)]


def _branch(net, x: np.ndarray):
    if hasattr(net, "params"):
        tape = GradientTape()
        return forward(net, x, tape), tape
    return np.asarray(net(x)), None


def _branch_grads(net, tape, g):
    if tape is None:
        return [np.zeros_like(p) for p in getattr(net, "params", [])]
    return backward(net, tape, g)


def evaluate_total(net, batch, cfg: LossConfig, rng: np.random.Generator) -> LossBreakdown:
    """Blended loss and its exact parameter gradient for one batch.

    ``batch`` is ``(x, y)`` with arrays of shape ``(N, H, W, C)``. Exactly one
    integer is drawn from ``rng`` per call whatever ``cfg`` says, and all
    perturbations come from a generator seeded with it. Two runs that differ
    only in the regularizer therefore see the same data order.
    """
    if not isinstance(cfg, LossConfig):
        raise ConfigError("cfg must be a LossConfig")
    x, y = (np.asarray(a) for a in batch)
    if x.ndim == 3:
        x, y = x[None], y[None]
    n, h, w, _ = x.shape
    prng = np.random.default_rng(rng.integers(0, 2**63 - 1))

    fx, tape_x = _branch(net, x)
    _check_same(fx, y)
    fx64 = fx.astype(np.float64)
    size = fx.size
    alpha = cfg.alpha
    err = fx64 - y
    rec = float(np.mean(err * err))
    g_fx = (1.0 - alpha) * (2.0 / size) * err

    if cfg.reg_kind == "none":
        grads = _branch_grads(net, tape_x, g_fx)
        return LossBreakdown(rec, rec, 0.0, grads)

    if cfg.reg_kind == "stability-noise":
        ts = None
        xp = perturb_noise(x, cfg.noise, prng)
    else:
        ts = sample_transforms(cfg.transform_ranges, n, h, w, prng)
        xp = warp(x, ts)
    fxp, tape_p = _branch(net, xp)
    fxp64 = fxp.astype(np.float64)

    kind = cfg.reg_kind
    if kind in ("stability-noise", "stability-transform"):
        r = fx64 - fxp64
        g_fx = g_fx + alpha * (2.0 / size) * r
        g_fxp = -alpha * (2.0 / size) * r
    elif kind == "transform-invariance":
        r = fxp64 - warp(fx64, ts)
        g_fxp = alpha * (2.0 / size) * r
        g_fx = g_fx - warp_gradient(g_fxp, ts)
    elif kind == "sparse-jacobian":
        r = (fxp64 - warp(y.astype(np.float64), ts)) - err
        g_fxp = alpha * (2.0 / size) * r
        g_fx = g_fx - g_fxp
    else:  # augmentation
        r = fxp64 - warp(y.astype(np.float64), ts)
        g_fxp = alpha * (2.0 / size) * r
    reg = float(np.mean(r * r))

    grads = [a + b for a, b in zip(_branch_grads(net, tape_x, g_fx),
                                   _branch_grads(net, tape_p, g_fxp))]
    total = (1.0 - alpha) * rec + alpha * reg
    return LossBreakdown(total, rec, reg, grads)
