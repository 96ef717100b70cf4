"""Image tensors, affine index transforms, warping and noise perturbation.

Images are numpy arrays of shape ``(H, W, C)``; batches are ``(N, H, W, C)``.
Pixel indices follow ``(i, j) = (row, column)`` with the origin in the corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, SingularTransformError


def check_image(x: np.ndarray, *, batched: bool | None = None) -> np.ndarray:
    """Validate an image (or batch of images) and return it as an ndarray."""
    x = np.asarray(x)
    if batched is None:
        ok = x.ndim in (3, 4)
    else:
        ok = x.ndim == (4 if batched else 3)
    if not ok:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    return x


@dataclass(frozen=True)
class TransformParams:
    tx: float = 0.0
    ty: float = 0.0
    r: float = 0.0  # degrees
    z: float = 1.0
    hx: float = 0.0  # degrees
    hy: float = 0.0  # degrees


@dataclass(frozen=True)
class TransformRanges:
    """Closed sampling interval per transform parameter. Angles in degrees."""

    tx: tuple[float, float] = (-2.0, 2.0)
    ty: tuple[float, float] = (-2.0, 2.0)
    r: tuple[float, float] = (-1.0, 1.0)
    z: tuple[float, float] = (0.97, 1.03)
    hx: tuple[float, float] = (-1.0, 1.0)
    hy: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        for name in ("tx", "ty", "r", "z", "hx", "hy"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid range for {name}: ({lo}, {hi})")

    @classmethod
    def fixed(cls, p: TransformParams) -> "TransformRanges":
        return cls(**{k: (v, v) for k, v in vars(p).items()})


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix mapping output indices (i, j, 1) to source indices (i', j')."""

    m: tuple[tuple[float, float, float], tuple[float, float, float]]
    sx: int
    sy: int

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.m, dtype=np.float64)

    @classmethod
    def from_matrix(cls, m, sx: int, sy: int) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 3):
            raise DimensionError(f"affine matrix must be 2x3, got {m.shape}")
        return cls(tuple(tuple(float(v) for v in row) for row in m), int(sx), int(sy))

    @classmethod
    def identity(cls, sx: int, sy: int) -> "AffineTransform":
        return cls(((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)), int(sx), int(sy))

    def inverse(self) -> "AffineTransform":
        m = self.matrix
        a_inv = np.linalg.inv(m[:, :2])
        return AffineTransform.from_matrix(
            np.hstack([a_inv, -(a_inv @ m[:, 2:])]), self.sx, self.sy
        )


@dataclass(frozen=True)
class NoiseSpec:
    sigma_min: float = 0.01
    sigma_max: float = 0.04

    def __post_init__(self):
        if not (0.0 <= self.sigma_min <= self.sigma_max):
            raise ConfigError(
                f"need 0 <= sigma_min <= sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )


def sample_transform(ranges: TransformRanges, rng: np.random.Generator) -> TransformParams:
    """Draw every parameter independently and uniformly from its range."""
    if not isinstance(ranges, TransformRanges):
        raise ConfigError("ranges must be a TransformRanges instance")
    vals = {}
    for name in ("tx", "ty", "r", "z", "hx", "hy"):
        lo, hi = getattr(ranges, name)
        vals[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return TransformParams(**vals)


def build_matrix(p: TransformParams, sx: int, sy: int) -> AffineTransform:
    """Closed-form index transformation for translation, rotation, zoom and shear.

    The centre shift is folded into the translation column, so the transform
    acts about the image centre even though indices start in the corner.
    """
    if sx <= 0 or sy <= 0:
        raise ConfigError(f"image size must be positive, got ({sx}, {sy})")
    hx = math.radians(p.hx)
    hy = math.radians(p.hy)
    r = math.radians(p.r)
    chx, chy = math.cos(hx), math.cos(hy)
    if abs(chx) < 1e-12 or abs(chy) < 1e-12:
        raise SingularTransformError("shear angle of +-90 degrees is singular")
    a = hx - r
    b = hy + r
    z = p.z
    ca, sa, cb, sb = math.cos(a), math.sin(a), math.cos(b), math.sin(b)

    t11 = z * ca / chx
    t12 = z * sa / chx
    t13 = (sx * chx - sx * z * ca) / (2 * chx) + (
        2 * p.tx * z * ca - sy * z * sa + 2 * p.ty * z * sa
    ) / (2 * chx)
    t21 = z * sb / chy
    t22 = z * cb / chy
    t23 = (sy * chy - sy * z * cb) / (2 * chy) + (
        2 * p.ty * z * cb - sx * z * sb + 2 * p.tx * z * sb
    ) / (2 * chy)
    return AffineTransform(((t11, t12, t13), (t21, t22, t23)), int(sx), int(sy))


@lru_cache(maxsize=512)
def _bilinear_plan(m: tuple, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat source indices and weights, shape (4, H*W), for the four bilinear taps.

    Source coordinates are clamped to the image, so border pixels repeat.
    """
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    (a, b, c), (d, e, f) = m
    si = np.clip(a * ii + b * jj + c, 0.0, h - 1.0).ravel()
    sj = np.clip(d * ii + e * jj + f, 0.0, w - 1.0).ravel()
    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    di = si - i0
    dj = sj - j0
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    idx = np.stack([i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1])
    wts = np.stack([(1 - di) * (1 - dj), (1 - di) * dj, di * (1 - dj), di * dj])
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def _per_image(ts, n: int) -> list[AffineTransform]:
    if isinstance(ts, AffineTransform):
        return [ts] * n
    ts = list(ts)
    if len(ts) != n:
        raise DimensionError(f"got {len(ts)} transforms for a batch of {n}")
    return ts


def _apply(x: np.ndarray, t, adjoint: bool) -> np.ndarray:
    if x.ndim == 3:
        if not isinstance(t, AffineTransform):
            raise DimensionError("a single image takes a single AffineTransform")
        return _apply(x[None], [t], adjoint)[0]
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    n, h, w, c = x.shape
    out = np.empty(x.shape, dtype=np.result_type(x.dtype, np.float32))
    for k, tk in enumerate(_per_image(t, n)):
        idx, wts = _bilinear_plan(tk.m, h, w)
        xf = x[k].reshape(h * w, c)
        if adjoint:
            flat = (idx[..., None] * c + np.arange(c)).ravel()
            vals = (wts[..., None] * xf[None]).ravel()
            out[k] = np.bincount(flat, weights=vals, minlength=h * w * c).reshape(h, w, c)
        else:
            acc = wts[0][:, None] * xf[idx[0]]
            for tap in range(1, 4):
                acc += wts[tap][:, None] * xf[idx[tap]]
            out[k] = acc.reshape(h, w, c)
    return out


def warp(x: np.ndarray, t: AffineTransform | Sequence[AffineTransform]) -> np.ndarray:
    """Resample ``x`` so that ``out[i, j] = x[i', j']`` with bilinear interpolation.

    ``t`` may be one transform or one per image of a batch.
    """
    return _apply(check_image(x), t, adjoint=False)


def warp_gradient(gout: np.ndarray, t: AffineTransform | Sequence[AffineTransform]) -> np.ndarray:
    """Adjoint of :func:`warp`: scatter ``gout`` back through the gather weights."""
    return _apply(np.asarray(gout), t, adjoint=True)


def perturb_noise(x: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with one sigma ~ U(sigma_min, sigma_max) per image."""
    x = check_image(x)
    batch = x if x.ndim == 4 else x[None]
    out = np.empty_like(batch)
    for k in range(batch.shape[0]):
        sigma = rng.uniform(spec.sigma_min, spec.sigma_max)
        if sigma == 0.0:
            out[k] = batch[k]
        else:
            out[k] = batch[k] + rng.normal(0.0, sigma, size=batch[k].shape).astype(x.dtype)
    return out if x.ndim == 4 else out[0]
