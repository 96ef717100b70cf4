"""Temporal smoothness and masked PSNR for video reconstructions.

High-frequency energy of a video ``v`` is ``D = |v - G * v|**2`` where ``G`` is
a normalized Gaussian applied along time only. Smoothness compares the energy
of the reference with that of the reconstruction::

    S = sqrt(sum D(ref) / sum D(rec))

``S < 1`` means the reconstruction flickers more than the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionError, SequenceLengthError


@dataclass(frozen=True)
class TemporalFilter:
    sigma_seconds: float = 0.15
    frame_rate: float = 25.0

    @property
    def sigma_frames(self) -> float:
        return self.sigma_seconds * self.frame_rate

    @property
    def radius(self) -> int:
        return int(math.ceil(3.0 * self.sigma_frames))

    @property
    def kernel(self) -> np.ndarray:
        r = self.radius
        t = np.arange(-r, r + 1, dtype=np.float64)
        k = np.exp(-0.5 * (t / self.sigma_frames) ** 2)
        return k / k.sum()


def _as_video(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 3:
        v = v[..., None]
    if v.ndim != 4:
        raise DimensionError(f"expected a (T, H, W[, C]) video, got shape {v.shape}")
    return v


def _as_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.ndim == len(shape) - 1:
        m = m[..., None]
    return np.broadcast_to(m, shape)


def highpass_energy(seq, filt: TemporalFilter = TemporalFilter(), mask=None) -> np.ndarray:
    """Per-pixel, per-frame high temporal frequency energy.

    Temporal borders use mirror padding that repeats the edge frame. Pixels
    outside ``mask`` are set to zero.
    """
    v = _as_video(seq)
    if v.shape[0] < filt.kernel.size:
        raise SequenceLengthError(
            f"sequence of {v.shape[0]} frames is shorter than the {filt.kernel.size}-tap filter"
        )
    low = correlate1d(v, filt.kernel, axis=0, mode="reflect")
    d = (v - low) ** 2
    m = _as_mask(mask, d.shape)
    if m is not None:
        d = np.where(m, d, 0.0)
    return d


def smoothness(ref, rec, filt: TemporalFilter = TemporalFilter(), mask=None) -> float:
    """Square root of the ratio of reference to reconstruction high-pass energy.

    Returns ``inf`` when only the reconstruction is perfectly flat in time, and
    1.0 when both are.
    """
    ref = _as_video(ref)
    rec = _as_video(rec)
    if ref.shape != rec.shape:
        raise DimensionError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    e_ref = float(highpass_energy(ref, filt, mask).sum())
    e_rec = float(highpass_energy(rec, filt, mask).sum())
    return _ratio(e_ref, e_rec)


def _ratio(e_ref: float, e_rec: float) -> float:
    if e_rec == 0.0:
        return 1.0 if e_ref == 0.0 else math.inf
    return math.sqrt(e_ref / e_rec)


def psnr(ref, rec, peak: float = 4.0, mask=None) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if ref.shape != rec.shape:
        raise DimensionError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    sq = (ref - rec) ** 2
    if mask is not None:
        m = _as_mask(mask, sq.shape)
        if not m.any():
            raise ValueError("mask selects no pixels")
        sq = sq[m]
    return _psnr_from_mse(float(sq.mean()), peak)


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class MetricReport:
    psnr: float
    smoothness: float
    masked_pixels: int
    per_sequence: list[dict] = field(default_factory=list)


def evaluate_sequences(refs, recs, masks=None, peak: float = 4.0,
                       filt: TemporalFilter = TemporalFilter()) -> MetricReport:
    """Aggregate PSNR and smoothness over several sequences.

    The aggregate PSNR pools squared errors over all selected pixels of all
    sequences; the aggregate smoothness pools the energies likewise.
    """
    sq_sum = 0.0
    count = 0
    e_ref_tot = 0.0
    e_rec_tot = 0.0
    per = []
    for k, (ref, rec) in enumerate(zip(refs, recs)):
        ref = _as_video(ref)
        rec = _as_video(rec)
        if ref.shape != rec.shape:
            raise DimensionError(f"sequence {k}: shape mismatch {ref.shape} vs {rec.shape}")
        m = _as_mask(None if masks is None else masks[k], ref.shape)
        sq = (ref - rec) ** 2
        sel = sq[m] if m is not None else sq.ravel()
        e_ref = float(highpass_energy(ref, filt, m).sum())
        e_rec = float(highpass_energy(rec, filt, m).sum())
        n = sel.size
        per.append({
            "sequence": k,
            "psnr": _psnr_from_mse(float(sel.mean()), peak) if n else math.nan,
            "smoothness": _ratio(e_ref, e_rec),
            "masked_pixels": int(n),
        })
        sq_sum += float(sel.sum())
        count += n
        e_ref_tot += e_ref
        e_rec_tot += e_rec
    if count == 0:
        raise ValueError("no pixels selected for evaluation")
    return MetricReport(
        psnr=_psnr_from_mse(sq_sum / count, peak),
        smoothness=_ratio(e_ref_tot, e_rec_tot),
        masked_pixels=count,
        per_sequence=per,
    )
