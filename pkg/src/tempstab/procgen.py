"""Seeded procedural HDR scenes: bright features over a dim background,
partly occluded by dark beams, rendered with anti-aliased edges.

The ground truth ``y`` goes up to ``y_max``; the input is the sensor-clipped
``x = clip(y, 0, 1)`` and the mask marks pixels with ``y > 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pgm import read_pgm, write_pgm


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 32
    feature_count: tuple[int, int] = (2, 4)
    feature_kinds: tuple[str, ...] = ("disk", "rectangle")
    feature_radius: tuple[float, float] = (2.5, 6.0)
    peak_intensity: tuple[float, float] = (1.2, 4.0)
    y_max: float = 4.0
    background: tuple[float, float] = (0.05, 0.35)
    beam_count: tuple[int, int] = (0, 2)
    beam_width: tuple[float, float] = (1.0, 3.0)
    beam_intensity: tuple[float, float] = (0.02, 0.15)
    max_speed: float = 2.0  # px per frame, bound on feature centre displacement
    oscillation: float = 0.5  # share of max_speed given to the sinusoidal component

    def __post_init__(self):
        if self.image_size < 4:
            raise ConfigError("image_size must be at least 4")
        for name in ("feature_count", "feature_radius", "peak_intensity", "background",
                     "beam_count", "beam_width", "beam_intensity"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"invalid range for {name}: ({lo}, {hi})")
        if self.feature_count[0] < 1:
            raise ConfigError("need at least one feature per scene")
        if not set(self.feature_kinds) <= {"disk", "rectangle"} or not self.feature_kinds:
            raise ConfigError(f"unknown feature kinds {self.feature_kinds}")
        if self.peak_intensity[1] > self.y_max:
            raise ConfigError("peak intensity range exceeds y_max")
        if self.max_speed < 0 or not 0 <= self.oscillation <= 1:
            raise ConfigError("invalid motion settings")

    def scaled(self, image_size: int) -> "SceneSpec":
        """Same scene statistics at another resolution (counts scale with area)."""
        f = (image_size / self.image_size) ** 2
        fc = (max(1, round(self.feature_count[0] * f)), max(1, round(self.feature_count[1] * f)))
        bc = (round(self.beam_count[0] * math.sqrt(f)), round(self.beam_count[1] * math.sqrt(f)))
        return replace(self, image_size=image_size, feature_count=fc, beam_count=bc)


@dataclass(frozen=True)
class FramePair:
    y: np.ndarray  # (H, W, 1) ground truth
    x: np.ndarray  # (H, W, 1) clipped input
    mask: np.ndarray  # (H, W, 1) bool, y > 1

    @classmethod
    def from_truth(cls, y: np.ndarray) -> "FramePair":
        y = np.asarray(y, dtype=np.float64)
        return cls(y=y, x=np.clip(y, 0.0, 1.0), mask=y > 1.0)


@dataclass(frozen=True)
class SequenceSet:
    sequences: list[list[FramePair]]
    frame_rate: float = 25.0

    def stacked(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, y, mask) arrays of shape (T, H, W, 1) for sequence ``k``."""
        seq = self.sequences[k]
        return (np.stack([f.x for f in seq]), np.stack([f.y for f in seq]),
                np.stack([f.mask for f in seq]))


@dataclass
class _Feature:
    kind: str
    center: np.ndarray  # (row, col)
    radius: float
    aspect: float
    peak: float
    falloff: float
    velocity: np.ndarray
    amplitude: np.ndarray
    omega: float
    phase: float
    extent: float = 0.0  # reflecting box size; 0 disables the bounce

    def center_at(self, t: float) -> np.ndarray:
        c = self.center + self.velocity * t + self.amplitude * math.sin(self.omega * t + self.phase)
        if self.extent <= 0:
            return c
        # bounce off the borders; reflection is 1-Lipschitz so speed bounds hold
        m = np.mod(c, 2 * self.extent)
        return np.where(m > self.extent, 2 * self.extent - m, m)


@dataclass
class _Scene:
    bg: np.ndarray
    features: list
    beams: list  # (normal angle, offset, width, intensity)


def _coverage(dist_inside: np.ndarray) -> np.ndarray:
    """Pixel coverage from a signed distance (positive inside), 1 px ramp."""
    return np.clip(dist_inside + 0.5, 0.0, 1.0)


def _sample_scene(spec: SceneSpec, rng: np.random.Generator, moving: bool) -> _Scene:
    n = spec.image_size
    ii, jj = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    lo, hi = spec.background
    a, b = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(theta) * ii + math.sin(theta) * jj) / n
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    bg = a + (b - a) * ramp

    features = []
    count = int(rng.integers(spec.feature_count[0], spec.feature_count[1] + 1))
    for _ in range(count):
        kind = spec.feature_kinds[int(rng.integers(len(spec.feature_kinds)))]
        radius = rng.uniform(*spec.feature_radius)
        center = rng.uniform(0, n, size=2)
        velocity = np.zeros(2)
        amplitude = np.zeros(2)
        omega = 0.0
        phase = 0.0
        if moving and spec.max_speed > 0:
            lin = spec.max_speed * (1 - spec.oscillation)
            ang = rng.uniform(0, 2 * math.pi)
            velocity = rng.uniform(0.3, 1.0) * lin * np.array([math.cos(ang), math.sin(ang)])
            omega = rng.uniform(0.05, 0.3)
            osc = spec.max_speed * spec.oscillation
            ang2 = rng.uniform(0, 2 * math.pi)
            # |d/dt A sin(wt)| <= A*w, keeps the displacement bound per frame
            amplitude = rng.uniform(0.3, 1.0) * osc / omega * np.array([math.cos(ang2), math.sin(ang2)])
            phase = rng.uniform(0, 2 * math.pi)
        features.append(_Feature(
            kind=kind,
            center=center,
            radius=radius,
            aspect=rng.uniform(0.6, 1.6),
            peak=rng.uniform(*spec.peak_intensity),
            falloff=rng.uniform(0.3, 0.9),
            velocity=velocity,
            amplitude=amplitude,
            omega=omega,
            phase=phase,
            extent=float(n) if moving else 0.0,
        ))

    beams = []
    nb = int(rng.integers(spec.beam_count[0], spec.beam_count[1] + 1))
    for _ in range(nb):
        ang = rng.uniform(0, math.pi)
        offset = rng.uniform(0.15 * n, 0.85 * n)
        beams.append((ang, offset, rng.uniform(*spec.beam_width), rng.uniform(*spec.beam_intensity)))
    return _Scene(bg, features, beams)


def _render(scene: _Scene, spec: SceneSpec, t: float) -> np.ndarray:
    n = spec.image_size
    ii, jj = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    y = scene.bg.copy()
    for f in scene.features:
        ci, cj = f.center_at(t)
        if f.kind == "disk":
            d = np.hypot(ii - ci, jj - cj)
            cov = _coverage(f.radius - d)
            # dome profile: brightest in the middle, so clipped rims hint at the peak
            prof = f.peak * (1.0 - f.falloff * np.clip(d / f.radius, 0, 1) ** 2)
        else:
            hi_, hj = f.radius, f.radius * f.aspect
            cov = _coverage(hi_ - np.abs(ii - ci)) * _coverage(hj - np.abs(jj - cj))
            u = np.maximum(np.abs(ii - ci) / hi_, np.abs(jj - cj) / hj)
            prof = f.peak * (1.0 - f.falloff * np.clip(u, 0, 1) ** 2)
        y = y * (1 - cov) + cov * prof
    for ang, offset, width, level in scene.beams:
        s = math.cos(ang) * ii + math.sin(ang) * jj - offset
        cov = _coverage(width / 2 - np.abs(s))
        y = y * (1 - cov) + cov * level
    return np.clip(y, 0.0, spec.y_max)[..., None]


def generate_training_set(spec: SceneSpec, count: int) -> list[FramePair]:
    """``count`` independent static scenes."""
    rng = np.random.default_rng([spec.seed, 0])
    out = []
    for _ in range(count):
        scene = _sample_scene(spec, rng, moving=False)
        out.append(FramePair.from_truth(_render(scene, spec, 0.0)))
    return out


def generate_test_sequences(spec: SceneSpec, sequences: int, frames: int,
                            frame_rate: float = 25.0) -> SequenceSet:
    """Moving scenes; beams and background stay fixed within a sequence."""
    if frames < 2:
        raise ConfigError("a test sequence needs at least two frames")
    seqs = []
    for s in range(sequences):
        rng = np.random.default_rng([spec.seed, 1, s])
        scene = _sample_scene(spec, rng, moving=True)
        seqs.append([FramePair.from_truth(_render(scene, spec, float(t))) for t in range(frames)])
    return SequenceSet(seqs, frame_rate)


def feature_track(spec: SceneSpec, sequence: int, frames: int) -> np.ndarray:
    """Feature centres, shape (frames, features, 2), for the given test sequence."""
    rng = np.random.default_rng([spec.seed, 1, sequence])
    scene = _sample_scene(spec, rng, moving=True)
    return np.array([[f.center_at(float(t)) for f in scene.features] for t in range(frames)])


def as_arrays(pairs: list[FramePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([p.x for p in pairs]), np.stack([p.y for p in pairs]),
            np.stack([p.mask for p in pairs]))


# ---------------------------------------------------------------------------
# dataset dump: <dir>/manifest.txt lines "sequence frame x_file y_file mask_file"


def dump_sequences(seqs: SequenceSet, directory, y_max: float = 4.0) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"# frame_rate {seqs.frame_rate!r}", "# sequence frame x y mask"]
    for s, seq in enumerate(seqs.sequences):
        for t, fr in enumerate(seq):
            stem = f"s{s:03d}_f{t:04d}"
            names = (f"{stem}_x.pgm", f"{stem}_y.pgm", f"{stem}_mask.pgm")
            write_pgm(d / names[0], fr.x[..., 0], 1.0)
            write_pgm(d / names[1], fr.y[..., 0], y_max)
            write_pgm(d / names[2], fr.mask[..., 0].astype(np.float64), 1.0)
            lines.append(f"{s} {t} {' '.join(names)}")
    manifest = d / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_sequences(directory) -> SequenceSet:
    """Read a dump back. Values are quantized to 16 bits by the dump."""
    d = Path(directory)
    frame_rate = 25.0
    rows = []
    for line in (d / "manifest.txt").read_text().splitlines():
        if line.startswith("# frame_rate"):
            frame_rate = float(line.split()[2])
        if not line.strip() or line.startswith("#"):
            continue
        s, t, xf, yf, mf = line.split()
        rows.append((int(s), int(t), xf, yf, mf))
    rows.sort()
    seqs: dict[int, list[FramePair]] = {}
    for s, _, xf, yf, mf in rows:
        x = read_pgm(d / xf)[..., None]
        y = read_pgm(d / yf)[..., None]
        m = read_pgm(d / mf)[..., None] > 0.5
        seqs.setdefault(s, []).append(FramePair(y=y, x=x, mask=m))
    return SequenceSet([seqs[k] for k in sorted(seqs)], frame_rate)
