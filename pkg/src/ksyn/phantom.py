"""Analytic cine phantoms: nested ellipses pulsing over one cardiac cycle.

Coordinates are normalized so the field of view spans ``[-1, 1]`` on both
axes (``x`` along columns, ``y`` along rows).  Semi-axes of each ellipse
oscillate as ``a(t) = a0 + m * g * sin(2*pi*t/T)`` where ``m`` is the motion
amplitude (fraction of the FOV half-width) and ``g`` a per-ellipse gain, so
the scene repeats with period ``T`` frames.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .kspace import CineVolume

__all__ = [
    "Ellipse",
    "PhantomSpec",
    "PhantomCorpus",
    "generate_phantom",
    "phantom_layout",
    "ellipse_area",
    "make_corpus",
    "pca_select",
    "volume_seed",
    "corpus_hash",
]


@dataclass(frozen=True)
class Ellipse:
    """One ellipse in normalized FOV units."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0
    intensity: float = 1.0
    gain: float = 1.0

    def axes_at(self, t: float, n_frames: int, motion: float) -> tuple[float, float]:
        s = motion * self.gain * np.sin(2 * np.pi * t / n_frames)
        return self.a + s, self.b + s

    def half_extents(self, a: float, b: float) -> tuple[float, float]:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return float(np.hypot(a * c, b * s)), float(np.hypot(a * s, b * c))


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one phantom volume.

    When ``ellipses`` is None the layout is drawn from ``seed``.
    """

    grid: tuple[int, int, int] = (64, 64, 8)
    n_ellipses: int = 3
    motion_amplitude: float = 0.08
    contrast_levels: tuple[float, ...] = (0.35, 0.7, 1.0)
    noise_sigma: float = 0.0
    seed: int = 0
    ellipses: Optional[tuple[Ellipse, ...]] = None
    edge_blur: float = 0.0

    def validate(self) -> None:
        H, W, T = self.grid
        if H < 2 or W < 2 or T < 1 or H % 2 or W % 2:
            raise ValueError(f"invalid phantom grid {self.grid}; need even H, W >= 2 and T >= 1")
        if self.n_ellipses < 1:
            raise ValueError("n_ellipses must be >= 1")
        if not 0.0 <= self.motion_amplitude <= 0.2:
            raise ValueError(f"motion_amplitude {self.motion_amplitude} outside [0, 0.2]")
        if not self.contrast_levels or any(not 0.0 <= c <= 1.0 for c in self.contrast_levels):
            raise ValueError("contrast_levels must be a non-empty list of values in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.edge_blur < 0:
            raise ValueError("edge_blur must be >= 0")
        if self.ellipses is not None:
            check_layout(self.ellipses, self.motion_amplitude)


def check_layout(ellipses: Sequence[Ellipse], motion: float) -> None:
    """Reject layouts whose ellipses collapse or leave the FOV at any frame."""
    for i, e in enumerate(ellipses):
        excursion = motion * abs(e.gain)
        if min(e.a, e.b) - excursion <= 0:
            raise ValueError(f"ellipse {i} collapses under motion amplitude {motion}")
        ex, ey = e.half_extents(e.a + excursion, e.b + excursion)
        if abs(e.cx) + ex > 1.0 or abs(e.cy) + ey > 1.0:
            raise ValueError(
                f"ellipse {i} leaves the field of view under motion amplitude {motion}"
            )


def phantom_layout(spec: PhantomSpec) -> tuple[Ellipse, ...]:
    """Ellipse layout for ``spec``: explicit if given, otherwise seeded nesting."""
    if spec.ellipses is not None:
        return tuple(spec.ellipses)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x1A]))
    m = spec.motion_amplitude
    levels = spec.contrast_levels
    out = []
    # body ellipse, then each further ellipse nested inside the previous one
    a = rng.uniform(0.55, 0.75)
    b = rng.uniform(0.5, 0.7)
    cx, cy = rng.uniform(-0.06, 0.06, size=2)
    theta = rng.uniform(0, np.pi)
    gain = 0.25
    for i in range(spec.n_ellipses):
        if i > 0:
            scale = rng.uniform(0.45, 0.7)
            cx += rng.uniform(-0.2, 0.2) * min(a, b) * (1 - scale)
            cy += rng.uniform(-0.2, 0.2) * min(a, b) * (1 - scale)
            a, b = a * scale * rng.uniform(0.85, 1.15), b * scale * rng.uniform(0.85, 1.15)
            theta = rng.uniform(0, np.pi)
            gain = rng.uniform(0.6, 1.0)
        if m > 0:
            gain = min(gain, 0.5 * min(a, b) / m)
        out.append(Ellipse(float(cx), float(cy), float(a), float(b), float(theta),
                           float(levels[i % len(levels)]), float(gain)))
    return tuple(out)


def ellipse_area(e: Ellipse, t: float, n_frames: int, motion: float) -> float:
    """Closed-form area ``pi*a*b`` (normalized units) at frame ``t``; ``t`` may wrap."""
    a, b = e.axes_at(t, n_frames, motion)
    return float(np.pi * a * b)


def _grid_coords(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    y = (np.arange(H) - H / 2 + 0.5) / (H / 2)
    x = (np.arange(W) - W / 2 + 0.5) / (W / 2)
    return np.meshgrid(y, x, indexing="ij")


def _inside(e: Ellipse, a: float, b: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    c, s = np.cos(e.theta), np.sin(e.theta)
    dx, dy = xx - e.cx, yy - e.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _phase_map(seed: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2B]))
    p0 = rng.uniform(-np.pi, np.pi)
    p1, p2 = rng.uniform(-1.0, 1.0, size=2)
    p3, p4, p5 = rng.uniform(-0.5, 0.5, size=3)
    return p0 + p1 * xx + p2 * yy + p3 * xx**2 + p4 * xx * yy + p5 * yy**2


def render_magnitude(spec: PhantomSpec) -> np.ndarray:
    """Noise-free real magnitude frames ``(H, W, T)``.

    ``edge_blur > 0`` smooths each frame with a Gaussian of that many pixels
    (a partial-volume edge instead of a hard step).
    """
    spec.validate()
    H, W, T = spec.grid
    layout = phantom_layout(spec)
    check_layout(layout, spec.motion_amplitude)
    yy, xx = _grid_coords(H, W)
    out = np.zeros((H, W, T))
    for t in range(T):
        img = out[:, :, t]
        for e in layout:
            a, b = e.axes_at(t, T, spec.motion_amplitude)
            img[_inside(e, a, b, yy, xx)] = e.intensity
    if spec.edge_blur > 0:
        out = gaussian_filter(out, (spec.edge_blur, spec.edge_blur, 0), mode="constant")
    return out


def generate_phantom(spec: PhantomSpec) -> CineVolume:
    """Render the complex cine volume described by ``spec``.

    The magnitude scene is multiplied by a smooth polynomial phase map and
    complex Gaussian noise of total standard deviation
    ``noise_sigma * peak`` is added.
    """
    magnitude = render_magnitude(spec)
    H, W, T = spec.grid
    yy, xx = _grid_coords(H, W)
    data = magnitude * np.exp(1j * _phase_map(spec.seed, yy, xx))[:, :, None]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x3C]))
        peak = float(np.max(magnitude)) or 1.0
        std = spec.noise_sigma * peak / np.sqrt(2.0)
        data = data + std * (rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape))
    return CineVolume(data)


def volume_seed(seed: int, index: int) -> int:
    """Per-volume seed derived from ``(seed, index)``; order independent."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class PhantomCorpus:
    """Volumes plus their specs and a disjoint train/heldout split."""

    volumes: list
    specs: list
    split: list = field(default=None)

    def __post_init__(self):
        if self.split is None:
            self.split = ["train"] * len(self.volumes)
        if not len(self.volumes) == len(self.specs) == len(self.split):
            raise ValueError("volumes, specs and split must have equal length")
        if any(s not in ("train", "heldout") for s in self.split):
            raise ValueError("split entries must be 'train' or 'heldout'")

    def __len__(self) -> int:
        return len(self.volumes)

    def indices(self, part: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == part]

    def train(self) -> list:
        return [self.volumes[i] for i in self.indices("train")]

    def heldout(self) -> list:
        return [self.volumes[i] for i in self.indices("heldout")]

    def take(self, idx: Sequence[int]) -> "PhantomCorpus":
        idx = list(idx)
        return PhantomCorpus([self.volumes[i] for i in idx], [self.specs[i] for i in idx],
                             [self.split[i] for i in idx])


def corpus_hash(volumes: Sequence) -> str:
    h = hashlib.sha256()
    for v in volumes:
        data = v.data if isinstance(v, CineVolume) else np.asarray(v)
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def pca_select(volumes: Sequence, m: int, n_components: int = 5) -> list[int]:
    """Pick ``m`` representative volumes by farthest-point coverage in PC space.

    Magnitude volumes are flattened and projected onto their leading
    principal components.  Selection starts from the volume farthest from
    the corpus mean and greedily adds the volume farthest from the chosen
    set.  Returns sorted indices.
    """
    n = len(volumes)
    if m > n:
        raise ValueError(f"cannot select {m} volumes from a corpus of {n}")
    if m < 1:
        raise ValueError("subset size must be >= 1")
    if m == n:
        return list(range(n))
    X = np.stack([np.abs(v.data if isinstance(v, CineVolume) else v).ravel() for v in volumes])
    X = X - X.mean(axis=0)
    U, S, _ = np.linalg.svd(X, full_matrices=False)
    k = max(1, min(n_components, int(np.sum(S > S[0] * 1e-12)) if S[0] > 0 else 1))
    proj = U[:, :k] * S[:k]
    chosen = [int(np.argmax(np.linalg.norm(proj, axis=1)))]
    dist = np.linalg.norm(proj - proj[chosen[0]], axis=1)
    while len(chosen) < m:
        dist[chosen] = -1.0
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(proj - proj[nxt], axis=1))
    return sorted(chosen)


def make_corpus(n: int, base_spec: PhantomSpec, seed: int,
                train_size: Optional[int] = None) -> PhantomCorpus:
    """Generate ``n`` phantoms with per-volume seeds derived from ``seed``.

    With ``train_size`` set, that many volumes are picked by
    :func:`pca_select` and marked ``train``; the rest become ``heldout``.
    """
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    if train_size is not None and train_size > n:
        raise ValueError(f"cannot select {train_size} volumes from a corpus of {n}")
    base_spec.validate()
    specs = [replace(base_spec, seed=volume_seed(seed, i), ellipses=None) for i in range(n)]
    volumes = [generate_phantom(s) for s in specs]
    split = ["train"] * n
    if train_size is not None:
        keep = set(pca_select(volumes, train_size))
        split = ["train" if i in keep else "heldout" for i in range(n)]
    return PhantomCorpus(volumes, specs, split)
