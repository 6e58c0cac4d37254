"""Temporal fusion of amplitude spectra across cine frames.

Amplitudes of two frames are mixed as ``mu * A_m + (1 - mu) * A_n`` while
the phase of the anchor frame ``m`` is kept.  Three schemes choose the
frames: ``adjacent`` (cyclic neighbours), ``skip`` (at least two frames
apart) and ``grouped`` (a convex combination over several frames).  An
optional radial band profile ``w(r)`` restricts mixing to part of the
spectrum: at radius ``r`` the partner weight is scaled by ``w(r)``, so bands
with ``w = 0`` keep the anchor amplitude.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kspace import AmplitudePhase, CineVolume, Spectrum, decompose, dft2, recompose

__all__ = [
    "SCHEMES",
    "FusionSpec",
    "FusedSignal",
    "fuse_pair",
    "fuse",
    "fuse_volume",
    "radial_profile",
    "draw_fusion_spec",
    "sample_guidance",
    "sample_fused_volumes",
]

SCHEMES = ("adjacent", "skip", "grouped")


def cyclic_distance(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


@dataclass(frozen=True)
class FusionSpec:
    """Which frames to fuse and how.

    ``weights`` is the scalar ``mu`` for ``adjacent``/``skip`` and a tuple of
    convex weights ``(anchor, *partners)`` for ``grouped``.
    ``freq_weighting`` is a radial profile sampled uniformly on
    ``r in [0, 1]`` (``r = 1`` at the spectrum corner), or None.
    """

    scheme: str
    anchor: int
    partners: tuple[int, ...]
    weights: float | tuple[float, ...]
    freq_weighting: Optional[tuple[float, ...]] = None
    seed: Optional[int] = None

    @property
    def mu(self) -> float:
        return float(self.weights) if np.isscalar(self.weights) else float(self.weights[0])

    def validate(self, n_frames: int) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown fusion scheme {self.scheme!r}; expected one of {SCHEMES}")
        frames = (self.anchor, *self.partners)
        if any(not 0 <= f < n_frames for f in frames):
            raise ValueError(f"{self.scheme}: frame indices {frames} out of range for T={n_frames}")
        if len(set(frames)) != len(frames):
            raise ValueError(f"{self.scheme}: frame indices {frames} must be distinct")
        if self.scheme in ("adjacent", "skip"):
            if len(self.partners) != 1:
                raise ValueError(f"{self.scheme} fusion takes exactly one partner frame")
            if not np.isscalar(self.weights):
                raise ValueError(f"{self.scheme} fusion takes a scalar mu")
            mu = float(self.weights)
            if not 0.0 <= mu <= 1.0:
                raise ValueError(f"{self.scheme}: mu={mu} outside [0, 1]")
            n = self.partners[0]
            if self.scheme == "adjacent" and cyclic_distance(self.anchor, n, n_frames) != 1:
                raise ValueError(
                    f"adjacent fusion needs cyclically neighbouring frames, got {self.anchor} and {n}"
                )
            if self.scheme == "skip" and abs(self.anchor - n) < 2:
                raise ValueError(
                    f"skip fusion needs frames at least 2 apart, got {self.anchor} and {n}"
                )
        else:
            w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
            if w.size != len(frames):
                raise ValueError(
                    f"grouped fusion needs {len(frames)} weights (anchor first), got {w.size}"
                )
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"grouped weights must be non-negative and sum to 1, got {tuple(w)}")
        if self.freq_weighting is not None:
            p = np.asarray(self.freq_weighting, dtype=np.float64)
            if p.ndim != 1 or p.size < 1 or np.any(p < 0) or np.any(p > 1):
                raise ValueError("freq_weighting must be a 1-D profile with values in [0, 1]")


@dataclass
class FusedSignal:
    """Fused amplitude, the frame whose phase it carries, and the recomposed spectrum."""

    fused_amplitude: np.ndarray
    phase_source: int
    phase: np.ndarray
    spectrum: Spectrum
    spec: Optional[FusionSpec] = None
    volume_index: Optional[int] = None


def fuse_pair(amp_m, amp_n, mu: float) -> np.ndarray:
    """``mu * A_m + (1 - mu) * A_n`` per bin.

    Accepts amplitude arrays or :class:`AmplitudePhase`.  The result is
    clipped into ``[min, max]`` of the inputs so rounding never leaves the
    convex hull; this also makes equal inputs return themselves exactly.
    """
    a = amp_m.amplitude if isinstance(amp_m, AmplitudePhase) else np.asarray(amp_m, dtype=np.float64)
    b = amp_n.amplitude if isinstance(amp_n, AmplitudePhase) else np.asarray(amp_n, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"amplitude grids differ: {a.shape} vs {b.shape}")
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu={mu} outside [0, 1]")
    out = mu * a + (1.0 - mu) * b
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def radial_profile(profile: Sequence[float], shape: tuple[int, int]) -> np.ndarray:
    """Evaluate a radial band profile on an uncentered ``shape`` grid.

    Radius is the distance from DC normalized so the spectrum corner is 1;
    the profile is linearly interpolated between uniformly spaced samples.
    """
    H, W = shape
    fy = np.fft.fftfreq(H) * 2
    fx = np.fft.fftfreq(W) * 2
    r = np.hypot(fy[:, None], fx[None, :]) / np.sqrt(2.0)
    p = np.asarray(profile, dtype=np.float64)
    if p.size == 1:
        return np.full(shape, p[0])
    return np.interp(r, np.linspace(0.0, 1.0, p.size), p)


def _mix(amps: list[np.ndarray], weights: np.ndarray, band: Optional[np.ndarray]) -> np.ndarray:
    lo = np.minimum.reduce(amps)
    hi = np.maximum.reduce(amps)
    if band is None:
        out = sum(w * a for w, a in zip(weights, amps))
    else:
        partner = [w * band for w in weights[1:]]
        anchor = 1.0 - sum(partner)
        out = anchor * amps[0] + sum(w * a for w, a in zip(partner, amps[1:]))
    return np.clip(out, lo, hi)


def fuse(volume: CineVolume, spec: FusionSpec, volume_index: Optional[int] = None) -> FusedSignal:
    """Fuse the frames named by ``spec`` into one guidance spectrum."""
    data = volume.data if isinstance(volume, CineVolume) else np.asarray(volume)
    T = data.shape[2]
    spec.validate(T)
    frames = (spec.anchor, *spec.partners)
    aps = [decompose(dft2(data[:, :, f])) for f in frames]
    amps = [ap.amplitude for ap in aps]
    if spec.scheme == "grouped":
        weights = np.asarray(spec.weights, dtype=np.float64)
    else:
        weights = np.array([spec.mu, 1.0 - spec.mu])
    band = None
    if spec.freq_weighting is not None:
        band = radial_profile(spec.freq_weighting, amps[0].shape)
    if band is None and spec.scheme != "grouped":
        fused = fuse_pair(amps[0], amps[1], spec.mu)
    else:
        fused = _mix(amps, weights, band)
    phase = aps[0].phase
    spectrum = recompose(AmplitudePhase(fused, phase))
    return FusedSignal(fused, spec.anchor, phase, spectrum, spec, volume_index)


def fuse_volume(volume: CineVolume, spec: FusionSpec) -> np.ndarray:
    """Apply ``spec`` at every frame, shifting all frame indices cyclically.

    Frame ``t`` of the result uses anchor ``t`` and partners offset from it
    by the same amounts as in ``spec``.  Returns uncentered k-space
    ``(H, W, T)``.  ``skip`` offsets are applied cyclically here.
    """
    data = volume.data if isinstance(volume, CineVolume) else np.asarray(volume)
    T = data.shape[2]
    spec.validate(T)
    kspace = dft2(data).data
    ap = decompose(Spectrum(kspace))
    offsets = [p - spec.anchor for p in spec.partners]
    if spec.scheme == "grouped":
        weights = np.asarray(spec.weights, dtype=np.float64)
    else:
        weights = np.array([spec.mu, 1.0 - spec.mu])
    band = None
    if spec.freq_weighting is not None:
        band = radial_profile(spec.freq_weighting, kspace.shape[:2])[:, :, None]
    amps = [ap.amplitude] + [np.roll(ap.amplitude, -o, axis=2) for o in offsets]
    fused = _mix(amps, weights, band)
    return recompose(AmplitudePhase(fused, ap.phase)).data


def draw_fusion_spec(rng: np.random.Generator, n_frames: int, scheme: str,
                     group_size: int = 3, freq_weighting=None) -> FusionSpec:
    """Draw frames and weights for ``scheme``; ``mu ~ U(0, 1)``, grouped weights ~ flat Dirichlet."""
    T = n_frames
    anchor = int(rng.integers(T))
    if scheme == "adjacent":
        if T < 2:
            raise ValueError("adjacent fusion needs at least 2 frames")
        partner = (anchor + (1 if rng.random() < 0.5 else -1)) % T
        weights = float(rng.random())
        partners = (int(partner),)
    elif scheme == "skip":
        if T < 3:
            raise ValueError(f"skip fusion needs at least 3 frames, volume has T={T}")
        def ok(f):
            # prefer partners that are not cyclic neighbours once T allows it
            return abs(f - anchor) >= 2 and (T < 4 or cyclic_distance(f, anchor, T) >= 2)
        choices = [f for f in range(T) if ok(f)]
        while not choices:
            anchor = int(rng.integers(T))
            choices = [f for f in range(T) if ok(f)]
        partners = (int(choices[rng.integers(len(choices))]),)
        weights = float(rng.random())
    elif scheme == "grouped":
        G = min(group_size, T)
        if G < 2:
            raise ValueError("grouped fusion needs at least 2 frames")
        others = [f for f in range(T) if f != anchor]
        partners = tuple(int(f) for f in rng.choice(others, size=G - 1, replace=False))
        w = rng.dirichlet(np.ones(G))
        w[-1] = max(0.0, 1.0 - w[:-1].sum())
        weights = tuple(float(x) for x in w / w.sum())
    else:
        raise ValueError(f"unknown fusion scheme {scheme!r}")
    fw = None if freq_weighting is None else tuple(float(x) for x in freq_weighting)
    return FusionSpec(scheme, anchor, partners, weights, fw)


def _check_mix(scheme_mix: Sequence[float], n_frames: int) -> np.ndarray:
    mix = np.asarray(scheme_mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"scheme_mix must be 3 non-negative probabilities summing to 1, got {scheme_mix}")
    if n_frames < 3 and mix[1] > 0:
        raise ValueError(f"skip fusion needs T >= 3 (corpus has T={n_frames}); set its probability to 0")
    return mix


def sample_guidance(corpus, n: int, scheme_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
                    seed: int = 0, group_size: int = 3, freq_weighting=None) -> list[FusedSignal]:
    """Draw ``n`` fused guidance frames from the training volumes of ``corpus``.

    Each output uses its own RNG stream derived from ``(seed, i)``.
    """
    volumes = _train_volumes(corpus)
    if n == 0:
        return []
    T = volumes[0].data.shape[2]
    mix = _check_mix(scheme_mix, T)
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        v = int(rng.integers(len(volumes)))
        scheme = SCHEMES[int(rng.choice(3, p=mix))]
        spec = draw_fusion_spec(rng, T, scheme, group_size, freq_weighting)
        out.append(fuse(volumes[v], spec, volume_index=v))
    return out


def sample_fused_volumes(corpus, n: int, scheme_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
                         seed: int = 0, group_size: int = 3,
                         freq_weighting=None) -> list[tuple[int, FusionSpec, np.ndarray]]:
    """Like :func:`sample_guidance` but fuses whole volumes with :func:`fuse_volume`.

    Returns ``(volume_index, spec, kspace)`` triples.
    """
    volumes = _train_volumes(corpus)
    if n == 0:
        return []
    T = volumes[0].data.shape[2]
    mix = _check_mix(scheme_mix, T)
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        v = int(rng.integers(len(volumes)))
        scheme = SCHEMES[int(rng.choice(3, p=mix))]
        spec = draw_fusion_spec(rng, T, scheme, group_size, freq_weighting)
        out.append((v, spec, fuse_volume(volumes[v], spec)))
    return out


def _train_volumes(corpus) -> list:
    if hasattr(corpus, "train"):
        vols = corpus.train()
    else:
        vols = list(corpus)
    if not vols:
        raise ValueError("corpus has no training volumes")
    return [v if isinstance(v, CineVolume) else CineVolume(v) for v in vols]
