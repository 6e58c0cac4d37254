"""Complex cine volumes, the 2D DFT and amplitude/phase splitting.

Conventions
-----------
* The forward transform is unnormalized; the inverse carries ``1/(H*W)``.
* Spectra are uncentered (DC at index ``(0, 0)``) unless ``centered`` is set,
  in which case DC sits at ``(H//2, W//2)``.
* Transforms act on the first two axes, so a ``(H, W, T)`` stack of frames
  is transformed frame by frame.
* Phase is the four-quadrant angle in ``(-pi, pi]`` and is 0 wherever the
  amplitude is 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CineVolume",
    "Spectrum",
    "AmplitudePhase",
    "check_finite",
    "dft2",
    "idft2",
    "decompose",
    "recompose",
    "fftshift",
    "ifftshift",
    "volume_kspace",
    "kspace_to_images",
]


def check_finite(arr: np.ndarray, name: str = "input") -> None:
    """Raise ``ValueError`` naming the first non-finite index of ``arr``."""
    arr = np.asarray(arr)
    if np.all(np.isfinite(arr)):
        return
    first = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
    raise ValueError(f"{name} contains a non-finite value at index {first}")


@dataclass
class CineVolume:
    """Complex image-domain 2D-t volume laid out as ``(H, W, T)``.

    ``pixel_spacing`` (mm) and ``frame_interval`` (ms) are carried along as
    metadata only.
    """

    data: np.ndarray
    pixel_spacing: float = 1.0
    frame_interval: float = 40.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"CineVolume needs (H, W, T) data, got shape {data.shape}")
        H, W, T = data.shape
        if H < 2 or W < 2 or T < 1:
            raise ValueError(f"CineVolume needs H, W >= 2 and T >= 1, got {data.shape}")
        if H % 2 or W % 2:
            raise ValueError(f"CineVolume grid must be even, got {H}x{W}")
        check_finite(data, "CineVolume data")
        self.data = data.astype(np.complex128, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def frame(self, t: int) -> np.ndarray:
        return self.data[:, :, t]


@dataclass
class Spectrum:
    """Frequency samples ``k(u, v)`` on the grid of the source frame(s)."""

    data: np.ndarray
    centered: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        check_finite(self.data, "Spectrum data")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class AmplitudePhase:
    """Amplitude ``>= 0`` and phase in ``(-pi, pi]`` of a spectrum."""

    amplitude: np.ndarray
    phase: np.ndarray
    centered: bool = False

    def __post_init__(self):
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.amplitude.shape != self.phase.shape:
            raise ValueError(
                f"amplitude shape {self.amplitude.shape} != phase shape {self.phase.shape}"
            )


def _as_frames(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError(f"expected at least a 2-D frame, got shape {x.shape}")
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"frame must be at least 2x2, got {x.shape[:2]}")
    return x.astype(np.complex128, copy=False)


def dft2(frame) -> Spectrum:
    """Unnormalized forward 2D DFT over the first two axes.

    ``k(u, v) = sum_h sum_w x(h, w) exp(-2j*pi*(h*u/H + w*v/W))``.
    The result is uncentered; use :func:`fftshift` to move DC to the middle.
    """
    x = _as_frames(frame)
    check_finite(x, "frame")
    return Spectrum(np.fft.fft2(x, axes=(0, 1)), centered=False)


def idft2(spec: Spectrum) -> np.ndarray:
    """Inverse of :func:`dft2` (carries the ``1/(H*W)`` factor)."""
    if not isinstance(spec, Spectrum):
        spec = Spectrum(spec)
    if spec.centered:
        raise ValueError("idft2 expects an uncentered spectrum; apply ifftshift first")
    _as_frames(spec.data)
    return np.fft.ifft2(spec.data, axes=(0, 1))


def decompose(spec: Spectrum) -> AmplitudePhase:
    """Split a spectrum into amplitude and four-quadrant phase."""
    if not isinstance(spec, Spectrum):
        spec = Spectrum(spec)
    k = spec.data
    amplitude = np.abs(k)
    phase = np.angle(k)
    # angle(-1 - 0j) is -pi; fold onto the half-open interval (-pi, pi]
    phase = np.where(phase <= -np.pi, np.pi, phase)
    phase = np.where(amplitude == 0, 0.0, phase)
    return AmplitudePhase(amplitude, phase, centered=spec.centered)


def recompose(ap: AmplitudePhase) -> Spectrum:
    """Rebuild ``k = amplitude * exp(i * phase)``; zero amplitude gives exactly 0."""
    amp, ph = ap.amplitude, ap.phase
    check_finite(amp, "amplitude")
    check_finite(ph, "phase")
    if np.any(amp < 0):
        first = tuple(int(i) for i in np.argwhere(amp < 0)[0])
        raise ValueError(f"amplitude must be non-negative; negative value at index {first}")
    k = amp * np.exp(1j * ph)
    k = np.where(amp == 0, 0.0 + 0.0j, k)
    return Spectrum(k, centered=ap.centered)


def _check_even(data: np.ndarray) -> None:
    H, W = data.shape[:2]
    if H % 2 or W % 2:
        raise ValueError(f"fftshift needs an even grid, got {H}x{W}")


def fftshift(spec: Spectrum) -> Spectrum:
    """Move DC from ``(0, 0)`` to ``(H/2, W/2)``; toggles ``centered``."""
    if not isinstance(spec, Spectrum):
        spec = Spectrum(spec)
    _check_even(spec.data)
    return Spectrum(np.fft.fftshift(spec.data, axes=(0, 1)), centered=not spec.centered)


def ifftshift(spec: Spectrum) -> Spectrum:
    """Inverse of :func:`fftshift`; toggles ``centered``."""
    if not isinstance(spec, Spectrum):
        spec = Spectrum(spec)
    _check_even(spec.data)
    return Spectrum(np.fft.ifftshift(spec.data, axes=(0, 1)), centered=not spec.centered)


def volume_kspace(volume: CineVolume | np.ndarray) -> np.ndarray:
    """Uncentered k-space of every frame, shape ``(H, W, T)``."""
    data = volume.data if isinstance(volume, CineVolume) else volume
    return dft2(data).data


def kspace_to_images(kspace: np.ndarray) -> np.ndarray:
    """Complex images from an uncentered ``(H, W, ...)`` k-space stack."""
    return idft2(Spectrum(kspace))
