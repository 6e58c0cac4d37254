"""Radial undersampling masks and the zero-filled reconstruction baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kspace import Spectrum, idft2
from .metrics import mse, psnr, ssim

__all__ = ["SamplingMask", "GOLDEN_ANGLE", "radial_mask", "apply_mask", "zero_filled_recon",
           "ZeroFilledResult"]

GOLDEN_ANGLE = np.pi * (np.sqrt(5.0) - 1.0) / 2.0  # ~111.25 degrees


@dataclass
class SamplingMask:
    """Binary mask in the centered convention (DC at ``(H/2, W/2)``)."""

    mask: np.ndarray
    R: float
    spoke_count: int
    seed: int

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def shape(self):
        return self.mask.shape


def _spokes(H: int, W: int, n: int, theta0: float) -> np.ndarray:
    cy, cx = H // 2, W // 2
    rmax = np.hypot(H, W) / 2
    r = np.arange(-rmax, rmax + 0.5, 0.5)
    mask = np.zeros((H, W), dtype=bool)
    for k in range(n):
        th = theta0 + k * GOLDEN_ANGLE
        y = np.rint(cy + r * np.sin(th)).astype(int)
        x = np.rint(cx + r * np.cos(th)).astype(int)
        ok = (y >= 0) & (y < H) & (x >= 0) & (x < W)
        mask[y[ok], x[ok]] = True
    return mask


def radial_mask(H: int, W: int, R: float, seed: int = 0) -> SamplingMask:
    """Golden-angle radial mask whose sampled fraction is close to ``1/R``.

    The spoke count is found by bisection on the rasterized fraction; the
    seed rotates the first spoke.  Raises if even one spoke samples more
    than ``1.2/R`` of the grid.
    """
    if R < 1:
        raise ValueError(f"acceleration R must be >= 1, got {R}")
    if R == 1:
        return SamplingMask(np.ones((H, W), dtype=bool), 1.0, 0, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D]))
    theta0 = float(rng.uniform(0, np.pi))
    target = 1.0 / R

    def frac(n):
        return _spokes(H, W, n, theta0).mean()

    if frac(1) > 1.2 * target:
        raise ValueError(f"R={R} is not reachable: a single spoke already samples {frac(1):.4f} of the grid")
    lo, hi = 1, 2
    while frac(hi) < target:
        lo, hi = hi, hi * 2
        if hi > 16 * (H + W):
            break
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    n = hi if abs(frac(hi) - target) <= abs(frac(lo) - target) else lo
    mask = _spokes(H, W, n, theta0)
    got = mask.mean()
    if not 0.8 * target <= got <= 1.2 * target:
        raise ValueError(f"could not reach fraction 1/R={target:.4f} (best {got:.4f} with {n} spokes)")
    return SamplingMask(mask, float(R), int(n), seed)


def _mask_array(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, SamplingMask) else np.asarray(mask, dtype=bool)


def apply_mask(spec: Spectrum, mask) -> Spectrum:
    """Zero every unsampled bin; works on centered or uncentered spectra."""
    m = _mask_array(mask)
    data = spec.data
    if data.shape[:2] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match spectrum grid {data.shape[:2]}")
    if not spec.centered:
        m = np.fft.ifftshift(m)
    if data.ndim > 2:
        m = m.reshape(m.shape + (1,) * (data.ndim - 2))
    return Spectrum(np.where(m, data, 0.0 + 0.0j), centered=spec.centered)


@dataclass
class ZeroFilledResult:
    magnitude: np.ndarray
    error_map: Optional[np.ndarray] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    mse: Optional[float] = None


def zero_filled_recon(undersampled: Spectrum, reference: Optional[np.ndarray] = None,
                      data_range: Optional[float] = None) -> ZeroFilledResult:
    """Magnitude of the inverse transform of a zero-filled spectrum.

    With a fully sampled ``reference`` (complex or magnitude image) the
    error map ``|recon - |ref||`` and PSNR/SSIM/MSE are filled in.
    """
    spec = undersampled
    if spec.centered:
        spec = Spectrum(np.fft.ifftshift(spec.data, axes=(0, 1)), centered=False)
    mag = np.abs(idft2(spec))
    res = ZeroFilledResult(mag)
    if reference is not None:
        ref = np.abs(np.asarray(reference))
        if ref.shape != mag.shape:
            raise ValueError(f"reference shape {ref.shape} does not match reconstruction {mag.shape}")
        rng = data_range if data_range is not None else float(ref.max()) or 1.0
        res.error_map = np.abs(mag - ref)
        res.mse = mse(ref, mag)
        res.psnr = psnr(ref, mag, rng)
        res.ssim = ssim(ref, mag, rng)
    return res
