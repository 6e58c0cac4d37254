"""Two-sample distances between corpora and full-reference image metrics.

FD and KID are computed on features from :class:`FeatureEmbedder`, a
frozen, randomly initialized strided CNN.  Its numbers are NOT comparable
to Inception-based FID/KID values; only orderings between corpora scored
with the same embedder are meaningful.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist, pdist

from .kspace import CineVolume, dft2
from .nn import Conv2d

__all__ = [
    "EMBEDDER_SEED",
    "FeatureEmbedder",
    "MetricReport",
    "frechet_distance",
    "polynomial_kernel",
    "unbiased_mmd2",
    "kid_subsets",
    "kid",
    "mmd2",
    "median_bandwidth",
    "mse",
    "psnr",
    "ssim",
    "evaluate_corpora",
    "config_digest",
]

EMBEDDER_SEED = 0x4B53594E  # "KSYN"
PSNR_CAP = 99.0


class FeatureEmbedder:
    """Fixed random 4-layer strided CNN mapping a frame to a 64-d feature vector.

    ``domain='kspace'`` feeds ``log(1 + |k|)`` of the centered spectrum;
    ``domain='image'`` feeds the magnitude image.  Weights depend only on
    ``seed`` and are never trained.
    """

    def __init__(self, domain: str = "kspace", seed: int = EMBEDDER_SEED, dim: int = 64):
        if domain not in ("kspace", "image"):
            raise ValueError(f"domain must be 'kspace' or 'image', got {domain!r}")
        self.domain = domain
        rng = np.random.default_rng(seed)
        chans = [1, 16, 32, 64, dim]
        self.layers = [Conv2d(ci, co, 3, 2, rng=rng, dtype=np.float64)
                       for ci, co in zip(chans[:-1], chans[1:])]
        for layer in self.layers:
            layer.bias.data[...] = rng.normal(0.0, 0.1, layer.bias.data.shape)

    def frames(self, kspace: np.ndarray) -> np.ndarray:
        """``(H, W, T)`` uncentered k-space -> ``(T, 1, H, W)`` embedder inputs."""
        if self.domain == "kspace":
            x = np.log1p(np.abs(np.fft.fftshift(kspace, axes=(0, 1))))
        else:
            x = np.abs(np.fft.ifft2(kspace, axes=(0, 1)))
        return x.transpose(2, 0, 1)[:, None]

    def __call__(self, kspace_volumes: Sequence[np.ndarray]) -> np.ndarray:
        feats = []
        for k in kspace_volumes:
            h = self.frames(np.asarray(k))
            for layer in self.layers:
                h = np.tanh(layer.forward(h))
            feats.append(h.mean(axis=(2, 3)))
        return np.concatenate(feats, axis=0)


@dataclass
class MetricReport:
    metric: str
    value: float
    stderr: Optional[float]
    n_real: int
    n_synth: int
    config_digest: str
    notes: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.metric, f"{self.value:.10g}",
                "" if self.stderr is None else f"{self.stderr:.10g}",
                self.n_real, self.n_synth, self.config_digest]


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_pair(x, y, min_n: int = 2) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < min_n or y.shape[0] < min_n:
        raise ValueError(f"need at least {min_n} samples per side, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    return x, y


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(real, synth, return_info: bool = False):
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the matrix square root is taken from the eigenvalues of
    the symmetric product ``S1^(1/2) S2 S1^(1/2)`` with negative eigenvalues
    clipped to 0.  Rank-deficient covariances get ``1e-6 * I`` added to
    both sides; ``return_info`` exposes that flag.
    """
    x, y = _check_pair(real, synth)
    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.atleast_2d(np.cov(x, rowvar=False))
    s2 = np.atleast_2d(np.cov(y, rowvar=False))
    regularized = False
    d = s1.shape[0]
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= 1e-12 * max(np.trace(s1), np.trace(s2), 1e-300):
        s1 = s1 + 1e-6 * np.eye(d)
        s2 = s2 + 1e-6 * np.eye(d)
        regularized = True
    r1 = _psd_sqrt(s1)
    prod = r1 @ s2 @ r1
    ev = np.linalg.eigvalsh((prod + prod.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(ev, 0, None))))
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    fd = max(fd, 0.0)
    if return_info:
        return fd, {"regularized": regularized}
    return fd


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``k(x, y) = (x.y / d + 1)^3``."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def unbiased_mmd2(kxx: np.ndarray, kyy: np.ndarray, kxy: np.ndarray) -> float:
    m, n = kxx.shape[0], kyy.shape[0]
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid_subsets(n_real: int, n_synth: int, subset_size: int, n_subsets: int,
                seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index pairs drawn without replacement, one pair per subset."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61D]))
    return [(rng.choice(n_real, subset_size, replace=False),
             rng.choice(n_synth, subset_size, replace=False)) for _ in range(n_subsets)]


def kid(real, synth, subset_size: int = 50, n_subsets: int = 100, seed: int = 0,
        subsets: Optional[list] = None) -> tuple[float, float]:
    """Mean and standard error of unbiased MMD^2 (cubic kernel) over random subsets."""
    x, y = _check_pair(real, synth)
    if subset_size < 2:
        raise ValueError("KID subset size must be >= 2")
    if subset_size > min(len(x), len(y)):
        raise ValueError(f"subset size {subset_size} exceeds the smaller side ({min(len(x), len(y))})")
    if subsets is None:
        subsets = kid_subsets(len(x), len(y), subset_size, n_subsets, seed)
    vals = []
    for ix, iy in subsets:
        a, b = x[ix], y[iy]
        vals.append(unbiased_mmd2(polynomial_kernel(a, a), polynomial_kernel(b, b),
                                  polynomial_kernel(a, b)))
    vals = np.asarray(vals)
    stderr = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), stderr


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Median pairwise distance over the pooled set; ``(1.0, True)`` if it is 0."""
    med = float(np.median(pdist(np.concatenate([x, y]))))
    if med <= 0:
        return 1.0, True
    return med, False


def mmd2(real, synth, bandwidth: Optional[float] = None, return_info: bool = False):
    """Unbiased MMD^2 with ``exp(-|x - y|^2 / (2 h^2))``, ``h`` by the median heuristic."""
    x, y = _check_pair(real, synth)
    fallback = False
    if bandwidth is None:
        bandwidth, fallback = median_bandwidth(x, y)
    g = 1.0 / (2.0 * bandwidth ** 2)
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(x, y, "sqeuclidean"))
    val = unbiased_mmd2(kxx, kyy, kxy)
    if return_info:
        return val, {"bandwidth": bandwidth, "bandwidth_fallback": fallback}
    return val


def _check_images(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    return ref, test


def mse(ref, test) -> float:
    ref, test = _check_images(ref, test)
    return float(np.mean((ref - test) ** 2))


def psnr(ref, test, data_range: float) -> float:
    """``10 log10(range^2 / MSE)``, reported as 99 dB when MSE is 0."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(ref, test)
    if err == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / err)))


def ssim(ref, test, data_range: float, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Mean SSIM over 2-D frames with an 11x11 Gaussian window (borders excluded).

    A trailing frame axis, if present, is averaged over.
    """
    ref, test = _check_images(ref, test)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if ref.ndim == 3:
        return float(np.mean([ssim(ref[..., i], test[..., i], data_range, sigma, k1, k2)
                              for i in range(ref.shape[2])]))
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    trunc = 5.0 / sigma  # radius 5 -> 11x11 window

    def f(a):
        return gaussian_filter(a, sigma, truncate=trunc, mode="reflect")

    mx, my = f(ref), f(test)
    vx = f(ref * ref) - mx * mx
    vy = f(test * test) - my * my
    cxy = f(ref * test) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = 5
    if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
        s = s[pad:-pad, pad:-pad]
    return float(s.mean())


def _as_kspace(v) -> np.ndarray:
    if isinstance(v, CineVolume):
        return dft2(v.data).data
    data = getattr(v, "data", v)
    return np.asarray(data, dtype=np.complex128)


def evaluate_corpora(real: Sequence, synth: Sequence, config: Optional[dict] = None) -> list[MetricReport]:
    """FD, KID and MMD^2 between two corpora of k-space (or cine) volumes.

    ``config`` keys: ``domain`` ('kspace' | 'image'), ``kid_subset_size``,
    ``kid_subsets``, ``seed``.  Every frame of every volume is one sample.
    """
    cfg = {"domain": "kspace", "kid_subset_size": 50, "kid_subsets": 100, "seed": 0}
    cfg.update(config or {})
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("evaluate_corpora needs non-empty real and synthetic corpora")
    digest = config_digest(cfg)
    emb = FeatureEmbedder(cfg["domain"])
    fr = emb([_as_kspace(v) for v in real])
    fs = emb([_as_kspace(v) for v in synth])
    nr, ns = len(fr), len(fs)
    fd, info = frechet_distance(fr, fs, return_info=True)
    size = min(int(cfg["kid_subset_size"]), nr, ns)
    k_mean, k_err = kid(fr, fs, size, int(cfg["kid_subsets"]), seed=int(cfg["seed"]))
    m, minfo = mmd2(fr, fs, return_info=True)
    return [
        MetricReport("FD", fd, None, nr, ns, digest, info),
        MetricReport("KID", k_mean, k_err, nr, ns, digest, {"subset_size": size}),
        MetricReport("MMD2", m, None, nr, ns, digest, minfo),
    ]
