"""End-to-end recipes: corpus -> codec -> latent denoiser -> synthesis -> metrics.

Latent volumes ``(C_z, h, w, T)`` are flattened to ``(T * C_z, h, w)`` for
the denoiser and standardized per codec channel.  A training example is a
pair (target latent, guidance latent).  Without fusion augmentation the
pairs are the real training volumes guided by themselves; with it, fused
volumes (temporal amplitude mixing of the training volumes) join the
target set and supply the guidance at synthesis time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codec import (Codec, CodecConfig, NormRecord, TrainResult, denormalize_kspace, normalize_kspace,
                    train_codec)
from .config import ExperimentConfig
from .diffusion import DenoiserTrainResult, sample_latents, train_denoiser
from .fusion import sample_fused_volumes
from .kspace import CineVolume, volume_kspace
from .metrics import MetricReport, evaluate_corpora
from .phantom import PhantomCorpus, make_corpus, pca_select

logger = logging.getLogger(__name__)

__all__ = [
    "LatentCodec",
    "KSynModel",
    "build_codec",
    "train_model",
    "synthesize",
    "noise_volumes",
    "AblationResult",
    "ABLATION_VARIANTS",
    "ablation_corpus",
    "run_ablation",
    "split_halves",
]


@dataclass
class LatentCodec:
    """Trained codec plus the per-channel latent statistics used for standardization."""

    model: Codec
    mean: np.ndarray
    std: np.ndarray
    train: Optional[TrainResult] = None

    @classmethod
    def from_result(cls, res: TrainResult) -> "LatentCodec":
        return cls(res.model, np.asarray(res.latent_mean), np.asarray(res.latent_std), res)

    @property
    def config(self) -> CodecConfig:
        return self.model.config

    def encode(self, kspaces: Sequence[np.ndarray]) -> tuple[np.ndarray, list[NormRecord]]:
        """Uncentered k-space volumes -> standardized flat latents ``(N, T*C_z, h, w)``."""
        out, recs = [], []
        for k in kspaces:
            norm, rec = normalize_kspace(k)
            z = self.model.encode_batch(self.model.to_network(norm)[None])[0]  # (T, C, h, w)
            z = (z - self.mean[None, :, None, None]) / self.std[None, :, None, None]
            out.append(z.reshape(-1, *z.shape[2:]))
            recs.append(rec)
        return np.stack(out).astype(np.float64), recs

    def decode(self, flat: np.ndarray, records: Sequence[NormRecord], n_frames: int) -> list[np.ndarray]:
        """Inverse of :meth:`encode`; returns complex uncentered k-space volumes."""
        C = self.config.latent_channels
        out = []
        for f, rec in zip(flat, records):
            z = f.reshape(n_frames, C, *f.shape[1:])
            z = z * self.std[None, :, None, None] + self.mean[None, :, None, None]
            y = self.model.decode_batch(z[None])[0]
            out.append(denormalize_kspace(self.model.from_network(y), rec))
        return out


def _kspaces(volumes) -> list[np.ndarray]:
    return [volume_kspace(v) if isinstance(v, CineVolume) else np.asarray(v) for v in volumes]


def build_codec(volumes, config: ExperimentConfig, seed: Optional[int] = None) -> LatentCodec:
    """Train the compression stage on ``volumes`` (cine volumes or k-space)."""
    ccfg = config.codec_config(seed)
    res = train_codec(_kspaces(volumes), ccfg)
    return LatentCodec.from_result(res)


@dataclass
class KSynModel:
    """Codec + conditional latent denoiser, with the volumes guidance is drawn from."""

    codec: LatentCodec
    denoiser: DenoiserTrainResult
    train_volumes: list
    fusion: bool
    config: ExperimentConfig
    seed: int
    n_frames: int
    targets: int = 0

    def guidance(self, n: int, seed: int) -> list[np.ndarray]:
        """``n`` guidance k-space volumes: fused draws, or training volumes in turn."""
        if self.fusion:
            f = self.config["fusion"]
            fused = sample_fused_volumes(self.train_volumes, n, f["scheme_mix"], seed=seed,
                                         group_size=f["group_size"], freq_weighting=f["freq_weighting"])
            return [k for _, _, k in fused]
        ks = _kspaces(self.train_volumes)
        return [ks[i % len(ks)] for i in range(n)]


def train_model(train_volumes, config: ExperimentConfig, fusion: bool, seed: int,
                codec: Optional[LatentCodec] = None) -> KSynModel:
    """Second-stage training on a fixed codec (trained here if not given)."""
    vols = list(train_volumes)
    if codec is None:
        codec = build_codec(vols, config, seed)
    ks = _kspaces(vols)
    T = ks[0].shape[2]
    targets = list(ks)
    if fusion:
        f = config["fusion"]
        n_aug = f["augment_factor"] * len(vols)
        fused = sample_fused_volumes(vols, n_aug, f["scheme_mix"], seed=_stream(seed, 1),
                                     group_size=f["group_size"], freq_weighting=f["freq_weighting"])
        targets += [k for _, _, k in fused]
    z0, _ = codec.encode(targets)
    dcfg = config.diffusion_config(seed)
    den = train_denoiser(z0, lambda rng, idx: z0[idx], dcfg)
    return KSynModel(codec, den, vols, fusion, config, seed, T, len(targets))


def _stream(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def synthesize(model: KSynModel, n: int, seed: int, strength: Optional[float] = None,
               batch: int = 50) -> list[np.ndarray]:
    """Draw ``n`` synthetic k-space volumes ``(H, W, T)``.

    Guidance ``c`` is scaled by ``strength`` (0 = unconditional, 1 = full
    guidance) and injected at every reverse step.  Volume ``i`` depends only
    on ``(seed, i)``.
    """
    if n == 0:
        return []
    s = model.config["synthesis"]["strength"] if strength is None else strength
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"guidance strength must lie in [0, 1], got {s}")
    guide = model.guidance(n, seed=_stream(seed, 2))
    out = []
    for b0 in range(0, n, batch):
        g = guide[b0:b0 + batch]
        c, recs = model.codec.encode(g)
        seeds = [_stream(seed, 1000 + i) for i in range(b0, b0 + len(g))]
        z, _ = sample_latents(model.denoiser.predictor, model.denoiser.schedule, s * c, seeds)
        out += model.codec.decode(z, recs, model.n_frames)
    return out


def noise_volumes(n: int, like: Sequence, seed: int) -> list[np.ndarray]:
    """Complex Gaussian image-domain noise with the per-volume RMS of ``like``, as k-space."""
    ks = _kspaces(like)
    rms = float(np.sqrt(np.mean([np.mean(np.abs(np.fft.ifft2(k, axes=(0, 1))) ** 2) for k in ks])))
    shape = ks[0].shape
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 0x9E]))
        img = rms / np.sqrt(2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        out.append(np.fft.fft2(img, axes=(0, 1)))
    return out


def split_halves(volumes: Sequence, seed: int) -> tuple[list, list]:
    """Random disjoint halves of a corpus."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4A]))
    perm = rng.permutation(len(volumes))
    h = len(volumes) // 2
    return [volumes[i] for i in perm[:h]], [volumes[i] for i in perm[h:2 * h]]


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = ("Real-{m}", "K-Syn-{m}")


def ablation_corpus(config: ExperimentConfig, seed: int) -> tuple[PhantomCorpus, dict[int, list[int]]]:
    """Pool of ``max(sizes)`` training volumes + held-out volumes, and PCA subsets per size."""
    c = config["corpus"]
    sizes = sorted(c["ablation_sizes"])
    pool = sizes[-1]
    corpus = make_corpus(pool + c["n_heldout"], config.phantom_spec(), seed, train_size=pool)
    train_idx = corpus.indices("train")
    train_vols = [corpus.volumes[i] for i in train_idx]
    subsets = {}
    for m in sizes:
        sel = pca_select(train_vols, m)
        subsets[m] = [train_idx[i] for i in sel]
    return corpus, subsets


@dataclass
class AblationResult:
    """Per-variant, per-seed metric values plus the aggregated table."""

    per_seed: list = field(default_factory=list)   # dicts: variant, seed, FD, KID, KID_stderr, MMD2
    digest: str = ""

    def variants(self) -> list[str]:
        seen = []
        for r in self.per_seed:
            if r["variant"] not in seen:
                seen.append(r["variant"])
        return seen

    def table(self) -> list[list]:
        """Rows ``variant, FD, FD_stderr, KID, KID_stderr, MMD2, MMD2_stderr`` (seed mean, stderr of mean)."""
        rows = []
        for v in self.variants():
            recs = [r for r in self.per_seed if r["variant"] == v]
            row = [v]
            for m in ("FD", "KID", "MMD2"):
                vals = np.array([r[m] for r in recs])
                err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float(
                    recs[0].get(m + "_stderr") or 0.0)
                row += [float(vals.mean()), err]
            rows.append(row)
        return rows

    def kid_wins(self, m: int) -> tuple[int, int]:
        """Seeds where the augmented ``m``-volume variant has KID <= the un-augmented one."""
        real = {r["seed"]: r["KID"] for r in self.per_seed if r["variant"] == f"Real-{m}"}
        aug = {r["seed"]: r["KID"] for r in self.per_seed if r["variant"] == f"K-Syn-{m}"}
        seeds = sorted(set(real) & set(aug))
        return sum(aug[s] <= real[s] for s in seeds), len(seeds)


TABLE_HEADER = ("variant", "FD", "FD_stderr", "KID", "KID_stderr", "MMD2", "MMD2_stderr")
PER_SEED_HEADER = ("variant", "seed", "FD", "KID", "KID_stderr", "MMD2", "n_real", "n_synth", "config_digest")


def _metric_dict(reports: list[MetricReport]) -> dict:
    d = {r.metric: r.value for r in reports}
    d["KID_stderr"] = next(r.stderr for r in reports if r.metric == "KID")
    d["n_real"], d["n_synth"] = reports[0].n_real, reports[0].n_synth
    return d


def run_ablation(config: ExperimentConfig, seeds: Sequence[int], codec: Optional[LatentCodec] = None,
                 n_synth: Optional[int] = None, sizes: Optional[Sequence[int]] = None,
                 progress=None) -> AblationResult:
    """{sizes} x {no fusion, fusion} variants per seed, each scored against held-out phantoms.

    All variants of one seed share the corpus, the codec and the sampling
    seeds; only the training subset and the augmentation differ.  The codec
    is trained once on the full training pool of the first seed unless one
    is passed in.
    """
    res = AblationResult(digest=config.digest)
    sizes = sorted(sizes or config["corpus"]["ablation_sizes"])
    n_synth = n_synth or config["synthesis"]["n"]
    mcfg = config.metric_config()
    for seed in seeds:
        corpus, subsets = ablation_corpus(config, seed)
        heldout = _kspaces(corpus.heldout())
        if codec is None:
            codec = build_codec(corpus.train(), config, seed)
        for m in sizes:
            vols = [corpus.volumes[i] for i in subsets[m]]
            for fusion, name in ((False, f"Real-{m}"), (True, f"K-Syn-{m}")):
                model = train_model(vols, config, fusion, seed, codec=codec)
                synth = synthesize(model, n_synth, seed)
                reps = evaluate_corpora(heldout, synth, mcfg)
                rec = {"variant": name, "seed": int(seed), **_metric_dict(reps), "config_digest": config.digest}
                res.per_seed.append(rec)
                if progress:
                    progress(rec)
    return res
