"""Frequency-domain compression model: k-space volume <-> latent tensor.

The encoder works frame by frame on a two-channel (real, imaginary) view of
normalized k-space, downsamples 8x with three stride-2 convolution stages,
optionally snaps features to a learned codebook, and mixes neighbouring
frames with a shallow temporal module to form the latent ``z`` of shape
``(C_z, H/8, W/8, T)``.  The decoder mirrors it with transposed
convolutions.

Internally batches of latents are kept as ``(B, T, C_z, h, w)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kspace import CineVolume, check_finite, dft2
from .nn import Adam, EMA, Conv2d, ConvTranspose2d, GroupNorm, Module, Parameter, SiLU

logger = logging.getLogger(__name__)

__all__ = [
    "CodecConfig",
    "NormRecord",
    "KSpaceVolume",
    "normalize_kspace",
    "denormalize_kspace",
    "signed_log",
    "signed_exp",
    "VectorQuantizer",
    "Codec",
    "encode",
    "decode",
    "train_codec",
    "TrainResult",
]


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 4
    code_dim: int = 8
    codebook_size: int = 256
    quantize: bool = True
    width: int = 32
    temporal_width: int = 32
    commitment: float = 0.25
    codebook_weight: float = 1.0
    centered: bool = True
    # training
    iterations: int = 2000
    lr: float = 1e-3
    batch_volumes: int = 4
    patch: tuple[int, int, int] = (64, 64, 3)
    ema_decay: float = 0.999
    seed: int = 0


# full-scale operating point; too short to train from scratch at desk scale
PAPER_CODEC = CodecConfig(iterations=350, lr=4.5e-6, patch=(64, 64, 3))


@dataclass(frozen=True)
class NormRecord:
    """Scale ``lam`` of the signed-log map for one volume."""

    lam: float


@dataclass
class KSpaceVolume:
    """Uncentered complex k-space ``(H, W, T)`` with its normalization record."""

    data: np.ndarray
    record: Optional[NormRecord] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 3:
            raise ValueError(f"KSpaceVolume needs (H, W, T) data, got {self.data.shape}")

    @classmethod
    def from_cine(cls, volume: CineVolume | np.ndarray) -> "KSpaceVolume":
        data = volume.data if isinstance(volume, CineVolume) else np.asarray(volume)
        return cls(dft2(data).data)

    def to_images(self) -> np.ndarray:
        return np.fft.ifft2(self.data, axes=(0, 1))


def signed_log(x: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x) / lam)


def signed_exp(s: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(s) * lam * np.expm1(np.abs(s))


def normalize_kspace(vol: KSpaceVolume | np.ndarray) -> tuple[np.ndarray, NormRecord]:
    """Map complex k-space to a real ``(2, H, W, T)`` array with the signed-log map.

    ``s(x) = sign(x) * log(1 + |x| / lam)`` is applied to the real and
    imaginary parts; ``lam`` is the median absolute value of all real and
    imaginary components.
    """
    data = vol.data if isinstance(vol, KSpaceVolume) else np.asarray(vol, dtype=np.complex128)
    check_finite(data, "k-space volume")
    parts = np.stack([data.real, data.imag])
    lam = float(np.median(np.abs(parts)))
    if not lam > 0:
        nz = np.abs(parts)[np.abs(parts) > 0]
        if nz.size == 0:
            raise ValueError("cannot normalize an all-zero k-space volume")
        lam = float(np.median(nz))
    return signed_log(parts, lam), NormRecord(lam)


def denormalize_kspace(norm: np.ndarray, record: NormRecord) -> np.ndarray:
    """Inverse of :func:`normalize_kspace`; returns complex ``(H, W, T)``."""
    parts = signed_exp(np.asarray(norm, dtype=np.float64), record.lam)
    return parts[0] + 1j * parts[1]


class VectorQuantizer(Module):
    """Nearest-code quantization with straight-through gradients.

    ``forward`` returns the quantized features and adds the codebook and
    commitment losses to ``self.loss``; ``backward`` passes the incoming
    gradient straight to the encoder output plus the commitment gradient,
    and accumulates the codebook gradient.
    """

    def __init__(self, n_codes: int, dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, commitment: float = 0.25, codebook_weight: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_codes, self.dim = n_codes, dim
        self.commitment, self.codebook_weight = commitment, codebook_weight
        self.codebook = Parameter(rng.uniform(-1.0, 1.0, (n_codes, dim)).astype(dtype))
        self.usage = np.zeros(n_codes, dtype=np.int64)
        self.loss = 0.0
        self._cache = None

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        cb = self.codebook.data.astype(np.float64)
        f = flat.astype(np.float64)
        d = (f * f).sum(1, keepdims=True) - 2 * f @ cb.T + (cb * cb).sum(1)[None, :]
        return np.argmin(d, axis=1)

    def forward(self, z: np.ndarray, track_usage: bool = True) -> np.ndarray:
        N, D, h, w = z.shape
        if D != self.dim:
            raise ValueError(f"VectorQuantizer: expected {self.dim} channels, got {D}")
        flat = z.transpose(0, 2, 3, 1).reshape(-1, D)
        idx = self.nearest(flat)
        q = self.codebook.data[idx]
        if track_usage:
            self.usage += np.bincount(idx, minlength=self.n_codes)
        diff = flat.astype(np.float64) - q
        mse = float(np.mean(diff * diff))
        self.loss = (self.codebook_weight + self.commitment) * mse
        self._cache = (flat, q, idx, z.shape)
        self.indices = idx.reshape(N, h, w)
        return q.reshape(N, h, w, D).transpose(0, 3, 1, 2).astype(z.dtype)

    def backward(self, dy: np.ndarray, loss_scale: float = 1.0) -> np.ndarray:
        flat, q, idx, (N, D, h, w) = self._cache
        n = flat.size
        diff = (flat - q).astype(flat.dtype)
        # codebook term pulls codes toward encoder outputs
        gcode = -2.0 * self.codebook_weight * loss_scale * diff / n
        np.add.at(self.codebook.grad, idx, gcode)
        dflat = dy.transpose(0, 2, 3, 1).reshape(-1, D) + 2.0 * self.commitment * loss_scale * diff / n
        return dflat.reshape(N, h, w, D).transpose(0, 3, 1, 2)


class TemporalConv(Module):
    """3x3 convolution over ``[f(t-1), f(t), f(t+1)]`` stacked as channels (zero padded in t)."""

    def __init__(self, in_ch: int, out_ch: int, rng, dtype=np.float32):
        self.in_ch = in_ch
        self.conv = Conv2d(3 * in_ch, out_ch, 3, 1, rng=rng, dtype=dtype)
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        B, T, C, h, w = x.shape
        z = np.zeros_like(x[:, :1])
        prev = np.concatenate([z, x[:, :-1]], axis=1)
        nxt = np.concatenate([x[:, 1:], z], axis=1)
        stacked = np.concatenate([prev, x, nxt], axis=2).reshape(B * T, 3 * C, h, w)
        self._shape = (B, T)
        y = self.conv.forward(stacked)
        return y.reshape(B, T, *y.shape[1:])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, T = self._shape
        d = self.conv.backward(dy.reshape(B * T, *dy.shape[2:])).reshape(B, T, 3, self.in_ch, *dy.shape[3:])
        dx = d[:, :, 1].copy()
        dx[:, :-1] += d[:, 1:, 0]
        dx[:, 1:] += d[:, :-1, 2]
        return dx


class _Act5(Module):
    """SiLU applied to a ``(B, T, C, h, w)`` array."""

    def __init__(self):
        self.act = SiLU()

    def forward(self, x):
        return self.act.forward(x)

    def backward(self, dy):
        return self.act.backward(dy)


class Codec(Module):
    """Encoder ``E`` and decoder ``D`` sharing one configuration."""

    def __init__(self, config: CodecConfig = CodecConfig(), dtype=np.float32):
        self.config = config
        c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0xC0DEC]))
        w1, w2 = c.width, 2 * c.width
        groups = 8
        # frame encoder
        self.e_in = Conv2d(2, w1, 3, 1, rng=rng, dtype=dtype)
        self.e_in_act = SiLU()
        self.e_down = []
        chans = [(w1, w1), (w1, w2), (w2, w2)]
        for ci, co in chans:
            self.e_down.append([Conv2d(ci, co, 3, 2, rng=rng, dtype=dtype),
                                GroupNorm(groups, co, dtype=dtype), SiLU()])
        self.e_out = Conv2d(w2, c.code_dim, 3, 1, rng=rng, dtype=dtype)
        self.vq = VectorQuantizer(c.codebook_size, c.code_dim, rng=rng, dtype=dtype,
                                  commitment=c.commitment, codebook_weight=c.codebook_weight)
        # volume module
        self.v1 = TemporalConv(c.code_dim, c.temporal_width, rng, dtype)
        self.v1_act = _Act5()
        self.v2 = TemporalConv(c.temporal_width, c.latent_channels, rng, dtype)
        # decoder volume module
        self.u1 = TemporalConv(c.latent_channels, c.temporal_width, rng, dtype)
        self.u1_act = _Act5()
        self.u2 = TemporalConv(c.temporal_width, w2, rng, dtype)
        self.u2_act = _Act5()
        # frame decoder
        self.d_in = [Conv2d(w2, w2, 3, 1, rng=rng, dtype=dtype), GroupNorm(groups, w2, dtype=dtype), SiLU()]
        self.d_up = []
        for ci, co in [(w2, w2), (w2, w1), (w1, w1)]:
            self.d_up.append([ConvTranspose2d(ci, co, rng=rng, dtype=dtype),
                              Conv2d(co, co, 3, 1, rng=rng, dtype=dtype),
                              GroupNorm(groups, co, dtype=dtype), SiLU()])
        self.d_out = Conv2d(w1, 2, 3, 1, rng=rng, dtype=dtype, scale=0.1)

    # -- encoder ---------------------------------------------------------
    def encode_frames(self, x: np.ndarray) -> np.ndarray:
        """``(N, 2, H, W)`` normalized frames -> pre-quantization features ``(N, D, h, w)``."""
        h = self.e_in_act.forward(self.e_in.forward(x))
        for stage in self.e_down:
            for layer in stage:
                h = layer.forward(h)
        return self.e_out.forward(h)

    def encode_batch(self, x: np.ndarray, track_usage: bool = False) -> np.ndarray:
        """``(B, T, 2, H, W)`` -> latent ``(B, T, C_z, h, w)``."""
        B, T = x.shape[:2]
        if x.shape[3] % 8 or x.shape[4] % 8:
            raise ValueError(f"codec needs a grid divisible by 8, got {x.shape[3]}x{x.shape[4]}")
        f = self.encode_frames(x.reshape(B * T, *x.shape[2:]))
        self._pre_q = f
        if self.config.quantize:
            f = self.vq.forward(f, track_usage=track_usage)
        else:
            self.vq.loss = 0.0
        f = f.reshape(B, T, *f.shape[1:])
        return self.v2.forward(self.v1_act.forward(self.v1.forward(f)))

    def backward_encoder(self, dz: np.ndarray, loss_scale: float = 1.0) -> None:
        B, T = dz.shape[:2]
        d = self.v1.backward(self.v1_act.backward(self.v2.backward(dz)))
        d = d.reshape(B * T, *d.shape[2:])
        if self.config.quantize:
            d = self.vq.backward(d, loss_scale)
        d = self.e_out.backward(d)
        for stage in reversed(self.e_down):
            for layer in reversed(stage):
                d = layer.backward(d)
        self.e_in.backward(self.e_in_act.backward(d))

    # -- decoder ---------------------------------------------------------
    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        """Latent ``(B, T, C_z, h, w)`` -> normalized frames ``(B, T, 2, H, W)``."""
        B, T, C = z.shape[:3]
        if C != self.config.latent_channels:
            raise ValueError(f"decoder expects {self.config.latent_channels} latent channels, got {C}")
        z = z.astype(self.dtype, copy=False)
        h = self.u2_act.forward(self.u2.forward(self.u1_act.forward(self.u1.forward(z))))
        h = h.reshape(B * T, *h.shape[2:])
        for layer in self.d_in:
            h = layer.forward(h)
        for stage in self.d_up:
            for layer in stage:
                h = layer.forward(h)
        out = self.d_out.forward(h)
        return out.reshape(B, T, *out.shape[1:])

    def backward_decoder(self, dy: np.ndarray) -> np.ndarray:
        B, T = dy.shape[:2]
        d = self.d_out.backward(dy.reshape(B * T, *dy.shape[2:]))
        for stage in reversed(self.d_up):
            for layer in reversed(stage):
                d = layer.backward(d)
        for layer in reversed(self.d_in):
            d = layer.backward(d)
        d = d.reshape(B, T, *d.shape[1:])
        return self.u1.backward(self.u1_act.backward(self.u2.backward(self.u2_act.backward(d))))

    # -- layout helpers --------------------------------------------------
    def to_network(self, norm: np.ndarray) -> np.ndarray:
        """``(2, H, W, T)`` normalized volume -> ``(T, 2, H, W)`` network layout."""
        if self.config.centered:
            norm = np.fft.fftshift(norm, axes=(1, 2))
        return np.ascontiguousarray(norm.transpose(3, 0, 1, 2)).astype(self.dtype)

    def from_network(self, out: np.ndarray) -> np.ndarray:
        """``(T, 2, H, W)`` -> ``(2, H, W, T)`` uncentered normalized volume."""
        norm = out.transpose(1, 2, 3, 0).astype(np.float64)
        if self.config.centered:
            norm = np.fft.ifftshift(norm, axes=(1, 2))
        return norm


def _as_kspace_volume(vol) -> KSpaceVolume:
    if isinstance(vol, KSpaceVolume):
        return vol
    if isinstance(vol, CineVolume):
        return KSpaceVolume.from_cine(vol)
    return KSpaceVolume(vol)


def latent_to_spec_layout(z: np.ndarray) -> np.ndarray:
    """``(T, C_z, h, w)`` -> ``(C_z, h, w, T)``."""
    return np.ascontiguousarray(z.transpose(1, 2, 3, 0))


def latent_from_spec_layout(z: np.ndarray) -> np.ndarray:
    """``(C_z, h, w, T)`` -> ``(T, C_z, h, w)``."""
    return np.ascontiguousarray(np.asarray(z).transpose(3, 0, 1, 2))


def encode(vol, model: Codec) -> tuple[np.ndarray, NormRecord]:
    """Latent ``z`` of shape ``(C_z, H/8, W/8, T)`` plus the normalization record."""
    kv = _as_kspace_volume(vol)
    H, W, _ = kv.data.shape
    if H % 8 or W % 8:
        raise ValueError(f"codec needs a grid divisible by 8, got {H}x{W}")
    norm, rec = normalize_kspace(kv)
    x = model.to_network(norm)[None]
    z = model.encode_batch(x)[0]
    return latent_to_spec_layout(z), rec


def decode(z: np.ndarray, model: Codec, record: Optional[NormRecord]) -> KSpaceVolume:
    """Decode a ``(C_z, h, w, T)`` latent back to complex k-space."""
    z = np.asarray(z)
    c = model.config
    if z.ndim != 4 or z.shape[0] != c.latent_channels:
        raise ValueError(f"latent must have shape ({c.latent_channels}, h, w, T), got {z.shape}")
    out = model.decode_batch(latent_from_spec_layout(z)[None])[0]
    norm = model.from_network(out)
    rec = record if record is not None else NormRecord(1.0)
    return KSpaceVolume(denormalize_kspace(norm, rec), rec)


@dataclass
class TrainResult:
    model: Codec
    ema: EMA
    losses: list = field(default_factory=list)
    aborted: bool = False
    latent_mean: Optional[np.ndarray] = None
    latent_std: Optional[np.ndarray] = None
    optimizer: Optional[Adam] = None


def _normalized_corpus(volumes, model: Codec) -> tuple[list[np.ndarray], list[NormRecord]]:
    xs, recs = [], []
    for v in volumes:
        norm, rec = normalize_kspace(_as_kspace_volume(v))
        xs.append(model.to_network(norm))
        recs.append(rec)
    return xs, recs


def train_codec(volumes: Sequence, config: CodecConfig = CodecConfig(),
                dtype=np.float32, log_every: int = 0) -> TrainResult:
    """Fit the codec on random ``(x, y, t)`` patches of ``volumes``.

    Loss is the mean squared error on normalized two-channel k-space, plus
    codebook and commitment terms when quantization is on.  Training stops
    early and restores the last finite parameters if the loss goes
    non-finite.  On return the model holds the EMA weights (used for
    inference) and ``ema.shadow`` the raw optimizer weights.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("train_codec needs a non-empty corpus")
    model = Codec(config, dtype=dtype)
    xs, _ = _normalized_corpus(volumes, model)
    T, _, H, W = xs[0].shape
    ph, pw, pt = config.patch
    ph, pw, pt = min(ph, H), min(pw, W), min(pt, T)
    if ph % 8 or pw % 8:
        raise ValueError(f"patch size {config.patch} must be divisible by 8 spatially")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    ema = EMA(params, decay=config.ema_decay, warmup=True)
    result = TrainResult(model, ema)
    if config.quantize:
        _init_codebook(model, xs, rng)
    last_good = model.state_dict()
    for it in range(config.iterations):
        batch = []
        for _ in range(config.batch_volumes):
            x = xs[int(rng.integers(len(xs)))]
            t0 = int(rng.integers(T - pt + 1))
            y0 = int(rng.integers(H - ph + 1)) if H > ph else 0
            x0 = int(rng.integers(W - pw + 1)) if W > pw else 0
            batch.append(x[t0:t0 + pt, :, y0:y0 + ph, x0:x0 + pw])
        xb = np.stack(batch)
        model.zero_grad()
        z = model.encode_batch(xb, track_usage=True)
        y = model.decode_batch(z)
        diff = y - xb
        rec = float(np.mean(diff.astype(np.float64) ** 2))
        loss = rec + (model.vq.loss if config.quantize else 0.0)
        if not np.isfinite(loss):
            logger.warning("codec loss became non-finite at iteration %d; keeping last finite state", it)
            model.load_state_dict(last_good)
            result.aborted = True
            break
        result.losses.append(loss)
        dz = model.backward_decoder((2.0 / diff.size) * diff)
        model.backward_encoder(dz)
        if opt.step():
            ema.update()
            if it % 50 == 0:
                last_good = model.state_dict()
        if log_every and it % log_every == 0:
            logger.info("codec it %d loss %.5f", it, loss)
    if ema.step_count:
        ema.swap()
    result.optimizer = opt
    _latent_stats(result, xs)
    return result


def _init_codebook(model: Codec, xs: list[np.ndarray], rng: np.random.Generator) -> None:
    """Seed codebook entries with encoder outputs drawn from the corpus."""
    feats = np.concatenate([model.encode_frames(x).transpose(0, 2, 3, 1).reshape(-1, model.config.code_dim)
                            for x in xs[: min(len(xs), 8)]])
    pick = rng.choice(len(feats), size=model.config.codebook_size, replace=len(feats) < model.config.codebook_size)
    model.vq.codebook.data[...] = feats[pick]


def _latent_stats(result: TrainResult, xs: list[np.ndarray]) -> None:
    zs = np.concatenate([result.model.encode_batch(x[None]) for x in xs])  # (N, T, C, h, w)
    result.latent_mean = zs.mean(axis=(0, 1, 3, 4)).astype(np.float64)
    result.latent_std = zs.std(axis=(0, 1, 3, 4)).astype(np.float64) + 1e-8
