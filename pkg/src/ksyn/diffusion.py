"""Latent DDPM: cosine schedule, forward noising, noise-prediction loss,
ancestral sampling with a condition injected at every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import EMA, Adam
from .nn.layers import Module
from .unet import UNet, UNetConfig

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "cosine_schedule",
    "q_sample",
    "diffusion_loss",
    "p_sample_step",
    "NoisePredictor",
    "SampleTrace",
    "sample_latents",
    "DiffusionConfig",
    "train_denoiser",
    "DenoiserTrainResult",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step factors indexed by ``t = 1..T`` (index 0 holds ``alpha_bar_0 = 1``)."""

    T: int
    alphas: np.ndarray       # (T+1,), alphas[0] unused (= 1)
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[0] = 1
    sigmas: np.ndarray       # (T+1,), sigmas[1] = 0

    def check_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t))
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise ValueError(f"timesteps must be integers, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t


def cosine_schedule(T: int, s: float = 0.008, min_alpha: float = 1e-5) -> NoiseSchedule:
    """Cosine schedule: ``alpha_bar(t) = f(t) / f(0)``, ``f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)``.

    Per-step ``alpha_t = alpha_bar_t / alpha_bar_{t-1}`` is clipped to
    ``>= min_alpha``; ``alpha_bar`` is then rebuilt as the running product so
    the two stay consistent.  ``sigma_t`` is the posterior standard
    deviation, with ``sigma_1 = 0``.
    """
    if T < 1:
        raise ValueError("schedule needs T >= 1")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1 + s)) * np.pi / 2) ** 2
    ab = f / f[0]
    alphas = np.ones(T + 1)
    alphas[1:] = np.clip(ab[1:] / ab[:-1], min_alpha, 1.0)
    # strictly inside (0, 1)
    alphas[1:] = np.minimum(alphas[1:], np.nextafter(1.0, 0.0))
    alpha_bars = np.cumprod(alphas)
    betas = 1.0 - alphas
    sigmas = np.zeros(T + 1)
    if T >= 2:
        var = betas[2:] * (1.0 - alpha_bars[1:-1]) / (1.0 - alpha_bars[2:])
        sigmas[2:] = np.sqrt(var)
    return NoiseSchedule(T, alphas, alpha_bars, sigmas)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps``.

    ``t`` is a scalar or one timestep per leading batch entry.
    """
    t = schedule.check_t(t)
    z0 = np.asarray(z0)
    ab = schedule.alpha_bars[t]
    if ab.size == 1:
        ab = ab[0]
    else:
        ab = _bcast(ab, z0.ndim)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(model, schedule: NoiseSchedule, z0: np.ndarray, c: np.ndarray, t,
                   eps: np.ndarray, p: int = 1, backward: bool = True) -> float:
    """Mean of ``|eps - eps_theta(z_t, t, c)|^p``; accumulates parameter gradients.

    ``model`` must provide ``forward(z, t, c)`` and ``backward(d_out)``.  With
    ``p=2`` this is the noise-prediction objective in its squared form; the
    desk preset uses ``p=1``.
    """
    if p not in (1, 2):
        raise ValueError("loss exponent p must be 1 or 2")
    t = schedule.check_t(t)
    if t.size == 1 and z0.shape[0] != 1:
        t = np.full(z0.shape[0], t[0])
    zt = q_sample(schedule, z0, t, eps)
    pred = model.forward(zt, t, c)
    diff = pred.astype(np.float64) - eps
    if p == 2:
        loss = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    else:
        loss = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / diff.size
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite diffusion loss at t={t.tolist()}, batch={z0.shape[0]}")
    if backward:
        model.backward(grad.astype(pred.dtype))
    return loss


def p_sample_step(model, schedule: NoiseSchedule, zt: np.ndarray, t: int, c: np.ndarray,
                  eta: Optional[np.ndarray] = None, eps_pred: Optional[np.ndarray] = None):
    """One reverse step ``z_t -> z_{t-1}``.

    ``z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * eta``
    with ``sigma_1 = 0``.  Returns ``(z_{t-1}, eps_hat)``.
    """
    if t == 0:
        raise ValueError("p_sample_step is undefined at t=0")
    schedule.check_t(t)
    if eps_pred is None:
        tt = np.full(zt.shape[0], t)
        eps_pred = model.forward(zt, tt, c).astype(np.float64)
    a = schedule.alphas[t]
    ab = schedule.alpha_bars[t]
    mean = (zt - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)
    sigma = schedule.sigmas[t]
    if sigma > 0 and eta is not None:
        mean = mean + sigma * eta
    return mean, eps_pred


class NoisePredictor(Module):
    """``eps_theta(z_t, t, c) = sqrt(1 - alpha_bar_t) * z_t + sqrt(alpha_bar_t) * F(z_t, t, c)``.

    ``F`` is the U-Net.  Near ``t = T`` the prediction is ``z_t`` up to a
    ``sqrt(alpha_bar_T)``-scaled correction, so the last reverse step, which
    divides by ``sqrt(alpha_T) >= sqrt(1e-5)``, does not amplify network
    error.  The optimal ``F`` is the velocity
    ``sqrt(alpha_bar) * eps - sqrt(1 - alpha_bar) * z_0``.  Loss and sampling
    only see ``eps_theta``.
    """

    def __init__(self, net: UNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self._scales = None

    @property
    def condition_injections(self) -> int:
        return self.net.condition_injections

    def _coeffs(self, t, n: int, ndim: int) -> tuple[np.ndarray, np.ndarray]:
        t = np.broadcast_to(self.schedule.check_t(t), (n,))
        ab = _bcast(self.schedule.alpha_bars[t], ndim)
        return np.sqrt(1.0 - ab), np.sqrt(ab)

    def forward(self, z: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        a, b = self._coeffs(t, z.shape[0], z.ndim)
        self._scales = (a, b)
        return a * np.asarray(z, np.float64) + b * self.net.forward(z, t, c).astype(np.float64)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        a, b = self._scales
        dz = self.net.backward((b * dy).astype(self.net.dtype))
        return (a * dy + dz).astype(dy.dtype)


@dataclass
class SampleTrace:
    """Per-step states, noise draws and predictions of one reverse chain."""

    seed: int
    z: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    eps_pred: list = field(default_factory=list)
    condition_injections: int = 0


def sample_latents(model, schedule: NoiseSchedule, c: np.ndarray, seeds: Sequence[int],
                   keep_trace: bool = False) -> tuple[np.ndarray, list[SampleTrace]]:
    """Run the reverse chain for each seed (batched, one RNG stream per sample).

    ``c`` has one condition per seed, shape ``(n, ...)`` matching the latent.
    Each sample's result depends only on its own seed and condition.
    """
    n = len(seeds)
    if c.shape[0] != n:
        raise ValueError(f"need one condition per seed: {c.shape[0]} conditions for {n} seeds")
    shape = c.shape[1:]
    rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 0x5A])) for s in seeds]
    z = np.stack([r.standard_normal(shape) for r in rngs])
    traces = [SampleTrace(int(s)) for s in seeds]
    if keep_trace:
        for i, tr in enumerate(traces):
            tr.z.append(z[i].copy())
    for t in range(schedule.T, 0, -1):
        eta = np.stack([r.standard_normal(shape) for r in rngs]) if t > 1 else None
        z, eps_pred = p_sample_step(model, schedule, z, t, c, eta)
        for i, tr in enumerate(traces):
            tr.condition_injections += 1
            if keep_trace:
                tr.z.append(z[i].copy())
                tr.eta.append(None if eta is None else eta[i].copy())
                tr.eps_pred.append(eps_pred[i].copy())
    return z, traces


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 200
    loss_p: int = 1
    iterations: int = 5000
    lr: float = 1e-3
    batch: int = 16
    ema_decay: float = 0.995
    cond_dropout: float = 0.1
    seed: int = 0
    unet: UNetConfig = UNetConfig()


# full-scale operating point (short, low learning rate); desk runs use the defaults above
PAPER_DIFFUSION = DiffusionConfig(T=1000, loss_p=1, iterations=200, lr=1.0e-6)


@dataclass
class DenoiserTrainResult:
    model: UNet
    ema: EMA
    schedule: NoiseSchedule
    losses: list = field(default_factory=list)
    aborted: bool = False
    optimizer: Optional[Adam] = None

    @property
    def predictor(self) -> NoisePredictor:
        """The noise predictor built on ``model``, as used by training and sampling."""
        return NoisePredictor(self.model, self.schedule)


def train_denoiser(z0: np.ndarray, conditions: Callable[[np.random.Generator, np.ndarray], np.ndarray],
                   config: DiffusionConfig = DiffusionConfig(), in_channels: Optional[int] = None,
                   dtype=np.float32) -> DenoiserTrainResult:
    """Standard DDPM loop on network-layout latents ``z0`` of shape ``(N, C, h, w)``.

    ``conditions(rng, idx)`` returns the condition batch for training
    samples ``idx``.  Each iteration draws a batch, a timestep per sample
    uniformly in ``[1, T]`` and fresh noise, then takes one Adam step and
    one EMA update.  With probability ``cond_dropout`` a sample's condition
    is zeroed, which trains the unconditional (strength 0) mode as well.
    On return the model holds the EMA weights.
    """
    z0 = np.asarray(z0)
    N, C = z0.shape[:2]
    ucfg = config.unet
    model = UNet(ucfg, in_channels=in_channels or C, seed=config.seed, dtype=dtype)
    schedule = cosine_schedule(config.T)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    ema = EMA(params, decay=config.ema_decay, warmup=True)
    res = DenoiserTrainResult(model, ema, schedule)
    predictor = res.predictor
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD1F]))
    last_good = model.state_dict()
    for it in range(config.iterations):
        idx = rng.integers(N, size=config.batch)
        zb = z0[idx]
        cb = conditions(rng, idx)
        if config.cond_dropout > 0:
            drop = rng.random(len(idx)) < config.cond_dropout
            cb = cb * (~drop)[:, None, None, None]
        t = rng.integers(1, config.T + 1, size=len(idx))
        eps = rng.standard_normal(zb.shape)
        model.zero_grad()
        try:
            loss = diffusion_loss(predictor, schedule, zb, cb, t, eps, p=config.loss_p)
        except FloatingPointError:
            logger.warning("diffusion loss non-finite at iteration %d; keeping last finite state", it)
            model.load_state_dict(last_good)
            res.aborted = True
            break
        res.losses.append(loss)
        if opt.step():
            ema.update()
            if it % 50 == 0:
                last_good = model.state_dict()
    if ema.step_count:
        ema.swap()
    res.optimizer = opt
    return res
