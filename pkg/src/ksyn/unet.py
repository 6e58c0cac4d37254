"""Two-scale conditional U-Net for noise prediction on latent tensors.

The condition is concatenated to the features at every scale (subsampled
to the coarse grid), and a timestep embedding is added inside every
residual block.  Backward passes are wired by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (Conv2d, GroupNorm, Linear, Module, SiLU, Upsample2x, concat, split,
                 timestep_embedding)

__all__ = ["UNetConfig", "UNet", "ResBlock"]


@dataclass(frozen=True)
class UNetConfig:
    widths: tuple[int, int] = (32, 64)
    emb_dim: int = 64
    groups: int = 8


class ResBlock(Module):
    """``x + conv(act(gn(conv(act(gn(x))) + proj(emb))))``."""

    def __init__(self, ch: int, emb_dim: int, groups: int, rng, dtype):
        self.gn1 = GroupNorm(groups, ch, dtype=dtype)
        self.act1 = SiLU()
        self.conv1 = Conv2d(ch, ch, 3, 1, rng=rng, dtype=dtype)
        self.act_e = SiLU()
        self.proj = Linear(emb_dim, ch, rng=rng, dtype=dtype)
        self.gn2 = GroupNorm(groups, ch, dtype=dtype)
        self.act2 = SiLU()
        self.conv2 = Conv2d(ch, ch, 3, 1, rng=rng, dtype=dtype, scale=0.1)

    def forward(self, x: np.ndarray, e: np.ndarray) -> np.ndarray:
        h = self.conv1.forward(self.act1.forward(self.gn1.forward(x)))
        h = h + self.proj.forward(self.act_e.forward(e))[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(self.gn2.forward(h)))
        return x + h

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dh = self.gn2.backward(self.act2.backward(self.conv2.backward(dy)))
        de = self.act_e.backward(self.proj.backward(dh.sum(axis=(2, 3))))
        dx = self.gn1.backward(self.act1.backward(self.conv1.backward(dh)))
        return dy + dx, de


class UNet(Module):
    """Conditional U-Net ``F(z_t, t, c)`` for ``(N, C, h, w)`` latents (h, w even).

    Wrapped by :class:`ksyn.diffusion.NoisePredictor` to form ``eps_theta``.
    """

    def __init__(self, config: UNetConfig = UNetConfig(), in_channels: int = 32, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.in_channels = in_channels
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E7]))
        w0, w1 = config.widths
        e, g, C = config.emb_dim, config.groups, in_channels
        self.t_lin1 = Linear(e, 2 * e, rng=rng, dtype=dtype)
        self.t_act = SiLU()
        self.t_lin2 = Linear(2 * e, 2 * e, rng=rng, dtype=dtype)
        self.inp = Conv2d(2 * C, w0, 3, 1, rng=rng, dtype=dtype)
        self.block0 = ResBlock(w0, 2 * e, g, rng, dtype)
        self.down = Conv2d(w0, w1, 3, 2, rng=rng, dtype=dtype)
        self.mid_in = Conv2d(w1 + C, w1, 3, 1, rng=rng, dtype=dtype)
        self.block1 = ResBlock(w1, 2 * e, g, rng, dtype)
        self.up = Upsample2x()
        self.up_in = Conv2d(w1 + w0 + C, w0, 3, 1, rng=rng, dtype=dtype)
        self.block2 = ResBlock(w0, 2 * e, g, rng, dtype)
        self.out_gn = GroupNorm(g, w0, dtype=dtype)
        self.out_act = SiLU()
        self.out = Conv2d(w0, C, 3, 1, rng=rng, dtype=dtype, scale=0.1)
        self.condition_injections = 0
        self._sizes = None

    def forward(self, z: np.ndarray, t, c: np.ndarray) -> np.ndarray:
        if z.shape != c.shape:
            raise ValueError(f"condition shape {c.shape} must equal latent shape {z.shape}")
        if z.ndim != 4 or z.shape[1] != self.in_channels:
            raise ValueError(f"UNet expects (N, {self.in_channels}, h, w), got {z.shape}")
        dt = self.dtype
        z = z.astype(dt, copy=False)
        c = c.astype(dt, copy=False)
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        emb = timestep_embedding(t, self.config.emb_dim, dtype=dt)
        e = self.t_lin2.forward(self.t_act.forward(self.t_lin1.forward(emb)))
        c_low = c[:, :, ::2, ::2]
        h0 = self.block0.forward(self.inp.forward(concat([z, c])), e)
        d = self.down.forward(h0)
        h1 = self.block1.forward(self.mid_in.forward(concat([d, c_low])), e)
        u = self.up.forward(h1)
        h2 = self.block2.forward(self.up_in.forward(concat([u, h0, c])), e)
        self.condition_injections += z.shape[0]
        self._sizes = (h1.shape[1], h0.shape[1], c.shape[1])
        return self.out.forward(self.out_act.forward(self.out_gn.forward(h2)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. ``z``.

        The condition is treated as a constant and gets no gradient.
        """
        w1, w0, C = self._sizes
        dh2 = self.out_gn.backward(self.out_act.backward(self.out.backward(dy)))
        d, de = self.block2.backward(dh2)
        du, dh0_skip, _ = split(self.up_in.backward(d), [w1, w0, C])
        dh1 = self.up.backward(du)
        dm, de1 = self.block1.backward(dh1)
        dd, _ = split(self.mid_in.backward(dm), [w1, C])
        dh0 = self.down.backward(dd) + dh0_skip
        d0, de0 = self.block0.backward(dh0)
        dz, _ = split(self.inp.backward(d0), [C, C])
        self.t_lin1.backward(self.t_act.backward(self.t_lin2.backward(de + de1 + de0)))
        return dz
