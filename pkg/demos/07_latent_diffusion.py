"""Cosine schedule, forward noising and a short conditional denoiser fit on toy latents."""
import numpy as np

from ksyn.diffusion import DiffusionConfig, cosine_schedule, q_sample, sample_latents, train_denoiser
from ksyn.unet import UNetConfig

s = cosine_schedule(200)
print(f"alpha_bar at t=1, 100, 200: {s.alpha_bars[1]:.4f}, {s.alpha_bars[100]:.4f}, {s.alpha_bars[200]:.2e}")

rng = np.random.default_rng(0)
z0 = rng.standard_normal((64, 1))
zt = q_sample(s, np.repeat(z0, 1000, axis=1), 100, rng.standard_normal((64, 1000)))
print(f"q_sample at t=100: empirical var {zt.var(axis=1).mean():.4f}, expected {1 - s.alpha_bars[100]:.4f}")

latents = rng.standard_normal((16, 2, 4, 4)) * 0.5 + 1.0
cfg = DiffusionConfig(T=50, iterations=200, lr=3e-3, batch=8,
                      unet=UNetConfig(widths=(8, 16), emb_dim=8, groups=4))
res = train_denoiser(latents, lambda r, idx: latents[idx], cfg)
print(f"denoiser loss {np.mean(res.losses[:20]):.3f} -> {np.mean(res.losses[-20:]):.3f}")

z, traces = sample_latents(res.predictor, res.schedule, latents[:4], seeds=[1, 2, 3, 4])
print(f"sampled latents mean {z.mean():.3f} (targets {latents.mean():.3f}); "
      f"{traces[0].condition_injections} condition injections per chain")
