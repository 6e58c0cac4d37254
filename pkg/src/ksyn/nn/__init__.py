"""Small numpy neural-network substrate used by the codec and the denoiser."""
from .layers import (Parameter, Module, Conv2d, ConvTranspose2d, GroupNorm, SiLU, Linear,
                     Upsample2x, timestep_embedding, timestep_embedding_grad, concat, split)
from .optim import Adam, EMA

__all__ = [
    "Parameter", "Module", "Conv2d", "ConvTranspose2d", "GroupNorm", "SiLU", "Linear",
    "Upsample2x", "timestep_embedding", "timestep_embedding_grad", "concat", "split",
    "Adam", "EMA",
]
