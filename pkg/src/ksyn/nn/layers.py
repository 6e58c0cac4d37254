"""Layers with explicit forward/backward passes over ``(N, C, H, W)`` arrays.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during
``backward``.  A layer instance may be applied once per forward pass;
networks that need a layer twice must hold two instances.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.special import expit

__all__ = [
    "Parameter",
    "Module",
    "Conv2d",
    "ConvTranspose2d",
    "GroupNorm",
    "SiLU",
    "Linear",
    "Upsample2x",
    "timestep_embedding",
    "timestep_embedding_grad",
    "concat",
    "split",
]


class Parameter:
    """A trainable array and its gradient buffer."""

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


class Module:
    """Minimal container that discovers parameters and sub-modules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].data.dtype if params else np.float32

    def astype(self, dtype) -> "Module":
        """Cast every parameter (and gradient buffer) in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: expected shape {p.data.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=state[k].dtype)
            p.grad = np.zeros_like(p.data)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _check_input(x: np.ndarray, channels: int, name: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"{name}: expected input (N, {channels}, H, W), got {x.shape}")


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Square-kernel convolution with ``padding = kernel // 2`` and stride 1 or 2."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32, scale: float = 1.0):
        if stride not in (1, 2):
            raise ValueError("Conv2d supports stride 1 or 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, kernel, stride
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(scale * _he(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    def out_shape(self, H: int, W: int) -> tuple[int, int]:
        p = self.k // 2
        return (H + 2 * p - self.k) // self.stride + 1, (W + 2 * p - self.k) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_input(x, self.in_ch, "Conv2d")
        x = x.astype(self.weight.data.dtype, copy=False)
        N, C, H, W = x.shape
        k, s, p = self.k, self.stride, self.k // 2
        Ho, Wo = self.out_shape(H, W)
        # channels-last columns (N, Ho, Wo, k, k, C): every copy moves contiguous C-vectors
        xp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
        xp[:, p:p + H, p:p + W, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((N, Ho, Wo, k, k, C), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + s * Ho:s, j:j + s * Wo:s, :]
        cols = cols.reshape(N * Ho * Wo, k * k * C)
        wmat = self.weight.data.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        out = cols @ wmat.T
        out += self.bias.data
        self._cache = (cols, x.shape, Ho, Wo)
        return out.reshape(N, Ho, Wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, (N, C, H, W), Ho, Wo = self._cache
        k, s, p = self.k, self.stride, self.k // 2
        dyf = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        gw = (dyf.T @ cols).reshape(self.out_ch, k, k, C).transpose(0, 3, 1, 2)
        self.weight.grad += gw
        self.bias.grad += dyf.sum(axis=0)
        wmat = self.weight.data.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        dcols = (dyf @ wmat).reshape(N, Ho, Wo, k, k, C)
        dxp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2)


class ConvTranspose2d(Module):
    """Stride-2, kernel-2 transposed convolution (exact 2x upsampling, no overlap)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(_he(rng, (in_ch, out_ch, 2, 2), in_ch, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_input(x, self.in_ch, "ConvTranspose2d")
        x = x.astype(self.weight.data.dtype, copy=False)
        N, C, H, W = x.shape
        self._x = x
        xf = x.transpose(0, 2, 3, 1).reshape(-1, C)
        y = xf @ self.weight.data.reshape(C, -1)                      # (NHW, O*2*2)
        y = y.reshape(N, H, W, self.out_ch, 2, 2).transpose(0, 3, 1, 4, 2, 5)
        return y.reshape(N, self.out_ch, 2 * H, 2 * W) + self.bias.data[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        N, C, H, W = x.shape
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        d = dy.reshape(N, self.out_ch, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(N * H * W, -1)
        xf = x.transpose(0, 2, 3, 1).reshape(-1, C)
        self.weight.grad += (xf.T @ d).reshape(self.weight.data.shape)
        dx = d @ self.weight.data.reshape(C, -1).T
        return dx.reshape(N, H, W, C).transpose(0, 3, 1, 2)


class GroupNorm(Module):
    """Group normalization with per-channel affine parameters."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_input(x, self.channels, "GroupNorm")
        x = x.astype(self.gamma.data.dtype, copy=False)
        N, C, H, W = x.shape
        xg = x.reshape(N, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mean) * inv).reshape(N, C, H, W)
        self._cache = (xhat, inv)
        return xhat * self.gamma.data[None, :, None, None] + self.beta.data[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        N, C, H, W = dy.shape
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.gamma.data[None, :, None, None]).reshape(N, self.groups, -1)
        xh = xhat.reshape(N, self.groups, -1)
        m = dxhat.shape[2]
        dx = inv / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                        - xh * (dxhat * xh).sum(axis=2, keepdims=True))
        return dx.reshape(N, C, H, W)


class SiLU(Module):
    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        sig = expit(x)
        self._cache = (x, sig)
        return x * sig

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, sig = self._cache
        return dy * sig * (1.0 + x * (1.0 - sig))


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, scale: float = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_f, self.out_f = in_f, out_f
        self.weight = Parameter(scale * _he(rng, (out_f, in_f), in_f, dtype))
        self.bias = Parameter(np.zeros(out_f, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_f:
            raise ValueError(f"Linear: expected input (N, {self.in_f}), got {x.shape}")
        x = x.astype(self.weight.data.dtype, copy=False)
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.weight.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.data


class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ValueError(f"Upsample2x: expected (N, C, H, W), got {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        N, C, H, W = dy.shape
        return dy.reshape(N, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def _frequencies(dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError("timestep embedding dimension must be even")
    half = dim // 2
    return np.exp(-np.log(10000.0) * np.arange(half) / half)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t*f), cos(t*f)]`` of shape ``(N, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    arg = t[:, None] * _frequencies(dim)[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(dtype)


def timestep_embedding_grad(t, dim: int, dy: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dy * timestep_embedding(t))`` with respect to ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    f = _frequencies(dim)
    arg = t[:, None] * f[None, :]
    half = dim // 2
    return (dy[:, :half] * f * np.cos(arg) - dy[:, half:] * f * np.sin(arg)).sum(axis=1)


def concat(xs: list[np.ndarray]) -> np.ndarray:
    """Channel concatenation; pair with :func:`split` in the backward pass."""
    return np.concatenate(xs, axis=1)


def split(dy: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)
