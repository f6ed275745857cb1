"""Parameterized layers operating on batched channel-first tensors.

Sequence tensors are laid out as ``[N, C, L]`` (batch, channels, time) and
feature vectors as ``[N, F]``.
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, affine, concat, mean, max_


class Module:
    """Minimal container: named parameters, buffers, children and a train flag."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + name, val))
        for name, child in self.children():
            out.extend(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + n, getattr(self, n)) for n in getattr(self, "_buffers", ())]
        for name, child in self.children():
            out.extend(child.named_buffers(prefix + name + "."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


# -- causal dilated convolution ---------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], dilation: int = 1, groups: int = 1) -> Tensor:
    """Causal dilated cross-correlation with left zero padding.

    ``y[n, o, t] = b[o] + sum_{c, i} w[o, c, i] * xpad[n, c, t + i*dilation]``
    with ``pad = (k - 1) * dilation``. ``groups`` is 1 (dense) or the channel
    count (depthwise).
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: expected [N, C, L] input, got {x.shape}")
    n, c_in, length = x.shape
    c_out, c_per, k = weight.shape
    if c_in != c_per * groups:
        raise ShapeError(f"conv1d: input has {c_in} channels, weight {weight.shape} with groups={groups}")
    depthwise = groups > 1
    if depthwise and not (groups == c_in == c_out and c_per == 1):
        raise ShapeError(f"conv1d: only dense or depthwise grouping supported (groups={groups}, weight {weight.shape})")
    pad = (k - 1) * dilation
    xd, wd = x.data, weight.data
    xp = np.concatenate([np.zeros((n, c_in, pad), dtype=xd.dtype), xd], axis=2) if pad else xd
    if depthwise:
        w2 = wd[:, 0, :]
        taps = [xp[:, :, i * dilation: i * dilation + length] for i in range(k)]
        y = taps[0] * w2[None, :, 0, None]
        for i in range(1, k):
            y = y + taps[i] * w2[None, :, i, None]
    else:
        # im2col: rows ordered (tap, channel) to match w.transpose(0, 2, 1)
        cols = np.concatenate([xp[:, :, i * dilation: i * dilation + length] for i in range(k)], axis=1)
        wmat = wd.transpose(0, 2, 1).reshape(c_out, k * c_in)
        y = wmat @ cols
    if bias is not None:
        y = y + bias.data[None, :, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gcols = None if depthwise else wmat.T @ g
            for i in range(k):
                sl = slice(i * dilation, i * dilation + length)
                if depthwise:
                    gxp[:, :, sl] += g * w2[None, :, i, None]
                else:
                    gxp[:, :, sl] += gcols[:, i * c_in:(i + 1) * c_in]
            gx = gxp[:, :, pad:]
        if weight.requires_grad:
            if depthwise:
                gw = np.empty_like(wd)
                for i in range(k):
                    gw[:, 0, i] = (g * taps[i]).sum(axis=(0, 2))
            else:
                gmat = (g @ cols.transpose(0, 2, 1)).sum(axis=0)
                gw = np.ascontiguousarray(gmat.reshape(c_out, k, c_in).transpose(0, 2, 1))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return Tensor.from_op("conv1d", y, inputs, bw)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1, groups: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.dilation, self.groups = kernel_size, dilation, groups
        fan_in = (in_channels // groups) * kernel_size
        self.weight = _uniform(rng, (out_channels, in_channels // groups, kernel_size), fan_in, dtype)
        self.bias = _uniform(rng, (out_channels,), fan_in, dtype) if bias else None

    @property
    def causal_left_pad(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.dilation, self.groups)


# -- normalization ----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mu: np.ndarray, var: np.ndarray, eps: float,
               batch_stats: bool = True) -> Tensor:
    """Normalize channel axis 1 with the given statistics.

    With ``batch_stats`` the statistics are taken to be those of ``x``
    itself and the gradient flows through them; otherwise they are constants.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.size // xd.shape[1]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, gg, gb

    def bw_frozen(g):
        gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.from_op("batch_norm", y, (x, gamma, beta), bw if batch_stats else bw_frozen)


class BatchNorm1d(Module):
    """Batch normalization over [N, C, L] (stats over N and L) or [N, C] (stats over N).

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate. Eval mode uses running
    statistics only (initially mean 0, variance 1).
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"batch_norm: expected {self.channels} channels on axis 1, got {x.shape}")
        if not self.training:
            return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps,
                              batch_stats=False)
        axes = (0,) + tuple(range(2, x.ndim))
        m = x.data.size // self.channels
        if m < 2:
            raise ShapeError(f"batch_norm: train mode needs at least 2 values per channel, got input {x.shape}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * (m / (m - 1))
        return batch_norm(x, self.gamma, self.beta, mu, var, self.eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels (axis 1) independently at every [n, :, t]."""
    xd = x.data
    c = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, xd.ndim))

    def bw(g):
        gxhat = g * gamma.data.reshape(bshape)
        gx = (inv / c) * (c * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.from_op("layer_norm", y, (x, gamma, beta), bw)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"layer_norm: expected {self.channels} channels on axis 1, got {x.shape}")
        return layer_norm(x, self.gamma, self.beta, self.eps)


# -- pooling ----------------------------------------------------------------

def maxpool1d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling along time; ties route gradient to the first index."""
    if k != stride:
        raise ValueError("maxpool1d: only kernel == stride is supported")
    n, c, length = x.shape
    if length % k:
        raise ShapeError(f"maxpool1d: length {length} not divisible by {k}")
    win = x.data.reshape(n, c, length // k, k)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, length),)

    return Tensor.from_op("maxpool1d", out, (x,), bw)


class MaxPool1d(Module):
    def __init__(self, kernel_size: int = 2, stride: int = 2):
        super().__init__()
        self.kernel_size, self.stride = kernel_size, stride

    def forward(self, x: Tensor) -> Tensor:
        return maxpool1d(x, self.kernel_size, self.stride)


def global_pools(x: Tensor) -> Tensor:
    """[N, C, L] -> [N, 2C]: per-channel time mean followed by per-channel time max."""
    return concat([mean(x, axis=2), max_(x, axis=2)], axis=1)


# -- dense and dropout ------------------------------------------------------

class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.bias = _uniform(rng, (out_dim,), in_dim, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept values are scaled by 1 / (1 - rate)."""
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor.from_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


class Dropout(Module):
    """Dropout with a counter-based mask stream.

    Masks are drawn from a Philox generator keyed on
    ``(seed, epoch, batch, layer_id, call)``, so any batch of any epoch can
    be replayed exactly.
    """

    def __init__(self, rate: float = 0.2, layer_id: int = 0, seed: int = 0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate, self.layer_id, self.seed = rate, layer_id, seed
        self.context: Tuple[int, int] = (0, 0)
        self._calls = 0

    def set_context(self, epoch: int, batch: int) -> None:
        self.context = (epoch, batch)
        self._calls = 0

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        key = np.random.SeedSequence([self.seed, *self.context, self.layer_id, self._calls])
        self._calls += 1
        return dropout(x, self.rate, np.random.Generator(np.random.Philox(key)))


def state_dict(module: Module) -> Dict[str, np.ndarray]:
    """Parameters and buffers by dotted name (arrays are not copied)."""
    out = {name: p.data for name, p in module.named_parameters()}
    out.update(dict(module.named_buffers()))
    return out
