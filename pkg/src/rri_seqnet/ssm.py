"""Selective state-space block: input-dependent discretization and scan.

The recurrence ``h_t = A_bar_t * h_{t-1} + B_bar_t * x_t`` is linear in
``h``, so pairs ``(a, b)`` compose associatively as
``(a2, b2) o (a1, b1) = (a1 * a2, a2 * b1 + b2)``. The parallel path scans
all fixed-size blocks simultaneously, combines the block totals, and applies
each block's incoming carry in one pass; total work stays linear in the
sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Conv1d, Dropout, LayerNorm, Module, _uniform
from .tensor import Tensor, affine, exp, relu, silu, softplus, split, transpose

SCAN_BLOCK = 64


@dataclass
class SsmConfig:
    d_model: int = 32
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: int | None = None  # None -> ceil(d_model / 16)
    dt_min: float = 0.001
    dt_max: float = 0.1

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)

    def validate(self) -> None:
        for name in ("d_model", "d_state", "d_conv", "expand", "rank"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SsmConfig.{name} must be positive, got {getattr(self, name)}")
        if self.rank > self.d_inner:
            raise ValueError(f"SsmConfig: dt_rank {self.rank} exceeds d_inner {self.d_inner}")


# -- discretization and scans (plain arrays, time on axis 0) ---------------

def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray):
    """Zero-order hold for A, Euler step for B.

    delta: [L, d] (positive), A: [d, N] (negative), B: [L, N]
    returns A_bar, B_bar: [L, d, N]
    """
    d = np.asarray(delta)[..., None]
    return np.exp(d * A), d * np.asarray(B)[..., None, :]


def linear_scan_sequential(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + b_t`` along axis 0, one step at a time."""
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype) if h0 is None else h0
    for t in range(h.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def linear_scan_parallel(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None,
                         block: int = SCAN_BLOCK) -> np.ndarray:
    """Same recurrence as :func:`linear_scan_sequential` via a blocked prefix scan.

    Each block's local prefix ``(a_1...a_t, local h_t)`` is built for all
    blocks at once, block totals are combined left to right, and the carry
    into each block is applied with one vectorized fix-up.
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    length, rest = shape[0], shape[1:]
    if length == 0:
        return np.empty(shape, dtype=dtype)
    block = max(1, min(block, length))
    nb = -(-length // block)
    total = nb * block
    P = np.ones((total,) + rest, dtype=dtype)
    H = np.zeros((total,) + rest, dtype=dtype)
    P[:length] = a
    H[:length] = b
    P = P.reshape((nb, block) + rest)
    H = H.reshape((nb, block) + rest)
    for i in range(1, block):
        # (P, H)[i] <- (a_i, b_i) o (P, H)[i-1]
        H[:, i] += P[:, i] * H[:, i - 1]
        P[:, i] *= P[:, i - 1]
    carry = np.zeros(rest, dtype=dtype) if h0 is None else np.asarray(h0, dtype=dtype)
    carries = np.empty((nb,) + rest, dtype=dtype)
    for j in range(nb):
        carries[j] = carry
        carry = P[j, -1] * carry + H[j, -1]
    H += P * carries[:, None]
    return H.reshape((total,) + rest)[:length]


def _scan_output(h: np.ndarray, C: np.ndarray, D: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("...ldn,...ln->...ld", h, C) + D * x


def selective_scan_sequential(A_bar, B_bar, C, D, x, h0=None) -> np.ndarray:
    """y_t = <C_t, h_t> + D * x_t with h from the step-by-step recurrence.

    A_bar, B_bar: [L, d, N]; C: [L, N]; D: [d]; x: [L, d] -> y: [L, d]
    """
    A_bar, B_bar, x = np.asarray(A_bar), np.asarray(B_bar), np.asarray(x)
    h = linear_scan_sequential(A_bar, B_bar * x[..., None], h0)
    return _scan_output(h, np.asarray(C), np.asarray(D), x)


def selective_scan_parallel(A_bar, B_bar, C, D, x, h0=None, block: int = SCAN_BLOCK) -> np.ndarray:
    """Blocked-prefix-scan evaluation of :func:`selective_scan_sequential`."""
    A_bar, B_bar, x = np.asarray(A_bar), np.asarray(B_bar), np.asarray(x)
    h = linear_scan_parallel(A_bar, B_bar * x[..., None], h0, block)
    return _scan_output(h, np.asarray(C), np.asarray(D), x)


def _scan_time_axis1(a, b, parallel: bool):
    # batched arrays are [N, L, ...]; scan along L
    at, bt = np.moveaxis(a, 1, 0), np.moveaxis(b, 1, 0)
    h = linear_scan_parallel(at, bt) if parallel else linear_scan_sequential(at, bt)
    return np.ascontiguousarray(np.moveaxis(h, 0, 1))


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   parallel: bool = True) -> Tensor:
    """Differentiable fused discretize + scan + readout.

    x, delta: [N, L, d]; A: [d, S]; B, C: [N, L, S]; D: [d] -> y: [N, L, d]

    The backward pass runs the adjoint recurrence
    ``lam_t = dL/dh_t + A_bar_{t+1} * lam_{t+1}`` with the same scan kernel
    on time-reversed inputs.
    """
    xd, dd, Ad, Bd, Cd, Dd = x.data, delta.data, A.data, B.data, C.data, D.data
    dA = np.exp(dd[..., None] * Ad)
    dBx = (dd * xd)[..., None] * Bd[:, :, None, :]
    h = _scan_time_axis1(dA, dBx, parallel)
    y = np.einsum("nlds,nls->nld", h, Cd, optimize=True) + Dd * xd

    def bw(g):
        gC = np.einsum("nld,nlds->nls", g, h, optimize=True)
        gD = (g * xd).sum(axis=(0, 1))
        gh = g[..., None] * Cd[:, :, None, :]
        a_next = np.zeros_like(dA)
        a_next[:, :-1] = dA[:, 1:]
        lam = _scan_time_axis1(a_next[:, ::-1], gh[:, ::-1], parallel)[:, ::-1]
        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        g_arg = lam * h_prev * dA  # gradient w.r.t. delta * A
        gBx = np.einsum("nlds,nls->nld", lam, Bd, optimize=True)
        gdelta = np.einsum("nlds,ds->nld", g_arg, Ad, optimize=True) + gBx * xd
        gA = np.einsum("nlds,nld->ds", g_arg, dd, optimize=True)
        gB = np.einsum("nlds,nld->nls", lam, dd * xd, optimize=True)
        gx = g * Dd + gBx * dd
        return gx, gdelta, gA, gB, gC, gD

    return Tensor.from_op("selective_scan", y, (x, delta, A, B, C, D), bw)


# -- layers -----------------------------------------------------------------

class MambaBlock(Module):
    """Gated selective-SSM mixer mapping [N, d_model, L] to the same shape.

    in_proj splits into a scan branch and a gate; the scan branch passes a
    depthwise causal conv and SiLU, then produces per-step (delta, B, C).
    """

    def __init__(self, cfg: SsmConfig, rng: np.random.Generator | None = None, dtype=np.float64,
                 parallel_scan: bool = True):
        super().__init__()
        cfg.validate()
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.parallel_scan = parallel_scan
        dm, di, ds, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.rank
        self.in_proj = _uniform(rng, (2 * di, dm), dm, dtype)
        self.conv = Conv1d(di, di, cfg.d_conv, groups=di, rng=rng, dtype=dtype)
        self.x_proj = _uniform(rng, (r + 2 * ds, di), di, dtype)
        self.dt_proj_w = _uniform(rng, (di, r), r, dtype)
        # softplus(dt_proj_b) is log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=di))
        self.dt_proj_b = Tensor((dt + np.log(-np.expm1(-dt))).astype(dtype), requires_grad=True)
        self.A_log = Tensor(np.log(np.tile(np.arange(1, ds + 1, dtype=dtype), (di, 1))), requires_grad=True)
        self.D = Tensor(np.ones(di, dtype=dtype), requires_grad=True)
        self.out_proj = _uniform(rng, (dm, di), di, dtype)

    def forward(self, u: Tensor) -> Tensor:
        cfg = self.cfg
        ut = transpose(u, (0, 2, 1))
        xb, z = split(affine(ut, self.in_proj), [cfg.d_inner, cfg.d_inner], axis=-1)
        xc = silu(self.conv(transpose(xb, (0, 2, 1))))
        xs = transpose(xc, (0, 2, 1))
        dt_in, B, C = split(affine(xs, self.x_proj), [cfg.rank, cfg.d_state, cfg.d_state], axis=-1)
        delta = softplus(affine(dt_in, self.dt_proj_w, self.dt_proj_b))
        A = -exp(self.A_log)
        y = selective_scan(xs, delta, A, B, C, self.D, parallel=self.parallel_scan)
        y = y * silu(z)
        return transpose(affine(y, self.out_proj), (0, 2, 1))


class ConvFFN(Module):
    """Two causal convolutions with ReLU between; length preserving."""

    def __init__(self, d_model: int, hidden: int, kernel: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv1 = Conv1d(d_model, hidden, kernel, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(hidden, d_model, kernel, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(x)))


class MambaWrapper(Module):
    """``t1 = LN(mamba(u) + u); v = Dropout(LN(FFN(t1) + t1))``."""

    def __init__(self, cfg: SsmConfig, ffn_kernel: int = 3, ffn_expand: int = 4, dropout: float = 0.2,
                 rng=None, dtype=np.float64, layer_id: int = 0, seed: int = 0, parallel_scan: bool = True):
        super().__init__()
        dm = cfg.d_model
        self.mamba = MambaBlock(cfg, rng=rng, dtype=dtype, parallel_scan=parallel_scan)
        self.norm1 = LayerNorm(dm, dtype=dtype)
        self.ffn = ConvFFN(dm, ffn_expand * dm, ffn_kernel, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dm, dtype=dtype)
        self.drop = Dropout(dropout, layer_id=layer_id, seed=seed)

    def forward(self, u: Tensor) -> Tensor:
        t1 = self.norm1(self.mamba(u) + u)
        return self.drop(self.norm2(self.ffn(t1) + t1))
