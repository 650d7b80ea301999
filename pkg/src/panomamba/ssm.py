"""Selective state-space kernels and Mamba blocks.

The continuous system h'(t) = A h(t) + B x(t), y = C h(t) is discretized with
a zero-order hold (A_bar = exp(dA), B_bar = (dA)^-1 (exp(dA) - 1) dB, applied
elementwise on the diagonal) and evaluated either by the exact sequential
recurrence (the oracle) or by a Blelloch-style work-efficient parallel scan
over the associative operator (a1,b1) o (a2,b2) = (a1*a2, a2*b1 + b2).

Shape glossary: L sequence length, D channels, N state size per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, RMSNorm, dwconv1d_causal, fan_in_uniform
from .tensor import ContractError, ShapeError, Tensor, record_op

ZOH_SMALL_THRESHOLD = 1e-8


# --- raw scan cores (numpy, no tape) ----------------------------------------


def _scan_seq_core(a, b, h0):
    h = np.empty_like(b)
    cur = h0
    for t in range(a.shape[0]):
        cur = a[t] * cur + b[t]
        h[t] = cur
    return h


def _scan_pairs_parallel(a, b):
    """Inclusive prefix combine along axis 0; returns (A_inc, B_inc).

    Blelloch up/down sweep, identity element (1, 0). Tree levels address
    strided views (no index arrays), so each level is a handful of
    contiguous elementwise kernels. Deterministic for a fixed input; the
    prefix at t composes elements 0..t so that h_t = A_inc[t] * h0 + B_inc[t].
    """
    L = a.shape[0]
    P = 1 << max(L - 1, 0).bit_length() if L > 1 else 1
    rest = a.shape[1:]
    A = np.ones((P,) + rest, dtype=a.dtype)
    B = np.zeros((P,) + rest, dtype=b.dtype)
    A[:L] = a
    B[:L] = b
    stride = 1
    while stride < P:
        Av = A.reshape((P // (2 * stride), 2 * stride) + rest)
        Bv = B.reshape((P // (2 * stride), 2 * stride) + rest)
        hi_a = Av[:, 2 * stride - 1]
        lo_a = Av[:, stride - 1]
        Bv[:, 2 * stride - 1] = hi_a * Bv[:, stride - 1] + Bv[:, 2 * stride - 1]
        Av[:, 2 * stride - 1] = hi_a * lo_a
        stride <<= 1
    A[P - 1] = 1.0
    B[P - 1] = 0.0
    stride = P >> 1
    while stride >= 1:
        Av = A.reshape((P // (2 * stride), 2 * stride) + rest)
        Bv = B.reshape((P // (2 * stride), 2 * stride) + rest)
        t_a = Av[:, stride - 1].copy()
        t_b = Bv[:, stride - 1].copy()
        p_a = Av[:, 2 * stride - 1].copy()
        p_b = Bv[:, 2 * stride - 1].copy()
        Av[:, stride - 1] = p_a
        Bv[:, stride - 1] = p_b
        Av[:, 2 * stride - 1] = t_a * p_a
        Bv[:, 2 * stride - 1] = t_a * p_b + t_b
        stride >>= 1
    # positions now hold exclusive prefixes; fold in each element
    A_inc = a * A[:L]
    B_inc = a * B[:L] + b
    return A_inc, B_inc


def _scan_core(a, b, h0, parallel):
    if parallel:
        A_inc, B_inc = _scan_pairs_parallel(a, b)
        return A_inc * h0 + B_inc
    return _scan_seq_core(a, b, h0)


# --- differentiable recurrence ----------------------------------------------


def linear_recurrence(a, b, h0=None, parallel=True):
    """h[t] = a[t] * h[t-1] + b[t] along axis 0, elementwise elsewhere.

    Backward runs the adjoint reverse recurrence (itself a scan), so the
    parallel engine serves both directions.
    """
    if a.shape != b.shape:
        raise ShapeError(f"recurrence operands disagree: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ContractError("recurrence needs at least one step")
    h0d = np.zeros(a.shape[1:], dtype=a.data.dtype) if h0 is None else h0.data
    ad, bd = a.data, b.data
    h = _scan_core(ad, bd, h0d, parallel)
    out = Tensor(h)

    def bwd(g):
        # lam[t] = dL/dh[t] totalled over downstream steps:
        # lam[L-1] = g[L-1]; lam[t] = g[t] + a[t+1] * lam[t+1]
        ar = np.roll(ad[::-1], 1, axis=0).copy()
        ar[0] = 0.0
        lam = _scan_core(ar, g[::-1].copy(), np.zeros_like(h0d), parallel)[::-1].copy()
        hm = np.concatenate([h0d[None], h[:-1]], axis=0)
        grads = [lam * hm, lam]
        if h0 is not None:
            grads.append(ad[0] * lam[0])
        return tuple(grads)

    inputs = (a, b) if h0 is None else (a, b, h0)
    return record_op(out, inputs, bwd)


def expm1_over_x(x):
    """phi(x) = (exp(x) - 1) / x with a first-order series below 1e-8.

    The series branch keeps B_bar continuous through the threshold; the
    derivative switches to its own series below 1e-4 to dodge cancellation.
    """
    xd = x.data
    small = np.abs(xd) < ZOH_SMALL_THRESHOLD
    y = np.empty_like(xd)
    y[small] = 1.0 + 0.5 * xd[small]
    xl = xd[~small]
    y[~small] = np.expm1(xl) / xl
    out = Tensor(y)

    def bwd(g):
        d = np.empty_like(xd)
        s = np.abs(xd) < 1e-4
        xs = xd[s]
        d[s] = 0.5 + xs / 3.0 + xs * xs / 8.0
        xl = xd[~s]
        d[~s] = (np.exp(xl) * (xl - 1.0) + 1.0) / (xl * xl)
        return (g * d,)

    return record_op(out, (x,), bwd)


# --- discretization and selective scan ---------------------------------------


@dataclass
class DiscreteSSM:
    a_bar: Tensor  # [L, D, N]
    b_bar: Tensor  # [L, D, N]


@dataclass
class SSMParams:
    """Continuous selective parameters; A kept as log(-A) for stability."""

    a_log: Tensor  # [D, N]
    b_sel: Tensor  # [L, N]
    c_sel: Tensor  # [L, N]
    delta: Tensor  # [L, D]

    @property
    def A(self):
        return T.neg(T.exp(self.a_log))

    def discretize(self):
        return discretize_zoh(self.A, self.b_sel, self.delta)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def discretize_zoh(A, b_sel, delta):
    """ZOH tables: a_bar = exp(dA), b_bar = phi(dA) * (delta x B)."""
    A, b_sel, delta = _as_tensor(A), _as_tensor(b_sel), _as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ContractError("discretize_zoh needs strictly positive delta")
    L, D = delta.shape
    dA = delta.reshape(L, D, 1) * A  # [L, D, N]
    a_bar = T.exp(dA)
    dB = delta.reshape(L, D, 1) * b_sel.reshape(L, 1, b_sel.shape[1])
    b_bar = expm1_over_x(dA) * dB
    return DiscreteSSM(a_bar, b_bar)


def _check_scan_shapes(disc, c_sel, x):
    L, D, N = disc.a_bar.shape
    if x.shape != (L, D):
        raise ShapeError(f"scan input {x.shape} does not match discrete tables {disc.a_bar.shape}")
    if c_sel.shape != (L, N):
        raise ShapeError(f"output projection {c_sel.shape} does not match tables {disc.a_bar.shape}")
    return L, D, N


def _selective_scan(disc, c_sel, x, h0, parallel, return_state):
    L, D, N = _check_scan_shapes(disc, c_sel, x)
    bx = disc.b_bar * x.reshape(L, D, 1)
    h = linear_recurrence(disc.a_bar, bx, h0=h0, parallel=parallel)
    y = (h * c_sel.reshape(L, 1, N)).sum(axes=2)
    if return_state:
        return y, h[L - 1]
    return y


def selective_scan_seq(disc, c_sel, x, h0=None, return_state=False):
    """Exact sequential recurrence; the oracle for the parallel form."""
    return _selective_scan(disc, c_sel, x, h0, False, return_state)


def selective_scan_parallel(disc, c_sel, x, h0=None, return_state=False):
    """Work-efficient parallel evaluation of the same recurrence."""
    return _selective_scan(disc, c_sel, x, h0, True, return_state)


# --- Mamba blocks -------------------------------------------------------------


class MambaCore(Module):
    """Conv -> SiLU -> input-dependent (delta, B, C) -> scan, plus skip.

    Internals follow the published defaults at toy scale: depthwise causal
    conv of width 4, delta through softplus with bias chosen so the initial
    step sizes land in [dt_min, dt_max], A_log started at log(1..N) per
    channel, and a learned per-channel skip.
    """

    def __init__(self, d_inner, d_state, rng, conv_width=4, dt_min=1e-3, dt_max=0.1):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.conv_weight = self._param(
            "conv_weight", fan_in_uniform(rng, (d_inner, conv_width), conv_width)
        )
        self.conv_bias = self._param("conv_bias", np.zeros(d_inner))
        self.x_to_delta = self._child("x_to_delta", Linear(d_inner, d_inner, rng))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        self.x_to_delta.bias.data[...] = dt + np.log(-np.expm1(-dt))  # softplus inverse
        self.x_to_B = self._child("x_to_B", Linear(d_inner, d_state, rng, bias=False))
        self.x_to_C = self._child("x_to_C", Linear(d_inner, d_state, rng, bias=False))
        a0 = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
        self.a_log = self._param("a_log", a0)
        self.d_skip = self._param("d_skip", np.ones(d_inner))

    def forward(self, u, h0=None, parallel=True, return_state=False):
        if u.shape[1] != self.d_inner:
            raise ShapeError(f"core width {self.d_inner} vs input {u.shape}")
        x = T.silu(dwconv1d_causal(u, self.conv_weight, self.conv_bias))
        delta = T.softplus(self.x_to_delta(x))
        b_sel = self.x_to_B(x)
        c_sel = self.x_to_C(x)
        A = T.neg(T.exp(self.a_log))
        disc = discretize_zoh(A, b_sel, delta)
        res = _selective_scan(disc, c_sel, x, h0, parallel, return_state)
        if return_state:
            y, h_last = res
            return y + self.d_skip * x, h_last
        return res + self.d_skip * x

    __call__ = forward


class Mamba1D(Module):
    """Residual gated block around a causal selective-scan core."""

    def __init__(self, d_model, d_state, rng, expand=2):
        super().__init__()
        self.d_model = d_model
        d_inner = expand * d_model
        self.norm = self._child("norm", RMSNorm(d_model))
        self.in_proj = self._child("in_proj", Linear(d_model, d_inner, rng, bias=False))
        self.gate_proj = self._child("gate_proj", Linear(d_model, d_inner, rng, bias=False))
        self.core = self._child("core", MambaCore(d_inner, d_state, rng))
        self.out_proj = self._child("out_proj", Linear(d_inner, d_model, rng, bias=False))

    def _gated_core(self, n, h0=None, parallel=True, return_state=False):
        x = self.in_proj(n)
        z = self.gate_proj(n)
        res = self.core(x, h0=h0, parallel=parallel, return_state=return_state)
        if return_state:
            y, h_last = res
            return y * T.silu(z), h_last
        return res * T.silu(z)

    def forward(self, seq, parallel=True):
        if seq.ndim != 2 or seq.shape[1] != self.d_model:
            raise ShapeError(f"block width {self.d_model} vs input {seq.shape}")
        y = self._gated_core(self.norm(seq), parallel=parallel)
        return seq + self.out_proj(y)

    __call__ = forward


class MambaBranch(Module):
    """One direction of a bidirectional block (projections + core, no out)."""

    def __init__(self, d_model, d_state, rng, expand=2):
        super().__init__()
        d_inner = expand * d_model
        self.in_proj = self._child("in_proj", Linear(d_model, d_inner, rng, bias=False))
        self.gate_proj = self._child("gate_proj", Linear(d_model, d_inner, rng, bias=False))
        self.core = self._child("core", MambaCore(d_inner, d_state, rng))

    def forward(self, n, parallel=True):
        y = self.core(self.in_proj(n), parallel=parallel)
        return y * T.silu(self.gate_proj(n))

    __call__ = forward


class Mamba2D(Module):
    """Bidirectional block over a row-major flattened grid.

    Forward and reversed branches keep separate parameters; their outputs are
    summed before the shared output projection, then the residual is added.
    """

    def __init__(self, d_model, d_state, rng, expand=2):
        super().__init__()
        self.d_model = d_model
        self.norm = self._child("norm", RMSNorm(d_model))
        self.fwd = self._child("fwd", MambaBranch(d_model, d_state, rng, expand))
        self.bwd = self._child("bwd", MambaBranch(d_model, d_state, rng, expand))
        self.out_proj = self._child("out_proj", Linear(expand * d_model, d_model, rng, bias=False))

    def forward_seq(self, seq, parallel=True):
        if seq.ndim != 2 or seq.shape[1] != self.d_model:
            raise ShapeError(f"block width {self.d_model} vs input {seq.shape}")
        n = self.norm(seq)
        yf = self.fwd(n, parallel=parallel)
        yb = T.flip(self.bwd(T.flip(n, 0), parallel=parallel), 0)
        return seq + self.out_proj(yf + yb)

    def forward(self, grid, parallel=True):
        if grid.ndim != 3 or grid.shape[2] != self.d_model:
            raise ShapeError(f"expected [H, W, {self.d_model}] grid, got {grid.shape}")
        hf, wf, d = grid.shape
        out = self.forward_seq(grid.reshape(hf * wf, d), parallel=parallel)
        return out.reshape(hf, wf, d)

    __call__ = forward


def mamba_chain(block, segments, h0=None, parallel=True):
    """Run a 1D block over segments, passing only the scan state across.

    Each segment's recurrence starts from the previous segment's final state;
    convolutions stay segment-local (zero left padding), honoring the
    state-passage-only design. Returns (outputs, carried states); with a
    single segment and no initial state this is exactly block.forward.
    """
    if not segments:
        raise ContractError("mamba_chain needs at least one segment")
    outs, states = [], []
    carry = h0
    for seq in segments:
        if seq.ndim != 2 or seq.shape[1] != block.d_model:
            raise ShapeError(f"chain width {block.d_model} vs segment {seq.shape}")
        y, h_last = block._gated_core(
            block.norm(seq), h0=carry, parallel=parallel, return_state=True
        )
        outs.append(seq + block.out_proj(y))
        states.append(h_last)
        carry = h_last
    return outs, states


# --- benchmark harness --------------------------------------------------------


def random_scan_problem(L, N, D, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    A = -rng.uniform(0.5, float(N) + 0.5, size=(D, N))
    delta = rng.uniform(1e-3, 0.1, size=(L, D))
    b_sel = rng.normal(size=(L, N))
    c_sel = rng.normal(size=(L, N))
    x = rng.normal(size=(L, D))
    cast = lambda a: Tensor(a.astype(dtype))
    return cast(A), cast(b_sel), cast(c_sel), cast(delta), cast(x)


def bench_scan(L, N, D, variant, dtype=np.float64, seed=0, repeats=3):
    """One benchmark row: variant runtime plus error against the f64 oracle."""
    import time

    if L < 1 or N < 1 or D < 1:
        raise ContractError(f"bench sizes must be >= 1, got L={L} N={N} D={D}")
    if variant not in ("seq", "parallel"):
        raise ContractError(f"unknown scan variant {variant!r}")
    A, b_sel, c_sel, delta, x = random_scan_problem(L, N, D, seed, dtype=np.float64)
    disc = discretize_zoh(A, b_sel, delta)
    oracle = selective_scan_seq(disc, c_sel, x).data
    if dtype is not np.float64:
        A, b_sel, c_sel, delta, x = random_scan_problem(L, N, D, seed, dtype=dtype)
        disc = discretize_zoh(A, b_sel, delta)
    fn = selective_scan_parallel if variant == "parallel" else selective_scan_seq
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        y = fn(disc, c_sel, x)
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    err = float(np.max(np.abs(y.data.astype(np.float64) - oracle)))
    return {"L": L, "N": N, "D": D, "variant": variant, "wall_ns": best, "max_abs_err": err}
