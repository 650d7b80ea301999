"""Parameter containers, layers, the AdamW optimizer, and checkpoint I/O.

Parameter names are dotted paths ("vcr.blocks.3.in_proj.weight") that stay
stable across runs so checkpoints round-trip byte-identically.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, record_op


# --- module tree ----------------------------------------------------------


class Module:
    """Small tree of named parameters and child modules."""

    def __init__(self):
        self._params = OrderedDict()
        self._children = OrderedDict()

    def _param(self, name, value):
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def _child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name if not prefix else f"{prefix}.{name}"), p
        for name, child in self._children.items():
            sub = name if not prefix else f"{prefix}.{name}"
            yield from child.named_parameters(sub)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=""):
        d = OrderedDict()
        for name, p in self.named_parameters(prefix):
            if name in d:
                raise ContractError(f"duplicate parameter name {name!r}")
        for name, p in self.named_parameters(prefix):
            d[name] = p.data.copy()
        return d

    def load_state_dict(self, d):
        for name, p in self.named_parameters():
            if name not in d:
                raise ContractError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(d[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data[...] = arr


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self._child(str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


# --- initialization -------------------------------------------------------


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ weight + bias with weight [d_in, d_out]."""

    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self._param("weight", fan_in_uniform(rng, (d_in, d_out), d_in))
        self.bias = self._param("bias", np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y

    __call__ = forward


class RMSNorm(Module):
    """Row-wise RMS normalization with a learned scale."""

    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.scale = self._param("scale", np.ones(d))

    def forward(self, x):
        ms = (x * x).mean(axes=-1)
        inv = (ms + self.eps).sqrt().reciprocal()
        return x * inv.reshape(inv.shape + (1,)) * self.scale

    __call__ = forward


# --- convolution ops (custom tape ops) -------------------------------------


def conv2d(x, w, b=None, stride=1, padding=1):
    """2D convolution, channels-first single sample.

    x: [Cin, H, W]; w: [Cout, Cin, kh, kw]; b: [Cout] or None.
    Output extent: ceil-style ((H + 2p - kh) // stride + 1).
    """
    cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xd = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    s = xd.strides
    cols = np.lib.stride_tricks.as_strided(
        xd,
        shape=(ho, wo, cin, kh, kw),
        strides=(s[1] * stride, s[2] * stride, s[0], s[1], s[2]),
    ).reshape(ho * wo, cin * kh * kw)
    cols = np.ascontiguousarray(cols)
    wmat = w.data.reshape(cout, cin * kh * kw).T
    out_flat = cols @ wmat
    if b is not None:
        out_flat = out_flat + b.data
    out = Tensor(out_flat.reshape(ho, wo, cout).transpose(2, 0, 1).copy())

    def bwd(g):
        gflat = g.transpose(1, 2, 0).reshape(ho * wo, cout)
        gw = (cols.T @ gflat).T.reshape(cout, cin, kh, kw)
        gb = gflat.sum(axis=0) if b is not None else None
        gcols = (gflat @ wmat.T).reshape(ho, wo, cin, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[
                    :, :, :, i, j
                ].transpose(2, 0, 1)
        if padding:
            gx = gx[:, padding:-padding or None, padding:-padding or None]
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, bwd if b is not None else (lambda g: bwd(g)[:2]))


def dwconv1d_causal(x, w, b=None):
    """Depthwise causal 1D convolution.

    x: [L, C]; w: [C, K] taps ordered oldest-to-newest; left zero padding of
    K-1 keeps the op causal. Optional per-channel bias.
    """
    L, c = x.shape
    cw, k = w.shape
    if c != cw:
        raise ShapeError(f"dwconv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xp = np.concatenate([np.zeros((k - 1, c), dtype=x.data.dtype), x.data], axis=0)
    y = np.zeros((L, c), dtype=x.data.dtype)
    for j in range(k):
        y += xp[j : j + L] * w.data[:, j]
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gx_p = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gx_p[j : j + L] += g * w.data[:, j]
            gw[:, j] = (g * xp[j : j + L]).sum(axis=0)
        gx = gx_p[k - 1 :]
        if b is not None:
            return (gx, gw, g.sum(axis=0))
        return (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out, inputs, bwd)


def resize_nearest(x, out_hw):
    """Nearest-neighbor resize of [C, H, W] to [C, out_h, out_w]."""
    c, h, w = x.shape
    oh, ow = out_hw
    ri = np.minimum((np.floor((np.arange(oh) + 0.5) * h / oh)).astype(int), h - 1)
    ci = np.minimum((np.floor((np.arange(ow) + 0.5) * w / ow)).astype(int), w - 1)
    out = Tensor(x.data[:, ri][:, :, ci].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), ri[:, None], ci[None, :]), g)
        return (gx,)

    return record_op(out, (x,), bwd)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, zero_init=False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = cin * k * k
        w0 = np.zeros((cout, cin, k, k)) if zero_init else fan_in_uniform(rng, (cout, cin, k, k), fan_in)
        self.weight = self._param("weight", w0)
        self.bias = self._param("bias", np.zeros(cout))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    __call__ = forward


# --- optimizer --------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay; skips parameters with no grad."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ContractError("optimizer parameter names must be unique")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def state_tensors(self):
        d = OrderedDict()
        d["opt.t"] = np.array([float(self.t)])
        for n, _ in self.named_params:
            d[f"opt.m.{n}"] = self.m[n]
            d[f"opt.v.{n}"] = self.v[n]
        return d

    def load_state_tensors(self, d):
        if "opt.t" in d:
            self.t = int(round(float(d["opt.t"][0])))
        for n, _ in self.named_params:
            if f"opt.m.{n}" in d:
                self.m[n][...] = d[f"opt.m.{n}"]
                self.v[n][...] = d[f"opt.v.{n}"]


# --- checkpoint container ---------------------------------------------------

CKPT_MAGIC = b"OPAMA001"


def save_checkpoint(path, named_arrays):
    """Flat binary container: magic, count, then per-tensor records.

    Record layout (all integers u64 little-endian): name length, UTF-8 name,
    rank, extents, then the raw float64 little-endian payload.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        items = list(named_arrays.items())
        f.write(struct.pack("<Q", len(items)))
        for name, arr in items:
            data = np.ascontiguousarray(np.asarray(arr), dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", data.ndim))
            for ext in data.shape:
                f.write(struct.pack("<Q", ext))
            f.write(data.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CKPT_MAGIC:
        raise ContractError(f"bad checkpoint magic {blob[:8]!r}")
    off = 8
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        out[name] = arr
    return out
