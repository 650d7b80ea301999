"""Small noise-prediction U-Net with four encoder stages aligned to the
adapter's scale ladder, sinusoidal timestep conditioning, and single-head
cross-attention over the refined context.

Feature extents: stage s works at latent/2^(s-1) and downsamples once, so its
output sits at latent/2^s, where the matching spatial condition is added
through a zero-initialized projection (an untrained adapter is a no-op).
Downsamples round up (ceil), and decoder upsamples resize back to the
recorded skip extents, so any latent with extents divisible by 8 round-trips
shape-exactly.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, ModuleList, resize_nearest
from .tensor import ShapeError, Tensor


def time_embed_base(t, d):
    """Sinusoidal features at geometric frequencies; cos block is 1 at t=0."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)]))


class TimeEmbed(Module):
    def __init__(self, d_base, d_time, rng):
        super().__init__()
        self.d_base = d_base
        self.lin1 = self._child("lin1", Linear(d_base, d_time, rng))
        self.lin2 = self._child("lin2", Linear(d_time, d_time, rng))

    def forward(self, t):
        e = time_embed_base(t, self.d_base).reshape(1, self.d_base)
        return self.lin2(T.silu(self.lin1(e)))  # [1, d_time]

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5):
        super().__init__()
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.eps = eps
        self.gamma = self._param("gamma", np.ones(channels))
        self.beta = self._param("beta", np.zeros(channels))

    def forward(self, x):
        c, h, w = x.shape
        g = self.groups
        xg = x.reshape(g, (c // g) * h * w)
        m = xg.mean(axes=1).reshape(g, 1)
        d = xg - m
        v = (d * d).mean(axes=1).reshape(g, 1)
        y = d * (v + self.eps).sqrt().reciprocal()
        y = y.reshape(c, h, w)
        return y * self.gamma.reshape(c, 1, 1) + self.beta.reshape(c, 1, 1)

    __call__ = forward


class ResBlock(Module):
    def __init__(self, cin, cout, d_time, rng):
        super().__init__()
        self.gn1 = self._child("gn1", GroupNorm(cin))
        self.conv1 = self._child("conv1", Conv2d(cin, cout, 3, rng))
        self.temb = self._child("temb", Linear(d_time, cout, rng))
        self.gn2 = self._child("gn2", GroupNorm(cout))
        self.conv2 = self._child("conv2", Conv2d(cout, cout, 3, rng))
        self.skip = self._child("skip", Conv2d(cin, cout, 1, rng)) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(T.silu(self.gn1(x)))
        h = h + self.temb(T.silu(temb)).reshape(-1, 1, 1)
        h = self.conv2(T.silu(self.gn2(h)))
        return h + (self.skip(x) if self.skip is not None else x)

    __call__ = forward


class CrossAttention(Module):
    """Single-head scaled dot-product over a sequence context."""

    def __init__(self, channels, d_ctx, d_key, rng):
        super().__init__()
        self.d_key = d_key
        self.wq = self._child("wq", Linear(channels, d_key, rng, bias=False))
        self.wk = self._child("wk", Linear(d_ctx, d_key, rng, bias=False))
        self.wv = self._child("wv", Linear(d_ctx, channels, rng, bias=False))
        self.wo = self._child("wo", Linear(channels, channels, rng))

    def forward(self, x, ctx):
        c, h, w = x.shape
        flat = x.reshape(c, h * w).transpose((1, 0))  # [HW, C]
        q = self.wq(flat)
        k = self.wk(ctx)
        v = self.wv(ctx)
        logits = (q @ k.transpose((1, 0))) * (1.0 / np.sqrt(self.d_key))
        shift = Tensor(logits.data.max(axis=1, keepdims=True))  # detached, shift-invariant
        e = T.exp(logits - shift)
        attn = e * e.sum(axes=1).reshape(-1, 1).reciprocal()
        out = self.wo(attn @ v)
        return x + out.transpose((1, 0)).reshape(c, h, w)

    __call__ = forward


class UNet(Module):
    LATENT_CHANNELS = 4

    def __init__(self, rng, widths=(32, 64, 96, 128), d_ctx=64, d_key=32, d_time=128):
        super().__init__()
        self.widths = tuple(widths)
        self.d_ctx = d_ctx
        w0, w1, w2, w3 = self.widths
        down_widths = (w1, w2, w3, w3)  # channels after each stage's downsample
        self.down_widths = down_widths
        self.time = self._child("time", TimeEmbed(64, d_time, rng))
        self.stem = self._child("stem", Conv2d(self.LATENT_CHANNELS, w0, 3, rng))

        stage_in = (w0, w1, w2, w3)
        self.enc_res1 = self._child(
            "enc_res1", ModuleList([ResBlock(stage_in[s], self.widths[s], d_time, rng) for s in range(4)])
        )
        self.enc_res2 = self._child(
            "enc_res2", ModuleList([ResBlock(self.widths[s], self.widths[s], d_time, rng) for s in range(4)])
        )
        self.enc_attn = self._child(
            "enc_attn", ModuleList([CrossAttention(self.widths[s], d_ctx, d_key, rng) for s in range(4)])
        )
        self.down = self._child(
            "down", ModuleList([Conv2d(self.widths[s], down_widths[s], 3, rng, stride=2) for s in range(4)])
        )
        self.inject = self._child(
            "inject", ModuleList([Conv2d(down_widths[s], down_widths[s], 1, rng, zero_init=True) for s in range(4)])
        )

        self.mid_res1 = self._child("mid_res1", ResBlock(w3, w3, d_time, rng))
        self.mid_attn = self._child("mid_attn", CrossAttention(w3, d_ctx, d_key, rng))
        self.mid_res2 = self._child("mid_res2", ResBlock(w3, w3, d_time, rng))

        # decoder stage s mirrors encoder stage s (processed from deep to shallow)
        up_in = (w1, w2, w3, w3)
        self.up = self._child(
            "up", ModuleList([Conv2d(up_in[s], self.widths[s], 3, rng) for s in range(4)])
        )
        self.dec_res1 = self._child(
            "dec_res1",
            ModuleList([ResBlock(2 * self.widths[s], self.widths[s], d_time, rng) for s in range(4)]),
        )
        self.dec_res2 = self._child(
            "dec_res2", ModuleList([ResBlock(self.widths[s], self.widths[s], d_time, rng) for s in range(4)])
        )
        self.dec_attn = self._child(
            "dec_attn", ModuleList([CrossAttention(self.widths[s], d_ctx, d_key, rng) for s in range(4)])
        )
        self.head_norm = self._child("head_norm", GroupNorm(w0))
        self.head = self._child("head", Conv2d(w0, self.LATENT_CHANNELS, 3, rng))

    def forward(self, z, t, conds):
        c, h, w = z.shape
        if c != self.LATENT_CHANNELS or h % 8 or w % 8:
            raise ShapeError(f"latent must be [{self.LATENT_CHANNELS}, 8k, 8k], got {z.shape}")
        c_vcr = conds.c_vcr
        if c_vcr.shape[1] != self.d_ctx:
            raise ShapeError(f"context width {c_vcr.shape} vs configured {self.d_ctx}")
        temb = self.time(t)
        x = self.stem(z)
        skips = []
        for s in range(4):
            x = self.enc_res1[s](x, temb)
            x = self.enc_res2[s](x, temb)
            x = self.enc_attn[s](x, c_vcr)
            skips.append(x)
            x = self.down[s](x)
            g = conds.c_gma[s]
            if g.shape[:2] != x.shape[1:] or g.shape[2] != x.shape[0]:
                raise ShapeError(
                    f"stage {s + 1} condition {g.shape} does not match features {x.shape}"
                )
            x = x + self.inject[s](g.transpose((2, 0, 1)))
        x = self.mid_res1(x, temb)
        x = self.mid_attn(x, c_vcr)
        x = self.mid_res2(x, temb)
        for s in reversed(range(4)):
            skip = skips[s]
            x = self.up[s](resize_nearest(x, skip.shape[1:]))
            x = T.concat([x, skip], axis=0)
            x = self.dec_res1[s](x, temb)
            x = self.dec_res2[s](x, temb)
            x = self.dec_attn[s](x, c_vcr)
        return self.head(T.silu(self.head_norm(x)))

    __call__ = forward

    def gma_extents(self, latent_hw):
        """Post-downsample extents where each scale's condition is injected."""
        h, w = latent_hw
        ext = []
        for _ in range(4):
            h, w = (h + 1) // 2, (w + 1) // 2
            ext.append((h, w))
        return ext
