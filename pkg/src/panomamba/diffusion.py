"""Latent diffusion machinery: schedule, q-sampling, the noise-prediction
loss, ancestral DDPM stepping with classifier-free guidance, and the fixed
surrogate latent codec.

Step indexing: step t in [1, T] uses table row t-1; alpha_bar(0) = 1 denotes
the clean state, which makes the final step's posterior variance vanish
without a special case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """Cumulative signal fraction at step t, with alpha_bar(0) = 1."""
        if not 0 <= t <= self.T:
            raise ContractError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t):
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])


@dataclass
class LatentState:
    z: Tensor  # [C, H, W]
    t: int


def make_schedule(T_steps, beta_start=1e-4, beta_end=0.02):
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T_steps < 1:
        raise ContractError(f"need T >= 1, got {T_steps}")
    betas = np.linspace(beta_start, beta_end, T_steps)
    alphas = 1.0 - betas
    return NoiseSchedule(T_steps, betas, alphas, np.cumprod(alphas))


def q_sample(z0, t, eps, sched):
    """Closed-form forward sample z_t = sqrt(ab) z0 + sqrt(1 - ab) eps."""
    if not 1 <= t <= sched.T:
        raise ContractError(f"step {t} outside [1, {sched.T}]")
    if z0.shape != eps.shape:
        raise ShapeError(f"q_sample shapes disagree: {z0.shape} vs {eps.shape}")
    ab = sched.alpha_bar(t)
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def eps_loss(model, z0, t, eps, conds, sched):
    """Mean squared error between injected and predicted noise."""
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = model(z_t, t, conds)
    diff = eps_hat - eps
    return (diff * diff).mean()


def cfg_combine(eps_cond, eps_uncond, scale):
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cfg shapes disagree: {eps_cond.shape} vs {eps_uncond.shape}")
    if scale == 1.0:
        return eps_cond
    return eps_uncond + (eps_cond - eps_uncond) * scale


def ddpm_step(model, z_t, t, conds, sched, noise, t_prev=None, uncond=None, cfg_scale=1.0):
    """One ancestral step z_t -> z_{t_prev} (default t_prev = t - 1).

    For strided schedules the effective alpha is alpha_bar(t)/alpha_bar(t_prev)
    which reduces to alpha_t for consecutive steps. Variance is the fixed
    posterior beta-tilde; it vanishes at t_prev = 0, so the final step adds
    no noise.
    """
    if not 1 <= t <= sched.T:
        raise ContractError(f"step {t} outside [1, {sched.T}]")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ContractError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    eps_hat = model(z_t, t, conds)
    if uncond is not None and cfg_scale != 1.0:
        eps_hat = cfg_combine(eps_hat, model(z_t, t, uncond), cfg_scale)
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    a_eff = ab_t / ab_p
    mu = (z_t - eps_hat * ((1.0 - a_eff) / np.sqrt(1.0 - ab_t))) / np.sqrt(a_eff)
    var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - a_eff)
    if var <= 0.0 or t_prev == 0:
        return mu
    return mu + noise * np.sqrt(var)


def strided_timesteps(T_steps, steps):
    """Evenly strided descending subset of [1, T], always containing T."""
    if not 1 <= steps <= T_steps:
        raise ContractError(f"need 1 <= steps <= T, got steps={steps}, T={T_steps}")
    taus = [int(round(j * T_steps / steps)) for j in range(1, steps + 1)]
    return list(reversed(taus))


def sample(model, conds, sched, steps, cfg_scale, rng, shape, uncond=None, callback=None):
    """Ancestral sampling loop from pure noise, deterministic given rng.

    The unconditional branch (for guidance scales other than 1) must be the
    same conditioning rebuilt with the empty text.
    """
    taus = strided_timesteps(sched.T, steps)
    z = Tensor(rng.normal(size=shape))
    with T.no_grad():
        for i, t in enumerate(taus):
            t_prev = taus[i + 1] if i + 1 < len(taus) else 0
            noise = Tensor(rng.normal(size=shape))
            z = ddpm_step(
                model, z, t, conds, sched, noise,
                t_prev=t_prev, uncond=uncond, cfg_scale=cfg_scale,
            )
            if callback is not None:
                callback(i, t_prev, z)
    return z


# --- fixed surrogate latent codec --------------------------------------------


class LatentCodec:
    """4x average-pool encoder / bilinear-upsample decoder with 1x1 channel
    maps fixed at construction (decoder map is the pseudo-inverse of the
    encoder map, so decode(encode(x)) is a pure low-pass of x).

    Stands in for the frozen autoencoder of the full-scale system; it is
    checkpointed but never optimized. Latents are shifted/scaled to roughly
    unit range.
    """

    FACTOR = 4
    LATENT_CHANNELS = 4

    def __init__(self):
        w_enc = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            ]
        )
        self.w_enc = Tensor(w_enc, requires_grad=True)  # [4, 3]
        self.w_dec = Tensor(np.linalg.pinv(w_enc), requires_grad=True)  # [3, 4]
        self.shift = 0.5
        self.scale = 2.0

    def named_parameters(self, prefix="codec"):
        yield f"{prefix}.w_enc", self.w_enc
        yield f"{prefix}.w_dec", self.w_dec

    def encode(self, rgb):
        """[H, W, 3] floats in [0, 1] -> latent [4, H/4, W/4]."""
        arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
        h, w, _ = arr.shape
        f = self.FACTOR
        if h % f or w % f:
            raise ShapeError(f"encode needs extents divisible by {f}, got {arr.shape}")
        pooled = arr.reshape(h // f, f, w // f, f, 3).mean(axis=(1, 3))
        z = np.einsum("hwc,lc->lhw", pooled, self.w_enc.data)
        return Tensor((z - self.shift) * self.scale)

    def decode(self, z):
        """Latent [4, h, w] -> [4h, 4w, 3] floats (not clipped)."""
        arr = z.data if isinstance(z, Tensor) else np.asarray(z)
        arr = arr / self.scale + self.shift
        rgb_small = np.einsum("lhw,cl->hwc", arr, self.w_dec.data)
        return Tensor(_upsample_bilinear(rgb_small, self.FACTOR))

    def latent_hw(self, size_hw):
        return (size_hw[0] // self.FACTOR, size_hw[1] // self.FACTOR)


def _upsample_bilinear(img, factor):
    """[h, w, C] -> [h*f, w*f, C], pixel centers aligned, edges clamped."""
    h, w, _ = img.shape
    oh, ow = h * factor, w * factor

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(int)
        a = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, a

    r0, r1, ar = axis_weights(oh, h)
    c0, c1, ac = axis_weights(ow, w)
    top = img[r0][:, c0] * (1 - ac)[None, :, None] + img[r0][:, c1] * ac[None, :, None]
    bot = img[r1][:, c0] * (1 - ac)[None, :, None] + img[r1][:, c1] * ac[None, :, None]
    return top * (1 - ar)[:, None, None] + bot * ar[:, None, None]


def downsample_mask(mask, factor=4):
    """Latent-cell validity: a cell is known only if all covered pixels are."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask extents must divide by {factor}, got {mask.shape}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return (blocks.min(axis=(1, 3)) >= 1.0).astype(np.float64)
