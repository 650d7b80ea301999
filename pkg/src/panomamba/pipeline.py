"""End-to-end orchestration: model bundle, synthetic-corpus training, sphere
view planning, and the iterative masked out-painting loop.

Per-step randomness is derived from (run seed, step index) through named
splits, so an interrupted-and-resumed run reproduces the uninterrupted one
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as diff
from . import tensor as T
from .conditioning import GMA, VCR, ConditionBundle, ToyImageEncoder, ToyTextEncoder, build_clip_condition
from .nn import AdamW, load_checkpoint, save_checkpoint
from .pano import (
    EquirectImage,
    NFoVView,
    ViewCoords,
    blank_panorama,
    composite_nfov,
    equirect_to_cubemap,
    extract_nfov,
    frustum_mask,
)
from .rng import Rng
from .synth import random_scene_spec, synth_panorama
from .tensor import ContractError, Tensor
from .text import Tokenizer, text_dropout
from .unet import UNet


@dataclass
class TrainingTriplet:
    """Ground-truth panorama with a partial known-mask, target view, prompt."""

    panorama: EquirectImage  # [H, W, 4]: full rgb + known mask
    coords: ViewCoords
    text: str

    def __post_init__(self):
        view = extract_nfov(self.panorama, self.coords, 8)
        if view.mask.sum() == 0:
            raise ContractError("target view contains no known pixel")


@dataclass
class ViewPlan:
    views: list
    overlap_fraction: float


# --- model bundle -------------------------------------------------------------


class ModelBundle:
    """Everything the pipeline trains or samples with, checkpointable as one
    flat container. The latent codec is fixed at construction; the two toy
    encoders train only during warm-up."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.tokenizer = Tokenizer.default()
        rng = np.random.default_rng(cfg.seed)
        d, n = cfg.d_model, cfg.d_state
        self.text_enc = ToyTextEncoder(len(self.tokenizer), d, n, rng, n_blocks=cfg.text_blocks)
        self.image_enc = ToyImageEncoder(4, d, n, rng, n_blocks=cfg.image_blocks)
        self.vcr = VCR(d, n, rng, n_blocks=cfg.vcr_blocks)
        self.unet = UNet(rng, widths=cfg.unet_widths, d_ctx=d, d_key=cfg.d_key, d_time=cfg.d_time)
        self.gma = GMA(d, n, rng, out_widths=self.unet.down_widths,
                       active_scales=cfg.gma_active_scales)
        self.codec = diff.LatentCodec()
        self.sched = diff.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    def named_parameters(self):
        yield from self.text_enc.named_parameters("text_enc")
        yield from self.image_enc.named_parameters("image_enc")
        yield from self.vcr.named_parameters("vcr")
        yield from self.gma.named_parameters("gma")
        yield from self.unet.named_parameters("unet")
        yield from self.codec.named_parameters("codec")

    def trainable_named_parameters(self, include_encoders):
        groups = [("vcr", self.vcr), ("gma", self.gma), ("unet", self.unet)]
        if include_encoders:
            groups = [("text_enc", self.text_enc), ("image_enc", self.image_enc)] + groups
        for prefix, mod in groups:
            yield from mod.named_parameters(prefix)

    def frozen_named_parameters(self, include_encoders):
        trainable = {n for n, _ in self.trainable_named_parameters(include_encoders)}
        return [(n, p) for n, p in self.named_parameters() if n not in trainable]

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def save(self, path, extra=None):
        arrays = dict(self.named_parameters())
        arrays = {k: v.data for k, v in arrays.items()}
        if extra:
            arrays.update(extra)
        save_checkpoint(path, arrays)

    def load(self, path):
        blob = load_checkpoint(path)
        for name, p in self.named_parameters():
            if name not in blob:
                raise ContractError(f"checkpoint missing {name!r}")
            p.data[...] = blob[name]
        return blob

    # -- conditioning -----------------------------------------------------

    def build_conditions(self, pano, coords, text_str, train_encoders=False):
        """Conditions from an incomplete panorama (rgb zeroed where unknown)."""
        cfg = self.cfg
        masked = pano.np.copy()
        masked[:, :, :3] *= masked[:, :, 3:4]
        masked_img = EquirectImage(Tensor(masked))
        cube = equirect_to_cubemap(masked_img, cfg.view_size)
        local = extract_nfov(masked_img, coords, cfg.view_size)
        ids = self.tokenizer.encode(text_str)
        par = cfg.scan_parallel
        if train_encoders:
            c_clip = build_clip_condition(self.text_enc, self.image_enc, cube, ids, parallel=par)
        else:
            with T.no_grad():
                c_clip = build_clip_condition(self.text_enc, self.image_enc, cube, ids, parallel=par)
                c_clip = c_clip.detach()
        c_vcr = self.vcr(c_clip, parallel=par)
        c_gma = self.gma(local, cube, parallel=par)
        return ConditionBundle(c_vcr=c_vcr, c_gma=c_gma)

    def denoise_fn(self):
        return lambda z, t, conds: self.unet(z, t, conds)


def make_models(cfg):
    return ModelBundle(cfg)


# --- dataset -------------------------------------------------------------------


class SynthDataset:
    """Deterministic list of (panorama, caption) pairs for a config."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.items = []
        for i in range(cfg.dataset_size):
            spec = random_scene_spec(i, base_seed=cfg.seed)
            img, cap = synth_panorama(spec, cfg.pano_w, cfg.pano_h)
            self.items.append((img, cap))

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def make_triplet(dataset, cfg, rng):
    """Sample a scene, a known seed frustum, and an overlapping target view."""
    pano, caption = dataset[rng.choice(len(dataset))]
    seed_lon = rng.uniform(-180.0, 180.0)
    seed_lat = rng.uniform(-25.0, 25.0)
    seed_coords = ViewCoords(seed_lon, seed_lat, cfg.view_fov)
    dlon = rng.uniform(20.0, 60.0) * (1.0 if rng.random() < 0.5 else -1.0)
    dlat = rng.uniform(-15.0, 15.0)
    target = ViewCoords(seed_lon + dlon, float(np.clip(seed_lat + dlat, -30.0, 30.0)), cfg.view_fov)
    known = frustum_mask(seed_coords, cfg.pano_w, cfg.pano_h)
    arr = pano.np.copy()
    arr[:, :, 3] = known.astype(np.float64)
    return TrainingTriplet(EquirectImage(Tensor(arr)), target, caption)


# --- training -------------------------------------------------------------------


def train_step(models, opt, triplet, rng, warmup):
    """One optimization step; returns the scalar loss value.

    Ground-truth view content comes from the full panorama; conditioning sees
    only the known region. Encoders ride along solely during warm-up.
    """
    cfg = models.cfg
    sched = models.sched
    text = text_dropout(triplet.text, rng.split("drop"), cfg.text_drop_prob)
    view = extract_nfov(triplet.panorama, triplet.coords, cfg.view_size)
    z0 = models.codec.encode(view.rgb)
    t = int(rng.split("t").integers(1, sched.T + 1))
    eps = Tensor(rng.split("eps").normal(size=z0.shape))
    models.zero_grad()
    with T.Tape():
        conds = models.build_conditions(triplet.panorama, triplet.coords, text,
                                        train_encoders=warmup)
        loss = diff.eps_loss(models.denoise_fn(), z0, t, eps, conds, sched)
        T.backward(loss)
    opt.step()
    return float(loss.data)


def train_loop(models, dataset, steps, start_step=0, opt=None, on_step=None):
    """Run `steps` optimization steps from `start_step`; returns (opt, losses)."""
    cfg = models.cfg
    root = Rng(cfg.seed)
    if opt is None:
        opt = AdamW(models.trainable_named_parameters(include_encoders=True),
                    lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    for k in range(steps):
        step = start_step + k + 1
        srng = root.split(f"step{step}")
        triplet = make_triplet(dataset, cfg, srng.split("data"))
        warmup = step <= cfg.warmup_steps
        loss = train_step(models, opt, triplet, srng, warmup)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return opt, losses


# --- view planning ---------------------------------------------------------------


def plan_views(start, fov, n_yaw, include_caps=True):
    """Ring of yaw views from the start outward, then enlarged polar caps.

    Consecutive ring views overlap by at least 25% of their width; cap views
    widen their fov so they overlap the ring's coverage valleys.
    """
    spacing = 360.0 / n_yaw
    if spacing > 0.75 * fov:
        raise ContractError(
            f"coverage too sparse: 360/{n_yaw} = {spacing:.1f} deg spacing needs fov >= {spacing / 0.75:.1f}"
        )
    cap_fov = min(120.0, fov + 25.0)
    if include_caps:
        ring_valley = np.degrees(np.arctan(np.tan(np.radians(fov / 2.0)) * np.cos(np.radians(spacing / 2.0))))
        cap_floor = 90.0 - cap_fov / 2.0
        if cap_floor >= ring_valley:
            raise ContractError(
                f"ring (valley {ring_valley:.1f} deg) and caps (floor {cap_floor:.1f} deg) leave a gap"
            )
    offsets = [0.0]
    k = 1
    while len(offsets) < n_yaw:
        offsets.append(k * spacing)
        if len(offsets) < n_yaw:
            offsets.append(-k * spacing)
        k += 1
    views = [start]
    for off in offsets:
        vc = ViewCoords(start.lon + off, 0.0, fov)
        if vc == views[0]:
            continue
        views.append(vc)
    if include_caps:
        views.append(ViewCoords(start.lon, 90.0, cap_fov))
        views.append(ViewCoords(start.lon, -90.0, cap_fov))
    return ViewPlan(views=views, overlap_fraction=1.0 - spacing / fov)


# --- generation -------------------------------------------------------------------


def outpaint_step(models, pano, coords, text_str, rng, cfg_scale=None, sample_steps=None,
                  dump=None):
    """Out-paint one view: masked-latent ancestral sampling, then composite.

    After every denoising step the known latent cells are replaced by a fresh
    forward sample of the known content at the matching noise level; decoded
    unknown pixels are pasted around the original known pixels before the
    view is scattered back, so known content only suffers resampling loss.

    dump, when given, is called as dump(step_index, t, decoded_rgb) every few
    steps so callers can write trajectory snapshots.
    """
    cfg = models.cfg
    sched = models.sched
    cfg_scale = cfg.cfg_scale if cfg_scale is None else cfg_scale
    sample_steps = cfg.sample_steps if sample_steps is None else sample_steps

    view = extract_nfov(pano, coords, cfg.view_size)
    px_mask = view.mask
    if px_mask.sum() == 0:
        raise ContractError("view frustum lies entirely in unknown territory")
    known_rgb = view.rgb * px_mask[:, :, None]
    z_known = models.codec.encode(known_rgb)
    lat_mask = diff.downsample_mask(px_mask, models.codec.FACTOR)[None]  # [1, h, w]

    with T.no_grad():
        conds = models.build_conditions(pano, coords, text_str)
        uncond = None
        if cfg_scale != 1.0 and text_str:
            uncond = models.build_conditions(pano, coords, "")
        model = models.denoise_fn()
        taus = diff.strided_timesteps(sched.T, sample_steps)
        z = Tensor(rng.split("zT").normal(size=z_known.shape))
        for i, t in enumerate(taus):
            t_prev = taus[i + 1] if i + 1 < len(taus) else 0
            noise = Tensor(rng.split(f"step{t}").normal(size=z.shape))
            z = diff.ddpm_step(model, z, t, conds, sched, noise,
                               t_prev=t_prev, uncond=uncond, cfg_scale=cfg_scale)
            if t_prev >= 1:
                renoise = Tensor(rng.split(f"known{t_prev}").normal(size=z.shape))
                z_ref = diff.q_sample(z_known, t_prev, renoise, sched)
            else:
                z_ref = z_known
            z = Tensor(lat_mask * z_ref.data + (1.0 - lat_mask) * z.data)
            if dump is not None:
                dump(i, t_prev, np.clip(models.codec.decode(z).data, 0.0, 1.0))
        decoded = np.clip(models.codec.decode(z).data, 0.0, 1.0)

    out_rgb = px_mask[:, :, None] * view.rgb + (1.0 - px_mask[:, :, None]) * decoded
    out_view = NFoVView(coords, Tensor(np.concatenate([out_rgb, np.ones(px_mask.shape + (1,))], axis=2)))
    known_before = pano.mask == 1.0
    out = composite_nfov(pano, out_view)
    # strict known-pixel protection: only previously-unknown pixels may change,
    # so repeated view overlap never compounds resampling loss
    out.np[known_before, :3] = pano.np[known_before, :3]
    return out


def generate_panorama(models, seed_view, text_str, rng, log=None, dump_every=0, dump_dir=None):
    """Grow a full panorama from an NFoV seed and/or a text prompt.

    dump_every > 0 writes every k-th denoised view snapshot per out-paint
    step into dump_dir as PNGs (trajectory inspection).
    """
    cfg = models.cfg
    if seed_view is None and not text_str:
        raise ContractError("need a seed view, a text prompt, or both")
    pano = blank_panorama(cfg.pano_w, cfg.pano_h)
    if seed_view is not None:
        arr = seed_view.np
        if arr.shape[2] < 4:
            arr = np.concatenate([arr[:, :, :3], np.ones(arr.shape[:2] + (1,))], axis=2)
        start = seed_view.coords
        pano = composite_nfov(pano, NFoVView(start, Tensor(arr)))
    else:
        start = ViewCoords(0.0, 0.0, cfg.view_fov)
        with T.no_grad():
            conds = models.build_conditions(pano, start, text_str)
            uncond = models.build_conditions(pano, start, "")
            hw = models.codec.latent_hw((cfg.view_size, cfg.view_size))
            z = diff.sample(models.denoise_fn(), conds, models.sched, cfg.sample_steps,
                            cfg.cfg_scale, rng.split("init"), (models.codec.LATENT_CHANNELS,) + hw,
                            uncond=uncond)
            rgb = np.clip(models.codec.decode(z).data, 0.0, 1.0)
        view = NFoVView(start, Tensor(np.concatenate([rgb, np.ones(rgb.shape[:2] + (1,))], axis=2)))
        pano = composite_nfov(pano, view)
    plan = plan_views(start, cfg.view_fov, cfg.n_yaw, include_caps=True)
    for i, vc in enumerate(plan.views):
        dump = None
        if dump_every and dump_dir is not None:
            from . import images

            def dump(step, t, rgb, _i=i):
                if step % dump_every == 0:
                    images.write_png(f"{dump_dir}/view{_i:02d}_t{t:04d}.png", rgb)

        pano = outpaint_step(models, pano, vc, text_str or "", rng.split(f"view{i}"), dump=dump)
        if log is not None:
            log.append(f"view {i}: lon={vc.lon:.1f} lat={vc.lat:.1f} fov={vc.fov:.1f}")
    if np.any(pano.mask == 0):
        raise ContractError("view plan left unknown pixels uncovered")
    return pano
