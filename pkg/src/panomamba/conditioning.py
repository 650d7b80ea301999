"""Context builders for the denoiser: the gated visual-textual refiner (VCR)
and the four-scale global-local adapter (GMA), plus the small stand-in
encoders that replace the frozen contrastive model at desk scale.

The refiner consumes an 83-row context: 6 rows of per-face image features
(face order F, L, B, R, U, D) followed by 77 rows of text features. The
adapter consumes the local view plus the six cube faces, each augmented with
per-pixel ray directions and a validity-mask channel, and emits one spatial
condition per scale at 1/8, 1/16, 1/32 and 1/64 of the view extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, ModuleList
from .pano import FACE_ORDER, FACE_ORDER_CONTEXT, coord_channels
from .ssm import Mamba1D, Mamba2D, mamba_chain
from .tensor import ContractError, ShapeError, Tensor
from .text import MAX_LEN

CONTEXT_ROWS = 6 + MAX_LEN  # 83

# cube faces traverse the chain in this order; the local view always comes last
CHAIN_FACE_ORDER = FACE_ORDER  # F, R, B, L, U, D

GMA_SCALES = (1, 2, 3, 4)
GMA_PATCH = {1: 8, 2: 16, 3: 32, 4: 64}
# patches are mean-pooled to 8x8 before projection so stem size stays flat
GMA_STEM_PATCH = 8


@dataclass
class ConditionBundle:
    c_vcr: Tensor  # [83, d]
    c_gma: list  # four spatial tensors, extents view/8 .. view/64


def patchify(img, patch):
    """[S, S, C] -> [S/p, S/p, p*p*C] row-major patches."""
    s, s2, c = img.shape
    if s != s2 or s % patch:
        raise ShapeError(f"patchify needs square extent divisible by {patch}, got {img.shape}")
    n = s // patch
    x = img.reshape(n, patch, n, patch, c)
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return x.reshape(n, n, patch * patch * c)


class ToyTextEncoder(Module):
    """Token embedding plus two 1D blocks; output is always [77, d]."""

    def __init__(self, vocab_size, d_model, d_state, rng, n_blocks=2):
        super().__init__()
        self.d_model = d_model
        self.embedding = self._param("embedding", rng.normal(size=(vocab_size, d_model)) * 0.02)
        self.blocks = self._child(
            "blocks", ModuleList([Mamba1D(d_model, d_state, rng) for _ in range(n_blocks)])
        )

    def forward(self, token_ids, parallel=True):
        x = T.gather_rows(self.embedding, token_ids)
        for blk in self.blocks:
            x = blk(x, parallel=parallel)
        return x

    __call__ = forward


class ToyImageEncoder(Module):
    """8x8 patch embedding, two 2D blocks, mean pool to one d-vector."""

    PATCH = 8

    def __init__(self, in_channels, d_model, d_state, rng, n_blocks=2):
        super().__init__()
        self.in_channels = in_channels
        self.d_model = d_model
        self.patch_proj = self._child(
            "patch_proj", Linear(self.PATCH * self.PATCH * in_channels, d_model, rng)
        )
        self.blocks = self._child(
            "blocks", ModuleList([Mamba2D(d_model, d_state, rng) for _ in range(n_blocks)])
        )

    def forward(self, img, parallel=True):
        if img.shape[2] != self.in_channels:
            raise ShapeError(f"encoder expects {self.in_channels} channels, got {img.shape}")
        x = self.patch_proj(patchify(img, self.PATCH).reshape(-1, self.PATCH**2 * self.in_channels))
        n = int(np.sqrt(x.shape[0]))
        x = x.reshape(n, n, self.d_model)
        for blk in self.blocks:
            x = blk(x, parallel=parallel)
        return x.reshape(n * n, self.d_model).mean(axes=0)

    __call__ = forward


def _face_with_mask(cube, name):
    """Face pixels as [S, S, 4]; 4th channel is validity (1 when absent)."""
    arr = cube.face(name)
    if arr.shape[2] >= 4:
        return arr[:, :, :4]
    return np.concatenate([arr[:, :, :3], np.ones(arr.shape[:2] + (1,))], axis=2)


def build_clip_condition(text_encoder, image_encoder, cube, token_ids, parallel=True):
    """Concatenate omni-image rows (F, L, B, R, U, D) with padded text rows."""
    rows = []
    for name in FACE_ORDER_CONTEXT:
        feat = image_encoder(Tensor(_face_with_mask(cube, name)), parallel=parallel)
        rows.append(feat.reshape(1, -1))
    c_omni = T.concat(rows, axis=0)
    c_text = text_encoder(token_ids, parallel=parallel)
    c_clip = T.concat([c_omni, c_text], axis=0)
    if c_clip.shape[0] != CONTEXT_ROWS:
        raise ShapeError(f"context must have {CONTEXT_ROWS} rows, got {c_clip.shape}")
    return c_clip


class VCR(Module):
    """Gated context refiner: c_vcr = alpha * c' + (1 - alpha) * c_clip.

    alpha is a per-row sigmoid gate; the stack adds learnable positional
    embeddings before eight 1D blocks.
    """

    def __init__(self, d_model, d_state, rng, n_blocks=8):
        super().__init__()
        self.d_model = d_model
        self.pos_emb = self._param("pos_emb", rng.normal(size=(CONTEXT_ROWS, d_model)) * 0.02)
        self.blocks = self._child(
            "blocks", ModuleList([Mamba1D(d_model, d_state, rng) for _ in range(n_blocks)])
        )
        self.h1 = self._child("h1", Linear(d_model, d_model, rng))
        self.h2 = self._child("h2", Linear(d_model, 1, rng))

    def forward(self, c_clip, parallel=True, return_parts=False):
        if c_clip.shape != (CONTEXT_ROWS, self.d_model):
            raise ShapeError(f"expected [{CONTEXT_ROWS}, {self.d_model}] context, got {c_clip.shape}")
        z = c_clip + self.pos_emb
        for blk in self.blocks:
            z = blk(z, parallel=parallel)
        c_prime = self.h1(z)
        alpha = T.sigmoid(self.h2(z))  # [83, 1], broadcast over d
        c_vcr = alpha * c_prime + (1.0 - alpha) * c_clip
        if return_parts:
            return c_vcr, c_prime, alpha
        return c_vcr

    __call__ = forward


class GMA(Module):
    """Global-local adapter over the local view plus the six cube faces.

    Per scale: strided patch stem, one 2D block shared across the seven
    images, then (at active scales) a 1D block chained over the flattened
    image sequences by state passage with the local view last. Inactive
    scales run the same 1D block on the local sequence alone, so toggling a
    scale changes its output only through the carried state.
    """

    IN_CHANNELS = 7  # rgb + ray direction + validity

    def __init__(self, d_model, d_state, rng, out_widths, active_scales=(2, 3, 4)):
        super().__init__()
        if len(out_widths) != len(GMA_SCALES):
            raise ContractError(f"need {len(GMA_SCALES)} output widths, got {out_widths}")
        self.d_model = d_model
        self.active_scales = tuple(sorted(active_scales))
        if any(s not in GMA_SCALES for s in self.active_scales):
            raise ContractError(f"active scales must be within {GMA_SCALES}, got {active_scales}")
        self.stems = self._child(
            "stems",
            ModuleList(
                [
                    Linear(GMA_STEM_PATCH**2 * self.IN_CHANNELS, d_model, rng)
                    for _ in GMA_SCALES
                ]
            ),
        )
        self.shared2d = self._child(
            "shared2d", ModuleList([Mamba2D(d_model, d_state, rng) for _ in GMA_SCALES])
        )
        self.global_local = self._child(
            "global_local", ModuleList([Mamba1D(d_model, d_state, rng) for _ in GMA_SCALES])
        )
        self.out_projs = self._child(
            "out_projs", ModuleList([Linear(d_model, w, rng) for w in out_widths])
        )

    def _augment(self, rgb_mask, coords_or_face):
        size = rgb_mask.shape[0]
        coords = coord_channels(coords_or_face, size).data
        return Tensor(np.concatenate([rgb_mask[:, :, :3], coords, rgb_mask[:, :, 3:4]], axis=2))

    def forward(self, local_view, cube, masks=None, parallel=True):
        size = local_view.size
        if cube.face_size != size:
            raise ShapeError(f"local view extent {size} vs cube faces {cube.face_size}")
        if size % 64:
            raise ShapeError(f"view extent must divide by 64, got {size}")

        local_rgbm = np.concatenate(
            [local_view.rgb, (masks["local"] if masks else local_view.mask)[:, :, None]], axis=2
        )
        images = [
            (self._augment(local_rgbm, local_view.coords), None)
        ]
        face_images = []
        for name in CHAIN_FACE_ORDER:
            fm = _face_with_mask(cube, name)
            if masks:
                fm = np.concatenate([fm[:, :, :3], masks[name][:, :, None]], axis=2)
            face_images.append(self._augment(fm, name))

        outputs = []
        for idx, s in enumerate(GMA_SCALES):
            patch = GMA_PATCH[s]
            pool = patch // GMA_STEM_PATCH
            n = size // patch
            stem = self.stems[idx]
            block2d = self.shared2d[idx]

            def embed(img):
                x = img
                if pool > 1:
                    sz, _, c = x.shape
                    x = x.reshape(sz // pool, pool, sz // pool, pool, c).mean(axes=(1, 3))
                tok = stem(patchify(x, GMA_STEM_PATCH).reshape(n * n, -1))
                return block2d(tok.reshape(n, n, self.d_model), parallel=parallel)

            local_feat = embed(images[0][0])
            if s in self.active_scales:
                segs = [embed(f).reshape(n * n, self.d_model) for f in face_images]
                segs.append(local_feat.reshape(n * n, self.d_model))
            else:
                segs = [local_feat.reshape(n * n, self.d_model)]
            outs, _ = mamba_chain(self.global_local[idx], segs, parallel=parallel)
            fused = self.out_projs[idx](outs[-1].reshape(n * n, self.d_model))
            outputs.append(fused.reshape(n, n, fused.shape[1]))
        return outputs

    __call__ = forward
