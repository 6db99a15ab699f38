"""Desk-scale segmentation model: patch-embedding ViT with adapted Q/K/V,
a lightweight trainable mask decoder with a classification branch, semantic
inference, and mean-attention-distance analysis.

The backbone is frozen after seeded random init; only adapter parameters and
decoder parameters train. Tokens are kept on the patch grid (B, C, Hp, Wp)
so the channel-map adapters act directly on 4-D features. Frozen weights are
drawn from a stream independent of the adapter variant, so models differing
only in variant share the same backbone and decoder init at equal seed.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .adapters import ADAPTER_VARIANTS, Adapter, FrozenProjection, adapter_forward
from .autodiff import (
    Tensor,
    add,
    add_bias_channels,
    gelu,
    layer_norm_channels,
    linear_lastdim,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    tile_batch,
    transpose,
)
from .cell import NasCell
from .convolution import conv2d, project_channels
from .errors import ShapeError, ValueCheckError

_FROZEN_STREAM = 1
_DECODER_STREAM = 2
_ADAPTER_STREAM = 3
_MASK_STREAM = 4

_QKV = ("q", "k", "v")


@dataclass
class ModelConfig:
    """Geometry and adapter placement for the segmentation model."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_queries: int = 8
    num_classes: int = 1
    variant: str = "nas_pc_lora"
    adapter_layers: tuple[int, ...] = (1, 2, 3, 4)
    rank: int = 3
    channel_ratio: object = 2.0 / 3.0
    mlp_ratio: int = 2
    pixel_channels: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ValueCheckError(
                f"ModelConfig: image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueCheckError(
                f"ModelConfig: embed_dim {self.embed_dim} not divisible by "
                f"heads {self.heads}")
        if self.variant not in ADAPTER_VARIANTS:
            raise ValueCheckError(f"ModelConfig: unknown variant {self.variant!r}")
        layers = tuple(self.adapter_layers)
        if any(b < 1 or b > self.depth for b in layers):
            raise ValueCheckError(
                f"ModelConfig: adapter_layers {layers} outside 1..{self.depth}")
        if len(set(layers)) != len(layers):
            raise ValueCheckError("ModelConfig: duplicate adapter layers")
        if self.num_classes < 1:
            raise ValueCheckError("ModelConfig: num_classes must be >= 1")
        if self.num_queries < 1:
            raise ValueCheckError("ModelConfig: num_queries must be >= 1")
        if self.variant != "none" and not 1 <= self.rank < self.embed_dim / 2:
            raise ValueCheckError(
                f"ModelConfig: rank {self.rank} outside 1 <= r < "
                f"embed_dim/2 = {self.embed_dim / 2}")
        if not 0.0 <= self.channel_ratio <= 1.0:
            raise ValueCheckError(
                f"ModelConfig: channel_ratio {self.channel_ratio} outside [0, 1]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def _kaiming(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SegModel:
    """Frozen ViT backbone + adapters + trainable decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        c = cfg.embed_dim
        p = cfg.patch_size
        self._build_frozen(np.random.default_rng([self.seed, _FROZEN_STREAM]), c, p)
        self._build_decoder(np.random.default_rng([self.seed, _DECODER_STREAM]), c, p)
        self._build_adapters(c)

    # -- construction ------------------------------------------------------

    def _build_frozen(self, rng, c, p):
        cfg = self.cfg
        patch_in = 3 * p * p
        self.patch_embed = Tensor(_kaiming(rng, (c, patch_in), patch_in))
        self.pos_embed = Tensor(rng.normal(size=(cfg.num_tokens, c)) * 0.02)
        self.blocks = []
        for _ in range(cfg.depth):
            blk = {
                "ln1_gamma": Tensor(np.ones(c)),
                "ln1_beta": Tensor(np.zeros(c)),
                "wq": FrozenProjection(_kaiming(rng, (c, c), c)),
                "wk": FrozenProjection(_kaiming(rng, (c, c), c)),
                "wv": FrozenProjection(_kaiming(rng, (c, c), c)),
                "wo": Tensor(_kaiming(rng, (c, c), c)),
                "ln2_gamma": Tensor(np.ones(c)),
                "ln2_beta": Tensor(np.zeros(c)),
                "mlp_w1": Tensor(_kaiming(rng, (cfg.mlp_ratio * c, c), c)),
                "mlp_w2": Tensor(_kaiming(rng, (c, cfg.mlp_ratio * c), cfg.mlp_ratio * c)),
            }
            self.blocks.append(blk)
        prompt = rng.normal(size=c) * 0.02
        self.prompt = Tensor(np.tile(prompt, (cfg.num_queries, 1)))

    def _build_decoder(self, rng, c, p):
        cfg = self.cfg
        pix = cfg.pixel_channels
        expand_out = pix * p * p
        k1 = cfg.num_classes + 1
        t = lambda a: Tensor(a, requires_grad=True)
        self.decoder = {
            "expand_w": t(_kaiming(rng, (expand_out, c), c)),
            "expand_b": t(np.zeros(expand_out)),
            "conv1_w": t(_kaiming(rng, (pix, pix, 3, 3), pix * 9)),
            "conv1_b": t(np.zeros(pix)),
            "conv2_w": t(_kaiming(rng, (pix, pix, 3, 3), pix * 9)),
            "conv2_b": t(np.zeros(pix)),
            "query_embed": t(rng.normal(size=(cfg.num_queries, c)) * 0.02),
            "cls_w": t(_kaiming(rng, (k1, c), c)),
            "cls_b": t(np.zeros(k1)),
            "memb_w": t(_kaiming(rng, (pix, c), c)),
            "memb_b": t(np.zeros(pix)),
        }

    def _build_adapters(self, c):
        cfg = self.cfg
        self.adapters: dict[tuple[int, str], Adapter] = {}
        if cfg.variant == "none":
            return
        for layer in sorted(cfg.adapter_layers):
            for j, proj in enumerate(_QKV):
                rng = np.random.default_rng([self.seed, _ADAPTER_STREAM, layer, j])
                ad = Adapter(cfg.variant, c, c, cfg.rank,
                             ratio=float(cfg.channel_ratio), rng=rng,
                             mask_seed=[self.seed, _MASK_STREAM, layer, j])
                self.adapters[(layer, proj)] = ad

    # -- parameter bookkeeping ---------------------------------------------

    def frozen_params(self) -> dict[str, Tensor]:
        out = {"frozen/patch_embed": self.patch_embed,
               "frozen/pos_embed": self.pos_embed,
               "frozen/prompt": self.prompt}
        for i, blk in enumerate(self.blocks, start=1):
            for name, t in blk.items():
                w = t.weight if isinstance(t, FrozenProjection) else t
                out[f"frozen/block{i}/{name}"] = w
        return out

    def weight_params(self) -> dict[str, Tensor]:
        """The w-group: adapter projections, op kernels, decoder. No alpha."""
        out = {}
        for (layer, proj), ad in self.adapters.items():
            for name, t in ad.named_params().items():
                out[f"block{layer}/{proj}/{name}"] = t
        for name, t in self.decoder.items():
            out[f"decoder/{name}"] = t
        return out

    def alpha_params(self) -> dict[str, Tensor]:
        out = {}
        for (layer, proj), ad in self.adapters.items():
            if ad.cell is not None:
                out[f"block{layer}/{proj}/cell/alpha"] = ad.cell.alpha
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        out = self.weight_params()
        out.update(self.alpha_params())
        return out

    def named_masks(self) -> dict[str, np.ndarray]:
        out = {}
        for (layer, proj), ad in self.adapters.items():
            if ad.cell is not None:
                out[f"block{layer}/{proj}/mask"] = ad.cell.mask.as_array()
        return out

    def cells(self) -> list[NasCell]:
        return [ad.cell for ad in self.adapters.values() if ad.cell is not None]

    def num_trainable(self) -> int:
        return sum(t.size for t in self.trainable_params().values())

    # -- forward passes ------------------------------------------------------

    def _check_images(self, images: Tensor):
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ShapeError(f"images must be (B, 3, {s}, {s}), got {images.shape}")
        lo, hi = images.data.min(), images.data.max()
        if lo < 0.0 or hi > 1.0:
            raise ValueCheckError(f"images must lie in [0, 1], got [{lo}, {hi}]")

    def _proj_forward(self, layer: int, proj: str, x: Tensor,
                      frozen: FrozenProjection) -> Tensor:
        ad = self.adapters.get((layer, proj))
        if ad is None:
            return frozen.forward(x)
        return adapter_forward(ad, frozen, x)

    def encoder_forward(self, images: Tensor, keep_attention: bool = False):
        """(B, 3, S, S) in [0,1] -> feature (B, C, Hp, Wp) [+ attention maps]."""
        self._check_images(images)
        cfg = self.cfg
        b = images.shape[0]
        g, p, c = cfg.grid, cfg.patch_size, cfg.embed_dim

        x = reshape(images, (b, 3, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, g * g, 3 * p * p))
        tok = linear_lastdim(x, self.patch_embed)
        tok = add(tok, tile_batch(self.pos_embed, b))
        h = reshape(transpose(tok, (0, 2, 1)), (b, c, g, g))

        maps = [] if keep_attention else None
        for layer, blk in enumerate(self.blocks, start=1):
            h = self._block_forward(layer, blk, h, maps)
        return (h, maps) if keep_attention else h

    def _block_forward(self, layer: int, blk, h: Tensor, maps) -> Tensor:
        cfg = self.cfg
        b, c = h.shape[0], cfg.embed_dim
        g, nh, dh, n = cfg.grid, cfg.heads, cfg.head_dim, cfg.num_tokens

        normed = layer_norm_channels(h, blk["ln1_gamma"], blk["ln1_beta"])
        q = self._proj_forward(layer, "q", normed, blk["wq"])
        k = self._proj_forward(layer, "k", normed, blk["wk"])
        v = self._proj_forward(layer, "v", normed, blk["wv"])

        def heads_of(t):
            return reshape(t, (b, nh, dh, n))

        qh = transpose(heads_of(q), (0, 1, 3, 2))        # (B, h, N, dh)
        kh = heads_of(k)                                 # (B, h, dh, N)
        vh = transpose(heads_of(v), (0, 1, 3, 2))        # (B, h, N, dh)
        scores = scale(matmul(qh, kh), 1.0 / math.sqrt(dh))
        attn = softmax_lastdim(scores)                   # (B, h, N, N)
        if maps is not None:
            maps.append(attn.data.copy())
        ctx = matmul(attn, vh)                           # (B, h, N, dh)
        ctx = reshape(transpose(ctx, (0, 1, 3, 2)), (b, c, g, g))
        h = add(h, project_channels(ctx, blk["wo"]))

        normed = layer_norm_channels(h, blk["ln2_gamma"], blk["ln2_beta"])
        m = project_channels(normed, blk["mlp_w1"])
        m = gelu(m)
        m = project_channels(m, blk["mlp_w2"])
        return add(h, m)

    def decoder_forward(self, feature: Tensor):
        """Feature grid -> (mask_logits (B,M,S,S), class_logits (B,M,K+1))."""
        cfg = self.cfg
        d = self.decoder
        b = feature.shape[0]
        g, p, c, s = cfg.grid, cfg.patch_size, cfg.embed_dim, cfg.image_size
        pix, m_q = cfg.pixel_channels, cfg.num_queries
        if feature.shape != (b, c, g, g):
            raise ShapeError(f"decoder_forward: feature shape {feature.shape}")

        # pixel branch: 1x1 expand, pixel shuffle to full resolution, two convs
        px = project_channels(feature, d["expand_w"])
        px = add_bias_channels(px, d["expand_b"])
        px = reshape(px, (b, pix, p, p, g, g))
        px = transpose(px, (0, 1, 4, 2, 5, 3))
        px = reshape(px, (b, pix, s, s))
        px = gelu(px)
        px = add_bias_channels(conv2d(px, d["conv1_w"], padding=1), d["conv1_b"])
        px = gelu(px)
        px = add_bias_channels(conv2d(px, d["conv2_w"], padding=1), d["conv2_b"])

        # query branch: cross-attention over encoder tokens
        tokens = transpose(reshape(feature, (b, c, g * g)), (0, 2, 1))
        q = tile_batch(add(d["query_embed"], self.prompt), b)    # (B, M, C)
        att = softmax_lastdim(scale(matmul(q, transpose(tokens, (0, 2, 1))),
                                    1.0 / math.sqrt(c)))
        q = add(q, matmul(att, tokens))

        class_logits = linear_lastdim(q, d["cls_w"], d["cls_b"])
        memb = linear_lastdim(q, d["memb_w"], d["memb_b"])       # (B, M, pix)
        mask = matmul(memb, reshape(px, (b, pix, s * s)))
        mask_logits = reshape(mask, (b, m_q, s, s))
        return mask_logits, class_logits

    def forward(self, images: Tensor, keep_attention: bool = False):
        if keep_attention:
            feat, maps = self.encoder_forward(images, keep_attention=True)
            mask_logits, class_logits = self.decoder_forward(feat)
            return mask_logits, class_logits, maps
        feat = self.encoder_forward(images)
        return self.decoder_forward(feat)


def semantic_inference(mask_logits, class_logits, num_classes: int):
    """Combine per-query masks and class predictions into a dense labeling.

    scores[b, c-1] = sum_m softmax(class_logits)[b, m, c-1] * sigmoid(mask)[b, m]
    for real classes c = 1..K; the no-object column is excluded. A pixel is
    labeled background (0) when every real-class score stays below 0.5, else
    1 + argmax over real classes (ties to the lowest class index).
    """
    ml = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
    cl = class_logits.data if isinstance(class_logits, Tensor) else np.asarray(class_logits)
    k = num_classes
    if cl.shape[-1] != k + 1 or ml.ndim != 4 or cl.ndim != 3:
        raise ShapeError(f"semantic_inference: shapes {ml.shape} / {cl.shape} "
                         f"do not fit K={k}")
    ex = np.exp(cl - cl.max(axis=-1, keepdims=True))
    probs = ex / ex.sum(axis=-1, keepdims=True)
    sig = 1.0 / (1.0 + np.exp(-ml))
    scores = np.einsum("bmc,bmhw->bchw", probs[:, :, :k], sig, optimize=True)
    best = scores.argmax(axis=1)
    labels = np.where(scores.max(axis=1) >= 0.5, best + 1, 0)
    return scores, labels


_DIST_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _grid_distances(gh: int, gw: int) -> np.ndarray:
    key = (gh, gw)
    if key not in _DIST_CACHE:
        ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        coords = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(float)
        diff = coords[:, None, :] - coords[None, :, :]
        _DIST_CACHE[key] = np.sqrt((diff ** 2).sum(axis=-1))
    return _DIST_CACHE[key]


def mean_attention_distance(attn: np.ndarray, grid_h: int, grid_w: int) -> float:
    """Attention-weighted mean Euclidean key distance, in patch units.

    attn: (..., N, N) row-stochastic maps over an (grid_h x grid_w) token
    grid; the result averages over queries and all leading axes.
    """
    attn = np.asarray(attn)
    n = grid_h * grid_w
    if attn.shape[-2:] != (n, n):
        raise ShapeError(f"mean_attention_distance: maps {attn.shape} do not "
                         f"cover a {grid_h}x{grid_w} grid")
    if attn.min() < -1e-12 or np.abs(attn.sum(axis=-1) - 1.0).max() > 1e-8:
        raise ValueCheckError("mean_attention_distance: rows must be "
                              "nonnegative and sum to 1")
    d = _grid_distances(grid_h, grid_w)
    return float(np.einsum("...qk,qk->...q", attn, d).mean())


def params_checksum(params: dict[str, Tensor]) -> str:
    """Order-independent sha256 over named tensors (name, shape, raw bytes)."""
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()
