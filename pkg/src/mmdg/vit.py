"""Mini vision transformer backbone shared by the three modality branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .rng import keep_mask

# stream tags for counter-based masks
STREAM_PROPAGATE = 1
STREAM_MC = 2


@dataclass
class BackboneConfig:
    """Backbone geometry.

    The desk defaults below are what the tests train.  The reference scale is
    image 224, patch 16 (14x14 tokens + class token = 197), hidden 768, 12 heads,
    12 blocks; it is expressible via ``BackboneConfig.paper_scale()``.
    """

    image_size: int = 32
    patch_size: int = 8
    hidden_c: int = 32
    heads: int = 4
    n_blocks: int = 4
    mlp_ratio: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_c % self.heads:
            raise ConfigError(f"hidden_c {self.hidden_c} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def paper_scale(cls) -> "BackboneConfig":
        return cls(image_size=224, patch_size=16, hidden_c=768, heads=12, n_blocks=12, mlp_ratio=4)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2 + 1


@dataclass
class BlockTaps:
    """Intermediate outputs of one block.

    ``x1`` post-LN1, ``x2`` post-MHSA (after propagation dropout when
    training), ``x3`` post-LN2, ``x4`` post-MLP.  ``attn`` is the MHSA output
    before any dropout, which is what the uncertainty module samples.
    """

    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor
    attn: Tensor


@dataclass
class ForwardContext:
    train: bool = False
    seed: int = 0
    step: int = 0


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, p = cfg.hidden_c, cfg.patch_size
        h = c * cfg.mlp_ratio
        pdim = p * p * 3

        def normal(shape, fan_in):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        params = {
            "backbone.patch.w": normal((pdim, c), pdim),
            "backbone.patch.b": np.zeros(c),
            "backbone.cls": rng.normal(0.0, 1.0, size=(1, c)),
            "backbone.pos": rng.normal(0.0, 0.1, size=(1, cfg.n_tokens, c)),
        }
        for i in range(cfg.n_blocks):
            pre = f"backbone.block{i}"
            params.update({
                f"{pre}.ln1.gamma": np.ones(c), f"{pre}.ln1.beta": np.zeros(c),
                f"{pre}.attn.wqkv": normal((c, 3 * c), c), f"{pre}.attn.bqkv": np.zeros(3 * c),
                f"{pre}.attn.wo": normal((c, c), c), f"{pre}.attn.bo": np.zeros(c),
                f"{pre}.ln2.gamma": np.ones(c), f"{pre}.ln2.beta": np.zeros(c),
                f"{pre}.mlp.w1": normal((c, h), c), f"{pre}.mlp.b1": np.zeros(h),
                f"{pre}.mlp.w2": normal((h, c), h), f"{pre}.mlp.b2": np.zeros(c),
            })
        self.params: dict[str, Tensor] = {k: Tensor(v, name=k) for k, v in params.items()}
        self.frozen = False

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True
        self.frozen = False

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- forward ------------------------------------------------------------
    def patchify(self, images) -> Tensor:
        """``images`` (...×H×W×3) -> (...×L×C) with the class token at index 0."""
        cfg = self.cfg
        img = ad.as_tensor(images)
        *lead, hgt, wid, ch = img.shape
        if hgt != cfg.image_size or wid != cfg.image_size or ch != 3:
            raise ConfigError(f"expected images of {cfg.image_size}x{cfg.image_size}x3, got {img.shape}")
        g, p = cfg.grid, cfg.patch_size
        n = len(lead)
        x = img.reshape(*lead, g, p, g, p, 3)
        x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        x = x.reshape(*lead, g * g, p * p * 3)
        tokens = ad.linear(x, self["backbone.patch.w"], self["backbone.patch.b"])
        cls = self["backbone.cls"] + Tensor(np.zeros((*lead, 1, cfg.hidden_c)))
        return ad.concat([cls, tokens], axis=-2) + self["backbone.pos"].reshape(cfg.n_tokens, cfg.hidden_c)

    def mhsa(self, x: Tensor, block_index: int) -> Tensor:
        cfg = self.cfg
        pre = f"backbone.block{block_index}.attn"
        *lead, L, C = x.shape
        nh, d = cfg.heads, C // cfg.heads
        n = len(lead)
        qkv = ad.linear(x, self[f"{pre}.wqkv"], self[f"{pre}.bqkv"])
        qkv = qkv.reshape(*lead, L, 3, nh, d).transpose(n + 1, *range(n), n + 2, n, n + 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        w = ad.softmax_rows((q @ k.swap_last()) * (1.0 / np.sqrt(d)))
        o = (w @ v)
        o = o.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, L, C)
        return ad.linear(o, self[f"{pre}.wo"], self[f"{pre}.bo"])

    def mlp(self, x: Tensor, block_index: int) -> Tensor:
        pre = f"backbone.block{block_index}.mlp"
        hdn = ad.gelu(ad.linear(x, self[f"{pre}.w1"], self[f"{pre}.b1"]))
        return ad.linear(hdn, self[f"{pre}.w2"], self[f"{pre}.b2"])

    def block_forward(self, x: Tensor, block_index: int, ctx: ForwardContext | None = None) -> BlockTaps:
        if not 0 <= block_index < self.cfg.n_blocks:
            raise IndexError(f"block_index {block_index} outside [0, {self.cfg.n_blocks})")
        ctx = ctx or ForwardContext()
        pre = f"backbone.block{block_index}"
        x1 = ad.layer_norm(x, self[f"{pre}.ln1.gamma"], self[f"{pre}.ln1.beta"])
        attn = self.mhsa(x1, block_index)
        x2 = attn
        rate = self.cfg.dropout_rate
        if ctx.train and rate > 0:
            x2 = ad.dropout(attn, keep_mask(attn.shape, rate, ctx.seed, STREAM_PROPAGATE, ctx.step, block_index), rate)
        x3 = ad.layer_norm(x + x2, self[f"{pre}.ln2.gamma"], self[f"{pre}.ln2.beta"])
        x4 = self.mlp(x3, block_index)
        return BlockTaps(x1, x2, x3, x4, attn)

    def forward(self, images, ctx: ForwardContext | None = None) -> Tensor:
        """Adapter-free pass: each block emits ``x3 + x4``; returns the final tokens."""
        x = self.patchify(images)
        for i in range(self.cfg.n_blocks):
            taps = self.block_forward(x, i, ctx)
            x = taps.x3 + taps.x4
        return x
