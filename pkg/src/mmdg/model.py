"""Three-branch network: shared frozen backbone, per-edge U-Adapters, shared classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import AdapterParams, FusionTopology, adapter_name, fuse_block
from .autodiff import Tensor
from .uem import MODALITIES, UncertaintyMap, mc_token_variance, modality_uncertainty
from .vit import STREAM_MC, Backbone, BackboneConfig, BlockTaps, ForwardContext


@dataclass
class ForwardOutput:
    cls: dict[str, Tensor]
    maps: list[dict[str, UncertaintyMap]]
    uncertainty: dict[str, float]


class MMDGModel:
    def __init__(self, cfg: BackboneConfig | None = None, adapter_width: int | None = None,
                 r_e: float = 1.0, theta: float = 0.7, mc_samples: int = 4, seed: int = 0,
                 backbone: Backbone | None = None, topology: FusionTopology | None = None):
        self.cfg = cfg or BackboneConfig()
        self.backbone = backbone or Backbone(self.cfg, seed=seed)
        self.backbone.freeze()
        self.r_e = r_e
        self.theta = theta
        self.mc_samples = mc_samples
        self.topology = topology or FusionTopology()
        width = adapter_width or self.cfg.hidden_c // 2
        rng = np.random.default_rng([seed, 1])
        self.adapters: dict[tuple[int, str, str], AdapterParams] = {}
        for b in range(self.cfg.n_blocks):
            for src, dst in self.topology.edges():
                self.adapters[(b, src, dst)] = AdapterParams(self.cfg.hidden_c, width, rng,
                                                             prefix=adapter_name(b, src, dst))
        c = self.cfg.hidden_c
        self.cls_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, 2)), requires_grad=True,
                            name="classifier.w")
        self.cls_b = Tensor(np.zeros(2), requires_grad=True, name="classifier.b")

    # -- parameter registries -------------------------------------------------
    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for a in self.adapters.values():
            out.update(a.named())
        out["classifier.w"] = self.cls_w
        out["classifier.b"] = self.cls_b
        return out

    def all_parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.trainable_parameters()}

    # -- forward ----------------------------------------------------------------
    def forward(self, images: dict, ctx: ForwardContext | None = None) -> ForwardOutput:
        """``images[m]`` is B×H×W×3 for every modality in R, D, I."""
        ctx = ctx or ForwardContext()
        missing = [m for m in MODALITIES if m not in images]
        if missing:
            raise KeyError(f"modalities {missing} absent; impute them before the forward pass")
        stacked = np.stack([np.asarray(images[m], dtype=np.float64) for m in MODALITIES])
        x = self.backbone.patchify(stacked)
        maps_all = []
        rate = self.cfg.dropout_rate
        for b in range(self.cfg.n_blocks):
            taps = self.backbone.block_forward(x, b, ctx)
            umap = mc_token_variance(taps.attn, rate, self.mc_samples, ctx.seed,
                                     STREAM_MC, ctx.step, b, block_index=b)
            per_taps = {m: BlockTaps(*(getattr(taps, f)[k] for f in ("x1", "x2", "x3", "x4", "attn")))
                        for k, m in enumerate(MODALITIES)}
            maps = {m: umap[k] for k, m in enumerate(MODALITIES)}
            fused = fuse_block(per_taps, maps, self.adapters, b, self.r_e, self.theta, self.topology)
            x = ad.stack([fused[m] for m in MODALITIES])
            maps_all.append(maps)
        cls = {m: x[k, :, 0, :] for k, m in enumerate(MODALITIES)}
        unc = {m: modality_uncertainty(maps_all[-1][m], m).u for m in MODALITIES}
        return ForwardOutput(cls, maps_all, unc)
