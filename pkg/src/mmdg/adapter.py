"""Uncertainty-guided cross-adapters and the three-branch fusion wiring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .uem import UncertaintyMap, gate

# (source, destination): query tokens come from the source branch, keys and
# values from the destination branch, and the result is added to the destination.
EDGES = (("D", "R"), ("I", "R"), ("R", "D"), ("R", "I"))

PARAM_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "cdc", "pw", "pwb", "wu", "bu")


@dataclass
class FusionTopology:
    """Per destination modality, the source modalities whose adapters feed it."""

    sources: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: {"R": ("D", "I"), "D": ("R",), "I": ("R",)})

    def __post_init__(self):
        for dst, srcs in self.sources.items():
            if dst in ("D", "I") and ({"D", "I"} - {dst}) & set(srcs):
                raise ConfigError("depth and infrared branches must not exchange features directly")

    def edges(self) -> list[tuple[str, str]]:
        return [(s, d) for d, srcs in self.sources.items() for s in srcs]


def adapter_name(block: int, src: str, dst: str) -> str:
    return f"adapter.block{block}.edge{src}->{dst}"


class AdapterParams:
    """Trainable tensors of one U-Adapter (C -> C_a bottleneck -> C)."""

    def __init__(self, hidden_c: int, width: int, rng: np.random.Generator | None = None,
                 prefix: str = "adapter"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, a = hidden_c, width

        def normal(shape, fan_in):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        init = {
            "wq": normal((c, a), c), "bq": np.zeros(a),
            "wk": normal((c, a), c), "bk": np.zeros(a),
            "wv": normal((c, a), c), "bv": np.zeros(a),
            "cdc": normal((a, a, 3, 3), 9 * a),
            "pw": normal((a, a), a), "pwb": np.zeros(a),
            # zero up-projection: the adapter starts as an exact no-op
            "wu": np.zeros((a, c)), "bu": np.zeros(c),
        }
        self.prefix = prefix
        self.tensors = {k: Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in init.items()}

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    @property
    def width(self) -> int:
        return self.tensors["wq"].shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": t for k, t in self.tensors.items()}


def gated_attention(u_src, x_src3: Tensor, x_dst3: Tensor, params: AdapterParams,
                    r_e: float) -> tuple[Tensor, Tensor]:
    """Cross attention with query rows damped by the source-token gate.

    Returns ``(weights, output)`` with weights B×L×L and output B×L×C_a.
    """
    q = ad.linear(x_src3, params["wq"], params["bq"])
    k = ad.linear(x_dst3, params["wk"], params["bk"])
    v = ad.linear(x_dst3, params["wv"], params["bv"])
    logits = q @ k.swap_last()
    u = u_src.values if isinstance(u_src, UncertaintyMap) else np.asarray(u_src, dtype=np.float64)
    if u.shape != (*x_src3.shape[:-1], 1):
        raise ad.DimensionError(f"uncertainty shape {u.shape} does not match tokens {x_src3.shape}")
    logits = logits * Tensor(gate(u, r_e))
    weights = ad.softmax_rows(logits * (1.0 / np.sqrt(params.width)))
    return weights, weights @ v


def adapter_forward(u_src, x_src3: Tensor, x_dst3: Tensor, params: AdapterParams,
                    r_e: float = 1.0, theta: float = 0.7) -> Tensor:
    """Gated cross attention -> CDC over the patch grid -> pointwise conv + GELU -> up-projection.

    The class token skips both convolutions.
    """
    if x_src3.shape != x_dst3.shape:
        raise ad.DimensionError(f"source {x_src3.shape} and destination {x_dst3.shape} tokens differ")
    b, L, _ = x_src3.shape
    side = int(round(np.sqrt(L - 1)))
    if side * side != L - 1:
        raise ConfigError(f"{L - 1} patch tokens do not form a square grid")
    _, out = gated_attention(u_src, x_src3, x_dst3, params, r_e)
    if side > 0:
        a = params.width
        cls, patches = out[:, :1, :], out[:, 1:, :]
        grid = patches.swap_last().reshape(b, a, side, side)
        grid = ad.cdc_conv(grid, params["cdc"], theta)
        patches = grid.reshape(b, a, side * side).swap_last()
        patches = ad.gelu(ad.linear(patches, params["pw"], params["pwb"]))
        out = ad.concat([cls, patches], axis=1)
    return ad.linear(out, params["wu"], params["bu"])


def fuse_block(taps: dict, maps: dict, adapters: dict, block: int, r_e: float = 1.0,
               theta: float = 0.7, topology: FusionTopology | None = None) -> dict[str, Tensor]:
    """Combine one block's taps across branches.

    ``taps[m]`` exposes ``x3``/``x4``; ``maps[m]`` is the modality's uncertainty
    map for this block; ``adapters[(block, src, dst)]`` holds parameters.
    Each branch emits ``sum of incoming adapters + x3 + x4``.
    """
    topology = topology or FusionTopology()
    out = {}
    for dst, srcs in topology.sources.items():
        if dst not in taps:
            raise KeyError(f"modality {dst} missing at fusion; impute it before the forward pass")
        acc = taps[dst].x3 + taps[dst].x4
        for src in srcs:
            acc = acc + adapter_forward(maps[src], taps[src].x3, taps[dst].x3,
                                        adapters[(block, src, dst)], r_e, theta)
        out[dst] = acc
    return out
