"""Finite-difference suite over every differentiable operation plus the fused end-to-end path."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapter import AdapterParams, adapter_forward
from .autodiff import Tensor, finite_diff_check
from .losses import DomainSet, PrototypeTable, classification_losses, final_loss, ssp_loss
from .model import MMDGModel
from .rng import keep_mask
from .uem import MODALITIES
from .vit import Backbone, BackboneConfig, ForwardContext

TOLERANCE = 1e-4
STEP = 1e-5
# key bias shifts every logit of a softmax row equally, so its true gradient is exactly zero;
# relative error is meaningless there and an absolute bound is used instead
ZERO_GRAD_SUFFIXES = (".bk",)
ZERO_GRAD_BOUND = 1e-8
# heavy cases compare a seeded random subset of each tensor's components
HEAVY_COMPONENTS = {"vit_block": 16, "adapter": 16, "composite": 6}


def _p(rng, *shape, lo=None):
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, lo + 1.5, size=shape)
    return Tensor(data, requires_grad=True)


def _project(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalarize with a fixed random weighting so every output element matters."""
    w = {}

    def f():
        out = fn()
        if "w" not in w:
            w["w"] = Tensor(rng.normal(size=out.shape))
        return ad.tsum(out * w["w"])
    return f


def _case_elementwise(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    c = _p(rng, 3, 4, lo=0.5)
    return _project(lambda: (a + b) * c - a / c + ad.exp(b * 0.3) + ad.log(c), rng), [a, b, c]


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    c, d = _p(rng, 2, 3, 4), _p(rng, 2, 4, 2)
    return _project(lambda: ad.concat([a @ b, c @ d], axis=-1), rng), [a, b, c, d]


def _case_gelu(rng):
    x = _p(rng, 3, 5)
    return _project(lambda: ad.gelu(x), rng), [x]


def _case_dropout(rng):
    x = _p(rng, 4, 6)
    mask = keep_mask(x.shape, 0.3, int(rng.integers(1 << 30)), 0)
    return _project(lambda: ad.dropout(x, mask, 0.3), rng), [x]


def _case_reductions(rng):
    x = _p(rng, 3, 4, 5)
    return _project(lambda: ad.concat([ad.mean(x, axis=1), ad.var(x, axis=1), ad.tsum(x, axis=1)], axis=-1),
                    rng), [x]


def _case_shape(rng):
    x, y = _p(rng, 2, 3, 4), _p(rng, 2, 3, 4)
    idx = np.array([2, 0, 2])

    def fn():
        z = ad.stack([x, y], axis=1).reshape(2, 6, 4).transpose((0, 2, 1))
        return ad.concat([z[:, 1:3, :].reshape(2, 12), x[:, :, idx].reshape(2, 9)], axis=1)
    return _project(fn, rng), [x, y]


def _case_embedding(rng):
    table = _p(rng, 5, 3)
    ids = rng.integers(0, 5, size=(2, 4))
    return _project(lambda: ad.embedding(table, ids), rng), [table]


def _case_softmax(rng):
    x = _p(rng, 3, 5)
    return _project(lambda: ad.concat([ad.softmax_rows(x), ad.log_softmax_rows(x)], axis=-1), rng), [x]


def _case_layer_norm(rng):
    x, g, b = _p(rng, 2, 3, 6), _p(rng, 6), _p(rng, 6)
    return _project(lambda: ad.layer_norm(x, g, b), rng), [x, g, b]


def _case_cdc(rng):
    x, w = _p(rng, 2, 3, 4, 4), _p(rng, 2, 3, 3, 3)
    theta = float(rng.uniform(0, 1))
    return _project(lambda: ad.cdc_conv(x, w, theta), rng), [x, w]


def _case_cross_entropy(rng):
    z = _p(rng, 6, 3)
    labels = rng.integers(0, 3, size=6)
    return (lambda: ad.cross_entropy(z, labels)), [z]


def _case_distance(rng):
    a, b = _p(rng, 4, 3), _p(rng, 5, 3)
    return _project(lambda: ad.pairwise_distance(a, b), rng), [a, b]


def _case_block(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, hidden_c=8, heads=2, n_blocks=1)
    bb = Backbone(cfg, seed=int(rng.integers(1 << 30)))
    bb.unfreeze()
    imgs = rng.uniform(size=(2, 8, 8, 3))
    ctx = ForwardContext(train=True, seed=int(rng.integers(1 << 30)), step=1)
    names = ["backbone.patch.w", "backbone.block0.attn.wqkv", "backbone.block0.ln2.gamma", "backbone.block0.mlp.w1"]
    return _project(lambda: bb.forward(imgs, ctx), rng), [bb[n] for n in names]


def _randomize_adapter(p: AdapterParams, rng) -> None:
    for t in p.tensors.values():
        t.data[...] = rng.normal(0.0, 0.5, size=t.shape)


def _case_adapter(rng):
    c, a, L = 6, 4, 5
    p = AdapterParams(c, a, rng, prefix="adapter")
    _randomize_adapter(p, rng)
    xs, xd = _p(rng, 2, L, c), _p(rng, 2, L, c)
    u = rng.uniform(0, 2, size=(2, L, 1))
    return _project(lambda: adapter_forward(u, xs, xd, p, r_e=1.0, theta=0.7), rng), [xs, xd, *p.tensors.values()]


def _case_composite(rng):
    """Frozen block -> gated adapters -> shared classifier -> CE + weighted prototypical loss."""
    cfg = BackboneConfig(image_size=8, patch_size=4, hidden_c=8, heads=2, n_blocks=1)
    model = MMDGModel(cfg, adapter_width=4, seed=int(rng.integers(1 << 30)), mc_samples=3)
    for p in model.adapters.values():
        _randomize_adapter(p, rng)
    images = {m: rng.uniform(size=(4, 8, 8, 3)) for m in MODALITIES}
    labels = np.array([0, 1, 0, 1])
    domains = DomainSet(2).assign(labels, np.array([0, 0, 1, 1]))
    table = PrototypeTable(3, cfg.hidden_c)
    for m in MODALITIES:
        table.update(m, rng.normal(size=(3, cfg.hidden_c)), np.arange(3))
    ctx = ForwardContext(train=True, seed=int(rng.integers(1 << 30)), step=1)

    def f():
        out = model.forward(images, ctx)
        l_ce, _, _ = classification_losses(out.cls, labels, model.cls_w, model.cls_b)
        return final_loss(l_ce, {m: ssp_loss(out.cls[m], domains, table, m) for m in MODALITIES}, 0.3)
    return f, list(model.trainable_parameters().values())


CASES: dict[str, Callable] = {
    "elementwise": _case_elementwise, "matmul": _case_matmul, "gelu": _case_gelu,
    "dropout": _case_dropout, "reductions": _case_reductions, "shape": _case_shape,
    "embedding": _case_embedding, "softmax": _case_softmax, "layer_norm": _case_layer_norm,
    "cdc_conv": _case_cdc, "cross_entropy": _case_cross_entropy, "pairwise_distance": _case_distance,
    "vit_block": _case_block, "adapter": _case_adapter, "composite": _case_composite,
}


def zero_gradient_check(f: Callable[[], Tensor], p: Tensor, step: float = STEP) -> float:
    """Largest absolute analytic or central-difference gradient component."""
    analytic = ad.grad(f(), [p])[0]
    worst = float(np.max(np.abs(analytic)))
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f().item()
        flat[i] = orig - step
        fm = f().item()
        flat[i] = orig
        worst = max(worst, abs(fp - fm) / (2.0 * step))
    return worst


@dataclass
class CheckResult:
    case: str
    seed: int
    error: float
    zero_grad: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE and self.zero_grad <= ZERO_GRAD_BOUND


def run_suite(seeds=range(20), cases=None, step: float = STEP) -> list[CheckResult]:
    results = []
    for name in cases or CASES:
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)] + [ord(ch) for ch in name])
            f, params = CASES[name](rng)
            err = zero = 0.0
            k = HEAVY_COMPONENTS.get(name)
            for p in params:
                if (p.name or "").endswith(ZERO_GRAD_SUFFIXES):
                    zero = max(zero, zero_gradient_check(f, p, step))
                    continue
                comps = None if k is None or p.size <= k else rng.choice(p.size, k, replace=False)
                err = max(err, finite_diff_check(f, p, step, comps))
            results.append(CheckResult(name, seed, err, zero))
    return results


def summarize(results: list[CheckResult]) -> dict[str, tuple[float, float, bool]]:
    """Per case: worst relative error, worst zero-gradient magnitude, all passed."""
    out: dict[str, tuple[float, float, bool]] = {}
    for r in results:
        e, z, ok = out.get(r.case, (0.0, 0.0, True))
        out[r.case] = (max(e, r.error), max(z, r.zero_grad), ok and r.passed)
    return out


if __name__ == "__main__":
    t0 = time.perf_counter()
    res = run_suite()
    for case, (err, zero, ok) in summarize(res).items():
        print(f"{case:18s} {err:.3e} {zero:.1e} {'ok' if ok else 'FAIL'}")
    print(f"{time.perf_counter() - t0:.1f}s")
