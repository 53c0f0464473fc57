"""Rebalanced modality gradient modulation.

Per trainable tensor, the classification-loss gradient is split into one
contribution per modality.  Two contributions are merged by a four-case rule
that depends on whether they conflict (negative inner product) and on which
modality is converging faster (lower prototypical loss); the faster side is
additionally damped by its modality uncertainty.  Three modalities are folded
pairwise, slowest last.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .uem import MODALITIES, gate

_ORDER = {m: k for k, m in enumerate(MODALITIES)}
MODES = ("full", "conflicted", "unconflicted", "off")


def regrad2(g_i, g_j, ssp_i: float, ssp_j: float, u_i: float, u_j: float, r_e: float,
            mode: str = "full", use_uncertainty: bool = True, return_case: bool = False):
    """Merge two modality gradients.

    Modality ``i`` counts as the slower one when ``ssp_i >= ssp_j``.  A zero
    inner product is non-conflicting.  ``mode`` restricts modulation to the
    conflicting or non-conflicting cases (the others fall back to ``g_i + g_j``).
    """
    if mode not in MODES:
        raise ValueError(f"unknown modulation mode {mode!r}")
    g_i = np.asarray(g_i, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    if g_i.shape != g_j.shape:
        raise ad.DimensionError(f"gradient shapes differ: {g_i.shape} vs {g_j.shape}")
    dot = float(np.dot(g_i.ravel(), g_j.ravel()))
    conflict = dot < 0.0
    i_slower = ssp_i >= ssp_j
    case = ("b" if i_slower else "c") + ("2" if conflict else "1")

    def result(vec, name):
        return (vec, name) if return_case else vec

    if mode == "off" or (mode == "conflicted" and not conflict) or (mode == "unconflicted" and conflict):
        return result(g_i + g_j, "sum")
    if i_slower:
        nrm = float(np.dot(g_i.ravel(), g_i.ravel()))
        if nrm == 0.0:
            return result(g_i + g_j, "degenerate")
        damp = gate(u_j, r_e) if use_uncertainty else 1.0
        proj = (dot / nrm) * g_i
        if conflict:
            return result(g_i + (g_j - proj) * damp, case)
        return result(g_i + proj * damp, case)
    nrm = float(np.dot(g_j.ravel(), g_j.ravel()))
    if nrm == 0.0:
        return result(g_i + g_j, "degenerate")
    damp = gate(u_i, r_e) if use_uncertainty else 1.0
    proj = (dot / nrm) * g_j
    if conflict:
        return result((g_i - proj) * damp + g_j, case)
    return result(proj * damp + g_j, case)


def speed_order(ssp: dict) -> list[str]:
    """Modalities from fastest to slowest; equal losses keep the R, D, I order."""
    return sorted(ssp, key=lambda m: (ssp[m], _ORDER.get(m, len(_ORDER))))


def fold_three(grads: dict, ssp: dict, uncertainty: dict, r_e: float, mode: str = "full",
               use_uncertainty: bool = True, return_cases: bool = False):
    """Merge the two faster modalities first, then merge the slowest against that result.

    The merged pair stands in with the smaller of its losses and the mean of its
    uncertainties.
    """
    fast, mid, slow = speed_order(ssp)
    pair, case_a = regrad2(grads[mid], grads[fast], ssp[mid], ssp[fast],
                           uncertainty[mid], uncertainty[fast], r_e, mode, use_uncertainty, True)
    proxy_ssp = min(ssp[mid], ssp[fast])
    proxy_u = 0.5 * (uncertainty[mid] + uncertainty[fast])
    out, case_b = regrad2(grads[slow], pair, ssp[slow], proxy_ssp,
                          uncertainty[slow], proxy_u, r_e, mode, use_uncertainty, True)
    return (out, (case_a, case_b)) if return_cases else out


@dataclass
class ModalityGradients:
    """Per-parameter split of the classification gradient plus the prototypical-loss gradient."""

    per_modality: dict[str, dict[str, np.ndarray]]
    ssp: dict[str, np.ndarray]

    def total(self, name: str) -> np.ndarray:
        return sum(self.per_modality[name].values())


def decompose_gradients(ce_parts: dict, params: dict, ssp_total=None) -> ModalityGradients:
    """Independent backward passes, one per modality component of the classification loss.

    ``ce_parts[m]`` must be modality ``m``'s share of the total classification
    loss, so the parts sum to the total and so do their gradients.
    """
    if not ce_parts:
        raise RuntimeError("no forward state: classification loss components are missing")
    names = list(params)
    tensors = [params[n] for n in names]
    per = {n: {} for n in names}
    for m, part in ce_parts.items():
        for n, g in zip(names, ad.grad(part, tensors)):
            per[n][m] = g
    if ssp_total is None:
        ssp = {n: np.zeros_like(params[n].data) for n in names}
    else:
        ssp = dict(zip(names, ad.grad(ssp_total, tensors)))
    return ModalityGradients(per, ssp)


@dataclass
class ConvergenceState:
    """Current per-modality prototypical losses; lower means faster."""

    ssp: dict[str, float] = field(default_factory=dict)
    ema: float | None = None

    def update(self, values: dict) -> None:
        vals = {m: float(v.item() if isinstance(v, ad.Tensor) else v) for m, v in values.items()}
        if self.ema is None or not self.ssp:
            self.ssp = vals
        else:
            self.ssp = {m: self.ema * self.ssp[m] + (1.0 - self.ema) * vals[m] for m in vals}

    def ranking(self) -> list[str]:
        return speed_order(self.ssp)


def param_group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def apply_modulation(mg: ModalityGradients, state: ConvergenceState, uncertainty: dict,
                     lam: float, r_e: float, mode: str = "full", use_uncertainty: bool = True,
                     enabled: bool = True, params: dict | None = None):
    """Final per-parameter gradient: modulated classification part plus ``lam`` times the prototypical part.

    Returns ``(final, histogram)`` where ``histogram[group]`` counts the
    selected cases.  When ``params`` is given the result is also written to
    each tensor's ``grad``.
    """
    final = {}
    hist: dict[str, Counter] = {}
    for name, parts in mg.per_modality.items():
        if enabled and mode != "off":
            ce, cases = fold_three(parts, state.ssp, uncertainty, r_e, mode, use_uncertainty, True)
        else:
            ce, cases = sum(parts.values()), ("sum",)
        final[name] = ce + lam * mg.ssp[name]
        hist.setdefault(param_group(name), Counter()).update(cases)
        if not np.all(np.isfinite(final[name])):
            raise FloatingPointError(f"non-finite modulated gradient for {name}")
        if params is not None:
            params[name].grad = final[name]
    return final, {k: dict(v) for k, v in hist.items()}
