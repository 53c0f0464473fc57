"""Domain prototypes, the single-side prototypical loss and the classification losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .uem import MODALITIES

LIVE, SPOOF = 0, 1


class SequencingError(RuntimeError):
    """An operation ran before the state it depends on was initialised."""


@dataclass(frozen=True)
class DomainSet:
    """One live domain shared by every source plus one spoof domain per source dataset.

    Domain 0 is live; domain ``k + 1`` holds spoofs of source ``k``.
    """

    n_sources: int

    @property
    def size(self) -> int:
        return self.n_sources + 1

    def assign(self, labels, sources) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        sources = np.asarray(sources, dtype=np.int64)
        if np.any((labels != LIVE) & (labels != SPOOF)):
            raise ValueError("labels must be 0 (live) or 1 (spoof)")
        if np.any((sources < 0) | (sources >= self.n_sources)):
            raise ValueError(f"source index outside [0, {self.n_sources})")
        return np.where(labels == LIVE, 0, sources + 1)

    def names(self, source_names=None) -> list[str]:
        source_names = source_names or [str(k) for k in range(self.n_sources)]
        return ["live"] + [f"spoof_{s}" for s in source_names]


class PrototypeTable:
    """Per-modality, per-domain feature centroids, updated by exponential moving average."""

    def __init__(self, n_domains: int, dim: int, momentum: float = 0.9,
                 modalities=MODALITIES):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.modalities = tuple(modalities)
        self.momentum = momentum
        self.centroids = np.zeros((len(self.modalities), n_domains, dim))
        self.counts = np.zeros((len(self.modalities), n_domains), dtype=np.int64)

    @property
    def n_domains(self) -> int:
        return self.centroids.shape[1]

    def _row(self, modality: str) -> int:
        return self.modalities.index(modality)

    def initialized(self, modality: str | None = None) -> bool:
        rows = self.counts if modality is None else self.counts[self._row(modality)]
        return bool(np.all(rows > 0))

    def __getitem__(self, modality: str) -> np.ndarray:
        return self.centroids[self._row(modality)]

    def update(self, modality: str, features, domains) -> None:
        """Blend each present domain's batch mean into its centroid.

        The first observation of a domain sets the centroid directly.
        """
        feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        domains = np.asarray(domains, dtype=np.int64)
        if np.any((domains < 0) | (domains >= self.n_domains)):
            raise ValueError(f"unknown domain id in {np.unique(domains).tolist()}")
        r = self._row(modality)
        for d in np.unique(domains):
            batch_mean = feats[domains == d].mean(axis=0)
            if self.counts[r, d] == 0:
                self.centroids[r, d] = batch_mean
            else:
                m = self.momentum
                self.centroids[r, d] = m * self.centroids[r, d] + (1.0 - m) * batch_mean
            self.counts[r, d] += int((domains == d).sum())

    def named_arrays(self, domain_names=None) -> dict[str, np.ndarray]:
        names = domain_names or [str(d) for d in range(self.n_domains)]
        return {f"prototypes.{m}.{names[d]}": self.centroids[r, d].copy()
                for r, m in enumerate(self.modalities) for d in range(self.n_domains)}


def update_prototypes(features: dict, domains, table: PrototypeTable) -> PrototypeTable:
    for m, f in features.items():
        table.update(m, f, domains)
    return table


def ssp_loss(c_m: Tensor, domains, table: PrototypeTable, modality: str) -> Tensor:
    """Batch mean of ``-log softmax(-distance to every prototype)[true domain]``.

    Prototypes enter as constants.
    """
    if not table.initialized(modality):
        raise SequencingError(f"prototypes of modality {modality} are not initialised")
    dist = ad.pairwise_distance(c_m, Tensor(table[modality]))
    return ad.cross_entropy(-dist, domains)


def classification_losses(cls_tokens: dict, labels, weight: Tensor, bias: Tensor):
    """Shared 2-way classifier on each branch's class token.

    Returns ``(total, per_modality, logits)``; the total is the mean of the
    per-modality cross-entropies.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels != LIVE) & (labels != SPOOF)):
        raise ValueError("labels must be 0 (live) or 1 (spoof)")
    logits = {m: ad.linear(c, weight, bias) for m, c in cls_tokens.items()}
    per = {m: ad.cross_entropy(z, labels) for m, z in logits.items()}
    total = None
    for v in per.values():
        total = v if total is None else total + v
    return total * (1.0 / len(per)), per, logits


def spoof_score(logits: dict) -> np.ndarray:
    """Spoof probability from the softmax of the mean per-modality logits."""
    z = np.mean([t.data if isinstance(t, Tensor) else t for t in logits.values()], axis=0)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p[:, SPOOF] / p.sum(axis=-1)


def final_loss(l_ce, l_ssp: dict, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    total = l_ce
    for v in l_ssp.values():
        total = total + lam * v
    return total


def ssp_variance(l_ssp: dict) -> float:
    vals = [v.item() if isinstance(v, Tensor) else float(v) for v in l_ssp.values()]
    return float(np.var(vals))
