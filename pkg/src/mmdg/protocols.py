"""Leave-one-out, missing-modality and limited-source protocol builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MultiModalDataset

DOMAINS = ("c", "p", "s", "w")
MISSING_SCENARIOS = (frozenset("D"), frozenset("I"), frozenset("DI"))
IMPUTATIONS = ("zero", "noise", "duplicate")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    group: int
    train: tuple[str, ...]
    test: tuple[str, ...]
    missing: frozenset = frozenset()

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ProtocolError(f"{self.name}: train and test domains overlap")
        if "R" in self.missing or not self.missing <= {"D", "I"}:
            raise ProtocolError(f"{self.name}: only D and I may be missing")


def protocol_name(train, test, missing=frozenset()) -> str:
    base = f"{''.join(train)}_{''.join(test)}"
    return base if not missing else f"{base}_missing_{''.join(sorted(m.lower() for m in missing))}"


def build_protocols(domains=DOMAINS) -> list[ProtocolSpec]:
    """Protocol 1 (4 leave-one-out), Protocol 2 (each LOO x 3 missing sets) and Protocol 3 (2 limited-source)."""
    domains = tuple(domains)
    if len(domains) != 4 or len(set(domains)) != 4:
        raise ProtocolError("exactly four distinct domains are required")
    loo = [(tuple(d for d in domains if d != held), (held,)) for held in domains]
    specs = [ProtocolSpec(protocol_name(tr, te), 1, tr, te) for tr, te in loo]
    specs += [ProtocolSpec(protocol_name(tr, te, miss), 2, tr, te, miss)
              for tr, te in loo for miss in MISSING_SCENARIOS]
    a, b, c, d = domains
    for tr, te in (((a, d), (b, c)), ((b, c), (a, d))):
        specs.append(ProtocolSpec(protocol_name(tr, te), 3, tr, te))
    return specs


def get_protocol(name: str, missing=None, domains=DOMAINS) -> ProtocolSpec:
    """Look up by name such as ``cps_w``; ``missing`` (e.g. ``"d"``, ``"di"``) selects a Protocol 2 variant."""
    miss = frozenset(missing.upper()) if missing else frozenset()
    for spec in build_protocols(domains):
        if spec.name == name and not miss:
            return spec
        if spec.missing == miss and protocol_name(spec.train, spec.test) == name:
            return spec
    raise ProtocolError(f"unknown protocol {name!r}" + (f" with missing {missing!r}" if missing else ""))


def impute_missing(images: dict, missing, policy: str = "zero", rng: np.random.Generator | None = None) -> dict:
    """Replace missing D/I images; the default policy writes all-zero tensors."""
    missing = frozenset(missing)
    if "R" in missing:
        raise ProtocolError("the RGB modality cannot be dropped")
    if not missing <= {"D", "I"}:
        raise ProtocolError(f"unknown modalities {set(missing) - {'D', 'I'}}")
    if policy not in IMPUTATIONS:
        raise ProtocolError(f"unknown imputation policy {policy!r}")
    out = dict(images)
    for m in missing:
        shape = np.shape(images[m])
        if policy == "zero":
            out[m] = np.zeros(shape)
        elif policy == "noise":
            rng = rng or np.random.default_rng(0)
            out[m] = rng.uniform(0.0, 1.0, shape)
        else:
            out[m] = np.array(images["R"], dtype=np.float64).copy()
    return out


def split(datasets: dict[str, MultiModalDataset], spec: ProtocolSpec) -> tuple[MultiModalDataset, MultiModalDataset]:
    missing = set(spec.train + spec.test) - set(datasets)
    if missing:
        raise ProtocolError(f"datasets for domains {sorted(missing)} are not available")
    return (MultiModalDataset.concat(datasets[d] for d in spec.train),
            MultiModalDataset.concat(datasets[d] for d in spec.test))
