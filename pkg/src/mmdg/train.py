"""Training loop: fused forward, per-modality gradient split, modulation, Adam, prototype updates."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .config import TrainConfig
from .data import MultiModalDataset, generate_domains, load_manifest
from .losses import (DomainSet, PrototypeTable, classification_losses, final_loss,
                     spoof_score, ssp_loss, ssp_variance)
from .metrics import ScoreSet, auc, hter
from .model import MMDGModel
from .protocols import DOMAINS, ProtocolSpec, get_protocol, impute_missing, split
from .regrad import ConvergenceState, apply_modulation, decompose_gradients
from .rng import stream
from .uem import MODALITIES
from .vit import ForwardContext

log = logging.getLogger(__name__)

_STREAM_SHUFFLE = 7


class NumericError(FloatingPointError):
    pass


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {n}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for n, p in self.params.items():
            if not p.requires_grad:
                continue
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()
        self.t = t


def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, state: Adam | None = None) -> Adam:
    state = state or Adam(params, lr, betas, eps, weight_decay)
    state.step(grads)
    return state


# -- data plumbing ---------------------------------------------------------------

def load_datasets(cfg: TrainConfig, domains=DOMAINS) -> dict[str, MultiModalDataset]:
    if cfg.data.manifests:
        return {d: load_manifest(p, cfg.backbone.image_size).materialize() for d, p in cfg.data.manifests.items()}
    return generate_domains(domains, cfg.data.n_live, cfg.data.n_spoof, cfg.data.seed, cfg.backbone.image_size)


def batch_images(ds: MultiModalDataset, idx) -> dict[str, np.ndarray]:
    return {m: ds.images[m][idx] for m in MODALITIES}


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = stream(seed, _STREAM_SHUFFLE, epoch).permutation(n)
    batches = [order[k:k + batch_size] for k in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


# -- evaluation ------------------------------------------------------------------

def predict(model: MMDGModel, ds: MultiModalDataset, missing=frozenset(), batch_size: int = 64,
            seed: int = 0, imputation: str = "zero") -> np.ndarray:
    scores = []
    ctx = ForwardContext(train=False, seed=seed, step=0)
    with ad.no_grad():
        for k in range(0, len(ds), batch_size):
            idx = np.arange(k, min(k + batch_size, len(ds)))
            imgs = impute_missing(batch_images(ds, idx), missing, imputation) if missing else batch_images(ds, idx)
            out = model.forward(imgs, ctx)
            logits = {m: ad.linear(out.cls[m], model.cls_w, model.cls_b) for m in MODALITIES}
            scores.append(spoof_score(logits))
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(model: MMDGModel, ds: MultiModalDataset, missing=frozenset(), seed: int = 0,
             imputation: str = "zero") -> dict:
    s = ScoreSet(predict(model, ds, missing, seed=seed, imputation=imputation), ds.labels)
    h, thr = hter(s)
    return {"hter": h, "auc": auc(s), "threshold": thr,
            "n_live": int(s.live.size), "n_spoof": int(s.spoof.size)}


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MMDGModel
    table: PrototypeTable
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.step_log]

    def trailing_ssp_variance(self, frac: float = 0.2) -> float:
        vals = [r["ssp_var"] for r in self.step_log]
        k = max(1, int(round(len(vals) * frac)))
        return float(np.mean(vals[-k:]))


def pretrain_backbone(model: MMDGModel, ds: MultiModalDataset, cfg: TrainConfig, epochs: int) -> list[float]:
    """Warm up the backbone with plain cross-entropy on every branch, then freeze it again."""
    bb = model.backbone
    bb.unfreeze()
    rng = np.random.default_rng([cfg.seed, 2])
    c = cfg.backbone.hidden_c
    head_w = Tensor(rng.normal(0, 1 / np.sqrt(c), (c, 2)), requires_grad=True)
    head_b = Tensor(np.zeros(2), requires_grad=True)
    params = {**bb.params, "head.w": head_w, "head.b": head_b}
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    losses = []
    step = 0
    for epoch in range(epochs):
        for idx in epoch_batches(len(ds), cfg.batch_size, cfg.seed + 1, epoch):
            step += 1
            imgs = np.stack([ds.images[m][idx] for m in MODALITIES])
            tokens = bb.forward(imgs, ForwardContext(train=True, seed=cfg.seed + 1, step=step))
            logits = ad.linear(tokens[:, :, 0, :].reshape(-1, c), head_w, head_b)
            loss = ad.cross_entropy(logits, np.tile(ds.labels[idx], len(MODALITIES)))
            grads = dict(zip(params, ad.grad(loss, list(params.values()))))
            opt.step(grads)
            losses.append(loss.item())
    bb.freeze()
    return losses


def load_backbone(model: MMDGModel, arrays: dict[str, np.ndarray]) -> None:
    for n, t in model.backbone.params.items():
        if arrays[n].shape != t.shape:
            raise ckpt.CheckpointError(f"{n}: checkpoint shape {arrays[n].shape} != model shape {t.shape}")
        t.data[...] = arrays[n]


def load_model(path) -> tuple[MMDGModel, TrainConfig, dict]:
    """Rebuild a trained model from a checkpoint written by :class:`Trainer`."""
    arrays, meta = ckpt.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = MMDGModel(cfg.backbone, cfg.adapter_width, cfg.adapter_r_e, cfg.theta, cfg.mc_samples, seed=cfg.seed)
    for n, t in model.all_parameters().items():
        if n not in arrays:
            raise ckpt.CheckpointError(f"checkpoint lacks parameter {n}")
        t.data[...] = arrays[n]
    return model, cfg, meta


class Trainer:
    def __init__(self, cfg: TrainConfig, datasets: dict[str, MultiModalDataset] | None = None,
                 out_dir=None, protocol: ProtocolSpec | None = None, backbone_arrays: dict | None = None):
        self.cfg = cfg
        self.spec = protocol or get_protocol(cfg.protocol, cfg.missing or None)
        datasets = datasets if datasets is not None else load_datasets(cfg)
        self.train_ds, self.test_ds = split(datasets, self.spec)
        src_idx = np.array([self.spec.train.index(d) for d in self.train_ds.domain])
        self.domain_set = DomainSet(len(self.spec.train))
        self.domains = self.domain_set.assign(self.train_ds.labels, src_idx)
        self.model = MMDGModel(cfg.backbone, cfg.adapter_width, cfg.adapter_r_e, cfg.theta,
                               cfg.mc_samples, seed=cfg.seed)
        self.pretrain_losses: list[float] = []
        if backbone_arrays is not None:
            load_backbone(self.model, backbone_arrays)
        elif cfg.pretrain_epochs:
            self.pretrain_losses = pretrain_backbone(self.model, self.train_ds, cfg, cfg.pretrain_epochs)
        self.params = self.model.trainable_parameters()
        self.opt = Adam(self.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
        self.table = PrototypeTable(self.domain_set.size, cfg.backbone.hidden_c, cfg.prototype_momentum)
        self.state = ConvergenceState(ema=cfg.ssp_ema or None)
        self.step = 0
        self.epoch = 0
        self.result = TrainResult(self.model, self.table)
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._init_prototypes()

    # -- state -----------------------------------------------------------------
    def _init_prototypes(self) -> None:
        """Seed every centroid with the mean over all its training samples."""
        feats = {m: [] for m in MODALITIES}
        ctx = ForwardContext(train=False, seed=self.cfg.seed, step=0)
        with ad.no_grad():
            for k in range(0, len(self.train_ds), 64):
                idx = np.arange(k, min(k + 64, len(self.train_ds)))
                out = self.model.forward(batch_images(self.train_ds, idx), ctx)
                for m in MODALITIES:
                    feats[m].append(out.cls[m].data)
        for m in MODALITIES:
            self.table.update(m, np.concatenate(feats[m]), self.domains)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {n: t.data for n, t in self.model.all_parameters().items()}
        names = self.domain_set.names(list(self.spec.train))
        arrays.update(self.table.named_arrays(names))
        arrays.update(self.opt.state_arrays())
        return arrays

    def save_checkpoint(self, path) -> None:
        meta = {"config": self.cfg.to_dict(), "step": self.step, "epoch": self.epoch,
                "adam_t": self.opt.t, "ssp_state": self.state.ssp,
                "prototype_counts": self.table.counts.tolist(), "protocol": self.spec.name,
                "train_domains": list(self.spec.train)}
        ckpt.save(path, self.state_arrays(), meta)

    def load_checkpoint(self, path) -> None:
        arrays, meta = ckpt.load(path)
        for n, t in self.model.all_parameters().items():
            t.data[...] = arrays[n]
        names = self.domain_set.names(list(self.spec.train))
        for r, m in enumerate(self.table.modalities):
            for d, dn in enumerate(names):
                self.table.centroids[r, d] = arrays[f"prototypes.{m}.{dn}"]
        self.table.counts[...] = np.asarray(meta["prototype_counts"], dtype=np.int64)
        self.opt.load_state(arrays, meta["adam_t"])
        self.state.ssp = dict(meta["ssp_state"])
        self.step, self.epoch = meta["step"], meta["epoch"]

    # -- one step ----------------------------------------------------------------
    def train_step(self, idx: np.ndarray) -> dict:
        cfg = self.cfg
        self.step += 1
        out = self.model.forward(batch_images(self.train_ds, idx),
                                 ForwardContext(train=True, seed=cfg.seed, step=self.step))
        labels, doms = self.train_ds.labels[idx], self.domains[idx]
        l_ce, per, _ = classification_losses(out.cls, labels, self.model.cls_w, self.model.cls_b)
        l_ssp = {m: ssp_loss(out.cls[m], doms, self.table, m) for m in MODALITIES}
        loss = final_loss(l_ce, l_ssp, cfg.lam)
        if not np.isfinite(loss.item()):
            if self.out_dir:
                self.save_checkpoint(self.out_dir / "last_good.ckpt")
            raise NumericError(f"non-finite loss at step {self.step}")
        ce_parts = {m: per[m] * (1.0 / len(MODALITIES)) for m in MODALITIES}
        ssp_total = l_ssp["R"] + l_ssp["D"] + l_ssp["I"]
        mg = decompose_gradients(ce_parts, self.params, ssp_total)
        record = {}
        if cfg.check_decomposition:
            full = dict(zip(self.params, ad.grad(l_ce, list(self.params.values()))))
            record["decomp_err"] = max(float(np.max(np.abs(mg.total(n) - full[n]))) for n in self.params)
        self.state.update(l_ssp)
        final, hist = apply_modulation(mg, self.state, out.uncertainty, cfg.lam, cfg.r_e,
                                       cfg.regrad_mode, cfg.regrad_uncertainty, cfg.modulation)
        self.opt.step(final)
        for m in MODALITIES:
            self.table.update(m, out.cls[m].data, doms)
        ssp_vals = {m: l_ssp[m].item() for m in MODALITIES}
        cases = {}
        for counts in hist.values():
            for k, v in counts.items():
                cases[k] = cases.get(k, 0) + v
        record.update({
            "step": self.step, "epoch": self.epoch, "loss": loss.item(), "ce": l_ce.item(),
            "ssp": ssp_vals, "ssp_var": ssp_variance(ssp_vals), "cases": cases,
            "cases_by_group": hist,
            **{f"u_{m}": out.uncertainty[m] for m in MODALITIES},
        })
        return record

    def run(self, epochs: int | None = None) -> TrainResult:
        cfg = self.cfg
        target = cfg.epochs if epochs is None else self.epoch + epochs
        step_fh = open(self.out_dir / "train_log.ndjson", "a", encoding="utf-8") if self.out_dir else None
        try:
            while self.epoch < target:
                t0 = time.perf_counter()
                for idx in epoch_batches(len(self.train_ds), cfg.batch_size, cfg.seed, self.epoch):
                    rec = self.train_step(idx)
                    self.result.step_log.append(rec)
                    if step_fh:
                        step_fh.write(json.dumps(rec) + "\n")
                self.epoch += 1
                row = {"epoch": self.epoch, "seconds": time.perf_counter() - t0}
                if cfg.eval_every and (self.epoch % cfg.eval_every == 0 or self.epoch == target):
                    row.update(self.evaluate())
                self.result.epoch_log.append(row)
                log.info("epoch %d %s", self.epoch, row)
                if self.out_dir:
                    with open(self.out_dir / "epochs.ndjson", "a", encoding="utf-8") as fh:
                        fh.write(json.dumps(row) + "\n")
                    self.save_checkpoint(self.out_dir / "model.ckpt")
        finally:
            if step_fh:
                step_fh.close()
        return self.result

    def evaluate(self, missing=None) -> dict:
        miss = self.spec.missing if missing is None else frozenset(missing)
        return evaluate(self.model, self.test_ds, miss, self.cfg.seed, self.cfg.imputation)


def train(cfg: TrainConfig, datasets=None, out_dir=None) -> TrainResult:
    return Trainer(cfg, datasets, out_dir).run()
