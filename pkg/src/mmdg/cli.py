"""Command-line entry point: ``mmdg <subcommand> [options]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
numeric failures (non-finite losses or gradients, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import ConfigError
from .config import TrainConfig, dump_toml, paper_fidelity
from .data import ManifestError, export_dataset, generate_domains
from .metrics import ScoreSet, report_row, write_report, write_roc_csv
from .protocols import ProtocolError, get_protocol, split
from .regrad import MODES

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "protocol", None):
        overrides["protocol"] = args.protocol
    if getattr(args, "missing", None) is not None:
        overrides["missing"] = args.missing
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or "data")
    sets = generate_domains(n_live=cfg.data.n_live, n_spoof=cfg.data.n_spoof, seed=cfg.data.seed,
                            size=cfg.backbone.image_size)
    for name, ds in sets.items():
        path = export_dataset(ds, out / name)
        print(json.dumps({"domain": name, "manifest": str(path), "n": len(ds)}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import load_datasets, pretrain_backbone
    from .model import MMDGModel

    cfg = _load_config(args)
    spec = get_protocol(cfg.protocol, cfg.missing or None)
    train_ds, _ = split(load_datasets(cfg), spec)
    model = MMDGModel(cfg.backbone, cfg.adapter_width, cfg.adapter_r_e, cfg.theta, cfg.mc_samples, seed=cfg.seed)
    losses = pretrain_backbone(model, train_ds, cfg, cfg.pretrain_epochs or args.warmup_epochs)
    out = Path(args.out or "runs/pretrain")
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "backbone.ckpt", {n: t.data for n, t in model.backbone.params.items()},
              {"config": cfg.to_dict(), "losses": losses})
    print(json.dumps({"checkpoint": str(out / "backbone.ckpt"), "final_loss": losses[-1] if losses else None}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer

    cfg = _load_config(args)
    out = Path(args.out or "runs/train")
    backbone = ckpt.load(args.backbone)[0] if args.backbone else None
    trainer = Trainer(cfg, out_dir=out, backbone_arrays=backbone)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    cfg.save(out / "config.toml")
    result = trainer.run()
    final = result.epoch_log[-1] if result.epoch_log else {}
    print(json.dumps({"protocol": trainer.spec.name, "steps": trainer.step, **final}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import load_datasets, load_model, predict

    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    model, cfg, _ = load_model(args.checkpoint)
    if args.config:
        cfg = TrainConfig.load(args.config)
    spec = get_protocol(args.protocol or cfg.protocol, args.missing or None)
    _, test_ds = split(load_datasets(cfg), spec)
    imputation = args.imputation or cfg.imputation
    scores = predict(model, test_ds, spec.missing, seed=cfg.seed, imputation=imputation)
    s = ScoreSet(scores, test_ds.labels)
    row = report_row(spec.name, s, imputation=imputation)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "report.ndjson", [row])
        write_roc_csv(out / f"roc_{spec.name}.csv", s)
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def ablation_grid(modes=("off", "full", "conflicted", "unconflicted")):
    """(gate, mode) pairs; mode ``off`` disables modulation."""
    return [(gate, mode) for gate in (True, False) for mode in modes]


def run_ablation(cfg: TrainConfig, seeds, modes=("off", "full", "conflicted", "unconflicted"),
                 datasets=None) -> list[dict]:
    from .train import Trainer, load_datasets

    datasets = datasets if datasets is not None else load_datasets(cfg)
    rows = []
    for gate, mode in ablation_grid(modes):
        hters, aucs, variances = [], [], []
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed, gate=gate, modulation=mode != "off",
                                  regrad_mode=mode if mode != "off" else "full", eval_every=0)
            trainer = Trainer(run_cfg, datasets)
            result = trainer.run()
            ev = trainer.evaluate()
            hters.append(ev["hter"])
            aucs.append(ev["auc"])
            variances.append(result.trailing_ssp_variance())
        rows.append({"protocol": trainer.spec.name, "gate": gate, "regrad": mode, "seeds": list(seeds),
                     "hter": float(np.mean(hters)), "auc": float(np.mean(aucs)),
                     "auc_median": float(np.median(aucs)), "ssp_var": float(np.mean(variances)),
                     "per_seed_auc": aucs, "per_seed_hter": hters})
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    modes = tuple(args.modes.split(",")) if args.modes else ("off", "full", "conflicted", "unconflicted")
    bad = set(modes) - set(MODES)
    if bad:
        raise UsageError(f"unknown regrad modes {sorted(bad)}")
    rows = run_ablation(cfg, seeds, modes)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_report(Path(args.out) / "ablation.ndjson", rows)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_suite, summarize

    n = args.seeds
    base = args.seed or 0
    results = run_suite(seeds=range(base, base + n), cases=args.cases.split(",") if args.cases else None)
    ok = True
    for case, (err, zero, passed) in summarize(results).items():
        ok &= passed
        print(json.dumps({"case": case, "max_rel_error": err, "max_zero_grad": zero,
                          "tolerance": TOLERANCE, "passed": passed}))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_config(args) -> int:
    cfg = paper_fidelity() if args.paper else _load_config(args)
    text = dump_toml(cfg)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_protocols(args) -> int:
    from .protocols import build_protocols

    for spec in build_protocols():
        print(json.dumps({"name": spec.name, "group": spec.group, "train": spec.train, "test": spec.test,
                          "missing": sorted(spec.missing)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (or file for 'config')")
    common.add_argument("--protocol", help="protocol name such as cps_w")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mmdg", description="Multi-modal domain-generalized face anti-spoofing at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    s = sub.add_parser("gen-data", parents=[common], help="render synthetic domains and write manifests")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="warm up the backbone, then freeze it")
    s.add_argument("--warmup-epochs", type=int, default=5)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train adapters and classifier")
    s.add_argument("--missing", help="missing modalities at test time: d, i or di")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--backbone", help="backbone checkpoint from 'pretrain'")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a protocol")
    s.add_argument("--checkpoint", help="checkpoint written by 'train'")
    s.add_argument("--missing", help="d, i or di")
    s.add_argument("--imputation", choices=("zero", "noise", "duplicate"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="gate x modulation grid over seeds")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--epochs", type=int)
    s.add_argument("--modes", help="comma-separated subset of off,full,conflicted,unconflicted")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference suite")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--cases", help="comma-separated subset of cases")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("config", parents=[common], help="print the default (or reference-scale) config")
    s.add_argument("--paper", action="store_true", help="emit the reference-scale preset")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("protocols", parents=[common], help="list protocol names")
    s.set_defaults(func=cmd_protocols)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ProtocolError, ManifestError, ckpt.CheckpointError, FileNotFoundError) as exc:
        print(f"mmdg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"mmdg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
