"""Command-line front end: ``ccil <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gradcheck, harness
from . import model as mdl


def _experiment_config(args) -> harness.ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "dataset": args.dataset,
        "protocol": args.protocol,
        "folds": args.folds,
        "trials": args.trials,
        "output_dir": args.output_dir,
        "seed": args.seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.synth_spec:
        base["synth"] = json.loads(Path(args.synth_spec).read_text())
    train = dict(base.get("train", {}))
    for key in ("alpha", "lam", "lr", "weight_decay", "batch_size", "max_epochs", "regularizer", "batch_mode",
                "bank_update_order"):  # fmt: skip
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    base["train"] = train
    if "output_dir" not in base:
        raise SystemExit("an output directory is required (--output-dir or config)")
    return harness.ExperimentConfig(**base)


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON")
    p.add_argument("--dataset", help="canonical dataset directory")
    p.add_argument("--synth-spec", help="generator JSON used when no dataset is given")
    p.add_argument("--protocol", choices=[x.value for x in data.Protocol])
    p.add_argument("--folds", type=int, nargs="+")
    p.add_argument("--trials", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", "--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--regularizer", choices=["concept_matrix", "feature", "logit", "none"])
    p.add_argument("--batch-mode", choices=["per_domain", "uniform"])
    p.add_argument("--bank-update-order", choices=["post_loss", "pre_loss"])
    p.add_argument("--workers", type=int, help=f"parallel trials (default: ${harness.WORKERS_ENV} or 1)")


def _indices(args, dataset: data.WindowedDataset, params: mdl.ModelParams) -> np.ndarray:
    if args.domains:
        return np.flatnonzero(np.isin(dataset.domain_labels, args.domains))
    if args.protocol is not None:
        split_info = params.extra.get("split", {})
        seed = args.seed if args.seed is not None else split_info.get("seed", 0)
        split = data.make_split(dataset, args.protocol, args.fold, seed=seed)
        return getattr(split, args.subset)
    split_info = params.extra.get("split")
    if split_info:
        split = data.make_split(dataset, split_info["protocol"], split_info["fold"], seed=split_info["seed"],
                                val_fraction=split_info["val_fraction"])  # fmt: skip
        return getattr(split, args.subset)
    return np.arange(len(dataset))


def _add_selection_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocol", choices=[x.value for x in data.Protocol])
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset", choices=["target", "val", "train"], default="target")
    p.add_argument("--domains", type=int, nargs="+", help="select samples by domain label instead of a split")


def cmd_ingest(args) -> int:
    if args.dataset == "cross_dataset":
        raw = dict(item.split("=", 1) for item in args.raw)
        ds = data.ingest_cross_dataset(raw, args.out, mapping=args.mapping)
    else:
        if len(args.raw) != 1:
            raise SystemExit("exactly one --raw directory expected")
        ds = data.INGESTORS[args.dataset](args.raw[0], args.out)
    print(f"{ds.name}: {len(ds)} samples of shape {ds.samples.shape[1:]}, "
          f"{ds.num_classes} classes, {ds.num_domains} domains -> {args.out}")  # fmt: skip
    return 0


def cmd_synth(args) -> int:
    spec = data.SynthSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else data.SynthSpec()
    ds = data.synth_domain_shift(spec, seed=args.seed)
    ds.save(args.out)
    print(f"synthetic: {len(ds)} samples, {ds.num_classes} classes, {ds.num_domains} domains -> {args.out}")
    return 0


def cmd_train(args) -> int:
    table = harness.run_experiment(_experiment_config(args), args.workers)
    print(table.summary_csv(), end="")
    return 0 if all(r["status"] == "ok" for r in table.rows) else 1


def cmd_ablate(args) -> int:
    table = harness.ablate(_experiment_config(args), args.methods, args.workers)
    print(table.summary_csv(), end="")
    return 0 if all(r["status"] == "ok" for r in table.rows) else 1


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    harness.sweep(cfg, args.alphas, args.lambdas, args.workers)
    print((Path(cfg.output_dir) / "sweep.csv").read_text(), end="")
    return 0


def cmd_eval(args) -> int:
    params, _ = mdl.load_checkpoint(args.checkpoint)
    dataset = data.WindowedDataset.load(args.dataset)
    idx = _indices(args, dataset, params)
    print(f"{harness.evaluate(params, dataset, idx):.4f}")
    return 0


def cmd_export(args) -> int:
    params, _ = mdl.load_checkpoint(args.checkpoint)
    dataset = data.WindowedDataset.load(args.dataset)
    n = harness.export_features(params, dataset, _indices(args, dataset, params), args.out)
    print(f"wrote {n} feature rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    return gradcheck.main(args.points, args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccil", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="convert a raw public dataset into the canonical format")
    p.add_argument("dataset", choices=[*data.INGESTORS, "cross_dataset"])
    p.add_argument("--raw", required=True, nargs="+", help="raw directory (cross_dataset: name=dir ...)")
    p.add_argument("--out", required=True)
    p.add_argument("--mapping", help="cross-dataset mapping JSON (default: bundled v1)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic domain-shift dataset")
    p.add_argument("--spec", help="generator JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run an experiment (folds x trials)")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="compare ERM and invariance variants")
    _add_experiment_args(p)
    p.add_argument("--methods", nargs="+", choices=list(harness.METHODS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over loss weight and momentum")
    _add_experiment_args(p)
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--lambdas", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="accuracy of a checkpoint")
    _add_selection_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-features", help="dump eval-mode features as CSV")
    _add_selection_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference suite; nonzero exit on failure")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except data.IngestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
