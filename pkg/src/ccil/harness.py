"""Experiment runner: protocol folds x trials x methods, sweeps, ablations, feature export."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .data import Protocol, SynthSpec, WindowedDataset, make_split, num_folds, synth_domain_shift
from .evaluation import evaluate, predict_features
from .train import TrainConfig, TrainingDiverged, train_loop

logger = logging.getLogger(__name__)

WORKERS_ENV = "CCIL_WORKERS"

# overrides applied on top of the experiment's train config
METHODS: dict[str, dict] = {
    "ERM": {"regularizer": "none", "alpha": 0.0},
    "CCIL": {"regularizer": "concept_matrix"},
    "W/fea": {"regularizer": "feature"},
    "W/log": {"regularizer": "logit"},
    "W/lambda=0": {"regularizer": "concept_matrix", "lam": 0.0},
    "W/lambda=1": {"regularizer": "concept_matrix", "lam": 1.0},
}
ABLATION_METHODS = ["ERM", "W/fea", "W/log", "CCIL"]
SWEEP_ALPHAS = [0.1, 0.5, 1.0, 5.0, 10.0]
SWEEP_LAMBDAS = [0.0, 0.9, 0.99, 0.999, 0.9999]

CSV_FIELDS = ["method", "protocol", "fold", "trial", "seed", "target_acc", "val_acc", "best_epoch", "status", "checkpoint"]


@dataclass
class ExperimentConfig:
    output_dir: str
    dataset: str | None = None
    # generator settings used when no dataset path is given
    synth: dict | None = None
    protocol: str = "cross_person"
    folds: list[int] | None = None
    # preset name, explicit ModelConfig fields, or None to derive from the data
    model: str | dict | None = None
    train: dict = field(default_factory=dict)
    methods: list[str] | None = None
    trials: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    save_checkpoints: bool = True

    def __post_init__(self):
        Protocol(self.protocol)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.dataset is None and self.synth is None:
            raise ValueError("an experiment needs a dataset path or a synth spec")
        for m in self.methods or []:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
        TrainConfig.from_dict(self.train)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**self.to_dict(), **changes})


def load_dataset(config: ExperimentConfig) -> WindowedDataset:
    if config.dataset is not None:
        return WindowedDataset.load(config.dataset)
    return synth_domain_shift(SynthSpec.from_dict(config.synth))


def resolve_model_config(config: ExperimentConfig, dataset: WindowedDataset) -> mdl.ModelConfig:
    _, c_in, _, t = dataset.samples.shape
    if isinstance(config.model, str):
        cfg = mdl.PRESETS[config.model]
    else:
        fields = dict(config.model or {})
        fields.setdefault("in_channels", c_in)
        fields.setdefault("window_len", t)
        fields.setdefault("num_classes", dataset.num_classes)
        fields.setdefault("kernel_len", 9 if t >= 100 else 6)
        cfg = mdl.ModelConfig(**fields)
    if (cfg.in_channels, cfg.window_len, cfg.num_classes) != (c_in, t, dataset.num_classes):
        raise ValueError(
            f"model expects ({cfg.in_channels}, 1, {cfg.window_len}) x {cfg.num_classes} classes, "
            f"dataset has ({c_in}, 1, {t}) x {dataset.num_classes}"
        )
    return cfg


def method_label(train: TrainConfig) -> str:
    if not train.regularized:
        return "ERM"
    return {"concept_matrix": "CCIL", "feature": "W/fea", "logit": "W/log"}[train.regularizer.value]


def method_train_config(config: ExperimentConfig, method: str | None, trial: int) -> TrainConfig:
    base = TrainConfig.from_dict(config.train)
    if method is not None:
        base = base.replace(**METHODS[method])
    return base.replace(seed=config.seed + trial)


def _slug(method: str) -> str:
    return method.replace("/", "_").replace("=", "")


@dataclass
class ResultTable:
    rows: list[dict]
    protocol: str

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def fold_means(self, method: str) -> dict[int, float]:
        per: dict[int, list[float]] = {}
        for r in self.rows:
            if r["method"] == method and r["target_acc"] is not None:
                per.setdefault(r["fold"], []).append(r["target_acc"])
        return {f: float(np.mean(v)) for f, v in sorted(per.items())}

    def average(self, method: str) -> float:
        means = self.fold_means(method)
        return float(np.mean(list(means.values()))) if means else float("nan")

    def trial_means(self, method: str) -> dict[int, float]:
        """Mean target accuracy over folds, per trial."""
        per: dict[int, list[float]] = {}
        for r in self.rows:
            if r["method"] == method and r["target_acc"] is not None:
                per.setdefault(r["trial"], []).append(r["target_acc"])
        return {t: float(np.mean(v)) for t, v in sorted(per.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            out = dict(r)
            for key in ("target_acc", "val_acc"):
                out[key] = "" if r[key] is None else f"{r[key]:.6f}"
            w.writerow(out)
        return buf.getvalue()

    def summary_csv(self) -> str:
        folds = sorted({r["fold"] for r in self.rows})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *[str(f) for f in folds], "AVG"])
        for m in self.methods():
            means = self.fold_means(m)
            cells = [f"{means[f]:.4f}" if f in means else "" for f in folds]
            w.writerow([m, *cells, f"{self.average(m):.4f}"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "rows": self.rows,
            "aggregate": {m: {"folds": self.fold_means(m), "AVG": self.average(m)} for m in self.methods()},
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(self.to_csv())
        (out / "summary.csv").write_text(self.summary_csv())
        (out / "results.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def read_csv(cls, path: str | Path, protocol: str = "") -> "ResultTable":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                for key in ("fold", "trial", "seed", "best_epoch"):
                    r[key] = int(r[key])
                for key in ("target_acc", "val_acc"):
                    r[key] = float(r[key]) if r[key] else None
                rows.append(r)
        return cls(rows, protocol or (rows[0]["protocol"] if rows else ""))


def _run_job(config_dict: dict, method: str | None, fold: int, trial: int) -> dict:
    config = ExperimentConfig(**config_dict)
    dataset = load_dataset(config)
    train_cfg = method_train_config(config, method, trial)
    label = method or method_label(train_cfg)
    row = {
        "method": label,
        "protocol": config.protocol,
        "fold": fold,
        "trial": trial,
        "seed": train_cfg.seed,
        "target_acc": None,
        "val_acc": None,
        "best_epoch": -1,
        "status": "ok",
        "checkpoint": "",
    }
    rel = Path(_slug(label)) / f"fold{fold}" / f"trial{trial}"
    run_dir = Path(config.output_dir) / rel
    try:
        split = make_split(dataset, config.protocol, fold, seed=train_cfg.seed, val_fraction=config.val_fraction)
        model_cfg = resolve_model_config(config, dataset)
        result = train_loop(dataset, split, model_cfg, train_cfg, log_path=run_dir / "log.jsonl")
        row["target_acc"] = evaluate(result.best_params, dataset, split.target)
        row["val_acc"] = result.state.best_val_acc
        row["best_epoch"] = result.state.best_epoch
        if config.save_checkpoints:
            extra = {"split": split.plan.to_dict(), "train_config": train_cfg.to_dict(), "method": label}
            mdl.save_checkpoint(run_dir / "best.ckpt", result.best_params, result.state.best_epoch, extra)
            mdl.save_checkpoint(run_dir / "final.ckpt", result.state.params, result.state.epoch, extra)
            row["checkpoint"] = (rel / "best.ckpt").as_posix()
    except (TrainingDiverged, ValueError, FloatingPointError) as exc:
        logger.warning("%s fold %d trial %d failed: %s", label, fold, trial, exc)
        row["status"] = f"failed: {exc}".replace("\n", " ")
    return row


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> ResultTable:
    """Train every (method, fold, trial), evaluate the best-validation checkpoint on the target."""
    dataset = load_dataset(config)
    folds = config.folds if config.folds is not None else list(range(num_folds(dataset, config.protocol)))
    n = num_folds(dataset, config.protocol)
    for f in folds:
        if not 0 <= f < n:
            raise ValueError(f"fold {f} out of range for {config.protocol} (0..{n - 1})")
    resolve_model_config(config, dataset)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    materialized = config.to_dict()
    materialized["folds"] = folds
    materialized["train"] = TrainConfig.from_dict(config.train).to_dict()
    (out / "config.json").write_text(json.dumps(materialized, indent=1, sort_keys=True) + "\n")

    methods = config.methods or [None]
    jobs = [(m, f, t) for m in methods for f in folds for t in range(config.trials)]
    cfg_dict = config.to_dict()
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, *zip(*[(cfg_dict, m, f, t) for m, f, t in jobs])))
    else:
        rows = [_run_job(cfg_dict, m, f, t) for m, f, t in jobs]
    table = ResultTable(rows, config.protocol)
    table.write(out)
    return table


def ablate(config: ExperimentConfig, methods: list[str] | None = None, workers: int | None = None) -> ResultTable:
    return run_experiment(config.replace(methods=list(methods or ABLATION_METHODS)), workers)


def sweep(
    config: ExperimentConfig,
    alphas: list[float] | None = None,
    lambdas: list[float] | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """Grid of AVG target accuracies, rows = momentum values, columns = loss weights."""
    alphas = list(SWEEP_ALPHAS if alphas is None else alphas)
    lambdas = list(SWEEP_LAMBDAS if lambdas is None else lambdas)
    if not alphas or not lambdas:
        raise ValueError("sweep needs at least one alpha and one lambda")
    grid = np.full((len(lambdas), len(alphas)), np.nan)
    for i, lam in enumerate(lambdas):
        for j, alpha in enumerate(alphas):
            cell = config.replace(
                train={**config.train, "alpha": alpha, "lam": lam},
                methods=None,
                output_dir=str(Path(config.output_dir) / f"alpha{alpha:g}_lambda{lam:g}"),
            )
            grid[i, j] = run_experiment(cell, workers).average(method_label(TrainConfig.from_dict(cell.train)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda\\alpha", *[f"{a:g}" for a in alphas]])
    for lam, row in zip(lambdas, grid):
        w.writerow([f"{lam:g}", *["" if np.isnan(v) else f"{v:.4f}" for v in row]])
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(config.output_dir) / "sweep.csv").write_text(buf.getvalue())
    return grid


def export_features(params: mdl.ModelParams, dataset: WindowedDataset, indices, out_file: str | Path) -> int:
    """Write eval-mode features as CSV ``sample_id, domain, class, z_1..z_D``; returns the row count.

    Values are written with ``repr`` so they parse back to the exact float64.
    """
    if dataset.samples.shape[1:] != (params.config.in_channels, 1, params.config.window_len):
        raise ValueError("dataset samples do not match the checkpoint's input shape")
    indices = np.asarray(indices, dtype=np.int64)
    z, _ = predict_features(params, dataset, indices)
    if z.shape[1] != params.W.shape[0]:
        raise ValueError(f"feature dimension {z.shape[1]} does not match checkpoint D={params.W.shape[0]}")
    path = Path(out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "domain", "class", *[f"z_{j + 1}" for j in range(z.shape[1])]])
        for i, row in zip(indices, z):
            w.writerow([int(i), int(dataset.domain_labels[i]), int(dataset.class_labels[i]), *[repr(float(v)) for v in row]])
    return len(indices)


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(sample_ids, domains, classes, z)`` from an export."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2].astype(np.int64), data[:, 3:]


def separation_ratio(z: np.ndarray, classes: np.ndarray) -> float:
    """Between-class over within-class variance of feature vectors."""
    mu = z.mean(axis=0)
    between = within = 0.0
    for c in np.unique(classes):
        zc = z[classes == c]
        mc = zc.mean(axis=0)
        between += len(zc) * float(np.sum((mc - mu) ** 2))
        within += float(np.sum((zc - mc) ** 2))
    return between / max(within, 1e-300)
