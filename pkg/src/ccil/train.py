"""Adam training of ``L = L_CE + alpha * L_reg`` with momentum mean banks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, NamedTuple

import numpy as np

from . import model as mdl
from .concept import MeanBank, RegularizerKind, bank_shape, bank_values, regularizer_loss, update_mean_bank
from .data import Split, WindowedDataset, fit_normalization
from .evaluation import evaluate
from .numerics import NonFiniteError, softmax_cross_entropy
from .serialization import read_tensor_file, write_tensor_file

logger = logging.getLogger(__name__)

BANK_ORDERS = ("post_loss", "pre_loss")
BATCH_MODES = ("per_domain", "uniform")
STATE_FORMAT = "ccil-train-state-v1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    lam: float = 0.9
    regularizer: RegularizerKind = RegularizerKind.CONCEPT_MATRIX
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 150
    seed: int = 0
    # post_loss: the loss sees the bank from the previous iteration
    bank_update_order: str = "post_loss"
    batch_mode: str = "per_domain"
    decoupled_weight_decay: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "regularizer", RegularizerKind(self.regularizer))
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.bank_update_order not in BANK_ORDERS:
            raise ValueError(f"bank_update_order must be one of {BANK_ORDERS}")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"batch_mode must be one of {BATCH_MODES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.max_epochs < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")

    @property
    def regularized(self) -> bool:
        return self.alpha > 0 and self.regularizer is not RegularizerKind.NONE

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regularizer"] = self.regularizer.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    decoupled: bool = False,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step; returns new parameter arrays.

    Weight decay is the coupled L2 form (``g += wd * p`` before the moments)
    unless ``decoupled`` is set. Non-finite gradients raise before any state
    is touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and decoupled:
            p = p - lr * weight_decay * p
        new[name] = p - step
    return new


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


class LossResult(NamedTuple):
    loss: float
    loss_ce: float
    loss_reg: float
    grads: dict[str, np.ndarray]


def new_bank(config: TrainConfig, model_config: mdl.ModelConfig) -> MeanBank | None:
    if config.regularizer is RegularizerKind.NONE:
        return None
    shape = bank_shape(config.regularizer, model_config.feature_dim, model_config.num_classes)
    return MeanBank.empty(model_config.num_classes, shape, config.lam)


def total_loss(
    params: mdl.ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    bank: MeanBank | None,
    config: TrainConfig,
    update_bank: bool = False,
) -> LossResult:
    """Train-mode forward, ``L_CE + alpha * L_reg`` and all parameter gradients.

    With ``update_bank`` the bank receives this batch's values either before
    or after the regularizer is evaluated, per ``config.bank_update_order``.
    The bank is always a constant inside the loss.
    """
    z, o, cache = mdl.forward(params, x, mode="train")
    ce, grad_o = softmax_cross_entropy(o, y)
    if not config.regularized:
        return LossResult(ce, ce, 0.0, mdl.backward(cache, None, grad_o))
    if bank is None:
        raise ValueError("a regularized objective needs a mean bank")
    kind, alpha = config.regularizer, config.alpha
    values = bank_values(kind, z, o, params.W) if update_bank else None
    if update_bank and config.bank_update_order == "pre_loss":
        update_mean_bank(bank, values, y)
    reg = regularizer_loss(kind, z, o, params.W, y, bank)
    if update_bank and config.bank_update_order == "post_loss":
        update_mean_bank(bank, values, y)
    grad_z = alpha * reg.grad_z if reg.grad_z is not None else None
    if reg.grad_o is not None:
        grad_o = grad_o + alpha * reg.grad_o
    grads = mdl.backward(cache, grad_z, grad_o)
    if reg.grad_W is not None:
        grads["classifier.W"] = grads["classifier.W"] + alpha * reg.grad_W
    return LossResult(ce + alpha * reg.loss, ce, reg.loss, grads)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def epoch_batches(
    rng: np.random.Generator, train_idx: np.ndarray, train_domains: np.ndarray, batch_size: int, mode: str
) -> list[np.ndarray]:
    """Index batches for one epoch.

    ``uniform`` shuffles the pooled sources into ``batch_size`` chunks (a final
    chunk of one sample is dropped). ``per_domain`` draws ``batch_size``
    samples from every source domain per step and concatenates them; shorter
    domains wrap around their own shuffle.
    """
    train_idx = np.asarray(train_idx)
    if mode == "uniform":
        perm = rng.permutation(train_idx)
        batches = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
        return [b for b in batches if len(b) >= 2]
    domains = np.unique(train_domains)
    perms = [rng.permutation(train_idx[train_domains == d]) for d in domains]
    steps = max(math.ceil(len(p) / batch_size) for p in perms)
    batches = []
    for s in range(steps):
        pos = np.arange(s * batch_size, (s + 1) * batch_size)
        batches.append(np.concatenate([np.take(p, pos, mode="wrap") for p in perms]))
    return batches


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    params: mdl.ModelParams
    adam: AdamState
    bank: MeanBank | None
    rng: np.random.Generator
    epoch: int = 0
    best_val_acc: float = -1.0
    best_epoch: int = -1
    best_params: mdl.ModelParams | None = None
    log: list[dict] = field(default_factory=list)


def init_train_state(
    dataset: WindowedDataset, split: Split, model_config: mdl.ModelConfig, config: TrainConfig
) -> TrainState:
    params = mdl.build_model(model_config, config.seed)
    mean, std = fit_normalization(dataset, split.train)
    params.set_input_normalization(mean, std)
    return TrainState(
        params=params,
        adam=AdamState.zeros_like(params.params),
        bank=new_bank(config, model_config),
        rng=np.random.default_rng([config.seed, 1]),
    )


def run_epochs(
    state: TrainState,
    dataset: WindowedDataset,
    split: Split,
    config: TrainConfig,
    until_epoch: int | None = None,
    log_file: IO[str] | None = None,
) -> TrainState:
    """Advance ``state`` to ``until_epoch`` (default ``config.max_epochs``)."""
    if len(split.val) == 0:
        raise ValueError("source validation split is empty")
    until = config.max_epochs if until_epoch is None else until_epoch
    train_idx = np.asarray(split.train)
    train_domains = dataset.domain_labels[train_idx]
    while state.epoch < until:
        t0 = time.perf_counter()
        ce_sum = reg_sum = 0.0
        batches = epoch_batches(state.rng, train_idx, train_domains, config.batch_size, config.batch_mode)
        for step, idx in enumerate(batches):
            x = dataset.samples[idx].astype(np.float64)
            y = dataset.class_labels[idx]
            try:
                res = total_loss(state.params, x, y, state.bank, config, update_bank=True)
                if not math.isfinite(res.loss):
                    raise NonFiniteError("loss is not finite")
                new = adam_step(
                    state.params.params,
                    res.grads,
                    state.adam,
                    config.lr,
                    config.weight_decay,
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                    config.decoupled_weight_decay,
                )
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {state.epoch + 1}, step {step}: {exc}") from exc
            state.params.params = new
            ce_sum += res.loss_ce
            reg_sum += res.loss_reg
        state.epoch += 1
        val_acc = evaluate(state.params, dataset, split.val)
        if val_acc > state.best_val_acc:
            state.best_val_acc = val_acc
            state.best_epoch = state.epoch
            state.best_params = state.params.copy()
        nb = max(len(batches), 1)
        record = {
            "epoch": state.epoch,
            "loss_ce": ce_sum / nb,
            "loss_cms": reg_sum / nb,
            "val_acc": val_acc,
            "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
        }
        state.log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        logger.debug("epoch %d ce=%.4f reg=%.4f val=%.2f", state.epoch, record["loss_ce"], record["loss_cms"], val_acc)
    return state


class TrainResult(NamedTuple):
    best_params: mdl.ModelParams
    log: list[dict]
    state: TrainState


def train_loop(
    dataset: WindowedDataset,
    split: Split,
    model_config: mdl.ModelConfig,
    config: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train from scratch and return the best-validation parameters."""
    state = init_train_state(dataset, split, model_config, config)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w") as fh:
            run_epochs(state, dataset, split, config, log_file=fh)
    else:
        run_epochs(state, dataset, split, config)
    best = state.best_params if state.best_params is not None else state.params
    return TrainResult(best, state.log, state)


# --------------------------------------------------------------------------
# snapshots
# --------------------------------------------------------------------------


def save_train_state(path: str | Path, state: TrainState, config: TrainConfig) -> None:
    arrays = mdl.model_arrays(state.params, "model/")
    if state.best_params is not None:
        arrays.update(mdl.model_arrays(state.best_params, "best/"))
    for k in state.params.params:
        arrays[f"adam_m/{k}"] = state.adam.m[k]
        arrays[f"adam_v/{k}"] = state.adam.v[k]
    if state.bank is not None:
        arrays["bank/means"] = state.bank.means
        arrays["bank/initialized"] = state.bank.initialized.astype(np.float64)
    meta = {
        "format": STATE_FORMAT,
        "model_config": state.params.config.to_dict(),
        "train_config": config.to_dict(),
        "seed": state.params.seed,
        "epoch": state.epoch,
        "best_val_acc": state.best_val_acc,
        "best_epoch": state.best_epoch,
        "adam_step": state.adam.step,
        "bank_momentum": None if state.bank is None else state.bank.momentum,
        "rng_state": state.rng.bit_generator.state,
        "log": state.log,
    }
    write_tensor_file(path, meta, arrays)


def load_train_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    header, arrays = read_tensor_file(path)
    if header.get("format") != STATE_FORMAT:
        raise ValueError(f"{path}: not a training-state snapshot")
    mcfg = mdl.ModelConfig.from_dict(header["model_config"])
    config = TrainConfig.from_dict(header["train_config"])
    params = mdl.model_from_arrays(mcfg, arrays, header["seed"], "model/")
    best = mdl.model_from_arrays(mcfg, arrays, header["seed"], "best/") if header["best_epoch"] >= 0 else None
    adam = AdamState(
        {k: arrays[f"adam_m/{k}"] for k in params.params},
        {k: arrays[f"adam_v/{k}"] for k in params.params},
        header["adam_step"],
    )
    bank = None
    if "bank/means" in arrays:
        bank = MeanBank(arrays["bank/means"], arrays["bank/initialized"] > 0.5, header["bank_momentum"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(params, adam, bank, rng, header["epoch"], header["best_val_acc"], header["best_epoch"], best,
                       header["log"])  # fmt: skip
    return state, config
