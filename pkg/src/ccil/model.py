"""Two-block convolutional backbone with a bias-free linear classifier."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .serialization import read_tensor_file, write_tensor_file

LAYERS = ("conv", "act", "pool", "bn")
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "ccil-model-v1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    window_len: int
    kernel_len: int
    num_classes: int
    channels_block1: int = 16
    channels_block2: int = 32
    activation: str = "relu"
    block_order: tuple[str, ...] = ("conv", "act", "pool", "bn")
    pool_size: int = 2
    pool_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_order", tuple(self.block_order))
        for name in ("in_channels", "window_len", "kernel_len", "num_classes", "channels_block1", "channels_block2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if sorted(self.block_order) != sorted(LAYERS) or self.block_order[0] != "conv":
            raise ValueError(f"block_order must be a permutation of {LAYERS} starting with 'conv'")

    @property
    def time_lengths(self) -> list[int]:
        """Time extent after each block (input length first)."""
        lengths = [self.window_len]
        t = self.window_len
        for _ in range(2):
            for layer in self.block_order:
                if layer == "conv":
                    t = nx.conv_output_len(t, self.kernel_len) if t >= self.kernel_len else 0
                elif layer == "pool":
                    t = nx.conv_output_len(t, self.pool_size, self.pool_stride) if t >= self.pool_size else 0
                if t <= 0:
                    return lengths + [0]
            lengths.append(t)
        return lengths

    @property
    def feature_dim(self) -> int:
        return self.channels_block2 * self.time_lengths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_order"] = list(self.block_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# sample shapes and kernel sizes per evaluation setting
PRESETS: dict[str, ModelConfig] = {
    "dsads": ModelConfig(in_channels=45, window_len=125, kernel_len=9, num_classes=19),
    "pamap2": ModelConfig(in_channels=27, window_len=200, kernel_len=9, num_classes=12),
    "usc_had": ModelConfig(in_channels=6, window_len=200, kernel_len=6, num_classes=12),
    "dsads_position": ModelConfig(in_channels=9, window_len=125, kernel_len=9, num_classes=19),
    "cross_dataset": ModelConfig(in_channels=6, window_len=50, kernel_len=6, num_classes=6),
}


@dataclass
class ModelParams:
    """Trainable tensors (``params``) plus non-trainable ``buffers``.

    Trainable names: ``block{1,2}.kernel``, ``block{1,2}.gamma``,
    ``block{1,2}.beta`` and ``classifier.W`` (shape ``[D, C]``). Buffers hold
    batch-norm running statistics and the per-channel input normalization.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def W(self) -> np.ndarray:
        return self.params["classifier.W"]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.seed,
            copy.deepcopy(self.extra),
        )

    def set_input_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        c = self.config.in_channels
        mean = np.asarray(mean, dtype=np.float64).reshape(c)
        std = np.asarray(std, dtype=np.float64).reshape(c)
        if np.any(std <= 0):
            raise ValueError("normalization std must be positive")
        self.buffers["input.mean"] = mean.copy()
        self.buffers["input.std"] = std.copy()


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded uniform fan-in initialization; batch-norm gamma=1, beta=0."""
    d = config.feature_dim
    if d <= 0:
        raise nx.DegenerateInputError(
            f"window_len={config.window_len} too short for kernel {config.kernel_len} and pooling"
        )
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for b, c_out in ((1, config.channels_block1), (2, config.channels_block2)):
        bound = 1.0 / np.sqrt(c_in * config.kernel_len)
        params[f"block{b}.kernel"] = rng.uniform(-bound, bound, size=(c_out, c_in, 1, config.kernel_len))
        params[f"block{b}.gamma"] = np.ones(c_out)
        params[f"block{b}.beta"] = np.zeros(c_out)
        buffers[f"block{b}.running_mean"] = np.zeros(c_out)
        buffers[f"block{b}.running_var"] = np.ones(c_out)
        c_in = c_out
    bound = 1.0 / np.sqrt(d)
    params["classifier.W"] = rng.uniform(-bound, bound, size=(d, config.num_classes))
    buffers["input.mean"] = np.zeros(config.in_channels)
    buffers["input.std"] = np.ones(config.in_channels)
    return ModelParams(config, params, buffers, seed)


def forward(
    params: ModelParams, batch: np.ndarray, mode: str = "eval"
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns ``(z, o, cache)`` with ``z: [N, D]`` and ``o = z @ W: [N, C]``.

    Train mode writes the updated batch-norm running statistics back into
    ``params.buffers``; eval mode leaves ``params`` untouched.
    """
    cfg = params.config
    x = np.asarray(batch, dtype=np.float64)
    expected = (cfg.in_channels, 1, cfg.window_len)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise nx.DimensionError(f"batch must be [N, {expected[0]}, 1, {expected[2]}], got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    buf = params.buffers
    h = (x - buf["input.mean"][None, :, None, None]) / buf["input.std"][None, :, None, None]

    layer_caches = []
    new_stats = {}
    for b in (1, 2):
        for layer in cfg.block_order:
            if layer == "conv":
                k = params.params[f"block{b}.kernel"]
                layer_caches.append(("conv", b, h, k))
                h = nx.conv2d_forward(h, k)
            elif layer == "act":
                layer_caches.append(("act", b, h, None))
                if cfg.activation == "relu":
                    h = nx.relu_forward(h)
            elif layer == "pool":
                out, idx = nx.maxpool2d(h, cfg.pool_size, cfg.pool_stride)
                layer_caches.append(("pool", b, h.shape[3], idx))
                h = out
            else:
                h, bn_cache, stats = nx.batchnorm_forward(
                    h,
                    params.params[f"block{b}.gamma"],
                    params.params[f"block{b}.beta"],
                    buf[f"block{b}.running_mean"],
                    buf[f"block{b}.running_var"],
                    mode=mode,
                )
                layer_caches.append(("bn", b, bn_cache, None))
                new_stats[b] = stats
    feat_shape = h.shape
    z = h.reshape(h.shape[0], -1)
    W = params.params["classifier.W"]
    o = nx.linear_forward(z, W)
    nx.check_finite(z, "features")
    nx.check_finite(o, "logits")
    if mode == "train":
        for b, (rm, rv) in new_stats.items():
            buf[f"block{b}.running_mean"] = rm
            buf[f"block{b}.running_var"] = rv
    cache = {"layers": layer_caches, "feat_shape": feat_shape, "z": z, "W": W, "activation": cfg.activation}
    return z, o, cache


def backward(cache: dict, grad_z: np.ndarray | None, grad_o: np.ndarray | None) -> dict[str, np.ndarray]:
    """Accumulate gradients arriving at the features and at the logits.

    ``grad_z`` carries terms that touch the features directly (invariance
    regularizers), ``grad_o`` the terms that flow through the classifier.
    Either may be ``None``. Returns gradients keyed like ``ModelParams.params``.
    """
    z, W = cache["z"], cache["W"]
    if grad_z is None:
        grad_z = np.zeros_like(z)
    if grad_o is None:
        grad_o = np.zeros((z.shape[0], W.shape[1]))
    if grad_z.shape != z.shape or grad_o.shape != (z.shape[0], W.shape[1]):
        raise nx.DimensionError("gradient shapes do not match the cached forward pass")
    gz_from_o, grad_W = nx.linear_backward(grad_o, z, W)
    g = (grad_z + gz_from_o).reshape(cache["feat_shape"])
    grads: dict[str, np.ndarray] = {"classifier.W": grad_W}
    for kind, b, a, extra in reversed(cache["layers"]):
        if kind == "bn":
            g, gg, gb = nx.batchnorm_backward(g, a)
            grads[f"block{b}.gamma"] = gg
            grads[f"block{b}.beta"] = gb
        elif kind == "pool":
            g = nx.maxpool2d_backward(g, extra, a)
        elif kind == "act":
            if cache["activation"] == "relu":
                g = nx.relu_backward(g, a)
        else:
            g, gk = nx.conv2d_backward(g, a, extra)
            grads[f"block{b}.kernel"] = gk
    return grads


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def model_arrays(params: ModelParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {f"{prefix}param/{k}": v for k, v in params.params.items()}
    out.update({f"{prefix}buffer/{k}": v for k, v in params.buffers.items()})
    return out


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], seed: int, prefix: str = "") -> ModelParams:
    p, b = {}, {}
    for key, arr in arrays.items():
        if not key.startswith(prefix):
            continue
        kind, name = key[len(prefix) :].split("/", 1)
        (p if kind == "param" else b)[name] = arr
    template = build_model(config, seed)
    for name, ref in {**template.params, **template.buffers}.items():
        src = p.get(name, b.get(name))
        if src is None or src.shape != ref.shape:
            raise ValueError(f"checkpoint tensor {name!r} missing or mis-shaped")
    return ModelParams(config, p, b, seed)


def save_checkpoint(path: str | Path, params: ModelParams, epoch: int | None = None, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "epoch": epoch,
        "extra": extra or params.extra,
    }
    write_tensor_file(path, meta, model_arrays(params))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    header, arrays = read_tensor_file(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(header["config"])
    params = model_from_arrays(cfg, arrays, header["seed"])
    params.extra = header.get("extra") or {}
    return params, header
