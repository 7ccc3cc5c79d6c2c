"""Layer primitives with hand-derived gradients.

Every array in the compute path is a float64 ``numpy.ndarray`` laid out
``[N, C, 1, T]`` (batch, channels, a singleton height axis, time) so shapes
line up with the ``(channels, 1, window)`` sample convention used for
wearable-sensor windows.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class DegenerateInputError(ValueError):
    """Input is too short/small for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4 or x.shape[2] != 1:
        raise DimensionError(f"{name} must be [N, C, 1, T] or [C, 1, T], got {x.shape}")
    return x, False


def conv_output_len(t: int, k: int, stride: int = 1) -> int:
    return (t - k) // stride + 1


# --------------------------------------------------------------------------
# convolution (valid cross-correlation along time)
# --------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation along the time axis.

    ``out[n, c, 0, t] = sum_{i, j} x[n, i, 0, t*stride + j] * kernels[c, i, 0, j]``.
    Accepts a single sample ``[C_in, 1, T]`` or a batch ``[N, C_in, 1, T]``.
    """
    xb, single = _as_batch(x, "input")
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[2] != 1:
        raise DimensionError(f"kernels must be [C_out, C_in, 1, k], got {kernels.shape}")
    c_out, c_in, _, k = kernels.shape
    if xb.shape[1] != c_in:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernels expect {c_in}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t = xb.shape[3]
    if k > t:
        raise DegenerateInputError(f"kernel length {k} exceeds input length {t}")
    t_out = conv_output_len(t, k, stride)
    n = xb.shape[0]
    # [N, C_in, T_out, k] -> [N, T_out, C_in*k]
    win = sliding_window_view(xb[:, :, 0, :], k, axis=2)[:, :, ::stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    out = cols @ kernels.reshape(c_out, c_in * k).T
    out = out.reshape(n, t_out, c_out).transpose(0, 2, 1)[:, :, None, :]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. its input and kernels."""
    xb, single = _as_batch(x, "input")
    gb, _ = _as_batch(grad_out, "grad_out")
    kernels = np.asarray(kernels, dtype=np.float64)
    c_out, c_in, _, k = kernels.shape
    n, _, _, t = xb.shape
    t_out = conv_output_len(t, k, stride)
    if gb.shape != (n, c_out, 1, t_out):
        raise DimensionError(f"grad_out shape {gb.shape} != expected {(n, c_out, 1, t_out)}")

    win = sliding_window_view(xb[:, :, 0, :], k, axis=2)[:, :, ::stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    g2 = gb[:, :, 0, :].transpose(0, 2, 1).reshape(n * t_out, c_out)
    grad_k = (g2.T @ cols).reshape(c_out, c_in, 1, k)

    gcols = (g2 @ kernels.reshape(c_out, c_in * k)).reshape(n, t_out, c_in, k)
    grad_x = np.zeros_like(xb)
    stop = (t_out - 1) * stride + 1
    for j in range(k):
        grad_x[:, :, 0, j : j + stop : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    return (grad_x[0] if single else grad_x), grad_k


# --------------------------------------------------------------------------
# max pooling
# --------------------------------------------------------------------------


def maxpool2d(x: np.ndarray, k: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Max over time windows. Returns the pooled array and the absolute time
    index of each window's maximum (lowest index wins ties)."""
    xb, single = _as_batch(x, "input")
    t = xb.shape[3]
    if t < k:
        raise DegenerateInputError(f"pool size {k} exceeds input length {t}")
    win = sliding_window_view(xb, k, axis=3)[:, :, :, ::stride, :]
    local = np.argmax(win, axis=4)
    out = np.take_along_axis(win, local[..., None], axis=4)[..., 0]
    t_out = out.shape[3]
    idx = local + (np.arange(t_out) * stride)[None, None, None, :]
    out = np.ascontiguousarray(out)
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_len: int) -> np.ndarray:
    gb, single = _as_batch(grad_out, "grad_out")
    idx = argmax[None] if single else argmax
    if idx.shape != gb.shape:
        raise DimensionError("argmax indices do not match grad_out")
    n, c, _, _ = gb.shape
    grad_x = np.zeros((n, c, 1, input_len))
    # add.at: overlapping windows (stride < k) may route to the same index
    ni, ci, hi, _ = np.indices(gb.shape, sparse=True)
    np.add.at(grad_x, (ni, ci, hi, idx), gb)
    return grad_x[0] if single else grad_x


# --------------------------------------------------------------------------
# batch normalization over (N, 1, T) per channel
# --------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[np.ndarray, dict, tuple[np.ndarray, np.ndarray]]:
    """Per-channel batch normalization.

    Returns ``(out, cache, (new_running_mean, new_running_var))``. Inputs are
    never mutated; in eval mode the running statistics are returned unchanged.
    Train mode normalizes with the biased batch variance and folds the
    unbiased estimate into the running variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects [N, C, 1, T], got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"{name} must have shape ({c},), got {np.shape(arr)}")
    g = gamma[None, :, None, None]
    b = beta[None, :, None, None]
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateInputError("train-mode batchnorm needs at least 2 samples")
        m = x.shape[0] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std[None, :, None, None]
        out = g * xhat + b
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var * (m / (m - 1))
        cache = {"mode": "train", "xhat": xhat, "inv_std": inv_std, "gamma": gamma}
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = g * xhat + b
        new_mean, new_var = running_mean, running_var
        cache = {"mode": "eval", "xhat": xhat, "inv_std": inv_std, "gamma": gamma}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    check_finite(out, "batchnorm output")
    return out, cache, (new_mean, new_var)


def batchnorm_backward(grad_out: np.ndarray, cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    if grad_out.shape != xhat.shape:
        raise DimensionError("grad_out does not match cached batchnorm input")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if cache["mode"] == "eval":
        return gxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[3]
    mean_g = gxhat.sum(axis=(0, 2, 3)) / m
    mean_gx = (gxhat * xhat).sum(axis=(0, 2, 3)) / m
    grad_x = (gxhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]) * inv_std[
        None, :, None, None
    ]
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# activations, classifier, loss
# --------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def linear_forward(z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Bias-free classifier: ``o_c = sum_j W[j, c] * z_j`` (``z`` may be batched)."""
    z = np.asarray(z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or z.shape[-1] != W.shape[0]:
        raise DimensionError(f"cannot apply W{W.shape} to z{z.shape}")
    return z @ W


def linear_backward(grad_o: np.ndarray, z: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(grad_z, grad_W)``."""
    if grad_o.shape[-1] != W.shape[1] or grad_o.shape[:-1] != z.shape[:-1]:
        raise DimensionError("grad_o does not match the linear forward call")
    grad_z = grad_o @ W.T
    if z.ndim == 1:
        grad_W = np.outer(z, grad_o)
    else:
        grad_W = z.T @ grad_o
    return grad_z, grad_W


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if n == 0:
        raise DegenerateInputError("empty batch")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    return loss, grad


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def numerical_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max over coordinates of ``|a - n| / max(1, |a|, |n|)``."""
    return relative_error(analytic_grad, numerical_gradient(f, point, h))
