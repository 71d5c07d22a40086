"""Hand-written kernels for masked MLP training on numpy arrays.

Arrays are plain ``np.ndarray``; parameters and activations are float32 in
the model, but every kernel is dtype-generic so gradient checks can run in
float64.  Weights of a masked layer are stored dense and multiplied by the
boolean mask at use.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigurationError

DTYPE = np.float32


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigurationError(msg)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a.ndim == 2 and b.ndim == 2, "matmul expects 2-D operands")
    _check(a.shape[1] == b.shape[0], f"matmul shape mismatch {a.shape} x {b.shape}")
    return a @ b


@contextlib.contextmanager
def single_thread():
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def masked_linear_forward(x, w, mask, bias):
    """``y = x @ (w * mask) + bias``."""
    m = mask.bits if hasattr(mask, "bits") else mask
    _check(x.ndim == 2 and x.shape[1] == w.shape[0], f"input {x.shape} does not fit weight {w.shape}")
    _check(m.shape == w.shape, f"mask {m.shape} does not match weight {w.shape}")
    _check(bias.shape == (w.shape[1],), "bias length must equal output width")
    return x @ (w * m) + bias


def masked_linear_backward(x, w, mask, upstream):
    """Return ``(grad_x, grad_w, grad_bias)``; ``grad_w`` is zero off-mask."""
    m = mask.bits if hasattr(mask, "bits") else mask
    _check(x.ndim == 2 and x.shape[1] == w.shape[0], f"input {x.shape} does not fit weight {w.shape}")
    _check(m.shape == w.shape, f"mask {m.shape} does not match weight {w.shape}")
    _check(upstream.shape == (x.shape[0], w.shape[1]), "upstream gradient has the wrong shape")
    grad_w = x.T @ upstream
    grad_w *= m
    grad_x = upstream @ (w * m).T
    return grad_x, grad_w, upstream.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    # derivative at exactly 0 is taken as 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    b, c = logits.shape
    _check(labels.shape == (b,), "need one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigurationError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= b
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def like(cls, param, learning_rate=1e-3, **kw):
        return cls(np.zeros_like(param), np.zeros_like(param), learning_rate=learning_rate, **kw)


def adam_step(param, grad, state: AdamState, mask=None):
    """One in-place Adam update with bias correction.

    With a mask, inactive entries of ``param`` and of both moments are held
    at exactly zero whatever ``grad`` contains there.
    """
    _check(param.shape == grad.shape == state.first_moment.shape, "adam_step shapes disagree")
    m = None
    if mask is not None:
        m = mask.bits if hasattr(mask, "bits") else mask
        _check(m.shape == param.shape, "mask does not match parameter")
        grad = grad * m
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    mom1, mom2 = state.first_moment, state.second_moment
    scratch = np.empty_like(mom1)
    mom1 *= b1
    np.multiply(grad, 1 - b1, out=scratch)
    mom1 += scratch
    mom2 *= b2
    np.square(grad, out=scratch)
    scratch *= 1 - b2
    mom2 += scratch
    # lr * mhat / (sqrt(vhat) + eps), with both corrections folded into lr_t
    # and eps rescaled by sqrt(1 - b2^t)
    lr_t = state.learning_rate * math.sqrt(1 - b2**t) / (1 - b1**t)
    np.sqrt(mom2, out=scratch)
    scratch += state.epsilon * math.sqrt(1 - b2**t)
    np.divide(mom1, scratch, out=scratch)
    scratch *= lr_t
    param -= scratch
    if m is not None:
        param *= m
        mom1 *= m
        mom2 *= m
    return param, state


def kaiming_uniform(gen: np.random.Generator, shape, mask=None, gain=math.sqrt(2.0), dtype=DTYPE):
    """Uniform init with bound ``gain * sqrt(3 / fan_in)``.

    Fan-in is counted per output column over active incoming edges when a
    mask is given, so sparse layers keep the activation scale of dense ones.
    """
    n_in, n_out = shape
    if mask is None:
        fan_in = np.full(n_out, n_in, dtype=np.float64)
    else:
        m = mask.bits if hasattr(mask, "bits") else mask
        fan_in = np.maximum(m.sum(axis=0), 1).astype(np.float64)
    bound = gain * np.sqrt(3.0 / fan_in)
    w = gen.uniform(-1.0, 1.0, size=shape) * bound[None, :]
    if mask is not None:
        w = w * m
    return w.astype(dtype)


# Checkpoint file: a single .npz archive.  ``__meta__`` holds a JSON header
# with the format version; every other entry is a named array.
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    header = dict(meta, format="g2gnet-checkpoint", version=CHECKPOINT_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} is not a g2gnet checkpoint")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != "g2gnet-checkpoint":
        raise CheckpointError(f"{path} is not a g2gnet checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return arrays, meta
