"""MLP backbone with a linear classification head, hand-written backprop.

The backbone maps the raw input through fully connected layers to a feature
``f`` (the last hidden width, or the input itself when there are no hidden
layers). The head computes the pre-softmax activation ``y_hat = W^T f`` and
the prediction ``p_hat = softmax(y_hat)``. The head bias can be disabled so
that the analytic head-weight gradient has the exact bias-free form the
stationarity checks rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import InvalidInputError, RandomStream, softmax_rows

CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")


class InvalidStateError(RuntimeError):
    """A trace/params pair is inconsistent (stale trace, shape drift)."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"
    head_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2:
            raise InvalidInputError("input_dim >= 1 and num_classes >= 2 required")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidInputError("hidden dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass
class ModelParams:
    arch: Architecture
    layer_weights: list[np.ndarray]  # weights[l]: (in_dim, out_dim)
    layer_biases: list[np.ndarray]  # biases[l]: (out_dim,)
    head_w: np.ndarray  # (feature_dim, num_classes)
    head_b: np.ndarray | None  # (num_classes,) or None when head_bias is off

    def tensors(self):
        """Yield (name, array, is_bias) in a fixed order. Optimizer state and
        checkpoints rely on this ordering."""
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            yield f"layer{i}.w", w, False
            yield f"layer{i}.b", b, True
        yield "head.w", self.head_w, False
        if self.head_b is not None:
            yield "head.b", self.head_b, True

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            [w.copy() for w in self.layer_weights],
            [b.copy() for b in self.layer_biases],
            self.head_w.copy(),
            None if self.head_b is None else self.head_b.copy(),
        )


@dataclass
class ParamGrads:
    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray | None

    def tensors(self):
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            yield f"layer{i}.w", w, False
            yield f"layer{i}.b", b, True
        yield "head.w", self.head_w, False
        if self.head_b is not None:
            yield "head.b", self.head_b, True


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass over a batch (rows = examples)."""

    x: np.ndarray  # (B, input_dim)
    pre_acts: list[np.ndarray]  # per hidden layer, (B, width)
    post_acts: list[np.ndarray]  # per hidden layer, (B, width)
    features: np.ndarray  # (B, feature_dim)
    y_hat: np.ndarray  # (B, N)
    p_hat: np.ndarray  # (B, N)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    stream = RandomStream(seed, stream_id=2)
    dims = [arch.input_dim, *arch.hidden_dims]
    lw, lb = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        lw.append(stream.uniform(-bound, bound, size=(d_in, d_out)))
        lb.append(np.zeros(d_out))
    bound = np.sqrt(6.0 / (arch.feature_dim + arch.num_classes))
    head_w = stream.uniform(-bound, bound, size=(arch.feature_dim, arch.num_classes))
    head_b = np.zeros(arch.num_classes) if arch.head_bias else None
    return ModelParams(arch, lw, lb, head_w, head_b)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post**2


def forward_batch(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    """Forward pass over a batch; rows are examples."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise InvalidInputError(
            f"input must be (batch, {params.arch.input_dim}), got {x.shape}"
        )
    h = x
    pre_acts, post_acts = [], []
    for w, b in zip(params.layer_weights, params.layer_biases):
        z = h @ w + b
        h = _activate(z, params.arch.activation)
        pre_acts.append(z)
        post_acts.append(h)
    y_hat = h @ params.head_w
    if params.head_b is not None:
        y_hat = y_hat + params.head_b
    p_hat = softmax_rows(y_hat)
    return ForwardTrace(x, pre_acts, post_acts, h, y_hat, p_hat)


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    """Single-example forward; fields keep a leading batch axis of size 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("forward expects a 1-D input vector")
    return forward_batch(params, x[None, :])


def backward(
    trace: ForwardTrace, grad_y_hat: np.ndarray, params: ModelParams
) -> ParamGrads:
    """Backprop d(sum over batch of loss)/d(theta) given dL/d(y_hat) rows.

    The head-weight gradient column n is sum_b grad_y_hat[b, n] * f[b], which
    reduces to grad_y_hat[n] * f for a single example.
    """
    g = np.asarray(grad_y_hat, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.y_hat.shape:
        raise InvalidStateError(
            f"grad_y_hat shape {g.shape} does not match trace {trace.y_hat.shape}"
        )
    if trace.features.shape[1] != params.head_w.shape[0]:
        raise InvalidStateError("trace feature dim does not match params")
    head_w_grad = trace.features.T @ g
    head_b_grad = g.sum(axis=0) if params.head_b is not None else None
    dh = g @ params.head_w.T
    lw_grads: list[np.ndarray] = [None] * len(params.layer_weights)
    lb_grads: list[np.ndarray] = [None] * len(params.layer_biases)
    for l in reversed(range(len(params.layer_weights))):
        dz = dh * _activate_grad(
            trace.pre_acts[l], trace.post_acts[l], params.arch.activation
        )
        h_prev = trace.x if l == 0 else trace.post_acts[l - 1]
        lw_grads[l] = h_prev.T @ dz
        lb_grads[l] = dz.sum(axis=0)
        dh = dz @ params.layer_weights[l].T
    return ParamGrads(lw_grads, lb_grads, head_w_grad, head_b_grad)


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned JSON checkpoint; float64 round-trips are bit-exact."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "arch": {
            "input_dim": params.arch.input_dim,
            "hidden_dims": list(params.arch.hidden_dims),
            "num_classes": params.arch.num_classes,
            "activation": params.arch.activation,
            "head_bias": params.arch.head_bias,
        },
        "tensors": {
            name: arr.ravel().tolist() for name, arr, _ in params.tensors()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {doc.get('format_version')!r}"
        )
    a = doc["arch"]
    arch = Architecture(
        a["input_dim"],
        tuple(a["hidden_dims"]),
        a["num_classes"],
        a["activation"],
        a["head_bias"],
    )
    params = init_params(arch, seed=0)
    tensors = doc["tensors"]
    for name, arr, _ in params.tensors():
        flat = np.asarray(tensors[name], dtype=np.float64)
        if flat.size != arr.size:
            raise InvalidInputError(f"checkpoint tensor {name} has wrong size")
        arr[...] = flat.reshape(arr.shape)
    return params
