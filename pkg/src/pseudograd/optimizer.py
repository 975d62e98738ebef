"""Optimizers: Nesterov-momentum SGD for network weights, plain gradient
descent with its own learning rate for pseudo-logits.

The Nesterov recurrence used here (lookahead form), with g~ = g + wd*theta:

    v     <- mu * v - lr * g~
    theta <- theta + mu * v - lr * g~

With mu = 0 and wd = 0 this reduces to plain SGD. Weight decay applies to
weight matrices only, never to biases and never to pseudo-logits (a decay
term on pseudo-logits would break their sum conservation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, ParamGrads
from .numerics import InvalidInputError
from .pseudo_labels import PseudoTable


@dataclass
class OptState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.lr < 0.0 or self.weight_decay < 0.0:
            raise InvalidInputError("lr and weight_decay must be >= 0")


def init_opt_state(
    params: ModelParams, lr: float, momentum: float = 0.9, weight_decay: float = 0.0
) -> OptState:
    state = OptState(lr, momentum, weight_decay)
    for name, arr, _ in params.tensors():
        state.velocities[name] = np.zeros_like(arr)
    return state


def sgd_nesterov_step(
    params: ModelParams, grads: ParamGrads, state: OptState
) -> tuple[ModelParams, OptState]:
    """One in-place Nesterov SGD step over every parameter tensor."""
    grad_map = {name: (g, is_bias) for name, g, is_bias in grads.tensors()}
    for name, arr, is_bias in params.tensors():
        if name not in grad_map:
            raise InvalidInputError(f"missing gradient for tensor {name}")
        g, _ = grad_map[name]
        if g.shape != arr.shape:
            raise InvalidInputError(
                f"gradient shape {g.shape} != param shape {arr.shape} for {name}"
            )
        g_eff = g if (is_bias or state.weight_decay == 0.0) else g + state.weight_decay * arr
        v = state.velocities[name]
        v *= state.momentum
        v -= state.lr * g_eff
        arr += state.momentum * v - state.lr * g_eff
    return params, state


def pseudo_step(
    table: PseudoTable,
    pseudo_grads: np.ndarray,
    lam: float,
    rows: np.ndarray | None = None,
) -> PseudoTable:
    """Plain gradient descent on pseudo-logits: y~ <- y~ - lam * grad.

    ``pseudo_grads`` aligns with ``rows`` (all rows when omitted). Frozen rows
    are never touched regardless of the gradients supplied. No momentum, no
    weight decay.
    """
    grads = np.asarray(pseudo_grads, dtype=np.float64)
    if rows is None:
        rows = np.arange(table.n_examples)
    rows = np.asarray(rows, dtype=np.int64)
    if grads.shape != (rows.size, table.num_classes):
        raise InvalidInputError(
            f"pseudo_grads shape {grads.shape} != ({rows.size}, {table.num_classes})"
        )
    live = ~table.frozen[rows]
    table.logits[rows[live]] -= lam * grads[live]
    return table


def decay_lr(state: OptState, factor: float) -> OptState:
    """Multiply the network learning rate; velocities are preserved.

    The pseudo-logit learning rate is out of scope here: it stays fixed for a
    whole run.
    """
    if not 0.0 < factor < 1.0:
        raise InvalidInputError("decay factor must be in (0, 1)")
    state.lr *= factor
    return state
