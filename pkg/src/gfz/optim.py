"""Adam optimizer with independently settable per-layer learning rates.

Frozen layers are skipped entirely: their parameters and their moment
buffers stay untouched while frozen, and the retained moments give
continuity to strategies that unfreeze layers later. The step counter
advances exactly once per optimizer step regardless of freeze flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Model


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    # id(param) -> [param, m, v]; the param ref pins the id
    moments: dict[int, list] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for p in model.parameters():
            state.moments[id(p)] = [p, np.zeros_like(p.data), np.zeros_like(p.data)]
        return state


def adam_step(model: Model, state: AdamState) -> None:
    """One bias-corrected Adam update on every unfrozen layer.

    The step size of layer i is its effective_lr; update arithmetic runs in
    float64 and is cast back to the float32 parameter storage.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for layer in model.layers:
        if layer.frozen:
            continue
        lr = layer.effective_lr
        for p in layer.params:
            if p.grad is None:
                raise ValueError(f"adam_step: missing grad buffer on unfrozen param '{p.name}'")
            slot = state.moments.get(id(p))
            if slot is None:
                slot = [p, np.zeros_like(p.data), np.zeros_like(p.data)]
                state.moments[id(p)] = slot
            g = p.grad.astype(np.float64)
            m = slot[1].astype(np.float64) * b1 + (1.0 - b1) * g
            v = slot[2].astype(np.float64) * b2 + (1.0 - b2) * g * g
            slot[1][...] = m
            slot[2][...] = v
            update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.data[...] = p.data.astype(np.float64) - update


def set_layer_lr(model: Model, layer_index: int, lr: float) -> None:
    if lr < 0:
        raise ValueError(f"set_layer_lr: negative learning rate {lr}")
    model.layer(layer_index).effective_lr = float(lr)


def updated_param_count(model: Model) -> int:
    """Parameter elements that receive an update on one optimizer step."""
    return sum(l.param_count() for l in model.layers if not l.frozen)
