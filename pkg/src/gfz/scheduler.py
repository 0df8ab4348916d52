"""Gradual-freezing schedule: relative gradient norms, per-layer learning
rate modulation, block importance ranking, and progressive freezing.

The schedule has two phases. Pre-conditioning trains only a fresh
classifier on frozen features (linear probing). Gradual freezing then
unfreezes everything and, each epoch, rescales every trainable layer's
learning rate by its normalized relative gradient norm; every
``epsilon_step`` epochs the least-active layers (or the least-active
functional block) are frozen for good. Freezing never reverses.

The per-layer gradient entering the RGN is the epoch mean over all batch
gradients; freeze selection uses the most recent epoch's RGNs only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigError, Model, set_frozen

RGN_WEIGHT_FLOOR = 1e-12

LAYER_PERCENT = "layer-percent"
BLOCK_ONE = "block-one"
BLOCK_ONE_AVG_LR = "block-one-avg-lr"


@dataclass(frozen=True)
class FreezePolicy:
    """Which layers freeze at each freezing step.

    layer-percent: the ceil(ratio * n) trainable freeze-eligible layers
    with the lowest RGN. block-one / block-one-avg-lr: all eligible layers
    of the block with the lowest importance index; the avg-lr variant also
    replaces each layer's learning-rate weight by its block mean.
    """

    kind: str = LAYER_PERCENT
    ratio: float = 0.4

    def __post_init__(self):
        if self.kind not in (LAYER_PERCENT, BLOCK_ONE, BLOCK_ONE_AVG_LR):
            raise ConfigError(f"freeze policy: unknown kind '{self.kind}'")
        if self.kind == LAYER_PERCENT and not (0.0 < self.ratio < 1.0):
            raise ConfigError(f"freeze policy: ratio must be in (0,1), got {self.ratio}")

    @classmethod
    def from_name(cls, name: str, ratio: float = 0.4) -> "FreezePolicy":
        table = {"gfz-l": LAYER_PERCENT, "gfz-b1": BLOCK_ONE, "gfz-b2": BLOCK_ONE_AVG_LR}
        if name not in table:
            raise ConfigError(f"freeze policy: unknown strategy '{name}'")
        return cls(kind=table[name], ratio=ratio)


PHASE_PRECONDITIONING = "pre-conditioning"
PHASE_GRADUAL_FREEZING = "gradual-freezing"


@dataclass
class SchedulerState:
    """Control-flow state of one gradual-freezing run."""

    epoch: int = 0
    phase: str = PHASE_PRECONDITIONING
    rgn: np.ndarray | None = None
    alpha: np.ndarray | None = None
    importance: dict[int, float] = field(default_factory=dict)
    frozen_set: set[int] = field(default_factory=set)
    best_val: float = -math.inf
    best_epoch: int = 0
    no_improve: int = 0


def compute_rgn(model: Model) -> np.ndarray:
    """Per-layer relative gradient norm ||g||_2 / ||w||_2 (guarded divide).

    A layer's g and w are all its parameter tensors (weights and bias)
    concatenated and flattened; norms accumulate in float64. Frozen layers
    carry no gradients and get 0.
    """
    out = np.zeros(len(model.layers), dtype=np.float64)
    for k, layer in enumerate(model.layers):
        if layer.frozen:
            continue
        grads = layer.flat_grads()
        if grads is None:
            continue
        gn = float(np.linalg.norm(grads.astype(np.float64)))
        wn = float(np.linalg.norm(layer.flat_weights().astype(np.float64)))
        out[k] = gn / max(wn, RGN_WEIGHT_FLOOR)
    return out


def compute_alpha(rgn: np.ndarray, trainable_mask: np.ndarray) -> np.ndarray:
    """Learning-rate weights alpha_i = r_i / r_max over trainable layers.

    If every trainable RGN is 0 the weights fall back to 1; frozen layers
    always get 0.
    """
    rgn = np.asarray(rgn, dtype=np.float64)
    mask = np.asarray(trainable_mask, dtype=bool)
    alpha = np.zeros_like(rgn)
    if not mask.any():
        return alpha
    r_max = float(rgn[mask].max())
    if r_max <= 0.0:
        alpha[mask] = 1.0
    else:
        alpha[mask] = rgn[mask] / r_max
    return alpha


def block_mean_alpha(alpha: np.ndarray, model: Model) -> np.ndarray:
    """Replace each trainable layer's alpha by the mean over its block's
    trainable layers (the averaged-learning-rate block variant)."""
    out = np.array(alpha, dtype=np.float64)
    for block in model.partition.blocks:
        idxs = [i - 1 for i in block if not model.layers[i - 1].frozen]
        if idxs:
            out[idxs] = float(np.mean([alpha[i] for i in idxs]))
    return out


def update_learning_rates(model: Model, alpha: np.ndarray) -> None:
    """effective_lr(i) = alpha_i * base_lr(i); frozen layers pinned to 0."""
    for k, layer in enumerate(model.layers):
        layer.effective_lr = 0.0 if layer.frozen else float(alpha[k]) * layer.base_lr


def compute_importance(rgn: np.ndarray, model: Model) -> dict[int, float]:
    """Importance index per block: mean RGN over the block's trainable
    layers. Blocks with no trainable layer are omitted. Keys are 1-based
    block numbers."""
    out: dict[int, float] = {}
    for j, block in enumerate(model.partition.blocks, start=1):
        values = [rgn[i - 1] for i in block if not model.layers[i - 1].frozen]
        if values:
            out[j] = float(np.mean(values))
    return out


def freeze_eligible_indices(model: Model, classifier_exempt: bool = True) -> list[int]:
    eligible = []
    for layer in model.layers:
        if layer.frozen:
            continue
        if classifier_exempt and layer.index == model.classifier_index:
            continue
        eligible.append(layer.index)
    return eligible


def select_freeze_targets(
    model: Model,
    policy: FreezePolicy,
    rgn: np.ndarray,
    classifier_exempt: bool = True,
) -> set[int]:
    """Layer indices to freeze this step; empty when nothing may freeze.

    Ties on RGN or importance break toward the lowest layer/block index.
    If freezing the selection would leave no trainable layer, the selection
    is withheld so the last group keeps training until early stopping.
    """
    eligible = freeze_eligible_indices(model, classifier_exempt)
    if not eligible:
        return set()

    if policy.kind == LAYER_PERCENT:
        k = math.ceil(policy.ratio * len(eligible))
        ranked = sorted(eligible, key=lambda i: (rgn[i - 1], i))
        targets = set(ranked[:k])
    else:
        importance = compute_importance(rgn, model)
        candidates = {
            j: imp for j, imp in importance.items()
            if any(i in eligible for i in model.partition.blocks[j - 1])
        }
        if not candidates:
            return set()
        j_min = min(candidates, key=lambda j: (candidates[j], j))
        targets = {i for i in model.partition.blocks[j_min - 1] if i in eligible}

    trainable = set(model.trainable_indices())
    if targets >= trainable:
        return set()
    return targets


@dataclass
class GfzController:
    """Drives one model through the two-phase gradual-freezing schedule."""

    policy: FreezePolicy
    epsilon_cond: int = 3
    epsilon_step: int = 1
    classifier_exempt: bool = True
    state: SchedulerState = field(default_factory=SchedulerState)

    def __post_init__(self):
        if self.epsilon_cond < 0:
            raise ConfigError("gfz: epsilon_cond must be >= 0")
        if self.epsilon_step < 1:
            raise ConfigError("gfz: epsilon_step must be >= 1")

    def on_run_start(self, model: Model) -> None:
        set_frozen(model, [l.index for l in model.layers[:-1]], True)
        set_frozen(model, [model.classifier_index], False)
        self.state.frozen_set = {l.index for l in model.layers if l.frozen}
        if self.epsilon_cond == 0:
            self._enter_gradual_freezing(model)

    def _enter_gradual_freezing(self, model: Model) -> None:
        set_frozen(model, [l.index for l in model.layers], False)
        self.state.frozen_set = set()
        self.state.phase = PHASE_GRADUAL_FREEZING

    def phase(self, epoch: int) -> str:
        return PHASE_PRECONDITIONING if epoch <= self.epsilon_cond else PHASE_GRADUAL_FREEZING

    def allow_early_stop(self, epoch: int) -> bool:
        return epoch > self.epsilon_cond

    def penalty(self, tape, model):
        return None

    def on_epoch_end(self, model: Model, epoch: int, rgn: np.ndarray) -> None:
        self.state.epoch = epoch
        self.state.rgn = rgn
        if epoch <= self.epsilon_cond:
            if epoch == self.epsilon_cond:
                self._enter_gradual_freezing(model)
            return
        trainable = np.array([not l.frozen for l in model.layers])
        alpha = compute_alpha(rgn, trainable)
        if self.policy.kind == BLOCK_ONE_AVG_LR:
            alpha = block_mean_alpha(alpha, model)
        self.state.alpha = alpha
        update_learning_rates(model, alpha)
        phase2_epoch = epoch - self.epsilon_cond
        if phase2_epoch % self.epsilon_step == 0:
            if freeze_eligible_indices(model, self.classifier_exempt):
                self.state.importance = compute_importance(rgn, model)
                targets = select_freeze_targets(model, self.policy, rgn, self.classifier_exempt)
                if targets:
                    set_frozen(model, sorted(targets), True)
                    self.state.frozen_set |= targets


def run_gfz(model, splits, config, policy: FreezePolicy, seed: int, epoch_callback=None):
    """Run the gradual-freezing schedule with the shared training engine.

    Returns the per-epoch metrics records (layer counts, per-layer RGN /
    alpha / learning rate, validation mAP and AUC, update counts).
    """
    from .training import run_training

    controller = GfzController(
        policy=policy,
        epsilon_cond=config.epsilon_cond,
        epsilon_step=config.epsilon_step,
        classifier_exempt=config.classifier_freeze_exempt,
    )
    return run_training(model, splits, controller, config=config, seed=seed,
                        epoch_callback=epoch_callback)
