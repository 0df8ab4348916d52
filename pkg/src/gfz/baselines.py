"""Comparison fine-tuning strategies sharing the gradual-freezing engine's
training loop: full fine-tuning, linear probing, LP then full FT, gradual
unfreezing in both directions, L1/L2 starting-point regularization, and
per-layer learning rates driven by relative gradient norms without any
freezing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .nn import ConfigError, Model, set_frozen
from .scheduler import compute_alpha, update_learning_rates

FULL_FT = "full"
LINEAR_PROBE = "lp"
LP_FT = "lp-ft"
GRADUAL_LAST_FIRST = "g-lf"
GRADUAL_FIRST_LAST = "g-fl"
L1_SP = "l1sp"
L2_SP = "l2sp"
AUTO_RGN = "auto-rgn"

BASELINE_KINDS = (FULL_FT, LINEAR_PROBE, LP_FT, GRADUAL_LAST_FIRST,
                  GRADUAL_FIRST_LAST, L1_SP, L2_SP, AUTO_RGN)


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    lp_epochs: int = 3          # LP phase length for lp-ft
    step_epochs: int = 1        # unfreeze cadence for the gradual variants
    a: float = 0.1              # starting-point penalty weight
    b: float = 0.01             # fresh-classifier penalty weight

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"strategy: unknown kind '{self.kind}'")
        if self.step_epochs < 1:
            raise ConfigError("strategy: step_epochs must be >= 1")
        if self.lp_epochs < 1:
            raise ConfigError("strategy: lp_epochs must be >= 1")
        if self.a < 0 or self.b < 0:
            raise ConfigError("strategy: penalty weights must be >= 0")


@dataclass
class SpReference:
    """Frozen copies of the pretrained feature weights, taken at run start."""

    feature_refs: dict[int, list[Tensor]]

    @classmethod
    def capture(cls, model: Model) -> "SpReference":
        refs = {}
        for layer in model.layers[:-1]:
            refs[layer.index] = [p.detach_copy() for p in layer.params]
        return cls(feature_refs=refs)


def sp_penalty(tape: Tape, model: Model, ref: SpReference, spec: StrategySpec) -> Tensor:
    """Starting-point regularizer, differentiated through the tape.

    L1: a * ||w - w0||_1 + b * ||w_head||_1
    L2: a * ||w - w0||_2^2 + b * ||w_head||_2^2
    where w ranges over the layers that existed in the pretrained model and
    w_head over the fresh classifier.
    """
    if spec.kind not in (L1_SP, L2_SP):
        raise ConfigError(f"sp_penalty: not a starting-point strategy: '{spec.kind}'")
    elemwise = tape.absolute if spec.kind == L1_SP else tape.square

    def norm_terms(tensors):
        total = None
        for t in tensors:
            term = tape.sum_all(elemwise(t))
            total = term if total is None else tape.add(total, term)
        return total

    deviations = []
    for layer in model.layers[:-1]:
        for p, p0 in zip(layer.params, ref.feature_refs[layer.index]):
            if p.shape != p0.shape:
                raise ConfigError(f"sp_penalty: reference shape mismatch on '{p.name}'")
            deviations.append(tape.sub(p, p0))
    penalty = tape.scale(norm_terms(deviations), spec.a)
    head = norm_terms(model.classifier.params)
    return tape.add(penalty, tape.scale(head, spec.b))


class _BaseController:
    """Default controller hooks: no penalty, single phase, stop anytime."""

    last_alpha = None

    def phase(self, epoch: int) -> str:
        return "fine-tuning"

    def allow_early_stop(self, epoch: int) -> bool:
        return True

    def penalty(self, tape, model):
        return None

    def on_epoch_end(self, model, epoch, rgn) -> None:
        pass


class FullFtController(_BaseController):
    def on_run_start(self, model):
        set_frozen(model, [l.index for l in model.layers], False)


class LinearProbeController(_BaseController):
    def on_run_start(self, model):
        set_frozen(model, [l.index for l in model.layers[:-1]], True)
        set_frozen(model, [model.classifier_index], False)


class LpFtController(_BaseController):
    """Linear probing for lp_epochs, then full fine-tuning."""

    def __init__(self, lp_epochs: int):
        self.lp_epochs = lp_epochs

    def on_run_start(self, model):
        set_frozen(model, [l.index for l in model.layers[:-1]], True)
        set_frozen(model, [model.classifier_index], False)

    def phase(self, epoch):
        return "linear-probing" if epoch <= self.lp_epochs else "fine-tuning"

    def allow_early_stop(self, epoch):
        return epoch > self.lp_epochs

    def on_epoch_end(self, model, epoch, rgn):
        if epoch == self.lp_epochs:
            set_frozen(model, [l.index for l in model.layers], False)


class GradualUnfreezeController(_BaseController):
    """Unfreeze one functional block every step_epochs.

    last_first starts from the classifier block and walks backwards;
    first_last starts from the stem block and walks forwards (the
    classifier block is then the final one to unfreeze).
    """

    def __init__(self, step_epochs: int, last_first: bool):
        self.step_epochs = step_epochs
        self.last_first = last_first

    def on_run_start(self, model):
        blocks = model.partition.blocks
        self._order = list(reversed(blocks)) if self.last_first else list(blocks)
        set_frozen(model, [l.index for l in model.layers], True)
        set_frozen(model, self._order[0], False)
        self._next = 1

    def on_epoch_end(self, model, epoch, rgn):
        if epoch % self.step_epochs == 0 and self._next < len(self._order):
            set_frozen(model, self._order[self._next], False)
            self._next += 1


class SpController(_BaseController):
    """Full fine-tuning with an L1/L2 starting-point penalty in the loss."""

    def __init__(self, spec: StrategySpec):
        self.spec = spec
        self.ref: SpReference | None = None

    def on_run_start(self, model):
        self.ref = SpReference.capture(model)
        set_frozen(model, [l.index for l in model.layers], False)

    def penalty(self, tape, model):
        return sp_penalty(tape, model, self.ref, self.spec)


class AutoRgnController(_BaseController):
    """Rescale each layer's learning rate by its normalized RGN every epoch;
    nothing ever freezes."""

    def __init__(self):
        self.last_alpha = None

    def on_run_start(self, model):
        set_frozen(model, [l.index for l in model.layers], False)

    def on_epoch_end(self, model, epoch, rgn):
        trainable = np.array([not l.frozen for l in model.layers])
        alpha = compute_alpha(rgn, trainable)
        self.last_alpha = alpha
        update_learning_rates(model, alpha)


def make_controller(spec: StrategySpec):
    if spec.kind == FULL_FT:
        return FullFtController()
    if spec.kind == LINEAR_PROBE:
        return LinearProbeController()
    if spec.kind == LP_FT:
        return LpFtController(spec.lp_epochs)
    if spec.kind == GRADUAL_LAST_FIRST:
        return GradualUnfreezeController(spec.step_epochs, last_first=True)
    if spec.kind == GRADUAL_FIRST_LAST:
        return GradualUnfreezeController(spec.step_epochs, last_first=False)
    if spec.kind in (L1_SP, L2_SP):
        return SpController(spec)
    if spec.kind == AUTO_RGN:
        return AutoRgnController()
    raise ConfigError(f"strategy: unknown kind '{spec.kind}'")


def apply_strategy(model: Model, splits, spec: StrategySpec, config, seed: int,
                   epoch_callback=None):
    """Run one baseline strategy with the shared engine; returns records."""
    from .training import run_training

    controller = make_controller(spec)
    return run_training(model, splits, controller, config=config, seed=seed,
                        epoch_callback=epoch_callback)
