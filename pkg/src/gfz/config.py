"""Experiment configuration: defaults, and a flat ``key = value`` text
format with dotted keys (diff-friendly, trivially parseable).

Example file:

    run.strategy = gfz-l
    run.seeds = 101,202,303
    gfz.epsilon_step = 1
    data.target.shift.hue = 100
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import DatasetSpec, DomainShift, source_spec, target_spec
from .nn import ConfigError

STRATEGY_NAMES = ("gfz-l", "gfz-b1", "gfz-b2", "full", "lp", "lp-ft",
                  "g-lf", "g-fl", "l1sp", "l2sp", "auto-rgn")


@dataclass
class ExperimentConfig:
    strategy: str = "gfz-l"
    seeds: tuple[int, ...] = (101, 202, 303)
    base_lr: float = 1e-4          # alternative setting: 5e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    augment: bool = True

    epsilon_cond: int = 3
    epsilon_step: int = 1
    freeze_ratio: float = 0.4
    classifier_freeze_exempt: bool = True

    arch: str = "mini-resnet"
    widths: tuple[int, ...] = (12, 24, 48)

    pretrain_epochs: int = 25
    pretrain_lr: float = 2e-3
    pretrain_seed: int = 7
    pretrain_patience: int = 10

    sp_a: float = 0.1
    sp_b: float = 0.01
    lpft_epochs: int = 3
    gu_step_epochs: int = 1

    source: DatasetSpec = field(default_factory=source_spec)
    target: DatasetSpec = field(default_factory=target_spec)

    def validate(self) -> None:
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"config: unknown strategy '{self.strategy}' "
                              f"(choose from {', '.join(STRATEGY_NAMES)})")
        if not self.seeds:
            raise ConfigError("config: at least one seed required")
        if self.base_lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("config: learning rates must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("config: batch_size, max_epochs, patience must be >= 1")
        if self.epsilon_cond < 0:
            raise ConfigError("config: gfz.epsilon_cond must be >= 0")
        if self.epsilon_step < 1:
            raise ConfigError("config: gfz.epsilon_step must be >= 1")
        if self.epsilon_step > self.patience:
            raise ConfigError(
                f"config: freezing interval epsilon_step={self.epsilon_step} must be <= "
                f"patience={self.patience}, otherwise early stopping can halt training "
                f"before the next freezing step")
        if not (0.0 < self.freeze_ratio < 1.0):
            raise ConfigError("config: gfz.freeze_ratio must be in (0,1)")
        if self.arch not in ("mini-resnet", "mlp"):
            raise ConfigError(f"config: unknown arch '{self.arch}'")
        self.source.validate()
        self.target.validate()


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _parse_value(raw: str):
    if "," in raw:
        return tuple(_parse_scalar(part) for part in raw.split(",") if part.strip())
    return _parse_scalar(raw)


def parse_config_text(text: str) -> ExperimentConfig:
    pairs: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got '{line.strip()}'")
        key, _, raw = stripped.partition("=")
        pairs[key.strip()] = _parse_value(raw)
    return config_from_pairs(pairs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


_RUN_KEYS = {
    "run.strategy": "strategy",
    "run.seeds": "seeds",
    "run.base_lr": "base_lr",
    "run.batch_size": "batch_size",
    "run.max_epochs": "max_epochs",
    "run.patience": "patience",
    "run.augment": "augment",
    "gfz.epsilon_cond": "epsilon_cond",
    "gfz.epsilon_step": "epsilon_step",
    "gfz.freeze_ratio": "freeze_ratio",
    "gfz.classifier_freeze_exempt": "classifier_freeze_exempt",
    "model.arch": "arch",
    "model.widths": "widths",
    "pretrain.epochs": "pretrain_epochs",
    "pretrain.base_lr": "pretrain_lr",
    "pretrain.seed": "pretrain_seed",
    "pretrain.patience": "pretrain_patience",
    "sp.a": "sp_a",
    "sp.b": "sp_b",
    "lpft.epochs": "lpft_epochs",
    "gu.step_epochs": "gu_step_epochs",
}

_DATASET_KEYS = {
    "samples": "sample_count",
    "image_size": "image_size",
    "classes": "class_count",
    "prevalence": "prevalence",
    "seed": "seed",
    "background": "background",
    "split": "split",
}

_SHIFT_KEYS = {
    "hue": "hue_degrees",
    "brightness": "brightness",
    "noise": "noise_sigma",
    "background": "background_texture",
}


def _as_tuple(value):
    return value if isinstance(value, tuple) else (value,)


def config_from_pairs(pairs: dict[str, object]) -> ExperimentConfig:
    cfg = default_config()
    updates: dict[str, object] = {}
    dataset_updates: dict[str, dict] = {"source": {}, "target": {}}
    shift_updates: dict[str, dict] = {"source": {}, "target": {}}

    for key, value in pairs.items():
        if key in _RUN_KEYS:
            attr = _RUN_KEYS[key]
            if attr in ("seeds", "widths"):
                value = tuple(int(v) for v in _as_tuple(value))
            updates[attr] = value
            continue
        parts = key.split(".")
        if len(parts) >= 3 and parts[0] == "data" and parts[1] in ("source", "target"):
            side = parts[1]
            if len(parts) == 3 and parts[2] in _DATASET_KEYS:
                attr = _DATASET_KEYS[parts[2]]
                if attr in ("prevalence", "split"):
                    value = tuple(float(v) for v in _as_tuple(value))
                if attr == "cooccurrence" and value is not None:
                    value = tuple(value)
                dataset_updates[side][attr] = value
                continue
            if len(parts) == 3 and parts[2] == "cooccurrence":
                if value is None:
                    dataset_updates[side]["cooccurrence"] = None
                else:
                    a, b, extra = _as_tuple(value)
                    dataset_updates[side]["cooccurrence"] = (int(a), int(b), float(extra))
                continue
            if len(parts) == 4 and parts[2] == "shift" and parts[3] in _SHIFT_KEYS:
                shift_updates[side][_SHIFT_KEYS[parts[3]]] = value
                continue
        raise ConfigError(f"config: unknown key '{key}'")

    for side in ("source", "target"):
        spec: DatasetSpec = getattr(cfg, side)
        if shift_updates[side]:
            dataset_updates[side]["shift"] = replace(spec.shift, **shift_updates[side])
        if dataset_updates[side]:
            updates[side] = replace(spec, **dataset_updates[side])

    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    """Serialize back to the flat text format (used for run records)."""

    def fmt(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(fmt(v) for v in value)
        if value is None:
            return "none"
        return repr(value) if isinstance(value, float) else str(value)

    lines = []
    for key, attr in _RUN_KEYS.items():
        lines.append(f"{key} = {fmt(getattr(cfg, attr))}")
    for side in ("source", "target"):
        spec: DatasetSpec = getattr(cfg, side)
        for key, attr in _DATASET_KEYS.items():
            lines.append(f"data.{side}.{key} = {fmt(getattr(spec, attr))}")
        if spec.cooccurrence is not None:
            lines.append(f"data.{side}.cooccurrence = {fmt(tuple(spec.cooccurrence))}")
        for key, attr in _SHIFT_KEYS.items():
            lines.append(f"data.{side}.shift.{key} = {fmt(getattr(spec.shift, attr))}")
    return "\n".join(lines) + "\n"
