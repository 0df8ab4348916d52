"""Batch experiment runner: pretraining, fine-tuning under any strategy,
ablation sweeps, and report emission.

All outputs are plain CSV/JSON (plus SVG heatmaps); float cells use
``repr`` so identical runs produce byte-identical files. Independent seed
runs and sweep grid points can execute in parallel processes, capped by
the GFZ_THREADS environment variable.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .baselines import FullFtController, StrategySpec, apply_strategy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, format_config
from .data import generate_dataset, split_dataset
from .metrics import pr_curve, relative_map
from .nn import (ConfigError, Model, build_mini_resnet, build_mlp, predict_scores,
                 replace_classifier)
from .scheduler import FreezePolicy, run_gfz
from .training import SplitData, evaluate, run_training

GFZ_STRATEGIES = ("gfz-l", "gfz-b1", "gfz-b2")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build_splits(spec) -> SplitData:
    images, labels = generate_dataset(spec)
    (tr, va, te) = split_dataset(images, labels, spec.split, seed=spec.seed)
    return SplitData(train_x=tr[0], train_y=tr[1], val_x=va[0], val_y=va[1],
                     test_x=te[0], test_y=te[1])


def build_model(config: ExperimentConfig, class_count: int, seed: int) -> Model:
    if config.arch == "mini-resnet":
        return build_mini_resnet(class_count, config.widths, seed=seed)
    size = config.source.image_size
    return build_mlp(class_count, config.widths, input_dim=3 * size * size, seed=seed)


def run_strategy(model: Model, splits: SplitData, strategy: str,
                 config: ExperimentConfig, seed: int, epoch_callback=None):
    """Dispatch one strategy run on a prepared model; returns records."""
    if strategy in GFZ_STRATEGIES:
        policy = FreezePolicy.from_name(strategy, ratio=config.freeze_ratio)
        return run_gfz(model, splits, config, policy, seed, epoch_callback=epoch_callback)
    spec = StrategySpec(kind=strategy, lp_epochs=config.lpft_epochs,
                        step_epochs=config.gu_step_epochs, a=config.sp_a, b=config.sp_b)
    return apply_strategy(model, splits, spec, config, seed, epoch_callback=epoch_callback)


# ------------------------------------------------------------- CSV output

def records_to_csv(records, layer_names) -> str:
    n_classes = len(records[0].per_class_ap)
    header = ["epoch", "phase", "train_loss", "val_map", "val_auc"]
    header += [f"ap_{c}" for c in range(n_classes)]
    header += ["trainable_layer_count", "cumulative_updated_params"]
    for name in layer_names:
        header += [f"trained.{name}", f"rgn.{name}", f"alpha.{name}", f"lr.{name}"]
    lines = [",".join(header)]
    for r in records:
        row = [str(r.epoch), r.phase, _fmt(r.train_loss), _fmt(r.val_map), _fmt(r.val_auc)]
        row += [_fmt(ap) for ap in r.per_class_ap]
        row += [str(r.trainable_layer_count), str(r.cumulative_updated_params)]
        for i in range(len(layer_names)):
            row += [_fmt(r.layer_trained[i]), _fmt(r.rgn[i]), _fmt(r.alpha[i]),
                    _fmt(r.effective_lr[i])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def heatmap_to_csv(records, layer_names) -> str:
    header = ["layer"] + [f"epoch_{r.epoch}" for r in records]
    lines = [",".join(header)]
    for i, name in enumerate(layer_names):
        lines.append(",".join([name] + ["1" if r.layer_trained[i] else "0" for r in records]))
    return "\n".join(lines) + "\n"


def write_pr_curves(out_dir, model: Model, x, y, batch_size: int) -> None:
    scores = predict_scores(model, x, batch_size)
    for c in range(y.shape[1]):
        if y[:, c].sum() == 0:
            continue
        points = pr_curve(scores[:, c], y[:, c])
        lines = ["recall,precision"] + [f"{_fmt(r)},{_fmt(p)}" for r, p in points]
        with open(os.path.join(out_dir, f"pr_class_{c}.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- pretrain

def cmd_pretrain(config: ExperimentConfig, out_path) -> dict:
    """Train the backbone from scratch on the source task, save a checkpoint."""
    config.validate()
    splits = build_splits(config.source)
    model = build_model(config, config.source.class_count, seed=config.pretrain_seed)
    pre_cfg = replace(config, base_lr=config.pretrain_lr,
                      max_epochs=config.pretrain_epochs, patience=config.pretrain_patience)
    records = run_training(model, splits, FullFtController(), config=pre_cfg,
                           seed=config.pretrain_seed)
    if not math.isfinite(records[-1].train_loss):
        raise FloatingPointError("pretraining diverged: non-finite loss")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    save_checkpoint(out_path, model)
    test_map, test_auc, _ = evaluate(model, splits.test_x, splits.test_y, config.batch_size)
    summary = {
        "epochs": len(records),
        "final_train_loss": records[-1].train_loss,
        "final_val_map": records[-1].val_map,
        "test_map": test_map,
        "test_auc": test_auc,
        "checkpoint": str(out_path),
    }
    return summary


# ---------------------------------------------------------------- finetune

def _classifier_seed(seed: int) -> int:
    return int(np.random.SeedSequence((seed, 3)).generate_state(1)[0])


def finetune_one_seed(config: ExperimentConfig, checkpoint_path, strategy: str,
                      seed: int, out_dir=None, epoch_callback=None) -> dict:
    """Load checkpoint, swap classifier, run one strategy for one seed."""
    splits = build_splits(config.target)
    model = load_checkpoint(checkpoint_path)
    replace_classifier(model, config.target.class_count, seed=_classifier_seed(seed))
    records = run_strategy(model, splits, strategy, config, seed, epoch_callback=epoch_callback)
    layer_names = [l.name for l in model.layers]
    test_map, test_auc, _ = evaluate(model, splits.test_x, splits.test_y, config.batch_size)
    result = {
        "seed": seed,
        "strategy": strategy,
        "epochs": len(records),
        "final_val_map": records[-1].val_map,
        "final_val_auc": records[-1].val_auc,
        "best_val_map": max(r.val_map for r in records),
        "test_map": test_map,
        "test_auc": test_auc,
        "cumulative_updated_params": records[-1].cumulative_updated_params,
    }
    if out_dir is not None:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        with open(os.path.join(seed_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(records_to_csv(records, layer_names))
        with open(os.path.join(seed_dir, "heatmap.csv"), "w", encoding="utf-8") as fh:
            fh.write(heatmap_to_csv(records, layer_names))
        write_pr_curves(seed_dir, model, splits.test_x, splits.test_y, config.batch_size)
    return result


def _seed_worker(args):
    config, checkpoint_path, strategy, seed, out_dir = args
    return finetune_one_seed(config, checkpoint_path, strategy, seed, out_dir)


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("GFZ_THREADS", "1")))
    except ValueError:
        return 1


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def cmd_finetune(config: ExperimentConfig, checkpoint_path, out_dir,
                 strategy: str | None = None, seeds=None) -> dict:
    """Run the selected strategy once per seed; emit CSVs and a JSON summary."""
    config.validate()
    strategy = strategy or config.strategy
    seeds = tuple(seeds) if seeds else config.seeds
    strat_dir = os.path.join(out_dir, strategy)
    os.makedirs(strat_dir, exist_ok=True)
    with open(os.path.join(strat_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(replace(config, strategy=strategy, seeds=seeds)))

    jobs = [(config, checkpoint_path, strategy, seed, strat_dir) for seed in seeds]
    workers = min(_max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_seed_worker, jobs))
    else:
        results = [_seed_worker(job) for job in jobs]

    val_mean, val_std = _mean_std([r["final_val_map"] for r in results])
    test_mean, test_std = _mean_std([r["test_map"] for r in results])
    auc_mean, auc_std = _mean_std([r["test_auc"] for r in results])
    summary = {
        "strategy": strategy,
        "seeds": list(seeds),
        "runs": results,
        "final_val_map_mean": val_mean,
        "final_val_map_std": val_std,
        "test_map_mean": test_mean,
        "test_map_std": test_std,
        "test_auc_mean": auc_mean,
        "test_auc_std": auc_std,
    }
    with open(os.path.join(strat_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ------------------------------------------------------------------ sweep

SWEEP_AXES = {
    "eps_cond": ((0, 3, 6, 9, 12), "epsilon_cond"),
    "eps_step": ((1, 2, 3, 4, 5), "epsilon_step"),
    "freeze_ratio": ((0.2, 0.3, 0.4, 0.5, 0.6), "freeze_ratio"),
}


def cmd_sweep(config: ExperimentConfig, checkpoint_path, axis: str, out_dir,
              values=None) -> list[dict]:
    """Ablate one schedule parameter; one cmd_finetune per grid point."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep: unknown axis '{axis}' (choose from {', '.join(SWEEP_AXES)})")
    default_values, attr = SWEEP_AXES[axis]
    values = tuple(values) if values else default_values
    if axis == "eps_step":
        for v in values:
            if v > config.patience:
                raise ConfigError(
                    f"sweep: freezing interval epsilon_step={v} must be <= "
                    f"patience={config.patience}, otherwise early stopping can halt training "
                    f"before the next freezing step")
    rows = []
    for value in values:
        point_cfg = replace(config, **{attr: value})
        point_dir = os.path.join(out_dir, f"{axis}_{value}")
        summary = cmd_finetune(point_cfg, checkpoint_path, point_dir)
        rows.append({"axis": axis, "value": value,
                     "map_mean": summary["final_val_map_mean"],
                     "map_std": summary["final_val_map_std"]})
    lines = ["axis,value,map_mean,map_std"]
    for row in rows:
        lines.append(f"{row['axis']},{_fmt(row['value'])},{_fmt(row['map_mean'])},{_fmt(row['map_std'])}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows


# ----------------------------------------------------------------- report

def cmd_report(run_dir, out_dir=None) -> dict:
    """Aggregate strategy summaries under run_dir into report artifacts:
    a relative-mAP table against the full-FT baseline, per-strategy layer
    heatmaps (CSV copied to SVG), and consolidated PR-curve files."""
    out_dir = out_dir or os.path.join(run_dir, "report")
    summaries = {}
    for entry in sorted(os.listdir(run_dir)):
        path = os.path.join(run_dir, entry, "summary.json")
        if os.path.isfile(path):
            with open(path, "r", encoding="utf-8") as fh:
                summaries[entry] = json.load(fh)
    if not summaries:
        raise ConfigError(f"report: no strategy summaries found under {run_dir}")
    if "full" in summaries:
        baseline = summaries["full"]["final_val_map_mean"]
    elif len(summaries) == 1:
        baseline = next(iter(summaries.values()))["final_val_map_mean"]
    else:
        raise ConfigError("report: need a 'full' strategy run as the relative-mAP baseline")
    os.makedirs(out_dir, exist_ok=True)

    lines = ["strategy,map_mean,map_std,relative_map"]
    for name, summary in summaries.items():
        rel = relative_map(summary["final_val_map_mean"], baseline)
        lines.append(f"{name},{_fmt(summary['final_val_map_mean'])},"
                     f"{_fmt(summary['final_val_map_std'])},{_fmt(rel)}")
    with open(os.path.join(out_dir, "relative_map.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    for name, summary in summaries.items():
        first_seed = summary["seeds"][0]
        seed_dir = os.path.join(run_dir, name, f"seed_{first_seed}")
        heat_path = os.path.join(seed_dir, "heatmap.csv")
        if os.path.isfile(heat_path):
            with open(heat_path, "r", encoding="utf-8") as fh:
                heat_csv = fh.read()
            with open(os.path.join(out_dir, f"{name}_heatmap.csv"), "w", encoding="utf-8") as fh:
                fh.write(heat_csv)
            with open(os.path.join(out_dir, f"{name}_heatmap.svg"), "w", encoding="utf-8") as fh:
                fh.write(_csv_heatmap_to_svg(heat_csv))
        for fname in sorted(os.listdir(seed_dir)) if os.path.isdir(seed_dir) else []:
            if fname.startswith("pr_class_"):
                with open(os.path.join(seed_dir, fname), "r", encoding="utf-8") as fh:
                    content = fh.read()
                with open(os.path.join(out_dir, f"{name}_{fname}"), "w", encoding="utf-8") as fh:
                    fh.write(content)
    return {"strategies": sorted(summaries), "baseline_map": baseline, "out_dir": out_dir}


def _csv_heatmap_to_svg(heat_csv: str, cell: int = 14) -> str:
    rows = [line.split(",") for line in heat_csv.strip().splitlines()]
    header, body = rows[0], rows[1:]
    cols = len(header) - 1
    label_w = 120
    width = label_w + cols * cell + 10
    height = (len(body) + 1) * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for j, name in enumerate(header[1:]):
        if (j + 1) % 5 == 0 or j == 0:
            parts.append(f'<text x="{label_w + j * cell}" y="{cell - 3}" font-size="9" '
                         f'font-family="monospace">{j + 1}</text>')
    for i, row in enumerate(body):
        y = (i + 1) * cell
        parts.append(f'<text x="4" y="{y + cell - 4}" font-size="10" font-family="monospace">{row[0]}</text>')
        for j, flag in enumerate(row[1:]):
            fill = "#1f6fb2" if flag.strip() == "1" else "#e8e8e8"
            parts.append(f'<rect x="{label_w + j * cell}" y="{y}" width="{cell - 1}" '
                         f'height="{cell - 1}" fill="{fill}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
