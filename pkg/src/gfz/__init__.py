"""Adaptive fine-tuning by gradual freezing.

A self-contained transfer-learning engine: reverse-mode autodiff over
dense tensors, a small residual CNN, Adam with per-layer learning rates,
the gradual-freezing schedule driven by relative gradient norms, the usual
fine-tuning baselines, multi-label ranking metrics, synthetic
domain-shifted datasets, and a batch experiment harness.
"""

from .autodiff import (GradCheckReport, ShapeError, Tape, Tensor, backpropagate,
                       check_gradients, forward_eval, parameter)
from .baselines import SpReference, StrategySpec, apply_strategy, sp_penalty
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, default_config, load_config, parse_config_text
from .data import (DatasetSpec, DomainShift, apply_domain_shift, augment,
                   generate_dataset, load_gfzd, save_gfzd, split_dataset)
from .metrics import (PredictionSet, average_precision, mean_average_precision,
                      mean_roc_auc, pr_curve, relative_map, roc_auc)
from .nn import (BlockPartition, ConfigError, LayerHandle, Model, build_mini_resnet,
                 build_mlp, multilabel_bce, replace_classifier, set_frozen)
from .optim import AdamState, adam_step, set_layer_lr
from .scheduler import (FreezePolicy, SchedulerState, compute_alpha, compute_importance,
                        compute_rgn, run_gfz, select_freeze_targets, update_learning_rates)
from .training import EarlyStopping, MetricsRecord, SplitData, run_training

__version__ = "0.1.0"
