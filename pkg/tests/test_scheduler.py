import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfz.autodiff import parameter
from gfz.config import ExperimentConfig
from gfz.nn import BlockPartition, ConfigError, LayerHandle, Model, build_mini_resnet, set_frozen
from gfz.scheduler import (FreezePolicy, GfzController, block_mean_alpha, compute_alpha,
                           compute_importance, compute_rgn, run_gfz, select_freeze_targets)
from gfz.training import SplitData


def bare_model(param_arrays, blocks=None, names=None):
    """A model shell whose layers hold given parameter arrays (no forward)."""
    layers = []
    for i, arr in enumerate(param_arrays):
        layers.append(LayerHandle(index=i + 1, name=f"l{i + 1}",
                                  params=[parameter(np.asarray(arr, dtype=np.float32))]))
    blocks = blocks or [[i + 1] for i in range(len(layers))]
    names = names or [f"b{j}" for j in range(len(blocks))]
    return Model(arch="mlp", layers=layers, partition=BlockPartition(blocks, names),
                 class_count=1, meta={})


def set_grads(model, grad_arrays):
    for layer, g in zip(model.layers, grad_arrays):
        layer.params[0].grad = np.asarray(g, dtype=np.float32)


def rgn_oracle(model):
    """Brute-force recomputation from raw buffers, element loops only."""
    out = []
    for layer in model.layers:
        if layer.frozen:
            out.append(0.0)
            continue
        g2 = 0.0
        w2 = 0.0
        for p in layer.params:
            for v in np.asarray(p.grad, dtype=np.float64).reshape(-1):
                g2 += v * v
            for v in np.asarray(p.data, dtype=np.float64).reshape(-1):
                w2 += v * v
        out.append(math.sqrt(g2) / max(math.sqrt(w2), 1e-12))
    return np.array(out)


class TestRgn:
    def test_zero_grad_gives_zero(self):
        model = bare_model([[1.0, 2.0]])
        set_grads(model, [[0.0, 0.0]])
        assert compute_rgn(model)[0] == 0.0

    def test_worked_example(self):
        model = bare_model([[0.0, 5.0]])
        set_grads(model, [[3.0, 4.0]])
        assert compute_rgn(model)[0] == pytest.approx(1.0, rel=1e-12)

    def test_zero_weights_guarded(self):
        model = bare_model([[0.0, 0.0]])
        set_grads(model, [[1.0, 0.0]])
        assert compute_rgn(model)[0] == pytest.approx(1e12, rel=1e-9)

    def test_frozen_layer_gets_zero(self):
        model = bare_model([[1.0], [2.0]])
        set_grads(model, [[1.0], [1.0]])
        set_frozen(model, [1], True)
        rgn = compute_rgn(model)
        assert rgn[0] == 0.0 and rgn[1] > 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        model = bare_model([rng.standard_normal(rng.integers(1, 20)) for _ in range(6)])
        set_grads(model, [rng.standard_normal(p.params[0].shape) for p in model.layers])
        np.testing.assert_allclose(compute_rgn(model), rgn_oracle(model), rtol=1e-6)


class TestAlpha:
    def test_worked_example(self):
        alpha = compute_alpha(np.array([0.2, 0.4, 0.8]), np.array([True] * 3))
        np.testing.assert_allclose(alpha, [0.25, 0.5, 1.0])

    def test_all_zero_fallback(self):
        alpha = compute_alpha(np.zeros(3), np.array([True] * 3))
        np.testing.assert_allclose(alpha, [1.0, 1.0, 1.0])

    def test_argmax_layer_exactly_one(self):
        rng = np.random.default_rng(0)
        r = rng.random(7)
        alpha = compute_alpha(r, np.ones(7, dtype=bool))
        assert alpha[np.argmax(r)] == 1.0

    def test_frozen_layers_zero(self):
        alpha = compute_alpha(np.array([0.5, 0.5]), np.array([True, False]))
        assert alpha[1] == 0.0

    @given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_alpha_in_unit_interval_with_max_one(self, values):
        r = np.array(values)
        alpha = compute_alpha(r, np.ones(len(values), dtype=bool))
        assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0)
        assert alpha.max() == 1.0


class TestImportance:
    def test_block_mean(self):
        model = bare_model([[1.0], [1.0]], blocks=[[1, 2]])
        imp = compute_importance(np.array([0.2, 0.4]), model)
        assert imp[1] == pytest.approx(0.3)

    def test_single_layer_block(self):
        model = bare_model([[1.0], [1.0]])
        imp = compute_importance(np.array([0.7, 0.1]), model)
        assert imp[1] == pytest.approx(0.7)
        assert imp[2] == pytest.approx(0.1)

    def test_frozen_excluded(self):
        model = bare_model([[1.0], [1.0], [1.0]], blocks=[[1, 2], [3]])
        set_frozen(model, [1], True)
        imp = compute_importance(np.array([0.0, 0.4, 0.9]), model)
        assert imp[1] == pytest.approx(0.4)

    def test_fully_frozen_block_omitted(self):
        model = bare_model([[1.0], [1.0]], blocks=[[1], [2]])
        set_frozen(model, [1], True)
        imp = compute_importance(np.array([0.0, 0.4]), model)
        assert 1 not in imp

    def test_block_mean_alpha_example(self):
        model = bare_model([[1.0], [1.0]], blocks=[[1, 2]])
        out = block_mean_alpha(np.array([0.2, 0.6]), model)
        np.testing.assert_allclose(out, [0.4, 0.4])


class TestSelection:
    def test_ceiling_rule(self):
        model = bare_model([[1.0]] * 11)  # 10 eligible + classifier
        rgn = np.array([float(i) for i in range(1, 12)])
        targets = select_freeze_targets(model, FreezePolicy("layer-percent", 0.4), rgn)
        assert targets == {1, 2, 3, 4}

    def test_lowest_block_importance_frozen(self):
        model = bare_model([[1.0]] * 4, blocks=[[1], [2], [3], [4]])
        rgn = np.array([0.5, 0.1, 0.3, 9.9])
        targets = select_freeze_targets(model, FreezePolicy("block-one"), rgn)
        assert targets == {2}

    def test_tie_break_lowest_block(self):
        model = bare_model([[1.0]] * 4, blocks=[[1], [2], [3], [4]])
        rgn = np.array([0.2, 0.2, 0.4, 9.9])
        targets = select_freeze_targets(model, FreezePolicy("block-one"), rgn)
        assert targets == {1}

    def test_classifier_exempt_by_default(self):
        model = bare_model([[1.0], [1.0]])
        rgn = np.array([5.0, 0.0])  # classifier has the lowest rgn
        targets = select_freeze_targets(model, FreezePolicy("layer-percent", 0.9), rgn)
        assert 2 not in targets

    def test_retention_keeps_last_group(self):
        model = bare_model([[1.0], [1.0]])
        rgn = np.array([0.1, 0.2])
        targets = select_freeze_targets(model, FreezePolicy("layer-percent", 0.9), rgn,
                                        classifier_exempt=False)
        assert targets == set()

    def test_no_eligible_layers(self):
        model = bare_model([[1.0]])
        targets = select_freeze_targets(model, FreezePolicy("layer-percent", 0.4), np.array([1.0]))
        assert targets == set()

    @given(st.lists(st.floats(min_value=1e-6, max_value=1e3), min_size=3, max_size=10),
           st.floats(min_value=1e-3, max_value=100.0))
    @settings(max_examples=50, deadline=None)
    def test_scale_consistency(self, values, c):
        model = bare_model([[1.0]] * (len(values) + 1))
        rgn = np.array(values + [999.0])
        policy = FreezePolicy("layer-percent", 0.4)
        base = select_freeze_targets(model, policy, rgn)
        scaled = select_freeze_targets(model, policy, rgn * c)
        assert base == scaled

    def test_policy_validation(self):
        with pytest.raises(ConfigError):
            FreezePolicy("layer-percent", 1.5)
        with pytest.raises(ConfigError):
            FreezePolicy("nonsense")


def contraction_oracle(n_eligible, ratio, steps):
    """Iterate the ceil(ratio*n) freeze rule, retaining the last group."""
    counts = [n_eligible]
    n = n_eligible
    for _ in range(steps):
        k = math.ceil(ratio * n)
        if k < n or n == 0:
            n -= min(k, n)
        # if k >= n the whole remaining group is retained (unless the
        # classifier keeps the trainable set non-empty, letting it freeze)
        elif n > 0:
            n = 0  # classifier exempt keeps trainable set non-empty
        counts.append(n)
    return counts


def make_splits(n=96, size=12, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n + 32, 3, size, size)).astype(np.float32)
    y = (rng.random((n + 32, classes)) < 0.5).astype(np.uint8)
    return SplitData(train_x=x[:n], train_y=y[:n], val_x=x[n:], val_y=y[n:])


def gfz_config(**kw):
    defaults = dict(batch_size=32, max_epochs=9, patience=50, augment=False,
                    epsilon_cond=2, epsilon_step=1, freeze_ratio=0.4)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestRunGfz:
    def run(self, policy_name="gfz-l", **cfg_kw):
        config = gfz_config(**cfg_kw)
        model = build_mini_resnet(3, [4, 6, 8], seed=1)
        splits = make_splits()
        snapshots = []

        def callback(m, record):
            snapshots.append({l.index: (l.frozen, [p.data.copy() for p in l.params])
                              for l in m.layers})

        records = run_gfz(model, splits, config,
                          FreezePolicy.from_name(policy_name, config.freeze_ratio),
                          seed=11, epoch_callback=callback)
        return model, records, snapshots

    def test_preconditioning_trains_only_classifier(self):
        _, records, _ = self.run()
        for r in records[:2]:
            assert r.phase == "pre-conditioning"
            assert r.trainable_layer_count == 1
            assert r.layer_trained == [False] * 7 + [True]
        assert records[2].phase == "gradual-freezing"
        assert records[2].trainable_layer_count == 8

    def test_eligible_counts_follow_ceiling_contraction(self):
        _, records, _ = self.run()
        phase2 = [r for r in records if r.phase == "gradual-freezing"]
        observed = [sum(r.layer_trained[:-1]) for r in phase2]
        expected = contraction_oracle(7, 0.4, steps=len(phase2) - 1)
        assert observed == expected

    def test_trainable_count_non_increasing_in_phase2(self):
        _, records, _ = self.run()
        phase2 = [r.trainable_layer_count for r in records if r.phase == "gradual-freezing"]
        assert all(a >= b for a, b in zip(phase2, phase2[1:]))

    def test_frozen_layers_bit_identical_afterwards(self):
        # pre-conditioning freezes are temporary; the immutability contract
        # covers layers frozen during the gradual-freezing phase
        _, records, snapshots = self.run()
        frozen_at: dict[int, np.ndarray] = {}
        for record, snap in zip(records, snapshots):
            for idx, (frozen, params) in snap.items():
                if idx in frozen_at:
                    for a, b in zip(frozen_at[idx], params):
                        assert np.array_equal(a, b), f"layer {idx} changed while frozen"
                elif frozen and record.phase == "gradual-freezing":
                    frozen_at[idx] = params
        assert frozen_at, "expected at least one layer to freeze"

    def test_max_trainable_alpha_is_one_in_phase2(self):
        _, records, snapshots = self.run()
        for r, snap in zip(records, snapshots):
            if r.phase != "gradual-freezing":
                continue
            trainable_alpha = [a for a, t in zip(r.alpha, r.layer_trained) if t]
            # alpha in the record is computed at epoch end over the layers
            # trainable during the epoch
            assert max(trainable_alpha) == pytest.approx(1.0)

    def test_b2_alphas_equal_within_blocks(self):
        model, records, _ = self.run(policy_name="gfz-b2")
        blocks = model.partition.blocks
        for r in records:
            if r.phase != "gradual-freezing":
                continue
            for block in blocks:
                vals = [r.alpha[i - 1] for i in block if r.layer_trained[i - 1]]
                if len(vals) > 1:
                    assert max(vals) - min(vals) < 1e-12

    def test_epsilon_cond_zero_starts_in_phase2(self):
        _, records, _ = self.run(epsilon_cond=0, max_epochs=4)
        assert records[0].phase == "gradual-freezing"
        assert records[0].trainable_layer_count == 8

    def test_effective_lr_tracks_alpha_next_epoch(self):
        model, records, _ = self.run(max_epochs=5)
        base = 1e-4
        for prev, nxt in zip(records, records[1:]):
            if prev.phase != "gradual-freezing":
                continue
            for i in range(len(prev.alpha)):
                if nxt.layer_trained[i] and prev.layer_trained[i]:
                    assert nxt.effective_lr[i] == pytest.approx(prev.alpha[i] * base, rel=1e-9)
