import json
import os

import numpy as np
import pytest

from gfz.checkpoint import load_checkpoint, save_checkpoint
from gfz.config import ExperimentConfig
from gfz.data import DatasetSpec, DomainShift
from gfz.harness import (build_splits, cmd_finetune, cmd_pretrain, cmd_report, cmd_sweep,
                         finetune_one_seed)
from gfz.metrics import average_precision
from gfz.nn import ConfigError, build_mini_resnet, replace_classifier


def tiny_config(**kw):
    source = DatasetSpec(image_size=16, class_count=3, prevalence=(0.4, 0.4, 0.4),
                         sample_count=160, seed=51, split=(0.6, 0.2, 0.2))
    target = DatasetSpec(image_size=16, class_count=4, prevalence=(0.5, 0.3, 0.4, 0.3),
                         sample_count=160, seed=52, split=(0.6, 0.2, 0.2),
                         shift=DomainShift(hue_degrees=90.0, background_texture=1))
    defaults = dict(source=source, target=target, widths=(4, 6, 8), batch_size=32,
                    max_epochs=3, patience=3, epsilon_cond=1, epsilon_step=1,
                    pretrain_epochs=3, pretrain_patience=3, seeds=(11, 12), augment=False)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "pre.gfzc"
    config = tiny_config()
    summary = cmd_pretrain(config, path)
    return config, path, summary


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_mini_resnet(5, [4, 8, 8], seed=2)
        path = tmp_path / "m.gfzc"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.arch == model.arch
        assert loaded.class_count == model.class_count
        assert [l.name for l in loaded.layers] == [l.name for l in model.layers]
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = build_mini_resnet(3, [4, 8, 8], seed=9)
        p1, p2 = tmp_path / "a.gfzc", tmp_path / "b.gfzc"
        save_checkpoint(p1, model)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gfzc"
        path.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(ConfigError, match="magic"):
            load_checkpoint(path)


class TestPretrain:
    def test_deterministic_checkpoints(self, tmp_path):
        config = tiny_config()
        p1, p2 = tmp_path / "a.gfzc", tmp_path / "b.gfzc"
        cmd_pretrain(config, p1)
        cmd_pretrain(config, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_beats_prevalence_prior(self, tmp_path):
        # constant-score predictor (per-class train prevalence) as the floor
        config = tiny_config(pretrain_epochs=8, pretrain_patience=8)
        summary = cmd_pretrain(config, tmp_path / "pre.gfzc")
        splits = build_splits(config.source)
        prior = splits.train_y.mean(axis=0)
        prior_aps = []
        for c in range(splits.val_y.shape[1]):
            scores = np.full(splits.val_y.shape[0], prior[c])
            ap = average_precision(scores, splits.val_y[:, c])
            if ap is not None:
                prior_aps.append(ap)
        assert summary["final_val_map"] > float(np.mean(prior_aps))

    def test_reload_reproduces_metrics(self, pretrained):
        config, path, summary = pretrained
        from gfz.training import evaluate

        splits = build_splits(config.source)
        model = load_checkpoint(path)
        test_map, test_auc, _ = evaluate(model, splits.test_x, splits.test_y,
                                         config.batch_size)
        assert test_map == summary["test_map"]
        assert test_auc == summary["test_auc"]


class TestFinetune:
    def test_outputs_and_consistency(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        out = tmp_path / "run"
        summary = cmd_finetune(config, ck, out, strategy="gfz-l")
        strat_dir = out / "gfz-l"
        assert (strat_dir / "summary.json").is_file()
        assert (strat_dir / "config.txt").is_file()
        for seed in config.seeds:
            seed_dir = strat_dir / f"seed_{seed}"
            metrics = (seed_dir / "metrics.csv").read_text().strip().splitlines()
            heatmap = (seed_dir / "heatmap.csv").read_text().strip().splitlines()
            assert metrics[0].startswith("epoch,phase,train_loss,val_map,val_auc")
            # heatmap column sums reproduce the trainable-count column
            n_epochs = len(metrics) - 1
            heat_rows = [row.split(",")[1:] for row in heatmap[1:]]
            assert all(len(r) == n_epochs for r in heat_rows)
            for e in range(n_epochs):
                col_sum = sum(int(r[e]) for r in heat_rows)
                trainable = int(metrics[e + 1].split(",")[5 + config.target.class_count])
                assert col_sum == trainable
        stats = [r["final_val_map"] for r in summary["runs"]]
        assert summary["final_val_map_mean"] == pytest.approx(float(np.mean(stats)))
        expected_std = float(np.std(stats, ddof=1)) if len(stats) > 1 else 0.0
        assert summary["final_val_map_std"] == pytest.approx(expected_std)

    def test_lp_keeps_checkpoint_features(self, pretrained):
        config, ck, _ = pretrained
        reference = load_checkpoint(ck)
        snapshots = []

        def callback(m, record):
            snapshots.append([p.data.copy() for l in m.layers[:-1] for p in l.params])

        finetune_one_seed(config, ck, "lp", seed=11, epoch_callback=callback)
        ref_params = [p.data for l in reference.layers[:-1] for p in l.params]
        for snap in snapshots:
            for a, b in zip(ref_params, snap):
                assert np.array_equal(a, b)

    def test_byte_identical_reruns(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            cmd_finetune(config, ck, out, strategy="full", seeds=(11,))
            outs.append((out / "full" / "seed_11" / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]


class TestSweep:
    def test_step_constraint_enforced(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        with pytest.raises(ConfigError, match="patience"):
            cmd_sweep(config, ck, "eps_step", tmp_path, values=(6,))

    def test_unknown_axis(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        with pytest.raises(ConfigError, match="axis"):
            cmd_sweep(config, ck, "bogus", tmp_path)

    def test_grid_rows_and_determinism(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        rows1 = cmd_sweep(config, ck, "eps_cond", out1, values=(0, 1))
        rows2 = cmd_sweep(config, ck, "eps_cond", out2, values=(0, 1))
        assert [r["value"] for r in rows1] == [0, 1]
        assert rows1 == rows2
        table = (out1 / "sweep.csv").read_text().splitlines()
        assert table[0] == "axis,value,map_mean,map_std"
        assert len(table) == 3


class TestReport:
    def test_relative_table_and_heatmap(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        run_dir = tmp_path / "runs"
        cmd_finetune(config, ck, run_dir, strategy="full", seeds=(11,))
        cmd_finetune(config, ck, run_dir, strategy="lp", seeds=(11,))
        info = cmd_report(run_dir)
        table = (run_dir / "report" / "relative_map.csv").read_text().strip().splitlines()
        assert table[0] == "strategy,map_mean,map_std,relative_map"
        rows = {line.split(",")[0]: line.split(",") for line in table[1:]}
        assert len(rows) == 2
        assert float(rows["full"][3]) == 0.0
        heat = (run_dir / "report" / "full_heatmap.csv").read_text().strip().splitlines()
        assert len(heat) - 1 == 8  # one row per layer
        assert (run_dir / "report" / "full_heatmap.svg").is_file()
        assert info["strategies"] == ["full", "lp"]

    def test_missing_baseline_rejected(self, pretrained, tmp_path):
        config, ck, _ = pretrained
        run_dir = tmp_path / "runs"
        cmd_finetune(config, ck, run_dir, strategy="lp", seeds=(11,))
        cmd_finetune(config, ck, run_dir, strategy="gfz-l", seeds=(11,))
        with pytest.raises(ConfigError, match="full"):
            cmd_report(run_dir)

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="no strategy"):
            cmd_report(tmp_path)


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        from gfz.cli import main

        cfg_text = """
run.seeds = 11
run.batch_size = 32
run.max_epochs = 2
run.patience = 2
gfz.epsilon_cond = 1
model.widths = 4,6,8
pretrain.epochs = 2
pretrain.patience = 2
run.augment = false
data.source.image_size = 16
data.source.classes = 3
data.source.prevalence = 0.4,0.4,0.4
data.source.samples = 120
data.source.seed = 51
data.target.image_size = 16
data.target.classes = 3
data.target.prevalence = 0.5,0.4,0.4
data.target.samples = 120
data.target.seed = 52
data.target.shift.hue = 90.0
"""
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(cfg_text)
        ck = tmp_path / "pre.gfzc"
        out = tmp_path / "runs"
        assert main(["pretrain", "--config", str(cfg), "--out", str(ck)]) == 0
        assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ck),
                     "--strategy", "full", "--out", str(out)]) == 0
        assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ck),
                     "--strategy", "gfz-l", "--seed", "11", "--out", str(out)]) == 0
        assert main(["report", "--run-dir", str(out)]) == 0
        captured = capsys.readouterr()
        assert "final val mAP" in captured.out
        assert (out / "report" / "relative_map.csv").is_file()

    def test_error_paths_return_nonzero(self, tmp_path):
        from gfz.cli import main

        bad_cfg = tmp_path / "bad.cfg"
        bad_cfg.write_text("run.strategy = sgd\n")
        assert main(["pretrain", "--config", str(bad_cfg), "--out", str(tmp_path / "x.gfzc")]) == 2
