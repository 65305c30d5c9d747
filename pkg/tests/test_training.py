import json
import math

import numpy as np
import pytest

from molfuse.checkpoint import load_checkpoint, save_checkpoint
from molfuse.data import REGRESSION, CLASSIFICATION
from molfuse.synthdata import write_dataset
from molfuse.training import (
    RunConfig,
    RunReport,
    SeedResult,
    attention_scaling,
    evaluate,
    logistic,
    profile_strategies,
    run_seeds,
    train_one,
)


@pytest.fixture(scope="module")
def tiny_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.csv"
    write_dataset(path, "esol", 90, seed=31)
    return str(path)


@pytest.fixture(scope="module")
def tiny_cls_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tinycls.csv"
    write_dataset(path, "bbbp", 90, seed=32)
    return str(path)


def tiny_config(dataset, **overrides):
    base = dict(
        strategy="lm-baseline", dataset=dataset, task="regression",
        seeds=(0,), batch_size=16, max_epochs=3, patience=5,
        hidden_dim=16, num_layers=1, num_heads=2, ffn_dim=24,
        message_steps=2, edge_hidden=8,
    )
    base.update(overrides)
    return RunConfig(**base)


class FixedPredictor:
    """Stub model: predicts a constant."""

    def __init__(self, value):
        self.value = value

    def predict(self, mols):
        return np.full(len(mols), self.value)


class Rec:
    def __init__(self, label):
        self.label = label


class TestEvaluate:
    def test_perfect_predictions(self):
        class Echo:
            def predict(self, mols):
                return np.array([m.label for m in mols])

        mols = [Rec(0.2), Rec(-1.0)]
        assert evaluate(Echo(), mols, REGRESSION) == 0.0

    def test_constant_predictor_mae(self):
        mols = [Rec(0.0), Rec(2.0)]
        assert evaluate(FixedPredictor(1.0), mols, REGRESSION) == 1.0

    def test_classification_threshold(self):
        class TwoLogits:
            def predict(self, mols):
                # logistic(-1.39) ~ 0.2, logistic(1.39) ~ 0.8
                return np.array([-1.39, 1.39])

        mols = [Rec(0.0), Rec(1.0)]
        assert evaluate(TwoLogits(), mols, CLASSIFICATION) == 1.0
        assert logistic(0.0) == 0.5


class TestTrainOne:
    def test_lr_zero_keeps_untrained_metric(self, tiny_csv):
        cfg_frozen = tiny_config(tiny_csv, lr=1e-30, max_epochs=2)
        _, frozen = train_one(cfg_frozen, 0)
        assert len(set(round(v, 12) for v in frozen.val_history)) == 1

    def test_same_seed_bitwise_identical(self, tiny_csv):
        cfg = tiny_config(tiny_csv, strategy="contrast-node", max_epochs=2)
        _, a = train_one(cfg, 0)
        _, b = train_one(cfg, 0)
        ra, rb = a.to_record(), b.to_record()
        ra.pop("timing")
        rb.pop("timing")
        assert ra == rb

    def test_beats_naive_on_tiny_regression(self, tiny_csv):
        cfg = tiny_config(tiny_csv, max_epochs=5)
        _, res = train_one(cfg, 0)
        assert res.test_metric < res.naive_metric

    def test_early_stop_selects_best_epoch(self, tiny_csv):
        cfg = tiny_config(tiny_csv, max_epochs=6, patience=2)
        _, res = train_one(cfg, 7)
        assert res.best_val_metric == min(res.val_history)
        assert res.val_history[res.best_epoch] == res.best_val_metric

    def test_mlm_stage_runs(self, tiny_csv):
        cfg = tiny_config(tiny_csv, mlm_pretrain=True, mlm_epochs=1, max_epochs=1)
        _, res = train_one(cfg, 0)
        assert res.counters["mlm_batches"] + res.counters["mlm_skipped"] > 0

    def test_checkpoint_written(self, tiny_csv, tmp_path):
        cfg = tiny_config(tiny_csv, max_epochs=1)
        _, res = train_one(cfg, 0, out_dir=str(tmp_path))
        config, tensors = load_checkpoint(tmp_path / "checkpoint_seed0.bin")
        assert config["seed"] == 0
        assert any(name.startswith("lm.") for name in tensors)


class TestRunSeeds:
    def test_aggregate_mean_std(self):
        report = RunReport(
            config={"task": "regression", "strategy": "s", "dataset": "d"},
            results=[
                SeedResult(seed=s, test_metric=m)
                for s, m in zip((0, 1, 2), (1.0, 2.0, 3.0))
            ],
        )
        mean, std = report.aggregate()
        assert mean == 2.0 and std == 1.0

    def test_identical_metrics_zero_std(self):
        report = RunReport(
            config={}, results=[SeedResult(seed=s, test_metric=1.5) for s in range(3)]
        )
        assert report.aggregate() == (1.5, 0.0)

    def test_format_four_decimals(self):
        report = RunReport(
            config={},
            results=[SeedResult(seed=0, test_metric=0.55294),
                     SeedResult(seed=1, test_metric=0.49)],
        )
        text = report.formatted_aggregate()
        assert text == "0.5215 ± 0.0445"

    def test_failed_seed_flagged_and_excluded(self):
        report = RunReport(
            config={"task": "regression"},
            results=[
                SeedResult(seed=0, test_metric=1.0),
                SeedResult(seed=1, failed=True, failure_reason="non-finite loss"),
            ],
        )
        mean, _ = report.aggregate()
        assert mean == 1.0
        assert "FAILED" in report.text_table()

    def test_two_seed_protocol_run(self, tiny_csv):
        cfg = tiny_config(tiny_csv, seeds=(0, 7), max_epochs=2)
        report = run_seeds(cfg)
        assert [r.seed for r in report.results] == [0, 7]
        lines = report.jsonl().strip().splitlines()
        records = [json.loads(line) for line in lines]
        assert sum(1 for r in records if r["type"] == "seed") == 2
        assert records[-1]["type"] == "aggregate"
        mean, std = report.aggregate()
        metrics = [r.test_metric for r in report.results]
        assert mean == pytest.approx(sum(metrics) / 2, abs=0)
        assert std == pytest.approx(
            math.sqrt(sum((m - mean) ** 2 for m in metrics)), abs=1e-15
        )

    def test_comparable_records_have_no_timing(self, tiny_csv):
        cfg = tiny_config(tiny_csv, max_epochs=1)
        report = run_seeds(cfg)
        assert all("timing" not in r for r in report.comparable_records())
        assert all("timing" in r.to_record() for r in report.results)

    def test_parallel_workers_match_sequential(self, tiny_csv):
        cfg = tiny_config(tiny_csv, seeds=(0, 7), max_epochs=2)
        sequential = run_seeds(cfg)
        parallel = run_seeds(tiny_config(tiny_csv, seeds=(0, 7), max_epochs=2,
                                         workers=2))
        assert sequential.comparable_records() == parallel.comparable_records()


class TestClassificationRun:
    def test_beats_majority_on_tiny(self, tiny_cls_csv):
        cfg = tiny_config(
            tiny_cls_csv, task="binary-classification", max_epochs=6,
            strategy="late-fusion",
        )
        _, res = train_one(cfg, 0)
        assert res.test_metric > 0.0
        assert np.isfinite(res.naive_metric)


class TestProfile:
    def test_profile_reports_medians_and_verdicts(self, tiny_csv):
        cfg = tiny_config(tiny_csv, max_epochs=1)
        out = profile_strategies(
            cfg, ["contrast-graph", "contrast-node"],
            measured_epochs=2, warmup_epochs=1,
        )
        assert set(out["timings"]) == {"contrast-graph", "contrast-node"}
        for entry in out["timings"].values():
            assert entry["median"] > 0
            assert len(entry["epochs"]) == 2
        assert out["verdicts"][0]["check"] == "graph-contrast <= node-contrast"

    def test_attention_scaling_quadratic(self):
        out = attention_scaling(base_len=128, repeats=9)
        assert out["seconds"][128] > 0
        assert out["ratio"] > 1.0


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.bin"
        tensors = {
            "a": np.arange(6.0).reshape(2, 3),
            "b": np.array(2.5),
        }
        save_checkpoint(path, {"k": 1}, tensors)
        config, loaded = load_checkpoint(path)
        assert config == {"k": 1}
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        np.testing.assert_array_equal(loaded["b"], tensors["b"])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestRunConfig:
    def test_round_trip_dict(self):
        cfg = RunConfig(strategy="late-fusion", seeds=(0, 7), ratios=(0.7, 0.2, 0.1))
        again = RunConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(seeds=())
        with pytest.raises(ValueError):
            RunConfig(max_epochs=0)

    def test_label_column_defaults_by_task(self):
        assert RunConfig(task="regression").label_column == "log_solubility"
        assert (
            RunConfig(task="binary-classification").label_column == "p_np"
        )
