import numpy as np
import pytest

from tokencast.checkpoint import checkpoint_hash
from tokencast.data import (
    NoiseComponent,
    SineComponent,
    SynthSpec,
    build_mixed_dataset,
    chronological_split,
    synth_generate,
)
from tokencast.errors import ConfigError, ProtocolError, ShapeError
from tokencast.evaluate import (
    EvalReport,
    EvalRow,
    evaluate,
    few_shot_protocol,
    format_table,
    metrics,
    naive_baselines,
    report_from_csv,
    report_to_csv,
    zero_shot_protocol,
)
from tokencast.model import ModelConfig
from tokencast.train import TrainConfig, pretrain

TINY = ModelConfig(num_stages=2, pool_kernels=(2, 1), token_len=4, max_tokens=3,
                   model_width=6, layers_per_stage=1, attention_heads=2,
                   feedforward_width=8, seed=7)


def sine_series(name, period, length=400, channels=2, sigma=0.05, seed=0):
    spec = SynthSpec(name, length=length, channels=channels,
                     components=[SineComponent(period), NoiseComponent(sigma)])
    return synth_generate(spec, seed=seed)


@pytest.fixture(scope="module")
def tiny_ckpt():
    series = sine_series("trainsrc", 24, length=300)
    split = chronological_split(series, 0.7, 0.1, 0.2)
    train = build_mixed_dataset([(series, split)], "train")
    val = build_mixed_dataset([(series, split)], "validation")
    ckpt, _ = pretrain(TINY, TrainConfig(epochs=2, stride=4, seed=0), train, val)
    return ckpt


class TestMetrics:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 5))
        assert metrics(x, x) == (0.0, 0.0)

    def test_constant_offset(self, rng):
        x = rng.normal(size=(3, 5))
        assert metrics(x + 1.0, x) == (pytest.approx(1.0), pytest.approx(1.0))

    def test_hand_case(self):
        mse_v, mae_v = metrics(np.array([3.0, -1.0]), np.zeros(2))
        assert mse_v == pytest.approx(5.0)
        assert mae_v == pytest.approx(2.0)

    def test_symmetry(self, rng):
        a, b = rng.normal(size=(2, 7)), rng.normal(size=(2, 7))
        assert metrics(a, b) == metrics(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics(np.zeros(3), np.zeros(4))


class TestBaselines:
    def test_persistence_repeats_last(self):
        p, _ = naive_baselines(np.array([1.0, 2.0, 7.0]), 4, 1)
        np.testing.assert_array_equal(p, [7.0, 7.0, 7.0, 7.0])

    def test_seasonal_matches_pure_sine(self):
        t = np.arange(96.0)
        wave = np.sin(2 * np.pi * t / 24.0)
        _, seasonal = naive_baselines(wave, 48, 24)
        truth = np.sin(2 * np.pi * np.arange(96, 144.0) / 24.0)
        mse_v, _ = metrics(seasonal, truth)
        assert mse_v < 1e-10

    def test_period_one_equals_persistence(self, rng):
        lb = rng.normal(size=20)
        p, s = naive_baselines(lb, 9, 1)
        np.testing.assert_array_equal(p, s)

    def test_period_longer_than_lookback(self):
        with pytest.raises(ConfigError):
            naive_baselines(np.zeros(5), 3, 10)

    def test_noise_floor_sanity(self, rng):
        sigma = 0.1
        t = np.arange(480.0)
        wave = np.sin(2 * np.pi * t / 24.0) + rng.normal(0, sigma, 480)
        _, seasonal = naive_baselines(wave[:400], 48, 24)
        truth = wave[400:448]
        mse_v, _ = metrics(seasonal, truth)
        # two independent noise draws: expected MSE is 2 sigma^2
        assert mse_v <= 2 * sigma**2 * 2.5 + 1e-3


class TestEvaluate:
    def test_perfect_oracle_stub(self):
        series = sine_series("s", 24, length=400, channels=2)
        split = chronological_split(series, 0.6, 0.2, 0.2)

        def oracle(lookbacks, horizon):
            # find each lookback's origin in the series and return the truth
            outs = np.zeros((lookbacks.shape[0], horizon))
            L = lookbacks.shape[1]
            for i in range(lookbacks.shape[0]):
                for c in range(series.num_channels):
                    for t in range(L, series.length - horizon + 1):
                        if np.array_equal(series.values[c, t - L:t], lookbacks[i]):
                            outs[i] = series.values[c, t:t + horizon]
                            break
                    else:
                        continue
                    break
            return outs

        report = evaluate(None, series, split, [8], lookback_len=16,
                          stride=16, forecast_fn=oracle)
        assert report.rows[0].mse == 0.0 and report.rows[0].mae == 0.0

    def test_deterministic(self, tiny_ckpt):
        series = sine_series("t", 48, length=300, seed=3)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        a = evaluate(tiny_ckpt, series, split, [8], lookback_len=12, stride=2)
        b = evaluate(tiny_ckpt, series, split, [8], lookback_len=12, stride=2)
        assert a == b

    def test_threaded_matches_serial(self, tiny_ckpt):
        series = sine_series("t", 48, length=300, seed=3)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        a = evaluate(tiny_ckpt, series, split, [8], lookback_len=12, stride=2)
        b = evaluate(tiny_ckpt, series, split, [8], lookback_len=12, stride=2, threads=3)
        assert a.rows == b.rows

    def test_insufficient_test_data(self, tiny_ckpt):
        series = sine_series("t", 48, length=100, seed=3)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        with pytest.raises(ConfigError, match="need.*have"):
            evaluate(tiny_ckpt, series, split, [50], lookback_len=12)

    def test_never_mutates_checkpoint(self, tiny_ckpt):
        before = checkpoint_hash(tiny_ckpt)
        series = sine_series("t", 48, length=300, seed=3)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        evaluate(tiny_ckpt, series, split, [4, 8], lookback_len=12, stride=4)
        assert checkpoint_hash(tiny_ckpt) == before

    def test_window_counts_positive(self, tiny_ckpt):
        series = sine_series("t", 48, length=300, seed=3)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        report = evaluate(tiny_ckpt, series, split, [4, 8], lookback_len=12, stride=4)
        assert all(r.windows > 0 for r in report.rows)
        assert [r.horizon for r in report.rows] == [4, 8]


class TestZeroShot:
    def test_guard_rejects_training_source(self, tiny_ckpt):
        series = sine_series("trainsrc", 24, length=300)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        with pytest.raises(ProtocolError, match="trainsrc"):
            zero_shot_protocol(tiny_ckpt, series, split, [8], lookback_len=12)

    def test_unseen_dataset_evaluated_without_mutation(self, tiny_ckpt):
        before = checkpoint_hash(tiny_ckpt)
        series = sine_series("unseen", 48, length=300, seed=5)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        report = zero_shot_protocol(tiny_ckpt, series, split, [8],
                                    lookback_len=12, stride=4)
        assert report.rows[0].windows > 0
        assert checkpoint_hash(tiny_ckpt) == before

    def test_zero_shot_no_better_than_finetuned(self):
        src = sine_series("zsrc", 24, length=600)
        split = chronological_split(src, 0.7, 0.1, 0.2)
        ckpt, _ = pretrain(TINY, TrainConfig(epochs=4, stride=2, seed=0, patience=4),
                           build_mixed_dataset([(src, split)], "train"),
                           build_mixed_dataset([(src, split)], "validation"))
        target = sine_series("unseen12", 12, length=600, seed=5)
        tsplit = chronological_split(target, 0.6, 0.2, 0.2)
        zs = zero_shot_protocol(ckpt, target, tsplit, [8], 12, stride=2).rows[0].mse
        tuned = few_shot_protocol(
            ckpt, target, tsplit, 1.0,
            TrainConfig(epochs=6, stride=1, seed=0, scope="head", patience=6),
            [8], 12, stride=2,
        ).rows[0].mse
        assert zs >= tuned  # ties allowed


class TestFewShot:
    def test_bad_fraction(self, tiny_ckpt):
        series = sine_series("f", 24, length=300)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                few_shot_protocol(tiny_ckpt, series, split, bad,
                                  TrainConfig(epochs=0, scope="head"),
                                  [8], lookback_len=12)

    def test_fraction_keeps_most_recent(self, tiny_ckpt, monkeypatch):
        series = sine_series("f", 24, length=1000, channels=1)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        captured = {}

        import tokencast.evaluate as ev

        real = ev.finetune_heads

        def spy(ckpt, cfg, train_mixed, val_mixed):
            captured["segment"] = train_mixed.segments[0].values
            return real(ckpt, cfg, train_mixed, val_mixed)

        monkeypatch.setattr(ev, "finetune_heads", spy)
        few_shot_protocol(tiny_ckpt, series, split, 0.1,
                          TrainConfig(epochs=0, scope="head"),
                          [8], lookback_len=12, stride=8)
        # train range is (0, 600); 10% keeps the last 60 points
        np.testing.assert_array_equal(captured["segment"], series.values[0, 540:600])

    def test_full_fraction_equals_standard_range(self, tiny_ckpt):
        series = sine_series("f", 24, length=400)
        split = chronological_split(series, 0.6, 0.2, 0.2)
        report = few_shot_protocol(tiny_ckpt, series, split, 1.0,
                                   TrainConfig(epochs=0, scope="head"),
                                   [8], lookback_len=12, stride=4)
        baseline = evaluate(tiny_ckpt, series, split, [8], lookback_len=12, stride=4)
        assert report.rows == baseline.rows  # zero epochs => same model


class TestReportSerialization:
    def test_roundtrip(self):
        report = EvalReport(
            rows=[EvalRow("a", 96, 0.123456789, 0.23456789, 42),
                  EvalRow("a", 192, 1.5, 0.75, 17)],
            fingerprint="deadbeef",
        )
        assert report_from_csv(report_to_csv(report)) == report

    def test_header_shape(self):
        report = EvalReport(rows=[EvalRow("x", 8, 0.5, 0.25, 3)], fingerprint="f")
        text = report_to_csv(report)
        lines = text.strip().splitlines()
        assert lines[0] == "# fingerprint=f"
        assert lines[1] == "dataset,horizon,mse,mae,windows"

    def test_table_contains_rows(self):
        report = EvalReport(rows=[EvalRow("x", 8, 0.5, 0.25, 3)], fingerprint="f")
        table = format_table(report)
        assert "x" in table and "0.5" in table
