"""Unit tests for the optimizability metrics."""

import math
import unittest

import numpy as np
from scipy.stats import kstest, loguniform

from errors import AggregationError, ConfigurationError, InputError
from stability import (
    FAMILY_INTERVALS,
    REFERENCE_HPARAMS,
    RunRecord,
    SweepSpec,
    compute_edf,
    delta_to_asymptotic,
    fraction_within,
    gap_rows,
    normalized_epoch_minutes,
    optimizer_gap,
    resolve_fallback,
    sample_lr_wd,
    sweep_spec_for,
    trial_id,
)


def record(model: str, optimizer: str, epochs: float, err: float, **extra) -> RunRecord:
    """Record of one finished run; extra keywords override fields."""
    values = {
        "model_name": model,
        "optimizer": optimizer,
        "lr": extra.pop("lr", 1e-3),
        "wd": extra.pop("wd", 0.05),
        "epochs": epochs,
        "seed": extra.pop("seed", 0),
        "final_top1_err": err,
        "best_top1_err": err,
        "used_ema": True,
        "wall_time_seconds": 1.0,
        "normalized_epoch_minutes": 0.1,
    }
    values.update(extra)
    return RunRecord(**values)


class TestEDF(unittest.TestCase):
    """Error EDFs."""

    def test_example(self) -> None:
        """Test the EDF of a small example."""
        edf = compute_edf([5.0, 3.0, 4.0])
        assert edf.deltas == (0.0, 1.0, 2.0)
        np.testing.assert_allclose(edf.cum_fracs, [1 / 3, 2 / 3, 1.0])

    def test_singleton(self) -> None:
        """Test the EDF of a single error."""
        edf = compute_edf([7.0])
        assert edf.deltas == (0.0,)
        assert edf.cum_fracs == (1.0,)

    def test_all_equal_reaches_one_at_zero(self) -> None:
        """Test that equal errors reach one at zero."""
        edf = compute_edf([2.0, 2.0, 2.0])
        assert set(edf.deltas) == {0.0}
        assert fraction_within(edf, 0.0) == 1.0

    def test_empty_input(self) -> None:
        """Test rejecting an empty error list."""
        with self.assertRaises(InputError):
            compute_edf([])

    def test_valid_and_permutation_invariant_on_random_inputs(self) -> None:
        """Test EDF validity and order independence on random inputs."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            errors = rng.uniform(0, 100, size=int(rng.integers(1, 30)))
            edf = compute_edf(errors)
            deltas = np.asarray(edf.deltas)
            fracs = np.asarray(edf.cum_fracs)
            assert deltas[0] == 0.0
            assert np.all(np.diff(deltas) >= 0)
            assert np.all(np.diff(fracs) > 0)
            assert fracs[-1] == 1.0
            assert compute_edf(rng.permutation(errors)) == edf

    def test_fraction_within(self) -> None:
        """Test the fraction of runs within a delta."""
        edf = compute_edf([10.0, 11.0, 12.0, 20.0])
        assert fraction_within(edf, 2.0) == 0.75
        assert fraction_within(edf, 100.0) == 1.0


class TestSampling(unittest.TestCase):
    """Log-uniform lr/wd sampling."""

    def test_interval_construction(self) -> None:
        """Test the sampling interval."""
        spec = SweepSpec(center_lr=2.0e-3, center_wd=0.2)
        lo, hi = spec.lr_interval
        self.assertAlmostEqual(lo, 2.5e-4, delta=1e-15)
        self.assertAlmostEqual(hi, 8.0e-3, delta=1e-15)
        lo, hi = spec.wd_interval
        self.assertAlmostEqual(lo, 0.025, delta=1e-15)
        self.assertAlmostEqual(hi, 0.8, delta=1e-15)

    def test_samples_lie_in_interval_and_are_seeded(self) -> None:
        """Test that samples lie in the interval and follow the seed."""
        spec = SweepSpec(center_lr=2.0e-3, center_wd=0.2, n_samples=64, seed=7)
        pairs = sample_lr_wd(spec)
        assert len(pairs) == 64
        assert pairs == sample_lr_wd(spec)
        assert all(2.5e-4 <= lr <= 8.0e-3 and 0.025 <= wd <= 0.8 for lr, wd in pairs)

    def test_unit_factors_return_the_center(self) -> None:
        """Test that unit factors return the center."""
        spec = SweepSpec(center_lr=1e-3, center_wd=0.1, low_factor=1.0, high_factor=1.0, n_samples=5)
        assert sample_lr_wd(spec) == [(1e-3, 0.1)] * 5

    def test_marginals_pass_ks_test(self) -> None:
        """Test the log-uniform marginals with a KS test."""
        spec = SweepSpec(center_lr=2.0e-3, center_wd=0.2, n_samples=10_000, seed=1)
        lrs, wds = zip(*sample_lr_wd(spec))
        assert kstest(lrs, loguniform(*spec.lr_interval).cdf).pvalue > 0.01
        assert kstest(wds, loguniform(*spec.wd_interval).cdf).pvalue > 0.01

    def test_invalid_factors(self) -> None:
        """Test rejecting invalid interval factors."""
        with self.assertRaises(ConfigurationError):
            SweepSpec(center_lr=1e-3, center_wd=0.1, low_factor=2.0).validate()

    def test_model_and_family_sources(self) -> None:
        """Test the model and family sweep centers."""
        spec = sweep_spec_for("ViT_C-4GF", "sgd")
        assert (spec.center_lr, spec.center_wd) == REFERENCE_HPARAMS[("ViT_C-4GF", "sgd")]
        family = sweep_spec_for("ViT_C-4GF", "adamw", source="family")
        (lr_lo, lr_hi), (wd_lo, wd_hi) = FAMILY_INTERVALS["adamw"]
        np.testing.assert_allclose(family.lr_interval, (lr_lo, lr_hi), rtol=1e-12)
        np.testing.assert_allclose(family.wd_interval, (wd_lo, wd_hi), rtol=1e-12)

    def test_unknown_model_source(self) -> None:
        """Test rejecting a model without reference values."""
        with self.assertRaises(AggregationError):
            sweep_spec_for("ViT_P-36GF", "adamw")


class TestTrainingLengthStability(unittest.TestCase):
    """Deltas to the asymptotic schedule."""

    def test_delta(self) -> None:
        """Test the delta to the asymptotic schedule."""
        records = [record("ViT_P-1GF", "adamw", 50, 30.0), record("ViT_P-1GF", "adamw", 400, 20.0)]
        deltas = delta_to_asymptotic(records)
        assert deltas[("ViT_P-1GF", "adamw", 50.0)] == 10.0
        assert deltas[("ViT_P-1GF", "adamw", 400.0)] == 0.0

    def test_translation_invariance(self) -> None:
        """Test that shifting every error leaves deltas unchanged."""
        base = [record("M", "adamw", e, err) for e, err in ((25, 40.0), (50, 33.0), (100, 30.0))]
        shifted = [record("M", "adamw", r.epochs, r.final_top1_err + 5.0) for r in base]
        a, b = delta_to_asymptotic(base), delta_to_asymptotic(shifted)
        for key in a:
            self.assertAlmostEqual(a[key], b[key], delta=1e-12)

    def test_best_record_of_a_cell_is_used(self) -> None:
        """Test using the best record of a cell."""
        records = [
            record("M", "adamw", 50, 35.0, lr=1e-3),
            record("M", "adamw", 50, 31.0, lr=2e-3),
            record("M", "adamw", 100, 28.0),
        ]
        self.assertAlmostEqual(delta_to_asymptotic(records)[("M", "adamw", 50.0)], 3.0, delta=1e-12)

    def test_missing_asymptote_names_the_model(self) -> None:
        """Test that a missing asymptote names the model."""
        with self.assertRaises(AggregationError) as ctx:
            delta_to_asymptotic([record("ViT_C-4GF", "adamw", 50, 30.0)], asymptotic_epochs=400)
        assert "ViT_C-4GF" in str(ctx.exception)


class TestOptimizerStability(unittest.TestCase):
    """AdamW versus SGD gaps."""

    def test_gap(self) -> None:
        """Test the optimizer gap."""
        gaps = optimizer_gap([record("M", "adamw", 50, 20.0), record("M", "sgd", 50, 30.0)])
        assert gaps[("M", 50.0)].gap == 10.0
        assert not gaps[("M", 50.0)].fallback

    def test_identical_errors(self) -> None:
        """Test the gap of identical errors."""
        gaps = optimizer_gap([record("M", "adamw", 50, 25.0), record("M", "sgd", 50, 25.0)])
        assert gaps[("M", 50.0)].gap == 0.0

    def test_diverged_run_uses_shorter_schedule(self) -> None:
        """Test that a diverged run uses a shorter schedule."""
        records = [
            record("M", "adamw", 400, 21.0),
            record("M", "sgd", 200, 31.0),
            record("M", "sgd", 100, 33.0),
            record("M", "sgd", 400, 100.0, diverged=True),
        ]
        entry = optimizer_gap(records)[("M", 400.0)]
        assert entry.sgd_err == 31.0
        assert entry.fallback
        self.assertAlmostEqual(entry.gap, 10.0, delta=1e-12)

    def test_stored_fallback_is_respected(self) -> None:
        """Test honoring a stored fallback."""
        records = [
            record("M", "adamw", 400, 21.0),
            record("M", "sgd", 400, 31.0, diverged=True, fallback_epochs=200.0),
        ]
        entry = optimizer_gap(records)[("M", 400.0)]
        assert entry.sgd_err == 31.0
        assert entry.fallback

    def test_resolve_fallback_without_candidates(self) -> None:
        """Test the fallback without shorter runs."""
        assert resolve_fallback("M", "sgd", 50, []) == (100.0, None)

    def test_resolve_fallback_matches_the_configuration(self) -> None:
        """Test that a shorter run under another configuration is not copied."""
        records = [record("M", "sgd", 25, 40.0, config_key="aaaa"), record("M", "sgd", 10, 45.0, config_key="bbbb")]
        assert resolve_fallback("M", "sgd", 50, records, config_key="bbbb") == (45.0, 10.0)
        assert resolve_fallback("M", "sgd", 50, records) == (40.0, 25.0)

    def test_unmatched_cells_are_skipped(self) -> None:
        """Test skipping cells without both optimizers."""
        assert optimizer_gap([record("M", "adamw", 50, 20.0)]) == {}

    def test_gap_rows(self) -> None:
        """Test the gap table rows."""
        rows = gap_rows([record("M", "adamw", 50, 20.0), record("M", "sgd", 50, 30.0)])
        assert rows == [("M", 50.0, 20.0, 30.0, 10.0, 0)]


class TestTiming(unittest.TestCase):
    """Normalized epoch minutes."""

    def test_reference_worker_count(self) -> None:
        """Test the reference worker count."""
        self.assertAlmostEqual(normalized_epoch_minutes(60.0, 8, 1), 1.0, delta=1e-12)
        self.assertAlmostEqual(normalized_epoch_minutes(480.0, 8, 1), 8.0, delta=1e-12)

    def test_scales_with_workers(self) -> None:
        """Test scaling with the worker count."""
        ratio = normalized_epoch_minutes(480.0, 16, 1) / normalized_epoch_minutes(480.0, 8, 1)
        self.assertAlmostEqual(ratio, 2.0, delta=1e-12)

    def test_per_epoch(self) -> None:
        """Test normalizing per epoch."""
        self.assertAlmostEqual(normalized_epoch_minutes(600.0, 8, 10), 1.0, delta=1e-12)

    def test_zero_epochs(self) -> None:
        """Test rejecting zero epochs."""
        with self.assertRaises(InputError):
            normalized_epoch_minutes(60.0, 8, 0)


class TestRunRecord(unittest.TestCase):
    """Record invariants and serialization."""

    def test_error_must_be_a_percentage(self) -> None:
        """Test rejecting an error above 100."""
        with self.assertRaises(InputError):
            record("M", "adamw", 50, 101.0)

    def test_wall_time_must_be_positive(self) -> None:
        """Test rejecting a zero wall time."""
        with self.assertRaises(InputError):
            record("M", "adamw", 50, 10.0, wall_time_seconds=0.0)

    def test_round_trip_and_default_id(self) -> None:
        """Test serializing a record and its default id."""
        original = record("M", "sgd", 50, 12.5, raw_top1_err=13.0)
        restored = RunRecord.from_dict(original.to_dict())
        assert restored.run_id == original.trial_id
        assert restored.raw_top1_err == 13.0
        assert math.isnan(restored.ema_top1_err)

    def test_config_key_changes_the_trial_id(self) -> None:
        """Test that the configuration fingerprint is part of the trial id."""
        a = record("M", "sgd", 50, 12.5, config_key="aaaa")
        b = record("M", "sgd", 50, 12.5, config_key="bbbb")
        assert a.trial_id != b.trial_id
        assert a.trial_id == trial_id("M", "sgd", 1e-3, 0.05, 50, 0, "aaaa")


if __name__ == "__main__":
    unittest.main()
