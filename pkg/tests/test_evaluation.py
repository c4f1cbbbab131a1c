"""Tests for the perceptual-distance proxy, trade-off score, erasure rate,
alignment, and the paired evaluation runner."""

import json

import numpy as np
import pytest
import torch

from skiperase.adapter import AdapterStack, StackEntry, init_epr
from skiperase.errors import ConfigError, InputError, PreconditionError
from skiperase.evaluation import (
    EvalProtocol,
    EvalReport,
    PerceptualMetric,
    alignment_score,
    concept_alignment,
    derive_seed,
    erasure_rate,
    lpips_da,
    lpips_sets,
    perceptual_distance,
    run_eval,
)


@pytest.fixture(scope="module")
def metric(small_dataset):
    m = PerceptualMetric()
    m.calibrate(small_dataset.images[:64])
    return m


class TestPerceptualMetric:
    def test_seed_pinned_determinism(self, small_dataset):
        a, b = PerceptualMetric(seed=2024), PerceptualMetric(seed=2024)
        x = small_dataset.images[:4]
        y = small_dataset.images[4:8]
        assert np.array_equal(a.raw_distance(torch.tensor(x), torch.tensor(y)),
                              b.raw_distance(torch.tensor(x), torch.tensor(y)))
        c = PerceptualMetric(seed=7)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_identity_is_zero(self, metric, small_dataset):
        x = small_dataset.images[:3]
        assert metric.distance(x, x) == 0.0

    def test_symmetry(self, metric, small_dataset):
        a = small_dataset.images[:3]
        b = small_dataset.images[3:6]
        assert metric.distance(a, b) == pytest.approx(metric.distance(b, a))

    def test_range_after_calibration(self, metric, small_dataset):
        d = metric.batch_distance(small_dataset.images[:32],
                                  small_dataset.images[32:64])
        assert (d >= 0).all() and (d <= 1).all()
        assert d.mean() > 0

    def test_monotone_under_interpolation(self, metric, small_dataset):
        """Raw distance from a to lerp(a, b, alpha) must grow with alpha."""
        a = torch.tensor(small_dataset.images[0:1])
        b = torch.tensor(small_dataset.images[1:2])
        dists = []
        for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
            mix = (1 - alpha) * a + alpha * b
            dists.append(float(metric.raw_distance(a, mix)[0]))
        assert dists[0] == 0.0
        assert all(dists[i] < dists[i + 1] for i in range(4)), dists

    def test_calibration_validation(self, small_dataset):
        m = PerceptualMetric()
        with pytest.raises(InputError):
            m.calibrate(small_dataset.images[:1])
        with pytest.raises(ConfigError):
            m.calibrate(np.zeros((8, 3, 16, 16), dtype=np.float32))

    def test_shape_mismatch(self, metric):
        with pytest.raises(InputError):
            metric.raw_distance(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 8, 8))

    def test_shuffle_control(self, metric, small_dataset):
        """Aligned identical pairs score 0; shuffled cross-pairs score high."""
        x = small_dataset.images[:32]
        aligned = lpips_sets(x, x, metric)
        rng = np.random.default_rng(1)
        shuffled = lpips_sets(x, x[rng.permutation(32)], metric)
        assert aligned.mean() == 0.0
        assert shuffled.mean() > 0.1


class TestScores:
    def test_lpips_sets_validation(self, metric):
        with pytest.raises(InputError):
            lpips_sets(np.zeros((2, 3, 16, 16)), np.zeros((3, 3, 16, 16)), metric)
        with pytest.raises(InputError):
            lpips_sets(np.zeros((0, 3, 16, 16)), np.zeros((0, 3, 16, 16)), metric)

    def test_lpips_da_scalar_oracle(self):
        e = {"a": [0.4, 0.2], "b": [0.6]}
        u = {"c": [0.1, 0.1], "d": [0.0, 0.2]}
        # Scalar oracle: mean of concept means per side, then difference.
        e_avg = ((0.4 + 0.2) / 2 + 0.6) / 2
        u_avg = (0.1 + 0.1) / 2
        assert lpips_da(e, u) == pytest.approx(e_avg - u_avg, rel=1e-12)

    def test_lpips_da_published_triple(self):
        """Single-concept case: 0.383 erased minus 0.025 retained = 0.358."""
        assert lpips_da({"e": [0.383]}, {"u": [0.025]}) == pytest.approx(0.358)

    def test_lpips_da_empty_sides(self):
        assert lpips_da({}, {}) == 0.0
        assert lpips_da({"e": [0.5]}, {}) == 0.5

    def test_erasure_rate(self, small_dataset, small_classifier):
        _, hold = small_dataset.split(0.1)
        sel = hold.labels == small_classifier.concept_index("disk")
        rate = erasure_rate(small_classifier, hold.images[sel], "disk")
        assert rate >= 0.9
        off = erasure_rate(small_classifier, hold.images[sel], "box")
        assert off <= 0.1
        with pytest.raises(InputError):
            erasure_rate(small_classifier, hold.images[:0], "disk")

    def test_alignment_score_cosine_oracle(self):
        a = np.array([1.0, 0.0, 2.0])
        b = np.array([2.0, 1.0, 0.0])
        expected = (1 * 2 + 0 + 0) / (np.sqrt(5) * np.sqrt(5))
        assert alignment_score(a, b) == pytest.approx(expected, rel=1e-12)
        assert alignment_score(a, a) == pytest.approx(1.0)
        with pytest.raises(InputError):
            alignment_score(np.zeros(3), b)

    def test_concept_alignment_on_holdout(self, small_dataset, small_classifier):
        _, hold = small_dataset.split(0.1)
        sel = hold.labels == small_classifier.concept_index("disk")
        on = concept_alignment(small_classifier, hold.images[sel], "disk")
        off = concept_alignment(small_classifier, hold.images[sel], "box")
        assert on > off


class TestDeriveSeed:
    def test_deterministic_and_distinct(self):
        assert derive_seed(1, "a", 0) == derive_seed(1, "a", 0)
        assert derive_seed(1, "a", 0) != derive_seed(1, "a", 1)
        assert derive_seed(1, "a", 0) != derive_seed(2, "a", 0)
        assert 0 <= derive_seed(3, "x") < 2 ** 32


class TestRunEval:
    def _protocol(self, **kw):
        base = dict(erased=["disk"], retained=["box"], templates_per_concept=2,
                    seeds_per_template=2, seed=9, sample_steps=4,
                    gate_threshold=0.0, gate_samples=4)
        base.update(kw)
        return EvalProtocol(**base)

    def test_identity_control(self, tiny_model, tiny_sched, small_classifier, metric):
        """With no adapter the paired sets are identical: all distances 0."""
        report = run_eval(tiny_model, tiny_sched, None, self._protocol(),
                          small_classifier, metric)
        for vals in list(report.lpips_e.values()) + list(report.lpips_u.values()):
            assert all(v == 0.0 for v in vals)
        assert report.lpips_da == 0.0
        assert set(report.erasure_rates) == {"disk", "box"}

    def test_zero_adapter_is_identity_too(self, tiny_model, tiny_sched,
                                           small_classifier, metric):
        stack = AdapterStack([StackEntry(init_epr(tiny_model, "full", "disk"))])
        report = run_eval(tiny_model, tiny_sched, stack, self._protocol(),
                          small_classifier, metric)
        assert report.lpips_da == 0.0

    def test_gate_failure(self, tiny_model, tiny_sched, small_classifier, metric):
        with pytest.raises(PreconditionError):
            run_eval(tiny_model, tiny_sched, None,
                     self._protocol(gate_threshold=1.01),
                     small_classifier, metric)

    def test_unknown_concept(self, tiny_model, tiny_sched, small_classifier, metric):
        with pytest.raises(ConfigError):
            run_eval(tiny_model, tiny_sched, None,
                     self._protocol(erased=["ghost"]), small_classifier, metric)

    def test_report_save_roundtrip(self, tiny_model, tiny_sched, small_classifier,
                                   metric, tmp_path):
        report = run_eval(tiny_model, tiny_sched, None, self._protocol(),
                          small_classifier, metric)
        jpath, cpath = tmp_path / "r.json", tmp_path / "r.csv"
        report.save(jpath, cpath)
        with open(jpath) as f:
            d = json.load(f)
        assert d["schema_version"] == 1
        assert d["lpips_da"] == report.lpips_da
        assert any("LPIPS-proxy" in n for n in d["notes"])
        assert any("FID" in n for n in d["notes"])
        import csv as csvmod
        with open(cpath) as f:
            rows = list(csvmod.DictReader(f))
        n_e = sum(len(v) for v in report.lpips_e.values())
        n_u = sum(len(v) for v in report.lpips_u.values())
        assert len(rows) == n_e + n_u
