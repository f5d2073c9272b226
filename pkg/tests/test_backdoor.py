import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacrecon.backdoor import (
    Metrics,
    Trigger,
    apply_trigger,
    der,
    der_percent,
    evaluate,
    metrics_csv,
    metrics_json,
    oracle_tac_latent,
    poison_dataset,
    random_coverage_baseline,
    sparse_trigger,
    synthetic_classification,
    tac_coverage,
)
from tacrecon.core import ContractError, make_rng
from tacrecon.nn import Dataset, MlpParams, forward, predict

# (ACC, ASR) before, (ACC, ASR) after, DER, all in percent
TABLE_ROWS = [
    ((93.81, 100.00), (92.03, 10.88), 93.67),
    ((94.00, 100.00), (92.01, 0.98), 98.52),
    ((93.29, 99.91), (91.84, 1.69), 98.39),
    ((93.41, 99.59), (92.39, 0.52), 99.02),
    ((93.57, 98.81), (92.37, 0.38), 98.62),
    ((94.29, 99.98), (92.80, 0.11), 99.19),
]


def random_net(rng, arch, latent_activation="identity"):
    weights = [rng.standard_normal((a, b)) for a, b in zip(arch[:-1], arch[1:])]
    biases = [rng.standard_normal(b) for b in arch[1:]]
    return MlpParams(weights, biases, latent_activation)


def constant_net(d_in, n_classes, label):
    """Always predicts ``label``."""
    b = np.zeros(n_classes)
    b[label] = 5.0
    return MlpParams([np.zeros((d_in, n_classes))], [b])


class TestTrigger:
    def test_zero_delta_is_identity(self):
        x = make_rng(1).standard_normal(6)
        np.testing.assert_array_equal(apply_trigger(x, Trigger(np.zeros(6))), x)

    def test_zero_input(self):
        d = make_rng(2).standard_normal(6)
        np.testing.assert_array_equal(apply_trigger(np.zeros(6), Trigger(d)), d)

    def test_applying_twice_adds_twice(self):
        rng = make_rng(3)
        x, d = rng.standard_normal(6), rng.standard_normal(6)
        trig = Trigger(d)
        np.testing.assert_allclose(apply_trigger(apply_trigger(x, trig), trig), x + 2 * d)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            apply_trigger(np.zeros(5), Trigger(np.zeros(6)))

    @pytest.mark.parametrize("rate", [0.0, 1.0, -0.1, 1.5])
    def test_rate_outside_open_interval(self, rate):
        with pytest.raises(ContractError):
            Trigger(np.zeros(3), poison_rate=rate)

    def test_sparse_trigger_default(self):
        d = sparse_trigger(16)
        assert np.count_nonzero(d) == 4
        np.testing.assert_array_equal(d[-4:], 3.0)


class TestPoisoning:
    def test_single_poisoned_row(self):
        data = Dataset(make_rng(4).standard_normal((10, 3)), np.zeros(10, int))
        out, mask = poison_dataset(data, Trigger(np.ones(3), 1, 0.1), make_rng(5))
        assert len(out) == 11
        assert mask.sum() == 1
        assert out.labels[mask][0] == 1

    def test_nearly_full_rate(self):
        data = Dataset(make_rng(6).standard_normal((100, 3)), np.zeros(100, int))
        out, mask = poison_dataset(data, Trigger(np.ones(3), 1, 0.999), make_rng(7))
        assert len(out) == 200
        assert mask.sum() == 100

    def test_poisoned_rows_audit(self):
        rng = make_rng(8)
        data = Dataset(rng.standard_normal((200, 4)), rng.integers(3, size=200))
        delta = np.array([0.0, 0.0, 2.0, 2.0])
        out, mask = poison_dataset(data, Trigger(delta, 2, 0.2), make_rng(9))
        assert np.all(out.labels[mask] == 2)
        originals = {tuple(np.round(r, 12)) for r in data.inputs}
        for row in out.inputs[mask]:
            assert tuple(np.round(row - delta, 12)) in originals
        # every clean row survives
        assert sorted(map(tuple, out.inputs[~mask])) == sorted(map(tuple, data.inputs))

    def test_too_small_to_poison(self):
        data = Dataset(np.zeros((3, 2)), np.zeros(3, int))
        with pytest.raises(ContractError):
            poison_dataset(data, Trigger(np.ones(2), 1, 0.1), make_rng(0))


class TestEvaluate:
    def test_zero_trigger_on_perfect_model(self):
        # a linear model that recovers the label from the first coordinate
        X = np.repeat(np.eye(3), 4, axis=0)
        y = np.repeat(np.arange(3), 4)
        params = MlpParams([10 * np.eye(3)], [np.zeros(3)])
        m = evaluate(params, Dataset(X, y), Trigger(np.zeros(3), 1))
        assert m.acc == 1.0
        assert m.asr == 0.0

    def test_constant_classifier(self):
        rng = make_rng(10)
        y = rng.integers(4, size=50)
        m = evaluate(constant_net(3, 4, 1), Dataset(rng.standard_normal((50, 3)), y), Trigger(np.ones(3), 1))
        assert m.asr == 1.0
        assert m.acc == pytest.approx(np.mean(y == 1))

    def test_asr_ignores_row_order(self):
        rng = make_rng(11)
        params = random_net(rng, (3, 5, 4))
        test = Dataset(rng.standard_normal((60, 3)), rng.integers(4, size=60))
        trig = Trigger(np.array([1.0, -1.0, 0.5]), 2)
        perm = rng.permutation(60)
        assert evaluate(params, test, trig) == evaluate(params, test.subset(perm), trig)

    def test_asr_denominator_excludes_target_rows(self):
        rng = make_rng(12)
        params = random_net(rng, (3, 5, 4))
        X = rng.standard_normal((80, 3))
        y = rng.integers(4, size=80)
        trig = Trigger(np.array([0.5, 0.5, 0.5]), 3)
        keep = y != 3
        expected = np.mean(predict(params, X[keep] + trig.delta) == 3)
        assert evaluate(params, Dataset(X, y), trig).asr == pytest.approx(expected)


class TestDer:
    @pytest.mark.parametrize("before, after, expected", TABLE_ROWS)
    def test_table_rows(self, before, after, expected):
        assert abs(der_percent(*before, *after) - expected) <= 0.01

    def test_no_change(self):
        m = Metrics(0.9, 0.8)
        assert der(m, m) == 0.5

    def test_range_check(self):
        with pytest.raises(ContractError):
            der(Metrics(1.2, 0.5), Metrics(0.9, 0.1))

    @settings(max_examples=200, deadline=None)
    @given(*[st.floats(0.0, 1.0) for _ in range(4)])
    def test_value_in_unit_interval(self, a, b, c, d):
        assert 0.0 <= der(Metrics(a, b), Metrics(c, d)) <= 1.0


class TestTac:
    def test_zero_delta(self):
        params = random_net(make_rng(13), (4, 6, 3, 2))
        tac = oracle_tac_latent(params, make_rng(14).standard_normal((10, 4)), Trigger(np.zeros(4)))
        np.testing.assert_array_equal(tac, 0.0)

    def test_linear_network_is_input_independent(self):
        rng = make_rng(15)
        params = random_net(rng, (4, 3, 2))
        delta = rng.standard_normal(4)
        tac = oracle_tac_latent(params, rng.standard_normal((7, 4)), Trigger(delta))
        np.testing.assert_allclose(tac, delta @ params.weights[0], atol=1e-12)

    def test_matches_per_sample_loop(self):
        rng = make_rng(16)
        params = random_net(rng, (4, 8, 5, 3), latent_activation="relu")
        X = rng.standard_normal((30, 4))
        trig = Trigger(rng.standard_normal(4))
        loop = np.mean([forward(params, x + trig.delta)[0] - forward(params, x)[0] for x in X], axis=0)
        np.testing.assert_allclose(oracle_tac_latent(params, X, trig), loop, atol=1e-12)

    def test_linear_in_delta_when_all_rectifiers_active(self):
        # positive weights, biases and inputs keep every rectifier in its linear regime
        rng = make_rng(17)
        W1, W2 = rng.uniform(0.1, 1, (4, 6)), rng.uniform(0.1, 1, (6, 3))
        params = MlpParams([W1, W2, rng.standard_normal((3, 2))], [np.ones(6), np.ones(3), np.zeros(2)], "relu")
        X = rng.uniform(0.5, 1.0, (10, 4))
        d = rng.uniform(0.0, 0.2, 4)
        t1 = oracle_tac_latent(params, X, Trigger(d))
        t2 = oracle_tac_latent(params, X, Trigger(2.5 * d))
        np.testing.assert_allclose(t2, 2.5 * t1, rtol=1e-12)


class TestCoverage:
    def test_identical_vectors(self):
        v = make_rng(18).standard_normal(20)
        for frac in (0.05, 0.1, 0.5, 1.0):
            assert tac_coverage(v, v, frac) == 1.0

    def test_disjoint_supports(self):
        s = np.concatenate([np.arange(10, 0, -1.0), np.zeros(10)])
        tac = np.concatenate([np.zeros(10), np.arange(1, 11.0)])
        for frac in (0.1, 0.25, 0.5):
            assert tac_coverage(s, tac, frac) == 0.0

    def test_ties_break_to_lower_index(self):
        s = np.ones(10)
        tac = np.zeros(10)
        tac[0] = 1.0
        assert tac_coverage(s, tac, 0.1) == 1.0

    def test_uses_magnitudes(self):
        s = np.array([-5.0, 1.0, 0.0, 0.0])
        assert tac_coverage(s, np.array([4.0, 0.0, 0.0, 0.0]), 0.25) == 1.0

    def test_random_baseline_near_fraction(self):
        tac = make_rng(19).standard_normal(40)
        base = random_coverage_baseline(tac, 0.1, make_rng(20), n_draws=2000)
        assert base == pytest.approx(0.1, abs=0.02)


def test_synthetic_data_shapes_and_balance():
    means, data = synthetic_classification(1000, 16, 10, 4.0, make_rng(21))
    assert means.shape == (10, 16)
    assert data.inputs.shape == (1000, 16)
    np.testing.assert_array_equal(np.bincount(data.labels), np.full(10, 100))


def test_metrics_report_formats():
    rows = [("before", Metrics(0.9, 0.97), None), ("after", Metrics(0.88, 0.02), 0.965)]
    text = metrics_csv(rows)
    assert "\r" not in text
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == ["phase", "acc", "asr", "der"]
    assert parsed[1][3] == ""
    assert float(parsed[2][3]) == pytest.approx(0.965)
    doc = json.loads(metrics_json(rows))
    assert doc[0]["der"] is None and doc[1]["acc"] == 0.88
    assert not math.isnan(doc[1]["asr"])
