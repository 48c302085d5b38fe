import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atgnn.errors import DimensionError, EvaluationError
from atgnn.metrics import average_precision, evaluate, mean_average_precision
from oracles import naive_average_precision, naive_map


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0

    def test_hand_case(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == (1 + 2 / 3) / 2

    @pytest.mark.parametrize("n", [1, 2, 7, 50])
    def test_single_positive_last(self, n):
        scores = np.linspace(1, 0, n)
        t = np.zeros(n)
        t[-1] = 1
        assert average_precision(scores, t) == pytest.approx(1 / n, abs=1e-15)

    def test_no_positives_is_skipped(self):
        assert average_precision([0.3, 0.2], [0, 0]) is None

    def test_ties_resolved_by_index(self):
        # all equal: original order is the ranking
        assert average_precision([0.5] * 4, [0, 1, 0, 1]) == (1 / 2 + 2 / 4) / 2
        assert average_precision([0.5] * 4, [1, 1, 0, 0]) == 1.0

    def test_monotone_transform_invariance(self, rng):
        s = rng.normal(size=40)
        t = rng.random(40) < 0.3
        t[0] = True
        a = average_precision(s, t)
        assert average_precision(np.exp(3 * s) + 2, t) == a
        assert average_precision(np.tanh(s), t) == a

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=30))
    def test_bounds_and_oracle(self, rows):
        scores = [float(s) for s, _ in rows]
        targets = [int(t) for _, t in rows]
        ap = average_precision(scores, targets)
        ref = naive_average_precision(scores, targets)
        if ref is None:
            assert ap is None
            return
        assert ap == pytest.approx(ref, abs=1e-12)
        # worst case puts every positive at the bottom of the ranking
        p, n = sum(targets), len(targets)
        floor = sum(i / (n - p + i) for i in range(1, p + 1)) / p
        assert floor - 1e-12 <= ap <= 1.0
        if p == 1:
            assert ap >= 1 / n - 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            average_precision([0.1, 0.2], [1])


class TestMeanAveragePrecision:
    def test_perfect(self):
        s = np.array([[0.9, 0.1], [0.2, 0.8], [0.1, 0.3]])
        t = np.array([[1, 0], [0, 1], [0, 0]])
        assert mean_average_precision(s, t) == 1.0

    def test_arithmetic_mean(self):
        # class 0 perfect, class 1 positive ranked second of two
        s = np.array([[0.9, 0.9], [0.1, 0.1]])
        t = np.array([[1, 0], [0, 1]])
        assert mean_average_precision(s, t) == 0.75

    def test_skips_and_report(self):
        s = np.array([[0.9, 0.2, 0.4], [0.1, 0.3, 0.6]])
        t = np.array([[1, 0, 0], [0, 0, 1]])
        rep = evaluate(s, t)
        assert rep.skipped == [1]
        assert rep.per_class_ap == [1.0, None, 1.0]
        data = json.loads(rep.to_json())
        assert data == {"mAP": 1.0, "per_class_ap": [1.0, None, 1.0], "skipped": [1]}

    def test_all_skipped(self):
        with pytest.raises(EvaluationError):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_non_binary_targets(self):
        with pytest.raises(DimensionError):
            mean_average_precision(np.zeros((2, 2)), np.full((2, 2), 0.5))

    @pytest.mark.parametrize("seed", range(10))
    def test_random_batch_vs_oracle(self, seed):
        r = np.random.default_rng(seed)
        s = r.random((20, 5))
        t = (r.random((20, 5)) < 0.3).astype(int)
        t[0] = 1
        assert abs(mean_average_precision(s, t) - naive_map(s.tolist(), t.tolist())) < 1e-12
