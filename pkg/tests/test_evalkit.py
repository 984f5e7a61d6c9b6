import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemim import evalkit
from agemim.syndata import Trial

TARGETS = [0.9, 0.6, 0.4]
NONTARGETS = [0.5, 0.2, 0.1]


def _split(scores, labels):
    return scores[labels], scores[~labels]


def brute_scan(scores, labels, p_target=0.01, c_fa=1.0, c_miss=1.0):
    """Exhaustive threshold scan by direct counting; returns (eer %, min_dcf)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tar, non = _split(scores, labels)
    points = []
    for thr in [np.inf] + sorted(set(scores.tolist()), reverse=True):
        miss = sum(1 for s in tar if not s >= thr) / len(tar)
        fa = sum(1 for s in non if s >= thr) / len(non)
        points.append((miss, fa))
    # first operating point where misses no longer exceed false alarms
    k = next(i for i, (m, f) in enumerate(points) if m - f <= 0)
    m1, f1 = points[k]
    if k == 0 or m1 == f1:
        rate = f1
    else:
        m0, f0 = points[k - 1]
        d0, d1 = m0 - f0, m1 - f1
        rate = f0 + d0 / (d0 - d1) * (f1 - f0)
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    dcf = min(c_miss * p_target * m + c_fa * (1 - p_target) * f for m, f in points) / norm
    return 100.0 * rate, dcf


def _example():
    return np.array(TARGETS + NONTARGETS), np.array([1, 1, 1, 0, 0, 0], dtype=bool)


class TestScoring:
    def _score(self, a, b):
        trials = [Trial("a", "b", True)]
        return evalkit.score_trials({"a": np.asarray(a, float), "b": np.asarray(b, float)}, trials)[0]

    def test_cosine_cases(self):
        assert self._score([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert self._score([1, 0], [0, 1]) == 0.0
        assert self._score([1, 2], [3, 6]) == pytest.approx(1.0)

    def test_missing_id(self):
        with pytest.raises(KeyError):
            evalkit.score_trials({"a": np.ones(2)}, [Trial("a", "zz", True)])

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            self._score([0, 0], [1, 1])


class TestEer:
    def test_perfect(self):
        assert evalkit.eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0

    def test_worked_example(self):
        assert evalkit.eer(*_example())[0] == pytest.approx(33.3333, abs=1e-4)

    def test_swapped_labels(self):
        assert evalkit.eer([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1])[0] == 100.0

    def test_lower_is_target(self):
        scores, labels = _example()
        assert evalkit.eer(-scores, labels, greater_is_target=False)[0] == pytest.approx(33.3333, abs=1e-4)

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            evalkit.eer([0.1, 0.2], [1, 1])

    def test_ties_are_grouped(self):
        # one target and one nontarget tied: no threshold separates them
        assert evalkit.eer([0.5, 0.5], [1, 0])[0] == pytest.approx(50.0)


class TestMinDcf:
    def test_perfect(self):
        assert evalkit.min_dcf([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0

    def test_worked_example(self):
        assert evalkit.min_dcf(*_example())[0] == pytest.approx(0.3333, abs=1e-4)

    def test_all_equal(self):
        assert evalkit.min_dcf([0.3] * 6, [1, 1, 1, 0, 0, 0])[0] == pytest.approx(1.0)


class TestBruteForce:
    def test_one_hundred_random_sets(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            n = int(rng.integers(2, 1001))
            labels = rng.random(n) < rng.uniform(0.1, 0.9)
            labels[0], labels[1] = True, False
            # coarse rounding on some sets forces ties
            scores = rng.standard_normal(n) + labels * rng.uniform(0, 2)
            if trial % 3 == 0:
                scores = np.round(scores, 1)
            expected_eer, expected_dcf = brute_scan(scores, labels)
            m = evalkit.det_metrics(scores, labels)
            assert m.eer == pytest.approx(expected_eer, rel=1e-12, abs=1e-12)
            assert m.min_dcf == pytest.approx(expected_dcf, rel=1e-12, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.booleans()), min_size=2, max_size=40))
    def test_matches_scan(self, pairs):
        scores = np.array([p[0] for p in pairs])
        labels = np.array([p[1] for p in pairs])
        if labels.all() or not labels.any():
            return
        e, d = brute_scan(scores, labels)
        assert evalkit.eer(scores, labels)[0] == pytest.approx(e, abs=1e-9)
        assert evalkit.min_dcf(scores, labels)[0] == pytest.approx(d, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.standard_normal(50)
        labels = rng.random(50) < 0.5
        labels[:2] = [True, False]
        for a, b in ((evalkit.eer(scores, labels)[0], evalkit.eer(np.exp(scores), labels)[0]),
                     (evalkit.min_dcf(scores, labels)[0], evalkit.min_dcf(3 * scores + 1, labels)[0])):
            assert a == pytest.approx(b, abs=1e-12)


class TestAgeProbe:
    def test_separable_groups(self):
        rng = np.random.default_rng(1)
        ids = [f"u{i}" for i in range(700)]
        groups = {u: i % 7 for i, u in enumerate(ids)}
        emb = {u: np.r_[groups[u], rng.standard_normal(4) * 0.01] for u in ids}
        assert evalkit.age_probe(emb, groups) >= 95.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(2)
        ids = [f"u{i}" for i in range(4000)]
        groups = {u: int(rng.integers(0, 7)) for u in ids}
        emb = {u: rng.standard_normal(8) for u in ids}
        assert abs(evalkit.age_probe(emb, groups) - 100 / 7) <= 5

    def test_report_format(self):
        m = evalkit.det_metrics(*_example())
        lines = evalkit.format_report({"only-ca5": m}).splitlines()
        assert lines[0].split("\t")[0] == "trial_set"
        assert lines[1].split("\t") == ["only-ca5", "33.3333", "0.3333", "3", "3"]
