import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import gamma as gamma_fn

from chmfl.evaluation import (
    ConfusionCounts,
    MetricsReport,
    classification_metrics,
    make_folds,
    roc_auc,
    segmentation_metrics,
    unpaired_t_test,
    write_roc,
)


class TestClassificationMetrics:
    def test_reference_counts(self):
        # 24 positives / 24 negatives, 4 false positives
        m = classification_metrics(ConfusionCounts(tp=21, fp=4, fn=3, tn=20))
        assert round(m.acc, 3) == 0.854
        assert round(m.sen, 3) == 0.875
        assert round(m.spe, 3) == 0.833
        assert round(m.pre, 3) == 0.840
        assert round(m.f1, 3) == 0.857

    def test_all_correct(self):
        m = classification_metrics(ConfusionCounts(tp=5, tn=7))
        assert (m.acc, m.sen, m.spe, m.pre, m.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_no_positive_calls_leaves_precision_undefined(self):
        m = classification_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=3))
        assert m.pre is None and m.f1 is None
        assert m.acc == pytest.approx(5 / 8)
        assert m.sen == 0.0 and m.spe == 1.0

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)

    def test_exhaustive_inversion(self):
        """(acc, sen, total, positives) determine the counts for every total <= 80."""
        for total in range(1, 81):
            for pos in range(total + 1):
                neg = total - pos
                for tp in range(pos + 1):
                    for tn in (0, neg // 2, neg):
                        c = ConfusionCounts(tp=tp, fn=pos - tp, tn=tn, fp=neg - tn)
                        m = classification_metrics(c)
                        tp_back = round(m.sen * pos) if pos else 0
                        tn_back = round(m.acc * total) - tp_back
                        assert (tp_back, pos - tp_back, tn_back, neg - tn_back) == (c.tp, c.fn, c.tn, c.fp)

    def test_from_decisions(self):
        c = ConfusionCounts.from_decisions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)
        assert c.total == 5


class TestRocAuc:
    def test_separated(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 1.0

    def test_all_tied(self):
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0])[0] == 0.5

    def test_concordant_pairs(self):
        assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])[0] == 0.75

    def test_single_class(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_auc([0.1, 0.2], [1, 1])

    def test_points_monotone_from_origin_to_corner(self):
        rng = np.random.default_rng(0)
        _, pts = roc_auc(rng.random(30), rng.integers(0, 2, 30) | np.eye(1, 30, 0, dtype=int)[0])
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(pts, pts[1:]))

    def test_trapezoid_equals_mann_whitney(self):
        rng = np.random.default_rng(1)
        scores = np.round(rng.random(40), 1)  # coarse rounding forces ties
        labels = np.arange(40) % 2
        auc, pts = roc_auc(scores, labels)
        x, y = np.array(pts).T
        assert auc == pytest.approx(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-500, 500), min_size=4, max_size=20), st.integers(0, 2 ** 16))
    def test_monotone_transform_invariance(self, ints, seed):
        scores = np.asarray(ints) / 100.0
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[0], labels[1] = 0, 1
        a = roc_auc(scores, labels)[0]
        assert roc_auc(np.exp(scores) * 3 + 1, labels)[0] == pytest.approx(a, abs=1e-12)


class TestSegmentationMetrics:
    def test_identical(self):
        m = np.zeros((4, 4, 4))
        m[1:3, 1:3, 1:3] = 1
        s = segmentation_metrics(m, m)
        assert s.dsc == 1.0 and s.jaccard == 1.0 and s.voxel_acc == 1.0

    def test_disjoint(self):
        a, b = np.zeros(10), np.zeros(10)
        a[:3], b[5:] = 1, 1
        assert segmentation_metrics(a, b).dsc == 0.0

    def test_hand_example(self):
        p, t = np.zeros(20), np.zeros(20)
        p[:6] = 1
        t[3:7] = 1
        s = segmentation_metrics(p, t)
        assert s.dsc == pytest.approx(0.6)
        assert s.jaccard == pytest.approx(3 / 7)

    def test_empty_vs_empty(self):
        s = segmentation_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
        assert s.dsc == 1.0 and s.voxel_sen is None

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            segmentation_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
    def test_jaccard_dice_identity(self, seed, density):
        rng = np.random.default_rng(seed)
        p, t = rng.random(64) < density, rng.random(64) < density
        s = segmentation_metrics(p, t)
        assert s.jaccard == pytest.approx(s.dsc / (2 - s.dsc), abs=1e-12)


class TestFolds:
    def test_48_ids_six_folds_of_eight(self):
        split = make_folds([f"P{i:03d}" for i in range(48)], k=6, seed=0)
        assert split.sizes() == [8] * 6

    def test_remainder(self):
        assert sorted(make_folds(list("abcdefg"), k=6).sizes(), reverse=True) == [2, 1, 1, 1, 1, 1]

    def test_deterministic(self):
        ids = [str(i) for i in range(20)]
        assert make_folds(ids, 6, 3) == make_folds(ids, 6, 3)
        assert make_folds(ids, 6, 3) != make_folds(ids, 6, 4)

    def test_partition(self):
        ids = [str(i) for i in range(23)]
        split = make_folds(ids, 6, 1)
        for f in range(6):
            test, train = set(split.test_ids(f)), set(split.train_ids(f))
            assert not test & train and test | train == set(ids)
        assert sorted(sum((split.test_ids(f) for f in range(6)), [])) == sorted(ids)

    def test_too_few_ids(self):
        with pytest.raises(ValueError):
            make_folds(["a", "b"], k=6)


def t_cdf_by_quadrature(t, df):
    c = gamma_fn((df + 1) / 2) / (np.sqrt(df * np.pi) * gamma_fn(df / 2))
    val, _ = integrate.quad(lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2), -np.inf, t)
    return val


class TestTTest:
    def test_identical_means(self):
        t, p = unpaired_t_test([1.0, 2.0, 3.0], [0.0, 2.0, 4.0])
        assert t == 0.0 and p == pytest.approx(1.0)

    def test_hand_example(self):
        t, p = unpaired_t_test([1, 2, 3], [2, 3, 4])
        assert t == pytest.approx(-1.2247, abs=1e-4)
        assert p == pytest.approx(2 * t_cdf_by_quadrature(t, 4), abs=1e-8)
        assert round(p, 3) == 0.288

    @pytest.mark.parametrize("seed", range(5))
    def test_against_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(0, 1, 6), rng.normal(0.7, 1, 9)
        t, p = unpaired_t_test(a, b)
        assert p == pytest.approx(2 * t_cdf_by_quadrature(-abs(t), 13), abs=1e-8)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            unpaired_t_test([1.0, 1.0], [1.0, 1.0])

    def test_too_small(self):
        with pytest.raises(ValueError):
            unpaired_t_test([1.0], [1.0, 2.0])


def test_report_flags_single_class_auc():
    r = MetricsReport.from_scores([0.7, 0.2], [1, 1])
    assert r.auc is None and r.confusion.total == 2


def test_roc_file(tmp_path):
    path = tmp_path / "roc.txt"
    write_roc([(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)], path)
    rows = [tuple(map(float, line.split())) for line in path.read_text().splitlines()]
    assert rows == [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]
