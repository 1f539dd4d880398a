import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flaglab.data import SyntheticSpec, synth_slide
from flaglab.errors import ContractError, UndefinedMetricError
from flaglab.metrics import (CORR_EPS, MetricsReport, deg_overlap, evaluate,
                             gene_corr_matrix, gsc, morans_i, pcc_mse,
                             rank_sum_test, ssc)
from flaglab.spatial_graph import build_knn_graph

# ---------------------------------------------------------------------------
# independent double-loop oracles


def pearson_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    am, bm = a - a.mean(), b - b.mean()
    num = sum(x * y for x, y in zip(am, bm))
    return num / math.sqrt(sum(x * x for x in am) * sum(y * y for y in bm))


def gene_corr_loop(x, eps=CORR_EPS):
    n, g = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    out = np.zeros((g, g))
    for i in range(g):
        for j in range(g):
            acc = 0.0
            for s in range(n):
                acc += ((x[s, i] - mu[i]) / (sd[i] + eps)) * ((x[s, j] - mu[j]) / (sd[j] + eps))
            out[i, j] = acc / (n - 1)
    return out


def morans_loop(x, w):
    n = len(x)
    z = x - x.mean()
    num = 0.0
    for i in range(n):
        for j in range(n):
            num += w[i, j] * z[i] * z[j]
    return (n / w.sum()) * num / (z @ z)


def u_statistic_pairwise(x_in, x_out):
    u = 0.0
    for a in x_in:
        for b in x_out:
            u += 1.0 if a > b else (0.5 if a == b else 0.0)
    return u


# ---------------------------------------------------------------------------
# PCC / MSE


class TestPccMse:
    def test_perfect(self, rng):
        x = rng.normal(size=(10, 4))
        pcc, mse, per = pcc_mse(x, x)
        assert pcc == pytest.approx(1.0, abs=1e-12)
        assert mse == 0.0
        assert np.allclose(per, 1.0)

    def test_anticorrelated(self, rng):
        x = rng.normal(size=(10, 4))
        pcc, _, _ = pcc_mse(-x, x)
        assert pcc == pytest.approx(-1.0, abs=1e-12)

    def test_matches_loop_oracle(self, rng):
        pred = rng.normal(size=(5, 3))
        gt = rng.normal(size=(5, 3))
        pcc, mse, per = pcc_mse(pred, gt)
        expected = [pearson_loop(pred[:, g], gt[:, g]) for g in range(3)]
        assert np.allclose(per, expected, atol=1e-12)
        assert pcc == pytest.approx(np.mean(expected), abs=1e-12)
        assert mse == pytest.approx(np.mean((pred - gt) ** 2), abs=1e-15)

    def test_zero_variance_excluded(self, rng):
        pred = rng.normal(size=(6, 3))
        gt = rng.normal(size=(6, 3))
        pred[:, 1] = 2.0
        _, _, per = pcc_mse(pred, gt)
        assert np.isnan(per[1]) and np.isfinite(per[0])

    def test_all_zero_variance_undefined(self):
        flat = np.ones((5, 2))
        with pytest.raises(UndefinedMetricError):
            pcc_mse(flat, flat)


# ---------------------------------------------------------------------------
# gene correlation and GSC


class TestGeneCorr:
    def test_duplicated_columns(self, rng):
        col = rng.normal(size=10)
        x = np.stack([col, col, rng.normal(size=10)], axis=1)
        c = gene_corr_matrix(x)
        assert c[0, 1] == pytest.approx(1.0, abs=1e-6)
        assert np.allclose(c, c.T)

    def test_independent_columns_decorrelate(self, rng):
        x = rng.normal(size=(2000, 4))
        c = gene_corr_matrix(x)
        off = c[~np.eye(4, dtype=bool)]
        assert np.abs(off).max() < 0.1

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(7, 4))
        assert np.abs(gene_corr_matrix(x) - gene_corr_loop(x)).max() < 1e-10

    def test_zero_variance_column_zeroed(self, rng):
        x = rng.normal(size=(6, 3))
        x[:, 2] = 5.0
        c = gene_corr_matrix(x)
        assert np.allclose(c[2, :2], 0.0) and np.allclose(c[:2, 2], 0.0)


class TestGsc:
    def test_perfect(self, rng):
        x = rng.normal(size=(12, 5))
        assert gsc(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_exact_negation(self):
        u1 = np.array([1.0, -1.0, 1.0, -1.0])
        u2 = np.array([1.0, 1.0, -1.0, -1.0])
        gt = np.stack([u1, u1 + u2, u1 - u2], axis=1)
        pred = np.stack([u1, -u1 + u2, -u1 - u2], axis=1)
        assert gsc(pred, gt) == pytest.approx(-1.0, abs=1e-6)

    def test_two_genes_rejected(self, rng):
        x = rng.normal(size=(8, 2))
        with pytest.raises(ContractError):
            gsc(x, x)

    def test_zero_variance_triangle_undefined(self, rng):
        col = rng.normal(size=8)
        x = np.stack([col, col, col], axis=1)  # all off-diagonal corrs equal 1
        with pytest.raises(UndefinedMetricError):
            gsc(x, x)

    def test_symmetric(self, rng):
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(10, 4))
        assert gsc(a, b) == pytest.approx(gsc(b, a), abs=1e-12)


# ---------------------------------------------------------------------------
# Moran's I and SSC


def path_graph(n=4):
    w = np.zeros((n, n))
    for i in range(n - 1):
        w[i, i + 1] = w[i + 1, i] = 1
    return w


class TestMoransI:
    def test_checkerboard_path_is_minus_one(self):
        x = np.array([1.0, -1.0, 1.0, -1.0])
        assert morans_i(x, path_graph()) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_undefined(self):
        with pytest.raises(UndefinedMetricError):
            morans_i(np.ones(4), path_graph())

    def test_matches_double_loop(self, rng):
        for _ in range(20):
            n = int(rng.integers(4, 12))
            w = (rng.random((n, n)) < 0.4).astype(float)
            w = np.maximum(w, w.T)
            np.fill_diagonal(w, 0)
            if w.sum() == 0:
                continue
            x = rng.normal(size=n)
            assert morans_i(x, w) == pytest.approx(morans_loop(x, w), abs=1e-12)

    @given(st.floats(0.1, 50.0), st.floats(-20.0, 20.0))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, a, b):
        rng = np.random.default_rng(5)
        x = rng.normal(size=8)
        w = build_knn_graph(rng.uniform(size=(8, 2)), k=2).W
        assert morans_i(a * x + b, w) == pytest.approx(morans_i(x, w), abs=1e-10)


class TestSsc:
    def _slide(self):
        sample, _ = synth_slide(SyntheticSpec(N=49, G=12, seed=5))
        return sample

    def test_perfect(self):
        s = self._slide()
        assert ssc(s.expr, s.expr, s.coords) == pytest.approx(1.0, abs=1e-12)

    def test_per_gene_constant_shift(self, rng):
        s = self._slide()
        shifted = s.expr + rng.normal(size=(1, s.expr.shape[1]))
        assert ssc(shifted, s.expr, s.coords) == pytest.approx(1.0, abs=1e-10)

    def test_k_sensitivity_small(self, rng):
        s = self._slide()
        pred = s.expr + 0.3 * rng.normal(size=s.expr.shape)
        vals = {k: ssc(pred, s.expr, s.coords, k=k) for k in (6, 8, 12)}
        assert abs(vals[6] - vals[8]) < 0.05
        assert abs(vals[12] - vals[8]) < 0.05

    def test_joint_permutation_invariance(self, rng):
        # tie-free coordinates: on exact-tie grids the index tie-break makes
        # the k-NN graph label-dependent by design
        s = self._slide()
        coords = s.coords + rng.uniform(-1, 1, size=s.coords.shape)
        pred = s.expr + 0.5 * rng.normal(size=s.expr.shape)
        perm = rng.permutation(s.n_spots)
        a = ssc(pred, s.expr, coords)
        b = ssc(pred[perm], s.expr[perm], coords[perm])
        assert a == pytest.approx(b, abs=1e-10)

    def test_too_few_defined_genes(self, rng):
        coords = rng.uniform(size=(10, 2)) * 100
        const = np.ones((10, 4))
        with pytest.raises(ContractError):
            ssc(const, const, coords)

    def test_symmetric(self, rng):
        s = self._slide()
        pred = s.expr + rng.normal(size=s.expr.shape)
        assert ssc(pred, s.expr, s.coords) == pytest.approx(
            ssc(s.expr, pred, s.coords), abs=1e-12
        )


# ---------------------------------------------------------------------------
# rank-sum test and DEG overlap


class TestRankSum:
    def test_u_matches_pairwise_definition(self, rng):
        x = rng.integers(0, 5, size=3).astype(float)
        y = rng.integers(0, 5, size=3).astype(float)
        u, _ = rank_sum_test(x, y)
        assert u == pytest.approx(u_statistic_pairwise(x, y), abs=1e-12)

    def test_exact_p_matches_exhaustive_enumeration(self, rng):
        x = np.array([3.0, 5.0, 1.0])
        y = np.array([2.0, 2.0, 4.0])
        u, p = rank_sum_test(x, y)
        # enumerate all 20 assignments of the pooled values to the in-group
        pooled = np.concatenate([x, y])
        from scipy.stats import rankdata
        ranks = rankdata(pooled)
        obs = ranks[:3].sum()
        count = sum(
            1 for idx in combinations(range(6), 3) if ranks[list(idx)].sum() >= obs - 1e-9
        )
        assert p == pytest.approx(count / 20, abs=1e-12)

    def test_normal_approx_matches_scipy(self, rng):
        from scipy.stats import mannwhitneyu
        x = rng.normal(size=20)
        y = rng.normal(size=25) - 0.5
        x[:3] = y[:3]  # inject ties
        u, p = rank_sum_test(x, y)
        ref = mannwhitneyu(x, y, alternative="greater", method="asymptotic",
                           use_continuity=False)
        assert u == pytest.approx(ref.statistic, abs=1e-9)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_all_tied_values(self):
        u, p = rank_sum_test(np.ones(10), np.ones(12))
        assert p == 0.5


class TestDegOverlap:
    def _labels(self, n):
        return np.repeat([0, 1], n // 2)

    def test_perfect(self, rng):
        gt = rng.normal(size=(12, 10))
        labels = self._labels(12)
        gt[labels == 0, :3] += 3.0  # clear markers
        assert deg_overlap(gt, gt, labels, top_k=3) == 1.0

    def test_disjoint_top_sets(self, rng):
        n, g = 16, 10
        labels = self._labels(n)
        gt = rng.normal(size=(n, g))
        gt[labels == 0, :5] += 5.0
        gt[labels == 1, :5] -= 5.0
        pred = np.roll(gt, 5, axis=1)
        assert deg_overlap(pred, gt, labels, top_k=5) == 0.0

    def test_degenerate_domains_rejected(self, rng):
        x = rng.normal(size=(6, 4))
        with pytest.raises(ContractError):
            deg_overlap(x, x, np.zeros(6, dtype=int), top_k=2)
        with pytest.raises(ContractError):
            deg_overlap(x, x, np.array([0, 0, 0, 0, 0, 1]), top_k=2)

    def test_top_k_bounds(self, rng):
        x = rng.normal(size=(6, 4))
        with pytest.raises(ContractError):
            deg_overlap(x, x, self._labels(6), top_k=5)


# ---------------------------------------------------------------------------
# report plumbing


def test_report_roundtrip(rng):
    sample, _ = synth_slide(SyntheticSpec(N=36, G=8, seed=2))
    pred = sample.expr + 0.2 * rng.normal(size=sample.expr.shape)
    labels = np.repeat([0, 1], 18)
    report = evaluate(pred, sample.expr, sample.coords, domain_labels=labels,
                      deg_top_ks=(3,))
    text = report.to_text()
    back = MetricsReport.from_text(text)
    assert back.pcc == report.pcc and back.mse == report.mse
    assert back.gsc == report.gsc and back.ssc == report.ssc
    assert np.allclose(back.per_gene_pcc, report.per_gene_pcc, equal_nan=True)
    assert back.deg_overlap == report.deg_overlap


def test_evaluate_on_identical_prediction():
    sample, _ = synth_slide(SyntheticSpec(N=36, G=8, seed=3))
    report = evaluate(sample.expr, sample.expr, sample.coords)
    assert report.pcc == pytest.approx(1.0, abs=1e-12)
    assert report.mse == 0.0
    assert report.gsc == pytest.approx(1.0, abs=1e-12)
    assert report.ssc == pytest.approx(1.0, abs=1e-12)
    assert report.n_excluded_genes == 0
