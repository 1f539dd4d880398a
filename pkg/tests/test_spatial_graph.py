import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flaglab.errors import ContractError
from flaglab.spatial_graph import (SlideSample, build_edge_condition,
                                   build_knn_graph, cosine_similarity_matrix)


def make_slide(n=6, g=4, d_v=3, seed=0, coords=None, visual=None):
    rng = np.random.default_rng(seed)
    if coords is None:
        coords = rng.uniform(0, 1000, size=(n, 2))
    if visual is None:
        visual = rng.normal(size=(n, d_v))
    return SlideSample(
        coords=coords, visual=visual, expr=rng.normal(size=(n, g)),
        gene_names=[f"g{i}" for i in range(g)], slide_id="t",
    )


class TestSlideSample:
    def test_rejects_duplicate_coords(self):
        coords = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(ContractError):
            make_slide(n=3, coords=coords)

    def test_rejects_single_spot(self):
        with pytest.raises(ContractError):
            make_slide(n=1, coords=np.array([[0.0, 0.0]]))

    def test_rejects_nonfinite_expr(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            SlideSample(
                coords=rng.uniform(size=(3, 2)), visual=rng.normal(size=(3, 2)),
                expr=np.array([[1.0, np.nan], [0, 0], [0, 0]]),
                gene_names=["a", "b"],
            )

    def test_rejects_duplicate_gene_names(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            SlideSample(
                coords=rng.uniform(size=(3, 2)), visual=rng.normal(size=(3, 2)),
                expr=rng.normal(size=(3, 2)), gene_names=["a", "a"],
            )


class TestEdgeCondition:
    def test_diagonal_is_one(self):
        ec = build_edge_condition(make_slide(), sigma=224.0)
        assert np.allclose(np.diagonal(ec.w[:, :, 0]), 1.0)
        assert np.allclose(np.diagonal(ec.w[:, :, 1]), 1.0)

    def test_distance_kernel_frozen_value(self):
        # distance 224 at length scale 224 -> exp(-1/2)
        coords = np.array([[0.0, 0.0], [224.0, 0.0]])
        slide = make_slide(n=2, coords=coords)
        ec = build_edge_condition(slide, sigma=224.0)
        assert ec.w[0, 1, 0] == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_identical_visual_rows_give_unit_cosine(self):
        v = np.tile(np.array([1.0, 2.0, -1.0]), (3, 1))
        slide = make_slide(n=3, coords=np.array([[0, 0], [1, 0], [0, 1.0]]), visual=v)
        ec = build_edge_condition(slide)
        assert np.allclose(ec.w[:, :, 1], 1.0)

    def test_zero_visual_rows(self):
        v = np.zeros((3, 4))
        v[0] = [1, 0, 0, 0]
        sim = cosine_similarity_matrix(v)
        assert sim[1, 2] == 0.0 and sim[0, 1] == 0.0
        assert sim[1, 1] == 1.0 and sim[2, 2] == 1.0

    def test_channels_symmetric(self):
        ec = build_edge_condition(make_slide(seed=3))
        for c in range(2):
            assert np.allclose(ec.w[:, :, c], ec.w[:, :, c].T)

    def test_translation_invariance(self):
        slide = make_slide(seed=1)
        shifted = make_slide(seed=1, coords=slide.coords + np.array([123.0, -77.0]))
        a = build_edge_condition(slide).w[:, :, 0]
        b = build_edge_condition(shifted).w[:, :, 0]
        assert np.allclose(a, b, atol=1e-12)

    @given(st.floats(0.1, 100.0))
    @settings(max_examples=30, deadline=None)
    def test_visual_scaling_invariance(self, scale):
        slide = make_slide(seed=2)
        scaled = make_slide(seed=2, visual=slide.visual * scale)
        a = build_edge_condition(slide).w[:, :, 1]
        b = build_edge_condition(scaled).w[:, :, 1]
        assert np.allclose(a, b, atol=1e-9)

    def test_doubling_sigma_weakly_increases_offdiag(self):
        slide = make_slide(seed=4)
        w1 = build_edge_condition(slide, sigma=100.0).w[:, :, 0]
        w2 = build_edge_condition(slide, sigma=200.0).w[:, :, 0]
        assert np.all(w2 >= w1 - 1e-15)

    def test_rejects_nan_visual(self):
        slide = make_slide()
        slide.visual[0, 0] = np.nan
        with pytest.raises(ContractError):
            build_edge_condition(slide)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ContractError):
            build_edge_condition(make_slide(), sigma=0.0)


class TestKnnGraph:
    def test_hand_traced_line(self):
        coords = np.array([[0.0, 0], [1.0, 0], [3.0, 0], [10.0, 0]])
        g = build_knn_graph(coords, k=1)
        expected = np.zeros((4, 4), dtype=np.int64)
        for i, j in [(0, 1), (1, 2), (2, 3)]:
            expected[i, j] = expected[j, i] = 1
        assert np.array_equal(g.W, expected)
        assert g.s0 == 6

    def test_full_k_gives_complete_graph(self):
        coords = np.random.default_rng(0).uniform(size=(5, 2))
        g = build_knn_graph(coords, k=4)
        assert np.array_equal(g.W, 1 - np.eye(5, dtype=np.int64))

    def test_symmetric_zero_diagonal(self):
        coords = np.random.default_rng(3).uniform(size=(12, 2))
        g = build_knn_graph(coords, k=3)
        assert np.array_equal(g.W, g.W.T)
        assert np.all(np.diagonal(g.W) == 0)
        assert g.W.sum(axis=1).min() >= 3  # symmetrization can only add

    def test_permutation_conjugation(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(size=(10, 2))
        perm = rng.permutation(10)
        g = build_knn_graph(coords, k=3)
        gp = build_knn_graph(coords[perm], k=3)
        p = np.eye(10, dtype=np.int64)[perm]
        assert np.array_equal(gp.W, p @ g.W @ p.T)

    def test_tie_break_by_ascending_index(self):
        # spot 0 is exactly equidistant from 1 and 2; the tie resolves to
        # the lower index (1)
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        g = build_knn_graph(coords, k=1)
        expected = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]])
        assert np.array_equal(g.W, expected)

    def test_k_too_large(self):
        coords = np.random.default_rng(0).uniform(size=(4, 2))
        with pytest.raises(ContractError):
            build_knn_graph(coords, k=4)
        with pytest.raises(ContractError):
            build_knn_graph(coords, k=0)
