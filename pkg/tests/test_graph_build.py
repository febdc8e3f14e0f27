import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellalign.errors import EmptyInput, InvalidInput, MissingFeature, NoDenseRegion
from cellalign.geometry import RigidTransform
from cellalign.graph_build import (
    DensityMap,
    build_graph,
    kde_density,
    proximity_edges,
    sample_windows,
    window_mask,
)
from cellalign.synth import SynthScenario, generate

from conftest import make_table


def brute_kde(xy, h):
    raw = [math.fsum(math.exp(-((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) / (2 * h * h)) for q in xy)
           for p in xy]
    top = max(raw)
    return np.array([r / top for r in raw])


def brute_edges(xy, threshold):
    return {(i, j) for i, j in itertools.combinations(range(len(xy)), 2)
            if math.dist(xy[i], xy[j]) < threshold}


class TestKde:
    def test_single_cell(self):
        assert kde_density([[3.0, 4.0]]).values.tolist() == [1.0]

    def test_two_far_cells_symmetric(self):
        d = kde_density([[0.0, 0.0], [250.0, 0.0]], bandwidth=25.0)
        assert d.values.tolist() == [1.0, 1.0]

    def test_isolated_cell_below_gate(self, rng):
        cluster = rng.normal(0.0, 5.0, size=(50, 2))
        xy = np.vstack([cluster, [[500.0, 0.0]]])
        d = kde_density(xy, bandwidth=25.0)
        np.testing.assert_allclose(d.values, brute_kde(xy, 25.0), rtol=0, atol=1e-12)
        assert d.values[-1] < 0.5
        assert d.gate().tolist() == list(range(50))

    def test_matches_direct_sum(self, rng):
        xy = rng.uniform(0, 200, size=(120, 2))
        np.testing.assert_allclose(kde_density(xy, 20.0).values, brute_kde(xy, 20.0), atol=1e-12)

    def test_range_and_max(self, rng):
        d = kde_density(rng.uniform(0, 500, size=(300, 2)))
        assert d.values.max() == 1.0
        assert d.values.min() >= 0.0

    @given(theta=st.floats(-math.pi, math.pi), dx=st.floats(-1e3, 1e3), dy=st.floats(-1e3, 1e3))
    def test_rigid_invariance(self, theta, dx, dy):
        xy = np.random.default_rng(4).uniform(0, 300, size=(80, 2))
        moved = RigidTransform(theta, 1.0, dx, dy).apply(xy)
        np.testing.assert_allclose(kde_density(moved).values, kde_density(xy).values, atol=1e-9)

    def test_errors(self):
        with pytest.raises(EmptyInput):
            kde_density(np.zeros((0, 2)))
        with pytest.raises(InvalidInput):
            kde_density([[0.0, 0.0]], bandwidth=0.0)

    def test_accepts_table(self):
        t = make_table([[0, 0], [1, 1]])
        assert len(kde_density(t)) == 2


class TestWindows:
    def test_single_window_on_dense_cell(self):
        xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        coarse = RigidTransform(0.0, 1.0, 10.0, 0.0)
        dens = DensityMap(np.ones(3), 25.0)
        (w,) = sample_windows(xy, dens, coarse, count=1, seed=3)
        assert 0 <= w.anchor < 3
        np.testing.assert_array_equal(w.source_center, xy[w.anchor])
        np.testing.assert_allclose(w.target_center, xy[w.anchor] + [10.0, 0.0])
        assert (w.source_size, w.target_size) == (50.0, 150.0)

    def test_gate_excludes_sparse_cells(self, rng):
        xy = np.vstack([rng.normal(0, 5, size=(50, 2)), [[500.0, 0.0], [-500.0, 40.0]]])
        dens = kde_density(xy)
        for seed in range(10):
            for w in sample_windows(xy, dens, RigidTransform(), count=4, seed=seed):
                assert dens.values[w.anchor] >= 0.5

    def test_clustered_pattern_separation(self):
        pts = generate(SynthScenario(n_points=2000, extent=1000.0, seed=7)).source.xy
        dens = kde_density(pts)
        coarse = RigidTransform.from_degrees(5.0, 20.0, -10.0)
        windows = sample_windows(pts, dens, coarse, count=8, seed=11)
        assert len(windows) == 8
        centres = np.array([w.source_center for w in windows])
        for a, b in itertools.combinations(centres, 2):
            assert math.dist(a, b) >= 50.0
        for w in windows:
            np.testing.assert_allclose(w.target_center, coarse.apply(w.source_center[None])[0], atol=1e-12)

    def test_best_effort_fill(self):
        # Three cells within 50 um of each other: only one fits the separation rule.
        xy = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
        ws = sample_windows(xy, DensityMap(np.ones(3), 25.0), RigidTransform(), count=3, seed=0)
        assert sorted(w.anchor for w in ws) == [0, 1, 2]

    def test_reproducible(self):
        pts = generate(SynthScenario(n_points=800, extent=600.0, seed=1)).source.xy
        dens = kde_density(pts)
        a = sample_windows(pts, dens, RigidTransform(), count=6, seed=42)
        b = sample_windows(pts, dens, RigidTransform(), count=6, seed=42)
        assert [w.to_dict() for w in a] == [w.to_dict() for w in b]

    def test_no_dense_region(self):
        with pytest.raises(NoDenseRegion):
            sample_windows([[0.0, 0.0]], DensityMap(np.array([0.2]), 25.0), RigidTransform(), gate=0.5)

    def test_window_mask_square(self):
        xy = np.array([[0.0, 0.0], [25.0, 25.0], [25.1, 0.0], [-24.9, 24.9]])
        assert window_mask(xy, [0.0, 0.0], 50.0).tolist() == [True, True, False, True]


class TestGraph:
    def _cells(self, xy, **extra):
        n = len(xy)
        feats = {"perimeter": np.arange(n, dtype=float) + 30.0, "solidity": np.full(n, 0.9)}
        feats.update(extra)
        return make_table(xy, feats)

    def test_one_edge(self):
        g = build_graph(self._cells([[0, 0], [10, 0]]))
        assert g.edges.tolist() == [[0, 1]]
        assert g.lengths.tolist() == [10.0]

    def test_no_edge(self):
        g = build_graph(self._cells([[0, 0], [20, 0]]))
        assert g.n_edges == 0

    def test_threshold_is_strict(self):
        assert build_graph(self._cells([[0, 0], [15, 0]])).n_edges == 0

    def test_window_edges_match_brute_force(self, rng):
        xy = rng.uniform(0, 50, size=(30, 2))
        g = build_graph(self._cells(xy))
        assert {tuple(e) for e in g.edges.tolist()} == brute_edges(xy, 15.0)
        assert np.all(g.lengths < 15.0)

    @given(st.floats(0.5, 60.0), st.integers(0, 2**31 - 1))
    def test_edges_property(self, threshold, seed):
        xy = np.random.default_rng(seed).uniform(0, 80, size=(40, 2))
        edges, lengths = proximity_edges(xy, threshold)
        pairs = [tuple(e) for e in edges.tolist()]
        assert set(pairs) == brute_edges(xy, threshold)
        assert len(pairs) == len(set(pairs))
        assert all(i < j for i, j in pairs)
        np.testing.assert_allclose(lengths, [math.dist(xy[i], xy[j]) for i, j in pairs])

    def test_window_selects_nodes(self):
        cells = self._cells([[0, 0], [20, 0], [100, 0]])
        g = build_graph(cells, center=[10.0, 0.0], size=50.0)
        assert g.ids == ("c0", "c1")
        assert g.index.tolist() == [0, 1]
        assert g.features.shape == (2, 2)

    def test_missing_feature_value(self):
        cells = self._cells([[0, 0], [5, 0]], solidity=np.array([0.9, np.nan]))
        with pytest.raises(MissingFeature) as exc:
            build_graph(cells)
        assert (exc.value.cell_id, exc.value.name) == ("c1", "solidity")

    def test_missing_feature_column(self):
        cells = make_table([[0, 0], [5, 0]], {"perimeter": np.ones(2)})
        with pytest.raises(MissingFeature):
            build_graph(cells)

    def test_precomputed_features(self):
        cells = self._cells([[0, 0], [5, 0]])
        g = build_graph(cells, feature_values=np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert g.features.tolist() == [[1.0, 2.0], [3.0, 4.0]]
