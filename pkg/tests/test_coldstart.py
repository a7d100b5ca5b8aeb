"""Inverse-distance similarity, weights and virtual-history generation."""

import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcor.coldstart import (ColdstartError, EARTH_RADIUS_KM,
                             neighbor_weights, select_neighbors, similarity,
                             virtual_usage)
from atcor.ingest import UsageSeries

T0 = datetime(2019, 5, 1)


def north_of(coord, km):
    """Coordinate displaced due north so the great-circle distance is exact."""
    return (coord[0] + math.degrees(km / EARTH_RADIUS_KM), coord[1])


def series(sid, picks, drops=None):
    picks = np.asarray(picks, dtype=float)
    drops = picks if drops is None else np.asarray(drops, dtype=float)
    return UsageSeries(sid, 1, T0, picks, drops)


class TestSimilarity:
    base = (40.75, -73.99)

    def test_two_km_reciprocal(self):
        assert similarity(self.base, north_of(self.base, 2.0)) == \
            pytest.approx(0.5, abs=1e-12)

    def test_unit_distance(self):
        assert similarity(self.base, north_of(self.base, 1.0)) == \
            pytest.approx(1.0, abs=1e-12)

    def test_0p9_km_fixture_matches_hand_great_circle(self):
        other = north_of(self.base, 0.9)
        # hand haversine, written out in full
        p1, p2 = math.radians(self.base[0]), math.radians(other[0])
        a = (math.sin((p2 - p1) / 2) ** 2
             + math.cos(p1) * math.cos(p2) * math.sin(0.0) ** 2)
        hand_km = 2 * 6371.0088 * math.asin(math.sqrt(a))
        assert hand_km == pytest.approx(0.9, abs=1e-12)
        assert similarity(self.base, other) == pytest.approx(1.0 / 0.9, abs=1e-9)

    def test_coincident_sites_clamped_to_one_meter(self):
        assert similarity(self.base, self.base) == pytest.approx(1000.0)


class TestNeighborWeights:
    base = (40.75, -73.99)

    def test_single_neighbor_gets_weight_one(self):
        w = neighbor_weights(self.base, {"f1": north_of(self.base, 1.3)})
        np.testing.assert_allclose(w.weights, [1.0])

    def test_one_and_two_km_give_point8_point2(self):
        w = neighbor_weights(self.base, {
            "near": north_of(self.base, 1.0),
            "far": north_of(self.base, 2.0)})
        got = dict(zip(w.neighbor_ids, w.weights))
        assert got["near"] == pytest.approx(0.8, abs=1e-9)
        assert got["far"] == pytest.approx(0.2, abs=1e-9)
        assert w.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_equidistant_neighbors_share_equally(self):
        k = 5
        coords = {}
        for i in range(k):
            # same distance, different bearings via tiny lon tweaks kept equal
            coords[f"f{i}"] = north_of((self.base[0], self.base[1] + 0), 1.7)
        w = neighbor_weights(self.base, coords)
        np.testing.assert_allclose(w.weights, np.full(k, 1 / k), atol=1e-12)

    def test_empty_set_errors(self):
        with pytest.raises(ColdstartError):
            neighbor_weights(self.base, {})

    @given(st.floats(1.2, 9.0), st.floats(0.1, 4.0), st.floats(0.1, 4.0))
    @settings(max_examples=50, deadline=None)
    def test_common_distance_scaling_leaves_weights_unchanged(self, f, d1, d2):
        w1 = neighbor_weights(self.base, {"a": north_of(self.base, d1),
                                          "b": north_of(self.base, d2)})
        w2 = neighbor_weights(self.base, {"a": north_of(self.base, d1 * f),
                                          "b": north_of(self.base, d2 * f)})
        np.testing.assert_allclose(w1.weights, w2.weights, atol=1e-7)

    def test_select_neighbors_radius_and_count(self):
        coords = {f"s{i}": north_of(self.base, 0.5 + i) for i in range(10)}
        picked = select_neighbors(self.base, coords, max_neighbors=8,
                                  radius_km=5.0)
        assert set(picked) == {f"s{i}" for i in range(5)}  # 0.5..4.5 km


class TestVirtualUsage:
    base = (40.75, -73.99)

    def weights(self):
        return neighbor_weights(self.base, {
            "near": north_of(self.base, 1.0),
            "far": north_of(self.base, 2.0)})

    def test_all_zero_neighbors(self):
        w = self.weights()
        v = virtual_usage(w, {"near": series("near", np.zeros(5)),
                              "far": series("far", np.zeros(5))}, 0, 5)
        np.testing.assert_array_equal(v, np.zeros((5, 2)))

    def test_hand_weighted_sum(self):
        w = self.weights()
        v = virtual_usage(w, {"near": series("near", [10.0]),
                              "far": series("far", [5.0])}, 0, 1)
        assert v[0, 0] == pytest.approx(0.8 * 10 + 0.2 * 5)
        assert v[0, 0] == pytest.approx(9.0)

    def test_identical_neighbor_series_pass_through(self):
        w = self.weights()
        s = np.array([3.0, 1.0, 7.0])
        v = virtual_usage(w, {"near": series("near", s),
                              "far": series("far", s)}, 0, 3)
        np.testing.assert_allclose(v[:, 0], s)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            coords = {f"f{i}": north_of(self.base, float(rng.uniform(0.3, 4)))
                      for i in range(4)}
            w = neighbor_weights(self.base, coords)
            data = {sid: series(sid, rng.uniform(0, 20, size=6),
                                rng.uniform(0, 20, size=6)) for sid in coords}
            v = virtual_usage(w, data, 0, 6)
            stack = np.stack([data[sid].stacked() for sid in w.neighbor_ids])
            assert np.all(v >= stack.min(axis=0) - 1e-9)
            assert np.all(v <= stack.max(axis=0) + 1e-9)

    def test_missing_interval_drops_neighbor_and_renormalizes(self):
        w = self.weights()
        v = virtual_usage(w, {"near": series("near", [4.0, 6.0]),
                              "far": series("far", [9.0])}, 0, 2)
        np.testing.assert_allclose(v[:, 0], [4.0, 6.0])  # far dropped

    def test_no_coverage_errors(self):
        w = self.weights()
        with pytest.raises(ColdstartError):
            virtual_usage(w, {}, 0, 3)

    def test_far_neighbor_barely_matters(self):
        # continuity near zero weight: a very distant neighbor's removal
        # changes nothing material
        near = north_of(self.base, 0.5)
        coords_with = {"near": near, "distant": north_of(self.base, 500.0)}
        w_with = neighbor_weights(self.base, coords_with)
        w_without = neighbor_weights(self.base, {"near": near})
        data = {"near": series("near", [5.0, 7.0]),
                "distant": series("distant", [100.0, 100.0])}
        v_with = virtual_usage(w_with, data, 0, 2)
        v_without = virtual_usage(w_without, data, 0, 2)
        np.testing.assert_allclose(v_with, v_without, atol=1e-3)
