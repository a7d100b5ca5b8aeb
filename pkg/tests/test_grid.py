"""Heatmap geometry, aggregation vs brute force, normalization, persistence."""

from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcor.grid import (FeatureBuilder, GridSpec, aggregate_pois,
                        aggregate_regional_usage, cell_indices,
                        channel_divisors, dump_heatmap_text,
                        local_offsets_m, normalize_heatmap,
                        read_heatmap_stack, write_heatmap_stack, GridError)
from atcor.ingest import PoiRecord, TimeSpan, TripRecord

CENTER = (40.75, -73.99)
M_PER_DEG_LAT = np.radians(1.0) * 6_371_008.8


def offset_coord(center, north_m, east_m):
    lat = center[0] + north_m / M_PER_DEG_LAT
    lon = center[1] + east_m / (M_PER_DEG_LAT * np.cos(np.radians(center[0])))
    return lat, lon


def trip_at(start, s_coord, e_coord=None):
    e_coord = e_coord or s_coord
    return TripRecord(start, start + timedelta(minutes=10), "A", "B",
                      s_coord[0], s_coord[1], e_coord[0], e_coord[1])


class TestGridSpec:
    def test_even_cells_rejected(self):
        with pytest.raises(GridError):
            GridSpec(rows=10, cols=11)

    def test_negative_cell_rejected(self):
        with pytest.raises(GridError):
            GridSpec(cell_lat_m=-1)


class TestCellMembership:
    spec = GridSpec(cell_lat_m=500, cell_lon_m=500, rows=11, cols=11)

    def test_point_at_center(self):
        row, col, ok = cell_indices(np.array([CENTER[0]]), np.array([CENTER[1]]),
                                    self.spec, *CENTER)
        assert ok[0] and (row[0], col[0]) == (5, 5)

    def test_600m_north_lands_one_row_north(self):
        # ring-1 row covers 250-750 m north of center
        lat, lon = offset_coord(CENTER, 600.0, 0.0)
        row, col, ok = cell_indices(np.array([lat]), np.array([lon]),
                                    self.spec, *CENTER)
        assert ok[0] and (row[0], col[0]) == (6, 5)

    def test_boundary_is_half_open(self):
        # probe just either side of the 250 m edge (the edge itself is not
        # exactly representable after the degree round-trip)
        lat_hi, lon = offset_coord(CENTER, 250.01, 0.0)   # ring 1
        lat_lo, _ = offset_coord(CENTER, 249.99, 0.0)     # center row
        lat_neg, _ = offset_coord(CENTER, -250.01, 0.0)   # ring -1
        rows, _, _ = cell_indices(np.array([lat_hi, lat_lo, lat_neg]),
                                  np.array([lon, lon, lon]), self.spec, *CENTER)
        assert list(rows) == [6, 5, 4]

    def test_membership_rule_is_deterministic(self):
        lat, lon = offset_coord(CENTER, 250.0, 0.0)
        a = cell_indices(np.array([lat]), np.array([lon]), self.spec, *CENTER)
        b = cell_indices(np.array([lat]), np.array([lon]), self.spec, *CENTER)
        assert a[0][0] == b[0][0] and a[1][0] == b[1][0]

    def test_outside_extent_flagged(self):
        lat, lon = offset_coord(CENTER, 3000.0, 0.0)  # beyond 2750 m edge
        _, _, ok = cell_indices(np.array([lat]), np.array([lon]),
                                self.spec, *CENTER)
        assert not ok[0]


class TestRegionalUsage:
    spec = GridSpec(cell_lat_m=500, cell_lon_m=500, rows=11, cols=11)
    t0 = datetime(2019, 5, 1, 8)

    def test_no_trips_zero_grids(self):
        picks, drops = aggregate_regional_usage([], self.spec, CENTER, self.t0, 1)
        assert picks.sum() == 0 and drops.sum() == 0

    def test_trip_at_station_coordinate_hits_center_cell(self):
        picks, drops = aggregate_regional_usage(
            [trip_at(self.t0 + timedelta(minutes=5), CENTER)],
            self.spec, CENTER, self.t0, 1)
        assert picks[5, 5] == 1 and picks.sum() == 1

    def test_matches_brute_force_on_scattered_trips(self):
        rng = np.random.default_rng(0)
        trips = []
        for _ in range(500):
            north, east = rng.uniform(-2750, 2750, size=2)
            start = self.t0 + timedelta(minutes=float(rng.uniform(0, 59)))
            trips.append(trip_at(start, offset_coord(CENTER, north, east),
                                 offset_coord(CENTER, *rng.uniform(-2750, 2750, 2))))
        picks, drops = aggregate_regional_usage(trips, self.spec, CENTER, self.t0, 1)

        # independent O(events x cells) membership count
        brute = np.zeros((11, 11), dtype=int)
        for t in trips:
            north, east = local_offsets_m(np.array([t.start_lat]),
                                          np.array([t.start_lon]), *CENTER)
            for i in range(11):
                lo_n = (i - 5) * 500 - 250
                for j in range(11):
                    lo_e = (j - 5) * 500 - 250
                    if lo_n <= north[0] < lo_n + 500 and lo_e <= east[0] < lo_e + 500:
                        brute[i, j] += 1
        np.testing.assert_array_equal(picks, brute)
        assert picks.sum() == brute.sum()

    def test_translation_consistency(self):
        # shifting the station and every event by the same offset leaves the
        # usage channels unchanged (events stay well inside the extent)
        rng = np.random.default_rng(5)
        offsets = rng.uniform(-1000, 1000, size=(40, 2))
        base_events = [trip_at(self.t0 + timedelta(minutes=10),
                               offset_coord(CENTER, n, e)) for n, e in offsets]
        picks_a, _ = aggregate_regional_usage(base_events, self.spec, CENTER,
                                              self.t0, 1)
        shift = (900.0, -700.0)
        new_center = offset_coord(CENTER, *shift)
        moved = [trip_at(self.t0 + timedelta(minutes=10),
                         offset_coord(CENTER, n + shift[0], e + shift[1]))
                 for n, e in offsets]
        picks_b, _ = aggregate_regional_usage(moved, self.spec, new_center,
                                              self.t0, 1)
        np.testing.assert_array_equal(picks_a, picks_b)


class TestPoiAggregation:
    spec = GridSpec(cell_lat_m=500, cell_lon_m=500, rows=11, cols=11)
    cats = ("education", "commercial", "others")

    def test_empty_catalog(self):
        grids = aggregate_pois([], self.spec, CENTER, self.cats)
        assert grids.shape == (3, 11, 11) and grids.sum() == 0

    def test_poi_600m_north(self):
        lat, lon = offset_coord(CENTER, 600.0, 0.0)
        grids = aggregate_pois([PoiRecord("education", lat, lon)],
                               self.spec, CENTER, self.cats)
        assert grids[0, 6, 5] == 1 and grids.sum() == 1

    def test_duplicates_count_twice(self):
        p = PoiRecord("commercial", *CENTER)
        grids = aggregate_pois([p, p], self.spec, CENTER, self.cats)
        assert grids[1, 5, 5] == 2

    def test_unknown_category_routes_to_others(self):
        grids = aggregate_pois([PoiRecord("zoo", *CENTER)],
                               self.spec, CENTER, self.cats)
        assert grids[2, 5, 5] == 1


class TestNormalize:
    def test_uniform_heatmap_becomes_zero(self):
        raw = np.ones((5, 5, 3)) * np.array([2.0, 7.0, 1.5])
        np.testing.assert_array_equal(normalize_heatmap(raw), np.zeros((5, 5, 3)))

    def test_hand_arithmetic(self):
        raw = np.zeros((3, 3, 1))
        raw[1, 1, 0] = 7.0
        raw[0, 2, 0] = 10.0
        out = normalize_heatmap(raw)
        assert out[0, 2, 0] == 3.0 and out[1, 1, 0] == 0.0

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0, 9, size=(7, 7, 4))
        once = normalize_heatmap(raw)
        np.testing.assert_array_equal(normalize_heatmap(once), once)

    def test_center_exactly_zero_on_1000_random_heatmaps(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            rows = int(rng.choice([3, 5, 7, 11]))
            ch = int(rng.integers(1, 6))
            raw = rng.uniform(0, 50, size=(rows, rows, ch))
            out = normalize_heatmap(raw)
            assert np.all(out[rows // 2, rows // 2, :] == 0.0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_center_zero_property(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.uniform(0, 100, size=(5, 5, 3))
        out = normalize_heatmap(raw)
        assert np.all(out[2, 2, :] == 0.0)


class TestFeatureBuilder:
    def make(self, trips=(), pois=(), divisors=None):
        span = TimeSpan(datetime(2019, 5, 1), datetime(2019, 5, 1, 3))
        spec = GridSpec(cell_lat_m=500, cell_lon_m=500, rows=11, cols=11)
        return FeatureBuilder(list(trips), list(pois), spec,
                              ["pickups", "dropoffs", "education", "others"],
                              span, 1, divisors=divisors)

    def test_poi_channels_static_over_time(self):
        fb = self.make(pois=[PoiRecord("education", *offset_coord(CENTER, 600, 0))])
        stack = fb.series("A", CENTER)
        np.testing.assert_array_equal(stack.tensor[0, :, :, 2],
                                      stack.tensor[2, :, :, 2])

    def test_identical_intervals_identical_heatmaps(self):
        t0 = datetime(2019, 5, 1, 0, 10)
        trips = [trip_at(t0, offset_coord(CENTER, 600, 0)),
                 trip_at(t0 + timedelta(hours=1), offset_coord(CENTER, 600, 0))]
        stack = self.make(trips=trips).series("A", CENTER)
        np.testing.assert_array_equal(stack.tensor[0], stack.tensor[1])

    def test_nyc_default_shape(self):
        from atcor.config import load_city
        cfg = load_city("nyc")
        assert (cfg.grid.rows, cfg.grid.cols, cfg.n_channels) == (11, 11, 15)

    def test_divisor_scaling_keeps_center_zero(self):
        t0 = datetime(2019, 5, 1, 0, 10)
        fb = self.make(trips=[trip_at(t0, offset_coord(CENTER, 600, 0))],
                       divisors=np.array([2.0, 4.0, 1.0, 1.0]))
        stack = fb.series("A", CENTER)
        assert np.all(stack.tensor[:, 5, 5, :] == 0.0)
        assert stack.tensor[0, 6, 5, 0] == 0.5  # one pick-up / divisor 2


class TestChannelDivisors:
    def test_pooled_ranges(self):
        a = np.zeros((2, 3, 3, 2))
        a[..., 0] = 4.0
        a[0, 0, 0, 0] = 10.0
        b = np.zeros((1, 3, 3, 2))
        div = channel_divisors([a, b])
        assert div[0] == 10.0  # max 10, min 0
        assert div[1] == 1.0   # degenerate range guards to 1


class TestHeatmapPersistence:
    def test_binary_round_trip_and_text_dump(self, tmp_path):
        rng = np.random.default_rng(0)
        from atcor.grid import HeatmapStack
        stack = HeatmapStack(
            station_id="S1", t0=datetime(2019, 5, 1), interval_hours=1,
            channels=("pickups", "dropoffs", "others"),
            tensor=rng.normal(size=(4, 5, 5, 3)).astype(np.float32).astype(float),
            divisors=np.array([1.0, 2.0, 3.0]))
        p = tmp_path / "s1.hm"
        write_heatmap_stack(stack, p, dtype="<f8")
        back = read_heatmap_stack(p)
        assert back.station_id == "S1" and back.channels == stack.channels
        np.testing.assert_array_equal(back.tensor, stack.tensor)
        np.testing.assert_array_equal(back.divisors, stack.divisors)
        dump_heatmap_text(stack, tmp_path / "s1.txt", max_t=2)
        text = (tmp_path / "s1.txt").read_text()
        assert "channel pickups" in text

    def test_magic_check(self, tmp_path):
        p = tmp_path / "bad.hm"
        p.write_bytes(b"NOPE1234")
        with pytest.raises(GridError, match="not a heatmap"):
            read_heatmap_stack(p)
