"""Virtual historical usage for stations that have none yet.

A new or candidate station borrows history from surrounding existing
stations: geographic similarity is the reciprocal of great-circle distance
in km, weights are the squared similarities normalized to sum to one, and
the virtual series is the weighted sum of the neighbors' observed series.
The result is a convex combination, so every virtual value stays inside the
neighbors' value range at that interval.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from atcor.ingest import UsageSeries

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
MIN_DISTANCE_KM = 0.001  # 1 m clamp for (near-)coincident sites


class ColdstartError(ValueError):
    pass


def great_circle_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Haversine distance in kilometers."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def similarity(new_coord: tuple[float, float],
               existing_coord: tuple[float, float]) -> float:
    """Geographic similarity: 1 / great-circle distance in km.

    Distances under 1 m clamp to 1 m with a warning; the source formula is
    silent on coincident sites and the reciprocal must stay finite.
    """
    dist = great_circle_km(*new_coord, *existing_coord)
    if dist < MIN_DISTANCE_KM:
        log.warning("stations %.6f,%.6f and %.6f,%.6f are under 1 m apart; "
                    "clamping distance", *new_coord, *existing_coord)
        dist = MIN_DISTANCE_KM
    return 1.0 / dist


@dataclass
class NeighborWeights:
    """Normalized inverse-square-distance weights over a neighbor set."""

    target: str
    neighbor_ids: list[str]
    distances_km: np.ndarray
    similarities: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ColdstartError(f"weights sum to {self.weights.sum()}, not 1")
        if (self.weights < 0).any() or (self.distances_km <= 0).any():
            raise ColdstartError("weights must be >= 0 and distances > 0")

    def as_rows(self) -> list[tuple[str, float, float, float]]:
        return [(sid, float(d), float(s), float(w)) for sid, d, s, w in
                zip(self.neighbor_ids, self.distances_km, self.similarities,
                    self.weights)]


def neighbor_weights(new_coord: tuple[float, float],
                     neighbors: dict[str, tuple[float, float]],
                     target: str = "candidate") -> NeighborWeights:
    """Weights proportional to squared similarity, normalized over the set."""
    if not neighbors:
        raise ColdstartError("empty neighbor set")
    ids = sorted(neighbors)
    dists = np.array([max(great_circle_km(*new_coord, *neighbors[s]),
                          MIN_DISTANCE_KM) for s in ids])
    sims = 1.0 / dists
    sq = sims ** 2
    return NeighborWeights(target=target, neighbor_ids=ids, distances_km=dists,
                           similarities=sims, weights=sq / sq.sum())


def select_neighbors(new_coord: tuple[float, float],
                     candidates: dict[str, tuple[float, float]],
                     max_neighbors: int = 8,
                     radius_km: float = 5.0) -> dict[str, tuple[float, float]]:
    """Default neighbor set: nearest existing stations within the radius."""
    scored = sorted(
        ((great_circle_km(*new_coord, *coord), sid, coord)
         for sid, coord in candidates.items()),
        key=lambda x: (x[0], x[1]))
    picked = {sid: coord for dist, sid, coord in scored[:max_neighbors]
              if dist <= radius_km}
    return picked


def virtual_usage(weights: NeighborWeights,
                  neighbor_series: dict[str, UsageSeries],
                  start: int, n_intervals: int) -> np.ndarray:
    """Weighted blend of neighbor usage over [start, start+n) intervals.

    Returns a real-valued (n, 2) array (pick-ups, drop-offs); values feed the
    model input channel and are deliberately not rounded.  A neighbor whose
    series does not cover the span is dropped and the remaining weights are
    renormalized with a warning.
    """
    usable_ids, usable_w, rows = [], [], []
    for sid, w in zip(weights.neighbor_ids, weights.weights):
        s = neighbor_series.get(sid)
        if s is None or start < 0 or start + n_intervals > len(s):
            log.warning("neighbor %s missing intervals [%d, %d); dropped and "
                        "weights renormalized", sid, start, start + n_intervals)
            continue
        usable_ids.append(sid)
        usable_w.append(w)
        rows.append(s.stacked()[start:start + n_intervals].astype(float))
    if not usable_ids:
        raise ColdstartError("no neighbor covers the requested span")
    w = np.array(usable_w)
    w = w / w.sum()
    stacked = np.stack(rows)                      # (k, n, 2)
    return np.einsum("k,knu->nu", w, stacked)
