"""Heatmap signatures and K-means clustering of stations.

Each station is summarized by a length-P signature: the per-channel sum of
cells of its time-averaged heatmap.  Stations (existing and new together)
are clustered by Euclidean distance between signatures; one model is trained
per cluster, which is what lets new stations borrow patterns learned from
existing ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from atcor.grid import HeatmapStack

log = logging.getLogger(__name__)

MAX_ITERATIONS = 300
CONVERGENCE_SHIFT = 1e-9


class ClusterError(ValueError):
    """Raised for invalid clustering inputs or unservable cluster layouts."""


@dataclass(frozen=True)
class StationSignature:
    station_id: str
    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ClusterError(f"non-finite signature for {self.station_id}")


@dataclass
class ClusterAssignment:
    assignment: dict[str, int]
    centroids: np.ndarray  # (k, P)
    inertia: float = 0.0
    iterations: int = 0
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def members(self, cluster_id: int) -> list[str]:
        return sorted(s for s, c in self.assignment.items() if c == cluster_id)


def signature(heatmaps: HeatmapStack | np.ndarray,
              station_id: str = "") -> StationSignature:
    """Per-channel cell sums of the time-averaged heatmap (length P)."""
    if isinstance(heatmaps, HeatmapStack):
        station_id = station_id or heatmaps.station_id
        tensor = np.asarray(heatmaps.tensor, dtype=float)
    else:
        tensor = np.asarray(heatmaps, dtype=float)
    if tensor.ndim != 4 or tensor.shape[0] == 0:
        raise ClusterError("signature needs a non-empty (t, rows, cols, P) stack")
    mean_map = tensor.mean(axis=0)
    return StationSignature(station_id, mean_map.sum(axis=(0, 1)))


def pairwise_score(a: StationSignature | np.ndarray,
                   b: StationSignature | np.ndarray) -> float:
    """Euclidean distance between two signatures; lower means more similar."""
    va = a.vector if isinstance(a, StationSignature) else np.asarray(a, float)
    vb = b.vector if isinstance(b, StationSignature) else np.asarray(b, float)
    if va.shape != vb.shape:
        raise ClusterError(f"signature lengths differ: {va.shape} vs {vb.shape}")
    return float(np.linalg.norm(va - vb))


def _wcss(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Spread initial centroids k-means++ style (distance-squared sampling)."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(signatures: Sequence[StationSignature], k: int,
           seed: int = 0) -> ClusterAssignment:
    """Lloyd's iterations over station signatures, deterministic given seed.

    Runs until the largest centroid shift drops below 1e-9 or 300 iterations.
    The within-cluster sum of squares is asserted non-increasing on every
    iteration; an empty cluster is re-seeded from the point farthest from its
    assigned centroid.
    """
    if not signatures:
        raise ClusterError("no signatures to cluster")
    if k < 1 or k > len(signatures):
        raise ClusterError(f"k={k} must be in [1, {len(signatures)}]")
    x = np.stack([s.vector for s in signatures]).astype(float)
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(x, k, rng)

    prev_wcss = np.inf
    labels = np.zeros(len(x), dtype=int)
    iteration = 0
    for iteration in range(1, MAX_ITERATIONS + 1):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)

        for j in range(k):
            if not (labels == j).any():
                farthest = d2[np.arange(len(x)), labels].argmax()
                centroids[j] = x[farthest]
                labels[farthest] = j

        current = _wcss(x, centroids, labels)
        assert current <= prev_wcss + 1e-9 * max(1.0, prev_wcss if np.isfinite(prev_wcss) else 1.0), \
            f"k-means objective increased: {prev_wcss} -> {current}"
        prev_wcss = current

        new_centroids = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < CONVERGENCE_SHIFT:
            break

    assignment = {s.station_id: int(labels[i]) for i, s in enumerate(signatures)}
    return ClusterAssignment(assignment=assignment, centroids=centroids,
                             inertia=_wcss(x, centroids, labels),
                             iterations=iteration, seed=seed)


def pick_k_elbow(signatures: Sequence[StationSignature], k_max: int = 12,
                 seed: int = 0) -> int:
    """Default K: elbow (largest curvature) of the WCSS curve over 1..k_max."""
    k_max = min(k_max, len(signatures))
    if k_max <= 2:
        return k_max
    wcss = [kmeans(signatures, k, seed).inertia for k in range(1, k_max + 1)]
    # Discrete second difference; ties resolve to the smallest K.
    curvature = [wcss[i - 1] - 2 * wcss[i] + wcss[i + 1]
                 for i in range(1, k_max - 1)]
    return int(np.argmax(curvature)) + 2


def check_new_station_coverage(assignment: ClusterAssignment,
                               existing_ids: set[str],
                               new_ids: set[str]) -> None:
    """Every new station must share a cluster with at least one existing one.

    New stations have no trainable history, so a cluster containing only new
    stations cannot produce a model; fail loudly with the offending ids.
    """
    clusters_with_existing = {assignment.assignment[s]
                              for s in existing_ids if s in assignment.assignment}
    orphans = [s for s in sorted(new_ids)
               if assignment.assignment.get(s) not in clusters_with_existing]
    if orphans:
        raise ClusterError(
            "new stations share no cluster with any existing station: "
            f"{orphans}; lower K or widen the station set")


# ---------------------------------------------------------------------------
# Persistence: text tables (see docs/formats.md)
# ---------------------------------------------------------------------------

def write_clusters(assignment: ClusterAssignment, path: Path,
                   centroid_path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("station_id,cluster_id\n")
        for sid in sorted(assignment.assignment):
            fh.write(f"{sid},{assignment.assignment[sid]}\n")
    with open(centroid_path, "w") as fh:
        fh.write("cluster_id," + ",".join(
            f"c{i}" for i in range(assignment.centroids.shape[1])) + "\n")
        for j, row in enumerate(assignment.centroids):
            fh.write(f"{j}," + ",".join(f"{v:.9g}" for v in row) + "\n")


def read_clusters(path: Path, centroid_path: Path) -> ClusterAssignment:
    import pandas as pd
    adf = pd.read_csv(path, dtype={"station_id": str})
    cdf = pd.read_csv(centroid_path)
    assignment = {str(r.station_id): int(r.cluster_id) for r in adf.itertuples()}
    centroids = cdf[[c for c in cdf.columns if c != "cluster_id"]].to_numpy(float)
    return ClusterAssignment(assignment=assignment, centroids=centroids)


def write_signatures(signatures: Sequence[StationSignature], path: Path) -> None:
    if not signatures:
        raise ClusterError("no signatures to write")
    p = len(signatures[0].vector)
    with open(path, "w") as fh:
        fh.write("station_id," + ",".join(f"v{i}" for i in range(p)) + "\n")
        for s in sorted(signatures, key=lambda s: s.station_id):
            fh.write(f"{s.station_id}," + ",".join(f"{v:.9g}" for v in s.vector) + "\n")


def read_signatures(path: Path) -> list[StationSignature]:
    import pandas as pd
    df = pd.read_csv(path, dtype={"station_id": str})
    cols = [c for c in df.columns if c != "station_id"]
    return [StationSignature(str(r["station_id"]), r[cols].to_numpy(float))
            for _, r in df.iterrows()]
