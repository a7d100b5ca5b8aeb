"""Station-centered feature heatmaps.

A heatmap is a rows x cols x P tensor anchored so its center cell sits on the
station coordinate: channels are [regional pick-ups, regional drop-offs, one
channel per POI category].  Cell membership uses planar offsets from the
center under a local equirectangular approximation (error is negligible at
the <3 km extents used here).  Normalization subtracts the center cell from
every cell, channel by channel, so a heatmap reads as the neighborhood's
usage relative to the station itself.

Row index grows northward, column index eastward.  Cell k along an axis
covers the half-open offset range [k*g - g/2, k*g + g/2) meters.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8


class GridError(ValueError):
    """Raised for invalid grid geometry or span requests."""


@dataclass(frozen=True)
class GridSpec:
    """Cell size in meters and odd cell counts so a center cell exists."""

    cell_lat_m: float = 500.0
    cell_lon_m: float = 500.0
    rows: int = 11
    cols: int = 11

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows % 2 == 0 or self.cols % 2 == 0:
            raise GridError(f"rows/cols must be odd and >= 1, got {self.rows}x{self.cols}")
        if self.cell_lat_m <= 0 or self.cell_lon_m <= 0:
            raise GridError("cell sizes must be positive")

    @property
    def center(self) -> tuple[int, int]:
        return self.rows // 2, self.cols // 2


def local_offsets_m(lat: np.ndarray, lon: np.ndarray,
                    center_lat: float, center_lon: float) -> tuple[np.ndarray, np.ndarray]:
    """(north_m, east_m) of points relative to the center coordinate."""
    north = np.radians(np.asarray(lat) - center_lat) * EARTH_RADIUS_M
    east = (np.radians(np.asarray(lon) - center_lon) * EARTH_RADIUS_M
            * np.cos(np.radians(center_lat)))
    return north, east


def cell_indices(lat: np.ndarray, lon: np.ndarray, spec: GridSpec,
                 center_lat: float, center_lon: float,
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map coordinates to (row, col, in_extent) under half-open cell bounds."""
    north, east = local_offsets_m(lat, lon, center_lat, center_lon)
    ci, cj = spec.center
    row = ci + np.floor((north + spec.cell_lat_m / 2) / spec.cell_lat_m).astype(int)
    col = cj + np.floor((east + spec.cell_lon_m / 2) / spec.cell_lon_m).astype(int)
    ok = (row >= 0) & (row < spec.rows) & (col >= 0) & (col < spec.cols)
    return row, col, ok


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class EventSet:
    """Flat arrays of trip start/end events, binned once per (span, interval).

    Built from trips a single time, then reused for every station center.
    Events whose bin falls outside the span keep bin -1 and are skipped.
    """

    start_bin: np.ndarray
    start_lat: np.ndarray
    start_lon: np.ndarray
    end_bin: np.ndarray
    end_lat: np.ndarray
    end_lon: np.ndarray
    n_intervals: int

    @classmethod
    def from_trips(cls, trips, span, interval_hours: int) -> "EventSet":
        n = span.n_intervals(interval_hours)

        def bins(times):
            idx = np.array([span.index_of(t, interval_hours) for t in times],
                           dtype=np.int64) if len(times) else np.zeros(0, np.int64)
            idx[(idx < 0) | (idx >= n)] = -1
            return idx

        s_times = [t.start_time for t in trips]
        e_times = [t.end_time for t in trips]
        return cls(
            start_bin=bins(s_times),
            start_lat=np.array([t.start_lat for t in trips], dtype=float),
            start_lon=np.array([t.start_lon for t in trips], dtype=float),
            end_bin=bins(e_times),
            end_lat=np.array([t.end_lat for t in trips], dtype=float),
            end_lon=np.array([t.end_lon for t in trips], dtype=float),
            n_intervals=n,
        )


def _count_grid_series(bins: np.ndarray, lat: np.ndarray, lon: np.ndarray,
                       spec: GridSpec, center: tuple[float, float],
                       n_intervals: int) -> np.ndarray:
    row, col, ok = cell_indices(lat, lon, spec, *center)
    ok = ok & (bins >= 0)
    out = np.zeros((n_intervals, spec.rows, spec.cols), dtype=np.int64)
    if ok.any():
        flat = (bins[ok] * spec.rows + row[ok]) * spec.cols + col[ok]
        counts = np.bincount(flat, minlength=n_intervals * spec.rows * spec.cols)
        out = counts.reshape(n_intervals, spec.rows, spec.cols)
    return out


def usage_grid_series(events: EventSet, spec: GridSpec,
                      center: tuple[float, float]) -> np.ndarray:
    """(n_t, rows, cols, 2) regional pick-up/drop-off counts around a center."""
    picks = _count_grid_series(events.start_bin, events.start_lat,
                               events.start_lon, spec, center, events.n_intervals)
    drops = _count_grid_series(events.end_bin, events.end_lat,
                               events.end_lon, spec, center, events.n_intervals)
    return np.stack([picks, drops], axis=-1)


def aggregate_regional_usage(trips, spec: GridSpec, center: tuple[float, float],
                             interval_start: datetime, interval_hours: int,
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Pick-up and drop-off count grids for one interval around one center.

    Convenience single-interval form; bulk feature building goes through
    ``EventSet`` + ``usage_grid_series``.
    """
    from atcor.ingest import TimeSpan
    from datetime import timedelta
    span = TimeSpan(interval_start, interval_start + timedelta(hours=interval_hours))
    events = EventSet.from_trips(trips, span, interval_hours)
    grids = usage_grid_series(events, spec, center)
    return grids[0, :, :, 0], grids[0, :, :, 1]


def aggregate_pois(pois: Sequence, spec: GridSpec, center: tuple[float, float],
                   categories: Sequence[str]) -> np.ndarray:
    """(n_categories, rows, cols) static POI count grids around a center.

    Records with a category not in ``categories`` land in the ``others``
    channel with a warning.  Duplicate rows count twice by design.
    """
    chan = {c: i for i, c in enumerate(categories)}
    out = np.zeros((len(categories), spec.rows, spec.cols), dtype=np.int64)
    if not pois:
        return out
    lat = np.array([p.lat for p in pois])
    lon = np.array([p.lon for p in pois])
    row, col, ok = cell_indices(lat, lon, spec, *center)
    unknown = 0
    for k, p in enumerate(pois):
        if not ok[k]:
            continue
        ci = chan.get(p.category)
        if ci is None:
            ci = chan["others"]
            unknown += 1
        out[ci, row[k], col[k]] += 1
    if unknown:
        log.warning("%d POIs with unmapped categories routed to 'others'", unknown)
    return out


# ---------------------------------------------------------------------------
# Normalization and per-station series
# ---------------------------------------------------------------------------

def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Subtract the center cell from every cell, per channel.

    Leaves the center exactly zero in every channel; idempotent because the
    new center value is 0.
    """
    if raw.ndim == 3:
        ci, cj = raw.shape[0] // 2, raw.shape[1] // 2
        return raw - raw[ci, cj, :]
    if raw.ndim == 4:  # (t, rows, cols, channels)
        ci, cj = raw.shape[1] // 2, raw.shape[2] // 2
        return raw - raw[:, ci:ci + 1, cj:cj + 1, :]
    raise GridError(f"heatmap must be rank 3 or 4, got shape {raw.shape}")


def channel_divisors(raw_stacks) -> np.ndarray:
    """Per-channel min-max ranges pooled over stations and timestamps.

    Used as divisors after center subtraction; the min-max shift cancels
    under center subtraction, so dividing by the range is the whole rescale.
    Zero ranges divide by 1.  Accepts any iterable of stacks and consumes it
    in one pass (stacks can be large; callers stream them).
    """
    lo = hi = None
    for s in raw_stacks:
        p = s.shape[-1]
        flat = s.reshape(-1, p)
        if lo is None:
            lo = flat.min(axis=0).astype(float)
            hi = flat.max(axis=0).astype(float)
        else:
            lo = np.minimum(lo, flat.min(axis=0))
            hi = np.maximum(hi, flat.max(axis=0))
    if lo is None:
        raise GridError("no heatmap stacks given")
    rng = hi - lo
    rng[rng == 0] = 1.0
    return rng


@dataclass
class HeatmapStack:
    """One station's heatmap per interval: (n_t, rows, cols, P)."""

    station_id: str
    t0: datetime
    interval_hours: int
    channels: tuple[str, ...]
    tensor: np.ndarray
    normalized: bool = True
    divisors: np.ndarray | None = None

    def __len__(self) -> int:
        return self.tensor.shape[0]


class FeatureBuilder:
    """Builds normalized heatmap series with POI grids memoized per station.

    Inputs are read-only; POI channel grids are computed once per station and
    reused across timestamps (they are time-invariant by construction).
    """

    def __init__(self, trips, pois, spec: GridSpec, channels: Sequence[str],
                 span, interval_hours: int, divisors: np.ndarray | None = None):
        self.spec = spec
        self.channels = tuple(channels)
        self.span = span
        self.interval_hours = interval_hours
        self.events = EventSet.from_trips(trips, span, interval_hours)
        self.pois = pois
        self.divisors = divisors
        self._poi_cache: dict[tuple[float, float], np.ndarray] = {}

    def poi_grids(self, center: tuple[float, float]) -> np.ndarray:
        if center not in self._poi_cache:
            self._poi_cache[center] = aggregate_pois(
                self.pois, self.spec, center, self.channels[2:])
        return self._poi_cache[center]

    def raw_stack(self, center: tuple[float, float]) -> np.ndarray:
        usage = usage_grid_series(self.events, self.spec, center)
        poi = self.poi_grids(center)  # (P-2, rows, cols)
        n_t = usage.shape[0]
        poi_t = np.broadcast_to(poi.transpose(1, 2, 0),
                                (n_t, self.spec.rows, self.spec.cols, poi.shape[0]))
        return np.concatenate([usage, poi_t], axis=-1).astype(float)

    def series(self, station_id: str, center: tuple[float, float]) -> HeatmapStack:
        """Normalized (and optionally range-scaled) heatmaps for one station."""
        tensor = normalize_heatmap(self.raw_stack(center))
        if self.divisors is not None:
            tensor = tensor / self.divisors
        return HeatmapStack(station_id=station_id, t0=self.span.start,
                            interval_hours=self.interval_hours,
                            channels=self.channels, tensor=tensor,
                            divisors=self.divisors)


# ---------------------------------------------------------------------------
# Persistence: binary stack + text debug dump (layouts in docs/formats.md)
# ---------------------------------------------------------------------------

_MAGIC = b"ATHM"
_VERSION = 1


def write_heatmap_stack(stack: HeatmapStack, path: Path,
                        dtype: str = "<f4") -> None:
    header = {
        "station_id": stack.station_id,
        "t0": stack.t0.isoformat(),
        "interval_hours": stack.interval_hours,
        "n_t": int(stack.tensor.shape[0]),
        "rows": int(stack.tensor.shape[1]),
        "cols": int(stack.tensor.shape[2]),
        "channels": list(stack.channels),
        "dtype": dtype,
        "normalized": stack.normalized,
        "divisors": None if stack.divisors is None else list(map(float, stack.divisors)),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(stack.tensor, dtype=np.dtype(dtype)).tobytes())


def read_heatmap_stack(path: Path) -> HeatmapStack:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise GridError(f"{path}: not a heatmap stack file")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise GridError(f"{path}: unsupported heatmap version {version}")
        header = json.loads(fh.read(blob_len).decode())
        shape = (header["n_t"], header["rows"], header["cols"], len(header["channels"]))
        data = np.frombuffer(fh.read(), dtype=np.dtype(header["dtype"])).reshape(shape)
    div = header.get("divisors")
    return HeatmapStack(
        station_id=header["station_id"],
        t0=datetime.fromisoformat(header["t0"]),
        interval_hours=header["interval_hours"],
        channels=tuple(header["channels"]),
        tensor=np.array(data),  # keeps the stored dtype; model code upcasts
        normalized=header["normalized"],
        divisors=None if div is None else np.array(div, dtype=float),
    )


def dump_heatmap_text(stack: HeatmapStack, path: Path, max_t: int = 3) -> None:
    """Human-readable dump of the first few timesteps, one grid per channel."""
    with open(path, "w") as fh:
        fh.write(f"station {stack.station_id} t0 {stack.t0.isoformat()} "
                 f"interval {stack.interval_hours}h "
                 f"shape {stack.tensor.shape}\n")
        for t in range(min(max_t, stack.tensor.shape[0])):
            for c, name in enumerate(stack.channels):
                fh.write(f"\n[t={t}] channel {name}\n")
                for row in stack.tensor[t, :, :, c]:
                    fh.write(" ".join(f"{v:8.3f}" for v in row) + "\n")
