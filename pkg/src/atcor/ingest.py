"""Trip-log, POI, weather and holiday ingestion.

Everything downstream works on the validated records produced here: trips in
city-local wall-clock time, per-station usage series on a fixed interval grid,
and one external-feature vector per interval.  All binning uses naive local
civil time; DST transitions keep their wall-clock labels.

Parsed outputs can be persisted as one-header-line columnar text files (see
``docs/formats.md``) so later stages replay without touching raw data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from atcor.config import CityConfig, TripSchema

log = logging.getLogger(__name__)

ALLOWED_INTERVAL_HOURS = (1, 4)

#: Schema of the canonical trips file written by the ingest stage.
CANONICAL_SCHEMA = TripSchema(
    start_time="start_time", end_time="end_time",
    start_station="start_station", end_station="end_station",
    start_lat="start_lat", start_lon="start_lon",
    end_lat="end_lat", end_lon="end_lon",
)


class IngestError(Exception):
    """Fatal ingest problem: unreadable input, bad span, unknown station."""


@dataclass(frozen=True)
class TripRecord:
    """One validated ride: a pick-up at the start station, a drop-off at the end."""

    start_time: datetime
    end_time: datetime
    start_station: str
    end_station: str
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float


@dataclass
class ParsedTrips(Sequence):
    """Sequence of valid TripRecords plus counts of rows dropped per reason."""

    records: list[TripRecord]
    total_rows: int
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def malformed(self) -> int:
        return sum(self.dropped.values())

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self) -> Iterator[TripRecord]:
        return iter(self.records)


@dataclass(frozen=True)
class TimeSpan:
    """Half-open wall-clock window [start, end), aligned to interval bounds."""

    start: datetime
    end: datetime

    def __post_init__(self):
        if self.end <= self.start:
            raise IngestError(f"span end {self.end} not after start {self.start}")

    def check_aligned(self, interval_hours: int) -> None:
        for edge in (self.start, self.end):
            if edge.minute or edge.second or edge.microsecond \
                    or edge.hour % interval_hours:
                raise IngestError(
                    f"span edge {edge} not aligned to {interval_hours}h intervals")

    def n_intervals(self, interval_hours: int) -> int:
        return int((self.end - self.start) / timedelta(hours=interval_hours))

    def index_of(self, t: datetime, interval_hours: int) -> int:
        """Interval index of t; may fall outside [0, n_intervals)."""
        delta = t - self.start
        return int(delta // timedelta(hours=interval_hours))

    def time_of(self, index: int, interval_hours: int) -> datetime:
        return self.start + timedelta(hours=interval_hours * index)

    def dates(self) -> list[date]:
        """Calendar days intersecting the window."""
        days = []
        d = self.start.date()
        while datetime.combine(d, datetime.min.time()) < self.end:
            days.append(d)
            d += timedelta(days=1)
        return days

    def contains(self, t: datetime) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class StationInfo:
    station_id: str
    lat: float
    lon: float
    status: str  # active_existing | new | other
    first_usage: datetime | None
    last_usage: datetime | None


@dataclass
class StationRegistry:
    """Station table with per-window status per the two usage-based definitions."""

    stations: dict[str, StationInfo]
    window: TimeSpan

    def __len__(self) -> int:
        return len(self.stations)

    def __getitem__(self, sid: str) -> StationInfo:
        return self.stations[sid]

    def __contains__(self, sid: str) -> bool:
        return sid in self.stations

    def ids(self, status: str | None = None) -> list[str]:
        return sorted(s for s, info in self.stations.items()
                      if status is None or info.status == status)

    def coord(self, sid: str) -> tuple[float, float]:
        info = self.stations[sid]
        return info.lat, info.lon

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for info in self.stations.values():
            out[info.status] = out.get(info.status, 0) + 1
        return out


@dataclass
class UsageSeries:
    """Aligned pick-up and drop-off counts per interval for one station."""

    station_id: str
    interval_hours: int
    t0: datetime
    pickups: np.ndarray
    dropoffs: np.ndarray

    def __post_init__(self):
        self.pickups = np.asarray(self.pickups)
        self.dropoffs = np.asarray(self.dropoffs)
        if self.pickups.shape != self.dropoffs.shape:
            raise IngestError("pickups and dropoffs must have equal length")

    def __len__(self) -> int:
        return len(self.pickups)

    def stacked(self) -> np.ndarray:
        """(n, 2) array, columns [pickups, dropoffs]."""
        return np.stack([self.pickups, self.dropoffs], axis=1)


@dataclass
class ExternalSeries:
    """Per-interval external vector: temp F, wind mph, precip in, holiday/weekend flag."""

    t0: datetime
    interval_hours: int
    values: np.ndarray  # (n, 4) float

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Trip parsing
# ---------------------------------------------------------------------------

def parse_trips(path: str | Path, cfg: CityConfig,
                schema: TripSchema | None = None) -> ParsedTrips:
    """Parse one trip CSV into validated TripRecords.

    Malformed rows (unparseable fields, end before start, coordinates missing
    or outside the city bounding box) are counted per reason and dropped, never
    emitted.  A dropped-row share above ``cfg.malformed_row_tolerance`` logs a
    warning with the count.
    """
    path = Path(path)
    schema = schema or cfg.trip_schema
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return ParsedTrips(records=[], total_rows=0)
    except OSError as exc:
        raise IngestError(f"cannot read trip file {path}: {exc}") from exc

    df.columns = [c.strip().lower() for c in df.columns]
    want = {k: c.lower() for k, c in
            ((f, getattr(schema, f)) for f in ("start_time", "end_time",
                                               "start_station", "end_station",
                                               "start_lat", "start_lon",
                                               "end_lat", "end_lon"))}
    missing = [c for c in want.values() if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: trip file lacks columns {missing}")

    total = len(df)
    dropped: dict[str, int] = {"unparseable": 0, "time_order": 0, "out_of_bounds": 0}

    start = pd.to_datetime(df[want["start_time"]], errors="coerce")
    end = pd.to_datetime(df[want["end_time"]], errors="coerce")
    coords = {k: pd.to_numeric(df[want[k]], errors="coerce")
              for k in ("start_lat", "start_lon", "end_lat", "end_lon")}
    sid = df[want["start_station"]].astype(str).str.strip()
    eid = df[want["end_station"]].astype(str).str.strip()

    ok_fields = (start.notna() & end.notna() & sid.ne("") & eid.ne("")
                 & sid.ne("nan") & eid.ne("nan"))
    for v in coords.values():
        ok_fields &= v.notna() & np.isfinite(v.to_numpy(dtype=float, na_value=np.nan))
    dropped["unparseable"] = int(total - ok_fields.sum())

    ok_order = ok_fields & (end >= start)
    dropped["time_order"] = int(ok_fields.sum() - ok_order.sum())

    bbox = cfg.bbox
    in_bounds = (
        coords["start_lat"].between(bbox.lat_min, bbox.lat_max)
        & coords["start_lon"].between(bbox.lon_min, bbox.lon_max)
        & coords["end_lat"].between(bbox.lat_min, bbox.lat_max)
        & coords["end_lon"].between(bbox.lon_min, bbox.lon_max)
    )
    ok = ok_order & in_bounds
    dropped["out_of_bounds"] = int(ok_order.sum() - ok.sum())

    keep = df.index[ok]
    records = [
        TripRecord(
            start_time=start[i].to_pydatetime(),
            end_time=end[i].to_pydatetime(),
            start_station=sid[i],
            end_station=eid[i],
            start_lat=float(coords["start_lat"][i]),
            start_lon=float(coords["start_lon"][i]),
            end_lat=float(coords["end_lat"][i]),
            end_lon=float(coords["end_lon"][i]),
        )
        for i in keep
    ]
    parsed = ParsedTrips(records=records, total_rows=total, dropped=dropped)
    if total and parsed.malformed / total > cfg.malformed_row_tolerance:
        log.warning("%s: dropped %d of %d rows (%s)", path, parsed.malformed,
                    total, parsed.dropped)
    return parsed


# ---------------------------------------------------------------------------
# Station identity and classification
# ---------------------------------------------------------------------------

def _merge_key(clusters: list[tuple[float, float]], lat: float, lon: float,
               radius_m: float) -> int | None:
    # Cheap planar metric; fine at the tens-of-meters scale of the merge rule.
    for k, (clat, clon) in enumerate(clusters):
        dy = (lat - clat) * 111_320.0
        dx = (lon - clon) * 111_320.0 * np.cos(np.radians(clat))
        if dy * dy + dx * dx <= radius_m * radius_m:
            return k
    return None


def canonicalize_stations(
    trips: Sequence[TripRecord], merge_radius_m: float = 50.0,
) -> tuple[list[TripRecord], dict[str, tuple[float, float]]]:
    """Resolve station identities across relocations.

    The same station id observed at coordinates within ``merge_radius_m`` is
    one station (first-seen coordinate wins); the same id beyond that radius
    becomes a distinct station ``id#2``, ``id#3``, ...  Returns rewritten
    trips plus canonical id -> coordinate.  Idempotent.
    """
    clusters: dict[str, list[tuple[float, float]]] = {}
    coords: dict[str, tuple[float, float]] = {}

    def resolve(sid: str, lat: float, lon: float) -> str:
        locs = clusters.setdefault(sid, [])
        k = _merge_key(locs, lat, lon, merge_radius_m)
        if k is None:
            locs.append((lat, lon))
            k = len(locs) - 1
        canon = sid if k == 0 else f"{sid}#{k + 1}"
        coords.setdefault(canon, locs[k])
        return canon

    out = []
    for tr in trips:
        s = resolve(tr.start_station, tr.start_lat, tr.start_lon)
        e = resolve(tr.end_station, tr.end_lat, tr.end_lon)
        if s != tr.start_station or e != tr.end_station:
            tr = replace(tr, start_station=s, end_station=e)
        out.append(tr)
    return out, coords


def classify_stations(trips: Sequence[TripRecord], window: TimeSpan,
                      merge_radius_m: float = 50.0,
                      require_history: bool = True,
                      new_window: TimeSpan | None = None) -> StationRegistry:
    """Assign active_existing / new / other status by the usage definitions.

    active_existing: at least one pick-up or drop-off on every calendar day
    of ``window`` (the study span).  new: first usage falls inside
    ``new_window`` (defaults to ``window``) with zero usage in the 30 days
    before that window opens.  Anything else (including stations removed
    mid-window) is ``other``; callers get per-status counts for review.
    Deterministic and invariant to trip order.
    """
    trips, coords = canonicalize_stations(trips, merge_radius_m)
    new_window = new_window or window
    if require_history:
        earliest = min((min(t.start_time, t.end_time) for t in trips),
                       default=None)
        need_from = new_window.start - timedelta(days=30)
        if earliest is None or earliest > need_from:
            raise IngestError(
                f"classification over [{new_window.start}, {new_window.end}) "
                f"requires trip history from {need_from}; data starts at "
                f"{earliest}")

    events: dict[str, list[datetime]] = {}
    for tr in trips:
        events.setdefault(tr.start_station, []).append(tr.start_time)
        events.setdefault(tr.end_station, []).append(tr.end_time)

    window_days = window.dates()
    lookback_start = new_window.start - timedelta(days=30)
    stations: dict[str, StationInfo] = {}
    for sid in sorted(events):
        times = events[sid]
        first, last = min(times), max(times)
        days_used = {t.date() for t in times if window.contains(t)}
        in_lookback = any(lookback_start <= t < new_window.start for t in times)
        if all(d in days_used for d in window_days):
            status = "active_existing"
        elif new_window.contains(first) and not in_lookback:
            status = "new"
        else:
            status = "other"
        lat, lon = coords[sid]
        stations[sid] = StationInfo(sid, lat, lon, status, first, last)
    return StationRegistry(stations=stations, window=window)


# ---------------------------------------------------------------------------
# Usage binning
# ---------------------------------------------------------------------------

def _check_interval(interval_hours: int) -> None:
    if interval_hours not in ALLOWED_INTERVAL_HOURS:
        raise IngestError(
            f"interval_hours must be one of {ALLOWED_INTERVAL_HOURS}, "
            f"got {interval_hours}")


def bin_usage(trips: Sequence[TripRecord], station_id: str,
              interval_hours: int, span: TimeSpan) -> UsageSeries:
    """Count a station's pick-ups and drop-offs per interval over the span.

    Intervals with no trips are explicit zeros; events outside the span are
    ignored.  Summing the series reproduces the station's raw in-span trip
    counts exactly.
    """
    _check_interval(interval_hours)
    span.check_aligned(interval_hours)
    known = {t.start_station for t in trips} | {t.end_station for t in trips}
    if station_id not in known:
        raise IngestError(f"unknown station id {station_id!r}")
    n = span.n_intervals(interval_hours)
    pickups = np.zeros(n, dtype=np.int64)
    dropoffs = np.zeros(n, dtype=np.int64)
    for tr in trips:
        if tr.start_station == station_id and span.contains(tr.start_time):
            pickups[span.index_of(tr.start_time, interval_hours)] += 1
        if tr.end_station == station_id and span.contains(tr.end_time):
            dropoffs[span.index_of(tr.end_time, interval_hours)] += 1
    return UsageSeries(station_id, interval_hours, span.start, pickups, dropoffs)


def bin_usage_all(trips: Sequence[TripRecord], interval_hours: int,
                  span: TimeSpan) -> dict[str, UsageSeries]:
    """Vectorized ``bin_usage`` across every station seen in the trips."""
    _check_interval(interval_hours)
    span.check_aligned(interval_hours)
    n = span.n_intervals(interval_hours)
    sids = sorted({t.start_station for t in trips} | {t.end_station for t in trips})
    index = {s: i for i, s in enumerate(sids)}
    pick = np.zeros((len(sids), n), dtype=np.int64)
    drop = np.zeros((len(sids), n), dtype=np.int64)
    if trips:
        s_idx = np.array([index[t.start_station] for t in trips])
        e_idx = np.array([index[t.end_station] for t in trips])
        s_bin = np.array([span.index_of(t.start_time, interval_hours) for t in trips])
        e_bin = np.array([span.index_of(t.end_time, interval_hours) for t in trips])
        s_ok = (s_bin >= 0) & (s_bin < n)
        e_ok = (e_bin >= 0) & (e_bin < n)
        np.add.at(pick, (s_idx[s_ok], s_bin[s_ok]), 1)
        np.add.at(drop, (e_idx[e_ok], e_bin[e_ok]), 1)
    return {s: UsageSeries(s, interval_hours, span.start, pick[i], drop[i])
            for s, i in index.items()}


# ---------------------------------------------------------------------------
# External features
# ---------------------------------------------------------------------------

def load_external(weather_path: str | Path, cfg: CityConfig, span: TimeSpan,
                  interval_hours: int | None = None,
                  max_fill_intervals: int = 6) -> ExternalSeries:
    """Build the per-interval external vector (temp, wind, precip, flag).

    Finer-grained weather readings aggregate by mean (temperature, wind) and
    sum (precipitation).  Intervals without readings are forward-filled from
    the previous interval (precipitation fills as 0.0) for at most
    ``max_fill_intervals`` consecutive intervals, after which ingest fails.
    The flag is 1 iff the interval's date is a weekend or configured holiday.
    """
    interval_hours = interval_hours or cfg.interval_hours
    _check_interval(interval_hours)
    span.check_aligned(interval_hours)
    path = Path(weather_path)
    try:
        df = pd.read_csv(path)
    except OSError as exc:
        raise IngestError(f"cannot read weather file {path}: {exc}") from exc
    df.columns = [c.strip().lower() for c in df.columns]
    needed = ["timestamp", "temp_f", "wind_mph", "precip_in"]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: weather file lacks columns {missing}")

    t = pd.to_datetime(df["timestamp"], errors="coerce")
    ok = t.notna()
    df = df[ok]
    t = t[ok]
    idx = ((t - span.start) // pd.Timedelta(hours=interval_hours)).astype(int)
    in_span = (idx >= 0) & (idx < span.n_intervals(interval_hours))
    df = df[in_span]
    idx = idx[in_span]

    n = span.n_intervals(interval_hours)
    values = np.full((n, 4), np.nan)
    if len(df):
        grouped = pd.DataFrame({
            "idx": idx.to_numpy(),
            "temp": pd.to_numeric(df["temp_f"], errors="coerce"),
            "wind": pd.to_numeric(df["wind_mph"], errors="coerce"),
            "precip": pd.to_numeric(df["precip_in"], errors="coerce"),
        }).groupby("idx")
        agg = grouped.agg(temp=("temp", "mean"), wind=("wind", "mean"),
                          precip=("precip", "sum"))
        values[agg.index.to_numpy(), 0] = agg["temp"].to_numpy()
        values[agg.index.to_numpy(), 1] = agg["wind"].to_numpy()
        values[agg.index.to_numpy(), 2] = agg["precip"].to_numpy()

    run = 0
    for i in range(n):
        if np.isnan(values[i, 0]):
            run += 1
            if run > max_fill_intervals:
                when = span.time_of(i, interval_hours)
                raise IngestError(
                    f"weather gap longer than {max_fill_intervals} intervals "
                    f"at {when}")
            if i == 0:
                raise IngestError(
                    f"weather data does not cover span start {span.start}")
            values[i, 0] = values[i - 1, 0]
            values[i, 1] = values[i - 1, 1]
            values[i, 2] = 0.0
        else:
            run = 0

    for i in range(n):
        day = span.time_of(i, interval_hours).date()
        values[i, 3] = 1.0 if cfg.is_holiday_or_weekend(day) else 0.0
    return ExternalSeries(t0=span.start, interval_hours=interval_hours, values=values)


# ---------------------------------------------------------------------------
# POI catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoiRecord:
    category: str
    lat: float
    lon: float


def parse_pois(path: str | Path, cfg: CityConfig) -> list[PoiRecord]:
    """Parse a POI CSV (category, lat, lon), normalizing labels to channels.

    Unknown category labels route to the ``others`` channel with a warning;
    duplicated rows are kept (counting semantics, no dedup).
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return []
    except OSError as exc:
        raise IngestError(f"cannot read POI file {path}: {exc}") from exc
    df.columns = [c.strip().lower() for c in df.columns]
    missing = [c for c in ("category", "lat", "lon") if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: POI file lacks columns {missing}")

    known = set(cfg.poi_categories)
    unknown: dict[str, int] = {}
    out = []
    for raw_cat, lat, lon in zip(df["category"].astype(str),
                                 pd.to_numeric(df["lat"], errors="coerce"),
                                 pd.to_numeric(df["lon"], errors="coerce")):
        if not (np.isfinite(lat) and np.isfinite(lon)):
            continue
        label = raw_cat.strip().lower()
        cat = cfg.poi_aliases.get(label, label if label in known else None)
        if cat is None:
            unknown[label] = unknown.get(label, 0) + 1
            cat = "others"
        out.append(PoiRecord(cat, float(lat), float(lon)))
    if unknown:
        log.warning("%s: %d POIs with unknown categories routed to 'others': %s",
                    path, sum(unknown.values()), sorted(unknown))
    return out


# ---------------------------------------------------------------------------
# Columnar persistence (formats documented in docs/formats.md)
# ---------------------------------------------------------------------------

def write_trips(trips: Sequence[TripRecord], path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("start_time,end_time,start_station,end_station,"
                 "start_lat,start_lon,end_lat,end_lon\n")
        for t in trips:
            fh.write(f"{t.start_time.isoformat()},{t.end_time.isoformat()},"
                     f"{t.start_station},{t.end_station},"
                     f"{t.start_lat:.6f},{t.start_lon:.6f},"
                     f"{t.end_lat:.6f},{t.end_lon:.6f}\n")


def read_trips(path: Path) -> list[TripRecord]:
    df = pd.read_csv(path, dtype={"start_station": str, "end_station": str})
    return [
        TripRecord(
            start_time=datetime.fromisoformat(r.start_time),
            end_time=datetime.fromisoformat(r.end_time),
            start_station=r.start_station, end_station=r.end_station,
            start_lat=r.start_lat, start_lon=r.start_lon,
            end_lat=r.end_lat, end_lon=r.end_lon,
        )
        for r in df.itertuples()
    ]


def write_registry(registry: StationRegistry, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("station_id,lat,lon,status,first_usage,last_usage\n")
        for sid in registry.ids():
            s = registry[sid]
            first = s.first_usage.isoformat() if s.first_usage else ""
            last = s.last_usage.isoformat() if s.last_usage else ""
            fh.write(f"{sid},{s.lat:.6f},{s.lon:.6f},{s.status},{first},{last}\n")


def read_registry(path: Path, window: TimeSpan) -> StationRegistry:
    df = pd.read_csv(path, dtype={"station_id": str})
    stations = {}
    for r in df.itertuples():
        stations[r.station_id] = StationInfo(
            station_id=r.station_id, lat=r.lat, lon=r.lon, status=r.status,
            first_usage=datetime.fromisoformat(r.first_usage)
            if isinstance(r.first_usage, str) and r.first_usage else None,
            last_usage=datetime.fromisoformat(r.last_usage)
            if isinstance(r.last_usage, str) and r.last_usage else None,
        )
    return StationRegistry(stations=stations, window=window)


def write_usage(series: dict[str, UsageSeries], path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("station_id,interval,pickups,dropoffs\n")
        for sid in sorted(series):
            s = series[sid]
            for i in range(len(s)):
                fh.write(f"{sid},{i},{int(s.pickups[i])},{int(s.dropoffs[i])}\n")


def read_usage(path: Path, t0: datetime, interval_hours: int,
               n_intervals: int) -> dict[str, UsageSeries]:
    df = pd.read_csv(path, dtype={"station_id": str})
    out: dict[str, UsageSeries] = {}
    for sid, g in df.groupby("station_id"):
        pick = np.zeros(n_intervals, dtype=np.int64)
        drop = np.zeros(n_intervals, dtype=np.int64)
        pick[g["interval"].to_numpy()] = g["pickups"].to_numpy()
        drop[g["interval"].to_numpy()] = g["dropoffs"].to_numpy()
        out[str(sid)] = UsageSeries(str(sid), interval_hours, t0, pick, drop)
    return out


def write_externals(ext: ExternalSeries, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("interval,temp_f,wind_mph,precip_in,holiday_weekend\n")
        for i, row in enumerate(ext.values):
            fh.write(f"{i},{row[0]:.4f},{row[1]:.4f},{row[2]:.4f},{int(row[3])}\n")


def read_externals(path: Path, t0: datetime, interval_hours: int) -> ExternalSeries:
    df = pd.read_csv(path)
    values = df[["temp_f", "wind_mph", "precip_in", "holiday_weekend"]].to_numpy(float)
    return ExternalSeries(t0=t0, interval_hours=interval_hours, values=values)


def write_pois(pois: Sequence[PoiRecord], path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("category,lat,lon\n")
        for p in pois:
            fh.write(f"{p.category},{p.lat:.6f},{p.lon:.6f}\n")


def read_pois(path: Path) -> list[PoiRecord]:
    df = pd.read_csv(path)
    return [PoiRecord(str(r.category), float(r.lat), float(r.lon))
            for r in df.itertuples()]
