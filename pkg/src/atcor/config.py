"""City profiles and run configuration.

Each supported city ships as a JSON profile bundled with the package
(``atcor/cities/*.json``).  A profile pins everything that differs between
cities: the trip CSV column map, the bounding box, the POI category channels,
the holiday calendar, the time-bin width and the evaluation protocol spans.
Synthetic or ad-hoc cities can be loaded from a JSON file path instead of a
builtin id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, datetime
from importlib import resources
from pathlib import Path

from atcor.grid import GridSpec

BUILTIN_CITIES = ("nyc", "chicago", "la")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent city profiles."""


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def contains(self, lat: float, lon: float) -> bool:
        return (self.lat_min <= lat <= self.lat_max
                and self.lon_min <= lon <= self.lon_max)


@dataclass(frozen=True)
class TripSchema:
    """Column-name map from a raw trip CSV to canonical trip fields."""

    start_time: str
    end_time: str
    start_station: str
    end_station: str
    start_lat: str
    start_lon: str
    end_lat: str
    end_lon: str

    def columns(self) -> list[str]:
        return [self.start_time, self.end_time, self.start_station,
                self.end_station, self.start_lat, self.start_lon,
                self.end_lat, self.end_lon]


@dataclass(frozen=True)
class ProtocolSpec:
    """Evaluation windows for one city, as used by the benchmark harness."""

    train_span: tuple[datetime, datetime]
    test_span: tuple[datetime, datetime]
    new_station_window: tuple[datetime, datetime]
    new_station_eval_intervals: int
    min_daily_usage: float
    consecutive_first_usage: bool


@dataclass(frozen=True)
class ColdstartSpec:
    max_neighbors: int = 8
    radius_km: float = 5.0
    virtual_intervals: int = 24


@dataclass(frozen=True)
class CityConfig:
    city_id: str
    name: str
    interval_hours: int
    bbox: BoundingBox
    trip_schema: TripSchema
    poi_categories: tuple[str, ...]
    poi_aliases: dict[str, str]
    holidays: frozenset[date]
    grid: GridSpec
    protocol: ProtocolSpec
    coldstart: ColdstartSpec = field(default_factory=ColdstartSpec)
    malformed_row_tolerance: float = 0.05
    station_merge_radius_m: float = 50.0
    # Heatmap usage/POI channels rescaled per channel before center
    # subtraction; the divisors are recorded in model checkpoints.
    heatmap_minmax_scaling: bool = True
    # Cluster signatures read normalized heatmaps (center-subtracted).
    cluster_on_normalized: bool = True

    @property
    def n_channels(self) -> int:
        """Heatmap depth: 2 usage channels + one channel per POI category."""
        return 2 + len(self.poi_categories)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return ("pickups", "dropoffs") + self.poi_categories

    def is_holiday_or_weekend(self, day: date) -> bool:
        return day.weekday() >= 5 or day in self.holidays


def _parse_dt(value: str) -> datetime:
    return datetime.fromisoformat(value)


def _parse_span(raw) -> tuple[datetime, datetime]:
    start, end = _parse_dt(raw[0]), _parse_dt(raw[1])
    if end <= start:
        raise ConfigError(f"span end {end} not after start {start}")
    return start, end


def config_from_dict(raw: dict) -> CityConfig:
    try:
        grid_raw = raw.get("grid", {})
        grid = GridSpec(
            cell_lat_m=float(grid_raw.get("cell_lat_m", 500.0)),
            cell_lon_m=float(grid_raw.get("cell_lon_m", 500.0)),
            rows=int(grid_raw.get("rows", 11)),
            cols=int(grid_raw.get("cols", 11)),
        )
        proto_raw = raw["protocol"]
        protocol = ProtocolSpec(
            train_span=_parse_span(proto_raw["train_span"]),
            test_span=_parse_span(proto_raw["test_span"]),
            new_station_window=_parse_span(proto_raw["new_station_window"]),
            new_station_eval_intervals=int(proto_raw["new_station_eval_intervals"]),
            min_daily_usage=float(proto_raw.get("min_daily_usage", 10)),
            consecutive_first_usage=bool(proto_raw.get("consecutive_first_usage", False)),
        )
        cold_raw = raw.get("coldstart", {})
        coldstart = ColdstartSpec(
            max_neighbors=int(cold_raw.get("max_neighbors", 8)),
            radius_km=float(cold_raw.get("radius_km", 5.0)),
            virtual_intervals=int(cold_raw.get("virtual_intervals", 24)),
        )
        cfg = CityConfig(
            city_id=raw["city_id"],
            name=raw.get("name", raw["city_id"]),
            interval_hours=int(raw["interval_hours"]),
            bbox=BoundingBox(**{k: float(v) for k, v in raw["bbox"].items()}),
            trip_schema=TripSchema(**raw["trip_schema"]),
            poi_categories=tuple(raw["poi_categories"]),
            poi_aliases={k.lower(): v for k, v in raw.get("poi_aliases", {}).items()},
            holidays=frozenset(date.fromisoformat(d) for d in raw.get("holidays", [])),
            grid=grid,
            protocol=protocol,
            coldstart=coldstart,
            malformed_row_tolerance=float(raw.get("malformed_row_tolerance", 0.05)),
            station_merge_radius_m=float(raw.get("station_merge_radius_m", 50.0)),
            heatmap_minmax_scaling=bool(raw.get("heatmap_minmax_scaling", True)),
            cluster_on_normalized=bool(raw.get("cluster_on_normalized", True)),
        )
    except KeyError as exc:
        raise ConfigError(f"city profile missing field: {exc}") from exc
    if cfg.interval_hours not in (1, 4):
        raise ConfigError(f"interval_hours must be 1 or 4, got {cfg.interval_hours}")
    if "others" not in cfg.poi_categories:
        raise ConfigError("poi_categories must include an 'others' fallback channel")
    for alias, target in cfg.poi_aliases.items():
        if target not in cfg.poi_categories:
            raise ConfigError(f"poi alias {alias!r} maps to unknown category {target!r}")
    return cfg


def load_city(name_or_path: str | Path) -> CityConfig:
    """Load a builtin city profile by id, or any profile from a JSON path."""
    path = Path(name_or_path)
    if str(name_or_path) in BUILTIN_CITIES:
        text = (resources.files("atcor") / "cities" / f"{name_or_path}.json").read_text()
    elif path.exists():
        text = path.read_text()
    else:
        raise ConfigError(
            f"unknown city {name_or_path!r}: not one of {BUILTIN_CITIES} and not a file")
    return config_from_dict(json.loads(text))


def dump_city(cfg: CityConfig, path: Path) -> None:
    """Write a profile back out as JSON (used for synthetic cities)."""
    raw = {
        "city_id": cfg.city_id,
        "name": cfg.name,
        "interval_hours": cfg.interval_hours,
        "bbox": {"lat_min": cfg.bbox.lat_min, "lat_max": cfg.bbox.lat_max,
                 "lon_min": cfg.bbox.lon_min, "lon_max": cfg.bbox.lon_max},
        "trip_schema": {k: getattr(cfg.trip_schema, k) for k in (
            "start_time", "end_time", "start_station", "end_station",
            "start_lat", "start_lon", "end_lat", "end_lon")},
        "poi_categories": list(cfg.poi_categories),
        "poi_aliases": cfg.poi_aliases,
        "holidays": sorted(d.isoformat() for d in cfg.holidays),
        "grid": {"cell_lat_m": cfg.grid.cell_lat_m, "cell_lon_m": cfg.grid.cell_lon_m,
                 "rows": cfg.grid.rows, "cols": cfg.grid.cols},
        "protocol": {
            "train_span": [t.isoformat() for t in cfg.protocol.train_span],
            "test_span": [t.isoformat() for t in cfg.protocol.test_span],
            "new_station_window": [t.isoformat() for t in cfg.protocol.new_station_window],
            "new_station_eval_intervals": cfg.protocol.new_station_eval_intervals,
            "min_daily_usage": cfg.protocol.min_daily_usage,
            "consecutive_first_usage": cfg.protocol.consecutive_first_usage,
        },
        "coldstart": {"max_neighbors": cfg.coldstart.max_neighbors,
                      "radius_km": cfg.coldstart.radius_km,
                      "virtual_intervals": cfg.coldstart.virtual_intervals},
        "malformed_row_tolerance": cfg.malformed_row_tolerance,
        "station_merge_radius_m": cfg.station_merge_radius_m,
        "heatmap_minmax_scaling": cfg.heatmap_minmax_scaling,
        "cluster_on_normalized": cfg.cluster_on_normalized,
    }
    path.write_text(json.dumps(raw, indent=2))
