"""Deterministic synthetic city generator.

Produces a small station-based bike system with known structure: commuter
double-peak weekday rates, flatter weekend rates, weather-dependent demand,
a one-interval lead-lag coupling from each station's neighborhood (the signal
the heatmap CNN is built to pick up), and late-launching stations whose
patterns blend their nearest neighbors.  Output files use the canonical trip
schema, so the whole pipeline runs on them end to end.

Everything is a pure function of the seed: fixtures, demos and downscaled
benchmark runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from atcor import config as cfgmod
from atcor.config import BoundingBox, CityConfig, ColdstartSpec, ProtocolSpec
from atcor.grid import GridSpec
from atcor.ingest import CANONICAL_SCHEMA, PoiRecord, TimeSpan, TripRecord

_CENTER = (40.7500, -73.9900)
_M_PER_DEG_LAT = 111_132.0

POI_CATEGORIES = ("residential", "commercial", "education", "recreation", "others")


@dataclass
class SynthSpec:
    n_existing: int = 9
    n_new: int = 1
    days: int = 45
    interval_hours: int = 1
    seed: int = 7
    start: datetime = datetime(2019, 4, 1)
    spacing_m: float = 700.0
    base_rate: float = 5.0          # mean weekday peak pick-ups per station-hour
    neighbor_coupling: float = 0.3  # share of rate driven by lagged neighborhood
    new_launch_day: int = 35        # first usage day of late stations
    grid_rows: int = 11
    grid_cols: int = 11
    cell_m: float = 500.0
    holidays: tuple[str, ...] = ("2019-04-19",)


@dataclass
class SynthCity:
    spec: SynthSpec
    config: CityConfig
    span: TimeSpan
    station_ids: list[str]
    coords: dict[str, tuple[float, float]]
    new_ids: list[str]
    launch: dict[str, datetime]
    rates: np.ndarray               # (n_stations, n_t) expected pick-ups
    trips: list[TripRecord]
    pois: list[PoiRecord]
    weather_rows: list[tuple[datetime, float, float, float]]

    def existing_ids(self) -> list[str]:
        return [s for s in self.station_ids if s not in self.new_ids]

    def write(self, out_dir: Path) -> dict[str, Path]:
        """Write raw input files (trips, weather, POIs, city profile)."""
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "trips": out_dir / "trips_raw.csv",
            "weather": out_dir / "weather.csv",
            "pois": out_dir / "pois.csv",
            "city": out_dir / "city.json",
        }
        with open(paths["trips"], "w") as fh:
            fh.write("start_time,end_time,start_station,end_station,"
                     "start_lat,start_lon,end_lat,end_lon\n")
            for t in self.trips:
                fh.write(f"{t.start_time.isoformat()},{t.end_time.isoformat()},"
                         f"{t.start_station},{t.end_station},"
                         f"{t.start_lat:.6f},{t.start_lon:.6f},"
                         f"{t.end_lat:.6f},{t.end_lon:.6f}\n")
        with open(paths["weather"], "w") as fh:
            fh.write("timestamp,temp_f,wind_mph,precip_in\n")
            for ts, temp, wind, precip in self.weather_rows:
                fh.write(f"{ts.isoformat()},{temp:.2f},{wind:.2f},{precip:.3f}\n")
        with open(paths["pois"], "w") as fh:
            fh.write("category,lat,lon\n")
            for p in self.pois:
                fh.write(f"{p.category},{p.lat:.6f},{p.lon:.6f}\n")
        cfgmod.dump_city(self.config, paths["city"])
        return paths


def _station_layout(spec: SynthSpec, rng: np.random.Generator):
    """Rough grid with jitter; returns ordered ids and coordinates."""
    n = spec.n_existing + spec.n_new
    side = math.ceil(math.sqrt(n))
    ids, coords = [], {}
    for k in range(n):
        r, c = divmod(k, side)
        north = (r - side / 2) * spec.spacing_m + rng.uniform(-80, 80)
        east = (c - side / 2) * spec.spacing_m + rng.uniform(-80, 80)
        lat = _CENTER[0] + north / _M_PER_DEG_LAT
        lon = _CENTER[1] + east / (_M_PER_DEG_LAT * math.cos(math.radians(_CENTER[0])))
        sid = f"S{k:03d}"
        ids.append(sid)
        coords[sid] = (lat, lon)
    return ids, coords


def _hour_pattern(hour: int, weekend: bool) -> float:
    if weekend:
        return 0.35 + 0.65 * math.exp(-((hour - 14) ** 2) / 18.0)
    am = math.exp(-((hour - 8) ** 2) / 4.5)
    pm = math.exp(-((hour - 18) ** 2) / 6.0)
    return 0.15 + am + 0.9 * pm


def _comfort(temp_f: float) -> float:
    return max(0.25, 1.0 - ((temp_f - 68.0) / 45.0) ** 2)


def make_city(spec: SynthSpec) -> SynthCity:
    rng = np.random.default_rng(spec.seed)
    ids, coords = _station_layout(spec, rng)
    new_ids = ids[spec.n_existing:]
    span = TimeSpan(spec.start, spec.start + timedelta(days=spec.days))
    n_t = span.n_intervals(spec.interval_hours)
    n_s = len(ids)
    holidays = {datetime.fromisoformat(h).date() for h in
                (f"{d}T00:00" for d in spec.holidays)}

    # Weather at 30-minute granularity, aggregated later by ingest.
    weather_rows = []
    n_half = n_t * spec.interval_hours * 2
    rain = np.zeros(n_half)
    k = 0
    while k < n_half:  # rain arrives in multi-hour episodes
        if rng.random() < 0.01:
            length = rng.integers(4, 16)
            rain[k:k + length] = rng.uniform(0.01, 0.12, size=min(length, n_half - k))
            k += length
        k += 1
    temps = np.empty(n_half)
    winds = np.empty(n_half)
    for i in range(n_half):
        ts = span.start + timedelta(minutes=30 * i)
        day_frac = (ts.hour + ts.minute / 60.0) / 24.0
        season = 10.0 * math.sin(2 * math.pi * (ts.timetuple().tm_yday - 100) / 365.0)
        temps[i] = 58.0 + season + 11.0 * math.sin(2 * math.pi * (day_frac - 0.3)) \
            + rng.normal(0, 1.2)
        winds[i] = max(0.0, 6.0 + 3.0 * math.sin(2 * math.pi * day_frac) + rng.normal(0, 1.5))
        weather_rows.append((ts, float(temps[i]), float(winds[i]), float(rain[i])))

    # Per-interval weather factor (mean temp of the interval, summed rain).
    per_iv = 2 * spec.interval_hours
    temp_iv = temps.reshape(n_t, per_iv).mean(axis=1)
    rain_iv = rain.reshape(n_t, per_iv).sum(axis=1)
    weather_factor = np.array([
        _comfort(temp_iv[t]) * (1.0 - 0.75 * min(1.0, rain_iv[t] / 0.1))
        for t in range(n_t)])

    # Station amplitudes and POIs: busier stations sit in denser spots.
    amp = rng.lognormal(mean=0.0, sigma=0.45, size=n_s)
    amp = amp / amp.mean() * spec.base_rate
    zone_mix = rng.dirichlet(np.ones(len(POI_CATEGORIES)), size=n_s)
    pois: list[PoiRecord] = []
    for si, sid in enumerate(ids):
        n_poi = max(3, int(round(6 * amp[si] / spec.base_rate + rng.integers(0, 4))))
        cats = rng.choice(len(POI_CATEGORIES), size=n_poi, p=zone_mix[si])
        lat0, lon0 = coords[sid]
        for c in cats:
            dn = rng.normal(0, 260.0)
            de = rng.normal(0, 260.0)
            pois.append(PoiRecord(
                POI_CATEGORIES[c],
                lat0 + dn / _M_PER_DEG_LAT,
                lon0 + de / (_M_PER_DEG_LAT * math.cos(math.radians(lat0)))))

    # Base rates, then one refinement pass adding the lagged neighborhood
    # coupling that gives the spatial channels predictive value.
    base = np.empty((n_s, n_t))
    for t in range(n_t):
        ts = span.time_of(t, spec.interval_hours)
        weekend = ts.weekday() >= 5 or ts.date() in holidays
        hp = _hour_pattern(ts.hour, weekend)
        base[:, t] = amp * hp * weather_factor[t]

    dists = np.zeros((n_s, n_s))
    for i in range(n_s):
        for j in range(n_s):
            (la1, lo1), (la2, lo2) = coords[ids[i]], coords[ids[j]]
            dn = (la2 - la1) * _M_PER_DEG_LAT
            de = (lo2 - lo1) * _M_PER_DEG_LAT * math.cos(math.radians(la1))
            dists[i, j] = math.hypot(dn, de)
    near = np.argsort(dists, axis=1)[:, 1:5]  # 4 nearest neighbors

    rates = base.copy()
    neigh_mean = base[near].mean(axis=1)      # (n_s, n_t)
    rates[:, 1:] = (1 - spec.neighbor_coupling) * base[:, 1:] \
        + spec.neighbor_coupling * neigh_mean[:, :-1]

    # Late stations mirror their nearest established peers, slightly damped.
    launch = {}
    for sid in new_ids:
        si = ids.index(sid)
        mix = near[si]
        w = 1.0 / np.maximum(dists[si, mix], 1.0) ** 2
        w /= w.sum()
        rates[si] = 0.85 * (w[:, None] * rates[mix]).sum(axis=0)
        launch[sid] = span.start + timedelta(days=spec.new_launch_day)

    # Destination preference: inverse-square distance, no self-loops.
    # Stations that have not launched yet cannot receive drop-offs.
    dest_p = 1.0 / (1.0 + (dists / 1000.0) ** 2)
    np.fill_diagonal(dest_p, 0.0)
    dest_p_pre = dest_p.copy()
    for sid in new_ids:
        dest_p_pre[:, ids.index(sid)] = 0.0
    dest_p /= dest_p.sum(axis=1, keepdims=True)
    dest_p_pre /= dest_p_pre.sum(axis=1, keepdims=True)
    first_launch = min(launch.values()) if launch else span.end

    trips: list[TripRecord] = []

    def emit(si: int, t_idx: int, minute: float) -> None:
        sid = ids[si]
        ts = span.time_of(t_idx, spec.interval_hours)
        p = dest_p[si] if ts >= first_launch else dest_p_pre[si]
        di = int(rng.choice(n_s, p=p))
        d_km = dists[si, di] / 1000.0
        start_ts = span.time_of(t_idx, spec.interval_hours) + timedelta(minutes=minute)
        dur = max(2.0, 4.0 + 9.0 * d_km + rng.normal(0, 2.0))
        (sla, slo), (ela, elo) = coords[sid], coords[ids[di]]
        trips.append(TripRecord(start_ts, start_ts + timedelta(minutes=dur),
                                sid, ids[di], sla, slo, ela, elo))

    minutes_span = 60.0 * spec.interval_hours
    for si, sid in enumerate(ids):
        is_new = sid in new_ids
        for t in range(n_t):
            ts = span.time_of(t, spec.interval_hours)
            if is_new and ts < launch[sid]:
                continue
            k = int(rng.poisson(rates[si, t]))
            # one guaranteed noon trip per active day keeps the existing
            # stations on the every-day usage definition
            if ts.hour == 12 and not (is_new and ts < launch[sid]):
                k = max(k, 1)
            for _ in range(k):
                emit(si, t, float(rng.uniform(0, minutes_span - 1e-3)))

    trips.sort(key=lambda tr: (tr.start_time, tr.start_station))

    bbox = BoundingBox(lat_min=_CENTER[0] - 0.08, lat_max=_CENTER[0] + 0.08,
                       lon_min=_CENTER[1] - 0.10, lon_max=_CENTER[1] + 0.10)
    # keep every harness window (including lookback margins and new-station
    # horizons) strictly inside the generated span
    warm_days = 31
    train_start = span.start + timedelta(days=warm_days)
    test_start = span.end - timedelta(days=max(3, spec.days // 8))
    post_launch_h = 24 * (spec.days - spec.new_launch_day - 1)
    eval_intervals = min(168, post_launch_h // spec.interval_hours)
    new_window_end = spec.start + timedelta(days=spec.new_launch_day + 1)
    protocol = ProtocolSpec(
        train_span=(train_start, test_start),
        test_span=(test_start, span.end),
        new_station_window=(train_start, new_window_end),
        new_station_eval_intervals=eval_intervals,
        min_daily_usage=1.0,
        consecutive_first_usage=False,
    )
    config = CityConfig(
        city_id="synth",
        name="Synthetic city",
        interval_hours=spec.interval_hours,
        bbox=bbox,
        trip_schema=CANONICAL_SCHEMA,
        poi_categories=POI_CATEGORIES,
        poi_aliases={},
        holidays=frozenset(holidays),
        grid=GridSpec(cell_lat_m=spec.cell_m, cell_lon_m=spec.cell_m,
                      rows=spec.grid_rows, cols=spec.grid_cols),
        protocol=protocol,
        coldstart=ColdstartSpec(),
    )
    return SynthCity(spec=spec, config=config, span=span, station_ids=ids,
                     coords=coords, new_ids=new_ids, launch=launch,
                     rates=rates, trips=trips, pois=pois,
                     weather_rows=weather_rows)


# ---------------------------------------------------------------------------
# Direct series fixtures (no trips): planted deterministic daily pattern
# ---------------------------------------------------------------------------

def planted_sinusoid_stations(n_stations: int, n_t: int, seed: int = 0,
                              rows: int = 5, cols: int = 5, channels: int = 3,
                              amplitude: float = 8.0):
    """Noise-free daily-sinusoid stations with matching heatmap channels.

    The target at any interval is an exact function of the recent series, so
    a trained model's residual against these series measures optimization
    quality alone.  Returns a list of ``train.StationData``.
    """
    from atcor.train import StationData, usage_scale

    rng = np.random.default_rng(seed)
    period = 24
    out = []
    hours = np.arange(n_t)
    for s in range(n_stations):
        phase = rng.uniform(0, 2 * math.pi)
        amp = amplitude * rng.uniform(0.6, 1.4)
        picks = amp * (1.0 + np.sin(2 * math.pi * (hours % period) / period + phase))
        drops = amp * (1.0 + np.sin(2 * math.pi * (hours % period) / period
                                    + phase + 0.7))
        usage = np.stack([picks, drops], axis=1)
        hm = np.zeros((n_t, rows, cols, channels))
        # regional channels echo the station pattern one interval late
        hm[1:, rows // 2, cols // 2 + 1 if cols > 1 else 0, 0] = picks[:-1]
        hm[1:, rows // 2 - 1 if rows > 1 else 0, cols // 2, 1] = drops[:-1]
        hm[:, :, :, 2] = s + 1.0  # flat station-identity channel
        from atcor.grid import normalize_heatmap
        hm = normalize_heatmap(hm)
        ex = np.zeros((n_t, 4))
        ex[:, 0] = 60.0 + 8.0 * np.sin(2 * math.pi * hours / period)
        ex[:, 3] = ((hours // 24) % 7 >= 5).astype(float)
        scale = usage_scale(usage)
        out.append(StationData(
            station_id=f"P{s:02d}", usage_raw=usage,
            usage_scaled=usage / scale, externals=ex, scale=scale,
            heatmaps=hm))
    return out
