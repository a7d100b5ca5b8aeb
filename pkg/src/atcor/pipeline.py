"""End-to-end pipeline over an artifacts directory.

Each stage reads the previous stage's files and writes documented artifacts
(see ``docs/formats.md``), so every step replays without re-parsing raw data:

    ingest -> featurize -> cluster -> train -> evaluate / serve

The directory is the single exchange format between the CLI, the evaluation
harness and the prediction service.
"""

from __future__ import annotations

import glob
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from atcor import cluster as clus
from atcor import coldstart, evaluate, grid, ingest
from atcor.baselines import baseline_fingerprint
from atcor.config import CityConfig, dump_city, load_city
from atcor.model import (Fingerprint, ModelParams, init_params,
                         load_checkpoint, save_checkpoint)
from atcor.train import (StationData, TrainConfig, make_samples,
                         train_cluster, usage_scale, write_loss_trace)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    pass


def _aligned_floor(t: datetime, hours: int) -> datetime:
    t = t.replace(minute=0, second=0, microsecond=0)
    return t.replace(hour=t.hour - t.hour % hours)


def grid_span(cfg: CityConfig) -> ingest.TimeSpan:
    """The interval grid every artifact aligns to: lookback before the train
    span through the end of test and new-station evaluation windows."""
    h = cfg.interval_hours
    start = cfg.protocol.train_span[0] - timedelta(hours=24 * h)
    new_end = (cfg.protocol.new_station_window[1]
               + timedelta(hours=h * cfg.protocol.new_station_eval_intervals))
    end = max(cfg.protocol.test_span[1], new_end)
    return ingest.TimeSpan(_aligned_floor(start, h), _aligned_floor(end, h))


# ---------------------------------------------------------------------------
# Stage 1: ingest
# ---------------------------------------------------------------------------

def run_ingest(cfg: CityConfig, trips_glob: str, weather_path: str,
               pois_path: str, out_dir: Path,
               span: ingest.TimeSpan | None = None,
               require_history: bool = True) -> dict:
    """Parse raw inputs and write the canonical columnar files.

    ``require_history=False`` permits classification on extracts without the
    30-day lead-in (the new-station set is then unreliable and reported as
    such; existing-station work is unaffected).
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    span = span or grid_span(cfg)
    span.check_aligned(cfg.interval_hours)

    paths = sorted(glob.glob(trips_glob))
    if not paths:
        raise PipelineError(f"no trip files match {trips_glob!r}")
    records = []
    total_rows = 0
    dropped: dict[str, int] = {}
    for p in paths:
        parsed = ingest.parse_trips(p, cfg)
        records.extend(parsed.records)
        total_rows += parsed.total_rows
        for k, v in parsed.dropped.items():
            dropped[k] = dropped.get(k, 0) + v

    trips, coords = ingest.canonicalize_stations(
        records, cfg.station_merge_radius_m)
    window = ingest.TimeSpan(*cfg.protocol.train_span)
    new_window = ingest.TimeSpan(*cfg.protocol.new_station_window)
    registry = ingest.classify_stations(trips, window,
                                        cfg.station_merge_radius_m,
                                        require_history=require_history,
                                        new_window=new_window)
    usage = ingest.bin_usage_all(trips, cfg.interval_hours, span)
    externals = ingest.load_external(weather_path, cfg, span)
    pois = ingest.parse_pois(pois_path, cfg)

    ingest.write_trips(trips, out_dir / "trips.csv")
    ingest.write_registry(registry, out_dir / "registry.csv")
    ingest.write_usage(usage, out_dir / "usage.csv")
    ingest.write_externals(externals, out_dir / "externals.csv")
    ingest.write_pois(pois, out_dir / "pois.csv")
    dump_city(cfg, out_dir / "city.json")

    manifest = {
        "city_id": cfg.city_id,
        "interval_hours": cfg.interval_hours,
        "span": [span.start.isoformat(), span.end.isoformat()],
        "n_intervals": span.n_intervals(cfg.interval_hours),
        "channels": list(cfg.channel_names),
        "counts": {
            "trips": len(trips), "raw_rows": total_rows, "dropped": dropped,
            "stations": len(registry), **registry.counts(),
        },
        "classification_window": [window.start.isoformat(),
                                  window.end.isoformat()],
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))
    log.info("ingest: %d trips, %d stations (%s)", len(trips), len(registry),
             registry.counts())
    return manifest


# ---------------------------------------------------------------------------
# Artifact access
# ---------------------------------------------------------------------------

@dataclass
class Artifacts:
    """Read-only view over one artifacts directory."""

    root: Path
    cfg: CityConfig
    manifest: dict
    span: ingest.TimeSpan
    registry: ingest.StationRegistry
    usage: dict[str, ingest.UsageSeries]
    externals: ingest.ExternalSeries
    _stack_cache: dict[str, grid.HeatmapStack] = field(default_factory=dict)
    _trips: list | None = None
    _pois: list | None = None

    @classmethod
    def load(cls, root: str | Path) -> "Artifacts":
        root = Path(root)
        required = [MANIFEST, "city.json", "registry.csv", "usage.csv",
                    "externals.csv"]
        missing = [str(root / r) for r in required if not (root / r).exists()]
        if missing:
            raise PipelineError(
                "artifacts directory incomplete; missing:\n  "
                + "\n  ".join(missing))
        manifest = json.loads((root / MANIFEST).read_text())
        cfg = load_city(root / "city.json")
        span = ingest.TimeSpan(datetime.fromisoformat(manifest["span"][0]),
                               datetime.fromisoformat(manifest["span"][1]))
        window = ingest.TimeSpan(
            datetime.fromisoformat(manifest["classification_window"][0]),
            datetime.fromisoformat(manifest["classification_window"][1]))
        registry = ingest.read_registry(root / "registry.csv", window)
        usage = ingest.read_usage(root / "usage.csv", span.start,
                                  cfg.interval_hours, manifest["n_intervals"])
        externals = ingest.read_externals(root / "externals.csv", span.start,
                                          cfg.interval_hours)
        return cls(root=root, cfg=cfg, manifest=manifest, span=span,
                   registry=registry, usage=usage, externals=externals)

    # lazy heavyweight inputs -------------------------------------------------
    def trips(self) -> list:
        if self._trips is None:
            self._trips = ingest.read_trips(self.root / "trips.csv")
        return self._trips

    def pois(self) -> list:
        if self._pois is None:
            self._pois = ingest.read_pois(self.root / "pois.csv")
        return self._pois

    def stack(self, sid: str) -> grid.HeatmapStack:
        if sid not in self._stack_cache:
            path = self.root / "heatmaps" / f"{sid}.hm"
            if not path.exists():
                raise PipelineError(f"no heatmap stack for station {sid}: {path}")
            self._stack_cache[sid] = grid.read_heatmap_stack(path)
        return self._stack_cache[sid]

    def divisors(self) -> np.ndarray | None:
        div = self.manifest.get("heatmap_divisors")
        return None if div is None else np.asarray(div, dtype=float)

    def index_of(self, t: datetime) -> int:
        return self.span.index_of(t, self.cfg.interval_hours)

    def usage_series(self, sid: str) -> ingest.UsageSeries:
        s = self.usage.get(sid)
        if s is None:
            n = self.manifest["n_intervals"]
            s = ingest.UsageSeries(sid, self.cfg.interval_hours, self.span.start,
                                   np.zeros(n, dtype=np.int64),
                                   np.zeros(n, dtype=np.int64))
        return s

    def clusters(self) -> clus.ClusterAssignment:
        return clus.read_clusters(self.root / "clusters.csv",
                                  self.root / "centroids.csv")

    def checkpoint(self, scheme: str, cluster_id: int,
                   expected: Fingerprint | None = None) -> ModelParams:
        path = self.root / "checkpoints" / f"{scheme}_c{cluster_id}.ckpt"
        if not path.exists():
            raise PipelineError(f"missing checkpoint {path}")
        return load_checkpoint(path, expected)

    def available_checkpoints(self) -> dict[str, dict[int, ModelParams]]:
        out: dict[str, dict[int, ModelParams]] = {}
        ckpt_dir = self.root / "checkpoints"
        if not ckpt_dir.exists():
            return out
        for p in sorted(ckpt_dir.glob("*_c*.ckpt")):
            scheme, _, cid = p.stem.rpartition("_c")
            out.setdefault(scheme, {})[int(cid)] = load_checkpoint(p)
        return out


# ---------------------------------------------------------------------------
# Stage 2: featurize
# ---------------------------------------------------------------------------

def studied_stations(arts: Artifacts) -> tuple[list[str], list[str]]:
    """(active existing, qualifying new) station ids for the study."""
    existing = arts.registry.ids("active_existing")
    new = arts.registry.ids("new")
    return existing, new


def run_featurize(arts: Artifacts, stations: list[str] | None = None,
                  debug_dump: bool = False,
                  span: ingest.TimeSpan | None = None) -> list[str]:
    """Build normalized heatmap stacks for the studied stations.

    Channel min-max divisors are pooled over the studied stations' raw
    heatmaps (training span only) and recorded in the manifest; stacks on
    disk are already normalized and scaled.  ``span`` restricts the stacks
    to a sub-window of the manifest grid (inspection runs); training and
    evaluation need full-span stacks and say so if given partial ones.
    """
    cfg = arts.cfg
    if stations is None:
        existing, new = studied_stations(arts)
        stations = existing + new
    if not stations:
        raise PipelineError("no stations to featurize")
    if span is not None:
        span.check_aligned(cfg.interval_hours)
        if span.start < arts.span.start or span.end > arts.span.end:
            raise PipelineError(
                f"featurize span [{span.start}, {span.end}) outside the "
                f"ingested grid [{arts.span.start}, {arts.span.end})")
    else:
        span = arts.span
    trips = arts.trips()
    pois = arts.pois()
    builder = grid.FeatureBuilder(trips, pois, cfg.grid, cfg.channel_names,
                                  span, cfg.interval_hours)
    out = arts.root / "heatmaps"
    if span is not arts.span and (span.start != arts.span.start
                                  or span.end != arts.span.end):
        # inspection runs must not clobber the training stacks
        stamp = f"{span.start:%Y%m%dT%H}_{span.end:%Y%m%dT%H}"
        out = out / f"span_{stamp}"
    out.mkdir(parents=True, exist_ok=True)

    full_span = span.start == arts.span.start and span.end == arts.span.end
    if cfg.heatmap_minmax_scaling:
        # first pass streams raw stacks (training span only) through the
        # range computation; the second pass below rebuilds and writes them
        train_end = max(1, span.index_of(cfg.protocol.train_span[1],
                                         cfg.interval_hours))
        divisors = grid.channel_divisors(
            builder.raw_stack(arts.registry.coord(s))[:train_end]
            for s in stations)
        builder.divisors = divisors
        if full_span:  # partial-span runs are for inspection only
            manifest = dict(arts.manifest)
            manifest["heatmap_divisors"] = [float(v) for v in divisors]
            (arts.root / MANIFEST).write_text(json.dumps(manifest, indent=2))
            arts.manifest = manifest

    for sid in stations:
        stack = builder.series(sid, arts.registry.coord(sid))
        grid.write_heatmap_stack(stack, out / f"{sid}.hm")
        if debug_dump:
            grid.dump_heatmap_text(stack, out / f"{sid}.txt")
    log.info("featurize: %d stations, channels=%d", len(stations),
             cfg.n_channels)
    return stations


# ---------------------------------------------------------------------------
# Stage 3: cluster
# ---------------------------------------------------------------------------

def run_cluster(arts: Artifacts, k: int | None = None, seed: int = 0) -> clus.ClusterAssignment:
    """Signatures over the training span, then K-means over all studied
    stations (existing and new together)."""
    cfg = arts.cfg
    existing, new = studied_stations(arts)
    stations = existing + new
    t_lo = arts.index_of(cfg.protocol.train_span[0])
    t_hi = arts.index_of(cfg.protocol.train_span[1])
    sigs = []
    for sid in stations:
        stack = arts.stack(sid)
        sigs.append(clus.signature(stack.tensor[t_lo:t_hi], sid))
    clus.write_signatures(sigs, arts.root / "signatures.csv")
    if k is None:
        k = clus.pick_k_elbow(sigs, seed=seed)
        log.info("cluster: elbow selected k=%d", k)
    assignment = clus.kmeans(sigs, k, seed=seed)
    clus.check_new_station_coverage(assignment, set(existing), set(new))
    clus.write_clusters(assignment, arts.root / "clusters.csv",
                        arts.root / "centroids.csv")
    return assignment


# ---------------------------------------------------------------------------
# Stage 4: train
# ---------------------------------------------------------------------------

def station_data(arts: Artifacts, sid: str, scale_limit: int,
                 with_heatmaps: bool = True) -> StationData:
    series = arts.usage_series(sid)
    raw = series.stacked().astype(float)
    scale = usage_scale(raw, scale_limit)
    heatmaps = None
    if with_heatmaps:
        stack = arts.stack(sid)
        if stack.t0 != arts.span.start or len(stack) != len(raw):
            raise PipelineError(
                f"heatmap stack for {sid} covers a partial span "
                f"(t0 {stack.t0}, {len(stack)} intervals); re-run featurize "
                f"over the full grid before training or evaluation")
        heatmaps = stack.tensor
    return StationData(
        station_id=sid, usage_raw=raw, usage_scaled=raw / scale,
        externals=arts.externals.values, scale=scale, heatmaps=heatmaps)


def atcor_fingerprint(cfg: CityConfig, tc: TrainConfig,
                      conv_spec=None) -> Fingerprint:
    return Fingerprint(
        kind="atcor", d=tc.d, lookback=tc.lookback,
        rows=cfg.grid.rows, cols=cfg.grid.cols, channels=cfg.n_channels,
        conv_spec=tuple(tuple(c) for c in conv_spec) if conv_spec
        else Fingerprint().conv_spec,
        heatmap_scaling=cfg.heatmap_minmax_scaling, seed=tc.seed)


def run_train(arts: Artifacts, tc: TrainConfig, schemes=("atcor",),
              clusters: list[int] | None = None, conv_spec=None,
              stations: list[str] | None = None) -> dict:
    """Train the requested schemes for each cluster of active stations.

    ``stations`` restricts training to a subset of the active existing
    stations (e.g. the busiest N for downscaled benchmark runs).
    """
    assignment = arts.clusters()
    existing, _ = studied_stations(arts)
    if stations is not None:
        existing = [s for s in existing if s in set(stations)]
    test_start = arts.index_of(arts.cfg.protocol.test_span[0])
    ckpt_dir = arts.root / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    loss_dir = arts.root / "losses"
    loss_dir.mkdir(exist_ok=True)

    cluster_ids = sorted(set(assignment.assignment.values()))
    if clusters is not None:
        cluster_ids = [c for c in cluster_ids if c in clusters]
    trained = {}
    for cid in cluster_ids:
        members = [s for s in assignment.members(cid) if s in existing]
        if not members:
            log.warning("cluster %d has no active existing stations; skipped", cid)
            continue
        for scheme in schemes:
            with_maps = scheme == "atcor"
            data = [station_data(arts, s, test_start, with_maps)
                    for s in members]
            monitor_start = int(test_start * (1 - tc.monitor_fraction))
            samples = make_samples(data, tc.lookback, stop=monitor_start)
            monitor = make_samples(data, tc.lookback,
                                   start=monitor_start - tc.lookback,
                                   stop=test_start)
            if scheme == "atcor":
                fp = atcor_fingerprint(arts.cfg, tc, conv_spec)
            else:
                fp = baseline_fingerprint(scheme, d=tc.d, lookback=tc.lookback,
                                          seed=tc.seed)
            params = init_params(fp)
            params.aux = {
                "usage_scale": {d.station_id: [float(v) for v in d.scale]
                                for d in data},
                "heatmap_divisors": arts.manifest.get("heatmap_divisors"),
                "cluster_id": cid,
                "train_config": {
                    "learning_rate": tc.learning_rate, "batch_size": tc.batch_size,
                    "epochs": tc.epochs, "seed": tc.seed,
                    "optimizer": tc.optimizer, "dropout": tc.dropout,
                    "grad_clip_norm": tc.grad_clip_norm},
            }
            log.info("train: scheme=%s cluster=%d stations=%d samples=%d",
                     scheme, cid, len(members), len(samples))
            result = train_cluster(
                samples, params, tc, monitor=monitor,
                diverge_checkpoint=ckpt_dir / f"{scheme}_c{cid}.diverged.ckpt")
            save_checkpoint(result.params, ckpt_dir / f"{scheme}_c{cid}.ckpt")
            write_loss_trace(result, loss_dir / f"{scheme}_c{cid}.csv")
            trained[(scheme, cid)] = result
    return trained


# ---------------------------------------------------------------------------
# Stage 5: evaluate
# ---------------------------------------------------------------------------

def protocol_metadata(cfg: CityConfig, span: ingest.TimeSpan | None = None) -> dict:
    """Self-describing window metadata embedded into every report."""
    span = span or grid_span(cfg)
    h = cfg.interval_hours
    test_lo = span.index_of(cfg.protocol.test_span[0], h)
    test_hi = span.index_of(cfg.protocol.test_span[1], h)
    train_lo = span.index_of(cfg.protocol.train_span[0], h)
    train_hi = span.index_of(cfg.protocol.train_span[1], h)
    return {
        "lookback": 24,
        "interval_hours": h,
        "train_span": [t.isoformat() for t in cfg.protocol.train_span],
        "test_span": [t.isoformat() for t in cfg.protocol.test_span],
        "train_intervals": train_hi - train_lo,
        "test_intervals": test_hi - test_lo,
        "new_station_eval_intervals": cfg.protocol.new_station_eval_intervals,
        "min_daily_usage": cfg.protocol.min_daily_usage,
    }


def build_eval_context(arts: Artifacts, station_ids: list[str] | None = None,
                       ) -> evaluate.EvalContext:
    cfg = arts.cfg
    assignment = arts.clusters()
    existing, _ = studied_stations(arts)
    if station_ids is None:
        station_ids = existing
    test_start = arts.index_of(cfg.protocol.test_span[0])
    test_end = arts.index_of(cfg.protocol.test_span[1])
    stations = {}
    cluster_of = {}
    for sid in station_ids:
        stations[sid] = station_data(arts, sid, test_start)
        cluster_of[sid] = assignment.assignment.get(sid, 0)
    models = arts.available_checkpoints()
    lookback = 24
    for by_cluster in models.values():  # trained windows win over the default
        lookback = next(iter(by_cluster.values())).fingerprint.lookback
        break
    meta = protocol_metadata(cfg, arts.span)
    meta["lookback"] = lookback
    return evaluate.EvalContext(
        city_id=cfg.city_id, interval_hours=cfg.interval_hours,
        lookback=lookback, stations=stations, cluster_of=cluster_of,
        models=models, test_start=test_start, test_end=test_end,
        protocol_meta=meta)


def run_eval_existing(arts: Artifacts, schemes=evaluate.SCHEMES,
                      station_ids: list[str] | None = None):
    ctx = build_eval_context(arts, station_ids)
    reports = evaluate.eval_existing(ctx, schemes)
    evaluate.write_reports(reports, arts.root / "reports", "existing")
    return reports


def prepare_new_cases(arts: Artifacts, ctx: evaluate.EvalContext,
                      new_ids: list[str] | None = None,
                      ) -> list[evaluate.NewStationCase]:
    cfg = arts.cfg
    existing, reg_new = studied_stations(arts)
    new_ids = reg_new if new_ids is None else new_ids
    assignment = arts.clusters()
    horizon = cfg.protocol.new_station_eval_intervals
    window = ingest.TimeSpan(*cfg.protocol.new_station_window)

    neighbor_coords = {s: arts.registry.coord(s) for s in existing}
    scales = {s: ctx.stations[s].scale if s in ctx.stations
              else usage_scale(arts.usage_series(s).stacked().astype(float),
                               ctx.test_start)
              for s in existing}
    cases = []
    for sid in new_ids:
        series = arts.usage_series(sid)
        raw = series.stacked().astype(float)
        launch = evaluate.first_usage_index(
            raw, cfg.protocol.consecutive_first_usage)
        if launch is None or launch < ctx.lookback:
            log.info("new station %s: no usable launch index; skipped", sid)
            continue
        launch_time = arts.span.time_of(launch, cfg.interval_hours)
        if not window.contains(launch_time):
            log.info("new station %s launched %s outside the study window; "
                     "skipped", sid, launch_time)
            continue
        stop = min(launch + horizon, len(raw))
        if not evaluate.meets_activity_floor(raw, launch, stop,
                                             cfg.interval_hours,
                                             cfg.protocol.min_daily_usage):
            log.info("new station %s below the activity floor; excluded", sid)
            continue
        picked = coldstart.select_neighbors(
            arts.registry.coord(sid), neighbor_coords,
            cfg.coldstart.max_neighbors, cfg.coldstart.radius_km)
        if not picked:
            log.warning("new station %s has no neighbors within %.1f km",
                        sid, cfg.coldstart.radius_km)
            continue
        weights = coldstart.neighbor_weights(arts.registry.coord(sid), picked,
                                             target=sid)
        data = station_data(arts, sid, ctx.test_start)
        case = evaluate.prepare_new_station(
            sid, data, launch, weights,
            {s: arts.usage_series(s) for s in picked},
            {s: scales[s] for s in picked},
            lookback=ctx.lookback, cluster=assignment.assignment.get(sid, 0))
        cases.append(case)
    return cases


def run_eval_new(arts: Artifacts, schemes=evaluate.SCHEMES):
    ctx = build_eval_context(arts)
    cases = prepare_new_cases(arts, ctx)
    horizon = arts.cfg.protocol.new_station_eval_intervals
    reports = evaluate.eval_new(ctx, cases, horizon, schemes)
    evaluate.write_reports(reports, arts.root / "reports", "new")
    return reports
