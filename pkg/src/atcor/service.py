"""Read-only prediction service over a trained artifacts directory.

Endpoints: GET /health, GET /stations, GET /clusters,
GET /stations/{id}/prediction, POST /candidates.  The service never writes
to its stores; every numerical field in a response is reproducible offline
from the artifacts plus the provenance fields (fingerprint, neighbor
weights, cluster id) the response carries.  Raw (pre-clamp) model outputs
are logged and returned under ``raw``; the display fields clamp at zero.
"""

from __future__ import annotations

import logging
from datetime import datetime
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from atcor import cluster as clus
from atcor import coldstart
from atcor.grid import FeatureBuilder
from atcor.model import atcor_predict_windows, cnn_series
from atcor.pipeline import Artifacts, PipelineError, studied_stations
from atcor.train import usage_scale

log = logging.getLogger(__name__)


class CandidateQuery(BaseModel):
    lat: float
    lon: float
    launch: datetime
    horizon: int = Field(default=24, ge=1)
    max_neighbors: int | None = None
    radius_km: float | None = None


class NeighborRow(BaseModel):
    station_id: str
    distance_km: float
    similarity: float
    weight: float


class PredictionResponse(BaseModel):
    pickups: list[float]
    dropoffs: list[float]
    intervals: list[str]
    neighbor_weights: list[NeighborRow]
    cluster_id: int
    fingerprint: str
    usage_scale: list[float]
    heatmap_summary: dict
    raw: dict


class StationRow(BaseModel):
    station_id: str
    lat: float
    lon: float
    status: str
    cluster_id: int | None = None


def _require_service_artifacts(arts: Artifacts) -> None:
    needed = [arts.root / "clusters.csv", arts.root / "centroids.csv",
              arts.root / "trips.csv", arts.root / "pois.csv",
              arts.root / "checkpoints"]
    missing = [str(p) for p in needed if not p.exists()]
    ckpt_dir = arts.root / "checkpoints"
    if ckpt_dir.exists() and not list(ckpt_dir.glob("atcor_c*.ckpt")):
        missing.append(str(ckpt_dir / "atcor_c*.ckpt"))
    if missing:
        raise PipelineError(
            "service startup refused; missing artifacts:\n  "
            + "\n  ".join(missing))


class ServiceState:
    """Immutable shared state loaded once at startup."""

    def __init__(self, artifacts_dir: str | Path):
        self.arts = Artifacts.load(artifacts_dir)
        _require_service_artifacts(self.arts)
        self.assignment = self.arts.clusters()
        self.models = self.arts.available_checkpoints()["atcor"]
        self.existing, self.new = studied_stations(self.arts)
        cfg = self.arts.cfg
        self.test_start = self.arts.index_of(cfg.protocol.test_span[0])
        any_params = next(iter(self.models.values()))
        self.lookback = any_params.fingerprint.lookback
        # signatures of trained clusters for candidate cluster choice
        self.centroids = self.assignment.centroids

    def scale_for(self, sid: str, cluster_id: int) -> np.ndarray:
        aux = self.models[cluster_id].aux.get("usage_scale", {})
        if sid in aux:
            return np.asarray(aux[sid], dtype=float)
        raw = self.arts.usage_series(sid).stacked().astype(float)
        return usage_scale(raw, self.test_start)


def create_app(artifacts_dir: str | Path,
               ui_dist: str | Path | None = None) -> FastAPI:
    state = ServiceState(artifacts_dir)
    arts = state.arts
    cfg = arts.cfg
    app = FastAPI(title="station usage prediction service")

    @app.get("/health")
    def health():
        return {"status": "ok", "city": cfg.city_id,
                "artifacts": str(arts.root),
                "clusters": int(state.assignment.k),
                "fingerprints": sorted({p.fingerprint.key()
                                        for p in state.models.values()})}

    @app.get("/stations")
    def stations(offset: int = Query(0, ge=0),
                 limit: int = Query(100, ge=1, le=1000),
                 status: str | None = None,
                 cluster: int | None = None):
        rows = []
        for sid in arts.registry.ids(status):
            info = arts.registry[sid]
            cid = state.assignment.assignment.get(sid)
            if cluster is not None and cid != cluster:
                continue
            rows.append(StationRow(station_id=sid, lat=info.lat, lon=info.lon,
                                   status=info.status, cluster_id=cid))
        return {"total": len(rows), "offset": offset, "limit": limit,
                "items": [r.model_dump() for r in rows[offset:offset + limit]]}

    @app.get("/clusters")
    def clusters():
        out = []
        for cid in range(state.assignment.k):
            members = state.assignment.members(cid)
            out.append({
                "cluster_id": cid,
                "n_stations": len(members),
                "members": members,
                "centroid": [float(v) for v in state.assignment.centroids[cid]],
                "fingerprint": state.models[cid].fingerprint.key()
                if cid in state.models else None,
            })
        return {"k": state.assignment.k, "clusters": out}

    @app.get("/stations/{sid}/prediction")
    def station_prediction(sid: str, frm: str = Query(alias="from"),
                           to: str = Query()):
        if sid not in arts.registry:
            raise HTTPException(404, f"unknown station {sid!r}")
        try:
            lo = arts.index_of(datetime.fromisoformat(frm))
            hi = arts.index_of(datetime.fromisoformat(to))
        except ValueError as exc:
            raise HTTPException(400, f"bad timestamp: {exc}") from exc
        n = arts.manifest["n_intervals"]
        if not (state.lookback <= lo < hi <= n):
            raise HTTPException(
                400, f"window [{frm}, {to}) outside predictable range "
                     f"(needs {state.lookback} lookback intervals inside the "
                     f"ingested span)")
        cid = state.assignment.assignment.get(sid)
        if cid is None or cid not in state.models:
            raise HTTPException(404, f"station {sid!r} has no trained cluster")
        params = state.models[cid]
        scale = state.scale_for(sid, cid)
        raw = arts.usage_series(sid).stacked().astype(float)
        stack = arts.stack(sid)
        ends = np.arange(lo, hi)
        cnn_full = cnn_series(params, stack.tensor)
        preds = atcor_predict_windows(params, cnn_full, raw / scale,
                                      arts.externals.values, ends) * scale
        log.info("station %s prediction raw output range [%.3f, %.3f]",
                 sid, preds.min(), preds.max())
        clamped = np.maximum(preds, 0.0)
        times = [arts.span.time_of(int(e), cfg.interval_hours).isoformat()
                 for e in ends]
        return {
            "station_id": sid, "cluster_id": cid,
            "fingerprint": params.fingerprint.key(),
            "intervals": times,
            "predicted_pickups": clamped[:, 0].tolist(),
            "predicted_dropoffs": clamped[:, 1].tolist(),
            "observed_pickups": raw[lo:hi, 0].tolist(),
            "observed_dropoffs": raw[lo:hi, 1].tolist(),
            "raw": {"pickups": preds[:, 0].tolist(),
                    "dropoffs": preds[:, 1].tolist()},
        }

    @app.post("/candidates")
    def candidates(query: CandidateQuery) -> PredictionResponse:
        bbox = cfg.bbox
        if not bbox.contains(query.lat, query.lon):
            raise HTTPException(400, {
                "error": "coordinate outside city bounds",
                "bbox": {"lat_min": bbox.lat_min, "lat_max": bbox.lat_max,
                         "lon_min": bbox.lon_min, "lon_max": bbox.lon_max}})
        tt = state.lookback
        h = cfg.interval_hours
        launch_idx = arts.index_of(query.launch.replace(minute=0, second=0,
                                                        microsecond=0))
        horizon = query.horizon
        n = arts.manifest["n_intervals"]
        if launch_idx - tt < 0 or launch_idx + horizon > n:
            raise HTTPException(
                400, f"launch {query.launch} with horizon {horizon} needs "
                     f"intervals [{launch_idx - tt}, {launch_idx + horizon}) "
                     f"inside the ingested span of {n} intervals")

        radius = query.radius_km or cfg.coldstart.radius_km
        max_n = query.max_neighbors or cfg.coldstart.max_neighbors
        coords = {s: arts.registry.coord(s) for s in state.existing}
        picked = coldstart.select_neighbors((query.lat, query.lon), coords,
                                            max_n, radius)
        if not picked:
            raise HTTPException(
                400, f"no active existing stations within {radius} km of "
                     f"({query.lat}, {query.lon})")
        weights = coldstart.neighbor_weights((query.lat, query.lon), picked)

        # candidate heatmaps from observable regional data around the site
        span = arts.span
        builder = FeatureBuilder(arts.trips(), arts.pois(), cfg.grid,
                                 cfg.channel_names, span, h,
                                 divisors=arts.divisors())
        stack = builder.series("candidate", (query.lat, query.lon))

        sig = clus.signature(stack.tensor[launch_idx - tt:launch_idx],
                             "candidate")
        dists = np.linalg.norm(state.centroids - sig.vector, axis=1)
        cluster_id = int(np.argmin(dists))
        if cluster_id not in state.models:
            cluster_id = sorted(state.models)[0]
        params = state.models[cluster_id]

        virtual = coldstart.virtual_usage(
            weights, {s: arts.usage_series(s) for s in picked},
            launch_idx - tt, tt)
        scale = np.zeros(2)
        for nid, w in zip(weights.neighbor_ids, weights.weights):
            scale += w * state.scale_for(nid, cluster_id)
        scale = np.maximum(scale, 1.0)

        # rolling autoregressive forecast: predictions feed later windows
        cnn_full = cnn_series(params, stack.tensor)
        usage_scaled = np.zeros((n, 2))
        usage_scaled[launch_idx - tt:launch_idx] = virtual / scale
        raw_preds = np.empty((horizon, 2))
        for k in range(horizon):
            end = launch_idx + k
            pred = atcor_predict_windows(params, cnn_full, usage_scaled,
                                         arts.externals.values,
                                         np.array([end]))[0]
            usage_scaled[end] = pred
            raw_preds[k] = pred * scale
        log.info("candidate (%.5f, %.5f) raw output range [%.3f, %.3f]",
                 query.lat, query.lon, raw_preds.min(), raw_preds.max())
        clamped = np.maximum(raw_preds, 0.0)

        last_map = stack.tensor[launch_idx - 1]
        summary = {
            "channel_names": list(cfg.channel_names),
            "channel_sums": [float(v) for v in
                             np.asarray(last_map, dtype=float).sum(axis=(0, 1))],
            "signature": [float(v) for v in sig.vector],
        }
        times = [span.time_of(launch_idx + k, h).isoformat()
                 for k in range(horizon)]
        return PredictionResponse(
            pickups=clamped[:, 0].tolist(),
            dropoffs=clamped[:, 1].tolist(),
            intervals=times,
            neighbor_weights=[NeighborRow(station_id=s, distance_km=d,
                                          similarity=sim, weight=w)
                              for s, d, sim, w in weights.as_rows()],
            cluster_id=cluster_id,
            fingerprint=params.fingerprint.key(),
            usage_scale=[float(v) for v in scale],
            heatmap_summary=summary,
            raw={"pickups": raw_preds[:, 0].tolist(),
                 "dropoffs": raw_preds[:, 1].tolist(),
                 "virtual_history": virtual.tolist()},
        )

    if ui_dist and Path(ui_dist).exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(ui_dist), html=True),
                  name="ui")

    return app
