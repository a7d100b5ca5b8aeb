"""Metrics, evaluation protocols and report generation.

The harness runs sliding one-step-ahead predictions over a test span for
existing stations, and virtual-history-seeded rolling predictions for new
stations, scoring every scheme (persistence, RNN, LSTM, GRU, the main model)
on a byte-identical sample set whose digest is recorded in each report.
Negative raw predictions clamp to zero before metrics for every scheme
uniformly.  Reports self-describe their windows so protocol fidelity is
checkable from the artifact alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from atcor.baselines import baseline_predict_windows
from atcor.coldstart import NeighborWeights, virtual_usage
from atcor.model import ModelParams, atcor_predict_windows, cnn_series
from atcor.train import StationData

log = logging.getLogger(__name__)

SCHEMES = ("persistence", "rnn", "lstm", "gru", "atcor")
PLACEHOLDER_SCHEMES = ("arima", "gcn")  # third-party comparisons, not built


class EvalError(ValueError):
    pass


def mae_mse(truth, prediction) -> tuple[float, float]:
    """Mean absolute error and mean squared error over aligned sequences."""
    y = np.asarray(truth, dtype=float)
    p = np.asarray(prediction, dtype=float)
    if y.shape != p.shape:
        raise EvalError(f"length mismatch: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise EvalError("empty sequences")
    err = y - p
    return float(np.abs(err).mean()), float((err ** 2).mean())


@dataclass
class EvalReport:
    scheme: str
    city: str
    protocol: str                    # existing | new | ablation
    station_ids: list[str]
    pickup_mae: float
    pickup_mse: float
    dropoff_mae: float
    dropoff_mse: float
    n_samples: int
    sample_hash: str
    metadata: dict = field(default_factory=dict)
    fingerprint: str = ""
    per_station: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.pickup_mae, self.pickup_mse,
                  self.dropoff_mae, self.dropoff_mse):
            if v < -0.0:
                raise EvalError("negative error metric")
        # Jensen: mean(|e|)^2 <= mean(e^2) always
        assert self.pickup_mae ** 2 <= self.pickup_mse + 1e-9
        assert self.dropoff_mae ** 2 <= self.dropoff_mse + 1e-9

    def row(self) -> dict:
        return {
            "scheme": self.scheme, "city": self.city, "protocol": self.protocol,
            "pickup_mae": self.pickup_mae, "pickup_mse": self.pickup_mse,
            "dropoff_mae": self.dropoff_mae, "dropoff_mse": self.dropoff_mse,
            "n_samples": self.n_samples, "sample_hash": self.sample_hash,
            "fingerprint": self.fingerprint, **self.metadata,
        }


def _pooled(truths: list[np.ndarray], preds: list[np.ndarray]):
    y = np.concatenate(truths, axis=0)
    p = np.concatenate(preds, axis=0)
    pick = mae_mse(y[:, 0], p[:, 0])
    drop = mae_mse(y[:, 1], p[:, 1])
    return pick, drop, len(y)


def _sample_digest(pairs: list[tuple[str, int]]) -> str:
    import hashlib
    payload = "\n".join(f"{sid},{e}" for sid, e in pairs)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Existing-station protocol
# ---------------------------------------------------------------------------

@dataclass
class EvalContext:
    """Everything the harness needs, already aligned on one interval grid."""

    city_id: str
    interval_hours: int
    lookback: int
    stations: dict[str, StationData]
    cluster_of: dict[str, int]
    models: dict[str, dict[int, ModelParams]]  # scheme -> cluster -> params
    test_start: int                  # first target interval of the test span
    test_end: int                    # exclusive
    protocol_meta: dict = field(default_factory=dict)

    def scheme_params(self, scheme: str, cluster: int) -> ModelParams:
        by_cluster = self.models.get(scheme)
        if by_cluster is None or cluster not in by_cluster:
            missing = sorted({c for c in self.cluster_of.values()
                              if c not in (by_cluster or {})})
            raise EvalError(
                f"missing {scheme} checkpoint(s) for cluster(s) {missing}")
        return by_cluster[cluster]


def _predict_station(ctx: EvalContext, scheme: str, st: StationData,
                     cluster: int, ends: np.ndarray,
                     cnn_cache: dict) -> np.ndarray:
    """Clamped raw-scale predictions for windows ending at ``ends``."""
    if scheme == "persistence":
        pred = st.usage_raw[ends - 1].astype(float)
    elif scheme == "atcor":
        params = ctx.scheme_params(scheme, cluster)
        key = (st.station_id, id(params))
        if key not in cnn_cache:
            cnn_cache[key] = cnn_series(params, st.heatmaps)
        scaled = atcor_predict_windows(params, cnn_cache[key], st.usage_scaled,
                                       st.externals, ends)
        pred = scaled * st.scale
    else:
        params = ctx.scheme_params(scheme, cluster)
        scaled = baseline_predict_windows(params, st.usage_scaled,
                                          st.externals, ends)
        pred = scaled * st.scale
    return np.maximum(pred, 0.0)


def eval_existing(ctx: EvalContext, schemes=SCHEMES) -> list[EvalReport]:
    """Sliding one-step predictions over the test span for every station.

    Every scheme scores the same (station, target interval) pairs; the pair
    digest lands in each report.
    """
    ends_all: list[tuple[str, np.ndarray]] = []
    pairs: list[tuple[str, int]] = []
    for sid in sorted(ctx.stations):
        st = ctx.stations[sid]
        lo = max(ctx.test_start, ctx.lookback)
        hi = min(ctx.test_end, len(st.usage_raw))
        ends = np.arange(lo, hi)
        if len(ends) == 0:
            continue
        ends_all.append((sid, ends))
        pairs.extend((sid, int(e)) for e in ends)
    if not pairs:
        raise EvalError("test span produced no evaluation windows")
    digest = _sample_digest(pairs)

    reports = []
    cnn_cache: dict = {}
    for scheme in schemes:
        truths, preds, per_station = [], [], {}
        fingerprints = set()
        for sid, ends in ends_all:
            st = ctx.stations[sid]
            cluster = ctx.cluster_of.get(sid, 0)
            p = _predict_station(ctx, scheme, st, cluster, ends, cnn_cache)
            y = st.usage_raw[ends].astype(float)
            truths.append(y)
            preds.append(p)
            s_pick = mae_mse(y[:, 0], p[:, 0])
            s_drop = mae_mse(y[:, 1], p[:, 1])
            per_station[sid] = {"pickup_mae": s_pick[0], "pickup_mse": s_pick[1],
                                "dropoff_mae": s_drop[0], "dropoff_mse": s_drop[1],
                                "n": len(ends)}
            if scheme not in ("persistence",):
                fingerprints.add(
                    ctx.scheme_params(scheme, cluster).fingerprint.key())
        (p_mae, p_mse), (d_mae, d_mse), n = _pooled(truths, preds)
        reports.append(EvalReport(
            scheme=scheme, city=ctx.city_id, protocol="existing",
            station_ids=[sid for sid, _ in ends_all],
            pickup_mae=p_mae, pickup_mse=p_mse,
            dropoff_mae=d_mae, dropoff_mse=d_mse,
            n_samples=n, sample_hash=digest,
            metadata=dict(ctx.protocol_meta),
            fingerprint=";".join(sorted(fingerprints)),
            per_station=per_station))
    return reports


# ---------------------------------------------------------------------------
# New-station protocol
# ---------------------------------------------------------------------------

def first_usage_index(usage_raw: np.ndarray, consecutive: bool = False) -> int | None:
    """Index of the first usage; with ``consecutive``, the first interval that
    begins a run of at least two non-zero intervals (sparse-system rule)."""
    nz = (usage_raw.sum(axis=1) > 0).astype(int)
    if not nz.any():
        return None
    if not consecutive:
        return int(np.argmax(nz))
    runs = nz[:-1] * nz[1:]
    if runs.any():
        return int(np.argmax(runs))
    return None


def meets_activity_floor(usage_raw: np.ndarray, start: int, stop: int,
                         interval_hours: int, min_daily: float) -> bool:
    """Mean combined events per day over [start, stop) >= the floor."""
    window = usage_raw[start:stop]
    if len(window) == 0:
        return False
    days = len(window) * interval_hours / 24.0
    return float(window.sum()) / max(days, 1e-9) >= min_daily


@dataclass
class NewStationCase:
    """One new station prepared for rolling evaluation."""

    station_id: str
    data: StationData               # observed series (zeros before launch)
    launch: int                     # first-usage interval index
    weights: NeighborWeights
    virtual: np.ndarray             # (lookback, 2) raw-scale virtual history
    cluster: int


def prepare_new_station(sid: str, data: StationData, launch: int,
                        weights: NeighborWeights,
                        neighbor_series: dict, neighbor_scales: dict,
                        lookback: int, cluster: int) -> NewStationCase:
    """Attach virtual history and the blended usage scale to a new station.

    The per-station input scale has no training-time value for a station with
    no history, so it blends the neighbors' scales with the same weights as
    the virtual series.
    """
    virtual = virtual_usage(weights, neighbor_series,
                            launch - lookback, lookback)
    scale = np.zeros(2)
    total_w = 0.0
    for nid, w in zip(weights.neighbor_ids, weights.weights):
        if nid in neighbor_scales:
            scale += w * np.asarray(neighbor_scales[nid], dtype=float)
            total_w += w
    scale = np.maximum(scale / total_w if total_w > 0 else scale, 1.0)
    data.scale = scale
    data.usage_scaled = data.usage_raw / scale
    return NewStationCase(station_id=sid, data=data, launch=launch,
                          weights=weights, virtual=virtual, cluster=cluster)


def _rolling_new_predictions(ctx: EvalContext, scheme: str,
                             case: NewStationCase, horizon: int,
                             use_virtual: bool) -> tuple[np.ndarray, np.ndarray]:
    """One-step predictions for targets [launch, launch+horizon).

    Window entries before launch come from the scaled virtual history (or
    zeros without it); entries at or past launch use observed usage as it
    accrues.  Returns (clamped predictions, truths), raw scale.
    """
    st = case.data
    tt = ctx.lookback
    launch = case.launch
    horizon = min(horizon, len(st.usage_raw) - launch)
    if horizon <= 0:
        raise EvalError(f"{case.station_id}: no post-launch intervals")

    usage_aug = st.usage_scaled.copy()
    if use_virtual:
        usage_aug[launch - tt:launch] = case.virtual / st.scale
    else:
        usage_aug[launch - tt:launch] = 0.0

    ends = np.arange(launch, launch + horizon)
    if scheme == "persistence":
        pred = usage_aug[ends - 1] * st.scale
    elif scheme == "atcor":
        params = ctx.scheme_params(scheme, case.cluster)
        cnn_full = cnn_series(params, st.heatmaps)
        pred = atcor_predict_windows(params, cnn_full, usage_aug,
                                     st.externals, ends) * st.scale
    else:
        params = ctx.scheme_params(scheme, case.cluster)
        pred = baseline_predict_windows(params, usage_aug, st.externals,
                                        ends) * st.scale
    truth = st.usage_raw[ends].astype(float)
    return np.maximum(pred, 0.0), truth


def eval_new(ctx: EvalContext, cases: list[NewStationCase],
             horizon: int, schemes=SCHEMES,
             ablation_intervals: int = 24) -> list[EvalReport]:
    """Score new stations from launch with virtual-seeded windows.

    Emits one report per scheme over the full horizon plus, for the main
    model, first-``ablation_intervals`` reports with and without virtual
    history (zero-filled), side by side.
    """
    if not cases:
        log.warning("no qualifying new stations; empty report")
        return []
    pairs = [(c.station_id, int(c.launch + k))
             for c in cases
             for k in range(min(horizon, len(c.data.usage_raw) - c.launch))]
    digest = _sample_digest(pairs)

    reports = []
    for scheme in schemes:
        truths, preds, per_station = [], [], {}
        for case in cases:
            p, y = _rolling_new_predictions(ctx, scheme, case, horizon, True)
            preds.append(p)
            truths.append(y)
            s_pick = mae_mse(y[:, 0], p[:, 0])
            s_drop = mae_mse(y[:, 1], p[:, 1])
            per_station[case.station_id] = {
                "pickup_mae": s_pick[0], "dropoff_mae": s_drop[0], "n": len(y)}
        (p_mae, p_mse), (d_mae, d_mse), n = _pooled(truths, preds)
        reports.append(EvalReport(
            scheme=scheme, city=ctx.city_id, protocol="new",
            station_ids=[c.station_id for c in cases],
            pickup_mae=p_mae, pickup_mse=p_mse,
            dropoff_mae=d_mae, dropoff_mse=d_mse,
            n_samples=n, sample_hash=digest,
            metadata=dict(ctx.protocol_meta, horizon=horizon)))

    for variant, use_virtual in (("atcor_virtual", True),
                                 ("atcor_no_virtual", False)):
        truths, preds = [], []
        for case in cases:
            p, y = _rolling_new_predictions(ctx, "atcor", case,
                                            ablation_intervals, use_virtual)
            preds.append(p)
            truths.append(y)
        (p_mae, p_mse), (d_mae, d_mse), n = _pooled(truths, preds)
        reports.append(EvalReport(
            scheme=variant, city=ctx.city_id, protocol="ablation",
            station_ids=[c.station_id for c in cases],
            pickup_mae=p_mae, pickup_mse=p_mse,
            dropoff_mae=d_mae, dropoff_mse=d_mse,
            n_samples=n, sample_hash=digest,
            metadata=dict(ctx.protocol_meta,
                          ablation_intervals=ablation_intervals)))
    return reports


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def write_reports(reports: list[EvalReport], out_dir: Path,
                  stem: str = "report") -> tuple[Path, Path]:
    """Write the text table plus machine-readable key-value records."""
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{stem}.txt"
    js = out_dir / f"{stem}.json"
    cols = ["scheme", "pickup_mae", "pickup_mse", "dropoff_mae", "dropoff_mse",
            "n_samples"]
    with open(txt, "w") as fh:
        by_protocol: dict[str, list[EvalReport]] = {}
        for r in reports:
            by_protocol.setdefault(r.protocol, []).append(r)
        for protocol, rows in by_protocol.items():
            fh.write(f"== {rows[0].city} :: {protocol} stations ==\n")
            fh.write(f"{'scheme':<18}" + "".join(f"{c:>14}" for c in cols[1:]) + "\n")
            for r in rows:
                fh.write(f"{r.scheme:<18}"
                         f"{r.pickup_mae:>14.3f}{r.pickup_mse:>14.3f}"
                         f"{r.dropoff_mae:>14.3f}{r.dropoff_mse:>14.3f}"
                         f"{r.n_samples:>14d}\n")
            for scheme in PLACEHOLDER_SCHEMES:
                fh.write(f"{scheme:<18}" + f"{'not implemented':>56}\n")
            meta = rows[0].metadata
            fh.write(f"sample_hash={rows[0].sample_hash} "
                     + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n\n")
    with open(js, "w") as fh:
        json.dump([r.row() for r in reports], fh, indent=2)
    return txt, js
