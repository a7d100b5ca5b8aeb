"""Diagnostic plot emission for evaluation runs.

Prediction-vs-truth curves per station plus the exploratory views used when
sizing the feature design: temperature / precipitation / wind effects on
daily usage, the trip-distance distribution that motivates the heatmap
extent, monthly station counts, and per-category POI densities.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from atcor.coldstart import great_circle_km

log = logging.getLogger(__name__)


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    log.info("wrote %s", path)


def prediction_curves(times, truth, predicted, station_id: str,
                      out: Path) -> None:
    """Hourly predicted vs observed pick-ups and drop-offs for one station."""
    fig, axes = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    labels = ("pick-ups", "drop-offs")
    x = np.arange(len(times))
    for k, ax in enumerate(axes):
        ax.plot(x, truth[:, k], label="observed", lw=1.2, color="#444")
        ax.plot(x, predicted[:, k], label="predicted", lw=1.2, color="#d62728")
        ax.set_ylabel(labels[k])
        ax.legend(loc="upper right", fontsize=8)
    axes[1].set_xlabel(f"intervals from {times[0]}")
    fig.suptitle(f"station {station_id}: one-step predictions")
    _save(fig, out)


def temperature_effect(externals, usage_by_interval, interval_hours: int,
                       out: Path) -> None:
    """Daily total usage against daily mean temperature."""
    per_day = 24 // interval_hours
    n_days = len(usage_by_interval) // per_day
    u = usage_by_interval[:n_days * per_day].reshape(n_days, per_day).sum(axis=1)
    t = externals[:n_days * per_day, 0].reshape(n_days, per_day).mean(axis=1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(t, u, s=14, alpha=0.6)
    ax.set_xlabel("daily mean temperature (F)")
    ax.set_ylabel("daily trips")
    ax.set_title("temperature vs daily usage")
    _save(fig, out)


def precipitation_wind_effect(externals, usage_by_interval,
                              interval_hours: int, out: Path) -> None:
    per_day = 24 // interval_hours
    n_days = len(usage_by_interval) // per_day
    u = usage_by_interval[:n_days * per_day].reshape(n_days, per_day).sum(axis=1)
    p = externals[:n_days * per_day, 2].reshape(n_days, per_day).sum(axis=1)
    w = externals[:n_days * per_day, 1].reshape(n_days, per_day).mean(axis=1)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].scatter(p, u, s=14, alpha=0.6)
    axes[0].set_xlabel("daily precipitation (in)")
    axes[0].set_ylabel("daily trips")
    axes[1].scatter(w, u, s=14, alpha=0.6, color="#2ca02c")
    axes[1].set_xlabel("daily mean wind (mph)")
    fig.suptitle("precipitation and wind vs daily usage")
    _save(fig, out)


def trip_distance_histogram(trips, out: Path) -> None:
    """Start-to-end great-circle distances; motivates the heatmap extent."""
    d = [great_circle_km(t.start_lat, t.start_lon, t.end_lat, t.end_lon) * 1000
         for t in trips]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(d, bins=40, color="#1f77b4", alpha=0.85)
    ax.axvline(500, color="#d62728", ls="--", lw=1, label="500 m cell")
    ax.axvline(2750, color="#ff7f0e", ls="--", lw=1, label="grid edge")
    ax.set_xlabel("trip distance (m)")
    ax.set_ylabel("trips")
    ax.legend(fontsize=8)
    ax.set_title("trip distance distribution")
    _save(fig, out)


def monthly_station_counts(trips, out: Path) -> None:
    """Stations with any usage per calendar month."""
    seen: dict[str, set] = {}
    for t in trips:
        key = t.start_time.strftime("%Y-%m")
        seen.setdefault(key, set()).add(t.start_station)
        seen.setdefault(key, set()).add(t.end_station)
    months = sorted(seen)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(months, [len(seen[m]) for m in months], color="#9467bd")
    ax.set_ylabel("stations with usage")
    ax.tick_params(axis="x", rotation=45)
    ax.set_title("stations in use per month")
    _save(fig, out)


def poi_category_profile(pois, categories, out: Path) -> None:
    """Min-max normalized POI counts per category."""
    counts = {c: 0 for c in categories}
    for p in pois:
        counts[p.category] = counts.get(p.category, 0) + 1
    vals = np.array([counts[c] for c in categories], dtype=float)
    rng = vals.max() - vals.min()
    norm = (vals - vals.min()) / (rng if rng else 1.0)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(categories, norm, color="#8c564b")
    ax.set_ylabel("normalized count")
    ax.tick_params(axis="x", rotation=60)
    ax.set_title("POI category profile")
    _save(fig, out)


def loss_curve(trace, out: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(trace, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("batch MSE")
    ax.set_title("training loss")
    _save(fig, out)
