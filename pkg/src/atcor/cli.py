"""Command-line entry points for the pipeline and service.

    atcor synth     --out DIR [--preset small|acceptance] [--seed N]
    atcor ingest    --city ID --trips GLOB --weather F --pois F --out DIR
    atcor featurize --artifacts DIR [--stations a,b,c|all] [--debug-dump]
    atcor cluster   --artifacts DIR [--k N|auto] [--seed N]
    atcor train     --artifacts DIR [--cluster N|all] [--config F] [--schemes ...]
    atcor coldstart --artifacts DIR --lat X --lon Y --launch T [--out F]
    atcor evaluate  --artifacts DIR --protocol existing|new|ablation [--plots]
    atcor serve     --artifacts DIR [--port N] [--ui-dist DIR]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from atcor import coldstart, pipeline
from atcor.config import load_city
from atcor.train import TrainConfig

log = logging.getLogger("atcor")


def _add_artifacts(p):
    p.add_argument("--artifacts", required=True, help="artifacts directory")


def cmd_synth(args) -> int:
    from atcor.synthcity import SynthSpec, make_city
    presets = {
        "small": SynthSpec(seed=args.seed),
        "acceptance": SynthSpec(n_existing=30, n_new=2, days=66, seed=args.seed,
                                base_rate=6.0, new_launch_day=45),
    }
    spec = presets[args.preset]
    city = make_city(spec)
    paths = city.write(Path(args.out))
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    print(f"{len(city.trips)} trips across {len(city.station_ids)} stations "
          f"({len(city.new_ids)} launch late)")
    return 0


def cmd_ingest(args) -> int:
    cfg = load_city(args.city)
    manifest = pipeline.run_ingest(cfg, args.trips, args.weather, args.pois,
                                   Path(args.out))
    print(json.dumps(manifest["counts"], indent=2))
    return 0


def cmd_featurize(args) -> int:
    from atcor.ingest import TimeSpan
    arts = pipeline.Artifacts.load(args.artifacts)
    stations = None
    if args.stations and args.stations != "all":
        stations = args.stations.split(",")
    span = None
    if args.span:
        lo, _, hi = args.span.partition("..")
        span = TimeSpan(datetime.fromisoformat(lo), datetime.fromisoformat(hi))
    done = pipeline.run_featurize(arts, stations, debug_dump=args.debug_dump,
                                  span=span)
    print(f"featurized {len(done)} stations "
          f"(channels={arts.cfg.n_channels}, "
          f"grid={arts.cfg.grid.rows}x{arts.cfg.grid.cols})")
    return 0


def cmd_cluster(args) -> int:
    arts = pipeline.Artifacts.load(args.artifacts)
    k = None if args.k == "auto" else int(args.k)
    assignment = pipeline.run_cluster(arts, k=k, seed=args.seed)
    sizes = {c: len(assignment.members(c)) for c in range(assignment.k)}
    print(f"k={assignment.k} inertia={assignment.inertia:.4g} sizes={sizes}")
    return 0


def cmd_train(args) -> int:
    arts = pipeline.Artifacts.load(args.artifacts)
    if args.config:
        tc = TrainConfig(**json.loads(Path(args.config).read_text()))
    else:
        tc = TrainConfig(d=args.d, epochs=args.epochs, seed=args.seed)
    clusters = None if args.cluster == "all" else [int(args.cluster)]
    conv_spec = None
    if args.conv_spec:
        conv_spec = [tuple(int(x) for x in layer.split("x"))
                     for layer in args.conv_spec.split(",")]
    schemes = tuple(args.schemes.split(","))
    results = pipeline.run_train(arts, tc, schemes=schemes, clusters=clusters,
                                 conv_spec=conv_spec)
    for (scheme, cid), res in results.items():
        print(f"{scheme} cluster {cid}: final loss "
              f"{res.loss_trace[-min(20, len(res.loss_trace)):].mean():.5g} "
              f"({len(res.loss_trace)} epochs)")
    return 0


def cmd_coldstart(args) -> int:
    arts = pipeline.Artifacts.load(args.artifacts)
    cfg = arts.cfg
    existing = arts.registry.ids("active_existing")
    coords = {s: arts.registry.coord(s) for s in existing}
    picked = coldstart.select_neighbors((args.lat, args.lon), coords,
                                        cfg.coldstart.max_neighbors,
                                        cfg.coldstart.radius_km)
    if not picked:
        print(f"no active existing stations within {cfg.coldstart.radius_km} km",
              file=sys.stderr)
        return 1
    weights = coldstart.neighbor_weights((args.lat, args.lon), picked)
    launch_idx = arts.index_of(datetime.fromisoformat(args.launch))
    n = cfg.coldstart.virtual_intervals
    virtual = coldstart.virtual_usage(
        weights, {s: arts.usage_series(s) for s in picked},
        launch_idx - n, n)

    print("station_id,distance_km,similarity,weight")
    for sid, d, s, w in weights.as_rows():
        print(f"{sid},{d:.4f},{s:.4f},{w:.6f}")
    out = Path(args.out) if args.out else None
    if out:
        with open(out, "w") as fh:
            fh.write("interval,virtual_pickups,virtual_dropoffs\n")
            for i, (p, dr) in enumerate(virtual):
                fh.write(f"{launch_idx - n + i},{p:.4f},{dr:.4f}\n")
        print(f"virtual series written to {out}")
    else:
        print("interval,virtual_pickups,virtual_dropoffs")
        for i, (p, dr) in enumerate(virtual):
            print(f"{launch_idx - n + i},{p:.4f},{dr:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    arts = pipeline.Artifacts.load(args.artifacts)
    if args.city and args.city != arts.cfg.city_id:
        print(f"error: artifacts belong to {arts.cfg.city_id!r}, "
              f"not {args.city!r}", file=sys.stderr)
        return 1
    if args.protocol == "existing":
        reports = pipeline.run_eval_existing(arts)
    else:  # new and ablation share the harness; ablation rows are included
        reports = pipeline.run_eval_new(arts)
        if args.protocol == "ablation":
            reports = [r for r in reports if r.protocol == "ablation"]
    for r in reports:
        print(f"{r.protocol:<10} {r.scheme:<18} pick MAE {r.pickup_mae:7.3f} "
              f"MSE {r.pickup_mse:8.3f} | drop MAE {r.dropoff_mae:7.3f} "
              f"MSE {r.dropoff_mse:8.3f}  [n={r.n_samples}]")
    print(f"reports under {arts.root / 'reports'}")
    if args.plots:
        _emit_plots(arts)
    return 0


def _emit_plots(arts) -> None:
    from atcor import plots
    out = arts.root / "reports" / "plots"
    trips = arts.trips()
    total_usage = None
    for s in arts.usage.values():
        stacked = s.stacked().sum(axis=1)
        total_usage = stacked if total_usage is None else total_usage + stacked
    plots.temperature_effect(arts.externals.values, total_usage,
                             arts.cfg.interval_hours, out / "temperature.png")
    plots.precipitation_wind_effect(arts.externals.values, total_usage,
                                    arts.cfg.interval_hours,
                                    out / "precip_wind.png")
    plots.trip_distance_histogram(trips, out / "trip_distance.png")
    plots.monthly_station_counts(trips, out / "stations_monthly.png")
    plots.poi_category_profile(arts.pois(), arts.cfg.poi_categories,
                               out / "poi_profile.png")
    # one prediction-vs-truth curve per the busiest three stations
    try:
        ctx = pipeline.build_eval_context(arts)
        import numpy as np
        busiest = sorted(ctx.stations,
                         key=lambda s: -ctx.stations[s].usage_raw.sum())[:3]
        from atcor.evaluate import _predict_station
        for sid in busiest:
            st = ctx.stations[sid]
            ends = np.arange(max(ctx.test_start, ctx.lookback),
                             min(ctx.test_end, len(st.usage_raw)))
            pred = _predict_station(ctx, "atcor", st,
                                    ctx.cluster_of.get(sid, 0), ends, {})
            times = [str(e) for e in ends]
            plots.prediction_curves(times, st.usage_raw[ends], pred, sid,
                                    out / f"prediction_{sid}.png")
    except Exception as exc:  # plots are best-effort diagnostics
        log.warning("prediction curves skipped: %s", exc)
    print(f"plots under {out}")


def cmd_serve(args) -> int:
    import os
    import uvicorn
    from atcor.service import create_app
    artifacts = args.artifacts or os.environ.get("ATCOR_ARTIFACTS")
    if not artifacts:
        print("error: --artifacts or ATCOR_ARTIFACTS required", file=sys.stderr)
        return 1
    port = args.port or int(os.environ.get("ATCOR_PORT", "8700"))
    ui = args.ui_dist or os.environ.get("ATCOR_UI_DIST")
    app = create_app(artifacts, ui_dist=ui)
    if args.city:
        from atcor.pipeline import Artifacts
        got = Artifacts.load(artifacts).cfg.city_id
        if got != args.city:
            print(f"error: artifacts belong to {got!r}, not {args.city!r}",
                  file=sys.stderr)
            return 1
    uvicorn.run(app, host=args.host, port=port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atcor",
                                description="station-level bike usage "
                                            "forecasting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic city")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", choices=["small", "acceptance"], default="small")
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ingest", help="parse raw inputs into artifacts")
    s.add_argument("--city", required=True, help="builtin id or profile path")
    s.add_argument("--trips", required=True, help="trip CSV glob")
    s.add_argument("--weather", required=True)
    s.add_argument("--pois", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("featurize", help="build station-centered heatmaps")
    _add_artifacts(s)
    s.add_argument("--stations", default="all", help="comma list or 'all'")
    s.add_argument("--span", help="ISO t0..t1 sub-window (inspection runs)")
    s.add_argument("--debug-dump", action="store_true")
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("cluster", help="signature K-means over stations")
    _add_artifacts(s)
    s.add_argument("--k", default="auto")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_cluster)

    s = sub.add_parser("train", help="train per-cluster models")
    _add_artifacts(s)
    s.add_argument("--cluster", default="all")
    s.add_argument("--config", help="TrainConfig JSON path")
    s.add_argument("--schemes", default="atcor",
                   help="comma list from atcor,rnn,lstm,gru")
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--conv-spec", help="e.g. 3x3x32,3x3x16,2x2x8")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("coldstart", help="neighbor weights + virtual series")
    _add_artifacts(s)
    s.add_argument("--lat", type=float, required=True)
    s.add_argument("--lon", type=float, required=True)
    s.add_argument("--launch", required=True, help="ISO timestamp")
    s.add_argument("--out", help="virtual series CSV path")
    s.set_defaults(fn=cmd_coldstart)

    s = sub.add_parser("evaluate", help="run an evaluation protocol")
    _add_artifacts(s)
    s.add_argument("--city", help="consistency check against the artifacts")
    s.add_argument("--protocol", choices=["existing", "new", "ablation"],
                   required=True)
    s.add_argument("--plots", action="store_true")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("serve", help="run the prediction service")
    s.add_argument("--artifacts", help="artifacts dir (or ATCOR_ARTIFACTS)")
    s.add_argument("--city", help="consistency check against the artifacts")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0,
                   help="port (default ATCOR_PORT or 8700)")
    s.add_argument("--ui-dist", help="static UI assets to mount at /ui "
                                     "(or ATCOR_UI_DIST)")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (pipeline.PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
