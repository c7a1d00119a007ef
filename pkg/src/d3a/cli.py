"""Command-line entry point: simulate, ingest, query, bench, stats."""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np

from . import __version__
from .core import EngineConfig
from .evaluation import ENGINES, build_query_suite, build_store, fpr_sweep, run_benchmark
from .perception import CameraModel, SynthDetectorParams
from .plotting import plot_insertions, plot_sweep
from .query import Query, QueryValidationError, execute
from .simulator import InfeasibleWorld, WorldSpec, coverage_violations, gen_patrol, gen_world
from .store import SpatialTemporalStore, StoreFormatError
from .streamio import StreamFormatError, load_stream, read_frames, stream_paths, write_stream

HOUR_MS = 3_600_000


class CliError(Exception):
    """A user-facing failure; printed without a traceback."""


def _dump_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _versions() -> dict:
    return {
        "d3a": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, started: float, **extra) -> Path:
    """Record what ran, with which inputs and settings. Wall-clock fields live only here."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command,
        "flags": flags,
        "versions": _versions(),
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "elapsed_s": round(time.time() - started, 3),
        **extra,
    }
    path = out_dir / "run_manifest.json"
    _dump_json(manifest, path)
    return path


def _engine_config(args, map_bounds=None) -> EngineConfig:
    kw = {}
    for flag, name in (
        ("d_thresh", "d_thresh_m"),
        ("window", "window_len"),
        ("cos_thresh", "cos_sim_thresh"),
        ("stm_cap", "stm_capacity"),
        ("q2_window_ms", "q2_together_window_ms"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    if map_bounds is not None:
        kw["map_bounds"] = tuple(map_bounds)
    try:
        return EngineConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def _stream_inputs(path: Path, gt: Optional[Path] = None) -> tuple[Path, Path]:
    if path.is_dir():
        frames, default_gt = stream_paths(path)
    else:
        frames, default_gt = path, path.with_name("gt.jsonl")
    return frames, (gt or default_gt)


def _config_line(cfg: EngineConfig) -> str:
    return f"d_thresh={cfg.d_thresh_m:g} window={cfg.window_len} cos={cfg.cos_sim_thresh:g} stm={cfg.stm_capacity}"


# -- commands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.time()
    out = Path(args.out)
    spec = WorldSpec(
        n_static=args.static,
        n_dynamic=args.dynamic,
        duration_ms=int(round(args.hours * HOUR_MS)),
        seed=args.seed,
        pose_noise_sd_m=args.pose_noise,
        depth_noise_sd_m=args.depth_noise,
    )
    cam = CameraModel()
    try:
        world = gen_world(spec, cam)
    except InfeasibleWorld as exc:
        raise CliError(f"infeasible world: {exc}") from exc
    n_emb = max((o.true_embedding_index for o in world), default=0) + 1
    detector = SynthDetectorParams(n_emb, args.fpr, args.fnr, args.seed)
    stream = gen_patrol(world, spec, cam, detector)
    out.mkdir(parents=True, exist_ok=True)
    frames_path, gt_path = stream_paths(out)
    write_stream(stream, frames_path, gt_path)
    load_stream(frames_path, gt_path)  # read back before declaring success
    gaps = coverage_violations(stream)
    print(f"frames={len(stream.frames)} detections={stream.n_detections} objects={len(world)}")
    if gaps:
        print(f"warning: {len(gaps)} placements never seen in consecutive frames", file=sys.stderr)
    write_manifest(out, "simulate", args, started, world_spec=spec.to_dict(), camera=cam.to_dict(),
                   outputs=[frames_path.name, gt_path.name])
    return 0


def cmd_ingest(args) -> int:
    started = time.time()
    frames_path, _ = _stream_inputs(Path(args.inp))
    try:
        frames = read_frames(frames_path)
    except OSError as exc:
        raise CliError(f"cannot read {frames_path}: {exc.strerror}") from exc
    cfg = _engine_config(args, args.map_bounds)
    print(_config_line(cfg))
    start = time.perf_counter()
    store = build_store(args.engine, frames, cfg, CameraModel())
    processing_ms = (time.perf_counter() - start) * 1000.0
    t0 = frames[0].t if frames else 0
    hours = max(1, math.ceil((frames[-1].t - t0) / HOUR_MS)) if frames else 0
    store.meta.update({"engine": args.engine, "t_start": t0, "hours": hours})
    out = Path(args.out)
    store.persist(out)
    reloaded = SpatialTemporalStore.load(out)
    reloaded.check_integrity()
    st = reloaded.stats(t0, hours, out)
    print(f"oic_count={st.oic_count} stc_count={st.stc_count} entries={st.entry_count} bytes={st.bytes_on_disk}")
    write_manifest(out, "ingest", args, started, config=cfg.to_dict(), processing_ms=round(processing_ms, 3),
                   stats=st.to_dict())
    return 0


def _load_queries(text: str) -> list[dict]:
    p = Path(text)
    if not text.lstrip().startswith(("{", "[")) and p.exists():
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        # a file of one query per line
        try:
            data = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise CliError(f"query is not valid JSON: {exc}") from exc
    return data if isinstance(data, list) else [data]


def cmd_query(args) -> int:
    started = time.time()
    try:
        store = SpatialTemporalStore.load(args.store)
    except (OSError, StoreFormatError) as exc:
        raise CliError(f"cannot load store {args.store}: {exc}") from exc
    results = []
    for i, raw in enumerate(_load_queries(args.query)):
        try:
            q = Query.from_dict(raw)
        except QueryValidationError as exc:
            print(json.dumps({"query": i, "errors": exc.errors}, sort_keys=True), file=sys.stderr)
            return 2
        results.append(execute(q, store, store.cfg).to_dict())
    print(json.dumps(results[0] if len(results) == 1 else results, indent=2, sort_keys=True))
    if args.manifest_dir:
        write_manifest(Path(args.manifest_dir), "query", args, started, n_queries=len(results))
    return 0


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def cmd_bench(args) -> int:
    started = time.time()
    frames_path, gt_path = _stream_inputs(Path(args.inp), Path(args.gt) if args.gt else None)
    try:
        frames, gt = load_stream(frames_path, gt_path)
    except OSError as exc:
        raise CliError(f"cannot read stream: {exc}") from exc
    engines = [e.strip() for e in args.engines.split(",") if e.strip()]
    bad = [e for e in engines if e not in ENGINES]
    if bad:
        raise CliError(f"unknown engine(s) {', '.join(bad)}; choose from {', '.join(ENGINES)}")
    cfg = _engine_config(args, gt.spec.map_bounds)
    print(_config_line(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = build_query_suite(gt, args.queries, seed=gt.spec.seed, window_ms=cfg.q2_together_window_ms)
    run = run_benchmark(frames, gt, suite, engines, cfg, persist_dir=out / "stores", repeats=args.repeats)
    hours = max(1, math.ceil(gt.spec.duration_ms / HOUR_MS))

    report = {
        "config": cfg.to_dict(),
        "world": gt.spec.to_dict(),
        "detector": {"fpr": gt.detector.fpr, "fnr": gt.detector.fnr, "num_gt_objects": gt.detector.num_gt_objects},
        "suite": [sq.to_dict() for sq in suite],
        "engines": {e: r.to_dict(timing=False) for e, r in run.reports.items()},
    }
    _dump_json(report, out / "report.json")
    with open(out / "query_log.jsonl", "w") as fh:
        for e in engines:
            for o in run.outcomes[e]:
                fh.write(json.dumps({
                    "engine": e, "qid": o.qid, "query": o.query.to_dict(), "reciprocal_rank": o.rr,
                    "answers": o.n_answers, "frames": o.n_frames, "object_ids": o.n_object_ids,
                    "negative": o.negative,
                }, sort_keys=True) + "\n")
    timings = {
        e: {
            "total_processing_ms": r.total_processing_ms,
            "cells": [{"kind": k, "precision": p, **{f: getattr(c, f) for f in c.TIMING}}
                      for (k, p), c in sorted(r.cells.items())],
            "queries": [{"qid": o.qid, "retrieval_ms": o.retrieval_ms, "evaluation_ms": o.evaluation_ms}
                        for o in run.outcomes[e]],
        }
        for e, r in run.reports.items()
    }
    _dump_json(timings, out / "timings.json")

    rows = []
    for (k, p) in sorted(next(iter(run.reports.values())).cells):
        for e in engines:
            c = run.reports[e].cells[(k, p)]
            rows.append([k, p, e, c.n_queries, _fmt(c.miss_rate), _fmt(c.mean_frames_returned),
                         _fmt(c.mean_object_ids), _fmt(c.mrr_at_50)])
    _write_csv(out / "table3.csv",
               ["kind", "precision", "engine", "queries", "miss_rate", "mean_frames", "mean_object_ids", "mrr_at_50"],
               rows)
    rows = []
    for (k, p) in sorted(next(iter(run.reports.values())).cells):
        for e in engines:
            c = run.reports[e].cells[(k, p)]
            rows.append([k, p, e, _fmt(c.mean_retrieval_ms), _fmt(c.median_retrieval_ms), _fmt(c.total_evaluation_ms)])
    _write_csv(out / "table3_timings.csv",
               ["kind", "precision", "engine", "mean_retrieval_ms", "median_retrieval_ms", "total_evaluation_ms"], rows)
    rows = []
    for e in engines:
        r = run.reports[e]
        mean, sd, mx = r.duplicates_per_object
        rows.append([e, r.db_size_bytes, r.unique_object_ids, r.stc_records, r.entry_count, _fmt(mean), _fmt(sd), mx,
                     _fmt(r.mean_accuracy_pct), _fmt(r.negative_accuracy),
                     *(_fmt(r.mean_frames_by_precision.get(p, 0.0)) for p in ("Perfect", "Category", "Any")),
                     *(_fmt(r.mrr_by_precision.get(p, 0.0)) for p in ("Perfect", "Category", "Any")),
                     _fmt(r.q3_position_error_rate), int(r.q3_positions_conflated)])
    _write_csv(out / "table4.csv",
               ["engine", "db_size_bytes", "unique_object_ids", "stc_records", "entry_count", "duplicates_mean",
                "duplicates_sd", "duplicates_max", "mean_accuracy_pct", "negative_accuracy", "frames_perfect",
                "frames_category", "frames_any", "mrr_perfect", "mrr_category", "mrr_any", "q3_position_error_rate",
                "q3_positions_conflated"], rows)
    _write_csv(out / "insertions.csv", ["hour", "engine", "cumulative_insertions"],
               [[h + 1, e, v] for e in engines for h, v in enumerate(run.reports[e].insertions_per_hour)])
    plot_insertions({e: run.reports[e].insertions_per_hour for e in engines}, out / "insertions.png")
    outputs = ["report.json", "query_log.jsonl", "timings.json", "table3.csv", "table3_timings.csv", "table4.csv",
               "insertions.csv", "insertions.png"] + [f"stores/{e}" for e in engines]

    if args.sweep:
        try:
            levels = [float(v) for v in args.sweep.split(",")]
            sweep = fpr_sweep(levels, gt.objects, gt.spec, cfg, gt.cam, fnr=args.sweep_fnr,
                              engines=[e for e in engines if e != "nonspatial"] or ["d3a"])
        except ValueError as exc:
            raise CliError(f"bad --sweep: {exc}") from exc
        _write_csv(out / "sweep.csv", ["fpr", "engine", "mrr", "miss_rate"],
                   [[_fmt(r.fpr), r.engine, _fmt(r.mrr), _fmt(r.miss_rate)] for r in sweep])
        plot_sweep(sweep, out / "sweep.png")
        outputs += ["sweep.csv", "sweep.png"]

    # validate before reporting success
    json.loads((out / "report.json").read_text())
    for e in engines:
        SpatialTemporalStore.load(out / "stores" / e).check_integrity()
    for e in engines:
        r = run.reports[e]
        print(f"{e}: oic_count={r.unique_object_ids} stc_count={r.stc_records} "
              f"accuracy={r.mean_accuracy_pct:.1f}% dup_mean={r.duplicates_per_object[0]:.2f}")
    print(f"hours={hours} queries={len(suite)} out={out}")
    write_manifest(out, "bench", args, started, config=cfg.to_dict(), world_spec=gt.spec.to_dict(),
                   inputs=[str(frames_path), str(gt_path)], outputs=outputs)
    return 0


def cmd_stats(args) -> int:
    try:
        store = SpatialTemporalStore.load(args.store)
    except (OSError, StoreFormatError) as exc:
        raise CliError(f"cannot load store {args.store}: {exc}") from exc
    store.check_integrity()
    st = store.stats(store.meta.get("t_start"), int(store.meta.get("hours", 0)), args.store)
    print(json.dumps({"meta": store.meta, **st.to_dict()}, indent=2, sort_keys=True))
    return 0


# -- argument parsing ------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("engine configuration (defaults from EngineConfig)")
    g.add_argument("--d-thresh", type=float, help="same-place distance threshold, meters")
    g.add_argument("--window", type=int, help="sliding window length, frames")
    g.add_argument("--cos-thresh", type=float, help="cosine similarity threshold")
    g.add_argument("--stm-cap", type=int, help="short-term memory capacity")
    g.add_argument("--q2-window-ms", type=int, help="Q2 together window, ms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d3a", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a patrol stream and ground truth")
    p.add_argument("--static", type=int, default=49)
    p.add_argument("--dynamic", type=int, default=10)
    p.add_argument("--hours", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fpr", type=float, default=0.0, help="per-bit embedding flip rate")
    p.add_argument("--fnr", type=float, default=0.0, help="per-detection miss rate")
    p.add_argument("--pose-noise", type=float, default=0.0, help="reported pose noise sd, meters")
    p.add_argument("--depth-noise", type=float, default=0.0, help="range noise sd, meters")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="build a store from a stream")
    p.add_argument("--engine", choices=ENGINES, default="d3a")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="stream directory or frames.jsonl")
    p.add_argument("--out", type=Path, required=True, help="store directory")
    p.add_argument("--map-bounds", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="run a query against a stored store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--query", required=True, help="query JSON, inline or a file path")
    p.add_argument("--manifest-dir", type=Path, help="where to write run_manifest.json")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="benchmark engines on a stream with ground truth")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="stream directory or frames.jsonl")
    p.add_argument("--gt", type=Path, help="ground truth (default: gt.jsonl beside the frames)")
    p.add_argument("--engines", default=",".join(ENGINES))
    p.add_argument("--queries", type=int, default=150)
    p.add_argument("--repeats", type=int, default=5, help="timing repetitions per query (median)")
    p.add_argument("--sweep", help="comma-separated fpr levels, e.g. 0,0.1,0.2")
    p.add_argument("--sweep-fnr", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="print store statistics")
    p.add_argument("--store", type=Path, required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, StreamFormatError, StoreFormatError) as exc:
        print(f"d3a {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
