"""Naive and Non-spatial baselines, the query suite and the metrics harness."""

from __future__ import annotations

import math
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .core import EngineConfig, KeyframeRef, SensorFrame, euclid
from .perception import CameraModel, SynthDetectorParams
from .pipeline import D3APipeline, observations_from_frame
from .query import (
    Answer,
    Kind,
    Precision,
    Query,
    TargetSpec,
    answer_q1,
    answer_q2,
    answer_q3,
    evaluate_rank,
    execute,
    together,
)
from .simulator import ABSENT_CATEGORIES, GroundTruthObject, WorldSpec, gen_patrol
from .store import SpatialTemporalStore
from .streamio import GroundTruth

ENGINES = ("d3a", "naive", "nonspatial")
TIMING_REPEATS = 5
KINDS = (Kind.Q1, Kind.Q2, Kind.Q3)
PRECISIONS = (Precision.PERFECT, Precision.CATEGORY, Precision.ANY)
Q3_RANGE_MS = 3_600_000


# -- baselines -----------------------------------------------------------


def naive_ingest(
    frames: Iterable[SensorFrame], store: SpatialTemporalStore, cam: CameraModel, cfg: Optional[EngineConfig] = None
) -> SpatialTemporalStore:
    """Store every detection as its own object with a single STc record."""
    cfg = cfg or store.cfg
    for frame in frames:
        for o in observations_from_frame(frame, cam, cfg):
            oid = store.insert_object(o.category, o.embedding, 1.0, o.t)
            kf = KeyframeRef(o.frame_id, o.bbox, o.prob, o.t)
            store.insert_stc(oid, o.world_pos, o.t, o.t, kf, 1.0, o.t)
    return store


def nonspatial_pipeline(frames: Iterable[SensorFrame], cfg: EngineConfig, cam: CameraModel) -> SpatialTemporalStore:
    """The D3A pipeline with every position term and distance test removed."""
    cfg = cfg.replace(spatial=False)
    return D3APipeline(cfg, cam, SpatialTemporalStore(cfg, {"engine": "nonspatial"})).run(frames)


def build_store(engine: str, frames: list[SensorFrame], cfg: EngineConfig, cam: CameraModel) -> SpatialTemporalStore:
    if engine == "d3a":
        return D3APipeline(cfg, cam, SpatialTemporalStore(cfg, {"engine": "d3a"})).run(frames)
    if engine == "naive":
        return naive_ingest(frames, SpatialTemporalStore(cfg, {"engine": "naive"}), cam, cfg)
    if engine == "nonspatial":
        return nonspatial_pipeline(frames, cfg, cam)
    raise ValueError(f"unknown engine {engine!r}; expected one of {', '.join(ENGINES)}")


# -- ground-truth bookkeeping ---------------------------------------------


def object_gt_counts(store: SpatialTemporalStore, gt: GroundTruth) -> dict[int, dict[int, int]]:
    """For each gt object, how many STc keyframes of each ObjectID show it."""
    out: dict[int, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for rec in store.stc_records():
        g = gt.gt_of(rec.keyframe.frame_id, rec.keyframe.bbox)
        if g is not None:
            out[g][rec.object_id] += 1
    return out


def duplicates_per_object(store: SpatialTemporalStore, gt: GroundTruth) -> list[int]:
    """Distinct ObjectIDs per gt object, over gt objects present in the store."""
    counts = object_gt_counts(store, gt)
    return [len(counts[g]) for g in sorted(counts)]


def position_errors(store: SpatialTemporalStore, gt: GroundTruth) -> list[float]:
    """Distance from each STc position to the true placement of its keyframe's object."""
    errs = []
    for rec in store.stc_records():
        d = gt.truth_of(rec.keyframe.frame_id, rec.keyframe.bbox)
        if d is None:
            continue
        true = gt.object(d.gt_id).placements[d.placement].position
        errs.append(euclid(rec.position, true))
    return errs


# -- query suite -----------------------------------------------------------


@dataclass(frozen=True)
class SuiteQuery:
    """A benchmark query expressed in ground-truth terms."""

    qid: int
    kind: Kind
    precision: Precision
    gt_ids: tuple[int, ...] = ()
    categories: tuple[str, ...] = ()
    time_range: Optional[tuple[int, int]] = None
    negative: bool = False
    attribute: bool = False

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "kind": self.kind.value,
            "precision": self.precision.value,
            "gt_ids": list(self.gt_ids),
            "categories": list(self.categories),
            "time_range": list(self.time_range) if self.time_range else None,
            "negative": self.negative,
            "attribute": self.attribute,
        }


def co_observed_pairs(gt: GroundTruth, window_ms: int) -> list[tuple[int, int]]:
    """Unordered gt pairs detected within the Q2 together-window of each other."""
    times: dict[int, list[int]] = defaultdict(list)
    frame_t = {}
    for d in gt.detections:
        frame_t.setdefault(d.frame_id, gt.spec.t0_ms + int(round(d.frame_id * gt.spec.frame_period_ms)))
        times[d.gt_id].append(frame_t[d.frame_id])
    ids = sorted(times)
    pairs = []
    for i, a in enumerate(ids):
        ta = np.array(times[a])
        for b in ids[i + 1 :]:
            tb = np.array(times[b])
            j = np.searchsorted(tb, ta)
            gap = np.minimum(
                np.abs(tb[np.clip(j, 0, len(tb) - 1)] - ta), np.abs(tb[np.clip(j - 1, 0, len(tb) - 1)] - ta)
            )
            if gap.min() <= 2 * window_ms:
                pairs.append((a, b))
    return pairs


def build_query_suite(
    gt: GroundTruth, n_queries: int = 150, seed: int = 0, window_ms: int = 60_000
) -> list[SuiteQuery]:
    """Positive queries for every kind x precision cell plus ~10% negatives.

    The same sampled targets are reused across the three precisions of a
    kind, so precision is the only thing that varies within a kind.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5017E]))
    n_neg = max(len(KINDS), int(round(0.1 * n_queries)))
    per_cell = max(1, (n_queries - n_neg) // (len(KINDS) * len(PRECISIONS)))
    n_neg = n_queries - per_cell * len(KINDS) * len(PRECISIONS)
    seen = sorted({d.gt_id for d in gt.detections})
    det_times: dict[int, list[int]] = defaultdict(list)
    for d in gt.detections:
        det_times[d.gt_id].append(gt.spec.t0_ms + int(round(d.frame_id * gt.spec.frame_period_ms)))
    t_lo, t_hi = gt.spec.t0_ms, gt.spec.t0_ms + gt.spec.duration_ms
    suite: list[SuiteQuery] = []

    def add(**kw):
        suite.append(SuiteQuery(qid=len(suite), **kw))

    def pick(pool, k):
        idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [pool[i] for i in sorted(idx.tolist())]

    # Q1
    for g in pick(seen, per_cell):
        for p in PRECISIONS:
            add(kind=Kind.Q1, precision=p, gt_ids=(g,), categories=(gt.object(g).category,))
    # Q2
    pairs = co_observed_pairs(gt, window_ms)
    for a, b in pick(pairs, per_cell):
        for p in PRECISIONS:
            add(kind=Kind.Q2, precision=p, gt_ids=(a, b), categories=(gt.object(a).category, gt.object(b).category))
    # Q3: an hour-long slice around one sighting
    for g in pick(seen, per_cell):
        ts = det_times[g]
        t = ts[int(rng.integers(len(ts)))]
        start = int(t - rng.uniform(0, Q3_RANGE_MS))
        start = max(t_lo, min(start, t_hi - Q3_RANGE_MS))
        tr = (start, start + Q3_RANGE_MS)
        for p in PRECISIONS:
            add(kind=Kind.Q3, precision=p, gt_ids=(g,), categories=(gt.object(g).category,), time_range=tr)
    # negatives: categories the world never contains
    for i in range(n_neg):
        kind = KINDS[i % len(KINDS)]
        absent = ABSENT_CATEGORIES[i % len(ABSENT_CATEGORIES)]
        if kind is Kind.Q2:
            other = gt.object(seen[int(rng.integers(len(seen)))]).category
            add(kind=kind, precision=Precision.CATEGORY, categories=(absent, other), negative=True)
        else:
            add(
                kind=kind, precision=Precision.CATEGORY, categories=(absent,), negative=True,
                time_range=(t_lo, t_hi) if kind is Kind.Q3 else None,
            )
    return suite


class QueryMatcher:
    """Maps ground-truth targets onto one store's ObjectIDs (the 'Perfect' matcher)."""

    def __init__(self, store: SpatialTemporalStore, gt: GroundTruth):
        self.store = store
        self.gt = gt
        self.counts = object_gt_counts(store, gt)

    def _rank_key(self, g: int, oid: int):
        recs = self.store.records_of(oid)
        return (-self.counts[g][oid], -self.store.get_object(oid).weight, -max(r.keyframe.prob for r in recs), oid)

    def candidates(self, g: int, time_range=None) -> list[int]:
        cands = sorted(self.counts.get(g, {}), key=lambda oid: self._rank_key(g, oid))
        if time_range is not None:
            t0, t1 = time_range
            inside = [o for o in cands if any(r.t_first <= t1 and r.t_last >= t0 for r in self.store.records_of(o))]
            cands = inside + [o for o in cands if o not in inside]
        return cands

    def _leads(self, sq: SuiteQuery, ids: tuple[int, ...], cfg: EngineConfig) -> bool:
        """True when the query on ``ids`` ranks a keyframe of the target first."""
        if sq.kind is Kind.Q1:
            res = answer_q1(ids, self.store)
        elif sq.kind is Kind.Q3:
            res = answer_q3(ids, sq.time_range, self.store)
        else:
            res = answer_q2(ids[:1], ids[1:], self.store, cfg)
        return bool(res.answers) and correctness(sq, self.gt)(res.answers[0])

    def perfect_id(self, sq: SuiteQuery, cfg: EngineConfig) -> int:
        """The ObjectID a perfect language matcher would pick for a Q1/Q3 target.

        Among the IDs whose keyframes show the object, one whose answer
        leads with the object wins; otherwise the best represented one.
        """
        cands = self.candidates(sq.gt_ids[0], sq.time_range)
        for oid in cands:
            if self._leads(sq, (oid,), cfg):
                return oid
        # ObjectID 0 is never allocated, so an unmatched target resolves to the empty set
        return cands[0] if cands else 0

    def perfect_pair(self, sq: SuiteQuery, cfg: EngineConfig) -> tuple[int, int]:
        ca, cb = self.candidates(sq.gt_ids[0]), self.candidates(sq.gt_ids[1])
        first_together = None
        for oa in ca:
            ra = self.store.records_of(oa)
            for ob in cb:
                if oa == ob:
                    continue
                if not any(
                    together(x.t_first, x.t_last, y.t_first, y.t_last, cfg.q2_together_window_ms)
                    for x in ra
                    for y in self.store.records_of(ob)
                ):
                    continue
                if self._leads(sq, (oa, ob), cfg):
                    return oa, ob
                if first_together is None:
                    first_together = (oa, ob)
        if first_together is not None:
            return first_together
        return (ca[0] if ca else 0), (cb[0] if cb else 0)

    def to_query(self, sq: SuiteQuery, cfg: EngineConfig) -> Query:
        if sq.precision is Precision.PERFECT:
            if sq.kind is Kind.Q2:
                ids = self.perfect_pair(sq, cfg)
            else:
                ids = (self.perfect_id(sq, cfg),)
            targets = tuple(TargetSpec(object_id=i) for i in ids)
        elif sq.precision is Precision.CATEGORY:
            targets = []
            for k, cat in enumerate(sq.categories):
                emb = None
                if sq.attribute and k < len(sq.gt_ids):
                    emb = np.zeros(self.gt.detector.num_gt_objects)
                    emb[self.gt.object(sq.gt_ids[k]).true_embedding_index] = 1.0
                targets.append(TargetSpec(category=cat, embedding=emb))
            targets = tuple(targets)
        else:
            targets = tuple(TargetSpec() for _ in range(2 if sq.kind is Kind.Q2 else 1))
        return Query(sq.kind, sq.precision, targets, sq.time_range)


def correctness(sq: SuiteQuery, gt: GroundTruth) -> Callable[[Answer], bool]:
    if sq.kind is Kind.Q2:
        want = set(sq.gt_ids)

        def ok(ans: Answer) -> bool:
            got = {gt.gt_of(ans.keyframe.frame_id, ans.keyframe.bbox),
                   gt.gt_of(ans.partner.keyframe.frame_id, ans.partner.keyframe.bbox)}
            return got == want
        return ok
    target = sq.gt_ids[0]
    return lambda ans: gt.gt_of(ans.keyframe.frame_id, ans.keyframe.bbox) == target


# -- metrics ---------------------------------------------------------------


@dataclass
class CellMetrics:
    n_queries: int = 0
    miss_rate: float = 0.0
    mean_frames_returned: float = 0.0
    mean_object_ids: float = 0.0
    mrr_at_50: float = 0.0
    mean_retrieval_ms: float = 0.0
    median_retrieval_ms: float = 0.0
    total_evaluation_ms: float = 0.0

    TIMING = ("mean_retrieval_ms", "median_retrieval_ms", "total_evaluation_ms")

    def to_dict(self, timing: bool = True) -> dict:
        d = dict(self.__dict__)
        if not timing:
            for k in self.TIMING:
                d.pop(k)
        return d


@dataclass
class MetricsReport:
    engine: str
    cells: dict[tuple[str, str], CellMetrics] = field(default_factory=dict)
    db_size_bytes: int = 0
    total_processing_ms: float = 0.0
    unique_object_ids: int = 0
    stc_records: int = 0
    detections: int = 0
    duplicates_per_object: tuple[float, float, int] = (0.0, 0.0, 0)
    gt_objects_found: int = 0
    mean_accuracy_pct: float = 0.0
    negative_accuracy: float = 0.0
    insertions_per_hour: tuple[int, ...] = ()
    q3_position_error_rate: float = 0.0
    q3_positions_conflated: bool = False
    mean_frames_by_precision: dict[str, float] = field(default_factory=dict)
    mrr_by_precision: dict[str, float] = field(default_factory=dict)

    @property
    def entry_count(self) -> int:
        return self.unique_object_ids + self.stc_records

    def cell(self, kind, precision) -> CellMetrics:
        return self.cells[(Kind(kind).value, Precision(precision).value)]

    def to_dict(self, timing: bool = False) -> dict:
        mean, sd, mx = self.duplicates_per_object
        d = {
            "engine": self.engine,
            "cells": [
                {"kind": k, "precision": p, **c.to_dict(timing)} for (k, p), c in sorted(self.cells.items())
            ],
            "db_size_bytes": self.db_size_bytes,
            "unique_object_ids": self.unique_object_ids,
            "stc_records": self.stc_records,
            "entry_count": self.entry_count,
            "detections": self.detections,
            "duplicates_per_object": {"mean": mean, "sd": sd, "max": mx},
            "gt_objects_found": self.gt_objects_found,
            "mean_accuracy_pct": self.mean_accuracy_pct,
            "mean_accuracy_definition": "share of queries answered correctly within the top 50 (negatives: empty answer)",
            "negative_accuracy": self.negative_accuracy,
            "insertions_per_hour": list(self.insertions_per_hour),
            "q3_position_error_rate": self.q3_position_error_rate,
            "q3_positions_conflated": self.q3_positions_conflated,
            "mean_frames_by_precision": self.mean_frames_by_precision,
            "mrr_by_precision": self.mrr_by_precision,
        }
        if timing:
            d["total_processing_ms"] = self.total_processing_ms
        return d


@dataclass
class QueryOutcome:
    qid: int
    engine: str
    query: Query
    rr: float
    n_answers: int
    n_frames: int
    n_object_ids: int
    retrieval_ms: float
    evaluation_ms: float
    negative: bool


def timed_execute(query: Query, store: SpatialTemporalStore, cfg: EngineConfig, repeats: int = TIMING_REPEATS):
    """Run a query ``repeats`` times; return the last result and the median time."""
    times = []
    res = None
    for _ in range(repeats):
        res = execute(query, store, cfg)
        times.append(res.retrieval_ms)
    res.retrieval_ms = statistics.median(times)
    return res


def run_queries(
    engine: str, store: SpatialTemporalStore, gt: GroundTruth, suite: list[SuiteQuery], cfg: EngineConfig,
    repeats: int = TIMING_REPEATS,
) -> list[QueryOutcome]:
    matcher = QueryMatcher(store, gt)
    out = []
    for sq in suite:
        q = matcher.to_query(sq, cfg)
        res = timed_execute(q, store, cfg, repeats)
        start = time.perf_counter()
        if sq.negative:
            rr = 1.0 if not res.answers else 0.0
        else:
            rr = evaluate_rank(res, correctness(sq, gt))
        res.evaluation_ms = (time.perf_counter() - start) * 1000.0
        out.append(QueryOutcome(
            sq.qid, engine, q, rr, len(res.answers), len(res.keyframes()), len(res.object_ids()),
            res.retrieval_ms, res.evaluation_ms, sq.negative,
        ))
    return out


def summarize(
    engine: str,
    store: SpatialTemporalStore,
    gt: GroundTruth,
    suite: list[SuiteQuery],
    outcomes: list[QueryOutcome],
    db_size_bytes: int = 0,
    processing_ms: float = 0.0,
    detections: int = 0,
) -> MetricsReport:
    rep = MetricsReport(engine)
    by_cell: dict[tuple[str, str], list[QueryOutcome]] = defaultdict(list)
    sq_by_id = {sq.qid: sq for sq in suite}
    for o in outcomes:
        sq = sq_by_id[o.qid]
        if not sq.negative:
            by_cell[(sq.kind.value, sq.precision.value)].append(o)
    for key, outs in sorted(by_cell.items()):
        n = len(outs)
        rep.cells[key] = CellMetrics(
            n_queries=n,
            miss_rate=sum(o.rr == 0.0 for o in outs) / n,
            mean_frames_returned=sum(o.n_frames for o in outs) / n,
            mean_object_ids=sum(o.n_object_ids for o in outs) / n,
            mrr_at_50=sum(o.rr for o in outs) / n,
            mean_retrieval_ms=sum(o.retrieval_ms for o in outs) / n,
            median_retrieval_ms=statistics.median(o.retrieval_ms for o in outs),
            total_evaluation_ms=sum(o.evaluation_ms for o in outs),
        )
    for p in PRECISIONS:
        outs = [o for (k, pp), os_ in by_cell.items() if pp == p.value for o in os_]
        if outs:
            rep.mean_frames_by_precision[p.value] = sum(o.n_frames for o in outs) / len(outs)
            rep.mrr_by_precision[p.value] = sum(o.rr for o in outs) / len(outs)
    negs = [o for o in outcomes if o.negative]
    rep.negative_accuracy = sum(o.rr for o in negs) / len(negs) if negs else 1.0
    rep.mean_accuracy_pct = 100.0 * sum(o.rr > 0 for o in outcomes) / len(outcomes) if outcomes else 0.0
    dups = duplicates_per_object(store, gt)
    if dups:
        rep.duplicates_per_object = (
            float(np.mean(dups)), float(np.std(dups)), int(max(dups))
        )
    rep.gt_objects_found = len(dups)
    rep.unique_object_ids = store.oic_count
    rep.stc_records = store.stc_count
    rep.detections = detections
    rep.db_size_bytes = db_size_bytes
    rep.total_processing_ms = processing_ms
    hours = max(1, int(math.ceil(gt.spec.duration_ms / 3_600_000)))
    rep.insertions_per_hour = tuple(store.insertions_per_hour(gt.spec.t0_ms, hours))
    errs = position_errors(store, gt)
    if errs:
        rep.q3_position_error_rate = sum(e > store.cfg.d_thresh_m for e in errs) / len(errs)
    rep.q3_positions_conflated = rep.q3_position_error_rate > 0.0
    return rep


@dataclass
class BenchmarkRun:
    reports: dict[str, MetricsReport]
    stores: dict[str, SpatialTemporalStore]
    outcomes: dict[str, list[QueryOutcome]]
    suite: list[SuiteQuery]


def run_benchmark(
    frames: list[SensorFrame],
    gt: GroundTruth,
    suite: list[SuiteQuery],
    engines: Iterable[str] = ENGINES,
    cfg: Optional[EngineConfig] = None,
    persist_dir=None,
    repeats: int = TIMING_REPEATS,
) -> BenchmarkRun:
    """Build each engine's store, run the suite against it and summarize.

    Engines run one after another. When ``persist_dir`` is given, each
    store is written to ``persist_dir/<engine>`` and its size reported.
    """
    from pathlib import Path

    cfg = cfg or EngineConfig(map_bounds=gt.spec.map_bounds)
    n_det = sum(len(f.detections) for f in frames)
    reports, stores, outcomes = {}, {}, {}
    for engine in engines:
        start = time.perf_counter()
        store = build_store(engine, frames, cfg, gt.cam)
        processing_ms = (time.perf_counter() - start) * 1000.0
        size = 0
        if persist_dir is not None:
            hours = max(1, int(math.ceil(gt.spec.duration_ms / 3_600_000)))
            store.meta.update({"engine": engine, "seed": gt.spec.seed, "t_start": gt.spec.t0_ms, "hours": hours})
            size = store.persist(Path(persist_dir) / engine)
        outs = run_queries(engine, store, gt, suite, cfg, repeats)
        reports[engine] = summarize(engine, store, gt, suite, outs, size, processing_ms, n_det)
        stores[engine] = store
        outcomes[engine] = outs
    return BenchmarkRun(reports, stores, outcomes, suite)


# -- detector-noise sweep --------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    fpr: float
    engine: str
    mrr: float
    miss_rate: float


def attribute_suite(gt: GroundTruth) -> list[SuiteQuery]:
    """Q1 with category and colour-like attribute for every gt object."""
    return [
        SuiteQuery(i, Kind.Q1, Precision.CATEGORY, (o.gt_id,), (o.category,), attribute=True)
        for i, o in enumerate(gt.objects)
    ]


def fpr_sweep(
    levels: Iterable[float],
    world: list[GroundTruthObject],
    spec: WorldSpec,
    cfg: Optional[EngineConfig] = None,
    cam: Optional[CameraModel] = None,
    fnr: float = 0.05,
    engines: Iterable[str] = ("d3a", "naive"),
) -> list[SweepRow]:
    """Re-simulate the same world at each false-positive rate and score Q1."""
    levels = list(levels)
    if levels != sorted(levels):
        raise ValueError("fpr levels must be ascending")
    cam = cam or CameraModel()
    cfg = cfg or EngineConfig(map_bounds=spec.map_bounds)
    n_emb = max(o.true_embedding_index for o in world) + 1
    rows = []
    for fpr in levels:
        stream = gen_patrol(world, spec, cam, SynthDetectorParams(n_emb, fpr, fnr, spec.seed))
        gt = GroundTruth.from_stream(stream)
        suite = attribute_suite(gt)
        for engine in engines:
            store = build_store(engine, stream.frames, cfg, cam)
            outs = run_queries(engine, store, gt, suite, cfg, repeats=1)
            n = len(outs)
            rows.append(SweepRow(
                fpr, engine, sum(o.rr for o in outs) / n, sum(o.rr == 0.0 for o in outs) / n
            ))
    return rows
