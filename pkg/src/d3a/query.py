"""Formal Q1/Q2/Q3 queries over an OIc/STc store."""

from __future__ import annotations

import bisect
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .core import EngineConfig, KeyframeRef, Point
from .store import Region, SpatialTemporalStore, StcRecord

MRR_CUTOFF = 50


class QueryValidationError(ValueError):
    """A query failed validation; ``errors`` maps field names to messages."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


class Kind(str, Enum):
    Q1 = "Q1"
    Q2 = "Q2"
    Q3 = "Q3"


class Precision(str, Enum):
    PERFECT = "Perfect"
    CATEGORY = "Category"
    ANY = "Any"


@dataclass(frozen=True, eq=False)
class TargetSpec:
    object_id: Optional[int] = None
    category: Optional[str] = None
    embedding: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        d = {}
        if self.object_id is not None:
            d["object_id"] = self.object_id
        if self.category is not None:
            d["category"] = self.category
        if self.embedding is not None:
            d["embedding"] = [float(v) for v in self.embedding]
        return d


@dataclass(frozen=True, eq=False)
class Query:
    kind: Kind
    precision: Precision
    targets: tuple[TargetSpec, ...]
    time_range: Optional[tuple[int, int]] = None
    together_window_ms: Optional[int] = None
    region: Optional[Region] = None

    def __post_init__(self):
        errors = _validate(self)
        if errors:
            raise QueryValidationError(errors)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind.value,
            "precision": self.precision.value,
            "targets": [t.to_dict() for t in self.targets],
        }
        if self.time_range is not None:
            d["time_range"] = list(self.time_range)
        if self.together_window_ms is not None:
            d["together_window_ms"] = self.together_window_ms
        if self.region is not None:
            d["region"] = list(self.region)
        return d

    @classmethod
    def from_dict(cls, d) -> "Query":
        """Parse the JSON query format, collecting every field error."""
        if not isinstance(d, dict):
            raise QueryValidationError({"query": "must be a JSON object"})
        errors: dict[str, str] = {}
        kind = precision = None
        try:
            kind = Kind(d.get("kind"))
        except ValueError:
            errors["kind"] = f"expected one of Q1, Q2, Q3, got {d.get('kind')!r}"
        try:
            precision = Precision(d.get("precision"))
        except ValueError:
            errors["precision"] = f"expected one of Perfect, Category, Any, got {d.get('precision')!r}"
        targets = []
        raw_targets = d.get("targets")
        if not isinstance(raw_targets, list):
            errors["targets"] = "must be a list"
            raw_targets = []
        for i, t in enumerate(raw_targets):
            if not isinstance(t, dict):
                errors[f"targets[{i}]"] = "must be an object"
                continue
            unknown = set(t) - {"object_id", "category", "embedding"}
            if unknown:
                errors[f"targets[{i}]"] = f"unknown fields {sorted(unknown)}"
                continue
            oid = t.get("object_id")
            if oid is not None and (not isinstance(oid, int) or isinstance(oid, bool)):
                errors[f"targets[{i}].object_id"] = "must be an integer"
                oid = None
            cat = t.get("category")
            if cat is not None and not isinstance(cat, str):
                errors[f"targets[{i}].category"] = "must be a string"
                cat = None
            emb = t.get("embedding")
            if emb is not None:
                try:
                    emb = np.asarray(emb, dtype=float)
                    if emb.ndim != 1 or not np.linalg.norm(emb) > 0:
                        raise ValueError
                except (TypeError, ValueError):
                    errors[f"targets[{i}].embedding"] = "must be a non-zero numeric array"
                    emb = None
            targets.append(TargetSpec(oid, cat, emb))
        time_range = d.get("time_range")
        if time_range is not None:
            if (
                not isinstance(time_range, list)
                or len(time_range) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in time_range)
            ):
                errors["time_range"] = "must be [t0, t1] integer milliseconds"
                time_range = None
            else:
                time_range = (time_range[0], time_range[1])
        window = d.get("together_window_ms")
        if window is not None and (not isinstance(window, int) or isinstance(window, bool) or window <= 0):
            errors["together_window_ms"] = "must be a positive integer"
        region = d.get("region")
        if region is not None:
            if not isinstance(region, list) or len(region) != 4:
                errors["region"] = "must be [x0, y0, x1, y1]"
                region = None
            else:
                region = tuple(float(v) for v in region)
        if errors:
            raise QueryValidationError(errors)
        return cls(kind, precision, tuple(targets), time_range, window, region)


def _validate(q: Query) -> dict[str, str]:
    errors = {}
    need = 2 if q.kind is Kind.Q2 else 1
    if len(q.targets) != need:
        errors["targets"] = f"{q.kind.value} needs exactly {need} target(s), got {len(q.targets)}"
    if q.kind is Kind.Q3:
        if q.time_range is None:
            errors["time_range"] = "Q3 requires a time_range"
        elif q.time_range[0] > q.time_range[1]:
            errors["time_range"] = f"t0 > t1 in {list(q.time_range)}"
    elif q.time_range is not None and q.time_range[0] > q.time_range[1]:
        errors["time_range"] = f"t0 > t1 in {list(q.time_range)}"
    for i, t in enumerate(q.targets):
        if q.precision is Precision.PERFECT and t.object_id is None:
            errors[f"targets[{i}].object_id"] = "required at Perfect precision"
        if q.precision is Precision.CATEGORY and t.category is None:
            errors[f"targets[{i}].category"] = "required at Category precision"
    if q.region is not None and (q.region[0] > q.region[2] or q.region[1] > q.region[3]):
        errors["region"] = "x0 > x1 or y0 > y1"
    return errors


class Answer(NamedTuple):
    keyframe: KeyframeRef
    object_id: int
    position: Point
    t_first: int
    t_last: int
    score: float
    stc_id: int
    # second record of a Q2 pair
    partner: Optional["Answer"] = None
    interval: Optional[tuple[int, int]] = None

    def to_dict(self) -> dict:
        d = {
            "keyframe": self.keyframe.to_dict(),
            "object_id": self.object_id,
            "position": list(self.position),
            "t_first": self.t_first,
            "t_last": self.t_last,
            "score": self.score,
            "stc_id": self.stc_id,
        }
        if self.partner is not None:
            d["partner"] = self.partner.to_dict()
            d["interval"] = list(self.interval)
        return d


@dataclass
class QueryResult:
    answers: list[Answer] = field(default_factory=list)
    retrieval_ms: float = 0.0
    evaluation_ms: float = 0.0

    def __len__(self) -> int:
        return len(self.answers)

    def keyframes(self) -> set[tuple[int, tuple]]:
        """Distinct keyframes returned, as (frame_id, bbox)."""
        out = set()
        for a in self.answers:
            out.add((a.keyframe.frame_id, tuple(a.keyframe.bbox)))
            if a.partner is not None:
                out.add((a.partner.keyframe.frame_id, tuple(a.partner.keyframe.bbox)))
        return out

    def frame_ids(self) -> set[int]:
        return {f for f, _ in self.keyframes()}

    def object_ids(self) -> set[int]:
        out = set()
        for a in self.answers:
            out.add(a.object_id)
            if a.partner is not None:
                out.add(a.partner.object_id)
        return out

    def to_dict(self) -> dict:
        return {
            "answers": [a.to_dict() for a in self.answers],
            "retrieval_ms": self.retrieval_ms,
            "evaluation_ms": self.evaluation_ms,
        }


def resolve_targets(
    spec: TargetSpec, precision: Precision, store: SpatialTemporalStore, cfg: Optional[EngineConfig] = None
) -> set[int]:
    """Map a target to a set of ObjectIDs at the given precision.

    At Category precision an attribute embedding, when present, narrows the
    category to records at least ``cos_sim_thresh`` similar to it.
    """
    precision = Precision(precision)
    if precision is Precision.PERFECT:
        return {spec.object_id} if store.get_object(spec.object_id) is not None else set()
    if precision is Precision.CATEGORY:
        if spec.embedding is not None:
            thresh = (cfg or store.cfg).cos_sim_thresh
            return {r.object_id for r, _ in store.oic_find_similar(spec.embedding, spec.category, thresh)}
        return set(store.ids_by_category(spec.category))
    return set(store.object_ids())


def _score(rec: StcRecord, store: SpatialTemporalStore) -> float:
    return store.get_object(rec.object_id).weight * rec.keyframe.prob


def _answer(rec: StcRecord, score: float) -> Answer:
    return Answer(rec.keyframe, rec.object_id, rec.position, rec.t_first, rec.t_last, score, rec.stc_id)


def _ranked(records: list[StcRecord], store: SpatialTemporalStore) -> list[Answer]:
    scored = sorted(
        ((_score(r, store), r) for r in records),
        key=lambda sr: (-sr[0], sr[1].t_first, sr[1].object_id, sr[1].stc_id),
    )
    seen = set()
    out = []
    for s, r in scored:
        key = (r.object_id, r.keyframe.frame_id, r.keyframe.bbox)
        if key in seen:
            continue
        seen.add(key)
        out.append(_answer(r, s))
    return out


def answer_q1(X: Iterable[int], store: SpatialTemporalStore, region: Optional[Region] = None) -> QueryResult:
    """Every keyframe of every target object, by weight x keyframe prob."""
    X = set(X)
    if not X:
        return QueryResult()
    return QueryResult(_ranked(store.stc_find(X, region=region), store))


def answer_q3(
    X: Iterable[int], time_range: tuple[int, int], store: SpatialTemporalStore, region: Optional[Region] = None
) -> QueryResult:
    if time_range[0] > time_range[1]:
        raise ValueError(f"invalid time range {time_range}")
    X = set(X)
    if not X:
        return QueryResult()
    return QueryResult(_ranked(store.stc_find(X, time_range, region), store))


def together(a0: int, a1: int, b0: int, b1: int, window_ms: int) -> bool:
    """Intervals intersect after each is dilated by ``window_ms`` on both sides."""
    return a0 - window_ms <= b1 + window_ms and b0 - window_ms <= a1 + window_ms


def co_interval(a0: int, a1: int, b0: int, b1: int) -> tuple[int, int]:
    """Overlap of two intervals, or the gap between them when disjoint."""
    lo, hi = max(a0, b0), min(a1, b1)
    return (lo, hi) if lo <= hi else (hi, lo)


# below this many candidate pairs the plain loop beats numpy's fixed overhead
_Q2_VECTOR_MIN = 2048


def _q2_pairs_loop(A, B, a_set, b_set, score_of, window_ms):
    b_starts = [r.t_first for r in B]
    max_len = max(r.t_last - r.t_first for r in B)
    two_w = 2 * window_ms
    pairs = []
    for i, a in enumerate(A):
        lo = bisect.bisect_left(b_starts, a.t_first - two_w - max_len)
        hi = bisect.bisect_right(b_starts, a.t_last + two_w)
        for j in range(lo, hi):
            b = B[j]
            if b.object_id == a.object_id:
                continue
            if not together(a.t_first, a.t_last, b.t_first, b.t_last, window_ms):
                continue
            if b.object_id in a_set and a.object_id in b_set and (b.object_id, b.stc_id) < (a.object_id, a.stc_id):
                continue
            pairs.append((min(score_of[i, 0], score_of[j, 1]), i, j))
    pairs.sort(key=lambda p: (-p[0], A[p[1]].t_first, A[p[1]].object_id, A[p[1]].stc_id,
                              B[p[2]].object_id, B[p[2]].stc_id))
    out = []
    for sc, i, j in pairs:
        a, b = A[i], B[j]
        out.append((i, j, sc, *co_interval(a.t_first, a.t_last, b.t_first, b.t_last)))
    return out


def _q2_pairs_numpy(A, B, a_set, b_set, a_score, b_score, window_ms):
    def columns(recs):
        return (
            np.array([r.t_first for r in recs], dtype=np.int64),
            np.array([r.t_last for r in recs], dtype=np.int64),
            np.array([r.object_id for r in recs], dtype=np.int64),
            np.array([r.stc_id for r in recs], dtype=np.int64),
        )

    a0, a1, a_oid, a_sid = columns(A)
    b0, b1, b_oid, b_sid = columns(B)
    a_score, b_score = np.asarray(a_score), np.asarray(b_score)
    two_w = 2 * window_ms
    max_len = int((b1 - b0).max())
    # candidate b's per a: start times inside the widest window that can still intersect
    lo = np.searchsorted(b0, a0 - two_w - max_len, side="left")
    hi = np.searchsorted(b0, a1 + two_w, side="right")
    counts = hi - lo
    ia = np.repeat(np.arange(len(A)), counts)
    ib = np.repeat(lo - np.concatenate(([0], np.cumsum(counts)[:-1])), counts) + np.arange(int(counts.sum()))
    keep = (b_oid[ib] != a_oid[ia]) & (a0[ia] - window_ms <= b1[ib] + window_ms) & (b0[ib] - window_ms <= a1[ia] + window_ms)
    in_a = np.isin(b_oid[ib], np.fromiter(a_set, dtype=np.int64, count=len(a_set)))
    in_b = np.isin(a_oid[ia], np.fromiter(b_set, dtype=np.int64, count=len(b_set)))
    mirrored_first = (b_oid[ib] < a_oid[ia]) | ((b_oid[ib] == a_oid[ia]) & (b_sid[ib] < a_sid[ia]))
    keep &= ~(in_a & in_b & mirrored_first)
    ia, ib = ia[keep], ib[keep]
    score = np.minimum(a_score[ia], b_score[ib])
    order = np.lexsort((b_sid[ib], b_oid[ib], a_sid[ia], a_oid[ia], a0[ia], -score))
    ia, ib, score = ia[order], ib[order], score[order]
    lo_t = np.maximum(a0[ia], b0[ib])
    hi_t = np.minimum(a1[ia], b1[ib])
    # same as co_interval, column-wise
    iv_lo = np.minimum(lo_t, hi_t)
    iv_hi = np.maximum(lo_t, hi_t)
    return list(zip(ia.tolist(), ib.tolist(), score.tolist(), iv_lo.tolist(), iv_hi.tolist()))


def answer_q2(
    X_a: Iterable[int],
    X_b: Iterable[int],
    store: SpatialTemporalStore,
    cfg: Optional[EngineConfig] = None,
    window_ms: Optional[int] = None,
    region: Optional[Region] = None,
) -> QueryResult:
    """Pairs of records (one per target set, different objects) seen together.

    A pair and its mirror image are reported once, oriented so that the
    smaller (object_id, stc_id) comes first.
    """
    if window_ms is None:
        window_ms = (cfg or store.cfg).q2_together_window_ms
    X_a, X_b = set(X_a), set(X_b)
    if not X_a or not X_b:
        return QueryResult()
    A = store.stc_find(X_a, region=region)
    B = store.stc_find(X_b, region=region)
    if not A or not B:
        return QueryResult()
    B.sort(key=lambda r: (r.t_first, r.stc_id))
    a_score = [_score(r, store) for r in A]
    b_score = [_score(r, store) for r in B]
    if len(A) * len(B) < _Q2_VECTOR_MIN:
        scores = {(i, 0): v for i, v in enumerate(a_score)}
        scores.update({(j, 1): v for j, v in enumerate(b_score)})
        pairs = _q2_pairs_loop(A, B, X_a, X_b, scores, window_ms)
    else:
        pairs = _q2_pairs_numpy(A, B, X_a, X_b, a_score, b_score, window_ms)
    partners: dict[int, Answer] = {}
    answers = []
    for i, j, sc, x0, x1 in pairs:
        a = A[i]
        ans_b = partners.get(j)
        if ans_b is None:
            ans_b = partners[j] = _answer(B[j], b_score[j])
        answers.append(
            Answer(
                a.keyframe, a.object_id, a.position, a.t_first, a.t_last, sc, a.stc_id,
                partner=ans_b, interval=(x0, x1),
            )
        )
    return QueryResult(answers)


def execute(query: Query, store: SpatialTemporalStore, cfg: Optional[EngineConfig] = None) -> QueryResult:
    """Resolve targets and answer a query; ``retrieval_ms`` covers both steps."""
    cfg = cfg or store.cfg
    start = time.perf_counter()
    sets = [resolve_targets(t, query.precision, store, cfg) for t in query.targets]
    if query.kind is Kind.Q1:
        res = answer_q1(sets[0], store, query.region)
    elif query.kind is Kind.Q2:
        res = answer_q2(sets[0], sets[1], store, cfg, query.together_window_ms, query.region)
    else:
        res = answer_q3(sets[0], query.time_range, store, query.region)
    res.retrieval_ms = (time.perf_counter() - start) * 1000.0
    return res


def evaluate_rank(
    result: QueryResult, is_correct: Callable[[Answer], bool], cutoff: int = MRR_CUTOFF
) -> float:
    """Reciprocal rank of the first correct answer within ``cutoff``; 0 on a miss."""
    for i, ans in enumerate(result.answers[:cutoff]):
        if is_correct(ans):
            return 1.0 / (i + 1)
    return 0.0
