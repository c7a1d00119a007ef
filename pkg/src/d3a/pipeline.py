"""Three-tier online association: window clustering, short-term memory, store merge."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from itertools import count
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .clustering import NOISE, dbscan
from .core import (
    INSTANCE_ID_BASE,
    ClusterAggregate,
    EngineConfig,
    KeyframeRef,
    ObjectObservation,
    SensorFrame,
    aggregate_observations,
    better_keyframe,
    euclid,
    merge_aggregates,
    weighted_mean,
)
from .perception import CameraModel, project_to_world
from .store import SpatialTemporalStore, StcRecord

logger = logging.getLogger(__name__)


def observations_from_frame(frame: SensorFrame, cam: CameraModel, cfg: EngineConfig) -> list[ObjectObservation]:
    """Project every detection of a frame into the map, clamping to the map bounds."""
    x0, y0, x1, y1 = cfg.map_bounds
    out = []
    for det in frame.detections:
        wx, wy = project_to_world(det, frame.pose, cam)
        cx, cy = min(max(wx, x0), x1), min(max(wy, y0), y1)
        out.append(
            ObjectObservation(
                frame_id=frame.frame_id,
                t=frame.t,
                category=det.category,
                prob=det.prob,
                bbox=det.bbox,
                pose=frame.pose,
                embedding=det.embedding,
                world_pos=(cx, cy),
                clamped=(cx, cy) != (wx, wy),
            )
        )
    return out


class SlidingWindow:
    """FIFO of per-frame observation lists, at most ``maxlen`` frames."""

    def __init__(self, maxlen: int):
        self.maxlen = maxlen
        self.frames: deque[tuple[int, list[ObjectObservation]]] = deque(maxlen=maxlen)

    def push(self, t: int, observations: list[ObjectObservation]) -> None:
        if self.frames and t < self.frames[-1][0]:
            raise ValueError(f"frame time {t} precedes window tail {self.frames[-1][0]}")
        self.frames.append((t, observations))

    def observations(self) -> list[ObjectObservation]:
        return [o for _, obs in self.frames for o in obs]

    def __len__(self) -> int:
        return len(self.frames)


def pairwise_tier1(obs: list[ObjectObservation], cfg: EngineConfig) -> np.ndarray:
    """Distance matrix for one category partition.

    Spatial mode uses the combined distance with a hard gate: pairs at least
    ``d_thresh_m`` apart are never neighbours. Non-spatial mode uses plain
    cosine distance.
    """
    emb = np.array([o.embedding for o in obs])
    cos_d = 1.0 - emb @ emb.T
    if not cfg.spatial:
        return np.clip(cos_d, 0.0, None)
    pos = np.array([o.world_pos for o in obs])
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    mat = np.clip(0.5 * cos_d + 0.5 * dist / cfg.map_diag_m, 0.0, None)
    mat[dist >= cfg.d_thresh_m] = np.inf
    return mat


def tier1_cluster(window: SlidingWindow, cfg: EngineConfig, ids: Iterable[int]) -> dict[int, ClusterAggregate]:
    """Cluster a window and aggregate each non-noise cluster.

    ``ids`` supplies fresh instance ids; it is consumed in cluster order.
    """
    obs = window.observations()
    by_cat: dict[str, list[ObjectObservation]] = {}
    for o in obs:
        by_cat.setdefault(o.category, []).append(o)
    ids = iter(ids)
    batch: dict[int, ClusterAggregate] = {}
    for cat in sorted(by_cat):
        part = by_cat[cat]
        labels = dbscan(part, pairwise_tier1(part, cfg), cfg.dbscan_eps, cfg.dbscan_min_pts)
        groups: dict[int, list[ObjectObservation]] = {}
        for o, lab in zip(part, labels):
            if lab != NOISE:
                groups.setdefault(lab, []).append(o)
        for lab in sorted(groups):
            iid = next(ids)
            batch[iid] = aggregate_observations(iid, groups[lab])
    return batch


@dataclass
class StmEntry:
    aggregate: ClusterAggregate
    last_viewed_t: int


class ShortTermMemory:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict[int, StmEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: int) -> bool:
        return key in self.entries

    def lrv_key(self) -> int:
        return min(self.entries, key=lambda k: (self.entries[k].last_viewed_t, k))

    def pop_lrv(self) -> ClusterAggregate:
        return self.entries.pop(self.lrv_key()).aggregate

    def insert(self, agg: ClusterAggregate) -> list[ClusterAggregate]:
        evicted = []
        while len(self.entries) >= self.capacity:
            evicted.append(self.pop_lrv())
        self.entries[agg.instance_id] = StmEntry(agg, agg.t_last)
        return evicted

    def near_ids(self, agg: ClusterAggregate, cfg: EngineConfig) -> list[tuple[int, float]]:
        """Top-k same-category entries by cosine similarity above the threshold."""
        keys = [k for k, e in self.entries.items() if e.aggregate.category == agg.category]
        if not keys:
            return []
        mat = np.array([self.entries[k].aggregate.embedding for k in keys])
        sims = (mat @ agg.embedding).tolist()
        near = [(k, s) for k, s in zip(keys, sims) if s >= cfg.cos_sim_thresh]
        near.sort(key=lambda ks: (-ks[1], ks[0]))
        return near[: cfg.near_k]


def select_keyframe(a: ClusterAggregate, b: ClusterAggregate) -> KeyframeRef:
    return better_keyframe(a.keyframe, b.keyframe)


def tier2_update(
    batch: dict[int, ClusterAggregate],
    stm: ShortTermMemory,
    cfg: EngineConfig,
    log: Optional[list] = None,
) -> list[ClusterAggregate]:
    """Match a window batch against the STM and return evicted entries in order.

    Case 1 (similar and within ``d_thresh_m``) aggregates into the STM entry;
    case 2 (similar but farther) and case 3 (nothing similar) insert. Among
    the similar entries the distance test uses the spatially nearest one.
    ``log`` receives ``(case, instance_id, stm_key)`` tuples when given.
    """
    evicted: list[ClusterAggregate] = []
    for iid in sorted(batch):
        agg = batch[iid]
        near = stm.near_ids(agg, cfg)
        if near:
            if cfg.spatial:
                key, _ = min(near, key=lambda ks: (euclid(stm.entries[ks[0]].aggregate.world_pos, agg.world_pos), -ks[1], ks[0]))
                close = euclid(stm.entries[key].aggregate.world_pos, agg.world_pos) < cfg.d_thresh_m
            else:
                key, close = near[0][0], True
            if close:
                entry = stm.entries[key]
                entry.aggregate = merge_aggregates(entry.aggregate, agg)
                entry.last_viewed_t = max(entry.last_viewed_t, agg.t_last)
                if log is not None:
                    log.append((1, iid, key))
                continue
            case = 2
        else:
            case = 3
        evicted.extend(stm.insert(agg))
        if log is not None:
            log.append((case, iid, iid))
    return evicted


class MergeResult(NamedTuple):
    object_id: int
    stc_id: int
    action: str  # "new_object" | "new_location" | "aggregate"


def _intervals_overlap(a0: int, a1: int, b0: int, b1: int) -> bool:
    return a0 <= b1 and b0 <= a1


def _aggregate_into(lrv: ClusterAggregate, stc: StcRecord, store: SpatialTemporalStore) -> None:
    obj = store.get_object(stc.object_id)
    store.update_object(
        obj.object_id,
        weighted_mean(obj.mean_embedding, obj.weight, lrv.mean_embedding, lrv.weight),
        obj.weight + lrv.weight,
    )
    store.update_stc(
        stc.stc_id,
        position=weighted_mean(stc.position, stc.obs_weight, lrv.world_pos, lrv.weight),
        t_first=min(stc.t_first, lrv.t_first),
        t_last=max(stc.t_last, lrv.t_last),
        keyframe=better_keyframe(stc.keyframe, lrv.keyframe),
        obs_weight=stc.obs_weight + lrv.weight,
    )


def tier3_merge(
    lrv: ClusterAggregate, store: SpatialTemporalStore, cfg: EngineConfig, now_t: Optional[int] = None
) -> MergeResult:
    """Fold an evicted STM entry into the store.

    Similar OIc records are searched first for an STc location within
    ``d_thresh_m`` (static object: aggregate). Failing that, the most
    similar record whose locations are not occupied during the entry's time
    span gains a new location (moved object). Otherwise a new object is
    created.
    """
    now_t = lrv.t_last if now_t is None else now_t
    records = store.oic_find_similar(lrv.embedding, lrv.category, cfg.cos_sim_thresh)
    if records and not cfg.spatial:
        rec = records[0][0]
        stcs = store.records_of(rec.object_id)
        target = min(stcs, key=lambda s: (euclid(s.position, lrv.world_pos), s.stc_id))
        _aggregate_into(lrv, target, store)
        return MergeResult(rec.object_id, target.stc_id, "aggregate")

    # normalized distances compare the same way as raw ones
    thresh = cfg.d_thresh_m / cfg.map_diag_m
    best = None
    for rank, (rec, _) in enumerate(records):
        for s in store.records_of(rec.object_id):
            d = euclid(s.position, lrv.world_pos) / cfg.map_diag_m
            if d < thresh:
                cand = (d, rank, s.stc_id)
                if best is None or cand < best:
                    best = cand
    if best is not None:
        target = store.get_stc(best[2])
        _aggregate_into(lrv, target, store)
        return MergeResult(target.object_id, target.stc_id, "aggregate")

    for rec, _ in records:
        stcs = store.records_of(rec.object_id)
        if any(_intervals_overlap(s.t_first, s.t_last, lrv.t_first, lrv.t_last) for s in stcs):
            continue
        obj = store.get_object(rec.object_id)
        store.update_object(
            obj.object_id,
            weighted_mean(obj.mean_embedding, obj.weight, lrv.mean_embedding, lrv.weight),
            obj.weight + lrv.weight,
        )
        sid = store.insert_stc(rec.object_id, lrv.world_pos, lrv.t_first, lrv.t_last, lrv.keyframe, lrv.weight, now_t)
        return MergeResult(rec.object_id, sid, "new_location")

    oid = store.insert_object(lrv.category, lrv.mean_embedding, lrv.weight, now_t)
    sid = store.insert_stc(oid, lrv.world_pos, lrv.t_first, lrv.t_last, lrv.keyframe, lrv.weight, now_t)
    return MergeResult(oid, sid, "new_object")


def flush(
    stm: ShortTermMemory,
    store: SpatialTemporalStore,
    cfg: EngineConfig,
    now_t: Optional[int] = None,
    log: Optional[list] = None,
) -> int:
    """Merge every STM entry into the store, least recently viewed first."""
    n = 0
    while stm.entries:
        lrv = stm.pop_lrv()
        res = tier3_merge(lrv, store, cfg, now_t)
        if log is not None:
            log.append((lrv, res))
        n += 1
    return n


class D3APipeline:
    """Online ingestion engine owning the window, the STM and store writes.

    Example:
        >>> pipe = D3APipeline(EngineConfig(), CameraModel())
        >>> for frame in frames:
        ...     pipe.ingest(frame)
        >>> pipe.finish()
    """

    def __init__(
        self,
        cfg: EngineConfig,
        cam: CameraModel,
        store: Optional[SpatialTemporalStore] = None,
        record_actions: bool = False,
    ):
        self.cfg = cfg
        self.cam = cam
        self.store = store if store is not None else SpatialTemporalStore(cfg)
        self.window = SlidingWindow(cfg.window_len)
        self.stm = ShortTermMemory(cfg.stm_capacity)
        self._ids = count(INSTANCE_ID_BASE)
        self._pending = 0
        self.now_t: Optional[int] = None
        self.frames_seen = 0
        self.detections_seen = 0
        self.tier2_log: Optional[list] = [] if record_actions else None
        self.merge_log: Optional[list] = [] if record_actions else None
        self.last_batch: dict[int, ClusterAggregate] = {}

    def ingest(self, frame: SensorFrame) -> list[MergeResult]:
        if self.now_t is not None and frame.t < self.now_t:
            raise ValueError(f"frame {frame.frame_id} goes back in time")
        self.now_t = frame.t
        self.frames_seen += 1
        self.detections_seen += len(frame.detections)
        self.window.push(frame.t, observations_from_frame(frame, self.cam, self.cfg))
        self._pending += 1
        if self._pending >= self.cfg.stride:
            return self._step()
        return []

    def _step(self) -> list[MergeResult]:
        self._pending = 0
        self.last_batch = tier1_cluster(self.window, self.cfg, self._ids)
        evicted = tier2_update(self.last_batch, self.stm, self.cfg, self.tier2_log)
        results = []
        for lrv in evicted:
            res = tier3_merge(lrv, self.store, self.cfg, self.now_t)
            if self.merge_log is not None:
                self.merge_log.append((lrv, res))
            results.append(res)
        return results

    def finish(self) -> int:
        if self._pending and len(self.window):
            self._step()
        return flush(self.stm, self.store, self.cfg, self.now_t, self.merge_log)

    def run(self, frames: Iterable[SensorFrame]) -> SpatialTemporalStore:
        for f in frames:
            self.ingest(f)
        self.finish()
        return self.store
