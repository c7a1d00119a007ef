"""The persistent two-collection representation (OIc + STc).

OIc holds object identities, STc holds where and when each identity was
seen. Both live in memory behind a small set of indexes and are persisted as
line-delimited JSON:

    <dir>/manifest.json
    <dir>/oic.jsonl
    <dir>/stc.jsonl
"""

from __future__ import annotations

import bisect
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import EngineConfig, KeyframeRef, Point, unit

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_TIME_BLOCK = 64

Region = tuple[float, float, float, float]


class StoreFormatError(ValueError):
    """Raised when a persisted store cannot be parsed."""


class IntegrityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OicRecord:
    object_id: int
    category: str
    embedding: np.ndarray  # unit direction of the weighted mean
    mean_norm: float  # norm of the (unnormalized) weighted mean embedding
    weight: float
    inserted_t: int

    @property
    def mean_embedding(self) -> np.ndarray:
        return self.embedding * self.mean_norm

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "embedding": [float(v) for v in self.embedding],
            "mean_norm": float(self.mean_norm),
            "weight": float(self.weight),
            "inserted_t": int(self.inserted_t),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OicRecord":
        return cls(
            object_id=int(d["object_id"]),
            category=str(d["category"]),
            embedding=np.asarray(d["embedding"], dtype=float),
            mean_norm=float(d["mean_norm"]),
            weight=float(d["weight"]),
            inserted_t=int(d["inserted_t"]),
        )


@dataclass(frozen=True)
class StcRecord:
    stc_id: int
    object_id: int
    position: Point
    t_first: int
    t_last: int
    keyframe: KeyframeRef
    obs_weight: float
    inserted_t: int

    def to_dict(self) -> dict:
        return {
            "stc_id": self.stc_id,
            "object_id": self.object_id,
            "position": [float(self.position[0]), float(self.position[1])],
            "t_first": int(self.t_first),
            "t_last": int(self.t_last),
            "keyframe": self.keyframe.to_dict(),
            "obs_weight": float(self.obs_weight),
            "inserted_t": int(self.inserted_t),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StcRecord":
        return cls(
            stc_id=int(d["stc_id"]),
            object_id=int(d["object_id"]),
            position=(float(d["position"][0]), float(d["position"][1])),
            t_first=int(d["t_first"]),
            t_last=int(d["t_last"]),
            keyframe=KeyframeRef.from_dict(d["keyframe"]),
            obs_weight=float(d["obs_weight"]),
            inserted_t=int(d["inserted_t"]),
        )


@dataclass(frozen=True)
class StoreStats:
    oic_count: int
    stc_count: int
    insertions_per_hour: tuple[int, ...]
    bytes_on_disk: Optional[int] = None

    @property
    def entry_count(self) -> int:
        return self.oic_count + self.stc_count

    def to_dict(self) -> dict:
        return {
            "oic_count": self.oic_count,
            "stc_count": self.stc_count,
            "insertions_per_hour": list(self.insertions_per_hour),
            "bytes_on_disk": self.bytes_on_disk,
        }


def _in_region(p: Point, region: Region) -> bool:
    x0, y0, x1, y1 = region
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def _overlaps(rec: StcRecord, t0: int, t1: int) -> bool:
    return rec.t_first <= t1 and rec.t_last >= t0


class SpatialTemporalStore:
    """Embedded OIc/STc store with ObjectID, category, time and grid indexes.

    The store has a single writer. Indexes that depend on mutable fields are
    rebuilt lazily on the first read after a write, so a reader always sees
    the state as of the last completed write.
    """

    def __init__(self, cfg: Optional[EngineConfig] = None, meta: Optional[dict] = None):
        self.cfg = cfg or EngineConfig()
        self.meta = dict(meta or {})
        self.cell = self.cfg.d_thresh_m
        self.next_object_id = 1
        self._oic: dict[int, OicRecord] = {}
        self._stc: list[StcRecord] = []
        self._by_object: dict[int, list[int]] = {}
        self._by_category: dict[str, list[int]] = {}
        self._grid: dict[tuple[int, int], set[int]] = {}
        self._cat_matrix: dict[str, tuple[list[int], np.ndarray]] = {}
        self._time_dirty = True
        self._time_keys: list[int] = []
        self._time_ids: list[int] = []
        self._block_max: list[int] = []

    # -- sizes -------------------------------------------------------------

    @property
    def oic_count(self) -> int:
        return len(self._oic)

    @property
    def stc_count(self) -> int:
        return len(self._stc)

    def __len__(self) -> int:
        return self.oic_count + self.stc_count

    def oic_records(self) -> list[OicRecord]:
        return list(self._oic.values())

    def stc_records(self) -> list[StcRecord]:
        return list(self._stc)

    def get_object(self, object_id: int) -> Optional[OicRecord]:
        return self._oic.get(object_id)

    def get_stc(self, stc_id: int) -> StcRecord:
        return self._stc[stc_id]

    def records_of(self, object_id: int) -> list[StcRecord]:
        return [self._stc[i] for i in self._by_object.get(object_id, ())]

    def object_ids(self) -> list[int]:
        return list(self._oic)

    def ids_by_category(self, category: str) -> list[int]:
        return list(self._by_category.get(category, ()))

    def categories(self) -> list[str]:
        return sorted(self._by_category)

    # -- writes ------------------------------------------------------------

    def _cell_of(self, p: Point) -> tuple[int, int]:
        return (math.floor(p[0] / self.cell), math.floor(p[1] / self.cell))

    def insert_object(self, category: str, mean_embedding: np.ndarray, weight: float, t: int) -> int:
        oid = self.next_object_id
        self.next_object_id += 1
        mean = np.asarray(mean_embedding, dtype=float)
        norm = float(np.linalg.norm(mean))
        self._oic[oid] = OicRecord(oid, category, unit(mean), norm, float(weight), int(t))
        self._by_category.setdefault(category, []).append(oid)
        self._by_object[oid] = []
        self._cat_matrix.pop(category, None)
        return oid

    def update_object(self, object_id: int, mean_embedding: np.ndarray, weight: float) -> None:
        rec = self._oic[object_id]
        if weight < rec.weight:
            raise IntegrityError(f"object {object_id}: weight may not decrease")
        mean = np.asarray(mean_embedding, dtype=float)
        self._oic[object_id] = replace(
            rec, embedding=unit(mean), mean_norm=float(np.linalg.norm(mean)), weight=float(weight)
        )
        self._cat_matrix.pop(rec.category, None)

    def insert_stc(
        self,
        object_id: int,
        position: Point,
        t_first: int,
        t_last: int,
        keyframe: KeyframeRef,
        obs_weight: float,
        t: int,
    ) -> int:
        if object_id not in self._oic:
            raise IntegrityError(f"STc record for unknown object {object_id}")
        if t_first > t_last:
            raise ValueError("t_first must not exceed t_last")
        sid = len(self._stc)
        pos = (float(position[0]), float(position[1]))
        self._stc.append(StcRecord(sid, object_id, pos, int(t_first), int(t_last), keyframe, float(obs_weight), int(t)))
        self._by_object[object_id].append(sid)
        self._grid.setdefault(self._cell_of(pos), set()).add(sid)
        self._time_dirty = True
        return sid

    def update_stc(self, stc_id: int, **changes) -> None:
        old = self._stc[stc_id]
        if "position" in changes:
            changes["position"] = (float(changes["position"][0]), float(changes["position"][1]))
        new = replace(old, **changes)
        if new.t_first > new.t_last:
            raise ValueError("t_first must not exceed t_last")
        self._stc[stc_id] = new
        old_cell, new_cell = self._cell_of(old.position), self._cell_of(new.position)
        if old_cell != new_cell:
            self._grid[old_cell].discard(stc_id)
            if not self._grid[old_cell]:
                del self._grid[old_cell]
            self._grid.setdefault(new_cell, set()).add(stc_id)
        if (old.t_first, old.t_last) != (new.t_first, new.t_last):
            self._time_dirty = True

    # -- reads -------------------------------------------------------------

    def _category_matrix(self, category: str) -> tuple[list[int], np.ndarray]:
        cached = self._cat_matrix.get(category)
        if cached is None:
            ids = self._by_category.get(category, [])
            mat = np.array([self._oic[i].embedding for i in ids]) if ids else np.zeros((0, 0))
            cached = (list(ids), mat)
            self._cat_matrix[category] = cached
        return cached

    def oic_find_similar(
        self, embedding: np.ndarray, category: Optional[str], min_cos_sim: float
    ) -> list[tuple[OicRecord, float]]:
        """Records with cosine similarity >= ``min_cos_sim``, best first.

        ``category=None`` searches every category. Ties go to the smaller
        ObjectID.
        """
        emb = np.asarray(embedding, dtype=float)
        norm = float(np.linalg.norm(emb))
        if norm == 0.0:
            return []
        emb = emb / norm
        cats = [category] if category is not None else self.categories()
        hits = []
        for cat in cats:
            ids, mat = self._category_matrix(cat)
            if not ids:
                continue
            if mat.shape[1] != emb.shape[0]:
                raise ValueError(f"embedding dimension mismatch: {emb.shape[0]} vs {mat.shape[1]}")
            sims = mat @ emb
            for oid, s in zip(ids, sims.tolist()):
                if s >= min_cos_sim:
                    hits.append((self._oic[oid], s))
        hits.sort(key=lambda h: (-h[1], h[0].object_id))
        return hits

    def _rebuild_time_index(self) -> None:
        order = sorted(range(len(self._stc)), key=lambda i: (self._stc[i].t_first, i))
        self._time_ids = order
        self._time_keys = [self._stc[i].t_first for i in order]
        self._block_max = [
            max(self._stc[i].t_last for i in order[b : b + _TIME_BLOCK]) for b in range(0, len(order), _TIME_BLOCK)
        ]
        self._time_dirty = False

    def _time_candidates(self, t0: int, t1: int) -> list[int]:
        if self._time_dirty:
            self._rebuild_time_index()
        end = bisect.bisect_right(self._time_keys, t1)
        out = []
        for b, bmax in enumerate(self._block_max):
            lo = b * _TIME_BLOCK
            if lo >= end:
                break
            if bmax < t0:
                continue
            for k in range(lo, min(lo + _TIME_BLOCK, end)):
                sid = self._time_ids[k]
                if self._stc[sid].t_last >= t0:
                    out.append(sid)
        return out

    def _region_candidates(self, region: Region) -> list[int]:
        x0, y0, x1, y1 = region
        cx0, cy0 = self._cell_of((x0, y0))
        cx1, cy1 = self._cell_of((x1, y1))
        if (cx1 - cx0 + 1) * (cy1 - cy0 + 1) > len(self._grid):
            cells = [c for c in self._grid if cx0 <= c[0] <= cx1 and cy0 <= c[1] <= cy1]
        else:
            cells = [(i, j) for i in range(cx0, cx1 + 1) for j in range(cy0, cy1 + 1)]
        out = []
        for c in cells:
            out.extend(self._grid.get(c, ()))
        return out

    def stc_find(
        self,
        object_ids: Optional[Iterable[int]] = None,
        time_range: Optional[tuple[int, int]] = None,
        region: Optional[Region] = None,
    ) -> list[StcRecord]:
        """STc records matching every given predicate.

        ``object_ids=None`` means no ObjectID restriction. Time ranges are
        closed and match any record whose interval intersects them. Results
        are ordered by ``t_first``, then ObjectID, then record id.
        """
        if time_range is not None and time_range[0] > time_range[1]:
            raise ValueError(f"invalid time range {time_range}")
        if object_ids is not None:
            ids = set(object_ids)
            cands = [sid for oid in ids for sid in self._by_object.get(oid, ())]
        elif time_range is not None:
            ids = None
            cands = self._time_candidates(*time_range)
        elif region is not None:
            ids = None
            cands = self._region_candidates(region)
        else:
            ids = None
            cands = range(len(self._stc))
        out = []
        for sid in cands:
            rec = self._stc[sid]
            if ids is not None and rec.object_id not in ids:
                continue
            if time_range is not None and not _overlaps(rec, *time_range):
                continue
            if region is not None and not _in_region(rec.position, region):
                continue
            out.append(rec)
        out.sort(key=lambda r: (r.t_first, r.object_id, r.stc_id))
        return out

    # -- integrity & stats -------------------------------------------------

    def check_integrity(self) -> None:
        for rec in self._stc:
            if rec.object_id not in self._oic:
                raise IntegrityError(f"STc {rec.stc_id} references missing object {rec.object_id}")
            if rec.t_first > rec.t_last:
                raise IntegrityError(f"STc {rec.stc_id} has t_first > t_last")
        for oid, rec in self._oic.items():
            if not self._by_object.get(oid):
                raise IntegrityError(f"object {oid} has no STc record")
            if abs(float(np.linalg.norm(rec.embedding)) - 1.0) > 1e-6:
                raise IntegrityError(f"object {oid} embedding is not unit norm")

    def insertion_times(self) -> list[int]:
        return sorted([r.inserted_t for r in self._oic.values()] + [r.inserted_t for r in self._stc])

    def insertions_per_hour(self, t_start: int, hours: int) -> list[int]:
        """Cumulative insertions (OIc + STc) at the end of each hour."""
        times = self.insertion_times()
        return [bisect.bisect_right(times, t_start + h * 3_600_000) for h in range(1, hours + 1)]

    def stats(self, t_start: Optional[int] = None, hours: int = 0, directory=None) -> StoreStats:
        series = tuple(self.insertions_per_hour(t_start, hours)) if t_start is not None else ()
        size = None
        if directory is not None:
            size = sum(os.path.getsize(Path(directory) / n) for n in ("manifest.json", "oic.jsonl", "stc.jsonl"))
        return StoreStats(self.oic_count, self.stc_count, series, size)

    # -- persistence -------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "config": self.cfg.to_dict(),
            "counters": {
                "next_object_id": self.next_object_id,
                "oic_count": self.oic_count,
                "stc_count": self.stc_count,
            },
            "meta": self.meta,
        }

    def persist(self, directory) -> int:
        """Write the store and return the number of bytes on disk."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "oic.jsonl", "w") as fh:
            for rec in self._oic.values():
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        with open(d / "stc.jsonl", "w") as fh:
            for rec in self._stc:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        with open(d / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        return sum(os.path.getsize(d / n) for n in ("manifest.json", "oic.jsonl", "stc.jsonl"))

    @classmethod
    def load(cls, directory) -> "SpatialTemporalStore":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except json.JSONDecodeError as exc:
            raise StoreFormatError(f"{d / 'manifest.json'}: {exc}") from exc
        if manifest.get("schema") != SCHEMA_VERSION:
            raise StoreFormatError(f"unsupported schema {manifest.get('schema')!r}")
        store = cls(EngineConfig.from_dict(manifest["config"]), manifest.get("meta"))
        for row in _read_jsonl(d / "oic.jsonl"):
            rec = OicRecord.from_dict(row)
            store._oic[rec.object_id] = rec
            store._by_category.setdefault(rec.category, []).append(rec.object_id)
            store._by_object[rec.object_id] = []
        for row in _read_jsonl(d / "stc.jsonl"):
            rec = StcRecord.from_dict(row)
            if rec.stc_id != len(store._stc):
                raise StoreFormatError(f"stc.jsonl: non-sequential stc_id {rec.stc_id}")
            if rec.object_id not in store._oic:
                raise StoreFormatError(f"stc.jsonl: record {rec.stc_id} references missing object {rec.object_id}")
            store._stc.append(rec)
            store._by_object[rec.object_id].append(rec.stc_id)
            store._grid.setdefault(store._cell_of(rec.position), set()).add(rec.stc_id)
        store.next_object_id = int(manifest["counters"]["next_object_id"])
        store._time_dirty = True
        return store


def _read_jsonl(path: Path) -> list[dict]:
    """Parse a JSONL file; a torn final line is dropped with a warning."""
    raw = path.read_text()
    lines = raw.split("\n")
    complete = raw.endswith("\n") or raw == ""
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if lineno == len(lines) and not complete:
                logger.warning("%s: truncating partial trailing line %d", path, lineno)
                break
            raise StoreFormatError(f"{path}:{lineno}: {exc.msg}") from exc
    return rows
