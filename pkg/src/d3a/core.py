"""Shared domain types, configuration and small numeric helpers.

Everything here is a value type. Aggregation helpers return new objects and
never mutate their inputs, so instances can be shared freely between threads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

TAU = 2.0 * math.pi
UNIT_NORM_TOL = 1e-6

# Instance ids (Tier 1/2) and ObjectIDs (store) come from disjoint ranges.
INSTANCE_ID_BASE = 1_000_000_000

BBox = tuple[float, float, float, float]
Point = tuple[float, float]


def normalize_angle(theta: float) -> float:
    """Wrap ``theta`` into ``[-pi, pi)``."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    wrapped = math.fmod(theta + math.pi, TAU)
    if wrapped < 0.0:
        wrapped += TAU
    out = wrapped - math.pi
    # fmod can land exactly on +pi after the shift for inputs like -pi - eps
    if out >= math.pi:
        out -= TAU
    return out


def unit(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not math.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return arr / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def euclid(p: Point, q: Point) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    theta: float
    t: int

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "theta": self.theta, "t": self.t}

    @classmethod
    def from_dict(cls, d: dict) -> "RobotPose":
        return cls(float(d["x"]), float(d["y"]), float(d["theta"]), int(d["t"]))


@dataclass(frozen=True, eq=False)
class RawDetection:
    category: str
    prob: float
    bbox: BBox
    embedding: np.ndarray
    depth_m: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"malformed bbox {self.bbox}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob out of [0, 1]: {self.prob}")
        if self.depth_m is not None and not self.depth_m > 0.0:
            raise ValueError(f"depth must be positive, got {self.depth_m}")
        emb = np.asarray(self.embedding, dtype=float)
        if abs(float(np.linalg.norm(emb)) - 1.0) > UNIT_NORM_TOL:
            raise ValueError("detection embedding must have unit L2 norm")
        object.__setattr__(self, "embedding", emb)

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "prob": self.prob,
            "bbox": list(self.bbox),
            "embedding": self.embedding.tolist(),
            "depth_m": self.depth_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RawDetection":
        return cls(
            category=str(d["category"]),
            prob=float(d["prob"]),
            bbox=tuple(float(v) for v in d["bbox"]),
            embedding=np.asarray(d["embedding"], dtype=float),
            depth_m=float(d["depth_m"]),
        )


@dataclass(frozen=True)
class SensorFrame:
    frame_id: int
    t: int
    pose: RobotPose
    detections: tuple[RawDetection, ...] = ()
    image_ref: Optional[str] = None

    def __post_init__(self):
        if self.pose.t != self.t:
            raise ValueError(f"frame {self.frame_id}: t={self.t} but pose.t={self.pose.t}")
        object.__setattr__(self, "detections", tuple(self.detections))

    @property
    def depth(self) -> list[float]:
        return [d.depth_m for d in self.detections]

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "t": self.t,
            "pose": self.pose.to_dict(),
            "image_ref": self.image_ref,
            "detections": [d.to_dict() for d in self.detections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorFrame":
        return cls(
            frame_id=int(d["frame_id"]),
            t=int(d["t"]),
            pose=RobotPose.from_dict(d["pose"]),
            detections=tuple(RawDetection.from_dict(x) for x in d.get("detections", [])),
            image_ref=d.get("image_ref"),
        )


@dataclass(frozen=True, eq=False)
class ObjectObservation:
    frame_id: int
    t: int
    category: str
    prob: float
    bbox: BBox
    pose: RobotPose
    embedding: np.ndarray
    world_pos: Point
    clamped: bool = False


@dataclass(frozen=True)
class KeyframeRef:
    frame_id: int
    bbox: BBox
    prob: float
    t: int

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "bbox": list(self.bbox), "prob": self.prob, "t": self.t}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeRef":
        return cls(int(d["frame_id"]), tuple(float(v) for v in d["bbox"]), float(d["prob"]), int(d["t"]))


def better_keyframe(a: KeyframeRef, b: KeyframeRef) -> KeyframeRef:
    """Higher prob wins; equal probs go to the earlier frame."""
    if a.prob != b.prob:
        return a if a.prob > b.prob else b
    return a if a.frame_id <= b.frame_id else b


@dataclass(frozen=True, eq=False)
class ClusterAggregate:
    """A unique-instance cluster.

    ``mean_embedding`` is the raw weighted mean of member unit embeddings. It
    is kept unnormalized so that folding aggregates in any order gives the
    same result; ``embedding`` is its renormalized direction.
    """

    instance_id: int
    category: str
    mean_embedding: np.ndarray
    world_pos: Point
    weight: float
    keyframe: KeyframeRef
    t_first: int
    t_last: int
    member_count: int

    @property
    def embedding(self) -> np.ndarray:
        return unit(self.mean_embedding)


def aggregate_observations(instance_id: int, members: Sequence[ObjectObservation]) -> ClusterAggregate:
    """Unit-weight average of a Tier 1 cluster."""
    if not members:
        raise ValueError("cannot aggregate an empty cluster")
    cats = {m.category for m in members}
    if len(cats) != 1:
        raise ValueError(f"cluster mixes categories: {sorted(cats)}")
    emb = np.mean([m.embedding for m in members], axis=0)
    xs = math.fsum(m.world_pos[0] for m in members) / len(members)
    ys = math.fsum(m.world_pos[1] for m in members) / len(members)
    key = None
    for m in members:
        kf = KeyframeRef(m.frame_id, m.bbox, m.prob, m.t)
        key = kf if key is None else better_keyframe(key, kf)
    return ClusterAggregate(
        instance_id=instance_id,
        category=members[0].category,
        mean_embedding=emb,
        world_pos=(xs, ys),
        weight=float(len(members)),
        keyframe=key,
        t_first=min(m.t for m in members),
        t_last=max(m.t for m in members),
        member_count=len(members),
    )


def weighted_mean(va, wa: float, vb, wb: float):
    """Weighted mean of two scalars/arrays/points with positive weights."""
    total = wa + wb
    if isinstance(va, tuple):
        return tuple((wa * a + wb * b) / total for a, b in zip(va, vb))
    return (wa * np.asarray(va) + wb * np.asarray(vb)) / total


def merge_aggregates(a: ClusterAggregate, b: ClusterAggregate, keep_id: Optional[int] = None) -> ClusterAggregate:
    """Weight-carrying merge of two aggregates (keeps ``a``'s id by default)."""
    if a.category != b.category:
        raise ValueError("cannot merge aggregates of different categories")
    return ClusterAggregate(
        instance_id=a.instance_id if keep_id is None else keep_id,
        category=a.category,
        mean_embedding=weighted_mean(a.mean_embedding, a.weight, b.mean_embedding, b.weight),
        world_pos=weighted_mean(a.world_pos, a.weight, b.world_pos, b.weight),
        weight=a.weight + b.weight,
        keyframe=better_keyframe(a.keyframe, b.keyframe),
        t_first=min(a.t_first, b.t_first),
        t_last=max(a.t_last, b.t_last),
        member_count=a.member_count + b.member_count,
    )


DEFAULT_MAP_BOUNDS = (0.0, 0.0, 20.0, 12.0)


@dataclass(frozen=True)
class EngineConfig:
    d_thresh_m: float = 0.5
    window_len: int = 10
    cos_sim_thresh: float = 0.4
    stm_capacity: int = 400
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 2
    map_bounds: tuple[float, float, float, float] = DEFAULT_MAP_BOUNDS
    map_diag_m: Optional[float] = None
    q2_together_window_ms: int = 60_000
    rng_seed: int = 0
    stride: int = 1
    near_k: int = 5
    embedding_dim: int = 64
    spatial: bool = True

    def __post_init__(self):
        if self.map_diag_m is None:
            x0, y0, x1, y1 = self.map_bounds
            object.__setattr__(self, "map_diag_m", math.hypot(x1 - x0, y1 - y0))
        for name in ("d_thresh_m", "cos_sim_thresh", "dbscan_eps", "map_diag_m", "q2_together_window_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.stm_capacity < 1:
            raise ValueError("stm_capacity must be >= 1")
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.dbscan_min_pts < 1 or self.stride < 1 or self.near_k < 1:
            raise ValueError("dbscan_min_pts, stride and near_k must be >= 1")

    def replace(self, **changes) -> "EngineConfig":
        if "map_bounds" in changes and "map_diag_m" not in changes:
            changes["map_diag_m"] = None
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_bounds"] = list(self.map_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = dict(d)
        if "map_bounds" in d:
            d["map_bounds"] = tuple(float(v) for v in d["map_bounds"])
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


def combined_distance(a: ObjectObservation, b: ObjectObservation, cfg: EngineConfig) -> float:
    """Half cosine distance plus half map-normalized Euclidean distance.

    Observations of different categories are infinitely far apart.
    """
    if a.category != b.category:
        return math.inf
    if a.embedding.shape != b.embedding.shape:
        raise ValueError(f"embedding dimension mismatch: {a.embedding.shape} vs {b.embedding.shape}")
    cos_d = 1.0 - float(np.dot(a.embedding, b.embedding))
    pos_d = euclid(a.world_pos, b.world_pos) / cfg.map_diag_m
    return max(0.0, 0.5 * cos_d + 0.5 * pos_d)
