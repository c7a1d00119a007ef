"""Seeded ground-truth worlds and patrol streams.

The robot drives a rectangular loop at constant speed with a forward-facing
camera. Objects sit beside the straight segments of the loop, far enough from
the corners that every pass sees them in at least two consecutive frames.
Dynamic objects jump to a new placement while the robot is out of range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import DEFAULT_MAP_BOUNDS, Point, RawDetection, RobotPose, SensorFrame, euclid, normalize_angle
from .perception import CameraModel, SynthDetectorParams, bbox_for, frame_rng, synth_embedding

EPOCH_MS = 1_577_869_200_000  # 2020-01-01 09:00 UTC

CATEGORIES = (
    "cup", "bowl", "bottle", "book", "laptop", "keyboard", "mouse", "plant",
    "backpack", "remote", "phone", "scissors", "vase", "clock", "teddy_bear",
)
# categories the simulator never places, used for negative queries
ABSENT_CATEGORIES = ("umbrella", "toaster", "skateboard", "frisbee", "kite")

# number of moves of a dynamic object: 1..5 with mean ~2.1 and sd ~1.2
MOVE_PROBS = (0.42, 0.30, 0.12, 0.09, 0.07)

MAX_ATTEMPTS = 10_000


class InfeasibleWorld(RuntimeError):
    pass


@dataclass(frozen=True)
class Placement:
    position: Point
    t_start: int
    t_end: int

    def to_dict(self) -> dict:
        return {"position": list(self.position), "t_start": self.t_start, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls((float(d["position"][0]), float(d["position"][1])), int(d["t_start"]), int(d["t_end"]))


@dataclass(frozen=True)
class GroundTruthObject:
    gt_id: int
    category: str
    true_embedding_index: int
    placements: tuple[Placement, ...]

    def __post_init__(self):
        ps = self.placements
        for a, b in zip(ps, ps[1:]):
            if not a.t_end <= b.t_start:
                raise ValueError(f"object {self.gt_id}: placements overlap or are out of order")

    @property
    def dynamic(self) -> bool:
        return len(self.placements) > 1

    def placement_at(self, t: int) -> Optional[int]:
        for i, p in enumerate(self.placements):
            last = i == len(self.placements) - 1
            if p.t_start <= t < p.t_end or (last and t == p.t_end):
                return i
        return None

    def to_dict(self) -> dict:
        return {
            "gt_id": self.gt_id,
            "category": self.category,
            "true_embedding_index": self.true_embedding_index,
            "placements": [p.to_dict() for p in self.placements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthObject":
        return cls(
            int(d["gt_id"]), str(d["category"]), int(d["true_embedding_index"]),
            tuple(Placement.from_dict(p) for p in d["placements"]),
        )


@dataclass(frozen=True)
class WorldSpec:
    map_bounds: tuple[float, float, float, float] = DEFAULT_MAP_BOUNDS
    n_static: int = 49
    n_dynamic: int = 10
    min_separation_m: float = 0.5
    duration_ms: int = 3 * 3_600_000
    frame_rate_per_min: float = 7.67
    pose_noise_sd_m: float = 0.0
    depth_noise_sd_m: float = 0.0
    seed: int = 0
    robot_speed_mps: float = 0.077
    route_margin_m: float = 2.0
    lateral_range_m: tuple[float, float] = (0.3, 1.2)
    forced_moves: Optional[int] = None
    t0_ms: int = EPOCH_MS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_bounds"] = list(self.map_bounds)
        d["lateral_range_m"] = list(self.lateral_range_m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["map_bounds"] = tuple(d["map_bounds"])
        d["lateral_range_m"] = tuple(d["lateral_range_m"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @property
    def frame_period_ms(self) -> float:
        return 60_000.0 / self.frame_rate_per_min

    def route(self) -> list[Point]:
        x0, y0, x1, y1 = self.map_bounds
        m = self.route_margin_m
        return [(x0 + m, y0 + m), (x1 - m, y0 + m), (x1 - m, y1 - m), (x0 + m, y1 - m)]

    @property
    def loop_length_m(self) -> float:
        pts = self.route()
        return sum(euclid(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts)))

    @property
    def loop_period_ms(self) -> float:
        return self.loop_length_m / self.robot_speed_mps * 1000.0

    def frame_times(self) -> list[int]:
        n = int(math.floor(self.duration_ms / self.frame_period_ms))
        return [self.t0_ms + int(round(i * self.frame_period_ms)) for i in range(n + 1)]


def true_pose(spec: WorldSpec, t: int) -> RobotPose:
    """Pose on the patrol loop at time ``t`` (arc length from the first waypoint)."""
    pts = spec.route()
    s = (spec.robot_speed_mps * (t - spec.t0_ms) / 1000.0) % spec.loop_length_m
    for i in range(len(pts)):
        a, b = pts[i], pts[(i + 1) % len(pts)]
        seg = euclid(a, b)
        if s < seg or i == len(pts) - 1:
            f = min(s / seg, 1.0)
            theta = math.atan2(b[1] - a[1], b[0] - a[0])
            return RobotPose(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), theta, t)
        s -= seg
    raise AssertionError("unreachable")


def sees(pose: RobotPose, p: Point, cam: CameraModel) -> Optional[tuple[float, float]]:
    """(range, bearing) when ``p`` is inside the camera's range and FOV."""
    dx, dy = p[0] - pose.x, p[1] - pose.y
    r = math.hypot(dx, dy)
    if not 0.0 < r <= cam.max_range_m:
        return None
    beta = normalize_angle(math.atan2(dy, dx) - pose.theta)
    if abs(beta) >= 0.5 * cam.horizontal_fov * (1 - 1e-9):
        return None
    return r, beta


def _sample_position(spec: WorldSpec, rng: np.random.Generator, cam: CameraModel) -> Point:
    pts = spec.route()
    segs = [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]
    lens = np.array([euclid(a, b) for a, b in segs])
    lat_lo, lat_hi = spec.lateral_range_m
    # the whole visibility span must lie on the approach segment
    lead = math.sqrt(cam.max_range_m**2 - lat_lo**2) + 0.05
    usable = np.where(lens > lead + 0.3, lens, 0.0)
    if not usable.any():
        raise InfeasibleWorld(f"no route segment longer than {lead + 0.3:.2f} m to place objects beside")
    i = int(rng.choice(len(segs), p=usable / usable.sum()))
    (ax, ay), (bx, by) = segs[i]
    u = rng.uniform(lead, lens[i] - 0.3)
    lat = rng.uniform(lat_lo, lat_hi) * (1 if rng.random() < 0.5 else -1)
    tx, ty = (bx - ax) / lens[i], (by - ay) / lens[i]
    return (ax + u * tx - lat * ty, ay + u * ty + lat * tx)


def _switch_time(spec, rng, cam, loop_idx, old, new, guard_frames) -> int:
    """Time inside loop ``loop_idx`` when neither placement is near the robot."""
    period = spec.loop_period_ms
    guard_ms = guard_frames * spec.frame_period_ms
    clearance = cam.max_range_m + 0.25
    phases = rng.permutation(48) / 48.0
    for ph in phases:
        t = int(spec.t0_ms + (loop_idx + ph) * period)
        ok = True
        for k in np.linspace(-guard_ms, guard_ms, 4 * guard_frames + 1):
            pose = true_pose(spec, int(t + k))
            if euclid((pose.x, pose.y), old) < clearance or euclid((pose.x, pose.y), new) < clearance:
                ok = False
                break
        if ok:
            return t
    raise InfeasibleWorld(f"no out-of-view switch time for placements {old} -> {new}")


def gen_world(spec: WorldSpec, cam: Optional[CameraModel] = None, guard_frames: int = 12) -> list[GroundTruthObject]:
    """Deterministic world for ``spec``; placements of one object partition the run."""
    cam = cam or CameraModel()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA11CE]))
    n = spec.n_static + spec.n_dynamic
    t_end = spec.t0_ms + spec.duration_ms
    placed: list[Point] = []
    attempts = 0

    def new_position() -> Point:
        nonlocal attempts
        while True:
            attempts += 1
            if attempts > MAX_ATTEMPTS:
                raise InfeasibleWorld(
                    f"could not place objects {spec.min_separation_m} m apart within {MAX_ATTEMPTS} attempts"
                )
            p = _sample_position(spec, rng, cam)
            x0, y0, x1, y1 = spec.map_bounds
            if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1):
                continue
            if all(euclid(p, q) > spec.min_separation_m for q in placed):
                placed.append(p)
                return p

    cat_order = rng.permutation(len(CATEGORIES))
    dynamic_ids = set(rng.choice(n, size=spec.n_dynamic, replace=False).tolist()) if spec.n_dynamic else set()
    n_loops = int(spec.duration_ms // spec.loop_period_ms)
    objects = []
    for gid in range(n):
        category = CATEGORIES[int(cat_order[gid % len(CATEGORIES)])]
        first = new_position()
        if gid not in dynamic_ids:
            objects.append(GroundTruthObject(gid, category, gid, (Placement(first, spec.t0_ms, t_end),)))
            continue
        moves = spec.forced_moves or int(rng.choice(len(MOVE_PROBS), p=MOVE_PROBS)) + 1
        positions = [first] + [new_position() for _ in range(moves)]
        # switch loops at least two loops apart so every placement gets a full pass
        # the last placement also needs a full loop before the run ends
        usable = list(range(1, max(n_loops - 1, 2)))
        loops = _spaced_sample(rng, usable, moves, gap=2) if len(usable) >= 2 * moves - 1 else None
        switches = []
        for k in range(moves):
            if loops is not None:
                switches.append(_switch_time(spec, rng, cam, loops[k], positions[k], positions[k + 1], guard_frames))
            else:
                switches.append(int(spec.t0_ms + (k + 1) * spec.duration_ms / (moves + 1)))
        bounds = [spec.t0_ms] + switches + [t_end]
        placements = tuple(Placement(positions[k], bounds[k], bounds[k + 1]) for k in range(moves + 1))
        objects.append(GroundTruthObject(gid, category, gid, placements))
    return objects


def _spaced_sample(rng, values: list[int], k: int, gap: int) -> list[int]:
    for _ in range(MAX_ATTEMPTS):
        pick = sorted(rng.choice(values, size=k, replace=False).tolist())
        if all(b - a >= gap for a, b in zip(pick, pick[1:])):
            return pick
    raise InfeasibleWorld(f"cannot space {k} moves over {len(values)} loops")


@dataclass(frozen=True)
class DetectionTruth:
    frame_id: int
    index: int
    gt_id: int
    placement: int
    bbox: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "index": self.index, "gt_id": self.gt_id,
                "placement": self.placement, "bbox": list(self.bbox)}


@dataclass
class PatrolStream:
    frames: list[SensorFrame]
    truth: list[DetectionTruth]
    world: list[GroundTruthObject]
    spec: WorldSpec
    cam: CameraModel
    detector: SynthDetectorParams
    visible_frames: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    @property
    def n_detections(self) -> int:
        return len(self.truth)


def gen_patrol(
    world: list[GroundTruthObject],
    spec: WorldSpec,
    cam: Optional[CameraModel] = None,
    detector: Optional[SynthDetectorParams] = None,
) -> PatrolStream:
    """Simulate the patrol and emit frames plus the detection -> gt_id map."""
    cam = cam or CameraModel()
    n_emb = max(o.true_embedding_index for o in world) + 1 if world else 1
    detector = detector or SynthDetectorParams(n_emb, 0.0, 0.0, spec.seed)
    if detector.num_gt_objects < n_emb:
        raise ValueError("detector embedding dimension smaller than the world's embedding indices")
    frames, truth = [], []
    visible: dict[tuple[int, int], list[int]] = {}
    for fid, t in enumerate(spec.frame_times()):
        pose = true_pose(spec, t)
        det_rng = frame_rng(detector.rng_seed, fid, 1)
        noise_rng = frame_rng(spec.seed, fid, 2)
        dx, dy = noise_rng.normal(0.0, 1.0, 2) * spec.pose_noise_sd_m if spec.pose_noise_sd_m > 0 else (0.0, 0.0)
        reported = RobotPose(pose.x + dx, pose.y + dy, pose.theta, t)
        dets = []
        for obj in world:
            k = obj.placement_at(t)
            if k is None:
                continue
            seen = sees(pose, obj.placements[k].position, cam)
            if seen is None:
                continue
            visible.setdefault((obj.gt_id, k), []).append(fid)
            r, beta = seen
            prob = float(det_rng.uniform(0.5, 1.0))
            depth_err = float(det_rng.normal(0.0, spec.depth_noise_sd_m)) if spec.depth_noise_sd_m > 0 else 0.0
            emb = synth_embedding(obj.true_embedding_index, detector, det_rng)
            if emb is None:
                continue
            depth = min(max(r + depth_err, 1e-3), cam.max_range_m)
            bbox = bbox_for(beta, r, cam)
            truth.append(DetectionTruth(fid, len(dets), obj.gt_id, k, bbox))
            dets.append(RawDetection(obj.category, prob, bbox, emb, depth))
        frames.append(SensorFrame(fid, t, reported, tuple(dets)))
    return PatrolStream(frames, truth, world, spec, cam, detector, visible)


def coverage_violations(stream: PatrolStream, min_run: int = 2) -> list[tuple[int, int]]:
    """Placements lasting longer than a loop but never seen in ``min_run`` consecutive frames."""
    bad = []
    for obj in stream.world:
        for k, p in enumerate(obj.placements):
            if p.t_end - p.t_start <= stream.spec.loop_period_ms:
                continue
            fids = stream.visible_frames.get((obj.gt_id, k), [])
            best = run = 0
            for a, b in zip([None] + fids, fids):
                run = run + 1 if a is not None and b == a + 1 else 1
                best = max(best, run)
            if best < min_run:
                bad.append((obj.gt_id, k))
    return bad

