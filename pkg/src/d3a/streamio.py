"""Reading and writing simulated streams (frames.jsonl + gt.jsonl)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import SensorFrame
from .perception import CameraModel, SynthDetectorParams
from .simulator import DetectionTruth, GroundTruthObject, PatrolStream, WorldSpec


class StreamFormatError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def write_stream(stream: PatrolStream, frames_path, gt_path) -> None:
    with open(frames_path, "w") as fh:
        for f in stream.frames:
            fh.write(_dump(f.to_dict()) + "\n")
    with open(gt_path, "w") as fh:
        fh.write(_dump({
            "type": "world",
            "spec": stream.spec.to_dict(),
            "camera": stream.cam.to_dict(),
            "detector": {
                "num_gt_objects": stream.detector.num_gt_objects,
                "fpr": stream.detector.fpr,
                "fnr": stream.detector.fnr,
                "rng_seed": stream.detector.rng_seed,
            },
            "n_frames": len(stream.frames),
            "n_detections": stream.n_detections,
        }) + "\n")
        for obj in stream.world:
            fh.write(_dump({"type": "object", **obj.to_dict()}) + "\n")
        for tr in stream.truth:
            fh.write(_dump({"type": "detection", **tr.to_dict()}) + "\n")


def read_frames(path) -> list[SensorFrame]:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frames.append(SensorFrame.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StreamFormatError(f"{path}:{lineno}: {exc}") from exc
    return frames


@dataclass
class GroundTruth:
    spec: WorldSpec
    cam: CameraModel
    detector: SynthDetectorParams
    objects: list[GroundTruthObject]
    detections: list[DetectionTruth]
    n_frames: int
    _assoc: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._assoc = {(d.frame_id, tuple(d.bbox)): d for d in self.detections}

    @classmethod
    def from_stream(cls, stream: PatrolStream) -> "GroundTruth":
        return cls(stream.spec, stream.cam, stream.detector, list(stream.world), list(stream.truth), len(stream.frames))

    def truth_of(self, frame_id: int, bbox) -> Optional[DetectionTruth]:
        return self._assoc.get((frame_id, tuple(bbox)))

    def gt_of(self, frame_id: int, bbox) -> Optional[int]:
        d = self._assoc.get((frame_id, tuple(bbox)))
        return None if d is None else d.gt_id

    def object(self, gt_id: int) -> GroundTruthObject:
        return self.objects[gt_id]

    def check_matches(self, frames: list[SensorFrame]) -> None:
        """Raise when the stream and this ground truth do not describe the same run."""
        if len(frames) != self.n_frames:
            raise StreamFormatError(f"stream has {len(frames)} frames, ground truth expects {self.n_frames}")
        n = sum(len(f.detections) for f in frames)
        if n != len(self.detections):
            raise StreamFormatError(f"stream has {n} detections, ground truth maps {len(self.detections)}")
        for d in self.detections:
            f = frames[d.frame_id]
            if d.index >= len(f.detections) or tuple(f.detections[d.index].bbox) != tuple(d.bbox):
                raise StreamFormatError(f"ground truth detection {d.frame_id}/{d.index} not found in stream")


def read_gt(path) -> GroundTruth:
    world = None
    objects, dets = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                kind = row.pop("type")
                if kind == "world":
                    world = row
                elif kind == "object":
                    objects.append(GroundTruthObject.from_dict(row))
                elif kind == "detection":
                    dets.append(DetectionTruth(
                        int(row["frame_id"]), int(row["index"]), int(row["gt_id"]),
                        int(row["placement"]), tuple(float(v) for v in row["bbox"]),
                    ))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StreamFormatError(f"{path}:{lineno}: {exc}") from exc
    if world is None:
        raise StreamFormatError(f"{path}: missing world record")
    objects.sort(key=lambda o: o.gt_id)
    return GroundTruth(
        spec=WorldSpec.from_dict(world["spec"]),
        cam=CameraModel.from_dict(world["camera"]),
        detector=SynthDetectorParams(**world["detector"]),
        objects=objects,
        detections=dets,
        n_frames=int(world["n_frames"]),
    )


def load_stream(frames_path, gt_path) -> tuple[list[SensorFrame], GroundTruth]:
    frames = read_frames(frames_path)
    gt = read_gt(gt_path)
    gt.check_matches(frames)
    return frames, gt


def stream_paths(directory) -> tuple[Path, Path]:
    d = Path(directory)
    return d / "frames.jsonl", d / "gt.jsonl"
