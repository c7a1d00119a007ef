"""Three-tier association of object detections into a compact, queryable
spatial-temporal store, with a patrol simulator and benchmark harness."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ClusterAggregate,
    EngineConfig,
    KeyframeRef,
    ObjectObservation,
    RawDetection,
    RobotPose,
    SensorFrame,
)
from .pipeline import D3APipeline  # noqa: E402
from .query import Answer, Kind, Precision, Query, QueryResult, TargetSpec, execute  # noqa: E402
from .store import SpatialTemporalStore  # noqa: E402

__all__ = [
    "Answer",
    "ClusterAggregate",
    "D3APipeline",
    "EngineConfig",
    "Kind",
    "KeyframeRef",
    "ObjectObservation",
    "Precision",
    "Query",
    "QueryResult",
    "RawDetection",
    "RobotPose",
    "SensorFrame",
    "SpatialTemporalStore",
    "TargetSpec",
    "execute",
]
