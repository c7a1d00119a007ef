"""Small builders shared by the test modules."""

import numpy as np

from d3a.core import ClusterAggregate, KeyframeRef, ObjectObservation, RobotPose, unit
from d3a.simulator import GroundTruthObject, Placement, WorldSpec, gen_patrol


def make_obs(pos, emb, t=0, fid=0, prob=0.9, cat="cup"):
    return ObjectObservation(
        fid, t, cat, prob, (0.0, 0.0, 1.0, 1.0), RobotPose(0.0, 0.0, 0.0, t), unit(emb), (float(pos[0]), float(pos[1]))
    )


def make_agg(iid, pos, emb, t0=0, t1=None, weight=1.0, prob=0.9, fid=0, cat="cup"):
    t1 = t0 if t1 is None else t1
    return ClusterAggregate(
        iid, cat, unit(emb) * 1.0, (float(pos[0]), float(pos[1])), float(weight), KeyframeRef(fid, (0.0, 0.0, 1.0, 1.0), prob, t0), t0, t1, 1
    )


def one_hot(i, n=8):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def static_scene(positions, hours=0.5, embedding_indices=None, categories=None, **spec_kw):
    """Stream over hand-placed static objects on the default patrol loop."""
    spec = WorldSpec(n_static=len(positions), n_dynamic=0, duration_ms=int(hours * 3_600_000), **spec_kw)
    t_end = spec.t0_ms + spec.duration_ms
    idx = embedding_indices or list(range(len(positions)))
    cats = categories or ["cup"] * len(positions)
    world = [
        GroundTruthObject(g, cats[g], idx[g], (Placement(tuple(map(float, p)), spec.t0_ms, t_end),))
        for g, p in enumerate(positions)
    ]
    return gen_patrol(world, spec)
