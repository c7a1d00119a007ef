"""Session-scoped seed-0 worlds shared by the evaluation and acceptance tests."""

import pytest

from d3a.core import EngineConfig
from d3a.perception import CameraModel, SynthDetectorParams
from d3a.simulator import WorldSpec, gen_patrol, gen_world
from d3a.streamio import GroundTruth


def make_stream(fpr=0.0, fnr=0.0, pose_noise=0.0, seed=0, **spec_kw):
    spec = WorldSpec(seed=seed, pose_noise_sd_m=pose_noise, **spec_kw)
    world = gen_world(spec)
    det = SynthDetectorParams(len(world), fpr, fnr, seed)
    stream = gen_patrol(world, spec, CameraModel(), det)
    return stream, GroundTruth.from_stream(stream)


@pytest.fixture(scope="session")
def perfect_world():
    return make_stream()


@pytest.fixture(scope="session")
def noisy_world():
    return make_stream(fpr=0.1, pose_noise=0.1)


@pytest.fixture(scope="session")
def cfg():
    return EngineConfig()
