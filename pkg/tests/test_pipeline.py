import math

import numpy as np
import pytest

from d3a.core import INSTANCE_ID_BASE, EngineConfig, combined_distance, euclid
from d3a.perception import CameraModel
from d3a.pipeline import (
    D3APipeline,
    ShortTermMemory,
    SlidingWindow,
    flush,
    select_keyframe,
    tier1_cluster,
    tier2_update,
    tier3_merge,
)
from d3a.store import SpatialTemporalStore
from helpers import make_agg, make_obs, one_hot, static_scene
from test_clustering import reference_dbscan

CAM = CameraModel()


def ids(start=INSTANCE_ID_BASE):
    return iter(range(start, start + 10_000))


def window_of(frames, maxlen=10):
    w = SlidingWindow(maxlen)
    for t, obs in enumerate(frames):
        w.push(t, obs)
    return w


class TestTier1:
    def test_isolated_single_sighting_is_noise(self):
        frames = [[] for _ in range(10)]
        frames[4] = [make_obs((3, 3), one_hot(0), t=4, fid=4)]
        assert tier1_cluster(window_of(frames), EngineConfig(), ids()) == {}

    def test_one_object_ten_frames(self):
        frames = [[make_obs((3, 3), one_hot(0), t=i, fid=i)] for i in range(10)]
        batch = tier1_cluster(window_of(frames), EngineConfig(), ids())
        assert len(batch) == 1
        agg = next(iter(batch.values()))
        assert agg.weight == 10 and agg.world_pos == pytest.approx((3, 3))

    def test_two_lookalikes_5m_apart(self):
        cfg = EngineConfig(map_diag_m=10.0)
        obs = []
        for i in range(5):
            obs.append(make_obs((1.0, 1.0), one_hot(0), t=i, fid=i))
            obs.append(make_obs((4.0, 5.0), one_hot(0), t=i, fid=i))
        frames = [obs[2 * i : 2 * i + 2] for i in range(5)]
        batch = tier1_cluster(window_of(frames), cfg, ids())
        # oracle: combined distance with the hard spatial gate
        n = len(obs)
        d = np.array([[combined_distance(a, b, cfg) for b in obs] for a in obs])
        gate = np.array([[euclid(a.world_pos, b.world_pos) >= cfg.d_thresh_m for b in obs] for a in obs])
        d[gate] = math.inf
        labels = reference_dbscan(d, cfg.dbscan_eps, cfg.dbscan_min_pts)
        assert len(set(labels) - {-1}) == len(batch) == 2
        assert n == 10
        assert sorted(a.weight for a in batch.values()) == [5, 5]

    def test_categories_never_mix(self):
        frames = [[make_obs((3, 3), one_hot(0), t=i, cat="cup"), make_obs((3, 3), one_hot(0), t=i, cat="bowl")] for i in range(3)]
        batch = tier1_cluster(window_of(frames), EngineConfig(), ids())
        assert sorted(a.category for a in batch.values()) == ["bowl", "cup"]

    def test_window_bounded_and_ordered(self):
        w = SlidingWindow(3)
        for t in range(6):
            w.push(t, [])
        assert len(w) == 3
        with pytest.raises(ValueError):
            w.push(2, [])


class TestTier2:
    def test_empty_stm_inserts(self):
        stm = ShortTermMemory(400)
        log = []
        ev = tier2_update({1: make_agg(1, (2, 2), one_hot(0))}, stm, EngineConfig(), log)
        assert ev == [] and len(stm) == 1 and log == [(3, 1, 1)]

    def test_reobservation_aggregates(self):
        stm = ShortTermMemory(400)
        cfg = EngineConfig()
        tier2_update({1: make_agg(1, (2, 2), one_hot(0), weight=3)}, stm, cfg)
        tier2_update({2: make_agg(2, (2, 2), one_hot(0), t0=5, weight=4)}, stm, cfg)
        assert len(stm) == 1
        entry = stm.entries[1]
        assert entry.aggregate.weight == 7 and entry.last_viewed_t == 5

    def test_similar_but_far_inserts(self):
        stm = ShortTermMemory(400)
        log = []
        cfg = EngineConfig()
        tier2_update({1: make_agg(1, (2, 2), one_hot(0))}, stm, cfg, log)
        tier2_update({2: make_agg(2, (4, 2), one_hot(0), t0=1)}, stm, cfg, log)
        assert len(stm) == 2 and log[-1] == (2, 2, 2)

    def test_capacity_evicts_least_recently_viewed(self):
        stm = ShortTermMemory(400)
        cfg = EngineConfig()
        batch = {i: make_agg(i, (i * 0.01, 0), one_hot(i, 401), t0=1000 - i) for i in range(400)}
        assert tier2_update(batch, stm, cfg) == []
        assert len(stm) == 400
        oldest = min(stm.entries, key=lambda k: stm.entries[k].last_viewed_t)
        ev = tier2_update({9999: make_agg(9999, (15, 9), one_hot(400, 401), t0=2000)}, stm, cfg)
        assert len(stm) == 400
        assert [e.instance_id for e in ev] == [oldest]

    def test_nearest_similar_entry_is_tested(self):
        # a look-alike far away must not mask the true match nearby
        stm = ShortTermMemory(10)
        cfg = EngineConfig()
        stm.insert(make_agg(1, (10, 5), one_hot(0)))
        stm.insert(make_agg(2, (2, 2), 0.9 * one_hot(0) + 0.1 * one_hot(1)))
        log = []
        tier2_update({3: make_agg(3, (2.1, 2), one_hot(0), t0=1)}, stm, cfg, log)
        assert log == [(1, 3, 2)]

    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            ShortTermMemory(0)


class TestKeyframe:
    def test_max_prob(self):
        a = make_agg(1, (0, 0), one_hot(0), prob=0.9, fid=1)
        b = make_agg(2, (0, 0), one_hot(0), prob=0.7, fid=2)
        assert select_keyframe(a, b).prob == 0.9 and select_keyframe(b, a).prob == 0.9

    def test_tie_to_smaller_frame(self):
        a = make_agg(1, (0, 0), one_hot(0), prob=0.8, fid=12)
        b = make_agg(2, (0, 0), one_hot(0), prob=0.8, fid=7)
        assert select_keyframe(a, b).frame_id == 7


class TestTier3:
    def test_empty_store(self):
        store = SpatialTemporalStore()
        res = tier3_merge(make_agg(1, (2, 2), one_hot(0)), store, EngineConfig())
        assert res.action == "new_object"
        assert (store.oic_count, store.stc_count) == (1, 1)

    def test_same_place_twice(self):
        store, cfg = SpatialTemporalStore(), EngineConfig()
        tier3_merge(make_agg(1, (2, 2), one_hot(0), t0=0, t1=10, weight=3), store, cfg)
        res = tier3_merge(make_agg(2, (2, 2), one_hot(0), t0=50, t1=60, weight=4), store, cfg)
        assert res.action == "aggregate"
        assert (store.oic_count, store.stc_count) == (1, 1)
        assert store.get_object(res.object_id).weight == 7
        assert (store.get_stc(0).t_first, store.get_stc(0).t_last) == (0, 60)

    def test_moved_object(self):
        store, cfg = SpatialTemporalStore(), EngineConfig()
        tier3_merge(make_agg(1, (2, 2), one_hot(0), t0=0, t1=10), store, cfg)
        res = tier3_merge(make_agg(2, (4, 2), one_hot(0), t0=50, t1=60), store, cfg)
        assert res.action == "new_location"
        assert (store.oic_count, store.stc_count) == (1, 2)

    def test_simultaneous_lookalikes_stay_apart(self):
        store, cfg = SpatialTemporalStore(), EngineConfig()
        tier3_merge(make_agg(1, (2, 2), one_hot(0), t0=0, t1=100), store, cfg)
        res = tier3_merge(make_agg(2, (7, 2), one_hot(0), t0=50, t1=60), store, cfg)
        assert res.action == "new_object"
        assert (store.oic_count, store.stc_count) == (2, 2)

    def test_dissimilar_is_new_object(self):
        store, cfg = SpatialTemporalStore(), EngineConfig()
        tier3_merge(make_agg(1, (2, 2), one_hot(0)), store, cfg)
        tier3_merge(make_agg(2, (2, 2), one_hot(1), t0=5), store, cfg)
        assert store.oic_count == 2

    def test_nonspatial_aggregates_anywhere(self):
        store, cfg = SpatialTemporalStore(), EngineConfig(spatial=False)
        tier3_merge(make_agg(1, (2, 2), one_hot(0), t0=0, t1=100), store, cfg)
        res = tier3_merge(make_agg(2, (7, 2), one_hot(0), t0=50, t1=60), store, cfg)
        assert res.action == "aggregate"
        assert (store.oic_count, store.stc_count) == (1, 1)


class TestFlush:
    def test_empty(self):
        assert flush(ShortTermMemory(5), SpatialTemporalStore(), EngineConfig()) == 0

    def test_three_entries(self):
        stm = ShortTermMemory(5)
        for i in range(3):
            stm.insert(make_agg(i, (2 + 3 * i, 2), one_hot(i), t0=i))
        store = SpatialTemporalStore()
        assert flush(stm, store, EngineConfig()) == 3
        assert len(stm) == 0 and store.oic_count == 3

    def test_lrv_order(self):
        stm = ShortTermMemory(5)
        for i, t in enumerate([30, 10, 20]):
            stm.insert(make_agg(i, (2 + 3 * i, 2), one_hot(i), t0=t))
        log = []
        flush(stm, SpatialTemporalStore(), EngineConfig(), log=log)
        assert [lrv.instance_id for lrv, _ in log] == [1, 2, 0]


def test_capacity_one_matches_default_on_two_objects():
    stream = static_scene([(6.0, 2.8), (11.0, 1.3)], hours=0.5)
    counts = []
    for cap in (400, 1):
        cfg = EngineConfig(stm_capacity=cap)
        store = D3APipeline(cfg, CAM).run(stream.frames)
        store.check_integrity()
        counts.append(len({r.object_id for r in store.stc_records()}))
    assert counts == [2, 2]


def test_pipeline_rejects_time_travel():
    stream = static_scene([(6.0, 2.8)], hours=0.05)
    pipe = D3APipeline(EngineConfig(), CAM)
    pipe.ingest(stream.frames[3])
    with pytest.raises(ValueError):
        pipe.ingest(stream.frames[2])


def test_instance_ids_disjoint_from_object_ids():
    stream = static_scene([(6.0, 2.8), (11.0, 1.3)], hours=0.2)
    pipe = D3APipeline(EngineConfig(stm_capacity=1), CAM, record_actions=True)
    pipe.run(stream.frames)
    iids = [iid for _, iid, _ in pipe.tier2_log]
    assert min(iids) >= INSTANCE_ID_BASE
    assert iids == sorted(iids) and len(set(iids)) == len(iids)
    assert max(pipe.store.object_ids()) < INSTANCE_ID_BASE
