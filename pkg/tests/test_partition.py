import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mapo_lab.deformation import DeformNet
from mapo_lab.partition import (PartitionConfig, PartitionedCloud, active_set, check_and_split,
                                identify_static, lineage_coverage, split_instance)
from mapo_lab.scoring import ScoreBatch
from oracles import random_params, small_net


def make_cloud(n=4, T=32, seed=0, zero_heads=False):
    rng = np.random.default_rng(seed)
    params = random_params(rng, n)
    if zero_heads:
        net = DeformNet.create(T, rng, d_gauss=3, d_coarse=2, d_fine=2, hidden=(6, 6), n_coarse=3)
    else:
        net = small_net(rng, T)
    return PartitionedCloud(params, rng.normal(size=(n, 3)), net, T, history_capacity=4)


def batch(S):
    S = np.asarray(S, dtype=float)
    return ScoreBatch(S, S, S, S, S)


def check_invariants(cloud, cfg):
    T = cloud.n_frames
    for lid, segs in lineage_coverage(cloud).items():
        assert segs[0][0] == 0 and segs[-1][1] == T
        for (a, b), (c, d) in zip(segs, segs[1:]):
            assert b == c            # disjoint and gap-free
    for i in range(len(cloud)):
        s, e = cloud.segment_of(i)
        assert abs((e - s) - T / 2 ** cloud.level[i]) <= 1
        assert cloud.level[i] <= cfg.max_level
        assert (s, e) in cloud.nets
    lineages = set(int(x) for x in cloud.params.lineage_id)
    for t in range(T):
        a = active_set(cloud, t)
        ids = cloud.params.lineage_id[a.indices]
        assert sorted(ids.tolist()) == sorted(lineages)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_random_split_sequences_keep_invariants(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(3, 50))
    cloud = make_cloud(int(rng.integers(1, 5)), T, seed)
    cfg = PartitionConfig(tau_levels=[0.5], max_level=int(rng.integers(0, 4)))
    for _ in range(4):
        idx = np.arange(len(cloud))
        check_and_split(cloud, idx, batch(rng.uniform(size=idx.size)), cfg)
        check_invariants(cloud, cfg)


def test_split_replica_is_bitwise_equal_and_nets_shared():
    cloud = make_cloud(3, 20)
    before = cloud.params.copy()
    ev = split_instance(cloud, 1)
    assert ev.original == 1 and ev.replica == 3
    assert cloud.segment_of(1) == (0, 10) and cloud.segment_of(3) == (10, 20)
    for f in ("mu", "rot", "log_scale", "opacity_logit", "color", "lineage_id"):
        assert getattr(cloud.params, f)[3].tobytes() == getattr(before, f)[1].tobytes()
    assert cloud.z_g[3].tobytes() == cloud.z_g[1].tobytes()
    left, right, root = cloud.nets[(0, 10)], cloud.nets[(10, 20)], cloud.nets[(0, 20)]
    for k, v in root.parameters().items():
        assert left.parameters()[k].tobytes() == v.tobytes() == right.parameters()[k].tobytes()
    assert len({left.network_id, right.network_id, root.network_id}) == 3
    # A second split of the same range reuses the child nets.
    split_instance(cloud, 0)
    assert cloud.nets[(0, 10)] is left
    # Odd ranges split at the floor midpoint.
    cloud2 = make_cloud(1, 7)
    split_instance(cloud2, 0)
    assert cloud2.segment_of(0) == (0, 3) and cloud2.segment_of(1) == (3, 7)


def test_thresholds_and_max_level():
    cloud = make_cloud(3, 16)
    cfg = PartitionConfig(tau_levels=[0.5, 0.8], max_level=1)
    rep = check_and_split(cloud, np.arange(3), batch([0.5, 0.6, 0.9]), cfg)
    assert [e.original for e in rep.events] == [1, 2]   # strict inequality: 0.5 does not split
    assert (0, 16) in cloud.nets                         # instance 0 still uses the root
    idx = np.arange(len(cloud))
    rep = check_and_split(cloud, idx, batch(np.full(idx.size, 0.99)), cfg)
    assert rep.skipped_max_level == 4 and len(rep.events) == 1
    cloud3 = make_cloud(2, 16)
    check_and_split(cloud3, np.arange(2), batch([0.9, 0.9]), PartitionConfig(tau_levels=[0.5]))
    assert (0, 16) not in cloud3.nets                    # unused root pruned


def test_split_clears_histories():
    cloud = make_cloud(1, 8)
    for k in range(4):
        cloud.histories[0].record(np.ones(3) * k, k)
    split_instance(cloud, 0)
    assert len(cloud.histories[0]) == 0 and len(cloud.histories[1]) == 0


def test_identify_static_bakes_and_is_sticky():
    cloud = make_cloud(3, 16)
    rng = np.random.default_rng(0)
    cfg = PartitionConfig(tau_static=0.3)
    baked = identify_static(cloud, np.arange(3), batch([0.1, 0.5, 0.2]), cfg, rng)
    assert baked == [0, 2]
    assert cloud.is_static.tolist() == [True, False, True]
    assert np.all((cloud.bake_t[[0, 2]] >= 0) & (cloud.bake_t[[0, 2]] < 16))
    a = active_set(cloud, 5)
    assert a.static.tolist() == [0, 2] and a.n_dynamic == 1
    # Already static instances are neither re-baked nor split.
    mu = cloud.params.mu.copy()
    assert identify_static(cloud, np.arange(3), batch([0.0, 0.9, 0.0]), cfg, rng) == []
    assert np.array_equal(cloud.params.mu, mu)
    rep = check_and_split(cloud, np.arange(3), batch([0.99, 0.0, 0.99]), PartitionConfig(tau_levels=[0.5]))
    assert rep.events == []


def test_zero_heads_static_bake_is_bit_identical():
    cloud = make_cloud(5, 16, zero_heads=True)
    before = cloud.params.copy()
    identify_static(cloud, np.arange(5), batch(np.zeros(5)), PartitionConfig(tau_static=1.1),
                    np.random.default_rng(1))
    assert cloud.is_static.all()
    for f in ("mu", "rot", "log_scale", "opacity_logit", "color"):
        assert getattr(cloud.params, f).tobytes() == getattr(before, f).tobytes()


def test_active_set_rejects_out_of_range():
    cloud = make_cloud(1, 8)
    with pytest.raises(ValueError):
        active_set(cloud, 8)


def test_records_and_json(tmp_path):
    cloud = make_cloud(2, 8)
    split_instance(cloud, 0)
    cloud.dump_json(tmp_path / "p.json")
    import json
    recs = json.loads((tmp_path / "p.json").read_text())
    assert [(r["t_start"], r["t_end"]) for r in recs] == [(0, 4), (0, 8), (4, 8)]
    assert recs[0]["network_id"] != recs[1]["network_id"]
    assert recs[0]["last_score"] is None
