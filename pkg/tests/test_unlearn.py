import numpy as np
import pytest

from fairgu.errors import ValidationError
from fairgu.graph import SbmSpec, apply_deletion, generate_sbm, resplit
from fairgu.partition import balanced_partition, route_request
from fairgu.trainer import FguConfig, train_shards, fgu_unlearn_retrain
from fairgu.unlearn import (DeletionSpec, UnlearnRequest, fair_retrain_baseline,
                            load_request, privileged_group, retrain_baseline,
                            sample_request, save_request)


def biased_graph(seed=11):
    return generate_sbm(SbmSpec(nodes_per_block=300, intra_edge_prob=0.05,
                                inter_edge_prob=0.005, label_sensitive_correlation=0.6,
                                feature_dim=16, feature_shift=0.8, seed=seed))


class TestSampleRequest:
    def test_zero_ratios_give_empty_request(self):
        g = biased_graph()
        req = sample_request(g, DeletionSpec(0.0, 0.0, "uniform", seed=0))
        assert req.is_empty

    def test_uniform_counts_are_floors(self):
        g = biased_graph()
        req = sample_request(g, DeletionSpec(0.1, 0.05, "uniform", seed=1))
        assert len(req.nodes) == int(0.1 * g.num_nodes)
        assert len(req.edges) == int(0.05 * g.num_edges)

    def test_nodes_come_from_training_split(self):
        g = biased_graph()
        req = sample_request(g, DeletionSpec(0.15, 0.0, "uniform", seed=2))
        train = g.mask("train")
        assert all(train[i] for i in req.nodes)

    def test_unprivileged_strategy_restricts_group(self):
        g = biased_graph()
        priv = privileged_group(g)
        req = sample_request(g, DeletionSpec(0.05, 0.05, "unprivileged", seed=3))
        assert all(g.sensitive[i] == 1 - priv for i in req.nodes)
        edges = np.array(sorted(req.edges))
        touches = (g.sensitive[edges[:, 0]] == 1 - priv) | (g.sensitive[edges[:, 1]] == 1 - priv)
        assert touches.all()

    def test_privileged_group_is_higher_positive_rate(self):
        g = biased_graph()
        # Blocks are built so S=1 has the higher base positive rate.
        assert privileged_group(g) == 1

    def test_no_duplicates_and_seed_reproducible(self):
        g = biased_graph()
        spec = DeletionSpec(0.1, 0.1, "uniform", seed=9)
        a, b = sample_request(g, spec), sample_request(g, spec)
        assert a.nodes == b.nodes and a.edges == b.edges
        assert len(a.nodes) == len(set(a.nodes))

    def test_infeasible_ratio_mentions_survivors(self):
        g = generate_sbm(SbmSpec(nodes_per_block=10, intra_edge_prob=0.3,
                                 inter_edge_prob=0.1, label_sensitive_correlation=0.0,
                                 feature_dim=2, feature_shift=1.0, seed=0))
        with pytest.raises(ValidationError, match="survive"):
            sample_request(g, DeletionSpec(0.55, 0.0, "uniform", seed=0))


def test_request_round_trip(tmp_path):
    req = UnlearnRequest(nodes={3, 5}, edges={(7, 2), (1, 4)}, feature_nodes={9}, tag="uniform")
    spec = DeletionSpec(0.1, 0.2, "uniform", seed=4)
    save_request(tmp_path / "req.txt", req, spec)
    loaded = load_request(tmp_path / "req.txt")
    assert loaded.nodes == req.nodes
    assert loaded.edges == {(2, 7), (1, 4)}
    assert loaded.feature_nodes == req.feature_nodes
    assert loaded.tag == "uniform"


def test_no_deleted_entity_survives_anywhere():
    g = biased_graph()
    cfg = FguConfig(k=4, epochs=3, seed=1)
    part = balanced_partition(g, 4, seed=1)
    state = train_shards(list(part.shard_graphs), cfg)
    req = sample_request(g, DeletionSpec(0.1, 0.1, "uniform", seed=1))
    shard_reqs, _ = route_request(part, req)
    deleted_edges = req.edges
    updated, updated_maps, dirty = [], [], set()
    for i, (sg, lr) in enumerate(zip(part.shard_graphs, shard_reqs)):
        if lr.is_empty:
            updated.append(sg)
            updated_maps.append(part.local_to_global[i])
        else:
            new_sg, old_to_new = apply_deletion(sg, lr)
            updated.append(new_sg)
            updated_maps.append(part.local_to_global[i][old_to_new >= 0])
            dirty.add(i)
    g_prime, old_to_new = apply_deletion(g, req)
    fgu_unlearn_retrain(state, updated, dirty, g_prime, cfg)

    for sg, l2g in zip(updated, updated_maps):
        assert not (set(l2g.tolist()) & req.nodes)
        for u, v in sg.edge_array():
            gu, gv = int(l2g[u]), int(l2g[v])
            assert (min(gu, gv), max(gu, gv)) not in deleted_edges
    survivors = set(np.flatnonzero(old_to_new >= 0).tolist())
    assert not (survivors & req.nodes)


class TestBaselines:
    def test_fair_retrain_with_zero_alpha_equals_retrain(self):
        g = generate_sbm(SbmSpec(60, 0.05, 0.02, 0.5, 4, 1.0, seed=5))
        cfg = FguConfig(k=1, epochs=10, seed=3, alpha=0.0)
        m1, rep1 = retrain_baseline(g, cfg)
        m2, rep2 = fair_retrain_baseline(g, cfg)
        assert np.array_equal(m1.w1, m2.w1)
        assert np.array_equal(m1.w2, m2.w2)
        assert (rep1.accuracy, rep1.f1, rep1.delta_dp, rep1.delta_eo) == \
               (rep2.accuracy, rep2.f1, rep2.delta_dp, rep2.delta_eo)

    def test_empty_deletion_equals_training_on_original(self):
        g = biased_graph()
        cfg = FguConfig(k=1, epochs=10, seed=2)
        g_same, _ = apply_deletion(g, UnlearnRequest())
        m1, _ = retrain_baseline(g, cfg)
        m2, _ = retrain_baseline(g_same, cfg)
        assert np.array_equal(m1.w1, m2.w1)

    def test_unbiased_graph_trains_nearly_fair(self):
        # No block structure and no label/group coupling: any residual gap
        # is estimation noise.
        g = generate_sbm(SbmSpec(300, 0.004, 0.004, 0.0, 16, 2.0, seed=21))
        cfg = FguConfig(k=1, epochs=300, eta=1e-2, hidden_dim=16, seed=0)
        _, rep = retrain_baseline(g, cfg)
        assert rep.delta_dp <= 0.1

    def test_biased_graph_trains_unfair(self):
        g = generate_sbm(SbmSpec(300, 0.06, 0.004, 0.6, 32, 0.6, seed=11))
        cfg = FguConfig(k=1, epochs=150, eta=1e-3, hidden_dim=16, seed=0)
        _, rep = retrain_baseline(g, cfg)
        assert rep.delta_dp >= 0.2

    def test_fair_regularizer_cuts_gap_on_same_draw(self):
        g = generate_sbm(SbmSpec(300, 0.06, 0.004, 0.6, 32, 0.6, seed=11))
        cfg = FguConfig(k=1, epochs=150, eta=1e-3, hidden_dim=16, seed=0, alpha=3.0)
        _, rep_r = retrain_baseline(g, cfg)
        _, rep_f = fair_retrain_baseline(g, cfg)
        assert rep_f.delta_dp < rep_r.delta_dp

    def test_fair_retrain_keeps_accuracy_close(self):
        # Means over five split draws; the fairness penalty costs at most
        # six accuracy points in this regime.
        base = biased_graph()
        r_acc, f_acc = [], []
        for seed in range(5):
            g = resplit(base, seed, train_frac=0.4)
            cfg = FguConfig(k=1, epochs=100, eta=1e-3, hidden_dim=8, seed=seed, alpha=3.0)
            _, rep_r = retrain_baseline(g, cfg)
            _, rep_f = fair_retrain_baseline(g, cfg)
            r_acc.append(rep_r.accuracy)
            f_acc.append(rep_f.accuracy)
        assert np.mean(f_acc) >= np.mean(r_acc) - 0.06
