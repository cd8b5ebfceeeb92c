import numpy as np
import pytest

from fairgu.errors import ValidationError
from fairgu.gcn import (adam_step, backward, forward, init_adam,
                        utility_loss_grad)
from fairgu.graph import (SbmSpec, apply_deletion, build_graph, generate_sbm,
                          normalize_adjacency)
from fairgu.metrics import soft_group_gap
from fairgu.partition import balanced_partition, route_request
from fairgu.trainer import (FguConfig, FguState, ImportanceScores, aggregate,
                            combine_models, config_hash, fgu_unlearn_retrain,
                            fresh_model, importance_gradient, load_state,
                            save_state, softmax, train_shards,
                            update_importance)
from fairgu.unlearn import DeletionSpec, UnlearnRequest, sample_request

from conftest import random_graph


def small_sbm(seed=3, nodes_per_block=60):
    return generate_sbm(SbmSpec(nodes_per_block=nodes_per_block, intra_edge_prob=0.08,
                                inter_edge_prob=0.02, label_sensitive_correlation=0.6,
                                feature_dim=4, feature_shift=1.5, seed=seed))


def models_equal(a, b):
    return np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)


def oracle_single_shard(shard, cfg):
    """Straight-line reimplementation of one shard's plain training loop,
    built from kernel primitives only.
    """
    model = fresh_model(cfg, shard.feature_dim)
    opt = init_adam(model, lr=cfg.eta, weight_decay=cfg.weight_decay)
    adj = normalize_adjacency(shard)
    mask = shard.mask("train")
    if not mask.any():
        mask = np.ones(shard.num_nodes, bool)
    for _ in range(cfg.epochs):
        pred = forward(model, adj, shard.features)
        _, grad = utility_loss_grad(pred, shard.labels, mask)
        model, opt = adam_step(model, opt, backward(model, pred, adj, shard.features, grad))
    return model


def unlearn_setup(g, cfg, spec):
    part = balanced_partition(g, cfg.k, seed=cfg.seed)
    state = train_shards(list(part.shard_graphs), cfg)
    req = sample_request(g, spec)
    shard_reqs, _ = route_request(part, req)
    updated, dirty = [], set()
    for i, (sg, lr) in enumerate(zip(part.shard_graphs, shard_reqs)):
        if lr.is_empty:
            updated.append(sg)
        else:
            updated.append(apply_deletion(sg, lr)[0])
            dirty.add(i)
    g_prime, _ = apply_deletion(g, req)
    return part, state, updated, dirty, g_prime


class TestTrainShards:
    def test_single_shard_matches_plain_training(self):
        g = small_sbm()
        cfg = FguConfig(k=1, epochs=15, seed=4)
        state = train_shards([g], cfg)
        assert state.importance.weights().tolist() == [1.0]
        assert models_equal(state.models[0], oracle_single_shard(g, cfg))

    def test_lambda_starts_uniform(self):
        g = small_sbm()
        part = balanced_partition(g, 4, seed=0)
        cfg = FguConfig(k=4, epochs=3, seed=0)
        state = train_shards(list(part.shard_graphs), cfg)
        assert np.allclose(state.lambda_history[0], 0.25)

    def test_zero_train_shard_falls_back_with_event(self, rng):
        shard = build_graph(5, [[0, 1]], rng.normal(size=(5, 2)),
                            [0, 1, 0, 1, 0], [1, 0, 1, 0, 1], [2] * 5)
        cfg = FguConfig(k=1, epochs=2, seed=0)
        state = train_shards([shard], cfg)
        assert any("no training nodes" in e for e in state.events)

    def test_shared_feature_dim_required(self, rng):
        a = random_graph(rng, 5, feature_dim=2)
        b = random_graph(rng, 5, feature_dim=3)
        with pytest.raises(ValidationError):
            train_shards([a, b], FguConfig(k=2, epochs=1))

    def test_trains_to_high_accuracy_on_separable_graph(self):
        # Blocks fully aligned with labels: homophily keeps the strong
        # feature signal intact through propagation.
        g = generate_sbm(SbmSpec(nodes_per_block=60, intra_edge_prob=0.1,
                                 inter_edge_prob=0.01, label_sensitive_correlation=1.0,
                                 feature_dim=6, feature_shift=3.0, seed=1))
        cfg = FguConfig(k=3, epochs=300, seed=2)
        part = balanced_partition(g, 3, seed=2)
        state = train_shards(list(part.shard_graphs), cfg)
        pred = aggregate(state, g, "weights")
        train = g.mask("train")
        acc = np.mean((pred.probs[train] >= 0.5) == g.labels[train])
        assert acc >= 0.9


class TestAggregate:
    def make_state(self, models, logits):
        return FguState(list(models), ImportanceScores(np.asarray(logits, float)),
                        [init_adam(m) for m in models])

    def test_one_hot_importance_selects_shard(self, rng):
        g = random_graph(rng, 12, feature_dim=3)
        models = [fresh_model(FguConfig(seed=s), 3) for s in range(3)]
        state = self.make_state(models, [60.0, 0.0, 0.0])
        own = forward(models[0], normalize_adjacency(g), g.features).probs
        for mode in ("weights", "posteriors"):
            assert np.allclose(aggregate(state, g, mode).probs, own, atol=1e-9)

    def test_identical_models_ignore_mixture(self, rng):
        g = random_graph(rng, 10, feature_dim=3)
        model = fresh_model(FguConfig(seed=1), 3)
        own = forward(model, normalize_adjacency(g), g.features).probs
        state = self.make_state([model, model], [0.7, -0.4])
        for mode in ("weights", "posteriors"):
            assert np.allclose(aggregate(state, g, mode).probs, own)

    def test_posterior_mode_is_probability_mean(self, rng):
        g = random_graph(rng, 10, feature_dim=3)
        models = [fresh_model(FguConfig(seed=s), 3) for s in (5, 6)]
        adj = normalize_adjacency(g)
        mean = 0.5 * (forward(models[0], adj, g.features).probs
                      + forward(models[1], adj, g.features).probs)
        state = self.make_state(models, [0.0, 0.0])
        assert np.allclose(aggregate(state, g, "posteriors").probs, mean)


class TestImportanceUpdate:
    def blocks(self, g):
        adj = normalize_adjacency(g)
        train = g.mask("train")
        if not train.any():
            train = np.ones(g.num_nodes, bool)
        return [(adj, g.features, g.labels, g.sensitive, train,
                 np.ones(g.num_nodes, bool))]

    def test_single_shard_stays_fixed(self, rng):
        g = random_graph(rng, 8, feature_dim=3)
        model = fresh_model(FguConfig(seed=0), 3)
        state = FguState([model], ImportanceScores(np.zeros(1)), [init_adam(model)])
        new = update_importance(state, g, FguConfig(k=1, seed=0))
        assert new.importance.weights().tolist() == [1.0]

    def test_identical_models_have_zero_gradient(self, rng):
        g = random_graph(rng, 10, feature_dim=3)
        model = fresh_model(FguConfig(seed=2), 3)
        for mode in ("weights", "posteriors"):
            _, grad = importance_gradient([model, model, model], np.zeros(3),
                                          self.blocks(g), 3.0, mode)
            assert np.allclose(grad, 0.0, atol=1e-15)

    @pytest.mark.parametrize("mode", ["weights", "posteriors"])
    def test_gradient_matches_finite_differences(self, mode, rng):
        g = random_graph(rng, 25, feature_dim=3)
        models = [fresh_model(FguConfig(seed=s), 3) for s in (1, 2, 3)]
        logits = rng.normal(size=3)
        alpha = 3.0
        blocks = self.blocks(g)
        adj, feats, labels, sensitive, train, allm = blocks[0]

        def loss_at(lg):
            lam = softmax(lg)
            if mode == "weights":
                probs = forward(combine_models(models, lam), adj, feats).probs
            else:
                probs = sum(l * forward(m, adj, feats).probs for l, m in zip(lam, models))
            p, y = probs[train], labels[train].astype(float)
            u = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
            gap, _ = soft_group_gap(probs, sensitive, allm)
            return u + alpha * gap

        _, analytic = importance_gradient(models, logits, blocks, alpha, mode)
        h = 1e-5
        for j in range(3):
            up, down = logits.copy(), logits.copy()
            up[j] += h
            down[j] -= h
            num = (loss_at(up) - loss_at(down)) / (2 * h)
            assert abs(analytic[j] - num) <= 1e-4 * max(1e-6, abs(num))


class TestUnlearnRetrain:
    def test_fairness_off_equals_from_scratch_training(self):
        g = small_sbm(seed=6, nodes_per_block=40)
        cfg = FguConfig(k=3, epochs=12, seed=5, alpha=0.0, beta=0.0, alpha_k=0.0, t1=100)
        _, state, updated, dirty, g_prime = unlearn_setup(
            g, cfg, DeletionSpec(0.1, 0.1, "uniform", seed=5))
        assert dirty
        new_state = fgu_unlearn_retrain(state, updated, dirty, g_prime, cfg)
        for i in dirty:
            assert models_equal(new_state.models[i], oracle_single_shard(updated[i], cfg))

    def test_untouched_request_keeps_all_shards_clean(self):
        g = small_sbm(seed=2, nodes_per_block=30)
        cfg = FguConfig(k=2, epochs=5, seed=1)
        part = balanced_partition(g, 2, seed=1)
        state = train_shards(list(part.shard_graphs), cfg)
        new_state = fgu_unlearn_retrain(state, list(part.shard_graphs), set(), g, cfg)
        assert new_state.k == 2
        assert new_state.epoch == state.epoch + cfg.epochs

    def test_emptied_shard_dropped_and_logged(self, rng):
        g = small_sbm(seed=8, nodes_per_block=20)
        cfg = FguConfig(k=3, epochs=3, seed=0)
        part = balanced_partition(g, 3, seed=0)
        state = train_shards(list(part.shard_graphs), cfg)
        # Empty shard 1 entirely.
        doomed = part.shard_graphs[1]
        emptied, _ = apply_deletion(doomed, UnlearnRequest(nodes=set(range(doomed.num_nodes))))
        updated = [part.shard_graphs[0], emptied, part.shard_graphs[2]]
        new_state = fgu_unlearn_retrain(state, updated, {1}, g, cfg)
        assert new_state.k == 2
        assert any("dropped" in e for e in new_state.events)
        lam = new_state.importance.weights()
        assert lam.shape == (2,) and abs(lam.sum() - 1.0) <= 1e-12

    def test_simplex_invariant_every_epoch(self):
        g = small_sbm(seed=9, nodes_per_block=30)
        cfg = FguConfig(k=3, epochs=10, seed=3, t1=2)
        _, state, updated, dirty, g_prime = unlearn_setup(
            g, cfg, DeletionSpec(0.05, 0.05, "uniform", seed=3))
        new_state = fgu_unlearn_retrain(state, updated, dirty, g_prime, cfg)
        assert len(new_state.lambda_history) >= 2 * cfg.epochs
        for lam in new_state.lambda_history:
            assert (lam > 0).all()
            assert abs(lam.sum() - 1.0) <= 1e-12

    def test_full_pipeline_determinism(self):
        g = small_sbm(seed=10, nodes_per_block=30)
        cfg = FguConfig(k=3, epochs=6, seed=7)
        spec = DeletionSpec(0.1, 0.1, "uniform", seed=7)
        results = []
        for _ in range(2):
            _, state, updated, dirty, g_prime = unlearn_setup(g, cfg, spec)
            results.append(fgu_unlearn_retrain(state, updated, dirty, g_prime, cfg))
        a, b = results
        assert np.array_equal(a.importance.logits, b.importance.logits)
        for ma, mb in zip(a.models, b.models):
            assert models_equal(ma, mb)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        g = small_sbm(seed=12, nodes_per_block=25)
        cfg = FguConfig(k=2, epochs=4, seed=2)
        part = balanced_partition(g, 2, seed=2)
        state = train_shards(list(part.shard_graphs), cfg)
        path = tmp_path / "ckpt.bin"
        save_state(path, state, cfg)
        loaded, meta = load_state(path)
        assert meta["config_hash"] == config_hash(cfg)
        assert meta["k"] == 2
        assert np.array_equal(loaded.importance.logits, state.importance.logits)
        for ma, mb in zip(loaded.models, state.models):
            assert models_equal(ma, mb)
        for oa, ob in zip(loaded.opt_states, state.opt_states):
            assert oa.step == ob.step
            assert np.array_equal(oa.m1, ob.m1) and np.array_equal(oa.v1, ob.v1)
            assert np.array_equal(oa.m2, ob.m2) and np.array_equal(oa.v2, ob.v2)
            assert (oa.lr, oa.weight_decay, oa.beta1, oa.beta2, oa.eps) == \
                   (ob.lr, ob.weight_decay, ob.beta1, ob.beta2, ob.eps)
        assert loaded.epoch == state.epoch

    def test_reload_resumes_identically(self, tmp_path):
        g = small_sbm(seed=13, nodes_per_block=25)
        cfg = FguConfig(k=2, epochs=4, seed=3)
        part = balanced_partition(g, 2, seed=3)
        state = train_shards(list(part.shard_graphs), cfg)
        save_state(tmp_path / "c.bin", state, cfg)
        loaded, _ = load_state(tmp_path / "c.bin")
        a = fgu_unlearn_retrain(state, list(part.shard_graphs), set(), g, cfg)
        b = fgu_unlearn_retrain(loaded, list(part.shard_graphs), set(), g, cfg)
        for ma, mb in zip(a.models, b.models):
            assert models_equal(ma, mb)
        assert np.array_equal(a.importance.logits, b.importance.logits)
