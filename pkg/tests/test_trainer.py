import numpy as np
import pytest

from tandrud.data import Cascade, CascadeCorpus, SocialGraph, Vocab, corpus_instances, split_corpus
from tandrud.exceptions import ConfigError, ContractError
from tandrud.graphembed import Node2Vec
from tandrud.model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint, zero_params
from tandrud.trainer import (TOP_K, TrainConfig, evaluate, evaluate_scores, frequency_scores,
                             infer_tree, metrics_from_ranks, parent_accuracy, predecessor_parents,
                             random_graph, synth_generate, target_ranks, train)


@pytest.fixture(scope="module")
def small_synth():
    graph = random_graph(30, 3, seed=0)
    result = synth_generate(graph, 0.4, 12, 50, seed=0)
    topo = Node2Vec(dimensions=8, walk_length=10, walks_per_node=4, seed=0).fit(graph).embedding_.rows
    return graph, result, topo


def small_params(corpus, seed=0):
    return init_params(corpus.n_users, 8, 8, 10, seed=seed)


def live_edge_lengths(graph, prob, cap, runs, seed):
    """Cascade sizes from the equivalent live-edge percolation, conditioned on size >= 2."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < runs:
        live = {}
        for u, v in graph.edges():
            live[(u, v)] = rng.random() < prob
            live[(v, u)] = rng.random() < prob
        start = int(rng.integers(graph.n_nodes))
        seen, stack = {start}, [start]
        while stack:
            x = stack.pop()
            for y in graph.neighbors(x).tolist():
                if y not in seen and live[(x, y)]:
                    seen.add(y)
                    stack.append(y)
        if len(seen) >= 2:
            out.append(min(len(seen), cap))
    return np.array(out)


class TestMetrics:
    def test_rank_one(self):
        m = metrics_from_ranks([1])
        assert m.rr == 1.0 and all(m.precision[k] == 1.0 for k in TOP_K)

    def test_rank_eleven(self):
        m = metrics_from_ranks([11])
        assert m.rr == 1 / 11 and m.precision[10] == 0.0 and m.precision[50] == 1.0

    def test_hand_built_three_instances(self):
        n = 120
        targets = np.array([7, 40, 5])
        probs = np.zeros((3, n))
        probs[np.arange(3), targets] = 0.01
        probs[0, 7] = 0.9                      # target 7 ranked first
        probs[1, :10] = 0.05                   # ten users beat target 40
        probs[2, 60:110] = 0.015               # fifty users beat target 5
        probs /= probs.sum(axis=1, keepdims=True)
        ranks = target_ranks(probs, targets)
        assert ranks.tolist() == [1, 11, 51]
        m = metrics_from_ranks(ranks)
        assert m.rr == (1 + 1 / 11 + 1 / 51) / 3
        assert m.precision == {10: 1 / 3, 50: 2 / 3, 100: 1.0}

    def test_ties_break_by_user_index(self):
        scores = np.zeros((2, 5))
        assert target_ranks(scores, np.array([0, 3])).tolist() == [1, 4]

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        ranks = rng.integers(1, 200, size=50)
        a = metrics_from_ranks(ranks)
        b = metrics_from_ranks(rng.permutation(ranks))
        assert a.rr == pytest.approx(b.rr, abs=1e-15) and a.precision == b.precision

    def test_empty_is_error(self):
        with pytest.raises(ContractError):
            metrics_from_ranks([])

    def test_record_and_table(self):
        m = metrics_from_ranks([1, 11], mask_mode="observed")
        rec = m.record("valid")
        assert list(rec) == ["split", "RR", "P@10", "P@50", "P@100", "n_instances", "mask_mode"]
        assert rec["mask_mode"] == "observed" and "mask=observed" in m.table()

    def test_random_params_near_chance(self, small_synth):
        _, result, _ = small_synth
        corpus = result.corpus
        n = corpus.n_users
        instances = corpus_instances(corpus)
        cfg = ModelConfig(use_topology=False, dropout_keep=1.0)
        m = evaluate(instances, init_params(n, 8, 8, 10, seed=1), cfg, corpus.t_max)
        assert m.rr >= 1 / n
        k = 10
        sd = np.sqrt(len(instances) * (k / n) * (1 - k / n))
        assert abs(m.precision[k] * len(instances) - len(instances) * k / n) <= 3 * sd

    def test_frequency_baseline(self):
        vocab = Vocab("abcd")
        corpus = CascadeCorpus([Cascade("x", [2, 1], [0, 1]), Cascade("y", [2, 3], [0, 1])], vocab)
        scores = frequency_scores(corpus)
        assert scores.tolist() == [0, 1, 2, 1]
        test = corpus_instances([Cascade("z", [3, 2, 1], [0, 1, 2])])
        m = evaluate_scores(test, scores)
        assert m.rr == (1 + 1 / 2) / 2
        masked = evaluate_scores(test, scores, mask_observed=True)
        assert masked.rr == (1 + 1) / 2


class TestTrain:
    def test_lr_zero_leaves_params(self, small_synth):
        _, result, topo = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        params = small_params(result.corpus)
        before = params.copy()
        out = train(tr, va, params, ModelConfig(), TrainConfig(lr=0.0, max_epochs=2), topo=topo)
        for k in before.arrays:
            assert before[k].tobytes() == params[k].tobytes() == out.params[k].tobytes()

    def test_loss_decreases_over_thirty_epochs(self, small_synth):
        _, result, topo = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        out = train(tr, va, small_params(result.corpus), ModelConfig(),
                    TrainConfig(lr=0.01, max_epochs=30, patience=30), topo=topo)
        losses = [r["train_loss"] for r in out.history]
        assert len(losses) == 30 and losses[-1] < losses[0]
        assert np.polyfit(np.arange(30), losses, 1)[0] < 0

    def test_deterministic_logs(self, small_synth):
        _, result, topo = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        runs = [train(tr, va, small_params(result.corpus), ModelConfig(),
                      TrainConfig(lr=0.01, max_epochs=3, seed=4), topo=topo) for _ in range(2)]
        assert runs[0].history == runs[1].history
        assert len(runs[0].timings) == 3

    def test_patience_stops(self, small_synth):
        _, result, topo = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        out = train(tr, va, small_params(result.corpus), ModelConfig(),
                    TrainConfig(lr=0.0, max_epochs=20, patience=2), topo=topo)
        assert out.stop_reason == "patience" and len(out.history) == 3 and out.best_epoch == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_keeps_last_good(self, small_synth):
        _, result, topo = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        params = small_params(result.corpus)
        arrays = dict(params.arrays)
        arrays["b_c"] = np.full(len(arrays["b_c"]), 1e308)
        arrays["b_c"][0] = -1e308
        out = train(tr, va, ModelParams(arrays), ModelConfig(), TrainConfig(max_epochs=3), topo=topo)
        assert out.stop_reason == "non_finite" and out.history == []

    def test_topology_required(self, small_synth):
        _, result, _ = small_synth
        tr, va, _ = split_corpus(result.corpus, seed=0)
        with pytest.raises(ConfigError):
            train(tr, va, small_params(result.corpus), ModelConfig(), TrainConfig(max_epochs=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1)

    def test_checkpoint_reproduces_metrics(self, small_synth, tmp_path):
        _, result, topo = small_synth
        corpus = result.corpus
        params = small_params(corpus, seed=3)
        cfg = ModelConfig()
        instances = corpus_instances(corpus)
        a = evaluate(instances, params, cfg, corpus.t_max, topo)
        save_checkpoint(tmp_path / "m.npz", params, cfg, vocab_digest=corpus.vocab.digest(),
                        t_max=corpus.t_max, topo=topo)
        q, cfg2, meta, topo2 = load_checkpoint(tmp_path / "m.npz", corpus.vocab.digest())
        b = evaluate(instances, q, cfg2, meta["t_max"], topo2)
        assert a.record() == b.record()


class TestTrees:
    def test_length_two_forced(self):
        p = init_params(4, 4, 4, 5, seed=0)
        tree = infer_tree(Cascade("c", [3, 1], [0, 1]), p, ModelConfig(use_topology=False), 1.0)
        assert tree.parents.tolist() == [-1, 0]

    def test_valid_forest_on_random_params(self, small_synth):
        _, result, topo = small_synth
        p = small_params(result.corpus, seed=7)
        for c in result.corpus.cascades[:10]:
            tree = infer_tree(c, p, ModelConfig(), result.corpus.t_max, topo)
            assert tree.is_valid_forest() and tree.parents[1] == 0
            assert len(tree.position_lines()) == len(c) - 1
            assert len(tree.raw_edge_lines(result.corpus.vocab)) == len(c) - 1

    def test_uniform_beta_picks_earliest(self):
        p = zero_params(5, 4, 4, 5)
        tree = infer_tree(Cascade("c", [0, 1, 2, 3], [0, 1, 2, 3]), p,
                          ModelConfig(use_topology=False), 3.0)
        assert tree.parents.tolist() == [-1, 0, 0, 0]

    def test_parent_accuracy(self):
        planted = {"a": np.array([-1, 0, 0, 1]), "b": np.array([-1, 0])}
        assert parent_accuracy({"a": predecessor_parents(4), "b": predecessor_parents(2)},
                               planted) == 2 / 4
        assert predecessor_parents(3).tolist() == [-1, 0, 1]


class TestSynth:
    def test_zero_probability_gives_empty(self):
        result = synth_generate(random_graph(20, 3, seed=0), 0.0, 10, 5, seed=0)
        assert result.corpus.n_cascades == 0 and result.attempts == 100 and result.dropped == 100

    def test_path_with_certain_activation(self):
        path = SocialGraph.from_edges(6, [(k, k + 1) for k in range(5)])
        result = synth_generate(path, 1.0, 10, 40, seed=0)
        ends = [c for c in result.corpus if c.users[0] == 0]
        assert ends
        for c in ends:
            assert c.users.tolist() == list(range(6))
            assert result.parents[c.id].tolist() == [-1, 0, 1, 2, 3, 4]
            assert (np.diff(c.times) > 0).all()

    def test_planted_parents_are_neighbors(self, small_synth):
        graph, result, _ = small_synth
        for c in result.corpus:
            parents = result.parents[c.id]
            assert parents[0] == -1 and (parents[1:] < np.arange(1, len(c))).all()
            for child, parent in enumerate(parents[1:].tolist(), 1):
                assert graph.has_edge(int(c.users[parent]), int(c.users[child]))
                assert c.times[parent] <= c.times[child]

    def test_mean_length_matches_percolation(self):
        graph = random_graph(200, 4, seed=0)
        result = synth_generate(graph, 0.3, 20, 1000, seed=1)
        ours = np.mean([len(c) for c in result.corpus])
        theirs = live_edge_lengths(graph, 0.3, 20, 4000, seed=2).mean()
        assert abs(ours - theirs) / theirs < 0.05

    def test_seeded(self):
        graph = random_graph(40, 3, seed=1)
        a = synth_generate(graph, 0.4, 10, 20, seed=5).corpus
        b = synth_generate(graph, 0.4, 10, 20, seed=5).corpus
        assert [c.events for c in a] == [c.events for c in b]

    def test_bad_probability(self):
        with pytest.raises(ConfigError):
            synth_generate(random_graph(5, 2), 1.5, 10, 1)
