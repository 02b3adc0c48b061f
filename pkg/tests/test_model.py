import math

import numpy as np
import pytest

import oracle
from tandrud import numeric as nm
from tandrud.data import Cascade, PrefixInstance, make_prefix_instances
from tandrud.exceptions import CheckpointError, ContractError
from tandrud.model import (ModelConfig, ModelParams, cascade_encode, forward, fuse_gate,
                           init_params, load_checkpoint, loss, loss_and_grads, loss_tensor,
                           make_batch, param_shapes, predict, project_topology,
                           receiver_role, save_checkpoint, sender_role, time_gate, zero_params)

N, D, DG, T = 6, 4, 8, 5
EVAL = ModelConfig(dropout_keep=1.0, l2_lambda=0.0)


def random_params(seed=0, n=N, d=D, dg=DG, t=T, scale=1.0):
    """Glorot weights plus nonzero biases so every term is exercised."""
    p = init_params(n, d, dg, t, seed=seed)
    rng = np.random.default_rng(seed + 100)
    arrays = {k: v * scale + (rng.normal(scale=0.3, size=v.shape) if k.startswith("b_") else 0)
              for k, v in p.arrays.items()}
    return ModelParams(arrays)


def random_topo(seed=0, n=N, dg=DG):
    return np.random.default_rng(seed + 200).normal(size=(n, dg))


def instance(users, times, target):
    return PrefixInstance("t", len(users), np.array(users), np.array(times, float), target)


TOY = [
    instance([2], [0.0], 4),
    instance([0, 3, 5], [0.0, 1.5, 4.0], 1),
    instance([4, 1, 2, 0], [0.0, 0.2, 3.3, 9.0], 5),
]
T_MAX = 10.0


class TestInit:
    def test_deterministic_and_shapes(self):
        a, b = init_params(N, D, DG, T, seed=3), init_params(N, D, DG, T, seed=3)
        for k in a.arrays:
            assert a[k].tobytes() == b[k].tobytes()
        assert a.Xs.shape == (N, D) and a.W_t.shape == (D, T) and a.W_c.shape == (N, D)
        assert a.W_g.shape == (D, DG) and a.b_c.shape == (N,)
        assert set(a.arrays) == set(param_shapes(N, D, DG, T))

    def test_biases_zero_and_range(self):
        p = init_params(50, 16, 32, 10, seed=0)
        for k, v in p.arrays.items():
            if k.startswith("b_"):
                assert not v.any()
            elif v.ndim == 2:
                a = math.sqrt(6 / (v.shape[0] + v.shape[1]))
                assert np.abs(v).max() <= a
                assert abs(v.mean()) <= 3 * a / math.sqrt(3 * v.size)

    def test_rejects_bad_shape(self):
        arrays = dict(init_params(N, D, DG, T).arrays)
        arrays["W_ms"] = np.zeros((D, D + 1))
        with pytest.raises(Exception):
            ModelParams(arrays)


class TestRoles:
    def test_first_position_receiver_is_own_embedding(self):
        p = random_params()
        users = [3, 1, 4]
        np.testing.assert_array_equal(receiver_role(p, users, 0), p.Xr[3])

    def test_last_position_sender_is_own_embedding(self):
        p = random_params()
        users = [3, 1, 4]
        np.testing.assert_array_equal(sender_role(p, users, 2), p.Xs[4])

    def test_single_successor(self):
        p = random_params()
        np.testing.assert_allclose(sender_role(p, [0, 5], 0), p.Xr[5] + p.Xs[0], atol=1e-15)

    def test_equal_logits_give_mean(self):
        p = random_params()
        arrays = dict(p.arrays)
        arrays["W_so"] = np.zeros((D, D))  # all attention logits equal
        p = ModelParams(arrays)
        users = [0, 1, 2]
        dr = receiver_role(p, users, 2, sim=np.ones((3, 3)))
        np.testing.assert_allclose(dr - p.Xr[2], (p.Xs[0] + p.Xs[1]) / 2, atol=1e-15)

    def test_similarity_adjustment_by_hand(self):
        p = random_params()
        arrays = dict(p.arrays)
        arrays["W_so"] = np.zeros((D, D))  # raw attention [0.5, 0.5]
        p = ModelParams(arrays)
        sim = np.ones((3, 3))
        sim[0, 2] = sim[2, 0] = 2.0
        sim[1, 2] = sim[2, 1] = 0.0
        dr = receiver_role(p, [0, 1, 2], 2, sim=sim)
        a = math.e / (math.e + 1)
        assert a == pytest.approx(0.7311, abs=1e-4)
        np.testing.assert_allclose(dr - p.Xr[2], a * p.Xs[0] + (1 - a) * p.Xs[1], atol=1e-14)

    def test_position_out_of_range(self):
        with pytest.raises(ContractError):
            receiver_role(random_params(), [0, 1], 2)


class TestGates:
    def test_zero_inputs_give_zero(self):
        p = zero_params(N, D, DG, T)
        assert not fuse_gate(p, np.zeros(D), np.zeros(D)).any()

    def test_saturated_gate(self):
        p = random_params()
        arrays = dict(p.arrays)
        arrays["b_m"] = np.full(D, 1000.0)
        p = ModelParams(arrays)
        rng = np.random.default_rng(1)
        ds, dr = rng.normal(size=D), rng.normal(size=D)
        n = oracle.sigmoid(p.W_ns @ ds + p.W_nr @ dr + p.b_n)
        np.testing.assert_allclose(fuse_gate(p, ds, dr), (1 - n) * dr, atol=1e-12)

    def test_topology_projection(self):
        p = zero_params(N, D, DG, T)
        assert not project_topology(p, np.zeros((3, DG))).any()
        p = random_params(scale=50.0)
        g = project_topology(p, random_topo() * 10)
        assert (np.abs(g) <= 1).all()
        np.testing.assert_allclose(g[2], np.tanh(p.W_g @ random_topo()[2] * 10 + p.b_g), atol=1e-12)
        with pytest.raises(ContractError):
            project_topology(p, np.zeros((1, DG)), use_topology=False)

    def test_time_gate(self):
        onehot = np.eye(T)[[1, 3, 1]]
        lam = time_gate(zero_params(N, D, DG, T), onehot)
        np.testing.assert_array_equal(lam, 0.5)
        lam = time_gate(random_params(), onehot)
        np.testing.assert_array_equal(lam[0], lam[2])
        assert ((lam > 0) & (lam < 1)).all()
        with pytest.raises(ContractError):
            time_gate(random_params(), np.full((1, T), 0.2))
        with pytest.raises(ContractError):
            time_gate(random_params(), np.zeros((1, T)))


class TestEncodeAndPredict:
    def test_single_position(self):
        p = random_params()
        c, beta = cascade_encode(p, TOY[0], EVAL, T_MAX, random_topo())
        assert beta.tolist() == [1.0]
        out = oracle.prefix_forward(p.arrays, [2], [0.0], T_MAX, random_topo())
        np.testing.assert_allclose(c, out["f"][0], atol=1e-12)

    def test_identical_f_give_uniform_beta(self):
        arrays = dict(random_params().arrays)
        arrays["Xs"] = np.zeros((N, D))
        arrays["Xr"] = np.zeros((N, D))  # every u_j = 0, so every f_j = 0
        p = ModelParams(arrays)
        inst = instance([1, 2, 3], [0.0, 1.0, 5.0], 0)
        _, beta = cascade_encode(p, inst, ModelConfig(use_topology=False, dropout_keep=1.0), T_MAX)
        np.testing.assert_allclose(beta, 1 / 3, atol=1e-15)

    def test_zero_output_layer_uniform(self):
        p = zero_params(N, D, DG, T)
        np.testing.assert_allclose(predict(p, np.ones(D)), 1 / N, atol=1e-15)

    def test_predict_properties(self):
        p = random_params()
        c = np.random.default_rng(0).normal(size=D)
        probs = predict(p, c)
        assert abs(probs.sum() - 1) < 1e-8
        arrays = dict(p.arrays)
        arrays["b_c"] = p.b_c + 17.0
        assert np.argmax(predict(ModelParams(arrays), c)) == np.argmax(probs)
        masked = predict(p, c, observed=[0, 2])
        assert masked[0] == 0 and masked[2] == 0 and abs(masked.sum() - 1) < 1e-12

    @pytest.mark.parametrize("use_topology", [True, False])
    @pytest.mark.parametrize("k", range(3))
    def test_matches_oracle(self, k, use_topology):
        p = random_params(seed=k)
        topo = random_topo(seed=k)
        cfg = ModelConfig(use_topology=use_topology, dropout_keep=1.0)
        inst = TOY[k]
        res = forward(p, make_batch([inst], T_MAX, T, topo if use_topology else None), cfg)
        want = oracle.prefix_forward(p.arrays, list(inst.users), list(inst.times), T_MAX,
                                     topo if use_topology else None)
        for ours, theirs in [(res.dr[0], want["dr"]), (res.ds[0], want["ds"]),
                             (res.u[0], want["u"]), (res.f[0], want["f"]),
                             (res.beta[0], want["beta"]), (res.c[0], want["c"]),
                             (res.probs[0], want["p"])]:
            np.testing.assert_allclose(ours, theirs, rtol=0, atol=1e-10)

    def test_raw_logit_adjust_matches_oracle(self):
        p, topo = random_params(seed=4), random_topo(seed=4)
        cfg = ModelConfig(dropout_keep=1.0, raw_logit_adjust=True)
        inst = TOY[2]
        res = forward(p, make_batch([inst], T_MAX, T, topo), cfg)
        want = oracle.prefix_forward(p.arrays, list(inst.users), list(inst.times), T_MAX, topo,
                                     raw_logit_adjust=True)
        np.testing.assert_allclose(res.probs[0], want["p"], atol=1e-10)

    def test_padded_batch_equals_single(self):
        p, topo = random_params(seed=2), random_topo(seed=2)
        batched = forward(p, make_batch(TOY, T_MAX, T, topo), EVAL)
        for r, inst in enumerate(TOY):
            single = forward(p, make_batch([inst], T_MAX, T, topo), EVAL)
            np.testing.assert_allclose(batched.probs[r], single.probs[0], atol=1e-14)
            assert (batched.beta[r, inst.length:] == 0).all()


class TestInvariants:
    def test_prefix_causality(self):
        p, topo = random_params(seed=5), random_topo(seed=5)
        full = Cascade("c", [0, 3, 1, 5, 2], [0.0, 1.0, 2.0, 6.0, 7.0])
        cut = Cascade("c", [0, 3, 1], [0.0, 1.0, 2.0])
        a = make_prefix_instances(full)[1]
        b = make_prefix_instances(cut)[1]
        pa = forward(p, make_batch([a], T_MAX, T, topo), EVAL).probs
        pb = forward(p, make_batch([b], T_MAX, T, topo), EVAL).probs
        assert pa.tobytes() == pb.tobytes()

    def test_user_relabeling_leaves_loss_unchanged(self):
        p, topo = random_params(seed=6), random_topo(seed=6)
        perm = np.random.default_rng(0).permutation(N)  # new index of old user u is perm[u]
        inv = np.argsort(perm)
        arrays = dict(p.arrays)
        for k in ("Xs", "Xr", "W_c", "b_c"):
            arrays[k] = p[k][inv]
        q = ModelParams(arrays)
        relabeled = [instance(perm[i.users], i.times, perm[i.target]) for i in TOY]
        cfg = ModelConfig(dropout_keep=1.0, l2_lambda=1e-3)
        a = loss(p, make_batch(TOY, T_MAX, T, topo), cfg)
        b = loss(q, make_batch(relabeled, T_MAX, T, topo[inv]), cfg)
        assert abs(a - b) < 1e-10


class TestLoss:
    def test_uniform_predictor_is_log_n(self):
        p = zero_params(N, D, DG, T)
        value = loss(p, make_batch(TOY, T_MAX, T, random_topo()), ModelConfig(l2_lambda=0.0))
        assert value == pytest.approx(math.log(N), abs=1e-14)

    def test_confident_predictor_approaches_zero(self):
        p = zero_params(N, D, DG, T)
        arrays = dict(p.arrays)
        arrays["b_c"] = np.zeros(N)
        arrays["b_c"][4] = 60.0
        value = loss(ModelParams(arrays), make_batch([TOY[0]], T_MAX, T, random_topo()),
                     ModelConfig(l2_lambda=0.0))
        assert 0 <= value < 1e-20

    @pytest.mark.parametrize("use_topology", [True, False])
    def test_matches_oracle(self, use_topology):
        p, topo = random_params(seed=8), random_topo(seed=8)
        cfg = ModelConfig(use_topology=use_topology, dropout_keep=1.0, l2_lambda=1e-3)
        value = loss(p, make_batch(TOY, T_MAX, T, topo if use_topology else None), cfg)
        want = oracle.batch_loss(p.arrays, TOY, T_MAX, topo if use_topology else None, l2=1e-3)
        assert abs(value - want) < 1e-10

    @pytest.mark.parametrize("use_topology", [True, False])
    def test_gradients_match_finite_differences(self, use_topology):
        p, topo = random_params(seed=9), random_topo(seed=9)
        cfg = ModelConfig(use_topology=use_topology, dropout_keep=1.0, l2_lambda=1e-3)
        batch = make_batch(TOY[1:], T_MAX, T, topo if use_topology else None)
        errors = nm.finite_diff_check(lambda t: loss_tensor(t, batch, cfg), p.arrays,
                                      h=1e-5, per_param=True)
        assert max(errors.values()) < 1e-4, errors

    def test_unused_parameters_get_zero_gradient(self):
        p = random_params()
        cfg = ModelConfig(use_topology=False, dropout_keep=1.0)
        _, grads = loss_and_grads(p, make_batch(TOY, T_MAX, T), cfg)
        assert not grads["W_g"].any() and not grads["b_g"].any()
        assert set(grads) == set(p.arrays)

    def test_dropout_only_with_rng(self):
        p, topo = random_params(), random_topo()
        cfg = ModelConfig(dropout_keep=0.5, l2_lambda=0.0)
        batch = make_batch(TOY, T_MAX, T, topo)
        a = loss_and_grads(p, batch, cfg)[0]
        b = loss_and_grads(p, batch, cfg)[0]
        c = loss_and_grads(p, batch, cfg, np.random.default_rng(0))[0]
        assert a == b and c != a

    def test_config_validation(self):
        with pytest.raises(Exception):
            ModelConfig(dropout_keep=0.0)
        with pytest.raises(Exception):
            ModelConfig(l2_lambda=-1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p, topo = random_params(), random_topo()
        cfg = ModelConfig(dropout_keep=0.9)
        save_checkpoint(tmp_path / "m.npz", p, cfg, vocab_digest="abc", t_max=3.5, topo=topo)
        q, cfg2, meta, topo2 = load_checkpoint(tmp_path / "m.npz", vocab_digest="abc")
        assert cfg2 == cfg and meta["t_max"] == 3.5 and topo2.tobytes() == topo.tobytes()
        for k in p.arrays:
            assert p[k].tobytes() == q[k].tobytes()

    def test_rejects_vocab_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.npz", random_params(), EVAL, vocab_digest="abc", t_max=1.0)
        with pytest.raises(CheckpointError, match="vocab"):
            load_checkpoint(tmp_path / "m.npz", vocab_digest="xyz")

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "m.npz").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.npz")
