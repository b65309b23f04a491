import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egopose.errors import EmptySequence, IndexOutOfRange, ShapeMismatch
from egopose.gradcheck import check_gradients, toy_problem
from egopose.model import (
    LstmState,
    ModelConfig,
    SequenceBatch,
    StepInput,
    batch_from_steps,
    batch_loss,
    decode,
    embed_prev_pose,
    embed_scene,
    forward,
    forward_sequence,
    init_params,
    loss_and_grads,
    lstm_step,
    param_shapes,
    regression_loss,
    sequence_loss,
)

TINY = dict(motion_dim=2, o_dim=1, scene_dim=3, E=1)


def tiny(K=3, D=2, num_layers=1, **kw):
    return ModelConfig(K=K, D=D, num_layers=num_layers, **TINY, **kw)


def random_batch(cfg, rng, B=2, T=5):
    return SequenceBatch(
        m=rng.normal(size=(B, T, cfg.motion_dim)),
        o=rng.uniform(size=(B, T, cfg.o_dim)),
        s=rng.normal(size=(B, T, cfg.scene_dim)),
        prev=rng.integers(cfg.K, size=(B, T)),
    )


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def manual_lstm_layer(x, h, c, W_ih, W_hh, b):
    """Scalar loops over a single step; gate order i, f, g, o."""
    D = len(h)
    a = [b[r] + sum(W_ih[r][k] * x[k] for k in range(len(x))) + sum(W_hh[r][k] * h[k] for k in range(D))
         for r in range(4 * D)]
    h_new, c_new = [], []
    for j in range(D):
        i, f = sig(a[j]), sig(a[D + j])
        g, o = math.tanh(a[2 * D + j]), sig(a[3 * D + j])
        c_new.append(f * c[j] + i * g)
        h_new.append(o * math.tanh(c_new[j]))
    return h_new, c_new


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(K=700)
        assert (cfg.E, cfg.D, cfg.num_layers) == (256, 512, 2)
        assert cfg.input_dim == 135 + 50 + 2 * 256

    def test_shapes(self):
        cfg = ModelConfig(K=100, E=8, D=16)
        shapes = param_shapes(cfg)
        assert shapes["W_x"] == (8, 2048) and shapes["W_z"] == (8, 100) and shapes["W_p"] == (100, 16)
        assert shapes["W_ih0"] == (64, cfg.input_dim) and shapes["W_ih1"] == (64, 16)

    def test_regression_dims(self):
        cfg = ModelConfig(K=5, E=4, D=6, head="regression", output_dim=75)
        assert param_shapes(cfg)["W_p"] == (75, 6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(K=0)
        with pytest.raises(ValueError):
            ModelConfig(K=3, head="regression")

    def test_init_ranges(self):
        cfg = ModelConfig(K=5, E=4, D=6)
        p = init_params(cfg, seed=0, dtype=np.float64)
        bound = 1 / np.sqrt(cfg.input_dim)
        assert np.all(np.abs(p.weights["W_ih0"]) <= bound)
        np.testing.assert_array_equal(p.weights["b0"][6:12], 1.0)
        np.testing.assert_array_equal(p.weights["b0"][:6], 0.0)


class TestEmbedScene:
    def test_zero_weights_give_shift(self, rng):
        cfg = tiny()
        p = init_params(cfg, dtype=np.float64)
        p.weights["W_x"][:] = 0
        p.weights["bn_beta"][:] = 0.7
        for mode in ("train", "eval"):
            x = embed_scene(rng.normal(size=(4, 3)), p, cfg, mode=mode)
            np.testing.assert_allclose(x, 0.7, atol=1e-12)

    def test_eval_repeatable(self, rng):
        cfg = tiny()
        p = init_params(cfg, dtype=np.float64)
        s = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(embed_scene(s, p, cfg), embed_scene(s, p, cfg))

    def test_two_element_batch_by_hand(self):
        cfg = tiny(E=1) if False else tiny()
        p = init_params(cfg, dtype=np.float64)
        p.weights["W_x"][:] = [[1.0, 0.0, 0.0]]
        p.weights["bn_gamma"][:] = 2.0
        p.weights["bn_beta"][:] = 0.5
        s = np.array([[3.0, 9, 9], [1.0, 9, 9]])
        # mean 2, biased variance 1
        expected = 2.0 * np.array([1.0, -1.0]) / math.sqrt(1.0 + cfg.bn_eps) + 0.5
        np.testing.assert_allclose(embed_scene(s, p, cfg, mode="train")[:, 0], expected, atol=1e-12)

    def test_identical_inputs_finite(self):
        cfg = tiny()
        p = init_params(cfg, dtype=np.float64)
        x = embed_scene(np.ones((2, 3)), p, cfg, mode="train")
        assert np.all(np.isfinite(x))
        np.testing.assert_allclose(x[:, 0], p.weights["bn_beta"][0], atol=1e-9)

    def test_wrong_dim(self):
        cfg = tiny()
        with pytest.raises(ShapeMismatch):
            embed_scene(np.zeros((1, 4)), init_params(cfg), cfg)


class TestEmbedPrevPose:
    def test_column(self):
        cfg = tiny(K=4)
        p = init_params(cfg, dtype=np.float64)
        for i in range(4):
            np.testing.assert_array_equal(embed_prev_pose(i, p, cfg), p.weights["W_z"][:, i])
            onehot = np.eye(4)[i]
            np.testing.assert_allclose(embed_prev_pose(i, p, cfg), p.weights["W_z"] @ onehot)

    def test_zero(self):
        cfg = tiny(K=4)
        p = init_params(cfg)
        p.weights["W_z"][:] = 0
        assert not embed_prev_pose(2, p, cfg).any()

    def test_orthogonal_columns_distinct(self):
        cfg = ModelConfig(K=3, E=3, D=2, motion_dim=1, o_dim=1, scene_dim=1)
        p = init_params(cfg, dtype=np.float64)
        p.weights["W_z"][:] = np.eye(3)
        z = [embed_prev_pose(i, p, cfg) for i in range(3)]
        assert all(not np.array_equal(z[a], z[b]) for a in range(3) for b in range(a + 1, 3))

    def test_out_of_range(self):
        cfg = tiny(K=4)
        with pytest.raises(IndexOutOfRange):
            embed_prev_pose(4, init_params(cfg), cfg)


class TestLstmStep:
    def test_all_zero(self):
        cfg = tiny(num_layers=2)
        p = init_params(cfg, dtype=np.float64)
        for w in p.weights.values():
            w[:] = 0
        out = lstm_step(np.ones(cfg.input_dim), LstmState.zeros(cfg), p, cfg)
        for h, c in zip(out.h, out.c):
            assert not h.any() and not c.any()

    def test_saturated_forget_gate_carries_cell(self, rng):
        cfg = tiny(D=3)
        p = init_params(cfg, dtype=np.float64)
        D = cfg.D
        p.weights["W_ih0"][:] = 0
        p.weights["W_hh0"][:] = 0
        b = p.weights["b0"]
        b[:] = 0
        b[:D] = -50.0  # input gate shut
        b[D : 2 * D] = 50.0  # forget gate open
        state = LstmState([np.zeros((1, D))], [rng.normal(size=(1, D))])
        out = lstm_step(rng.normal(size=cfg.input_dim), state, p, cfg)
        np.testing.assert_array_equal(out.c[0], state.c[0][0])

    @pytest.mark.parametrize("num_layers", [1, 2])
    def test_hand_computed(self, rng, num_layers):
        cfg = tiny(D=2, num_layers=num_layers)
        p = init_params(cfg, seed=3, dtype=np.float64)
        for w in p.weights.values():
            w[...] = rng.normal(scale=0.8, size=w.shape)
        b = rng.normal(size=cfg.input_dim)
        state = LstmState([rng.normal(size=2) for _ in range(num_layers)], [rng.normal(size=2) for _ in range(num_layers)])
        out = lstm_step(b, state, p, cfg)
        x = list(b)
        for l in range(num_layers):
            W = p.weights
            h, c = manual_lstm_layer(x, list(state.h[l]), list(state.c[l]), W[f"W_ih{l}"].tolist(),
                                     W[f"W_hh{l}"].tolist(), W[f"b{l}"].tolist())
            np.testing.assert_allclose(out.h[l], h, atol=1e-14)
            np.testing.assert_allclose(out.c[l], c, atol=1e-14)
            x = h

    def test_wrong_dim(self):
        cfg = tiny()
        with pytest.raises(ShapeMismatch):
            lstm_step(np.zeros(cfg.input_dim + 1), LstmState.zeros(cfg), init_params(cfg), cfg)

    def test_matches_forward(self, rng):
        # stepping lstm_step over a sequence reproduces the batched forward pass
        cfg = tiny(K=3, D=4, num_layers=2)
        p = init_params(cfg, seed=1, dtype=np.float64)
        batch = random_batch(cfg, rng, B=1, T=4)
        out, _ = forward(batch, p, cfg, bn_mode="eval")
        x = embed_scene(batch.s[0], p, cfg, mode="eval")
        state = LstmState.zeros(cfg)
        for t in range(4):
            b = np.concatenate([batch.m[0, t], batch.o[0, t], x[t], embed_prev_pose(batch.prev[0, t], p, cfg)])
            state = lstm_step(b, state, p, cfg)
            logits = np.reshape(state.output, -1) @ p.weights["W_p"].T + p.weights["b_p"]
            np.testing.assert_allclose(out[0, t], logits, atol=1e-12)


class TestForwardSequence:
    def test_logit_shape(self, rng):
        cfg = tiny(K=6)
        p = init_params(cfg, dtype=np.float64)
        for mode in ("teacher_forced", "autoregressive"):
            out, ids = forward_sequence(random_batch(cfg, rng, B=1, T=7), p, cfg, mode=mode)
            assert out.shape == (1, 7, 6) and ids.shape == (1, 7)

    def test_single_frame_depends_on_init_and_frame0(self, rng):
        cfg = tiny(K=4)
        p = init_params(cfg, seed=2, dtype=np.float64)
        a = random_batch(cfg, rng, B=1, T=1)
        b = SequenceBatch(a.m.copy(), a.o.copy(), a.s.copy(), (a.prev + 1) % 4)
        oa, _ = forward_sequence(a, p, cfg, init_id=2)
        ob, _ = forward_sequence(b, p, cfg, init_id=2)
        np.testing.assert_array_equal(oa, ob)
        oc, _ = forward_sequence(a, p, cfg, init_id=3)
        assert not np.array_equal(oa, oc)

    def test_modes_agree_when_predictions_are_ground_truth(self, rng):
        cfg = tiny(K=5, D=4, num_layers=2)
        p = init_params(cfg, seed=4, dtype=np.float64)
        batch = random_batch(cfg, rng, B=2, T=9)
        init = 1
        ar_out, ar_ids = forward_sequence(batch, p, cfg, mode="autoregressive", init_id=init)
        # targets are the autoregressive argmax, so the model is perfect on them
        prev = np.concatenate([np.full((2, 1), init), ar_ids[:, :-1]], axis=1)
        tf = SequenceBatch(batch.m, batch.o, batch.s, prev)
        tf_out, tf_ids = forward_sequence(tf, p, cfg, mode="teacher_forced")
        np.testing.assert_allclose(tf_out, ar_out, atol=1e-12)
        np.testing.assert_array_equal(tf_ids, ar_ids)

    def test_autoregressive_deterministic(self, rng):
        cfg = tiny(K=5, D=4)
        p = init_params(cfg, seed=4)
        batch = random_batch(cfg, rng)
        a = decode(batch, p, cfg, 0)
        b = decode(batch, p, cfg, 0)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_fed_ids(self, rng):
        cfg = tiny(K=5)
        p = init_params(cfg, seed=4, dtype=np.float64)
        _, ids, fed = decode(random_batch(cfg, rng), p, cfg, 3)
        np.testing.assert_array_equal(fed[:, 0], 3)
        np.testing.assert_array_equal(fed[:, 1:], ids[:, :-1])

    def test_steps_builder(self, rng):
        steps = [StepInput(np.zeros(135), np.zeros(50), np.zeros(2048), 0) for _ in range(3)]
        assert batch_from_steps(steps).shape == (1, 3)
        with pytest.raises(EmptySequence):
            batch_from_steps([])

    def test_bad_ids(self, rng):
        cfg = tiny(K=3)
        p = init_params(cfg)
        with pytest.raises(IndexOutOfRange):
            decode(random_batch(cfg, rng), p, cfg, 3)
        bad = random_batch(cfg, rng)
        bad.prev[0, 0] = 7
        with pytest.raises(IndexOutOfRange):
            forward(bad, p, cfg)


class TestSequenceLoss:
    def test_uniform(self):
        N, K = 7, 11
        assert sequence_loss(np.zeros((N, K)), np.arange(N) % K) == pytest.approx(N * math.log(K), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((4, 3))
        targets = np.array([0, 2, 1, 1])
        logits[np.arange(4), targets] = 1000.0
        assert sequence_loss(logits, targets) < 1e-6

    def test_log_sum_exp_oracle(self, rng):
        logits = rng.normal(scale=5, size=(9, 6))
        targets = rng.integers(6, size=9)
        expected = 0.0
        for row, t in zip(logits.tolist(), targets):
            mx = max(row)
            expected += mx + math.log(math.fsum(math.exp(v - mx) for v in row)) - row[t]
        assert sequence_loss(logits, targets) == pytest.approx(expected, abs=1e-10)

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            sequence_loss(np.zeros((2, 3)), np.array([0, 3]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_shift_invariance(self, seed, shift):
        r = np.random.default_rng(seed)
        logits = r.normal(size=(5, 4))
        targets = r.integers(4, size=5)
        shifted = logits + shift
        assert sequence_loss(shifted, targets) == pytest.approx(sequence_loss(logits, targets), abs=1e-9)
        np.testing.assert_array_equal(np.argmax(shifted, axis=1), np.argmax(logits, axis=1))


class TestGradients:
    @pytest.mark.parametrize("head", ["classification", "regression"])
    def test_finite_differences(self, head):
        res = check_gradients(head)
        assert res.max_rel_error < 1e-4, res.rel_errors

    def test_zero_loss_zero_gradient(self):
        cfg, p, batch, _ = toy_problem()
        targets = np.full(batch.prev.shape, 2)
        p.weights["W_p"][:] = 0
        p.weights["b_p"][:] = 0
        p.weights["b_p"][2] = 1000.0
        loss, grads, _ = loss_and_grads(batch, targets, p, cfg, reduction="sum")
        assert loss < 1e-6
        assert math.sqrt(sum(float((g * g).sum()) for g in grads.values())) < 1e-6

    def test_unused_embedding_columns_get_no_gradient(self):
        cfg, p, batch, targets = toy_problem()
        batch.prev[:] = np.array([0, 2, 0])
        _, grads, _ = loss_and_grads(batch, targets, p, cfg)
        gz = grads["W_z"]
        assert not gz[:, [1, 3, 4]].any()
        assert gz[:, 0].any() and gz[:, 2].any()

    def test_label_permutation_symmetry(self):
        cfg, p, batch, targets = toy_problem()
        perm = np.array([3, 0, 4, 1, 2])  # new label of old class k is perm[k]
        q = p.copy()
        inv = np.argsort(perm)
        q.weights["W_p"] = p.weights["W_p"][inv]
        q.weights["b_p"] = p.weights["b_p"][inv]
        q.weights["W_z"] = p.weights["W_z"][:, inv]
        pb = SequenceBatch(batch.m, batch.o, batch.s, perm[batch.prev])
        a = batch_loss(batch, targets, p, cfg)
        b = batch_loss(pb, perm[targets], q, cfg)
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1.0, 1e4))
    def test_finite_activations(self, seed, scale):
        r = np.random.default_rng(seed)
        cfg = tiny(K=4, D=3, num_layers=2)
        p = init_params(cfg, seed=seed % 100, dtype=np.float64)
        batch = random_batch(cfg, r, B=3, T=4)
        batch.m *= scale
        batch.s *= scale
        out, cache = forward(batch, p, cfg)
        assert np.all(np.isfinite(out))
        for lc in cache.layers:
            assert np.all(np.isfinite(lc.h)) and np.all(np.abs(lc.h) <= 1)


class TestRegression:
    def test_output_dims(self, rng):
        cfg = ModelConfig(K=5, E=4, D=6, head="regression", output_dim=75)
        p = init_params(cfg, dtype=np.float64)
        batch = SequenceBatch(m=np.zeros((1, 4, 135)), o=np.zeros((1, 4, 50)), s=np.zeros((1, 4, 2048)),
                              prev=np.zeros((1, 4), dtype=int))
        out, ids = forward_sequence(batch, p, cfg, feedback=lambda y: np.zeros(len(y), dtype=int))
        assert out.shape == (1, 4, 75)

    def test_identical_prediction_zero_mse(self, rng):
        y = rng.normal(size=(2, 3, 75))
        loss, grad = regression_loss(y, y.copy(), np.ones((2, 3), dtype=bool))
        assert loss == 0.0 and not grad.any()

    def test_needs_feedback(self, rng):
        cfg = ModelConfig(K=5, E=4, D=6, head="regression", output_dim=6, **{k: v for k, v in TINY.items() if k != "E"})
        with pytest.raises(ValueError):
            decode(random_batch(cfg, rng), init_params(cfg), cfg, 0)
