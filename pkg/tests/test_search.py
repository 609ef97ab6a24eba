import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_asr import tensor as T
from hybrid_asr.errors import ConfigError, ContractError
from hybrid_asr.gradcheck import check_gradients
from hybrid_asr.nsr import mixed_conv
from hybrid_asr.search import (DataSplit, SearchConfig, SearchModel, SearchSpace, SearchState, arch_gradient,
                               average_checkpoints, bilevel_step, crop_and_resoftmax, init_state, logits_for,
                               make_data, mixed_op_forward, planted_task, push_ring, retrain, run_search,
                               softmax_rows, warmup)
from hybrid_asr.tensor import Tape, Tensor

RETAINED_KERNELS = [5, 4, 3, 7]
RETAINED_ALPHA = [0.377, 0.279, 0.246, 0.098]


def tiny_config(**kw):
    base = dict(candidates=(0, 1, 5), blocks=1, channels=1, n_train=8, n_val=4, seq_len=12, batch_size=4,
                warmup_epochs=0, search_epochs=1, steps_per_epoch=2, retrain_steps=3)
    base.update(kw)
    return SearchConfig(**base)


def batch(data, idx=slice(None)):
    return Tensor(data[0][idx]), Tensor(data[1][idx])


class TestSpace:
    def test_default_desk_space(self):
        s = SearchSpace()
        assert s.candidates == (0, 3, 5, 7, 15, 30) and s.blocks == 2

    def test_full_space(self):
        s = SearchSpace.full()
        assert s.size == 31 and s.blocks == 12

    def test_31_is_capped(self):
        assert SearchSpace((0, 3, 31)).candidates == (0, 3, 30)

    @pytest.mark.parametrize("cands", [(), (3, 3), (30, 31), (-1,), (32,)])
    def test_invalid(self, cands):
        with pytest.raises(ConfigError):
            SearchSpace(cands)

    def test_config_json_round_trip(self, tmp_path):
        cfg = SearchConfig.planted(seed=3, xi=0.01)
        (tmp_path / "c.json").write_text(cfg.dumps())
        assert SearchConfig.load(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("kw", [dict(xi=-0.1), dict(crop_rule="median"), dict(search_bn_mode="batch"),
                                    dict(retrain_steps=-1), dict(n_val=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            SearchConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SearchConfig.from_dict({"epochs": 3})


class TestData:
    @pytest.mark.parametrize("n,n_val", [(20, 5), (21, 5), (10, 1)])
    def test_equal_disjoint_split(self, n, n_val):
        x = np.arange(n, dtype=float)[:, None, None]
        split = DataSplit.split(x, x, n_val)
        ids = [set(part[0][:, 0, 0].astype(int)) for part in (split.train1, split.train2, split.val)]
        assert abs(len(ids[0]) - len(ids[1])) <= 1
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
        assert set().union(*ids) == set(range(n))

    def test_unequal_rejected(self):
        z = np.zeros((4, 3, 1))
        with pytest.raises(ContractError):
            DataSplit((z, z), (z[:1], z[:1]), (z, z))

    def test_overlap_rejected(self):
        z = np.zeros((2, 3, 1))
        with pytest.raises(ContractError):
            DataSplit((z, z), (z, z), (z, z), (np.array([0, 1]), np.array([1, 2]), np.array([3])))

    def test_planted_target(self):
        x, y, k = planted_task(3, 7, 4, 20, 0.0, seed=1)
        assert k.shape == (7, 3)
        np.testing.assert_allclose(np.linalg.norm(k, axis=0), 1.0)
        assert np.all(np.abs(k) > 0.1)
        np.testing.assert_allclose(y, T.depthwise_conv1d(Tensor(x), Tensor(k)).data)


class TestMixedOp:
    def test_single_candidate(self, rng):
        state = init_state(tiny_config(candidates=(3,), channels=2))
        assert state.alpha[0, 0] == 1.0
        g = Tensor(rng.standard_normal((9, 2)))
        m = state.model.blocks[0]
        ref = m.trunk_bn(T.depthwise_conv1d(g, m.trunk_kernel, m.trunk_bias)) + m.branches[0].forward(g)
        np.testing.assert_allclose(mixed_op_forward(g, 0, state).data, ref.data, atol=1e-14)

    def test_zero_logits_give_uniform_weights(self):
        state = init_state(tiny_config(candidates=tuple(range(31))))
        np.testing.assert_allclose(state.alpha, 1 / 31, rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_logit_gradient_fd(self, seed):
        rng = np.random.default_rng(seed)
        state = init_state(tiny_config(candidates=(0, 3, 5, 8), channels=3, blocks=2, train_trunk=True), rng)
        g = rng.standard_normal((11, 3))

        def fn(c):
            state.c = c
            return mixed_op_forward(Tensor(g), 1, state)

        assert check_gradients(fn, [rng.standard_normal((2, 4))]) <= 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=31))
    def test_alpha_rows_sum_to_one(self, logits):
        assert abs(softmax_rows(np.array([logits])).sum() - 1) <= 1e-6


class TestWarmup:
    def test_zero_epochs_is_identity(self):
        cfg = tiny_config()
        state = init_state(cfg)
        before, c = state.model.snapshot(), state.c.copy()
        warmup(state, make_data(cfg).train1, 0, cfg)
        after = state.model.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert np.array_equal(state.c, c)

    def test_logits_untouched(self, rng):
        cfg = tiny_config(candidates=(3, 7), channels=2)
        state = init_state(cfg)
        state.c = rng.standard_normal(state.c.shape)
        c = state.c.copy()
        warmup(state, make_data(cfg).train1, 3, cfg)
        assert state.c.tobytes() == c.tobytes()

    def test_empty_train1(self):
        cfg = tiny_config()
        with pytest.raises(ContractError):
            warmup(init_state(cfg), (np.zeros((0, 4, 1)), np.zeros((0, 4, 1))), 1, cfg)

    def test_toy_quadratic_decreases(self):
        # running-statistics BNs make the model linear in each weight group
        cfg = tiny_config(candidates=(3, 5), channels=2, lr_w=0.01, momentum=0.9, weight_decay=0.0,
                          search_bn_mode="eval", batch_size=64)
        state = init_state(cfg)
        warmup(state, make_data(cfg).train1, 10, cfg)
        losses = [h[2] for h in state.history if h[0] == "warmup"]
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestBilevel:
    def test_first_order_is_tape_gradient(self):
        cfg = tiny_config(candidates=(0, 3, 7), channels=2)
        data = make_data(cfg)
        state = init_state(cfg)
        state.c = np.random.default_rng(0).standard_normal(state.c.shape)
        b1, b2 = batch(data.train1), batch(data.train2)
        got, _ = arch_gradient(state, b1, b2, cfg.lr_w, "eval")
        c = Tensor(state.c, requires_grad=True)
        with Tape() as tape:
            alpha = [T.getitem(T.softmax(c, axis=-1), 0)]
            d = state.model.forward(b2[0], alpha, "eval") - b2[1]
            loss = T.mean(d * d)
        tape.backward(loss)
        assert np.array_equal(got, c.grad)

    @pytest.mark.parametrize("xi", [0.05, 0.3])
    def test_second_order_matches_unrolled_fd(self, xi):
        cfg = tiny_config(xi=xi, noise=0.3)
        state = init_state(cfg)
        assert sum(p.size for p in state.model.parameters().values()) == 10
        rng = np.random.default_rng(2)
        state.c = rng.standard_normal(state.c.shape)
        data = make_data(cfg)
        b1, b2 = batch(data.train1), batch(data.train2)
        got, _ = arch_gradient(state, b1, b2, cfg.lr_w, "eval")
        params = state.model.parameters()
        w0 = {k: p.data.copy() for k, p in params.items()}

        def unrolled(c):
            st = SearchState(c, state.model, 0.0)
            for k, p in params.items():
                p.data = w0[k].copy()
            for p in params.values():
                p.requires_grad, p.grad = True, None
            with Tape() as tape:
                d = st.model.forward(b1[0], [Tensor(softmax_rows(c)[0])], "eval") - b1[1]
                l1 = T.mean(d * d)
            tape.backward(l1)
            for k, p in params.items():
                p.data = w0[k] - xi * p.grad
                p.requires_grad, p.grad = False, None
            d = st.model.forward(b2[0], [Tensor(softmax_rows(c)[0])], "eval").data - b2[1].data
            for k, p in params.items():
                p.data = w0[k]
            return np.mean(d * d)

        h = 1e-5
        fd = np.zeros_like(state.c)
        for i in range(fd.size):
            e = np.zeros_like(fd)
            e.flat[i] = h
            fd.flat[i] = (unrolled(state.c + e) - unrolled(state.c - e)) / (2 * h)
        assert np.linalg.norm(got - fd) / np.linalg.norm(fd) <= 1e-2
        first, _ = arch_gradient(SearchState(state.c, state.model, 0.0), b1, b2, cfg.lr_w, "eval")
        assert not np.allclose(first, got)

    def test_zero_norm_gradient_skips_second_order(self, caplog):
        cfg = tiny_config(xi=0.1)
        state = init_state(cfg)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 12, 1)))
        y = Tensor(state.model.forward(x, state.alphas(), "eval").data)
        with caplog.at_level(logging.WARNING, logger="hybrid_asr.search"):
            g, loss = arch_gradient(state, (x, y), (x, y), cfg.lr_w, "eval")
        assert loss == 0.0 and np.all(g == 0)
        assert "zero-norm" in caplog.text

    def test_step_updates_both(self):
        cfg = tiny_config(candidates=(3, 7), channels=2, lr_c=0.1)
        data = make_data(cfg)
        state = init_state(cfg)
        w0, c0 = state.model.snapshot(), state.c.copy()
        bilevel_step(state, batch(data.train1), batch(data.train2), cfg)
        assert state.step == 1
        assert not np.array_equal(state.c, c0)
        assert any(not np.array_equal(w0[k], v) for k, v in state.model.snapshot().items())
        np.testing.assert_allclose(state.alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_negative_xi(self):
        with pytest.raises(ContractError):
            SearchState(np.zeros((1, 3)), init_state(tiny_config()).model, -1.0)

    def test_planted_recovery(self):
        wins = [run_search(SearchConfig.planted(seed=s)).manifest["blocks"][0]["top_kernel"] == 7
                for s in range(10)]
        assert sum(wins) >= 8


class TestAveraging:
    def test_single_checkpoint_is_identity(self, rng):
        snap = {"w": rng.standard_normal(4)}
        c = rng.standard_normal((1, 3))
        avg, c_avg, alpha = average_checkpoints([(snap, c)])
        assert np.array_equal(avg["w"], snap["w"]) and np.array_equal(c_avg, c)
        np.testing.assert_allclose(alpha, softmax_rows(c))

    def test_two_checkpoints(self):
        avg, _, _ = average_checkpoints([({"w": np.zeros(3)}, np.zeros((1, 2))), ({"w": np.full(3, 2.0)},
                                                                                  np.ones((1, 2)))])
        np.testing.assert_array_equal(avg["w"], [1, 1, 1])

    def test_three_random_states_exact(self, rng):
        ring = [({"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(5)}, rng.standard_normal((2, 4)))
                for _ in range(3)]
        avg, c, _ = average_checkpoints(ring)
        for k in ("a", "b"):
            oracle = np.zeros_like(ring[0][0][k])
            for s, _ in ring:
                oracle = oracle + s[k]
            assert np.array_equal(avg[k], oracle / 3)
        assert np.array_equal(c, (ring[0][1] + ring[1][1] + ring[2][1]) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            average_checkpoints([({"w": np.zeros(3)}, np.zeros((1, 2))), ({"w": np.zeros(4)}, np.zeros((1, 2)))])

    def test_empty(self):
        with pytest.raises(ContractError):
            average_checkpoints([])

    def test_ring_keeps_best(self):
        state = init_state(tiny_config())
        for epoch, val in enumerate([5.0, 1.0, 3.0, 0.5, 4.0, 2.0, 9.0]):
            state.epoch = epoch
            push_ring(state, val, 3)
        assert [r[0] for r in state.ring] == [0.5, 1.0, 2.0]


class TestCrop:
    def test_mixed_signs(self):
        (kept, alpha), = crop_and_resoftmax([[0.5, -1.0, 0.2]], [3, 5, 7])
        assert kept == [3, 7]
        np.testing.assert_allclose(alpha, [0.574442516811659, 0.425557483188341], rtol=1e-12)

    def test_all_positive_keeps_alpha(self, rng):
        c = np.abs(rng.standard_normal((1, 5)))
        (kept, alpha), = crop_and_resoftmax(c, [0, 1, 2, 3, 4])
        assert kept == [0, 1, 2, 3, 4]
        np.testing.assert_allclose(alpha, softmax_rows(c)[0], rtol=1e-14)

    def test_all_negative_keeps_largest(self):
        (kept, alpha), = crop_and_resoftmax([[-3.0, -0.1, -2.0]], [3, 5, 7])
        assert kept == [5] and list(alpha) == [1.0]

    def test_below_uniform_rule(self):
        # alpha = softmax(0, 0.1, 5) puts only the last above 1/3
        (kept, _), = crop_and_resoftmax([[0.0, 0.1, 5.0]], [3, 5, 7], "below_uniform")
        assert kept == [7]
        (kept, _), = crop_and_resoftmax([[0.0, 0.1, 5.0]], [3, 5, 7], "logit_sign")
        assert kept == [3, 5, 7]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.lists(st.floats(-50, 50), min_size=4, max_size=4), min_size=1, max_size=6),
           st.sampled_from(["logit_sign", "below_uniform"]))
    def test_never_empty_and_normalized(self, c, rule):
        for kept, alpha in crop_and_resoftmax(np.array(c), [0, 3, 5, 7], rule):
            assert kept
            assert abs(alpha.sum() - 1) <= 1e-6

    def test_retained_branch_fixture(self):
        candidates = RETAINED_KERNELS + [0, 1, 2, 6, 8, 11]
        c = logits_for(RETAINED_ALPHA, dropped=6)
        (kept, alpha), = crop_and_resoftmax(c, candidates)
        assert kept == RETAINED_KERNELS
        np.testing.assert_allclose(alpha, RETAINED_ALPHA, atol=1e-3)

    def test_width_mismatch(self):
        with pytest.raises(ContractError):
            crop_and_resoftmax([[1.0, 2.0]], [3, 5, 7])


class TestRetrain:
    def test_alpha_frozen_and_fuse_ready(self):
        cfg = tiny_config(candidates=(3, 7), channels=2)
        data = make_data(cfg)
        retained = [([3, 7], np.array([0.3, 0.7]))]
        model = retrain(retained, 2, data.train, cfg, steps=5)
        assert model.blocks[0].alpha.tobytes() == np.array([0.3, 0.7]).tobytes()

    def test_zero_steps_is_initialization(self):
        cfg = tiny_config(candidates=(3, 7), channels=2)
        data = make_data(cfg)
        retained = [([3, 7], np.array([0.3, 0.7]))]
        init = SearchModel.init(2, [[3, 7]], 1, np.random.default_rng([0, 3]), alphas=[np.array([0.3, 0.7])])
        a = retrain(retained, 2, data.train, cfg, steps=0, seed=0).snapshot()
        b = init.snapshot()
        assert all(np.array_equal(a[k], b[k]) for k in b)
        c = retrain(retained, 2, data.train, cfg, steps=3, seed=0).snapshot()
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_empty_training_set(self):
        with pytest.raises(ContractError):
            retrain([([3], np.ones(1))], 1, (np.zeros((0, 4, 1)), np.zeros((0, 4, 1))), tiny_config())


class TestPipeline:
    def test_fused_not_worse_than_multi_branch(self):
        m = run_search(SearchConfig.planted(seed=1, candidates=(3, 7, 15), crop_rule="below_uniform")).manifest
        assert m["val_mse_fused"] <= 1.05 * m["val_mse_multi_branch"]

    def test_deterministic_manifest(self, tmp_path):
        cfg = tiny_config(seed=4)
        run_search(cfg, tmp_path / "a")
        run_search(cfg, tmp_path / "b")
        for name in ("manifest.json", "runlog.csv", "final.lsf", "final_fused.lsf"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        cfg = tiny_config(search_epochs=4, seed=2)
        run_search(cfg, tmp_path / "full")
        assert run_search(cfg, tmp_path / "cut", stop_after_epoch=2) is None
        run_search(cfg, tmp_path / "cut")
        for name in ("manifest.json", "runlog.csv", "final.lsf"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "cut" / name).read_bytes(), name

    def test_resume_with_other_config(self, tmp_path):
        run_search(tiny_config(), tmp_path, stop_after_epoch=1)
        with pytest.raises(ConfigError):
            run_search(tiny_config(lr_w=0.1), tmp_path)

    def test_zero_bilevel_steps_keep_uniform_alpha(self, tmp_path):
        m = run_search(tiny_config(search_epochs=0), tmp_path).manifest
        assert m["bilevel_steps"] == 0
        np.testing.assert_allclose(m["search_alpha"], [[1 / 3] * 3], rtol=1e-14)
        assert m["blocks"][0]["kernels"] == [0, 1, 5]

    def test_run_log_columns(self, tmp_path):
        run_search(tiny_config(search_epochs=2), tmp_path)
        lines = (tmp_path / "runlog.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,L_train1,L_train2,L_val,alpha_b0_k0,alpha_b0_k1,alpha_b0_k5"
        assert len(lines) == 1 + 4
