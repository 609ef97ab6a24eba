import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_asr import checkpoint
from hybrid_asr import tensor as T
from hybrid_asr.encoder import (Encoder, EncoderConfig, build_from_checkpoint, encoder_forward, save_encoder,
                                subsample, time_recover, time_reduce)
from hybrid_asr.errors import CheckpointError, ConfigError, ContractError, DTypeError, ShapeError
from hybrid_asr.gradcheck import check_gradients, directional_errors
from hybrid_asr.nsr import FusedNSRConv, NSRConv
from hybrid_asr.tensor import Tensor


def mini_config(**kw):
    base = dict(input_dim=8, d_model=16, heads=2, ffn_dim=32, num_blocks=2, downsample_after=1,
                upsample_before=2)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="module")
def default_encoder():
    return Encoder.init(EncoderConfig(), np.random.default_rng(0), random_stats=True)


class TestConfig:
    def test_default_assignment(self):
        assert "".join(v[0] for v in EncoderConfig().variants()) == "LLLLLLSSSSSL"

    @pytest.mark.parametrize("kw", [dict(downsample_after=0), dict(downsample_after=6, upsample_before=6),
                                    dict(upsample_before=13), dict(attention="mixed"), dict(heads=3),
                                    dict(conv_kernel=15), dict(branch_alpha=(1.0,))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EncoderConfig(**kw)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 24).flatmap(lambda n: st.tuples(
        st.just(n), st.integers(1, n - 1)).flatmap(lambda t: st.tuples(
            st.just(t[0]), st.just(t[1]), st.integers(t[1] + 1, t[0])))))
    def test_assignment_is_pure_function_of_rate(self, geometry):
        n, down, up = geometry
        cfg = EncoderConfig(num_blocks=n, downsample_after=down, upsample_before=up)
        variants = cfg.variants()
        assert variants == EncoderConfig(num_blocks=n, downsample_after=down, upsample_before=up).variants()
        for j, v in enumerate(variants, start=1):
            assert v == ("SA" if cfg.frame_ms(j) == 80 else "LA")
            assert (v == "SA") == (down < j < up)

    @pytest.mark.parametrize("mode,expect", [("all_sa", "SA"), ("all_la", "LA")])
    def test_ablations(self, mode, expect):
        assert set(EncoderConfig(attention=mode).variants()) == {expect}

    def test_json_round_trip(self, tmp_path):
        cfg = mini_config(attention="all_sa", branch_kernels=(3, 5), branch_alpha=(0.5, 0.5))
        cfg.dump(tmp_path / "c.json")
        assert EncoderConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            EncoderConfig.from_dict({"depth": 3})


class TestPieces:
    @pytest.mark.parametrize("t_in,t_out", [(16, 4), (17, 5), (4, 1), (5, 2), (100, 25), (101, 26)])
    def test_subsample_length(self, rng, t_in, t_out):
        enc = Encoder.init(mini_config(), rng)
        out = subsample(Tensor(rng.standard_normal((t_in, 8)).astype(np.float32)), enc.sub)
        assert out.shape == (t_out, 16)

    def test_subsample_too_short(self, rng):
        enc = Encoder.init(mini_config(), rng)
        with pytest.raises(ShapeError):
            subsample(Tensor(np.zeros((3, 8), np.float32)), enc.sub)

    def test_subsample_gradient(self, rng):
        enc = Encoder.init(mini_config(), rng, np.float64)
        sub = enc.sub
        x = rng.standard_normal((9, 8))
        assert check_gradients(lambda t: subsample(t, sub), [x]) <= 1e-6

    def test_reduce_recover_lengths(self, rng):
        k, b = T.param(np.full((3, 4), 1 / 3)), T.param(np.zeros(4))
        x = Tensor(rng.standard_normal((8, 4)))
        r = time_reduce(x, k, b)
        assert r.shape == (4, 4)
        assert time_recover(r, x).shape == (8, 4)
        x7 = Tensor(rng.standard_normal((7, 4)))
        assert time_recover(time_reduce(x7, k, b), x7).shape == (7, 4)

    def test_recover_repeats_then_adds(self):
        x = Tensor(np.array([[1.0], [2.0]]))
        skip = Tensor(np.array([[10.0], [20.0], [30.0]]))
        np.testing.assert_array_equal(time_recover(x, skip).data[:, 0], [11, 21, 32])

    def test_recover_length_mismatch(self):
        with pytest.raises(ContractError):
            time_recover(Tensor(np.zeros((3, 2))), Tensor(np.zeros((8, 2))))

    def test_reduce_preserves_constant_at_init(self, rng):
        enc = Encoder.init(mini_config(), rng, np.float64)
        x = Tensor(np.tile(rng.standard_normal(16), (11, 1)))
        out = time_reduce(x, enc.reduce_kernel, enc.reduce_bias).data
        # the edge frames see one zero-padded tap; interior frames are exact
        np.testing.assert_allclose(out[1:-1], x.data[:out.shape[0] - 2], rtol=1e-12)


class TestForward:
    @pytest.mark.parametrize("t", [4, 17, 64])
    def test_output_shape(self, default_encoder, rng, t):
        out = default_encoder(rng.standard_normal((t, 80)).astype(np.float32))
        assert out.shape == (-(-t // 4), 256)
        assert np.isfinite(out.data).all()

    def test_ablation_same_shapes(self, rng):
        x = rng.standard_normal((50, 8)).astype(np.float32)
        shapes = {m: encoder_forward(x, Encoder.init(mini_config(attention=m), rng)).shape
                  for m in ("hybrid", "all_sa", "all_la")}
        assert len(set(shapes.values())) == 1

    def test_dtype_mismatch(self, rng):
        enc = Encoder.init(mini_config(), rng)
        with pytest.raises(DTypeError):
            enc(Tensor(np.zeros((8, 8))))

    def test_batch_axis_matches_single(self, rng):
        enc = Encoder.init(mini_config(num_blocks=3, upsample_before=3), rng, np.float64)
        x = rng.standard_normal((2, 13, 8))
        batched = enc(x).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], enc(x[i]).data, atol=1e-12)

    @pytest.mark.parametrize("t", [64, 256, 1024])
    def test_fused_matches_train(self, default_encoder, t):
        fused = default_encoder.fused()
        rng = np.random.default_rng(t)
        worst = 0.0
        for _ in range(20 if t < 1024 else 5):
            x = rng.standard_normal((t, 80)).astype(np.float32)
            worst = max(worst, float(np.max(np.abs(default_encoder(x).data - fused(x).data))))
        assert worst <= 1e-5


class TestGradients:
    @pytest.mark.parametrize("kw", [{}, dict(attention="all_sa"),
                                    dict(num_blocks=3, downsample_after=1, upsample_before=3)])
    def test_all_parameters_directional(self, kw):
        rng = np.random.default_rng(3)
        enc = Encoder.init(mini_config(**kw), rng, np.float64, random_stats=True)
        x = Tensor(rng.standard_normal((13, 8)))
        proj = Tensor(rng.standard_normal(((13 + 3) // 4, 16)))
        errors = directional_errors(lambda: (enc(x) * proj).sum(), enc.parameters())
        worst = max(errors, key=errors.get)
        assert errors[worst] <= 1e-3, worst

    def test_input_gradient_full(self):
        rng = np.random.default_rng(4)
        enc = Encoder.init(mini_config(), rng, np.float64, random_stats=True)
        x = rng.standard_normal((12, 8))
        assert check_gradients(lambda t: enc(t), [x]) <= 1e-3


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        enc = Encoder.init(mini_config(num_blocks=3, upsample_before=3), rng, random_stats=True)
        save_encoder(tmp_path / "e.lsf", enc)
        back = build_from_checkpoint(tmp_path / "e.lsf", "train")
        assert back.config == enc.config
        a, b = enc.to_tensors(), back.to_tensors()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k
        x = rng.standard_normal((20, 8)).astype(np.float32)
        np.testing.assert_array_equal(enc(x).data, back(x).data)

    def test_fused_load_matches_train_load(self, tmp_path, rng):
        enc = Encoder.init(mini_config(num_blocks=3, upsample_before=3), rng, random_stats=True)
        save_encoder(tmp_path / "e.lsf", enc)
        train = build_from_checkpoint(tmp_path / "e.lsf", "train")
        fused = build_from_checkpoint(tmp_path / "e.lsf", "fused")
        assert all(isinstance(b.conv, NSRConv) for b in train.blocks)
        assert all(isinstance(b.conv, FusedNSRConv) for b in fused.blocks)
        x = rng.standard_normal((40, 8)).astype(np.float32)
        assert np.max(np.abs(train(x).data - fused(x).data)) <= 1e-5

    def test_fused_checkpoint_round_trip(self, tmp_path, rng):
        enc = Encoder.init(mini_config(), rng, random_stats=True).fused()
        save_encoder(tmp_path / "f.lsf", enc)
        back = build_from_checkpoint(tmp_path / "f.lsf", "fused")
        x = rng.standard_normal((20, 8)).astype(np.float32)
        np.testing.assert_array_equal(enc(x).data, back(x).data)
        with pytest.raises(CheckpointError):
            build_from_checkpoint(tmp_path / "f.lsf", "train")

    def test_truncated(self, tmp_path, rng):
        save_encoder(tmp_path / "e.lsf", Encoder.init(mini_config(), rng))
        raw = (tmp_path / "e.lsf").read_bytes()
        (tmp_path / "e.lsf").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError):
            build_from_checkpoint(tmp_path / "e.lsf", "train")

    def test_missing_names_listed(self, tmp_path, rng):
        d = Encoder.init(mini_config(), rng).to_tensors()
        dropped = ["block0.attn.w_q", "block1.conv.trunk.kernel"]
        for k in dropped:
            del d[k]
        checkpoint.save(tmp_path / "e.lsf", d)
        with pytest.raises(CheckpointError) as info:
            build_from_checkpoint(tmp_path / "e.lsf", "train")
        assert set(dropped) <= set(info.value.missing)

    def test_not_an_encoder(self, tmp_path):
        checkpoint.save(tmp_path / "x.lsf", {"a": np.zeros(2)})
        with pytest.raises(CheckpointError):
            build_from_checkpoint(tmp_path / "x.lsf")

    def test_bad_form(self, tmp_path):
        with pytest.raises(ContractError):
            build_from_checkpoint(tmp_path / "x.lsf", "int8")
