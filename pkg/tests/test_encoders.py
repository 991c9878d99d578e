import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stripflow.config import ModelConfig
from stripflow.encoders import ImagePair, block_layout, encode_context, encode_features
from stripflow.tensor import Tensor
from stripflow.trainer import init_params

from . import oracles


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(d=4, channels=32, ctx_channels=64, encoder_widths=(8, 12))
    return cfg, init_params(cfg, seed=3)


def frames(rng, n=1, size=32):
    return rng.uniform(0, 1, (n, 3, size, size)).astype(np.float32)


def test_feature_shapes(small, rng):
    cfg, params = small
    f = encode_features(ImagePair(frames(rng), frames(rng)), params, cfg)
    assert f.F1.shape == f.F2.shape == (1, 32, 8, 8)


@pytest.mark.parametrize("d", [2, 4, 8])
def test_output_is_one_over_d(d, rng):
    cfg = ModelConfig(d=d, channels=8, ctx_channels=8, encoder_widths=(4, 4))
    params = init_params(cfg, seed=0)
    f = encode_features(ImagePair(frames(rng, size=16), frames(rng, size=16)), params, cfg)
    assert f.F1.shape[2:] == (16 // d, 16 // d)


def test_unshared_branches_differ_on_identical_frames(small, rng):
    cfg, params = small
    img = frames(rng)
    f = encode_features(ImagePair(img, img.copy()), params, cfg)
    assert not np.allclose(f.F1.data, f.F2.data)


def test_zero_input_propagates_biases(rng):
    cfg = ModelConfig(d=4, channels=6, ctx_channels=8, encoder_widths=(4, 5))
    params = init_params(cfg, seed=1)
    for path, t in params.tensors():
        if path.endswith(".bias"):
            t.data[...] = rng.uniform(-1, 1, t.shape)
    zero = np.zeros((1, 3, 16, 16), dtype=np.float32)
    out = encode_features(ImagePair(zero, zero), params, cfg)
    for branch, got in (("f1", out.F1), ("f2", out.F2)):
        x = zero[0].astype(np.float64)
        for i, (_, _, k, stride) in enumerate(block_layout(cfg, cfg.channels)):
            w = params[f"encoder.{branch}.block{i}.weight"].data
            b = params[f"encoder.{branch}.block{i}.bias"].data
            x = oracles.elu(oracles.conv2d_loop(x, w, b, stride=stride, padding=k // 2))
        assert np.abs(got.data[0] - x).max() < 1e-5


def test_context_split_shapes(rng):
    cfg = ModelConfig(d=4, channels=16, ctx_channels=64, encoder_widths=(8, 8))
    ctx = encode_context(Tensor(frames(rng)), init_params(cfg, seed=0), cfg)
    assert ctx.hidden.shape == ctx.context.shape == (1, 32, 8, 8)


@given(seed=st.integers(0, 2**31), amp=st.floats(0.1, 1e3))
def test_context_activations_are_bounded(small, seed, amp):
    cfg, params = small
    img = np.random.default_rng(seed).uniform(-amp, amp, (1, 3, 32, 32)).astype(np.float32)
    ctx = encode_context(Tensor(img), params, cfg)
    assert np.all(np.abs(ctx.hidden.data) <= 1.0)
    assert np.all(ctx.context.data >= 0.0)


def test_moderate_inputs_stay_strictly_inside(small, rng):
    cfg, params = small
    ctx = encode_context(Tensor(frames(rng)), params, cfg)
    assert np.all(np.abs(ctx.hidden.data) < 1.0)


def test_indivisible_size_gives_crop_hint(small):
    cfg, params = small
    img = np.zeros((1, 3, 30, 33), dtype=np.float32)
    with pytest.raises(ValueError, match="crop to 28x32"):
        encode_features(ImagePair(img, img), params, cfg)


def test_mismatched_frames_rejected():
    with pytest.raises(ValueError, match="differ"):
        ImagePair(np.zeros((3, 8, 8)), np.zeros((3, 8, 12)))


def test_non_finite_frames_rejected():
    bad = np.zeros((3, 8, 8))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        ImagePair(bad, np.zeros((3, 8, 8)))
