import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stripflow.config import ModelConfig
from stripflow.corr import build_pyramid
from stripflow.cri import init_flow, regress_init, softmax_weights
from stripflow.csc import OrthogonalVolumes
from stripflow.params import ModelParams
from stripflow.tensor import Tensor
from stripflow.trainer import init_params


def vols(cv, ch):
    return OrthogonalVolumes(Tensor(cv, dtype=np.float64), Tensor(ch, dtype=np.float64))


def random_vols(rng, h=4, w=5, amp=3.0):
    return vols(rng.uniform(-amp, amp, (1, h, w, w)), rng.uniform(-amp, amp, (1, h, w, h)))


@pytest.mark.parametrize("mode", ["cri-paper-literal", "cri-soft-argmax"])
def test_reads_no_parameters(rng, mode):
    cfg = ModelConfig(channels=8, ctx_channels=8, encoder_widths=(4, 4), init_mode=mode)
    params = init_params(cfg, seed=0)
    params.access_count = 0
    init_flow(cfg, (1, 4, 5), vols=random_vols(rng), params=params)
    assert params.access_count == 0


def test_weights_sum_to_one(rng):
    for w in softmax_weights(random_vols(rng, amp=30.0)):
        assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-6


@given(c=st.floats(-50, 50), h=st.integers(1, 6), w=st.integers(1, 6))
def test_literal_on_uniform_slice_returns_constant(c, h, w):
    out = regress_init(vols(np.full((1, h, w, w), c), np.full((1, h, w, h), c)), "paper-literal").data
    assert np.all(out == c)


def test_soft_argmax_uniform_slice_is_center_of_mass():
    h, w = 3, 6
    out = regress_init(vols(np.zeros((1, h, w, w)), np.zeros((1, h, w, h))), "soft-argmax").data[0]
    xs = np.arange(w)
    ys = np.arange(h)[:, None]
    np.testing.assert_allclose(out[0], np.broadcast_to((w - 1) / 2 - xs, (h, w)), atol=1e-12)
    np.testing.assert_allclose(out[1], np.broadcast_to((h - 1) / 2 - ys, (h, w)), atol=1e-12)


@pytest.mark.parametrize("gap", [2.0, 5.0, 10.0, 20.0])
def test_dominant_entry_matches_expectation_oracle(rng, gap):
    h, w = 2, 7
    cv = rng.uniform(0, 1, (1, h, w, w))
    k_star = 4
    cv[..., k_star] += gap
    out = regress_init(vols(cv, np.zeros((1, h, w, h))), "soft-argmax").data[0, 0]
    for y, x in np.ndindex(h, w):
        p = np.exp(cv[0, y, x] - cv[0, y, x].max())
        expected = float((p / p.sum()) @ np.arange(w)) - x
        assert abs(out[y, x] - expected) < 1e-4
    if gap >= 20.0:
        np.testing.assert_allclose(out, np.broadcast_to(k_star - np.arange(w), (h, w)), atol=1e-4)


@given(seed=st.integers(0, 2**31), shift=st.floats(-20, 20))
def test_shift_invariance(seed, shift):
    v = random_vols(np.random.default_rng(seed))
    shifted = vols(v.C_v.data + shift, v.C_h.data + shift)
    a = regress_init(v, "soft-argmax").data
    b = regress_init(shifted, "soft-argmax").data
    assert np.abs(a - b).max() < 1e-5


@given(seed=st.integers(0, 2**31))
def test_argmax_preserved_under_sharpening(seed):
    v = random_vols(np.random.default_rng(seed))
    sharp = regress_init(vols(v.C_v.data * 1e4, v.C_h.data * 1e4), "soft-argmax").data[0]
    w = v.C_v.shape[-1]
    expected_u = v.C_v.data[0].argmax(axis=-1) - np.arange(w)
    assert np.abs(sharp[0] - expected_u).max() < 1e-5


def test_zeros_mode():
    cfg = ModelConfig(init_mode="zeros", csc=False)
    assert not init_flow(cfg, (2, 3, 4)).data.any()


@pytest.mark.parametrize("mode", ["paper-literal", "soft-argmax"])
def test_cri_modes_delegate(rng, mode):
    v = random_vols(rng)
    cfg = ModelConfig(init_mode="cri-" + mode)
    got = init_flow(cfg, (1, 4, 5), vols=v).data
    assert got.tobytes() == regress_init(v, mode).data.tobytes()


def test_flow_head_with_zero_weights_is_zero(rng):
    cfg = ModelConfig(channels=8, ctx_channels=8, encoder_widths=(4, 4), init_mode="flow-head", radius=1)
    params = ModelParams(
        {"init_head.weight": np.zeros((2, cfg.lookup_channels, 3, 3)), "init_head.bias": np.zeros(2)}
    )
    pyr = build_pyramid(Tensor(rng.standard_normal((1, 4, 4, 2, 4, 4))))
    assert not init_flow(cfg, (1, 4, 4), pyramid=pyr, params=params).data.any()


def test_cri_without_csc_is_rejected():
    with pytest.raises(ValueError, match="csc"):
        ModelConfig(csc=False, init_mode="cri-soft-argmax")


def test_unknown_mode():
    with pytest.raises(ValueError):
        regress_init(random_vols(np.random.default_rng(0)), "argmax")
