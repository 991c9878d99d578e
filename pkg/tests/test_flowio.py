import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stripflow.flowio import (
    FLO_MAGIC,
    FloFormatError,
    GeneratorSpec,
    colorize,
    collate,
    epe,
    evaluate_predictions,
    f1_all,
    generate_sample,
    make_colorwheel,
    photometric_residual,
    read_flo,
    sequence_loss,
    write_flo,
    write_ppm,
)
from stripflow.tensor import Tensor


def test_translation_gives_constant_flow():
    s = generate_sample(GeneratorSpec(kind="translation", translation=(3.0, 0.0)), seed=0)
    np.testing.assert_array_equal(s.gt_flow[..., 0], 3.0)
    np.testing.assert_array_equal(s.gt_flow[..., 1], 0.0)
    assert photometric_residual(s) < 0.02


def test_identity_pair():
    s = generate_sample(GeneratorSpec(kind="identity"), seed=4)
    np.testing.assert_array_equal(s.I1, s.I2)
    assert not s.gt_flow.any()


def test_affine_matches_closed_form():
    s = generate_sample(GeneratorSpec(kind="affine", angle_deg=5.0, scale=1.0, translation=(0.0, 0.0)), seed=1)
    h = w = 64
    c = (h - 1) / 2
    th = math.radians(5.0)
    ref = np.zeros((h, w, 2))
    for y in range(h):
        for x in range(w):
            ref[y, x, 0] = c + math.cos(th) * (x - c) - math.sin(th) * (y - c) - x
            ref[y, x, 1] = c + math.sin(th) * (x - c) + math.cos(th) * (y - c) - y
    assert np.abs(s.gt_flow - ref).max() < 1e-5


@pytest.mark.parametrize("kind", ["translation", "affine", "composite"])
def test_samples_are_seeded_and_bounded(kind):
    spec = GeneratorSpec(kind=kind, height=32, width=32, max_disp=6.0)
    a, b = generate_sample(spec, 11), generate_sample(spec, 11)
    assert a.I1.tobytes() == b.I1.tobytes() and a.gt_flow.tobytes() == b.gt_flow.tobytes()
    assert a.I1.min() >= 0 and a.I1.max() <= 1
    assert np.hypot(a.gt_flow[..., 0], a.gt_flow[..., 1]).max() <= 6.0 + 1e-6
    assert a.valid.any()


def test_translation_residual_is_small():
    spec = GeneratorSpec(kind="translation")
    assert max(photometric_residual(generate_sample(spec, k)) for k in range(5)) < 0.02


def test_invalid_spec_rejected():
    with pytest.raises(ValueError, match="kind"):
        generate_sample(GeneratorSpec(kind="spiral"), 0)
    with pytest.raises(ValueError, match="max_disp"):
        generate_sample(GeneratorSpec(max_disp=100.0), 0)


def seq(values):
    return [Tensor(np.full((1, 2, 2, 2), v / 2.0), dtype=np.float64) for v in values]


def test_loss_zero_for_perfect_single_prediction():
    gt = np.zeros((1, 2, 2, 2))
    assert sequence_loss(seq([0.0]), gt, np.ones((1, 2, 2), bool)).item() == 0.0


def test_loss_hand_case():
    # per-pixel L1 (|du| + |dv|) of V0 is 2.0, of V1 is 1.0
    loss = sequence_loss(seq([2.0, 1.0]), np.zeros((1, 2, 2, 2)), np.ones((1, 2, 2), bool), gamma=0.8)
    assert loss.item() == pytest.approx(2.6, abs=1e-12)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=6))
def test_unit_gamma_is_plain_sum(values):
    loss = sequence_loss(seq(values), np.zeros((1, 2, 2, 2)), np.ones((1, 2, 2), bool), gamma=1.0)
    assert loss.item() == pytest.approx(sum(values), rel=1e-9, abs=1e-9)


def test_initial_prediction_is_supervised():
    gt, valid = np.zeros((1, 2, 2, 2)), np.ones((1, 2, 2), bool)
    a = sequence_loss(seq([2.0, 1.0]), gt, valid).item()
    b = sequence_loss(seq([5.0, 1.0]), gt, valid).item()
    assert a != b


def test_loss_ignores_invalid_pixels():
    pred = np.zeros((1, 2, 2, 2))
    pred[0, :, 0, 0] = 100.0
    valid = np.ones((1, 2, 2), bool)
    valid[0, 0, 0] = False
    assert sequence_loss([Tensor(pred)], np.zeros_like(pred), valid).item() == 0.0


def test_empty_mask_rejected():
    with pytest.raises(ValueError, match="empty"):
        sequence_loss(seq([1.0]), np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2), bool))


def test_epe_cases(rng):
    gt = rng.standard_normal((5, 6, 2))
    assert epe(gt, gt) == 0.0
    assert epe(gt + np.array([3.0, 4.0]), gt) == pytest.approx(5.0)
    pred = rng.standard_normal((5, 6, 2))
    ref = np.mean([math.hypot(*(pred[y, x] - gt[y, x])) for y in range(5) for x in range(6)])
    assert abs(epe(pred, gt) - ref) < 1e-6


def test_f1_dual_threshold():
    gt = np.zeros((3, 3, 2))
    gt[..., 0] = 100.0
    assert f1_all(gt, gt) == 0.0
    assert f1_all(gt + [4.0, 0.0], gt) == 0.0
    gt[..., 0] = 10.0
    assert f1_all(gt + [4.0, 0.0], gt) == 1.0


def test_evaluate_gt_predictor():
    spec = GeneratorSpec(height=32, width=32)
    samples = [generate_sample(spec, k) for k in range(3)]
    rep = evaluate_predictions([s.gt_flow for s in samples], samples)
    assert rep.epe == 0.0 and rep.f1_all == 0.0
    assert rep.summary() == "epe=0.000000 f1_all=0.000000"


def test_collate_layout():
    samples = [generate_sample(GeneratorSpec(height=16, width=16, max_disp=4), k) for k in range(2)]
    b = collate(samples)
    assert b.I1.shape == (2, 3, 16, 16) and b.gt.shape == (2, 2, 16, 16) and b.valid.shape == (2, 16, 16)
    np.testing.assert_array_equal(b.gt[1, 0], samples[1].gt_flow[..., 0])


def test_flo_minimal_file(tmp_path):
    p = tmp_path / "one.flo"
    write_flo(np.zeros((1, 1, 2)), p)
    raw = p.read_bytes()
    assert len(raw) == 20
    assert struct.unpack("<fiiff", raw) == (np.float32(FLO_MAGIC), 1, 1, 0.0, 0.0)


@given(
    arrays(np.float32, st.tuples(st.integers(1, 16), st.integers(1, 16), st.just(2)),
           elements=st.floats(-1e6, 1e6, width=32))
)
def test_flo_round_trip(tmp_path_factory, flow):
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(flow, p)
    assert p.stat().st_size == 12 + 8 * flow.shape[0] * flow.shape[1]
    assert read_flo(p).tobytes() == flow.tobytes()


def test_flo_rejects_bad_headers(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 0.0, 1, 1) + bytes(8))
    with pytest.raises(FloFormatError, match="magic"):
        read_flo(p)
    write_flo(np.zeros((2, 2, 2)), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FloFormatError, match="truncated"):
        read_flo(p)
    p.write_bytes(b"abc")
    with pytest.raises(FloFormatError, match="offset"):
        read_flo(p)


def test_colorize_conventions():
    assert np.all(colorize(np.zeros((2, 3, 2)), max_mag=1.0) == 255)
    red = colorize(np.array([[[2.0, 0.0]]]), max_mag=2.0)[0, 0]
    np.testing.assert_array_equal(red, make_colorwheel()[0].round().astype(np.uint8))
    np.testing.assert_array_equal(colorize(np.array([[[50.0, 0.0]]]), max_mag=2.0), colorize(np.array([[[2.0, 0.0]]]), max_mag=2.0))


def test_ppm_header(tmp_path):
    p = tmp_path / "x.ppm"
    write_ppm(np.zeros((2, 3, 3), np.uint8), p)
    assert p.read_bytes() == b"P6\n3 2\n255\n" + bytes(18)
