"""Synthetic data, losses, metrics, flow files and visualization.

Flow arrays handed to or returned from this module are ``(H, W, 2)`` (or
``(N, H, W, 2)``) numpy arrays with u (rightward) then v (downward), unless
a function says it takes network tensors.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .tensor import Tensor, absolute

FLO_MAGIC = 202021.25
GENERATOR_KINDS = ("identity", "translation", "affine", "composite")
TEXTURE_STD = 0.2


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------


@dataclass
class GeneratorSpec:
    """How to synthesize a pair. Unset transform fields are drawn at random."""

    kind: str = "translation"
    height: int = 64
    width: int = 64
    max_disp: float = 8.0
    sigma: float = 1.5  # texture smoothing, pixels
    multiple_of: int = 1
    translation: tuple[float, float] | None = None
    angle_deg: float | None = None
    scale: float | None = None
    max_angle_deg: float = 5.0
    max_scale_delta: float = 0.05

    def validate(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"generator kind must be one of {GENERATOR_KINDS}, got {self.kind!r}")
        if self.height % self.multiple_of or self.width % self.multiple_of:
            raise ValueError(
                f"image size {self.height}x{self.width} must be a multiple of {self.multiple_of}"
            )
        if self.max_disp < 0 or self.max_disp >= min(self.height, self.width):
            raise ValueError(
                f"max_disp {self.max_disp} must be nonnegative and below the image extent "
                f"{min(self.height, self.width)}"
            )
        if self.sigma <= 0:
            raise ValueError("texture sigma must be positive")


@dataclass
class SyntheticSample:
    I1: np.ndarray  # (3, H, W) float32 in [0, 1]
    I2: np.ndarray
    gt_flow: np.ndarray  # (H, W, 2) float32
    valid: np.ndarray  # (H, W) bool
    generator: dict = field(default_factory=dict)


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    """Smoothed noise standardized per channel to mean 0.5, std 0.2, clipped into [0, 1]."""
    noise = rng.standard_normal((3, h, w))
    tex = np.stack([gaussian_filter(c, sigma, mode="reflect") for c in noise])
    tex = (tex - tex.mean(axis=(1, 2), keepdims=True)) / tex.std(axis=(1, 2), keepdims=True)
    return np.clip(0.5 + TEXTURE_STD * tex, 0.0, 1.0)


def _sample_canvas(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.stack([map_coordinates(c, [ys, xs], order=1, mode="nearest") for c in canvas])


def _draw_translation(rng, max_disp: float) -> tuple[float, float]:
    r = max_disp * math.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * math.pi)
    return r * math.cos(a), r * math.sin(a)


def affine_flow(h: int, w: int, angle_deg: float, scale: float, translation) -> np.ndarray:
    """Closed-form displacement of ``p -> c + s R (p - c) + t`` about the image centre."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(angle_deg)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx, dy = xs - cx, ys - cy
    tx = cx + scale * (math.cos(th) * dx - math.sin(th) * dy) + translation[0]
    ty = cy + scale * (math.sin(th) * dx + math.cos(th) * dy) + translation[1]
    return np.stack([tx - xs, ty - ys], axis=-1)


def _inverse_affine(xs, ys, h, w, angle_deg, scale, translation):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(angle_deg)
    dx, dy = xs - translation[0] - cx, ys - translation[1] - cy
    sx = cx + (math.cos(th) * dx + math.sin(th) * dy) / scale
    sy = cy + (-math.sin(th) * dx + math.cos(th) * dy) / scale
    return sx, sy


def generate_sample(spec: GeneratorSpec, seed: int) -> SyntheticSample:
    """Band-limited texture pair with exact ground-truth flow.

    I2 is the backward warp of I1's texture under the chosen transform, so
    ``I2(x + flow(x)) == I1(x)`` up to interpolation. ``valid`` marks pixels
    whose target lands inside the frame (and, for the composite kind, is not
    hidden behind the moved foreground).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    margin = int(math.ceil(1.5 * spec.max_disp)) + 2
    canvas = _texture(rng, h + 2 * margin, w + 2 * margin, spec.sigma)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    record: dict = {"kind": spec.kind, "seed": int(seed)}

    I1 = canvas[:, margin : margin + h, margin : margin + w].copy()
    if spec.kind == "identity":
        flow = np.zeros((h, w, 2))
        I2 = I1.copy()
    elif spec.kind == "translation":
        t = spec.translation if spec.translation is not None else _draw_translation(rng, spec.max_disp)
        record["translation"] = [float(t[0]), float(t[1])]
        flow = np.broadcast_to(np.asarray(t, dtype=np.float64), (h, w, 2)).copy()
        I2 = _sample_canvas(canvas, xs - t[0] + margin, ys - t[1] + margin)
    elif spec.kind == "affine":
        angle = spec.angle_deg if spec.angle_deg is not None else rng.uniform(-spec.max_angle_deg, spec.max_angle_deg)
        scale = spec.scale if spec.scale is not None else 1.0 + rng.uniform(-spec.max_scale_delta, spec.max_scale_delta)
        t = spec.translation if spec.translation is not None else _draw_translation(rng, spec.max_disp / 2)
        flow = affine_flow(h, w, angle, scale, t)
        record.update(angle_deg=float(angle), scale=float(scale), translation=[float(t[0]), float(t[1])])
        sx, sy = _inverse_affine(xs, ys, h, w, angle, scale, t)
        I2 = _sample_canvas(canvas, sx + margin, sy + margin)
    else:
        I1, I2, flow, occluded, extra = _composite(rng, canvas, margin, spec)
        record.update(extra)

    if np.max(np.hypot(flow[..., 0], flow[..., 1])) > spec.max_disp + 1e-9:
        raise ValueError(f"generated flow exceeds max_disp={spec.max_disp}; tighten the transform")
    tx, ty = xs + flow[..., 0], ys + flow[..., 1]
    valid = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if spec.kind == "composite":
        valid &= ~occluded
    return SyntheticSample(
        I1.astype(np.float32), I2.astype(np.float32), flow.astype(np.float32), valid, record
    )


def _composite(rng, canvas, margin, spec):
    """Background translation plus a textured rectangle moving on its own."""
    h, w = spec.height, spec.width
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    fg_canvas = _texture(rng, h + 2 * margin, w + 2 * margin, spec.sigma)
    tb = _draw_translation(rng, spec.max_disp)
    tf = _draw_translation(rng, spec.max_disp)
    rh, rw = rng.uniform(0.25, 0.5) * h, rng.uniform(0.25, 0.5) * w
    y0, x0 = rng.uniform(0, h - rh), rng.uniform(0, w - rw)

    def inside(px, py):
        return (px >= x0) & (px < x0 + rw) & (py >= y0) & (py < y0 + rh)

    fg1 = inside(xs, ys)
    I1 = np.where(fg1, fg_canvas[:, margin : margin + h, margin : margin + w], canvas[:, margin : margin + h, margin : margin + w])
    bg2 = _sample_canvas(canvas, xs - tb[0] + margin, ys - tb[1] + margin)
    fg2 = _sample_canvas(fg_canvas, xs - tf[0] + margin, ys - tf[1] + margin)
    I2 = np.where(inside(xs - tf[0], ys - tf[1]), fg2, bg2)
    flow = np.where(fg1[..., None], np.asarray(tf), np.asarray(tb))
    # background pixels whose target is covered by the moved rectangle
    occluded = ~fg1 & inside(xs + tb[0] - tf[0], ys + tb[1] - tf[1])
    extra = {
        "background": [float(tb[0]), float(tb[1])],
        "foreground": [float(tf[0]), float(tf[1])],
        "rect": [float(x0), float(y0), float(rw), float(rh)],
    }
    return I1, I2, flow, occluded, extra


def warp_to_first(I2: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample I2 at x + flow(x): reconstructs I1 wherever the flow is right."""
    h, w = flow.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _sample_canvas(I2.astype(np.float64), xs + flow[..., 0], ys + flow[..., 1])


def photometric_residual(sample: SyntheticSample) -> float:
    """Mean absolute difference between I1 and the flow-warped I2 on valid pixels."""
    rec = warp_to_first(sample.I2, sample.gt_flow.astype(np.float64))
    diff = np.abs(rec - sample.I1)[:, sample.valid]
    return float(diff.mean())


@dataclass
class Batch:
    I1: Tensor  # (N, 3, H, W)
    I2: Tensor
    gt: np.ndarray  # (N, 2, H, W) network layout
    valid: np.ndarray  # (N, H, W)
    samples: list[SyntheticSample]


def collate(samples: list[SyntheticSample]) -> Batch:
    return Batch(
        Tensor(np.stack([s.I1 for s in samples])),
        Tensor(np.stack([s.I2 for s in samples])),
        np.stack([s.gt_flow.transpose(2, 0, 1) for s in samples]),
        np.stack([s.valid for s in samples]),
        samples,
    )


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------


def sequence_loss(preds, gt, valid, gamma: float = 0.8) -> Tensor:
    """Exponentially weighted L1 over the prediction sequence V0..Vm.

    Weight of V_i is ``gamma ** (m - i)``; each term is the per-sample mean
    over valid pixels of ``|du| + |dv|``, averaged over the batch. ``preds``
    are (N, 2, H, W) tensors; ``gt`` is (N, 2, H, W), ``valid`` (N, H, W).
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if len(preds) == 0:
        raise ValueError("empty prediction sequence")
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    valid = np.asarray(valid, dtype=bool)
    if gt.ndim == 3:
        gt, valid = gt[None], valid[None]
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    if np.any(counts == 0):
        bad = [int(i) for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"valid mask is empty for batch item(s) {bad}; the loss is undefined")
    dtype = preds[0].dtype
    weights = Tensor((valid / counts[:, None, None] / valid.shape[0])[:, None], dtype=dtype)
    target = Tensor(gt, dtype=dtype)
    m = len(preds) - 1
    total = None
    for i, pred in enumerate(preds):
        term = (absolute(pred - target) * weights).sum() * float(gamma ** (m - i))
        total = term if total is None else total + term
    return total


def _as_hw2(flow) -> np.ndarray:
    arr = np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=np.float64)
    return arr


def _check_grids(pred, gt, valid):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} are on different grids")
    if valid is None:
        valid = np.ones(pred.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != pred.shape[:-1]:
        raise ValueError(f"valid mask {valid.shape} does not match flow grid {pred.shape[:-1]}")
    return valid


def epe(pred, gt, valid=None) -> float:
    """Mean end-point error over valid pixels, for (..., 2) flow arrays."""
    pred, gt = _as_hw2(pred), _as_hw2(gt)
    valid = _check_grids(pred, gt, valid)
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    return float(err[valid].mean()) if valid.any() else float("nan")


def f1_all(pred, gt, valid=None, rule: str = "and") -> float:
    """Outlier fraction: error > 3 px and > 5% of |gt| (``rule="or"``: either)."""
    pred, gt = _as_hw2(pred), _as_hw2(gt)
    valid = _check_grids(pred, gt, valid)
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    mag = np.sqrt(np.sum(gt**2, axis=-1))
    abs_out, rel_out = err > 3.0, err > 0.05 * mag
    if rule == "and":
        outlier = abs_out & rel_out
    elif rule == "or":
        outlier = abs_out | rel_out
    else:
        raise ValueError(f"F1 rule must be 'and' or 'or', got {rule!r}")
    return float(outlier[valid].mean()) if valid.any() else float("nan")


@dataclass
class SampleScore:
    sample_id: int
    epe: float
    f1_all: float


@dataclass
class EvalReport:
    epe: float
    f1_all: float
    per_sample: list[SampleScore]
    f1_rule: str = "and"

    def summary(self) -> str:
        return f"epe={self.epe:.6f} f1_all={self.f1_all:.6f}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "epe", "f1_all"])
            for s in self.per_sample:
                writer.writerow([s.sample_id, repr(s.epe), repr(s.f1_all)])


def evaluate_predictions(preds, samples: list[SyntheticSample], rule: str = "and") -> EvalReport:
    """Score (H, W, 2) predictions; totals pool all valid pixels of all samples."""
    rows, errs, outs = [], [], []
    for i, (p, s) in enumerate(zip(preds, samples)):
        p = _as_hw2(p)
        rows.append(SampleScore(i, epe(p, s.gt_flow, s.valid), f1_all(p, s.gt_flow, s.valid, rule)))
        e = np.sqrt(np.sum((p - s.gt_flow) ** 2, axis=-1))[s.valid]
        mag = np.sqrt(np.sum(s.gt_flow.astype(np.float64) ** 2, axis=-1))[s.valid]
        errs.append(e)
        outs.append(((e > 3.0) & (e > 0.05 * mag)) if rule == "and" else ((e > 3.0) | (e > 0.05 * mag)))
    all_err, all_out = np.concatenate(errs), np.concatenate(outs)
    return EvalReport(float(all_err.mean()), float(all_out.mean()), rows, rule)


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------


class FloFormatError(ValueError):
    pass


def write_flo(flow, path) -> None:
    """Write an (H, W, 2) field as little-endian Middlebury ``.flo``."""
    arr = np.asarray(flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write a non-finite flow field")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(arr.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FloFormatError(f"{path}: header truncated at offset {len(raw)} (need 12 bytes)")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FloFormatError(f"{path}: bad magic {magic!r} at offset 0 (expected {FLO_MAGIC})")
    if w <= 0 or h <= 0:
        raise FloFormatError(f"{path}: nonpositive dimensions {w}x{h} at offset 4")
    need = 12 + 8 * w * h
    if len(raw) != need:
        kind = "truncated" if len(raw) < need else "has trailing bytes"
        raise FloFormatError(f"{path}: payload {kind}: {len(raw)} bytes, expected {need} (payload starts at offset 12)")
    return np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float32).reshape(h, w, 2)


# ---------------------------------------------------------------------------
# colour wheel visualization
# ---------------------------------------------------------------------------


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, starting at red, as (55, 3) floats in [0, 255]."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, start, end in segments:
        t = np.floor(255 * np.arange(n) / n) / 255
        start, end = np.asarray(start, float), np.asarray(end, float)
        rows.append(start + t[:, None] * (end - start))
    return np.concatenate(rows)


def colorize(flow, max_mag: float | None = None) -> np.ndarray:
    """(H, W, 2) flow -> (H, W, 3) uint8 image.

    Hue follows ``atan2(v, u)`` around the wheel (0 rad = red); saturation
    grows with ``|flow| / max_mag`` and clamps at 1. Zero flow is white.
    ``max_mag`` defaults to the 99th percentile magnitude.
    """
    f = np.asarray(flow, dtype=np.float64)
    u, v = f[..., 0], f[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99)) if mag.size else 0.0
    rad = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    wheel = make_colorwheel() / 255.0
    ncols = wheel.shape[0]
    pos = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi) * ncols
    k0 = np.floor(pos).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    frac = (pos - np.floor(pos))[..., None]
    col = (1 - frac) * wheel[k0] + frac * wheel[k1]
    col = 1 - rad[..., None] * (1 - col)
    return np.round(255 * col).astype(np.uint8)


def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6 PPM from an (H, W, 3) uint8 array."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def spec_record(spec: GeneratorSpec) -> dict:
    return asdict(spec)
