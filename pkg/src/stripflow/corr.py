"""All-pair correlation, aggregation with the strip volumes, pyramid, lookup.

Volumes are stored ``(N, H, W, ..., H, W)``: the first spatial pair indexes
the query pixel in frame 1, the trailing pair the candidate in frame 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import PYRAMID_KERNELS
from .csc import OrthogonalVolumes
from .encoders import FeaturePair
from .tensor import Tensor, avg_pool2d, bilinear_sample, concat, matmul, register_gradcheck, stack


def all_pair_correlation(f: FeaturePair, scale: bool = True) -> Tensor:
    """``C[n, y1, x1, y2, x2] = <F1[n, :, y1, x1], F2[n, :, y2, x2]>``, optionally / sqrt(C)."""
    if f.F1.shape != f.F2.shape:
        raise ValueError(f"feature maps differ in shape: {f.F1.shape} vs {f.F2.shape}")
    n, c, h, w = f.F1.shape
    a = f.F1.reshape(n, c, h * w).permute(0, 2, 1)
    b = f.F2.reshape(n, c, h * w)
    vol = matmul(a, b)
    if scale:
        vol = vol * (1.0 / math.sqrt(c))
    return vol.reshape(n, h, w, h, w)


def aggregate(C: Tensor, vols: OrthogonalVolumes) -> Tensor:
    """Stack C with the broadcast sum of the strip volumes -> (N, H, W, 2, H, W).

    Channel 1 at ``(y, x, y2, x2)`` is ``C_v[y, x, x2] + C_h[y, x, y2]``.
    """
    n, h, w = C.shape[:3]
    if C.shape != (n, h, w, h, w):
        raise ValueError(f"all-pair volume must be (N, H, W, H, W), got {C.shape}")
    if vols.C_v.shape != (n, h, w, w) or vols.C_h.shape != (n, h, w, h):
        raise ValueError(
            f"strip volumes {vols.C_v.shape} / {vols.C_h.shape} do not match grid {h}x{w}"
        )
    strip = vols.C_v.reshape(n, h, w, 1, w) + vols.C_h.reshape(n, h, w, h, 1)
    return stack([C, strip], axis=3)


@dataclass
class CorrelationPyramid:
    """Pooled copies of the target-frame axes, one per kernel size.

    ``levels[k]`` has shape (N*H*W, channels, ceil(H/kk), ceil(W/kk)).
    In ``separate-1d`` mode ``strip_levels[k]`` holds the raw strip
    volumes pooled along their candidate axis: (N*H*W, 1, 1, ceil(W/kk))
    for C_v and (N*H*W, 1, 1, ceil(H/kk)) for C_h.
    """

    levels: list[Tensor]
    grid: tuple[int, int, int]  # N, H, W
    kernels: tuple[int, ...] = PYRAMID_KERNELS
    strip_levels: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]


def build_pyramid(C_hat: Tensor, kernels=PYRAMID_KERNELS, vols: OrthogonalVolumes | None = None) -> CorrelationPyramid:
    """Pool the last two axes of ``C_hat`` with each kernel.

    ``C_hat`` is (N, H, W, H, W) (single channel) or (N, H, W, K, H, W).
    Passing ``vols`` additionally builds 1-d pyramids of the strip volumes.
    """
    n, h, w = C_hat.shape[:3]
    base = C_hat.reshape(n * h * w, -1, C_hat.shape[-2], C_hat.shape[-1])
    levels = [avg_pool2d(base, k) for k in kernels]
    strip_levels = []
    if vols is not None:
        cv = vols.C_v.reshape(n * h * w, 1, 1, w)
        ch = vols.C_h.reshape(n * h * w, 1, 1, h)
        strip_levels = [(avg_pool2d(cv, k), avg_pool2d(ch, k)) for k in kernels]
    return CorrelationPyramid(levels, (n, h, w), tuple(kernels), strip_levels)


def tap_offsets(radius: int) -> np.ndarray:
    """(2r+1)^2 integer offsets (dx, dy), row-major over dy then dx."""
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.reshape(-1), dy.reshape(-1)], axis=-1)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """(H*W, 2) array of (x, y) pixel coordinates, row-major."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def lookup(pyr: CorrelationPyramid, flow: Tensor, radius: int) -> Tensor:
    """Sample every pyramid level around each pixel's current match.

    ``flow`` is (N, 2, H, W) on the 1/d grid. For level k the taps sit at
    ``(x + u) / kk + dx, (y + v) / kk + dy``. Output is (N, L, H, W) with
    features ordered level, then channel, then tap.
    """
    n, h, w = pyr.grid
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow must be {(n, 2, h, w)}, got {flow.shape}")
    b = n * h * w
    dtype = flow.dtype
    centers = flow.permute(0, 2, 3, 1).reshape(b, 1, 2) + Tensor(np.tile(pixel_grid(h, w), (n, 1)).reshape(b, 1, 2), dtype=dtype)
    offsets = tap_offsets(radius)
    taps = offsets.shape[0]
    feats = []
    for level, kk in enumerate(pyr.kernels):
        scaled = centers * (1.0 / kk)
        coords = scaled + Tensor(offsets.reshape(1, taps, 2), dtype=dtype)
        sampled = bilinear_sample(pyr.levels[level], coords)  # (B, ch, taps)
        feats.append(sampled.reshape(b, -1))
        if pyr.strip_levels:
            line = np.arange(-radius, radius + 1, dtype=np.float64).reshape(1, -1, 1)
            zeros = Tensor(np.zeros((b, 2 * radius + 1, 1)), dtype=dtype)
            cv, ch = pyr.strip_levels[level]
            xs = scaled[:, :, 0:1] + Tensor(line, dtype=dtype)
            ys = scaled[:, :, 1:2] + Tensor(line, dtype=dtype)
            feats.append(bilinear_sample(cv, concat([xs, zeros], axis=2)).reshape(b, -1))
            feats.append(bilinear_sample(ch, concat([ys, zeros], axis=2)).reshape(b, -1))
    out = concat(feats, axis=1)
    return out.reshape(n, h, w, -1).permute(0, 3, 1, 2)


def _lookup_sample(rng):
    n, h, w = 1, 4, 5
    c_hat = rng.uniform(-2, 2, (n, h, w, 2, h, w))
    # fractional offsets keep every tap well clear of lattice lines relative to the probe step
    flow = rng.integers(-2, 3, size=(n, 2, h, w)) * 8.0 + rng.uniform(0.2, 0.6, size=(n, 2, h, w))
    return c_hat, flow


@register_gradcheck("lookup", _lookup_sample)
def _lookup_chain(c_hat, flow):
    return lookup(build_pyramid(c_hat), flow, radius=1)
