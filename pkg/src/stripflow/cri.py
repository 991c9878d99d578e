"""Correlation regression initialization: a parameter-free initial flow.

Two readings of the regression are available:

``paper-literal``
    ``e = sum_k softmax(c)_k * c_k`` over each strip volume's candidate axis,
    i.e. the softmax-weighted expectation of the correlation itself. The
    result is in correlation units, not pixels.
``soft-argmax``
    ``p = sum_k softmax(c)_k * k`` minus the pixel's own coordinate, a
    displacement in grid pixels. This is the training default.

The ``C_v`` result seeds u (horizontal), the ``C_h`` result seeds v.
Neither mode receives model parameters.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .corr import CorrelationPyramid, lookup
from .csc import OrthogonalVolumes
from .tensor import Tensor, conv2d, register_gradcheck, softmax_lastdim, stack

CRI_MODES = ("paper-literal", "soft-argmax")


def softmax_weights(vols: OrthogonalVolumes) -> tuple[Tensor, Tensor]:
    return softmax_lastdim(vols.C_v), softmax_lastdim(vols.C_h)


def _expected_value(weights: Tensor, c: Tensor) -> Tensor:
    """``sum_k w_k c_k`` written as ``m + sum_k w_k (c_k - m)`` with m the slice max.

    Equal in exact arithmetic because the weights sum to one, and the
    gradient w.r.t. m is ``1 - sum w = 0``, so m is held constant. A uniform
    slice then returns its value bit-for-bit.
    """
    m = Tensor(c.data.max(axis=-1, keepdims=True), dtype=c.dtype)
    return (weights * (c - m)).sum(axis=-1) + m.reshape(m.shape[:-1])


def regress_init(vols: OrthogonalVolumes, mode: str = "soft-argmax") -> Tensor:
    """Initial flow (N, 2, H, W) on the 1/d grid from the strip volumes."""
    if mode not in CRI_MODES:
        raise ValueError(f"CRI mode must be one of {CRI_MODES}, got {mode!r}")
    n, h, w, _ = vols.C_v.shape
    wv, wh = softmax_weights(vols)
    dtype = vols.C_v.dtype
    if mode == "paper-literal":
        u = _expected_value(wv, vols.C_v)
        v = _expected_value(wh, vols.C_h)
    else:
        xs = Tensor(np.arange(w, dtype=np.float64), dtype=dtype)
        ys = Tensor(np.arange(h, dtype=np.float64), dtype=dtype)
        u = (wv * xs).sum(axis=-1) - xs
        v = (wh * ys).sum(axis=-1) - ys.reshape(h, 1)
    return stack([u, v], axis=1)


def init_head_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    if config.init_mode != "flow-head":
        return {}
    return {"init_head.weight": (2, config.lookup_channels, 3, 3), "init_head.bias": (2,)}


def init_flow(
    config: ModelConfig,
    grid: tuple[int, int, int],
    vols: OrthogonalVolumes | None = None,
    pyramid: CorrelationPyramid | None = None,
    params=None,
    dtype=np.float32,
) -> Tensor:
    """Seed flow V0 on the 1/d grid for the configured ``init_mode``.

    ``flow-head`` runs a learned 3x3 conv over the zero-displacement lookup
    features and needs ``init_head.*`` in ``params``.
    """
    n, h, w = grid
    mode = config.init_mode
    if mode == "zeros":
        return Tensor(np.zeros((n, 2, h, w)), dtype=dtype)
    if mode.startswith("cri-"):
        if vols is None:
            raise ValueError(f"init_mode {mode!r} needs the strip volumes")
        return regress_init(vols, mode[len("cri-"):])
    if params is None or "init_head.weight" not in params or "init_head.bias" not in params:
        raise ValueError("flow-head init requested but init_head parameters are not initialized")
    if pyramid is None:
        raise ValueError("flow-head init needs the correlation pyramid")
    feats = lookup(pyramid, Tensor(np.zeros((n, 2, h, w)), dtype=dtype), config.radius)
    return conv2d(feats, params["init_head.weight"], params["init_head.bias"], padding=1)


def _cri_sample(rng):
    return rng.uniform(-2, 2, (1, 3, 4, 4)), rng.uniform(-2, 2, (1, 3, 4, 3))


@register_gradcheck("cri_soft_argmax", _cri_sample)
def _cri_soft(cv, ch):
    return regress_init(OrthogonalVolumes(cv, ch), "soft-argmax")


@register_gradcheck("cri_paper_literal", _cri_sample)
def _cri_literal(cv, ch):
    return regress_init(OrthogonalVolumes(cv, ch), "paper-literal")
