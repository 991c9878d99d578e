"""Iterative refinement: motion encoder, ConvGRU update block, convex upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .corr import CorrelationPyramid, aggregate, all_pair_correlation, build_pyramid, lookup
from .cri import init_flow
from .csc import OrthogonalVolumes, strip_volumes
from .encoders import ContextFeatures, FeaturePair, ImagePair, encode_context, encode_features
from .tensor import (
    Function,
    GradCheckReport,
    Tensor,
    bilinear_sample,
    check_gradients,
    concat,
    conv2d,
    elu,
    register_gradcheck,
    sigmoid,
    tanh,
)

TRAIN_ITERS = 12
KITTI_EVAL_ITERS = 24
SINTEL_EVAL_ITERS = 32


def param_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    hid, ctx = config.hidden_channels, config.context_channels
    mc, mf, mo = config.motion_corr, config.motion_flow, config.motion_out
    gru_in = hid + mo + ctx
    d2 = config.d * config.d
    layers = {
        "update.motion.corr": (mc, config.lookup_channels, 1),
        "update.motion.flow": (mf, 2, 3),
        "update.motion.fuse": (mo - 2, mc + mf, 3),
        "update.gru.convz": (hid, gru_in, 3),
        "update.gru.convr": (hid, gru_in, 3),
        "update.gru.convq": (hid, gru_in, 3),
        "update.flow_head.conv1": (hid, hid, 3),
        "update.flow_head.conv2": (2, hid, 3),
        "update.mask_head.conv1": (hid, hid, 3),
        "update.mask_head.conv2": (9 * d2, hid, 1),
    }
    specs = {}
    for name, (cout, cin, k) in layers.items():
        specs[f"{name}.weight"] = (cout, cin, k, k)
        specs[f"{name}.bias"] = (cout,)
    return specs


def _conv(x: Tensor, params, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], padding=w.shape[-1] // 2)


def motion_features(corr_feats: Tensor, flow: Tensor, params) -> Tensor:
    c = elu(_conv(corr_feats, params, "update.motion.corr"))
    f = elu(_conv(flow, params, "update.motion.flow"))
    m = elu(_conv(concat([c, f], axis=1), params, "update.motion.fuse"))
    return concat([m, flow], axis=1)


def mask_head(hidden: Tensor, params) -> Tensor:
    # 0.25 keeps the initial mask logits small, as in the inherited baseline
    return _conv(elu(_conv(hidden, params, "update.mask_head.conv1")), params, "update.mask_head.conv2") * 0.25


def flow_head(hidden: Tensor, params) -> Tensor:
    return _conv(elu(_conv(hidden, params, "update.flow_head.conv1")), params, "update.flow_head.conv2")


@dataclass
class UpdateInputs:
    context: Tensor  # (N, C_ctx, H, W), static
    corr_features: Tensor  # (N, L, H, W), per iteration
    current_flow: Tensor  # (N, 2, H, W), 1/d grid


def gru_step(hidden: Tensor, inputs: UpdateInputs, params) -> tuple[Tensor, Tensor, Tensor]:
    """One update: returns (new hidden, delta flow, upsampling mask logits).

    z = sig(conv_z[h, x]), r = sig(conv_r[h, x]), q = tanh(conv_q[r*h, x]),
    h' = (1 - z) * h + z * q, with x = [motion features, context].
    """
    if hidden.shape[2:] != inputs.context.shape[2:] or inputs.corr_features.shape[2:] != hidden.shape[2:]:
        raise ValueError(
            f"update block grid mismatch: hidden {hidden.shape}, context {inputs.context.shape}, "
            f"corr {inputs.corr_features.shape}"
        )
    x = concat([motion_features(inputs.corr_features, inputs.current_flow, params), inputs.context], axis=1)
    hx = concat([hidden, x], axis=1)
    # z and r share one im2col pass
    nh = hidden.shape[1]
    wzr = concat([params["update.gru.convz.weight"], params["update.gru.convr.weight"]], axis=0)
    bzr = concat([params["update.gru.convz.bias"], params["update.gru.convr.bias"]], axis=0)
    zr = sigmoid(conv2d(hx, wzr, bzr, padding=1))
    z, r = zr[:, :nh], zr[:, nh:]
    q = tanh(_conv(concat([r * hidden, x], axis=1), params, "update.gru.convq"))
    new_hidden = (1.0 - z) * hidden + z * q
    return new_hidden, flow_head(new_hidden, params), mask_head(new_hidden, params)


def apply_update(flow: Tensor, delta: Tensor) -> Tensor:
    if flow.shape != delta.shape:
        raise ValueError(f"flow {flow.shape} and update {delta.shape} are on different grids")
    return flow + delta


class ConvexUpsample(Function):
    """Each full-res subpixel is a softmax-weighted mix of its 3x3 coarse neighbourhood.

    flow (N, 2, H, W), logits (N, 9*d*d, H, W) laid out as (9, d, d) ->
    (N, 2, H*d, W*d). Borders replicate the edge vectors so constant fields
    stay constant.
    """

    def forward(self, flow, logits, d):
        n, _, h, w = flow.shape
        z = logits.astype(np.float64).reshape(n, 9, d, d, h, w)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        m = (e / e.sum(axis=1, keepdims=True)).astype(flow.dtype)
        fp = np.pad(flow, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        nb = np.stack([fp[:, :, ky : ky + h, kx : kx + w] for ky in range(3) for kx in range(3)], axis=2)
        self.saved = (m, nb, d, flow.shape)
        out = d * np.einsum("nkijhw,nckhw->nchiwj", m, nb, optimize=True)
        return np.ascontiguousarray(out.reshape(n, 2, h * d, w * d))

    def backward(self, g):
        m, nb, d, (n, c, h, w) = self.saved
        gq = g.reshape(n, c, h, d, w, d)
        gflow = glogits = None
        if self.needs_grad[0]:
            gnb = d * np.einsum("nchiwj,nkijhw->nckhw", gq, m, optimize=True)
            gfp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
            for k in range(9):
                ky, kx = divmod(k, 3)
                gfp[:, :, ky : ky + h, kx : kx + w] += gnb[:, :, k]
            gfp[:, :, 1, :] += gfp[:, :, 0, :]
            gfp[:, :, h, :] += gfp[:, :, h + 1, :]
            gfp[:, :, :, 1] += gfp[:, :, :, 0]
            gfp[:, :, :, w] += gfp[:, :, :, w + 1]
            gflow = np.ascontiguousarray(gfp[:, :, 1 : h + 1, 1 : w + 1])
        if self.needs_grad[1]:
            gm = d * np.einsum("nchiwj,nckhw->nkijhw", gq, nb, optimize=True)
            dot = np.sum(gm * m, axis=1, keepdims=True)
            glogits = (m * (gm - dot)).reshape(n, 9 * d * d, h, w).astype(g.dtype)
        return gflow, glogits


def convex_upsample(flow: Tensor, mask_logits: Tensor, d: int) -> Tensor:
    """Full-resolution flow, values scaled by d into full-res pixels."""
    n, c, h, w = flow.shape
    if c != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape}")
    if mask_logits.shape != (n, 9 * d * d, h, w):
        raise ValueError(f"mask logits must be {(n, 9 * d * d, h, w)}, got {mask_logits.shape}")
    return ConvexUpsample.apply(flow, mask_logits, d=d)


def upsample_bilinear(flow: Tensor, d: int) -> Tensor:
    """Plain bilinear x d upsampling (pixel-centre aligned), values scaled by d."""
    n, c, h, w = flow.shape
    ys, xs = np.meshgrid(
        (np.arange(h * d) + 0.5) / d - 0.5, (np.arange(w * d) + 0.5) / d - 0.5, indexing="ij"
    )
    grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    coords = Tensor(np.broadcast_to(grid, (n,) + grid.shape), dtype=flow.dtype)
    return bilinear_sample(flow, coords).reshape(n, c, h * d, w * d) * float(d)


@dataclass
class RefinementResult:
    flows: list[Tensor]  # full resolution, V0 .. Vm
    low_res: list[Tensor]  # 1/d grid, V0 .. Vm
    features: FeaturePair | None = None
    context: ContextFeatures | None = None
    volumes: OrthogonalVolumes | None = None
    pyramid: CorrelationPyramid | None = None
    hidden: list[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.flows[-1]


def correlation_stage(feats: FeaturePair, params, config: ModelConfig):
    """All-pair volume, optional strip volumes, and the pyramid for lookup."""
    C = all_pair_correlation(feats, config.scale_corr)
    if not config.csc:
        return None, build_pyramid(C)
    vols = strip_volumes(feats.F1, feats.F2, params, config)
    if config.aggregate_mode == "broadcast-sum":
        return vols, build_pyramid(aggregate(C, vols))
    return vols, build_pyramid(C, vols=vols)


def run_refinement(pair: ImagePair, params, config: ModelConfig, iters: int = TRAIN_ITERS) -> RefinementResult:
    """Encode, correlate, initialize and run ``iters`` GRU updates.

    Returns m+1 full-resolution flows. V0 is upsampled with the mask head on
    the initial hidden state in flow-head mode and bilinearly otherwise.
    """
    if iters < 1:
        raise ValueError(f"need at least one refinement iteration, got {iters}")
    d = config.d
    feats = encode_features(pair, params, config)
    ctx = encode_context(pair.I1, params, config)
    vols, pyr = correlation_stage(feats, params, config)
    n, _, h, w = feats.F1.shape
    flow = init_flow(config, (n, h, w), vols, pyr, params, dtype=feats.F1.dtype)
    hidden = ctx.hidden
    if config.init_mode == "flow-head":
        up = convex_upsample(flow, mask_head(hidden, params), d)
    else:
        up = upsample_bilinear(flow, d)
    result = RefinementResult([up], [flow], feats, ctx, vols, pyr, [hidden])
    for _ in range(iters):
        corr_feats = lookup(pyr, flow, config.radius)
        hidden, delta, mask = gru_step(hidden, UpdateInputs(ctx.context, corr_feats, flow), params)
        flow = apply_update(flow, delta)
        result.low_res.append(flow)
        result.flows.append(convex_upsample(flow, mask, d))
        result.hidden.append(hidden)
    return result


# ---------------------------------------------------------------------------
# gradient-check registrations
# ---------------------------------------------------------------------------


def _upsample_sample(rng):
    return rng.uniform(-2, 2, (1, 2, 3, 4)), rng.uniform(-2, 2, (1, 9 * 4, 3, 4))


@register_gradcheck("convex_upsample", _upsample_sample)
def _convex_chain(flow, logits):
    return convex_upsample(flow, logits, 2)


register_gradcheck("upsample_bilinear", lambda r: (r.uniform(-2, 2, (2, 2, 3, 4)),))(
    lambda f: upsample_bilinear(f, 4)
)

_TINY = dict(
    d=4, channels=6, cprime=3, ctx_channels=8, encoder_widths=(4, 5), radius=1,
    motion_corr=6, motion_flow=4, motion_out=6,
)


def tiny_config(**overrides) -> ModelConfig:
    """A small model used by gradient probes and composition tests."""
    return ModelConfig(**{**_TINY, **overrides})


def _gru_sample(rng):
    cfg = tiny_config()
    specs = param_specs(cfg)
    n, h, w = 1, 3, 4
    arrays = [
        np.tanh(rng.uniform(-2, 2, (n, cfg.hidden_channels, h, w))),
        rng.uniform(0, 2, (n, cfg.context_channels, h, w)),
        rng.uniform(-2, 2, (n, cfg.lookup_channels, h, w)),
        rng.uniform(-2, 2, (n, 2, h, w)),
    ]
    arrays += [rng.uniform(-0.5, 0.5, s) for s in specs.values()]
    return tuple(arrays)


@register_gradcheck("gru_step", _gru_sample)
def _gru_chain(hidden, context, corr, flow, *weights):
    params = dict(zip(param_specs(tiny_config()), weights))
    h, delta, mask = gru_step(hidden, UpdateInputs(context, corr, flow), params)
    return concat([h.reshape(-1), delta.reshape(-1), mask.reshape(-1)], axis=0)


def end_to_end_probe(
    seed: int = 0, size: int = 16, iters: int = 2, epsilon: float = 1e-3, probes: int = 8, **overrides
) -> GradCheckReport:
    """Finite-difference check of the whole pipeline w.r.t. every parameter and both frames."""
    from .trainer import init_params

    cfg = tiny_config(**overrides)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    names = list(params)
    frames = [rng.uniform(0, 1, (1, 3, size, size)) for _ in range(2)]
    weights = [params[k].data.astype(np.float64) + 0.05 * rng.standard_normal(params[k].shape) for k in names]

    def fn(i1, i2, *ws):
        p = dict(zip(names, ws))
        res = run_refinement(ImagePair(i1, i2), p, cfg, iters)
        return concat([f.reshape(-1) for f in res.flows], axis=0)

    return check_gradients(fn, frames + weights, epsilon, probes, seed, f"end_to_end[{cfg.init_mode},m={iters}]")
