"""Cross strip correlation.

Queries come from two 1x1 projections of F1; keys from two further 1x1
projections of F2, strip-pooled to one descriptor per column (mean over H)
and one per row (mean over W). Correlating each pixel's query against those
descriptors gives two volumes holding H*W*(W+H) scalars in total.

Axis naming follows the pooling algebra: ``C_v`` (built from the
column-pooled keys) indexes candidate x' positions and therefore seeds the
horizontal flow component; ``C_h`` indexes candidate y' positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig
from .tensor import Tensor, concat, conv2d, matmul, register_gradcheck


@dataclass
class OrthogonalQueries:
    Q_v: Tensor  # (N, C', H, W)
    Q_h: Tensor


@dataclass
class StripKeys:
    K_hat_v: Tensor  # (N, C', W), mean over H
    K_hat_h: Tensor  # (N, C', H), mean over W


@dataclass
class OrthogonalVolumes:
    C_v: Tensor  # (N, H, W, W)
    C_h: Tensor  # (N, H, W, H)

    @property
    def num_elements(self) -> int:
        return self.C_v.size + self.C_h.size


def param_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    if not config.csc:
        return {}
    c, cp = config.channels, config.cprime
    names = ["query_v", "key_v", "key_h"]
    if config.queries == "separate":
        names.insert(1, "query_h")
    specs = {}
    for name in names:
        specs[f"csc.{name}.weight"] = (cp, c, 1, 1)
        specs[f"csc.{name}.bias"] = (cp,)
    return specs


def _project(x: Tensor, params, name: str) -> Tensor:
    return conv2d(x, params[f"csc.{name}.weight"], params[f"csc.{name}.bias"])


def make_queries(F1: Tensor, params, config: ModelConfig) -> OrthogonalQueries:
    q_v = _project(F1, params, "query_v")
    if config.queries == "same":
        return OrthogonalQueries(q_v, q_v)
    return OrthogonalQueries(q_v, _project(F1, params, "query_h"))


def strip_pool_columns(K: Tensor) -> Tensor:
    """(N, C', H, W) -> (N, C', W): exact mean over the H axis."""
    return K.mean(axis=2)


def strip_pool_rows(K: Tensor) -> Tensor:
    """(N, C', H, W) -> (N, C', H): exact mean over the W axis."""
    return K.mean(axis=3)


def make_strip_keys(F2: Tensor, params, config: ModelConfig) -> StripKeys:
    k_v = _project(F2, params, "key_v")
    k_h = _project(F2, params, "key_h")
    return StripKeys(strip_pool_columns(k_v), strip_pool_rows(k_h))


def _correlate(q: Tensor, keys: Tensor, scale: bool) -> Tensor:
    n, cp, h, w = q.shape
    rows = q.permute(0, 2, 3, 1).reshape(n, h * w, cp)
    vol = matmul(rows, keys)
    if scale:
        vol = vol * (1.0 / math.sqrt(cp))
    return vol.reshape(n, h, w, keys.shape[-1])


def cross_strip_correlation(q: OrthogonalQueries, k: StripKeys, scale: bool = True) -> OrthogonalVolumes:
    """Per-pixel dot products of queries with the pooled keys.

    ``C_v[n, y, x, x'] = <Q_v[n, :, y, x], K_hat_v[n, :, x']>`` (times
    ``1/sqrt(C')`` when ``scale``), likewise ``C_h`` over y'.
    """
    if q.Q_v.shape[1] != k.K_hat_v.shape[1] or q.Q_h.shape[1] != k.K_hat_h.shape[1]:
        raise ValueError(
            f"query/key channel mismatch: {q.Q_v.shape[1]}/{q.Q_h.shape[1]} vs "
            f"{k.K_hat_v.shape[1]}/{k.K_hat_h.shape[1]}"
        )
    _, _, h, w = q.Q_v.shape
    if k.K_hat_v.shape[-1] != w or k.K_hat_h.shape[-1] != h:
        raise ValueError(f"key extents {k.K_hat_v.shape}, {k.K_hat_h.shape} do not match query grid {h}x{w}")
    return OrthogonalVolumes(_correlate(q.Q_v, k.K_hat_v, scale), _correlate(q.Q_h, k.K_hat_h, scale))


def strip_volumes(F1: Tensor, F2: Tensor, params, config: ModelConfig) -> OrthogonalVolumes:
    """Queries, pooled keys and both orthogonal volumes in one call."""
    return cross_strip_correlation(
        make_queries(F1, params, config), make_strip_keys(F2, params, config), config.scale_corr
    )


def _csc_chain_sample(rng):
    c, cp, h, w = 4, 3, 4, 5
    arrays = [rng.uniform(-2, 2, (1, c, h, w)), rng.uniform(-2, 2, (1, c, h, w))]
    for _ in range(4):
        arrays += [rng.uniform(-1, 1, (cp, c, 1, 1)), rng.uniform(-1, 1, (cp,))]
    return tuple(arrays)


@register_gradcheck("csc_chain", _csc_chain_sample)
def _csc_chain(F1, F2, wqv, bqv, wqh, bqh, wkv, bkv, wkh, bkh):
    params = {
        "csc.query_v.weight": wqv, "csc.query_v.bias": bqv,
        "csc.query_h.weight": wqh, "csc.query_h.bias": bqh,
        "csc.key_v.weight": wkv, "csc.key_v.bias": bkv,
        "csc.key_h.weight": wkh, "csc.key_h.bias": bkh,
    }
    vols = strip_volumes(F1, F2, params, ModelConfig(channels=4, cprime=3))
    return concat([vols.C_v.reshape(-1), vols.C_h.reshape(-1)], axis=0)
