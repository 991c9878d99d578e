"""Feature and context encoders.

Both frames go through structurally identical but *unshared* conv stacks
(branches ``f1`` and ``f2``); the context encoder ``ctx`` has the same body
and runs on the first frame only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .tensor import Tensor, conv2d, elu, softplus, tanh

BRANCHES = ("f1", "f2", "ctx")


@dataclass
class ImagePair:
    """Two frames, (N, 3, H0, W0) or (3, H0, W0), values in [0, 1]."""

    I1: Tensor
    I2: Tensor

    def __post_init__(self):
        if not isinstance(self.I1, Tensor):
            self.I1 = Tensor(self.I1)
        if not isinstance(self.I2, Tensor):
            self.I2 = Tensor(self.I2)
        if self.I1.shape != self.I2.shape:
            raise ValueError(f"frames differ in shape: {self.I1.shape} vs {self.I2.shape}")
        if self.I1.ndim == 3:
            self.I1 = self.I1.reshape(1, *self.I1.shape)
            self.I2 = self.I2.reshape(1, *self.I2.shape)
        if self.I1.ndim != 4 or self.I1.shape[1] != 3:
            raise ValueError(f"frames must be (N, 3, H, W), got {self.I1.shape}")
        for frame in (self.I1.data, self.I2.data):
            if not np.all(np.isfinite(frame)):
                raise ValueError("frames contain non-finite values")

    @property
    def size(self) -> tuple[int, int]:
        return self.I1.shape[2], self.I1.shape[3]


@dataclass
class FeaturePair:
    F1: Tensor
    F2: Tensor
    d: int

    @property
    def channels(self) -> int:
        return self.F1.shape[1]


@dataclass
class ContextFeatures:
    hidden: Tensor  # tanh-bounded GRU state initializer
    context: Tensor  # nonnegative static context input


def block_layout(config: ModelConfig, out_channels: int) -> list[tuple[int, int, int, int]]:
    """(in, out, kernel, stride) for the three conv blocks of one branch."""
    w0, w1 = config.encoder_widths
    strides = {2: (2, 1, 1), 4: (2, 2, 1), 8: (2, 2, 2)}[config.d]
    k0 = 7 if config.d == 8 else 3
    return [(3, w0, k0, strides[0]), (w0, w1, 3, strides[1]), (w1, out_channels, 3, strides[2])]


def param_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    specs = {}
    for branch in BRANCHES:
        out = config.ctx_channels if branch == "ctx" else config.channels
        for i, (cin, cout, k, _) in enumerate(block_layout(config, out)):
            specs[f"encoder.{branch}.block{i}.weight"] = (cout, cin, k, k)
            specs[f"encoder.{branch}.block{i}.bias"] = (cout,)
    return specs


def check_divisible(h0: int, w0: int, d: int) -> None:
    if h0 % d or w0 % d:
        raise ValueError(
            f"image size {h0}x{w0} is not divisible by d={d}; crop to {h0 - h0 % d}x{w0 - w0 % d}"
        )


def _run_branch(x: Tensor, params, config: ModelConfig, branch: str, out_channels: int, final_act: bool) -> Tensor:
    layout = block_layout(config, out_channels)
    for i, (_, _, k, stride) in enumerate(layout):
        x = conv2d(
            x,
            params[f"encoder.{branch}.block{i}.weight"],
            params[f"encoder.{branch}.block{i}.bias"],
            stride=stride,
            padding=k // 2,
        )
        if i < len(layout) - 1 or final_act:
            x = elu(x)
    return x


def encode_features(pair: ImagePair, params, config: ModelConfig) -> FeaturePair:
    """F1 from branch ``f1`` on I1, F2 from branch ``f2`` on I2, at 1/d resolution."""
    check_divisible(*pair.size, config.d)
    f1 = _run_branch(pair.I1, params, config, "f1", config.channels, final_act=True)
    f2 = _run_branch(pair.I2, params, config, "f2", config.channels, final_act=True)
    return FeaturePair(f1, f2, config.d)


def encode_context(I1: Tensor, params, config: ModelConfig) -> ContextFeatures:
    if I1.ndim == 3:
        I1 = I1.reshape(1, *I1.shape)
    check_divisible(I1.shape[2], I1.shape[3], config.d)
    raw = _run_branch(I1, params, config, "ctx", config.ctx_channels, final_act=False)
    nh = config.hidden_channels
    return ContextFeatures(hidden=tanh(raw[:, :nh]), context=softplus(raw[:, nh:]))
