"""Optical flow with cross strip correlation and regression initialization.

The network, its autodiff core and the training loop are plain numpy.
"""

from .config import INIT_MODES, PYRAMID_KERNELS, ModelConfig
from .corr import aggregate, all_pair_correlation, build_pyramid, lookup
from .cri import init_flow, regress_init
from .csc import cross_strip_correlation, make_queries, make_strip_keys, strip_volumes
from .encoders import ImagePair, encode_context, encode_features
from .flowio import GeneratorSpec, generate_sample, read_flo, sequence_loss, write_flo
from .params import ModelParams
from .refine import RefinementResult, run_refinement
from .tensor import Tensor, grad_check
from .trainer import TrainConfig, init_params, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "INIT_MODES",
    "PYRAMID_KERNELS",
    "GeneratorSpec",
    "ImagePair",
    "ModelConfig",
    "ModelParams",
    "RefinementResult",
    "Tensor",
    "TrainConfig",
    "aggregate",
    "all_pair_correlation",
    "build_pyramid",
    "cross_strip_correlation",
    "encode_context",
    "encode_features",
    "generate_sample",
    "grad_check",
    "init_flow",
    "init_params",
    "load_checkpoint",
    "lookup",
    "make_queries",
    "make_strip_keys",
    "read_flo",
    "regress_init",
    "run_refinement",
    "save_checkpoint",
    "sequence_loss",
    "strip_volumes",
    "train",
    "write_flo",
]
