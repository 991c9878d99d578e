"""Parameter initialization, the descent loop, and checkpoint files."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import csc, encoders, refine
from .config import ModelConfig
from .cri import init_head_specs
from .encoders import ImagePair
from .flowio import Batch, EvalReport, GeneratorSpec, collate, evaluate_predictions, generate_sample, sequence_loss
from .params import ModelParams
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFLOWCKP"
CHECKPOINT_VERSION = 1


def param_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    specs: dict[str, tuple[int, ...]] = {}
    for part in (encoders.param_specs(config), csc.param_specs(config), init_head_specs(config), refine.param_specs(config)):
        specs.update(part)
    return specs


# Encoder convs feed ELU-family activations, so they get the sqrt(2) gain.
ENCODER_GAIN = math.sqrt(2.0)
# The second frame's feature branch starts correlated with the first so that
# the all-pair volume already peaks near true matches; the weights stay
# separate parameters and drift apart in training.
BRANCH_CORRELATION = 0.9


def init_std(path: str, shape: tuple[int, ...]) -> float:
    """Target standard deviation of a weight tensor: gain / sqrt(fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    gain = ENCODER_GAIN if path.startswith("encoder.") else 1.0
    return gain / math.sqrt(fan_in)


def _uniform(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    bound = math.sqrt(3.0) * std
    return rng.uniform(-bound, bound, size=shape)


def _zero_sum(w: np.ndarray) -> np.ndarray:
    """Remove each filter's mean (rescaled to keep the std), so flat input gives no response."""
    fan_in = int(np.prod(w.shape[1:]))
    if fan_in < 2:
        return w
    centered = w - w.mean(axis=tuple(range(1, w.ndim)), keepdims=True)
    return centered / math.sqrt(1.0 - 1.0 / fan_in)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``.

    Encoder filters are zero-sum. Each ``encoder.f2`` weight is
    ``rho * f1 + sqrt(1 - rho^2) * independent draw``, which keeps its
    marginal std at the fan-in target.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(init_seed=seed)
    drawn: dict[str, np.ndarray] = {}
    for path, shape in param_specs(config).items():
        if path.endswith(".bias"):
            params.add(path, np.zeros(shape, dtype=np.float32))
            continue
        w = _uniform(rng, shape, init_std(path, shape))
        if path.startswith("encoder."):
            w = _zero_sum(w)
        if path.startswith("encoder.f2."):
            rho = BRANCH_CORRELATION
            w = rho * drawn[path.replace("encoder.f2.", "encoder.f1.", 1)] + math.sqrt(1.0 - rho * rho) * w
        drawn[path] = w
        params.add(path, w.astype(np.float32))
    return params


@dataclass
class TrainConfig:
    lr: float = 2e-2
    steps: int = 2000
    batch: int = 4
    gamma: float = 0.8
    iters: int = refine.TRAIN_ITERS
    clip_norm: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    eval_every: int = 100
    eval_samples: int = 16
    eval_seed: int = 1_000_003

    def validate(self) -> None:
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.steps < 1 or self.batch < 1 or self.iters < 1:
            raise ValueError("steps, batch and iters must all be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        self.generator.validate()


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


class SGDMomentum:
    """Heavy-ball descent: ``v = mu * v + g``, ``p -= lr * v``."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        for path, t in params.tensors():
            if t.grad is None:
                continue
            v = self.velocity.get(path)
            v = t.grad.astype(np.float32) if v is None else self.momentum * v + t.grad
            self.velocity[path] = v
            if self.lr:
                t.data -= (self.lr * v).astype(t.data.dtype)


def global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for _, t in params.tensors():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params: ModelParams, clip_norm: float) -> float:
    """Scale all grads by ``min(1, clip_norm / norm)``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if math.isfinite(clip_norm) and norm > clip_norm:
        scale = clip_norm / norm
        for _, t in params.tensors():
            if t.grad is not None:
                t.grad *= scale
    return norm


def sample_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def training_batch(cfg: TrainConfig, step: int):
    return [generate_sample(cfg.generator, sample_seed(cfg.seed, 0, step, i)) for i in range(cfg.batch)]


def eval_samples(spec: GeneratorSpec, count: int, seed: int):
    return [generate_sample(spec, sample_seed(seed, 1, i)) for i in range(count)]


def batch_loss(params, batch: Batch, model_cfg: ModelConfig, train_cfg: TrainConfig) -> Tensor:
    result = refine.run_refinement(ImagePair(batch.I1, batch.I2), params, model_cfg, train_cfg.iters)
    return sequence_loss(result.flows, batch.gt, batch.valid, train_cfg.gamma)


LossFn = Callable[[ModelParams, Batch], Tensor]


def train_step(params: ModelParams, batch: Batch, train_cfg: TrainConfig, optimizer: SGDMomentum, loss_fn: LossFn) -> float:
    """Zero grads, forward, backward, clip, descend. Returns the loss."""
    params.zero_grad()
    loss = loss_fn(params, batch)
    value = loss.item()
    if not math.isfinite(value):
        state = {path: float(np.abs(t.data).max()) for path, t in params.tensors()}
        raise TrainingDiverged(f"non-finite loss {value}", {"loss": value, "max_abs_param": state})
    loss.backward()
    clip_gradients(params, train_cfg.clip_norm)
    optimizer.step(params)
    return value


def predict(params, model_cfg: ModelConfig, samples, iters: int, batch_size: int = 8) -> list[np.ndarray]:
    """Final full-resolution predictions as (H, W, 2) arrays."""
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = collate(samples[start : start + batch_size])
            res = refine.run_refinement(ImagePair(chunk.I1, chunk.I2), params, model_cfg, iters)
            out.extend(np.ascontiguousarray(f.transpose(1, 2, 0)) for f in res.final.data)
    return out


def evaluate_model(params, model_cfg: ModelConfig, samples, iters: int, rule: str = "and") -> EvalReport:
    return evaluate_predictions(predict(params, model_cfg, samples, iters), samples, rule)


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, epe


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    log_path: str | Path | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Run ``train_cfg.steps`` steps on freshly generated batches.

    Every ``eval_every`` steps (and after the last one) a row
    ``step,loss,epe_eval`` is appended to ``log_path``.
    """
    train_cfg.validate()
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    opt = SGDMomentum(train_cfg.lr, train_cfg.momentum)
    held_out = eval_samples(train_cfg.generator, train_cfg.eval_samples, train_cfg.eval_seed)
    history = TrainHistory()

    def loss_fn(p, b):
        return batch_loss(p, b, model_cfg, train_cfg)

    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "epe_eval"])
    try:
        for step in range(1, train_cfg.steps + 1):
            batch = collate(training_batch(train_cfg, step))
            loss = train_step(params, batch, train_cfg, opt, loss_fn)
            history.losses.append(loss)
            if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
                report = evaluate_model(params, model_cfg, held_out, train_cfg.iters)
                history.evals.append((step, loss, report.epe))
                log.info("step %d loss %.4f epe_eval %.4f", step, loss, report.epe)
                if writer is not None:
                    writer.writerow([step, repr(loss), repr(report.epe)])
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return params, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    """Little-endian: magic, u32 version, u32 count, then per entry
    u32 path length, utf-8 path, u32 rank, u32 dims, float32 payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.tensors():
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated reading {what} at offset {pos} (need {n} bytes, have {len(raw) - pos})")
        out = raw[pos : pos + n]
        pos += n
        return out

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: unknown magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version} at offset 8, expected {CHECKPOINT_VERSION}")
    params = ModelParams()
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4, "path length"))
        name = take(klen, "path").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of {name}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4").astype(np.float32).reshape(shape)
        params.add(name, data)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return params


def check_compatible(params: ModelParams, config: ModelConfig) -> None:
    """Raise if ``params`` does not have exactly the shapes ``config`` implies."""
    want = param_specs(config)
    have = params.shapes()
    missing = sorted(set(want) - set(have))
    extra = sorted(set(have) - set(want))
    wrong = sorted(k for k in set(want) & set(have) if tuple(want[k]) != tuple(have[k]))
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing[:4]}")
        if extra:
            parts.append(f"unexpected {extra[:4]}")
        if wrong:
            parts.append("shape mismatch " + ", ".join(f"{k}: {have[k]} vs {want[k]}" for k in wrong[:4]))
        raise CheckpointError("checkpoint does not match config: " + "; ".join(parts))
