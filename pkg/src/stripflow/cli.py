"""``stripflow`` command line: train, eval, infer, gradcheck, bench.

Settings come from built-in defaults, then an optional ``key = value``
config file, then command-line flags (highest precedence). The merged
settings are written to ``<outdir>/config.resolved`` before any work, in the
same ``key = value`` form, so a run can be repeated with
``--config <outdir>/config.resolved``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import logging
import os
import statistics
import sys
import time
import tracemalloc
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import corr, cri, csc, refine  # noqa: F401  (imports register gradient checks)
from .config import AGGREGATE_MODES, INIT_MODES, QUERY_MODES, ModelConfig
from .encoders import FeaturePair, ImagePair, check_divisible
from .flowio import (
    GENERATOR_KINDS,
    EvalReport,
    GeneratorSpec,
    SyntheticSample,
    colorize,
    evaluate_predictions,
    write_flo,
    write_ppm,
)
from .tensor import GRADCHECK_REGISTRY, GradCheckReport, Tensor, grad_check, no_grad
from .trainer import (
    CheckpointError,
    TrainConfig,
    check_compatible,
    eval_samples,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
GRADCHECK_LIMIT = 1e-3
END_TO_END_LIMIT = 1e-2
DEFAULT_SWEEP = (16, 32, 64, 96)

log = logging.getLogger("stripflow")


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


@dataclass
class RunConfig:
    # model
    d: int = 4
    channels: int = 64
    cprime: int = 32
    ctx_channels: int = 128
    radius: int = 3
    scale_corr: bool = True
    aggregate_mode: str = "broadcast-sum"
    queries: str = "separate"
    csc: bool = True
    init_mode: str = "cri-soft-argmax"
    m: int = refine.TRAIN_ITERS
    # training
    lr: float = 2e-2
    momentum: float = 0.9
    clip_norm: float = 1.0
    gamma: float = 0.8
    steps: int = 2000
    batch: int = 4
    seed: int = 0
    eval_every: int = 100
    # data and evaluation
    generator: str = "translation"
    height: int = 64
    width: int = 64
    max_disp: float = 8.0
    eval_samples: int = 100
    eval_seed: int = 1_000_003
    f1_rule: str = "and"
    outdir: str = "stripflow_out"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d, channels=self.channels, cprime=self.cprime, ctx_channels=self.ctx_channels,
            radius=self.radius, scale_corr=self.scale_corr, aggregate_mode=self.aggregate_mode,
            queries=self.queries, csc=self.csc, init_mode=self.init_mode,
        )

    def generator_spec(self) -> GeneratorSpec:
        spec = GeneratorSpec(kind=self.generator, height=self.height, width=self.width,
                             max_disp=self.max_disp, multiple_of=self.d)
        spec.validate()
        return spec

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            lr=self.lr, steps=self.steps, batch=self.batch, gamma=self.gamma, iters=self.m,
            clip_norm=self.clip_norm, momentum=self.momentum, seed=self.seed,
            generator=self.generator_spec(), eval_every=self.eval_every,
            eval_samples=self.eval_samples, eval_seed=self.eval_seed,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.f1_rule not in ("and", "or"):
            raise ValueError(f"f1_rule must be 'and' or 'or', got {self.f1_rule!r}")
        if self.eval_samples < 1 or self.eval_every < 1:
            raise ValueError("eval_samples and eval_every must be >= 1")
        self.model_config()
        self.train_config()

    def render(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "on" if value else "off"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


RUN_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE, _FALSE = {"on", "true", "yes", "1"}, {"off", "false", "no", "0"}


def _coerce(name: str, raw) -> object:
    kind = RUN_FIELDS[name].type
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise UsageError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path) -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` and ``;`` start comments, dashes equal underscores."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    out = {}
    for key, value in parser["run"].items():
        name = key.strip().replace("-", "_")
        if name not in RUN_FIELDS:
            raise UsageError(f"config file {path}: unknown key {key!r}")
        out[name] = _coerce(name, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < flags."""
    values: dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in RUN_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    run = RunConfig(**values)
    try:
        run.validate()
    except (ValueError, NotImplementedError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return run


def prepare_outdir(run: RunConfig) -> Path:
    out = Path(run.outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(run.render())
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror or exc}") from None
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(run: RunConfig, args) -> int:
    out = prepare_outdir(run)
    model_cfg, train_cfg = run.model_config(), run.train_config()
    # the periodic evaluation during training uses a small slice of the held-out set
    train_cfg.eval_samples = min(run.eval_samples, args.log_eval_samples)
    start = time.perf_counter()
    params, history = train(model_cfg, train_cfg, out / "train_log.csv")
    save_checkpoint(params, out / "checkpoint.bin")
    elapsed = time.perf_counter() - start
    print(
        f"init_mode={run.init_mode} csc={'on' if run.csc else 'off'} steps={run.steps} "
        f"final_loss={history.losses[-1]:.6f} params={params.num_parameters()} seconds={elapsed:.1f}"
    )
    return EXIT_OK


Predictor = Callable[[list[SyntheticSample]], list[np.ndarray]]


def ground_truth_predictor(samples: list[SyntheticSample]) -> list[np.ndarray]:
    """Returns the ground truth itself; scores exactly zero error."""
    return [s.gt_flow.copy() for s in samples]


def model_predictor(run: RunConfig, checkpoint) -> Predictor:
    params = _load_params(run, checkpoint)
    model_cfg = run.model_config()
    return lambda samples: predict(params, model_cfg, samples, run.m)


def _load_params(run: RunConfig, checkpoint):
    if checkpoint is None:
        raise UsageError("a --checkpoint is required")
    path = Path(checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params = load_checkpoint(path)
        check_compatible(params, run.model_config())
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    return params


def run_eval(run: RunConfig, predictor: Predictor) -> EvalReport:
    samples = eval_samples(run.generator_spec(), run.eval_samples, run.eval_seed)
    return evaluate_predictions(predictor(samples), samples, run.f1_rule)


def cmd_eval(run: RunConfig, args) -> int:
    out = prepare_outdir(run)
    predictor = ground_truth_predictor if args.predictor == "gt" else model_predictor(run, args.checkpoint)
    report = run_eval(run, predictor)
    report.write_csv(out / "eval.csv")
    print(f"{report.summary()} rule={report.f1_rule} m={run.m} samples={len(report.per_sample)}")
    return EXIT_OK


def read_image(path) -> np.ndarray:
    """RGB image file -> (3, H, W) float32 in [0, 1]."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def cmd_infer(run: RunConfig, args) -> int:
    i1, i2 = read_image(args.frame1), read_image(args.frame2)
    if i1.shape != i2.shape:
        h, w = min(i1.shape[1], i2.shape[1]), min(i1.shape[2], i2.shape[2])
        h, w = h - h % run.d, w - w % run.d
        raise UsageError(
            f"frames differ in size: {args.frame1} is {i1.shape[2]}x{i1.shape[1]}, "
            f"{args.frame2} is {i2.shape[2]}x{i2.shape[1]} (WxH); crop both to {w}x{h}"
        )
    try:
        check_divisible(i1.shape[1], i1.shape[2], run.d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    params = _load_params(run, args.checkpoint)
    out = prepare_outdir(run)
    with no_grad():
        res = refine.run_refinement(ImagePair(i1, i2), params, run.model_config(), run.m)
    flow = np.ascontiguousarray(res.final.data[0].transpose(1, 2, 0))
    write_flo(flow, out / "pred.flo")
    write_ppm(colorize(flow), out / "pred.ppm")
    mag = np.hypot(flow[..., 0], flow[..., 1])
    print(f"wrote {out / 'pred.flo'} and {out / 'pred.ppm'} mean_magnitude={mag.mean():.4f}")
    return EXIT_OK


def gradcheck_reports(seed: int = 0) -> list[tuple[GradCheckReport, float]]:
    """Every registered op, then the end-to-end probe, paired with its limit."""
    rows = []
    for name, case in GRADCHECK_REGISTRY.items():
        limit = min(case.threshold, GRADCHECK_LIMIT)
        rows.append((grad_check(name, seed=seed), limit))
    rows.append((refine.end_to_end_probe(seed=seed), END_TO_END_LIMIT))
    return rows


def cmd_gradcheck(run: RunConfig, args) -> int:
    prepare_outdir(run)
    rows = gradcheck_reports(run.seed)
    width = max(len(r.op_name) for r, _ in rows)
    print(f"{'op':<{width}}  max_rel_err  limit    probes  status")
    failed = 0
    for report, limit in rows:
        ok = report.max_rel_err <= limit
        failed += not ok
        print(f"{report.op_name:<{width}}  {report.max_rel_err:.3e}    {limit:.0e}    {report.probe_count:>6}  {'pass' if ok else 'FAIL'}")
    print(f"{len(rows) - failed}/{len(rows)} passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_HEADER = ["H", "W", "allpair_elems", "strip_elems", "ratio", "allpair_ms", "strip_ms", "peak_bytes"]


def allpair_elements(h: int, w: int) -> int:
    return (h * w) ** 2


def strip_elements(h: int, w: int) -> int:
    return h * w * (h + w)


@dataclass
class BenchRow:
    H: int
    W: int
    allpair_elems: int
    strip_elems: int
    ratio: float
    allpair_ms: float | None
    strip_ms: float | None
    peak_bytes: int | None

    @property
    def skipped(self) -> bool:
        return self.allpair_ms is None

    def cells(self) -> list[str]:
        def fmt(x):
            return "skipped" if x is None else (f"{x:.4f}" if isinstance(x, float) else str(x))

        cells = [fmt(getattr(self, f.name)) for f in fields(self)]
        cells[4] = f"{self.ratio:g}"
        return cells


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench_sizes(run: RunConfig, sizes, repeats: int = 5, memory_guard: int = 1 << 30) -> list[BenchRow]:
    """Time all-pair vs strip-volume construction on random features per grid size.

    ``peak_bytes`` is the traced peak allocation of one all-pair build, which
    dominates the cost volume's memory. Sizes whose all-pair volume would
    exceed ``memory_guard`` bytes are reported analytically, untimed.
    """
    if repeats < 5:
        raise UsageError("bench needs at least 5 repeats for a median")
    cfg = run.model_config()
    params = init_params(cfg, run.seed)
    rng = np.random.default_rng(run.seed)
    rows = []
    for size in sizes:
        h = w = int(size)
        ap, st = allpair_elements(h, w), strip_elements(h, w)
        row = BenchRow(h, w, ap, st, ap / st, None, None, None)
        if ap * np.dtype(np.float32).itemsize <= memory_guard:
            f1 = Tensor(rng.standard_normal((1, cfg.channels, h, w)))
            f2 = Tensor(rng.standard_normal((1, cfg.channels, h, w)))
            with no_grad():
                build_allpair = lambda: corr.all_pair_correlation(FeaturePair(f1, f2, cfg.d), cfg.scale_corr)
                build_strip = lambda: csc.strip_volumes(f1, f2, params, cfg)
                build_allpair(), build_strip()  # warm-up
                row.allpair_ms = _median_ms(build_allpair, repeats)
                row.strip_ms = _median_ms(build_strip, repeats)
                row.peak_bytes = _peak_bytes(build_allpair)
        rows.append(row)
    return rows


def loglog_slope(rows: list[BenchRow], column: str) -> float:
    """Least-squares slope of log(time) against log(H*W) over timed rows."""
    timed = [r for r in rows if not r.skipped]
    if len(timed) < 2:
        return float("nan")
    x = np.log([r.H * r.W for r in timed])
    y = np.log([max(getattr(r, column), 1e-6) for r in timed])
    return float(np.polyfit(x, y, 1)[0])


def cmd_bench(run: RunConfig, args) -> int:
    out = prepare_outdir(run)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs at least one positive size")
    rows = bench_sizes(run, sizes, args.repeats, args.memory_guard)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        for r in rows:
            writer.writerow(r.cells())
    print(",".join(BENCH_HEADER))
    for r in rows:
        print(",".join(r.cells()) + ("  # over memory guard, timing skipped" if r.skipped else ""))
    sa, ss = loglog_slope(rows, "allpair_ms"), loglog_slope(rows, "strip_ms")
    print(f"loglog_slope allpair={sa:.3f} strip={ss:.3f} difference={sa - ss:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    # every default is None so that unset flags fall through to the file/defaults
    p.add_argument("--config", metavar="PATH", help="key = value settings file")
    p.add_argument("--outdir", metavar="PATH")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--d", type=int, metavar="N", help="feature downsampling factor (2, 4 or 8)")
    p.add_argument("--channels", type=int, metavar="N")
    p.add_argument("--cprime", type=int, metavar="N", help="strip projection width")
    p.add_argument("--m", type=int, metavar="N", help="refinement iterations")
    p.add_argument("--radius", type=int, metavar="N")
    p.add_argument("--init-mode", dest="init_mode", choices=INIT_MODES)
    p.add_argument("--aggregate-mode", dest="aggregate_mode", choices=AGGREGATE_MODES)
    p.add_argument("--queries", choices=QUERY_MODES)
    p.add_argument("--csc", choices=("on", "off"))
    p.add_argument("--gamma", type=float, metavar="F")
    p.add_argument("--lr", type=float, metavar="F")
    p.add_argument("--steps", type=int, metavar="N")
    p.add_argument("--batch", type=int, metavar="N")
    p.add_argument("--generator", choices=GENERATOR_KINDS)
    p.add_argument("--eval-samples", dest="eval_samples", type=int, metavar="N")
    p.add_argument("--eval-seed", dest="eval_seed", type=int, metavar="N")
    p.add_argument("--f1-rule", dest="f1_rule", choices=("and", "or"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stripflow", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train on synthetic pairs; writes checkpoint.bin and train_log.csv")
    _add_common(p)
    p.add_argument("--log-eval-samples", dest="log_eval_samples", type=int, default=16, metavar="N",
                   help="held-out samples scored at each log row (default 16)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a seeded synthetic set")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--predictor", choices=("model", "gt"), default="model",
                   help="'gt' passes the ground truth through (pipeline self-test)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="predict flow for an image pair; writes pred.flo and pred.ppm")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("frame1")
    p.add_argument("frame2")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _add_common(p)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench", help="all-pair vs strip volume size and construction time")
    _add_common(p)
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SWEEP)), help="comma-separated grid sizes")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--memory-guard", dest="memory_guard", type=int, default=1 << 30, metavar="BYTES",
                   help="skip timing when the all-pair volume would exceed this many bytes")
    p.set_defaults(handler=cmd_bench)
    return parser


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at ``STRIPFLOW_THREADS`` when set."""
    raw = os.environ.get("STRIPFLOW_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"STRIPFLOW_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve_config(args)
        with thread_limit():
            return args.handler(run, args)
    except UsageError as exc:
        print(f"stripflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
