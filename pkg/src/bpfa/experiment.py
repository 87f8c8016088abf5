"""Experiment driver: task construction, the SVI loop, the Gibbs baseline and
metric emission."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (Image, gibbs_warm_start, holdout_entries, make_denoising_task, make_interpolation_mask, patchify,
                   read_image, read_matrix, standardize, write_image)
from .evaluation import MetricRecord, predictive, psnr, reconstruct_from_patches
from .gibbs_baseline import init_chain, gibbs_iteration, save_chain, load_chain
from .local import LocalOptions, StrategyTag, infer_local
from .model import Dataset, Hyperparameters, sample_generative
from .variational import (expected_global, load_state, random_init, sample_global, save_state, step_size, svi_step)

logger = logging.getLogger(__name__)

TASKS = ("synthetic", "image-interp", "image-denoise", "matrix")
BASELINE_LABEL = "GIBBS_BASELINE"
PLOT_FIELDS = ("strategy", "seed", "epoch", "time", "pred_loglik", "pred_mse", "psnr_db")


@dataclass
class ExperimentConfig:
    task: str = "synthetic"
    strategy: str = "gibbs-ssvi"
    K: int = 40
    batch_size: int = 100
    epochs: int = 1000
    seed: int = 0
    init: str = "random"
    burn_in: int = 3
    n_samples: int = 3
    blocked: bool = True
    random_scan: bool = False
    gibbs_init: str = "empty"
    eval_every_s: float = 5.0
    eval_every: int = 0  # iterations; overrides the wall-clock schedule when > 0
    time_budget_s: float = 0.0  # 0 = no budget
    M: int = 64
    paper_literal_mu: bool = False
    timing: bool = True
    checkpoint_every: int = 0
    resume: str | None = None
    out: str | None = None
    # hyperparameters
    a: float = 10.0
    b: float = 10.0
    c_prior: float = 1.0
    d_prior: float = 10.0
    e_prior: float = 1.0
    f_prior: float = 1.0
    t0: float = 0.0
    zeta: float = 0.75
    # synthetic task
    N: int = 2000
    D: int = 40
    K_true: int = 20
    gamma_w: float = 1.0
    gamma_obs: float = 100.0
    holdout: float = 0.075
    # image tasks
    image: str | None = None
    crop: str | None = None
    observe_frac: float | None = None
    noise_sd: float | None = None
    # matrix task
    matrix: str | None = None
    mask: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.M < 1:
            raise ValueError("batch_size, epochs and M must be >= 1")
        self.tag  # validates strategy and Gibbs options
        self.hyper
        self.local_options
        parse_init(self.init)

    @property
    def hyper(self) -> Hyperparameters:
        return Hyperparameters(K=self.K, a=self.a, b=self.b, c_prior=self.c_prior, d_prior=self.d_prior,
                               e_prior=self.e_prior, f_prior=self.f_prior, t0=self.t0, zeta=self.zeta)

    @property
    def tag(self) -> StrategyTag:
        return StrategyTag(self.strategy, self.burn_in, self.n_samples, self.blocked, self.random_scan)

    @property
    def local_options(self) -> LocalOptions:
        return LocalOptions(paper_literal_mu=self.paper_literal_mu, gibbs_init=self.gibbs_init)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


def parse_init(text: str):
    """'random' or 'gibbs:<subset>:<iters>' -> None or (subset, iters)."""
    if text == "random":
        return None
    parts = text.split(":")
    if len(parts) != 3 or parts[0] != "gibbs":
        raise ValueError(f"init must be 'random' or 'gibbs:<subset>:<iters>', got {text!r}")
    subset, iters = int(parts[1]), int(parts[2])
    if subset < 1 or iters < 0:
        raise ValueError("gibbs warm start needs subset >= 1 and iters >= 0")
    return subset, iters


@dataclass
class Task:
    train: Dataset
    test_mask: np.ndarray
    Y_test: np.ndarray
    original: Image | None = None
    record: object = None


def _crop(img: Image, spec: str | None) -> Image:
    if not spec:
        return img
    vals = [int(v) for v in spec.split(",")]
    if len(vals) == 1:
        r0, c0, h, w = 0, 0, vals[0], vals[0]
    elif len(vals) == 4:
        r0, c0, h, w = vals
    else:
        raise ValueError("crop must be 'size' or 'row,col,height,width'")
    if r0 + h > img.shape[0] or c0 + w > img.shape[1]:
        raise ValueError(f"crop {spec} exceeds the {img.shape[0]}x{img.shape[1]} image")
    return Image(img.pixels[r0:r0 + h, c0:c0 + w], img.max_value)


def build_task(cfg: ExperimentConfig) -> Task:
    data_rng = np.random.default_rng([cfg.seed, 1000])
    if cfg.task == "synthetic":
        hyper_true = cfg.hyper.replace(K=cfg.K_true)
        data, _, _ = sample_generative(hyper_true, cfg.N, cfg.D, cfg.gamma_w, cfg.gamma_obs, data_rng)
        return _holdout_task(data, cfg.holdout, data_rng)
    if cfg.task == "matrix":
        if not cfg.matrix:
            raise ValueError("the matrix task needs --matrix")
        data = read_matrix(cfg.matrix, cfg.mask)
        return _holdout_task(data, cfg.holdout, data_rng)

    if not cfg.image:
        raise ValueError(f"the {cfg.task} task needs --image")
    original = _crop(read_image(cfg.image), cfg.crop)
    if cfg.task == "image-interp":
        frac = 0.2 if cfg.observe_frac is None else cfg.observe_frac
        pixel_mask = make_interpolation_mask(original, frac, data_rng)
        corrupted = Image(np.where(pixel_mask, original.pixels, 0.0), original.max_value)
    else:
        frac = 0.5 if cfg.observe_frac is None else cfg.observe_frac
        sd = 15.0 if cfg.noise_sd is None else cfg.noise_sd
        corrupted, pixel_mask = make_denoising_task(original, frac, sd, data_rng)
    train = patchify(corrupted, pixel_mask=pixel_mask)
    Ystd, rec = standardize(train.Y, train.mask)
    clean = patchify(original).Y
    train = Dataset(Ystd, train.mask, meta=train.meta)
    return Task(train, ~train.mask, rec.apply(clean), original, rec)


def _holdout_task(data: Dataset, fraction: float, rng) -> Task:
    full_Y = data.Y
    train, spec = holdout_entries(data, fraction, rng)
    Ystd, rec = standardize(train.Y, train.mask)
    test_mask = spec.test_mask(data.Y.shape)
    return Task(Dataset(Ystd, train.mask, train.row_ids), test_mask, rec.apply(full_Y), None, rec)


def initial_state(cfg: ExperimentConfig, task: Task):
    warm = parse_init(cfg.init)
    rng = np.random.default_rng([cfg.seed, 2000])
    if warm is None:
        return random_init(cfg.hyper, task.train.D, rng)
    subset, iters = warm
    return gibbs_warm_start(task.train, cfg.hyper, min(subset, task.train.N), iters, rng)


def svi_iteration(state, t: int, task: Task, cfg: ExperimentConfig):
    """One pass of the SVI loop body for iteration ``t`` (1-based)."""
    rng = np.random.default_rng([cfg.seed, t])
    hyper, tag = cfg.hyper, cfg.tag
    data = task.train
    rows = rng.integers(0, data.N, size=cfg.batch_size)
    source = sample_global(state, rng) if tag.strategy.structured else expected_global(state)
    stats, _ = infer_local(tag, source, data.Y[rows], data.mask[rows], rng, cfg.local_options)
    return svi_step(state, stats, data.N, step_size(t, hyper), hyper)


@dataclass
class RunResult:
    records: list = field(default_factory=list)
    state: object = None
    reconstruction: np.ndarray | None = None
    iterations: int = 0
    train_seconds: float = 0.0


def evaluate(global_view, task: Task, cfg: ExperimentConfig, t: int, label: str, elapsed: float, tag=None):
    rng = np.random.default_rng([cfg.seed, t, 1])
    res = predictive(global_view, tag, task.train, task.test_mask, task.Y_test, cfg.M, rng, cfg.local_options,
                     require_observed=task.original is None)
    recon, score = None, None
    if task.original is not None:
        recon = reconstruct_from_patches(task.record.invert(res.mean_prediction), task.original.shape)
        score = psnr(task.original, recon, task.original.max_value)
    rec = MetricRecord(wall_clock_s=round(elapsed, 6) if cfg.timing else None, epoch=t, pred_loglik=res.loglik,
                       pred_mse=res.mse, psnr_db=score, strategy=label, seed=cfg.seed)
    return rec, recon


class _Schedule:
    def __init__(self, cfg: ExperimentConfig):
        self.every, self.every_s = cfg.eval_every, cfg.eval_every_s
        self.next_s = self.every_s

    def due(self, t: int, elapsed: float) -> bool:
        if self.every > 0:
            return t % self.every == 0
        if elapsed >= self.next_s:
            while self.next_s <= elapsed:
                self.next_s += self.every_s
            return True
        return False


def _clock(cfg: ExperimentConfig, elapsed: float) -> dict:
    # untimed runs keep checkpoints free of wall-clock values
    return {"train_seconds": elapsed} if cfg.timing else {}


def _open_metrics(cfg: ExperimentConfig, append: bool):
    if not cfg.out:
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return open(out / "metrics.jsonl", "a" if append else "w")


def run_experiment(cfg: ExperimentConfig, task: Task | None = None) -> RunResult:
    """Run the SVI loop for ``cfg.epochs`` iterations (one minibatch each).

    Training time excludes evaluation.  With ``cfg.eval_every`` set the
    evaluation schedule, and hence every metric except the clock, is a pure
    function of the config.
    """
    task = build_task(cfg) if task is None else task
    if cfg.batch_size > task.train.N:
        raise ValueError(f"batch size {cfg.batch_size} exceeds N={task.train.N}")
    start_t = 0
    if cfg.resume:
        state, header = load_state(cfg.resume)
        if header.get("seed") != str(cfg.seed):
            raise ValueError(f"checkpoint seed {header.get('seed')} does not match --seed {cfg.seed}")
        start_t = int(header["iteration"])
        elapsed = float(header.get("train_seconds", 0.0))
    else:
        state = initial_state(cfg, task)
        elapsed = 0.0
    tag = cfg.tag
    result = RunResult()
    sched = _Schedule(cfg)
    metrics = _open_metrics(cfg, append=bool(cfg.resume))
    t = start_t
    try:
        for t in range(start_t + 1, cfg.epochs + 1):
            tick = time.perf_counter()
            state = svi_iteration(state, t, task, cfg)
            elapsed += time.perf_counter() - tick
            last = t == cfg.epochs or (cfg.time_budget_s > 0 and elapsed >= cfg.time_budget_s)
            if sched.due(t, elapsed) or last:
                rec, recon = evaluate(state, task, cfg, t, tag.label, elapsed, tag)
                result.records.append(rec)
                result.reconstruction = recon if recon is not None else result.reconstruction
                logger.info("t=%d loglik=%.4g mse=%.4g psnr=%s", t, rec.pred_loglik, rec.pred_mse or float("nan"),
                            rec.psnr_db)
                if metrics:
                    metrics.write(rec.to_json() + "\n")
                    metrics.flush()
            if cfg.out and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                save_state(Path(cfg.out) / f"ckpt_{t}.ckpt", state, t, cfg.seed, **_clock(cfg, elapsed))
            if last:
                break
    finally:
        if metrics:
            metrics.close()
    result.state, result.iterations, result.train_seconds = state, t, elapsed
    _write_artifacts(cfg, result, task, lambda p: save_state(p, state, t, cfg.seed, **_clock(cfg, elapsed)))
    return result


def run_baseline(cfg: ExperimentConfig, task: Task | None = None) -> RunResult:
    """Full Gibbs sampler with the same evaluation schedule and metric schema.

    Predictions use the last ``cfg.M`` chain states.
    """
    task = build_task(cfg) if task is None else task
    hyper = cfg.hyper
    if cfg.resume:
        state, header = load_chain(cfg.resume)
        if header.get("seed") != str(cfg.seed):
            raise ValueError(f"checkpoint seed {header.get('seed')} does not match --seed {cfg.seed}")
        elapsed = float(header.get("train_seconds", 0.0))
    else:
        state = init_chain(task.train, hyper, np.random.default_rng([cfg.seed, 2000]))
        elapsed = 0.0
    recent = deque(maxlen=cfg.M)
    result = RunResult()
    sched = _Schedule(cfg)
    metrics = _open_metrics(cfg, append=bool(cfg.resume))
    try:
        while state.iteration < cfg.epochs:
            t = state.iteration + 1
            tick = time.perf_counter()
            state = gibbs_iteration(state, task.train, hyper, np.random.default_rng([cfg.seed, t]))
            elapsed += time.perf_counter() - tick
            recent.append(state)
            last = t == cfg.epochs or (cfg.time_budget_s > 0 and elapsed >= cfg.time_budget_s)
            if sched.due(t, elapsed) or last:
                rec, recon = evaluate(list(recent), task, cfg, t, BASELINE_LABEL, elapsed)
                result.records.append(rec)
                result.reconstruction = recon if recon is not None else result.reconstruction
                if metrics:
                    metrics.write(rec.to_json() + "\n")
                    metrics.flush()
            if cfg.out and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                save_chain(Path(cfg.out) / f"ckpt_{t}.ckpt", state, cfg.seed, **_clock(cfg, elapsed))
            if last:
                break
    finally:
        if metrics:
            metrics.close()
    result.state, result.iterations, result.train_seconds = state, state.iteration, elapsed
    _write_artifacts(cfg, result, task, lambda p: save_chain(p, state, cfg.seed, **_clock(cfg, elapsed)))
    return result


def _write_artifacts(cfg, result: RunResult, task: Task, save_checkpoint):
    if not cfg.out:
        return
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "final.ckpt")
    if result.reconstruction is not None:
        write_image(out / "recon.pgm", Image(result.reconstruction, task.original.max_value))
    emit_plot_data([out / "metrics.jsonl"], out / "plotdata.csv")


def load_metrics(path) -> list:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(MetricRecord.from_json(line))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{n}: schema mismatch ({exc})") from None
    return records


def emit_plot_data(metric_files, out_path=None) -> list:
    """Merge metric files into a long table sorted by (strategy, time).

    ``time`` is the training clock when recorded, otherwise the iteration.
    """
    if not metric_files:
        raise ValueError("need at least one metrics file")
    rows = []
    for path in metric_files:
        for r in load_metrics(path):
            t = r.wall_clock_s if r.wall_clock_s is not None else r.epoch
            rows.append({"strategy": r.strategy, "seed": r.seed, "epoch": r.epoch, "time": t,
                         "pred_loglik": r.pred_loglik, "pred_mse": r.pred_mse,
                         "psnr_db": "" if r.psnr_db is None else r.psnr_db})
    rows.sort(key=lambda r: (r["strategy"], r["time"], r["epoch"]))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=PLOT_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
