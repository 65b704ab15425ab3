"""Task generation: synthetic GP and sawtooth episodes, budget sampling,
real-data ingestion and JSON-lines persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .accounting import PrivacyBudget
from .dpsetconv import ContextSet
from .errors import DataError
from .kernels import EQ, MATERN32, SAWTOOTH_META, KernelSpec, gp_sample


@dataclass(frozen=True)
class Task:
    """One meta-learning episode with an attached privacy budget."""

    context: ContextSet
    target_xs: np.ndarray
    target_ys: np.ndarray
    budget: PrivacyBudget
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tx = np.atleast_1d(np.asarray(self.target_xs, dtype=float))
        ty = np.atleast_1d(np.asarray(self.target_ys, dtype=float))
        object.__setattr__(self, "target_xs", tx)
        object.__setattr__(self, "target_ys", ty)
        if tx.shape != ty.shape:
            raise ValueError("target xs and ys must have equal length")


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameter ranges for one task family.

    Ranges are (low, high) tuples; a fixed value is expressed as (v, v).
    Defaults follow the synthetic EQ setup: N ~ U[1, 512], context inputs in
    [-2, 2], 512 targets in [-6, 6] at train time, eps ~ U[0.90, 4.00] with
    delta = 1e-3.
    """

    family: str = EQ
    lengthscale_range: tuple[float, float] = (0.20, 2.50)
    inv_period_range: tuple[float, float] = (0.20, 1.25)
    signal_scale: float = 1.0
    noise_scale_range: tuple[float, float] = (0.05, 0.05)
    context_size_range: tuple[int, int] = (1, 512)
    context_x_range: tuple[float, float] = (-2.0, 2.0)
    target_x_range: tuple[float, float] = (-6.0, 6.0)
    target_count: int = 512
    eps_range: tuple[float, float] = (0.90, 4.00)
    delta: float = 1e-3

    def __post_init__(self):
        for name in ("lengthscale_range", "inv_period_range", "noise_scale_range",
                     "context_size_range", "context_x_range", "target_x_range",
                     "eps_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.target_count < 1:
            raise ValueError("target_count must be positive")

    def for_eval(self) -> "GeneratorConfig":
        """Evaluation variant: targets drawn from the context input range."""
        return replace(self, target_x_range=self.context_x_range)


def sim_to_real_config(**overrides) -> GeneratorConfig:
    """Matern-3/2 generator for the sim-to-real setting on [-1, 1]."""
    base = dict(
        family=MATERN32,
        lengthscale_range=(0.50, 2.00),
        noise_scale_range=(0.30, 0.80),
        context_x_range=(-1.0, 1.0),
        target_x_range=(-1.0, 1.0),
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return lo if lo == hi else float(rng.uniform(lo, hi))


def sample_budget(cfg: GeneratorConfig, rng: np.random.Generator) -> PrivacyBudget:
    """Uniform epsilon in the configured range with the fixed delta."""
    return PrivacyBudget(epsilon=_uniform(rng, cfg.eps_range), delta=cfg.delta)


def _sample_inputs(cfg: GeneratorConfig, rng: np.random.Generator):
    lo, hi = cfg.context_size_range
    n = int(rng.integers(lo, hi + 1))
    cx = rng.uniform(*cfg.context_x_range, size=n)
    tx = rng.uniform(*cfg.target_x_range, size=cfg.target_count)
    return cx, tx


def gen_gp_task(cfg: GeneratorConfig, rng: np.random.Generator) -> Task:
    """Draw one episode with outputs jointly sampled from a noisy GP."""
    if cfg.family not in (EQ, MATERN32):
        raise ValueError(f"gen_gp_task requires a GP family, got {cfg.family!r}")
    cx, tx = _sample_inputs(cfg, rng)
    spec = KernelSpec(
        family=cfg.family,
        lengthscale=_uniform(rng, cfg.lengthscale_range),
        signal_scale=cfg.signal_scale,
        noise_scale=_uniform(rng, cfg.noise_scale_range),
    )
    ys = gp_sample(spec, np.concatenate([cx, tx]), rng)
    return Task(
        context=ContextSet(cx, ys[: cx.size]),
        target_xs=tx,
        target_ys=ys[cx.size:],
        budget=sample_budget(cfg, rng),
        meta={
            "family": spec.family,
            "lengthscale": spec.lengthscale,
            "signal_scale": spec.signal_scale,
            "noise_scale": spec.noise_scale,
        },
    )


def sawtooth_signal(xs, period: float, direction: float, phase: float):
    """Two-harmonic truncated Fourier series of a sawtooth waveform."""
    if period <= 0:
        raise ValueError("period must be positive")
    xs = np.asarray(xs, dtype=float)
    out = np.zeros_like(xs)
    for m in (1, 2):
        out += np.sin(2.0 * m * np.pi * (direction * xs / period) + phase) / m
    return (2.0 / np.pi) * out


def gen_sawtooth_task(cfg: GeneratorConfig, rng: np.random.Generator) -> Task:
    """Draw one episode from the noisy truncated sawtooth process."""
    cx, tx = _sample_inputs(cfg, rng)
    inv_period = _uniform(rng, cfg.inv_period_range)
    period = 1.0 / inv_period
    direction = float(rng.choice([-1.0, 1.0]))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    noise = _uniform(rng, cfg.noise_scale_range)
    all_xs = np.concatenate([cx, tx])
    ys = sawtooth_signal(all_xs, period, direction, phase)
    ys = ys + noise * rng.standard_normal(all_xs.size)
    return Task(
        context=ContextSet(cx, ys[: cx.size]),
        target_xs=tx,
        target_ys=ys[cx.size:],
        budget=sample_budget(cfg, rng),
        meta={
            "family": SAWTOOTH_META,
            "period": period,
            "direction": direction,
            "phase": phase,
            "noise_scale": noise,
        },
    )


def gen_task(cfg: GeneratorConfig, rng: np.random.Generator) -> Task:
    if cfg.family == SAWTOOTH_META:
        return gen_sawtooth_task(cfg, rng)
    return gen_gp_task(cfg, rng)


def pooled_sampler(cfg: GeneratorConfig, rng: np.random.Generator, size: int):
    """Task stream backed by a pre-generated pool, sampled with replacement.

    Generating GP tasks costs a context-plus-target-sized Cholesky each, which
    dominates desk-scale training; a few thousand pooled tasks are revisited
    instead (each visit still gets fresh DP noise downstream).
    """
    if size < 1:
        raise ValueError("pool size must be positive")
    pool = [gen_task(cfg, rng) for _ in range(size)]

    def sampler(r: np.random.Generator) -> Task:
        return pool[int(r.integers(len(pool)))]

    return sampler


def load_real_dataset(path, input_column: str, output_column: str):
    """Read a CSV and normalise: inputs to [-1, 1], outputs to zero mean/unit sd.

    Returns (xs, ys, norm) where norm records the affine constants needed to
    undo both normalisations.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or input_column not in reader.fieldnames:
            raise DataError(f"missing column {input_column!r} in {path}")
        if output_column not in reader.fieldnames:
            raise DataError(f"missing column {output_column!r} in {path}")
        xs, ys = [], []
        for i, row in enumerate(reader, start=2):
            try:
                xs.append(float(row[input_column]))
                ys.append(float(row[output_column]))
            except (TypeError, ValueError) as err:
                raise DataError(f"non-numeric cell at line {i} of {path}") from err
    if len(xs) < 2:
        raise DataError(f"need at least 2 data rows, got {len(xs)}")
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    x_min, x_max = float(xs.min()), float(xs.max())
    if x_max == x_min:
        raise DataError("input column is constant; cannot rescale to [-1, 1]")
    y_mean, y_sd = float(ys.mean()), float(ys.std())
    if y_sd == 0.0:
        raise DataError("output column is constant; cannot standardise")
    xs = 2.0 * (xs - x_min) / (x_max - x_min) - 1.0
    ys = (ys - y_mean) / y_sd
    norm = {"x_min": x_min, "x_max": x_max, "y_mean": y_mean, "y_sd": y_sd}
    return xs, ys, norm


def split_real_task(
    xs: np.ndarray,
    ys: np.ndarray,
    n_context: int,
    rng: np.random.Generator,
    budget: PrivacyBudget,
    meta: dict | None = None,
) -> Task:
    """Uniform random context/target split of a fixed point set."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if n_context >= xs.size:
        raise ValueError(f"n_context={n_context} must be below {xs.size} points")
    idx = rng.permutation(xs.size)
    ctx, tgt = idx[:n_context], idx[n_context:]
    return Task(
        context=ContextSet(xs[ctx], ys[ctx]),
        target_xs=xs[tgt],
        target_ys=ys[tgt],
        budget=budget,
        meta=meta or {"family": "real"},
    )


def task_to_dict(task: Task) -> dict:
    return {
        "cx": task.context.xs.tolist(),
        "cy": task.context.ys.tolist(),
        "tx": task.target_xs.tolist(),
        "ty": task.target_ys.tolist(),
        "eps": task.budget.epsilon,
        "delta": task.budget.delta,
        "meta": task.meta,
    }


def task_from_dict(d: dict) -> Task:
    return Task(
        context=ContextSet(np.asarray(d["cx"]), np.asarray(d["cy"])),
        target_xs=np.asarray(d["tx"]),
        target_ys=np.asarray(d["ty"]),
        budget=PrivacyBudget(epsilon=d["eps"], delta=d["delta"]),
        meta=dict(d.get("meta", {})),
    )


def write_tasks(path, tasks: Iterable[Task]) -> None:
    """One task per line as JSON; float repr round-trips bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_dict(task)) + "\n")


def read_tasks(path) -> list[Task]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(task_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DataError(f"malformed task at line {i} of {path}: {err}") from err
    return tasks
