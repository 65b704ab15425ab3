"""The private convolutional conditional neural process.

Pipeline per task: convert the (epsilon, delta) budget to its Gaussian-DP
parameter mu, evaluate the learned maps t(mu, N) and C(mu, N), clip the
context outputs at C, smooth them onto a regular grid, add GP noise
calibrated to the budget, append two constant channels carrying the applied
noise magnitudes, run a UNet over the grid, and RBF-smooth the two output
channels (predictive mean and log standard deviation) onto the targets.

The whole pipeline is built on the in-package autodiff, so gradients reach
the smoothing lengthscale (through the noise Cholesky factor), the clip
threshold and the noise-split variable, as well as the usual network weights.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .accounting import mu_from_budget
from .autodiff import Tensor
from .dpsetconv import ABLATION, DEPLOY, TRAIN, ContextSet
from .errors import NumericalError
from .gridsample import GridSpec
from .kernels import GaussianPrediction
from .taskgen import Task

logger = logging.getLogger("privcnp")

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and discretisation settings.

    The full-scale preset follows the defaults here; `tiny_config` shrinks
    depth, width and grid resolution to something a laptop can train.
    """

    window: tuple[float, float] = (-7.0, 7.0)
    points_per_unit: int = 32
    depth: int = 7
    width: int = 256
    initial_channels: int = 32
    kernel_size: int = 5
    lambda_init: float = 0.20
    tc_hidden: int = 32
    tc_layers: int = 2
    context_norm: float = 512.0
    log_clip_init: float = math.log(2.0)

    def __post_init__(self):
        lo, hi = self.window
        if hi <= lo:
            raise ValueError("window must be ordered")
        for name in ("points_per_unit", "depth", "width", "initial_channels",
                     "kernel_size", "tc_hidden", "tc_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.lambda_init <= 0:
            raise ValueError("initial lengthscale must be positive")

    def grid(self, window: tuple[float, float] | None = None) -> GridSpec:
        lo, hi = self.window if window is None else window
        spacing = 1.0 / self.points_per_unit
        count = int(round((hi - lo) * self.points_per_unit)) + 1
        return GridSpec(origins=(lo,), spacings=(spacing,), counts=(count,))


def paper_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale preset: 4 layers, 32 channels, 16 grid points per unit."""
    base = dict(points_per_unit=16, depth=4, width=32)
    base.update(overrides)
    return replace(ModelConfig(), **base)


@dataclass
class ModelState:
    """Trainable parameters plus optimiser state."""

    config: ModelConfig
    store: nn.ParamStore
    adam: nn.AdamState = field(default_factory=nn.AdamState)


def init_state(config: ModelConfig, rng: np.random.Generator) -> ModelState:
    store = nn.ParamStore()
    store.add("log_lambda", math.log(config.lambda_init))
    tc_sizes = [2] + [config.tc_hidden] * config.tc_layers + [1]
    nn.init_mlp(store, "t_net", tc_sizes, rng)  # sigmoid(0) = 0.5
    nn.init_mlp(store, "c_net", tc_sizes, rng, last_bias=config.log_clip_init)
    k = config.kernel_size
    nn.init_conv(store, "enc", (config.initial_channels, 4, k), rng)
    for i in range(config.depth):
        c_in = config.initial_channels if i == 0 else config.width
        nn.init_conv(store, f"down{i}", (config.width, c_in, k), rng)
    for i in range(config.depth):
        c_in = config.width if i == config.depth - 1 else 2 * config.width
        nn.init_conv(store, f"up{i}", (c_in, config.width, k), rng,
                     transposed=True)
    # Zero-started head: the predictive begins at N(0, 1) whatever the raw
    # channel magnitudes, which keeps the first optimisation steps finite.
    nn.init_conv(store, "final",
                 (config.width + config.initial_channels, 2, k), rng,
                 transposed=True, zero_init=True)
    return ModelState(config=config, store=store)


def tc_maps(state: ModelState, mu, n) -> tuple[Tensor, Tensor]:
    """Learned noise split t(mu, N) in (0, 1) and clip threshold C(mu, N) > 0.

    Context size N is public under the substitution neighbourhood, so feeding
    it to the network costs no privacy. Inputs are standardised as
    (mu, N / 512) before the two small MLPs.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    n = np.atleast_1d(np.asarray(n, dtype=float))
    if np.any(mu <= 0):
        raise ValueError("mu must be positive")
    if np.any(n < 0):
        raise ValueError("context size must be nonnegative")
    x = np.stack([mu, n / state.config.context_norm], axis=-1)
    n_layers = state.config.tc_layers + 1
    t = ad.sigmoid(nn.mlp(x, state.store, "t_net", n_layers))
    c = ad.exp(nn.mlp(x, state.store, "c_net", n_layers))
    return t, c


@dataclass
class ForwardResult:
    """Per-task predictive tensors plus the noise scales actually applied."""

    means: list[Tensor]       # one (M_b,) tensor per task
    log_sds: list[Tensor]
    t: Tensor                 # (B, 1)
    c: Tensor                 # (B, 1)
    sigma_d: list[Tensor]     # scalars, zero tensors when ablated
    sigma_s: list[Tensor]
    mus: np.ndarray


def _grid_kernel_tensor(gx: np.ndarray, lam: Tensor) -> Tensor:
    d2 = -0.5 * (gx[:, None] - gx[None, :]) ** 2
    return ad.exp(ad.mul(d2, ad.power(lam, -2.0)))


def forward_batch(
    state: ModelState,
    tasks: list[Task],
    rng: np.random.Generator | None = None,
    *,
    mode: str = DEPLOY,
    enable_clip: bool = True,
    enable_density_noise: bool = True,
    enable_signal_noise: bool = True,
    noise: list[np.ndarray] | None = None,
    grid: GridSpec | None = None,
) -> ForwardResult:
    """Differentiable forward pass over a batch of tasks.

    Each task consumes exactly one budget's worth of noise. `noise` may pin
    the standard-normal grid draws (one (L, 2) array per task) for gradient
    checks; otherwise they come from `rng`.
    """
    if mode not in (DEPLOY, TRAIN, ABLATION):
        raise ValueError(f"unknown mode {mode!r}")
    flags_all_on = enable_clip and enable_density_noise and enable_signal_noise
    if mode == DEPLOY and not flags_all_on:
        raise ValueError(
            "ablation flags disable the privacy mechanism and are refused at "
            "deployment; use mode='train' or mode='ablation'"
        )
    if not tasks:
        raise ValueError("need at least one task")
    cfg = state.config
    grid = cfg.grid() if grid is None else grid
    if grid.ndim != 1:
        raise ValueError("model operates on 1-D grids")
    gx = grid.axis_coords(0)
    lo, hi = gx[0], gx[-1]
    for task in tasks:
        for xs in (task.context.xs, task.target_xs):
            if xs.size and (xs.min() < lo or xs.max() > hi):
                raise ValueError(
                    f"inputs must lie inside the grid window [{lo}, {hi}]"
                )
    big = grid.total_points
    if noise is not None and len(noise) != len(tasks):
        raise ValueError("need one noise array per task")

    lam = ad.exp(state.store["log_lambda"])
    mus = np.array([mu_from_budget(t.budget) for t in tasks])
    ns = np.array([float(len(t.context)) for t in tasks])
    t_all, c_all = tc_maps(state, mus, ns)

    # One Cholesky factor of the grid noise kernel serves the whole batch.
    need_noise = enable_density_noise or enable_signal_noise
    if need_noise:
        chol = ad.cholesky_op(_grid_kernel_tensor(gx, lam))
        if noise is None:
            if rng is None:
                raise ValueError("need an rng when noise is not supplied")
            zs = [rng.standard_normal((big, 2)) for _ in tasks]
        else:
            zs = []
            for z in noise:
                z = np.asarray(z, dtype=float)
                if z.shape != (big, 2):
                    raise ValueError(f"noise arrays must have shape ({big}, 2)")
                zs.append(z)
        fields = ad.matmul(chol, ad.as_tensor(np.concatenate(zs, axis=1)))

    zero = ad.as_tensor(0.0)
    rows, sigma_ds, sigma_ss = [], [], []
    for b, task in enumerate(tasks):
        mu = mus[b]
        t_b = t_all[b, 0]
        c_b = c_all[b, 0]
        cx, cy = task.context.xs, task.context.ys

        ys = ad.clip_by_value(cy, c_b) if (enable_clip and cx.size) else ad.as_tensor(cy)
        if cx.size:
            d2 = -0.5 * (gx[:, None] - cx[None, :]) ** 2
            w = ad.exp(ad.mul(d2, ad.power(lam, -2.0)))
            density = ad.tsum(w, axis=1)
            signal = ad.reshape(ad.matmul(w, ad.reshape(ys, (-1, 1))), (big,))
        else:
            density = ad.as_tensor(np.zeros(big))
            signal = ad.as_tensor(np.zeros(big))

        if enable_density_noise:
            sigma_d = ad.mul(ad.power(1.0 - t_b, -0.5), math.sqrt(2.0) / mu)
            density = density + ad.mul(sigma_d, fields[:, 2 * b])
        else:
            sigma_d = zero
        if enable_signal_noise:
            sigma_s = ad.mul(ad.mul(c_b, ad.power(t_b, -0.5)), 2.0 / mu)
            signal = signal + ad.mul(sigma_s, fields[:, 2 * b + 1])
        else:
            sigma_s = zero
        sigma_ds.append(sigma_d)
        sigma_ss.append(sigma_s)

        # Decoder-internal normalisation by the public context size: channel
        # magnitudes grow linearly with N, which wrecks optimisation if fed
        # raw. Scaling all four channels by the same constant is invertible
        # post-processing, so the representation (and its privacy) is intact,
        # and the constant channels still carry the applied noise level in
        # the scaled units.
        scale = 1.0 / (1.0 + ns[b])
        ones = np.ones((1, 1, big))
        rows.append(ad.concat([
            ad.reshape(ad.mul(density, scale), (1, 1, big)),
            ad.reshape(ad.mul(signal, scale), (1, 1, big)),
            ad.mul(ad.mul(sigma_d, scale), ones),
            ad.mul(ad.mul(sigma_s, scale), ones),
        ], axis=1))
    x = ad.concat(rows, axis=0)

    out = _decode(state, x)

    means, log_sds = [], []
    for b, task in enumerate(tasks):
        tx = task.target_xs
        td2 = -0.5 * (gx[:, None] - tx[None, :]) ** 2
        tw = ad.exp(ad.mul(td2, ad.power(lam, -2.0)))
        pb = ad.matmul(out[b], tw)  # (2, L) @ (L, M) -> (2, M)
        means.append(pb[0])
        log_sds.append(pb[1])
    return ForwardResult(means=means, log_sds=log_sds, t=t_all, c=c_all,
                         sigma_d=sigma_ds, sigma_s=sigma_ss, mus=mus)


def _decode(state: ModelState, x: Tensor) -> Tensor:
    """UNet over the grid: strided downs, transposed ups with skip concats."""
    store, cfg = state.store, state.config
    h = ad.relu(ad.conv1d(x, store["enc.w"], store["enc.b"]))
    skips = []
    for i in range(cfg.depth):
        skips.append(h)
        h = ad.relu(ad.conv1d(h, store[f"down{i}.w"], store[f"down{i}.b"],
                              stride=2))
    u = h
    for i in reversed(range(cfg.depth)):
        u = ad.relu(ad.conv1d_transpose(
            u, store[f"up{i}.w"], store[f"up{i}.b"], stride=2,
            out_length=skips[i].shape[-1]))
        u = ad.concat([u, skips[i]], axis=1)
    return ad.conv1d_transpose(u, store["final.w"], store["final.b"])


_VAR_FLOOR = 1e-8


def _nll_tensor(mean: Tensor, log_sd: Tensor, ys: np.ndarray) -> Tensor:
    var = ad.exp(ad.mul(log_sd, 2.0)) + _VAR_FLOOR
    resid = mean - ys
    return ad.tmean(
        ad.mul(ad.log(var), 0.5) + 0.5 * _LOG_2PI
        + ad.mul(ad.mul(resid, resid), 0.5) * ad.power(var, -1.0)
    )


def nll_loss(prediction: GaussianPrediction, target_ys) -> float:
    """Mean Gaussian negative log-likelihood over the targets."""
    ys = np.asarray(target_ys, dtype=float)
    if ys.shape != prediction.means.shape:
        raise ValueError("prediction and targets must have equal length")
    v = prediction.variances
    return float(np.mean(
        0.5 * np.log(2.0 * np.pi * v) + (ys - prediction.means) ** 2 / (2.0 * v)
    ))


def batch_loss(
    state: ModelState,
    tasks: list[Task],
    rng: np.random.Generator | None = None,
    **kwargs,
) -> Tensor:
    """Scalar training objective: task-averaged mean target NLL."""
    kwargs.setdefault("mode", TRAIN)
    result = forward_batch(state, tasks, rng, **kwargs)
    losses = [
        _nll_tensor(m, s, task.target_ys)
        for m, s, task in zip(result.means, result.log_sds, tasks)
    ]
    total = losses[0]
    for piece in losses[1:]:
        total = total + piece
    return ad.mul(total, 1.0 / len(losses))


def forward(
    state: ModelState,
    context: ContextSet,
    target_xs,
    budget,
    rng: np.random.Generator,
    **kwargs,
) -> GaussianPrediction:
    """Single-task forward pass returning a concrete Gaussian predictive."""
    task = Task(context=context, target_xs=np.asarray(target_xs, dtype=float),
                target_ys=np.zeros(np.asarray(target_xs).size), budget=budget)
    result = forward_batch(state, [task], rng, **kwargs)
    means = result.means[0].value.copy()
    variances = np.exp(2.0 * result.log_sds[0].value) + _VAR_FLOOR
    return GaussianPrediction(means, variances)


def meta_test(
    state: ModelState,
    context: ContextSet,
    budget,
    target_xs,
    rng: np.random.Generator,
) -> GaussianPrediction:
    """One private prediction: a single forward pass with fresh noise.

    Everything derived from the returned predictive inherits the task's
    (epsilon, delta) guarantee by post-processing.
    """
    return forward(state, context, target_xs, budget, rng, mode=DEPLOY)


def evaluate(
    state: ModelState,
    tasks: list[Task],
    rng: np.random.Generator,
    **kwargs,
) -> np.ndarray:
    """Per-task meta-test NLLs."""
    out = np.empty(len(tasks))
    for i, task in enumerate(tasks):
        kwargs.setdefault("mode", DEPLOY)
        pred = forward(state, task.context, task.target_xs, task.budget, rng,
                       **kwargs)
        out[i] = nll_loss(pred, task.target_ys)
    return out


@dataclass
class TrainResult:
    log_rows: list[dict]
    best_val_nll: float
    best_step: int


def meta_train(
    state: ModelState,
    task_sampler,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 16,
    val_tasks: list[Task] | None = None,
    cadence: int | None = None,
    log_path=None,
    **forward_kwargs,
) -> TrainResult:
    """Meta-train with Adam, periodic validation and best-checkpoint tracking.

    `task_sampler(rng)` returns one fresh task. Every `cadence` steps
    (default steps/200) the mean validation NLL is computed and the best
    parameter vector retained; the best parameters are restored into `state`
    before returning. The DP mechanism stays active throughout training.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return TrainResult(log_rows=[], best_val_nll=math.nan, best_step=0)
    cadence = cadence or max(1, steps // 200)
    store = state.store
    best_val, best_step, best_params = math.inf, 0, None
    rows = []
    t0 = time.perf_counter()
    running = []
    for step in range(1, steps + 1):
        tasks = [task_sampler(rng) for _ in range(batch_size)]
        store.zero_grad()
        loss = batch_loss(state, tasks, rng, **forward_kwargs)
        loss_val = float(loss.value)
        if not math.isfinite(loss_val):
            raise NumericalError(
                f"non-finite training loss {loss_val} at step {step} "
                f"(lambda={math.exp(float(store['log_lambda'].value)):.4g})"
            )
        loss.backward()
        nn.adam_step(store, state.adam)
        running.append(loss_val)

        if step % cadence == 0 or step == steps:
            val_nll = math.nan
            if val_tasks:
                val_rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=(0x5EED, step)))
                val_nll = _validation_nll(state, val_tasks, val_rng,
                                          **forward_kwargs)
                if val_nll < best_val:
                    best_val, best_step = val_nll, step
                    best_params = {n: p.value.copy() for n, p in store.items()}
            row = {
                "step": step,
                "train_nll": float(np.mean(running)),
                "val_nll": val_nll,
                "lambda": math.exp(float(store["log_lambda"].value)),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            rows.append(row)
            running = []
            logger.info(
                "step %d train %.4f val %.4f lambda %.4f", step,
                row["train_nll"], row["val_nll"], row["lambda"])
    if best_params is not None:
        for name, value in best_params.items():
            store[name].value = value
    if log_path is not None:
        write_training_log(log_path, rows)
    return TrainResult(log_rows=rows, best_val_nll=best_val,
                       best_step=best_step)


def _validation_nll(state, tasks, rng, **forward_kwargs) -> float:
    forward_kwargs.setdefault("mode", TRAIN)
    total = 0.0
    chunk = 16
    for i in range(0, len(tasks), chunk):
        batch = tasks[i : i + chunk]
        result = forward_batch(state, batch, rng, **forward_kwargs)
        for m, s, task in zip(result.means, result.log_sds, batch):
            total += float(_nll_tensor(m, s, task.target_ys).value)
    return total / len(tasks)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_nll", "val_nll", "lambda", "wall_ms"])
        for row in rows:
            writer.writerow([
                row["step"],
                format(row["train_nll"], ".17g"),
                format(row["val_nll"], ".17g"),
                format(row["lambda"], ".17g"),
                format(row["wall_ms"], ".17g"),
            ])


def save_checkpoint(directory, state: ModelState) -> None:
    import json
    import os

    nn.save_params(directory, state.store)
    cfg = state.config
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "window": list(cfg.window),
            "points_per_unit": cfg.points_per_unit,
            "depth": cfg.depth,
            "width": cfg.width,
            "initial_channels": cfg.initial_channels,
            "kernel_size": cfg.kernel_size,
            "lambda_init": cfg.lambda_init,
            "tc_hidden": cfg.tc_hidden,
            "tc_layers": cfg.tc_layers,
            "context_norm": cfg.context_norm,
            "log_clip_init": cfg.log_clip_init,
        }, fh, indent=2)


def load_checkpoint(directory) -> ModelState:
    import json
    import os

    with open(os.path.join(directory, "config.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    raw["window"] = tuple(raw["window"])
    config = ModelConfig(**raw)
    state = init_state(config, np.random.default_rng(0))
    nn.load_params(directory, state.store)
    return state
