"""Command-line interface.

One executable with subcommands for privacy accounting, grid noise sampling,
task generation, training, evaluation and the reference predictors. All
randomness flows from an explicit --seed, so output files are deterministic
functions of (flags, config, seed). CSV floats carry 17 significant digits
so they round-trip through text exactly.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import accounting as acc
from . import model as mdl
from . import oracle as orc
from . import taskgen as tg
from .accounting import PrivacyBudget
from .errors import DataError, NumericalError
from .gridsample import GridSpec, kronecker_sample, per_dim_factors, rbf_1d
from .kernels import EQ, MATERN32, SAWTOOTH_META, KernelSpec

logger = logging.getLogger("privcnp")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v
                             for v in row])


def _parse_grid(text: str) -> GridSpec:
    """Grid flag format: origin:spacing:count, one block per dimension
    separated by commas, e.g. "0:0.03125:448" or "0:0.5:8,0:0.5:8"."""
    origins, spacings, counts = [], [], []
    for block in text.split(","):
        parts = block.split(":")
        if len(parts) != 3:
            raise DataError(f"bad grid block {block!r}; want origin:spacing:count")
        try:
            origins.append(float(parts[0]))
            spacings.append(float(parts[1]))
            counts.append(int(parts[2]))
        except ValueError as err:
            raise DataError(f"bad grid block {block!r}: {err}") from err
    return GridSpec(origins=tuple(origins), spacings=tuple(spacings),
                    counts=tuple(counts))


def _kernel_spec(args) -> KernelSpec:
    return KernelSpec(
        family=args.family,
        lengthscale=args.lengthscale,
        signal_scale=args.signal_scale,
        noise_scale=args.noise_scale,
    )


# --------------------------------------------------------------------------
# Subcommand implementations.
# --------------------------------------------------------------------------


def cmd_account(args) -> int:
    budget = PrivacyBudget(args.eps, args.delta)
    sens = math.sqrt(args.sensitivity_sq)
    mu = acc.mu_from_budget(budget)
    print(f"mu = {_fmt(mu)}")
    if args.eps <= 1.0:
        print(f"sigma_classical = {_fmt(acc.classical_functional_sigma(sens, budget))}")
    else:
        print("sigma_classical = n/a (bound requires eps <= 1)")
    print(f"sigma_rdp = {_fmt(acc.rdp_functional_sigma(sens, budget))}")
    print(f"sigma_gdp = {_fmt(acc.gdp_functional_sigma(sens, budget))}")
    return 0


def cmd_compare_accountants(args) -> int:
    sens = math.sqrt(args.sensitivity_sq)
    rows = []
    for eps_text in args.eps_grid.split(","):
        eps = float(eps_text)
        budget = PrivacyBudget(eps, args.delta)
        classical = (acc.classical_functional_sigma(sens, budget)
                     if eps <= 1.0 else math.nan)
        rows.append([
            eps,
            classical,
            acc.rdp_functional_sigma(sens, budget),
            acc.gdp_functional_sigma(sens, budget),
        ])
    _write_csv(args.out, ["eps", "sigma_classical", "sigma_rdp", "sigma_gdp"],
               rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_sample_grid_noise(args) -> int:
    grid = _parse_grid(args.grid)
    rng = np.random.default_rng(args.seed)
    factors = per_dim_factors(grid, [rbf_1d(args.lengthscale)] * grid.ndim)
    sample = kronecker_sample(factors, rng)
    from .gridsample import grid_points

    pts = grid_points(grid)
    header = [f"x{d}" for d in range(grid.ndim)] + ["value"]
    rows = [[*map(float, pt), float(v)]
            for pt, v in zip(pts, sample.ravel())]
    _write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} grid values to {args.out}")
    return 0


def cmd_gen_tasks(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.data is not None:
        xs, ys, _ = tg.load_real_dataset(args.data, args.input_column,
                                         args.output_column)
        tasks = []
        for _ in range(args.n):
            eps = float(rng.uniform(args.eps_min, args.eps_max))
            n_ctx = int(rng.integers(1, xs.size))
            tasks.append(tg.split_real_task(
                xs, ys, n_ctx, rng, PrivacyBudget(eps, args.delta)))
    else:
        if args.family == MATERN32:
            cfg = tg.sim_to_real_config()
        else:
            cfg = tg.GeneratorConfig(family=args.family)
        if args.lengthscale is not None:
            cfg = tg.replace(cfg, lengthscale_range=(args.lengthscale,
                                                     args.lengthscale))
        cfg = tg.replace(cfg, eps_range=(args.eps_min, args.eps_max),
                         delta=args.delta)
        if args.eval:
            cfg = cfg.for_eval()
        tasks = [tg.gen_task(cfg, rng) for _ in range(args.n)]
    tg.write_tasks(args.out, tasks)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_train(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.preset == "tiny":
        config = mdl.tiny_config()
    else:
        config = mdl.paper_config()
    state = mdl.init_state(config, rng)

    if args.tasks_family == MATERN32:
        cfg = tg.sim_to_real_config()
    else:
        cfg = tg.GeneratorConfig(family=args.tasks_family)
    if args.lengthscale is not None:
        cfg = tg.replace(cfg, lengthscale_range=(args.lengthscale,
                                                 args.lengthscale))
    val_cfg = cfg.for_eval()
    val_rng = np.random.default_rng(args.seed + 1)
    val_tasks = [tg.gen_task(val_cfg, val_rng) for _ in range(args.val_tasks)]

    if args.task_pool > 0:
        sampler = tg.pooled_sampler(cfg, rng, args.task_pool)
    else:
        sampler = lambda r: tg.gen_task(cfg, r)

    os.makedirs(args.out, exist_ok=True)
    result = mdl.meta_train(
        state,
        sampler,
        steps=args.steps,
        rng=rng,
        batch_size=args.batch,
        val_tasks=val_tasks,
        log_path=os.path.join(args.out, "training_log.csv"),
        mode="train",
    )
    mdl.save_checkpoint(args.out, state)
    print(f"best validation nll {_fmt(result.best_val_nll)} "
          f"at step {result.best_step}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = mdl.load_checkpoint(args.ckpt)
    tasks = tg.read_tasks(args.tasks)
    rng = np.random.default_rng(args.seed)
    nlls = mdl.evaluate(state, tasks, rng)
    _write_csv(args.out, ["task", "nll"],
               [[i, float(v)] for i, v in enumerate(nlls)])
    mean = float(nlls.mean())
    ci = 1.96 * float(nlls.std(ddof=1)) / math.sqrt(len(nlls)) if len(nlls) > 1 else 0.0
    print(f"mean nll = {_fmt(mean)} +/- {_fmt(ci)} (95% CI over tasks)")
    return 0


def cmd_oracle(args) -> int:
    spec = _kernel_spec(args)
    tasks = tg.read_tasks(args.tasks)
    rows = []
    for i, task in enumerate(tasks):
        rows.append([i, float(orc.gp_oracle_nll(spec, task))])
    _write_csv(args.out, ["task", "nll"], rows)
    mean = float(np.mean([r[1] for r in rows]))
    print(f"mean oracle nll = {_fmt(mean)}")
    return 0


def cmd_lower_bound(args) -> int:
    spec = _kernel_spec(args)
    tasks = tg.read_tasks(args.tasks)
    grid = _parse_grid(args.grid)
    rng = np.random.default_rng(args.seed)
    rows = []
    for i, task in enumerate(tasks):
        nll = orc.lower_bound_nll(spec, [task], args.smoothing_lengthscale,
                                  args.sigma_s, grid, rng,
                                  noise_draws=args.noise_draws)
        rows.append([i, float(nll)])
    _write_csv(args.out, ["task", "nll"], rows)
    mean = float(np.mean([r[1] for r in rows]))
    print(f"mean lower-bound nll = {_fmt(mean)}")
    return 0


# --------------------------------------------------------------------------
# Parser construction and dispatch.
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage errors instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(message)


class UsageError(Exception):
    pass


def _add_kernel_flags(p):
    p.add_argument("--family", default=EQ,
                   choices=[EQ, MATERN32, SAWTOOTH_META])
    p.add_argument("--lengthscale", type=float, default=1.0)
    p.add_argument("--signal-scale", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=0.05)


def build_parser() -> _Parser:
    parser = _Parser(prog="privcnp",
                     description="Private functional-mechanism neural process tool")
    parser.add_argument("--config", default=None,
                        help="JSON file of flag defaults; flags override it")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("account", help="budget to noise-scale conversion")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sensitivity-sq", type=float, required=True)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("compare-accountants",
                       help="sigma of the three accountants over an eps grid")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sensitivity-sq", type=float, required=True)
    p.add_argument("--eps-grid", default="0.1,0.25,0.5,0.75,1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_accountants)

    p = sub.add_parser("sample-grid-noise", help="draw one grid GP noise field")
    p.add_argument("--grid", required=True,
                   help="origin:spacing:count[,origin:spacing:count...]")
    p.add_argument("--lengthscale", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_grid_noise)

    p = sub.add_parser("gen-tasks", help="generate meta-learning tasks")
    p.add_argument("--family", default=EQ,
                   choices=[EQ, MATERN32, SAWTOOTH_META])
    p.add_argument("--lengthscale", type=float, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eval", action="store_true",
                   help="draw targets from the context input range")
    p.add_argument("--eps-min", type=float, default=0.90)
    p.add_argument("--eps-max", type=float, default=4.00)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--data", default=None, help="CSV file of real data")
    p.add_argument("--input-column", default=None)
    p.add_argument("--output-column", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", help="meta-train a model")
    p.add_argument("--tasks-family", default=EQ,
                   choices=[EQ, MATERN32, SAWTOOTH_META])
    p.add_argument("--lengthscale", type=float, default=None)
    p.add_argument("--preset", default="tiny", choices=["tiny", "paper"])
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--val-tasks", type=int, default=128)
    p.add_argument("--task-pool", type=int, default=4096,
                   help="pre-generated task pool size; 0 draws fresh tasks")
    p.add_argument("--workers", type=int, default=1,
                   help="accepted for interface stability; execution is serial")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="meta-test a checkpoint on stored tasks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exact GP posterior NLL per task")
    _add_kernel_flags(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("lower-bound",
                       help="Bayes floor for the signal-noise-only ablation")
    _add_kernel_flags(p)
    p.add_argument("--sigma-s", type=float, required=True)
    p.add_argument("--smoothing-lengthscale", dest="smoothing_lengthscale",
                   type=float, default=0.20,
                   help="encoder smoothing lengthscale lambda")
    p.add_argument("--grid", required=True)
    p.add_argument("--noise-draws", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lower_bound)

    return parser


def _apply_config_defaults(parser, argv):
    """Load --config JSON and install its entries as parser defaults.

    Config keys mirror flag names with dashes or underscores; explicit flags
    always win because defaults only apply when a flag is absent.
    """
    pre = _Parser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        with open(known.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read config {known.config}: {err}") from err
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in cfg.items()}
    parser.set_defaults(**defaults)
    # set_defaults on the top-level parser does not reach subparser
    # arguments, so push the same defaults into each subcommand too. A value
    # from the config also satisfies flags that are otherwise required.
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            for arg in sp._actions:
                if arg.dest in defaults:
                    arg.default = defaults[arg.dest]
                    arg.required = False


def _setup_logging():
    level_name = os.environ.get("PRIVCNP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level_name, logging.ERROR),
                        format="%(asctime)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.command == "gen-tasks" and args.data is not None and (
                args.input_column is None or args.output_column is None):
            raise UsageError("--data requires --input-column and --output-column")
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
