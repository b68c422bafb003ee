"""Command-line front end: ``ermasym {predict,bound,optloss,simulate,threshold}``.

Every subcommand writes CSV to ``--out`` (stdout by default).  Options can also
come from a ``key=value`` file given with ``--config``; flags on the command
line win.  Exit codes: 0 success, 1 usage, 2 solver non-convergence,
3 non-convex optimal loss.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import re
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import (AchievabilityFailed, DensityNotDifferentiable, ErmasymError,
                     MeanNotPositive, NoConvergence, NoRoot, OptimizerDiverged)
from .limits import ls_suboptimality, sigma_opt, stam_lower_bound
from .link_models import NoisySigned, make_model
from .losses import make_loss
from .optimal_loss import build_optimal_loss, load_loss_table, verify_achievability
from .saddle import SolverOptions, solve_system
from .simulate import (Experiment, result_row, run_experiment, separability_threshold,
                       threshold_curve)

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_NONCONVEX = 0, 1, 2, 3
NA = "NA"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x):
    if x is None:
        return NA
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "INF" if x > 0 else "-INF"
    if math.isnan(x):
        return NA
    return f"{x:.10g}"


def parse_sweep(text, name="sweep"):
    """``start:stop:count[:log]`` -> list of floats."""
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise UsageError(f"{name} must look like start:stop:count[:log], got {text!r}")
    try:
        a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"cannot parse {name} {text!r}") from None
    if k < 1:
        raise UsageError(f"{name} count must be at least 1")
    if len(parts) == 4:
        if parts[3] != "log":
            raise UsageError(f"{name} spacing must be 'log', got {parts[3]!r}")
        if a <= 0 or b <= 0:
            raise UsageError(f"log {name} needs positive endpoints")
        vals = np.geomspace(a, b, k)
    else:
        vals = np.linspace(a, b, k)
    return [float(v) for v in vals]


def read_config(path):
    """``key=value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    try:
        fh = open(path)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.lstrip("-").replace("-", "_")] = v
    return out


def _common(p):
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--model", default="signed",
                   help="signed, noisysigned, logistic, probit, gaussian-sy, tabulated")
    p.add_argument("--eps", type=float, default=0.0, help="label-flip probability (noisysigned)")
    p.add_argument("--sy-mean", type=float, default=0.5, help="E[SY] for gaussian-sy")
    p.add_argument("--sy-var", type=float, default=None, help="Var[SY] for gaussian-sy")
    p.add_argument("--model-table", help="w,p CSV for the tabulated model")
    p.add_argument("--out", help="output CSV (default stdout)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--emit-gnuplot", metavar="SCRIPT", help="also write a gnuplot script for --out")


def _deltas(p):
    p.add_argument("--delta", type=float, help="oversampling ratio m/n")
    p.add_argument("--delta-sweep", help="start:stop:count[:log]")


def _solver(p):
    p.add_argument("--tol", type=float, default=SolverOptions.tol)
    p.add_argument("--max-iter", type=int, default=SolverOptions.max_iter)
    p.add_argument("--starts", type=int, default=1, help="multistart count")
    p.add_argument("--n-g", type=int, default=SolverOptions.n_g, help="Gauss-Hermite order in G")
    p.add_argument("--n-sy", type=int, default=SolverOptions.n_sy, help="nodes per SY segment")


def _loss_args(p):
    g = p.add_mutually_exclusive_group(required=False)
    g.add_argument("--loss", help="square, lad, hinge, logistic, exponential")
    g.add_argument("--loss-table", help="w,loss,dloss CSV (e.g. written by optloss)")


def build_parser():
    top = _Parser(prog="ermasym", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("predict", help="asymptotic correlation of ERM with a given loss")
    _common(p)
    _deltas(p)
    _solver(p)
    _loss_args(p)

    p = sub.add_parser("bound", help="best correlation over convex losses")
    _common(p)
    _deltas(p)

    p = sub.add_parser("optloss", help="tabulate the optimal loss and check it attains the bound")
    _common(p)
    _deltas(p)
    _solver(p)
    p.add_argument("--table-out", default="optloss_{model}_d{delta:g}.csv",
                   help="path pattern for the loss table ({model}, {delta} are substituted)")
    p.add_argument("--grid", type=int, default=2048, help="points in the loss table")
    p.add_argument("--no-verify", action="store_true", help="skip the achievability solve")

    p = sub.add_parser("simulate", help="Monte Carlo ERM with prediction columns")
    _common(p)
    _deltas(p)
    _solver(p)
    _loss_args(p)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--signal", choices=("e1", "random"), default="e1")
    p.add_argument("--no-predict", action="store_true", help="leave the prediction columns NA")

    p = sub.add_parser("threshold", help="linear-separability threshold delta*")
    _common(p)
    p.add_argument("--eps-sweep", help="start:stop:count over noisysigned eps")
    return top


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required: predict, bound, optloss, simulate, threshold")
    if args.config:
        conf = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        bad = sorted(set(conf) - known)
        if bad:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(bad)}")
        # config values become defaults, so explicit flags still override them
        sub.set_defaults(**{k: _coerce(sub, k, v) for k, v in conf.items()})
        args = parser.parse_args(argv)
    _validate(args)
    return args


def _coerce(sub, dest, text):
    act = next(a for a in sub._actions if a.dest == dest)
    if isinstance(act, argparse._StoreTrueAction):
        return text.lower() in ("1", "true", "yes", "on")
    try:
        return act.type(text) if act.type else text
    except ValueError:
        raise UsageError(f"config value {dest}={text!r} is not valid") from None


def _validate(args):
    if not 0.0 <= args.eps <= 0.5:
        raise UsageError("--eps must lie in [0, 1/2]")
    if hasattr(args, "delta"):
        if args.delta is not None and args.delta_sweep:
            raise UsageError("give either --delta or --delta-sweep")
        args.deltas = parse_sweep(args.delta_sweep, "--delta-sweep") if args.delta_sweep else (
            [args.delta] if args.delta is not None else [])
        if any(d <= 1 for d in args.deltas):
            raise UsageError("delta values must exceed 1")
    if hasattr(args, "loss") and args.command in ("predict", "simulate"):
        if not args.loss and not args.loss_table:
            raise UsageError("--loss or --loss-table is required")
    if getattr(args, "eps_sweep", None):
        eps = parse_sweep(args.eps_sweep, "--eps-sweep")
        if any(not 0 < e <= 0.5 for e in eps):
            raise UsageError("eps-sweep values must lie in (0, 1/2]")
        args.eps_values = eps
    for name in ("n", "trials", "steps", "starts", "grid"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            raise UsageError(f"--{name} must be positive")


def thread_cap(requested):
    env = os.environ.get("ERMASYM_THREADS")
    cap = None
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise UsageError(f"ERMASYM_THREADS must be an integer, got {env!r}") from None
    if requested is None:
        return cap
    return min(requested, cap) if cap else requested


def _model(args):
    try:
        return make_model(args.model, eps=args.eps, sy_mean=args.sy_mean,
                          sy_var=args.sy_var, table=args.model_table)
    except (ValueError, OSError) as e:
        raise UsageError(str(e)) from None


def _loss(args):
    if args.loss_table:
        try:
            return load_loss_table(args.loss_table)
        except (ValueError, OSError, KeyError) as e:
            raise UsageError(f"cannot load loss table: {e}") from None
    try:
        return make_loss(args.loss)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _opts(args, threads=None):
    return SolverOptions(tol=args.tol, max_iter=args.max_iter, n_starts=args.starts,
                         n_g=args.n_g, n_sy=args.n_sy, threads=threads)


def _pmap(fn, items, threads):
    # rows stay in input order whatever order the workers finish in
    if len(items) <= 1 or threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# --- subcommands ------------------------------------------------------------

PREDICT_COLUMNS = ["model", "loss", "delta", "mu", "alpha", "lambda", "sigma_eff", "corr",
                   "res_mu", "res_alpha", "res_lambda", "uniqueness", "tol", "n_g", "n_sy", "note"]


def cmd_predict(args):
    model, loss = _model(args), _loss(args)
    if not args.deltas:
        raise UsageError("predict needs --delta or --delta-sweep")
    threads = thread_cap(args.threads)
    opts = _opts(args, threads)

    def row(delta):
        base = {"model": model.tag, "loss": loss.name, "delta": _fmt(delta), "tol": _fmt(args.tol),
                "n_g": args.n_g, "n_sy": args.n_sy}
        try:
            sol = solve_system(loss, model, delta, opts)
        except (NoConvergence, ErmasymError) as e:
            base.update({k: NA for k in PREDICT_COLUMNS if k not in base})
            base["note"] = f"{type(e).__name__}: {e}"
            return base, False
        base.update(mu=_fmt(sol.mu), alpha=_fmt(sol.alpha), **{"lambda": _fmt(sol.lam)},
                    sigma_eff=_fmt(sol.sigma_eff), corr=_fmt(sol.correlation),
                    res_mu=_fmt(sol.residuals[0]), res_alpha=_fmt(sol.residuals[1]),
                    res_lambda=_fmt(sol.residuals[2]), uniqueness=sol.uniqueness_flag, note="")
        return base, True

    out = _pmap(row, args.deltas, threads)
    return [r for r, _ in out], PREDICT_COLUMNS, EXIT_OK if all(ok for _, ok in out) else EXIT_SOLVER


BOUND_COLUMNS = ["model", "delta", "sigma_opt", "corr_opt", "stam_sigma2_lb", "ls_ratio",
                 "sign_changes", "note"]


def cmd_bound(args):
    model = _model(args)
    if not args.deltas:
        raise UsageError("bound needs --delta or --delta-sweep")
    try:
        ratio = _fmt(ls_suboptimality(model)[1])
    except (DensityNotDifferentiable, MeanNotPositive):
        ratio = NA

    def row(delta):
        r = {"model": model.tag, "delta": _fmt(delta), "ls_ratio": ratio, "note": ""}
        try:
            so = sigma_opt(model, delta)
        except NoRoot as e:
            r.update(sigma_opt=NA, corr_opt=NA, stam_sigma2_lb=NA, sign_changes=NA, note=str(e))
            return r, False
        try:
            stam = _fmt(stam_lower_bound(model, delta))
        except DensityNotDifferentiable:
            stam = NA
        r.update(sigma_opt=_fmt(so.sigma), corr_opt=_fmt(so.correlation), stam_sigma2_lb=stam,
                 sign_changes=len(so.sign_changes))
        if len(so.sign_changes) > 1:
            r["note"] = "kappa crosses 1/delta more than once; smallest root reported"
        return r, True

    out = _pmap(row, args.deltas, thread_cap(args.threads))
    return [r for r, _ in out], BOUND_COLUMNS, EXIT_OK if all(ok for _, ok in out) else EXIT_SOLVER


OPTLOSS_COLUMNS = ["model", "delta", "sigma_opt", "corr_opt", "alpha1", "alpha2", "convexity",
                   "lemma_margin", "mu", "alpha", "lambda", "corr_achieved", "table", "note"]


def _slug(model):
    s = model.name if not isinstance(model, NoisySigned) or model.name == "signed" else \
        f"{model.name}{model.eps:g}"
    return re.sub(r"[^A-Za-z0-9.+-]", "_", s)


def cmd_optloss(args):
    model = _model(args)
    if not args.deltas:
        raise UsageError("optloss needs --delta or --delta-sweep")
    threads = thread_cap(args.threads)
    opts = _opts(args, threads)
    rows, code = [], EXIT_OK
    for delta in args.deltas:
        path = args.table_out.format(model=_slug(model), delta=delta)
        r = {"model": model.tag, "delta": _fmt(delta), "table": path, "note": ""}
        try:
            table = build_optimal_loss(model, delta, n_grid=args.grid)
        except NoRoot as e:
            r.update({k: NA for k in OPTLOSS_COLUMNS if k not in r})
            r["note"] = str(e)
            rows.append(r)
            code = max(code, EXIT_SOLVER)
            continue
        table.write_csv(path)
        r.update(sigma_opt=_fmt(table.sigma_opt), corr_opt=_fmt(table.correlation),
                 alpha1=_fmt(table.alpha1), alpha2=_fmt(table.alpha2), convexity=table.convexity,
                 lemma_margin=_fmt(table.lemma.margin), mu=NA, alpha=NA, corr_achieved=NA,
                 **{"lambda": NA})
        if table.convexity == "NonConvexDetected":
            r["note"] = "optimal loss is not convex on the grid"
            code = EXIT_NONCONVEX
        elif not args.no_verify:
            try:
                sol = verify_achievability(table, opts)
                r.update(mu=_fmt(sol.mu), alpha=_fmt(sol.alpha), corr_achieved=_fmt(sol.correlation),
                         **{"lambda": _fmt(sol.lam)})
            except (AchievabilityFailed, NoConvergence, ErmasymError) as e:
                r["note"] = f"{type(e).__name__}: {e}"
                code = max(code, EXIT_SOLVER)
        rows.append(r)
    return rows, OPTLOSS_COLUMNS, code


SIM_COLUMNS = ["model", "loss", "delta", "n", "trials", "corr_mean", "corr_stderr", "err_mean",
               "pred_corr", "pred_alpha2", "warnings", "seed", "steps"]


def cmd_simulate(args):
    model, loss = _model(args), _loss(args)
    deltas = args.deltas
    if not deltas and "delta" in getattr(loss, "meta", {}):
        deltas = [float(loss.meta["delta"])]
    if not deltas:
        raise UsageError("simulate needs --delta or --delta-sweep (or a loss table with delta)")
    if not model.has_label_law:
        raise UsageError(f"model {model.tag} has no label law and cannot be simulated")
    threads = thread_cap(args.threads)
    rows, code = [], EXIT_OK
    for delta in deltas:
        pred, notes = None, []
        if not args.no_predict:
            try:
                pred = solve_system(loss, model, delta, _opts(args, threads))
            except (NoConvergence, ErmasymError) as e:
                notes.append(f"prediction: {type(e).__name__}")
        exp = Experiment(model, loss, delta, n=args.n, trials=args.trials, seed=args.seed,
                         steps=args.steps, signal=args.signal, threads=threads)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                summary = run_experiment(exp)
        except OptimizerDiverged as e:
            r = {k: NA for k in SIM_COLUMNS}
            r.update(model=model.tag, loss=loss.name, delta=_fmt(delta), n=args.n,
                     trials=args.trials, warnings=f"OptimizerDiverged: {e}", seed=args.seed,
                     steps=args.steps)
            rows.append(r)
            code = EXIT_SOLVER
            continue
        summary.warnings[:0] = notes
        r = result_row(summary, pred)
        r.update(seed=args.seed, steps=args.steps)
        rows.append(r)
    return rows, SIM_COLUMNS, code


THRESHOLD_COLUMNS = ["model", "eps", "delta_star"]


def cmd_threshold(args):
    if getattr(args, "eps_values", None):
        return [{"model": "noisysigned", "eps": _fmt(e), "delta_star": _fmt(d)}
                for e, d in threshold_curve(args.eps_values)], THRESHOLD_COLUMNS, EXIT_OK
    model = _model(args)
    d = separability_threshold(model)
    eps = getattr(model, "eps", None)
    return [{"model": model.tag, "eps": _fmt(eps), "delta_star": _fmt(d)}], THRESHOLD_COLUMNS, EXIT_OK


COMMANDS = {"predict": cmd_predict, "bound": cmd_bound, "optloss": cmd_optloss,
            "simulate": cmd_simulate, "threshold": cmd_threshold}

# (x, y) columns for the companion gnuplot script
PLOT_AXES = {"predict": ("delta", "corr"), "bound": ("delta", "corr_opt"),
             "optloss": ("delta", "corr_opt"), "simulate": ("delta", "corr_mean"),
             "threshold": ("eps", "delta_star")}


def write_csv(rows, columns, fh):
    w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, NA) if not isinstance(r.get(k), float) else _fmt(r[k])
                    for k in columns})


def gnuplot_script(command, csv_path):
    x, y = PLOT_AXES[command]
    return (
        "set datafile separator ','\n"
        "set datafile missing 'NA'\n"
        f"set xlabel '{x}'\nset ylabel '{y}'\n"
        "set key autotitle columnhead\n"
        f"plot '{csv_path}' using (column('{x}')):(column('{y}')) with linespoints\n"
    )


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        if args.emit_gnuplot and not args.out:
            raise UsageError("--emit-gnuplot needs --out")
        rows, columns, code = COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ermasym: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    buf = io.StringIO()
    write_csv(rows, columns, buf)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if args.emit_gnuplot:
        with open(args.emit_gnuplot, "w") as fh:
            fh.write(gnuplot_script(args.command, args.out))
    for r in rows:
        note = r.get("note") or ""
        if note:
            print(f"ermasym: delta={r.get('delta')}: {note}", file=sys.stderr)
    return code
