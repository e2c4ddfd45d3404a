"""Command-line interface.

Subcommands::

    bahadur-lasso estimate --input data.csv [--estimator fo] [--anchors 0.5]
    bahadur-lasso simulate --scenario unconditional-s2 [--reps 50]
    bahadur-lasso coverage --scenario causal-s0-n400 [--reps 100]
    bahadur-lasso diagnose --scenario conditional-s5

Exit status is 0 when every requested fit converged and all outputs were
written, 1 for configuration or input errors and 2 when a fit did not
converge.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .bundles import JointModel, pmf_tables, substream, w_vector
from .config import RunConfig, build_config
from .harness import (
    TABLE_ESTIMATORS,
    ScenarioError,
    factor_diagnostics,
    run_coverage_study,
    run_experiment,
    scenario_config,
)
from .localized import LocalFit, build_local_design, design_penalty, fit_local_first_order, fit_local_plugin
from .marginals import (
    KernelSpec,
    bootstrap_box_local,
    bootstrap_box_unconditional,
    fit_marginals_local,
    fit_marginals_unconditional,
)
from .solver import (
    FitResult,
    PenaltySpec,
    SolverOptions,
    features_unconditional,
    fit_adversarial_approx,
    fit_first_order,
    fit_plugin,
    lambda_max,
)
from .tables import (
    SchemaError,
    coefficients_csv,
    local_fit_csv,
    pmf_csv,
    read_binary_table,
    to_csv,
    write_text,
)
from .tuning import bandwidth_rule, cross_validate_lambda, lambda_grid, lambda_value, weights

logger = logging.getLogger("bahadur_lasso")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2
MAX_PMF_M = 12


class CLIError(Exception):
    pass


def _write_error(out: Path, kind: str, message: str) -> None:
    write_text(out / "error.csv", to_csv(["kind", "message"], [[kind, message]]))


def _echo_config(cfg: RunConfig, extra: Optional[dict] = None) -> None:
    text = cfg.dump_yaml()
    if extra:
        import yaml

        text += yaml.safe_dump({"resolved": extra}, sort_keys=True)
    write_text(Path(cfg.out) / "config.yaml", text)


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _unconditional_rule(cfg: RunConfig) -> str:
    return {"theory_pi": "theory_PI", "theory_fo": "theory_FO", "theory_oracle": "theory_oracle"}[cfg.lambda_rule]


def _estimate_unconditional(cfg: RunConfig, Y: np.ndarray) -> tuple[list, bool]:
    out = Path(cfg.out)
    n, M = Y.shape
    opts = SolverOptions()
    kind = cfg.estimator

    def prepare(rows):
        Ys = Y if rows is None else Y[rows]
        alpha = fit_marginals_unconditional(Ys)
        W, G = features_unconditional(Ys, alpha)
        box = None
        if kind in ("fo", "adversarial"):
            box = bootstrap_box_unconditional(Ys, alpha, cfg.delta_alpha, cfg.bootstrap_B, substream(cfg.seed, 1))
        return Ys, alpha, W, G, box

    def fit(prep, lam):
        Ys, alpha, W, G, box = prep

        def solve(w):
            pen = PenaltySpec(lam, w)
            if kind == "fo":
                return fit_first_order(W, G, alpha, box, pen, opts)
            if kind == "adversarial":
                return fit_adversarial_approx(Ys, alpha, box, pen, opts, rng_seed=substream(cfg.seed, 2))
            return fit_plugin(W, pen, opts)

        w = weights("I", W)
        if cfg.weights == "II":
            for _ in range(cfg.reweight_iters):
                w = weights("II", W, factors=np.maximum(1.0 + W @ solve(w).r_hat, 1e-3))
        return solve(w)

    full = prepare(None)
    _, alpha, W, _, box = full
    if kind == "saa":
        r_hat, converged, diag = W.mean(axis=0), True, [("lambda", float("nan"))]
        lam = float("nan")
    else:
        if isinstance(cfg.lambda_rule, float):
            lam = cfg.lambda_rule
        elif cfg.lambda_rule == "cv":
            grid = lambda_grid(lambda_max(W, weights("I", W)))

            def fit_fn(train, test, lam_):
                prep = prepare(train)
                return 1.0 + w_vector(Y[test], prep[1]) @ fit(prep, lam_).r_hat

            lam = cross_validate_lambda(fit_fn, n, grid, cfg.cv_folds, substream(cfg.seed, 3)).lam
        else:
            lam = lambda_value(_unconditional_rule(cfg), n, M, delta=cfg.delta)
        res = fit(full, lam)
        r_hat, converged = res.r_hat, res.converged
        diag = [("lambda", lam), ("converged", converged), ("iterations", res.iterations),
                ("kkt_residual", res.kkt_residual), ("objective", res.objective),
                ("heuristic", res.heuristic)]
    files = [write_text(out / "coefficients.csv", coefficients_csv(r_hat))]
    mrows = [[j + 1, alpha[j]] + ([box.level_lo[j], box.level_hi[j]] if box is not None else ["", ""])
             for j in range(M)]
    files.append(write_text(out / "marginals.csv", to_csv(["coordinate", "alpha_hat", "box_lo", "box_hi"], mrows)))
    factors = 1.0 + W @ r_hat
    feas = [("min_factor_sample", float(factors.min()))]
    if M <= MAX_PMF_M:
        table = JointModel(alpha, r_hat).pmf_table()
        files.append(write_text(out / "pmf.csv", pmf_csv(table, M)))
        feas += [("min_probability", float(table.min())), ("valid", bool(table.min() >= 0))]
    files.append(write_text(out / "feasibility.csv", to_csv(["quantity", "value"], feas)))
    files.append(write_text(out / "diagnostics.csv", to_csv(["quantity", "value"], diag)))
    return files, converged


def _estimate_local(cfg: RunConfig, X: np.ndarray, Y: np.ndarray) -> tuple[list, bool]:
    out = Path(cfg.out)
    n, M = Y.shape
    d = X.shape[1]
    if cfg.estimator not in ("plugin", "fo", "saa"):
        raise CLIError("with covariates the estimator must be plugin, fo or saa")
    if not cfg.anchors:
        raise CLIError("covariate data needs --anchors")
    if len(cfg.anchors) % d:
        raise CLIError(f"anchors must come in groups of d={d}")
    h = cfg.bandwidth if cfg.bandwidth is not None else bandwidth_rule("log_p", n, M, d)
    kernel = KernelSpec(cfg.kernel, h, d)
    opts = SolverOptions()
    fits, diag, tables = [], [], []
    converged = True
    for a, x in enumerate(np.asarray(cfg.anchors, dtype=float).reshape(-1, d)):
        lin = fit_marginals_local(X, Y, x, kernel)
        des = build_local_design(X, Y, x, kernel)
        label = ";".join(f"{v:.10g}" for v in x)
        if cfg.estimator == "saa":
            k = des.kernel_weights
            a_hat = (k @ des.W) / k.sum()
            res = FitResult(np.concatenate([a_hat, np.zeros(des.p * d)]), float("nan"), 0, True, float("nan"), 0.0)
            f = LocalFit(des.anchor, h, a_hat, np.zeros((des.p, d)), res, method="saa")
            lam = float("nan")
        else:
            if isinstance(cfg.lambda_rule, float):
                lam = cfg.lambda_rule
            elif cfg.lambda_rule == "cv":
                raise CLIError("cross-validated lambda is available for covariate data through simulate only")
            else:
                rule = {"theory_pi": "theory_local_PI", "theory_fo": "theory_local_FO",
                        "theory_oracle": "theory_local_oracle"}[cfg.lambda_rule]
                lam = lambda_value(rule, n, M, d=d, h=h, delta=cfg.delta)
            pen = design_penalty(des, lam, "I")

            def solve(pen_):
                if cfg.estimator == "fo":
                    box = bootstrap_box_local(lin, cfg.delta_alpha, cfg.bootstrap_B, substream(cfg.seed, 1, a))
                    return fit_local_first_order(des, box, pen_, opts)
                return fit_local_plugin(des, pen_, opts)

            f = solve(pen)
            if cfg.weights == "II":
                for _ in range(cfg.reweight_iters):
                    r_i = f.a[None, :] + (des.X - des.anchor) @ f.b.T
                    fac = np.maximum(1.0 + np.sum(des.W * r_i, axis=1), 1e-3)
                    f = solve(design_penalty(des, lam, "II", factors=fac))
        fits.append(f)
        converged &= f.converged
        diag.append([label, lam, f.converged, f.result.iterations, f.result.kkt_residual, h])
        if M <= MAX_PMF_M:
            tables.append((label, pmf_tables(lin.alpha_hat[None, :], f.a[None, :])[0]))
    files = [write_text(out / "local_fit.csv", local_fit_csv(fits)),
             write_text(out / "diagnostics.csv",
                        to_csv(["anchor", "lambda", "converged", "iterations", "kkt_residual", "bandwidth"], diag))]
    if tables:
        body = "".join(pmf_csv(t, M, anchor=lab).split("\n", 1)[1] for lab, t in tables)
        files.append(write_text(out / "pmf.csv", "anchor,y,probability\n" + body))
        feas = [[lab, float(t.min()), bool(t.min() >= 0)] for lab, t in tables]
        files.append(write_text(out / "feasibility.csv", to_csv(["anchor", "min_probability", "valid"], feas)))
    return files, converged


def cmd_estimate(cfg: RunConfig) -> int:
    Y, X = read_binary_table(cfg.input)
    if X is None:
        files, ok = _estimate_unconditional(cfg, Y)
    else:
        files, ok = _estimate_local(cfg, X, Y)
    _echo_config(cfg)
    for f in files:
        logger.info("wrote %s", f)
    if not ok:
        _write_error(Path(cfg.out), "nonconvergence", "at least one fit did not reach the tolerance")
        return EXIT_NONCONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / coverage / diagnose
# ---------------------------------------------------------------------------


def _experiment_overrides(cfg: RunConfig) -> dict:
    over = dict(base_seed=cfg.seed, jobs=cfg.jobs, delta=cfg.delta, delta_alpha=cfg.delta_alpha,
                bootstrap_B=cfg.bootstrap_B, cv_folds=cfg.cv_folds, weights_II=cfg.weights_II,
                redraw_marginals=cfg.redraw_marginals, kernel=cfg.kernel, reweight_iters=cfg.reweight_iters)
    if cfg.reps is not None:
        over["reps"] = cfg.reps
    if cfg.bandwidth is not None:
        over["bandwidth"] = cfg.bandwidth
    if cfg.estimators:
        over["estimators"] = tuple(cfg.estimators)
    if cfg.lambda_modes:
        over["lambda_modes"] = tuple(cfg.lambda_modes)
    return over


def cmd_simulate(cfg: RunConfig) -> int:
    exp = scenario_config(cfg.scenario, **_experiment_overrides(cfg))
    if exp.scenario == "causal":
        raise CLIError("causal scenarios are run with the coverage subcommand")
    report = run_experiment(exp)
    out = Path(cfg.out)
    write_text(out / "summary.csv", report.summary_csv())
    write_text(out / "raw.csv", report.raw_csv())
    write_text(out / "fits.csv", report.fits_csv())
    write_text(out / "failures.csv", report.failures_csv())
    write_text(out / "table.txt", report.render())
    _echo_config(cfg, exp.to_dict())
    sys.stdout.write(report.render())
    if report.failures or not all(f[4] for f in report.fits):
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_coverage(cfg: RunConfig) -> int:
    over = _experiment_overrides(cfg)
    over.pop("estimators", None)
    over.pop("lambda_modes", None)
    exp = scenario_config(cfg.scenario, **over)
    if exp.scenario != "causal":
        raise CLIError("coverage needs a causal-s{s}-n{N} scenario")
    report = run_coverage_study(exp, methods=cfg.gps_methods)
    out = Path(cfg.out)
    write_text(out / "coverage.csv", report.coverage_csv())
    write_text(out / "raw.csv", report.raw_csv())
    write_text(out / "failures.csv", report.failures_csv())
    _echo_config(cfg, exp.to_dict())
    sys.stdout.write(report.render())
    return EXIT_NONCONVERGED if report.failures else EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    exp = scenario_config(cfg.scenario, **_experiment_overrides(cfg))
    if exp.scenario == "causal":
        raise CLIError("factor diagnostics are defined for unconditional and conditional scenarios")
    diag = factor_diagnostics(exp)
    out = Path(cfg.out)
    write_text(out / "quantiles.csv", diag.quantiles_csv())
    write_text(out / "histogram.csv", diag.histogram_csv())
    _echo_config(cfg, exp.to_dict())
    sys.stdout.write(diag.quantiles_csv())
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "coverage": cmd_coverage,
            "diagnose": cmd_diagnose}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with run settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (env BAHADUR_LASSO_OUT)")
    common.add_argument("--jobs", type=int, help="worker processes (env BAHADUR_LASSO_JOBS)")
    common.add_argument("--estimator", help="plugin|fo|adversarial|saa; for simulate a comma list such as fo_I,plugin_I")
    common.add_argument("--weights", choices=["I", "II"])
    common.add_argument("--lambda-rule", dest="lambda_rule",
                        help="theory_pi|theory_fo|theory_oracle|cv or a number")
    common.add_argument("--bandwidth", type=float)
    common.add_argument("--anchors", type=_floats, help="comma separated anchor coordinates")
    common.add_argument("--reps", type=int)
    common.add_argument("--kernel", choices=["uniform-ball", "floor-shifted-quadratic"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bahadur-lasso", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("estimate", parents=[common], help="fit on a binary CSV (Y1..YM, optional X1..Xd)")
    p.add_argument("--input")
    for name, hlp in (("simulate", "replicate an estimation experiment"),
                      ("coverage", "AIPW coverage study"),
                      ("diagnose", "quantiles of the Bahadur factor")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--scenario", help="e.g. unconditional-s2, conditional-s5, causal-s0-n400")
    return parser


def _flags(args: argparse.Namespace) -> dict:
    flags = {k: getattr(args, k, None) for k in
             ("seed", "out", "jobs", "weights", "lambda_rule", "bandwidth", "anchors", "reps", "kernel",
              "input", "scenario")}
    est = args.estimator
    if est is not None:
        if args.command == "estimate":
            flags["estimator"] = est
        else:
            names = [e.strip() for e in est.split(",") if e.strip()]
            if args.weights:
                names = [e if e in TABLE_ESTIMATORS or e == "saa" or "_" in e else f"{e}_{args.weights}"
                         for e in names]
            flags["estimators"] = names
    if args.command != "estimate" and args.lambda_rule is not None:
        flags.pop("lambda_rule")
        flags["lambda_modes"] = ["cv" if args.lambda_rule == "cv" else "theory"]
    return flags


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = build_config(args.command, args.config, _flags(args))
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    try:
        return COMMANDS[cfg.command](cfg)
    except (CLIError, ScenarioError, SchemaError, OSError, ValueError) as exc:
        _write_error(Path(cfg.out), type(exc).__name__, str(exc))
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
