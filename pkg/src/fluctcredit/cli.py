"""Command-line interface: ``fluctcredit <command> [options]``.

Every run writes its outputs plus ``manifest.json`` (resolved configuration
and SHA-256 of each output) into the output directory. Exit codes: 0 success,
2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._accel import use_numba
from .ensemble import CorrelationModel
from .loss import (
    RISK_LEVELS,
    LossDensity,
    PortfolioSpec,
    QuadratureConfig,
    QuadratureError,
    QuadratureWarning,
    avg_loss_density,
    avg_loss_density_limit,
    default_grid,
    risk_table,
)
from .marketdata import (
    TRADING_DAYS_PER_MONTH,
    compute_returns,
    estimate_covariance,
    estimate_N_variance_identity,
    export_prices,
    fit_N_cramer_von_mises,
    fit_N_least_squares,
    homogeneous_summary,
    homogenized,
    ingest_prices,
    rotate_scale_returns,
)
from .montecarlo import SimConfig, relative_deviation_report, run_simulation, sample_var_etl

OUTPUT_DIR_ENV = "FLUCTCREDIT_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "fluctcredit-out"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
DEFAULT_LEVERAGES = (0.75, 0.80, 0.85, 0.90)


class NumericalFailure(RuntimeError):
    pass


class StageError(Exception):
    """A pipeline stage failed; keeps the original exception for the exit code."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.exc = exc


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, exc) from exc


# --- small parsers -------------------------------------------------------


def _n_value(text) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    if str(text).lower() in ("inf", "stationary", "infinity"):
        return math.inf
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("N must be positive")
    return value


def _k_value(text):
    if str(text).lower() == "limit":
        return "limit"
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("K must be a positive integer or 'limit'")
    return k


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_manifest(out: Path, command: str, config: dict, outputs: list) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "backend": "numba" if use_numba() else "numpy",
        "config": {k: _jsonable(v) for k, v in sorted(config.items())},
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_keyvalue(path: Path, block: dict) -> None:
    width = max(len(k) for k in block)
    lines = [f"{k.ljust(width)}  {_fmt(v)}" for k, v in block.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)


# --- risk tables ---------------------------------------------------------


def write_risk_csv(path: Path, rows: dict, meta: Optional[dict] = None) -> None:
    """``rows`` maps ``(leverage, alpha)`` to ``(VaR, ETL)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={_jsonable(v)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["leverage", "alpha", "VaR", "ETL"])
        for (lev, alpha), (var, etl) in sorted(rows.items()):
            w.writerow([f"{lev:.17g}", f"{alpha:.17g}", f"{var:.17g}", f"{etl:.17g}"])


def read_risk_csv(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "risk.csv"
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header != ["leverage", "alpha", "VaR", "ETL"]:
            raise ValueError(f"{path}: not a risk table (header {header})")
        for row in reader:
            lev, alpha, var, etl = map(float, row)
            rows[(round(lev, 10), round(alpha, 10))] = (var, etl)
    if not rows:
        raise ValueError(f"{path}: empty risk table")
    return rows


def _risk_text(rows: dict) -> str:
    lines = [f"{'F/V0':>6} {'alpha':>7} {'VaR':>10} {'ETL':>10}"]
    for (lev, alpha), (var, etl) in sorted(rows.items()):
        lines.append(f"{lev:>6.3f} {alpha:>7.3%} {var:>10.5f} {etl:>10.5f}")
    return "\n".join(lines) + "\n"


# --- portfolio and correlation inputs ------------------------------------


def _read_table(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty table")
    return {k: [r[k] for r in rows] for k in rows[0]}


def portfolio_from_args(a, leverage: float, K: Optional[int] = None) -> PortfolioSpec:
    if a.portfolio:
        t = _read_table(a.portfolio)
        missing = {"mu", "rho"} - set(t)
        if missing:
            raise ValueError(f"{a.portfolio}: missing columns {sorted(missing)}")
        mu = np.array(t["mu"], dtype=float)
        rho = np.array(t["rho"], dtype=float)
        V0 = np.array(t["V0"], dtype=float) if "V0" in t else np.full(mu.size, a.V0)
        F = leverage * V0
        return PortfolioSpec(F, V0, mu, rho, a.T)
    return PortfolioSpec.homogeneous(K or a.K, leverage * a.V0, a.V0, a.mu, a.rho, a.T)


def write_correlation_csv(path: Path, tickers, C: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(tickers)
        for row in C:
            w.writerow([f"{x:.17g}" for x in row])


def read_correlation_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    C = np.array(rows, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"{path}: correlation matrix must be square")
    return C


# --- commands -------------------------------------------------------------


def cmd_ingest(a, out: Path) -> list:
    panel = _stage("ingest", ingest_prices, a.prices, a.missing_threshold)
    prices = out / "prices.csv"
    export_prices(panel, prices)
    report = out / "ingest.txt"
    _write_keyvalue(report, {
        "assets_kept": panel.K,
        "days": panel.M,
        "assets_dropped": len(panel.dropped),
        "dropped": ",".join(panel.dropped) or "-",
    })
    return [prices, report]


def cmd_fit(a, out: Path) -> list:
    """ingest -> returns -> covariance -> (homogenization) -> rotate/scale -> N fits."""
    panel = _stage("ingest", ingest_prices, a.prices, a.missing_threshold)
    r = _stage("returns", compute_returns, panel, a.dt)
    est = _stage("covariance", estimate_covariance, r, a.time_unit_days)
    model = _stage("homogeneous_summary", homogeneous_summary, est.cov)
    modes = ("empirical", "homogeneous") if a.mode == "both" else (a.mode,)
    fits, block = [], {
        "K": panel.K,
        "days": panel.M,
        "dt_days": a.dt,
        "c": model.c,
        "sigma_bar": float(np.mean(est.rho)),
        "mu_bar": float(np.mean(est.mu)),
        "time_unit_days": a.time_unit_days,
    }
    for mode in modes:
        cov = est.cov if mode == "empirical" else homogenized(est.cov)
        sample = _stage(f"rotate_scale[{mode}]", rotate_scale_returns, r, cov)
        tag = "emp" if mode == "empirical" else "hom"
        for fn in (fit_N_least_squares, fit_N_cramer_von_mises):
            f = _stage(f"{fn.__name__}[{mode}]", fn, sample)
            fits.append((mode, f))
            block[f"N_{tag}_{'ls' if f.method == 'least_squares' else 'cvm'}"] = f.N_hat
        if a.export_sample:
            np.savetxt(out / f"standardized_{mode}.csv", sample, fmt="%.17g", header="r_tilde", comments="")
    try:
        vi = estimate_N_variance_identity(r, max(model.c, 0.0))
        fits.append(("any", vi))
        block["N_variance_identity"] = vi.N_hat
    except ValueError as exc:
        block["N_variance_identity"] = f"inconsistent ({exc})"
    summary = out / "fit.txt"
    _write_keyvalue(summary, block)
    table = out / "fit.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "method", "N_hat", "diagnostic", "at_boundary"])
        for mode, f in fits:
            w.writerow([mode, f.method, f"{f.N_hat:.6g}", f"{f.diagnostic:.10g}", int(f.at_boundary)])
    assets = out / "assets.csv"
    with open(assets, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "mu", "rho"])
        for t, mu, rho in zip(panel.tickers, est.mu, est.rho):
            w.writerow([t, f"{mu:.17g}", f"{rho:.17g}"])
    corr = out / "correlation.csv"
    write_correlation_csv(corr, panel.tickers, est.cov.correlation_matrix())
    outputs = [summary, table, assets, corr]
    if a.export_sample:
        outputs += [out / f"standardized_{m}.csv" for m in modes]
    return outputs


def cmd_loss_density(a, out: Path) -> list:
    if math.isinf(a.N):
        raise ValueError("loss-density needs a finite N; use simulate for the stationary case")
    q = QuadratureConfig(z_nodes=a.z_nodes, u_nodes=a.u_nodes, scheme=a.scheme)
    grid = default_grid(a.grid_points)
    rows, outputs = {}, []
    for lev in a.leverage:
        if a.K == "limit":
            if a.portfolio:
                raise ValueError("limit mode needs a homogeneous portfolio")
            p = PortfolioSpec.homogeneous(1, lev * a.V0, a.V0, a.mu, a.rho, a.T)
            model = CorrelationModel(2, a.c, a.N)  # K is irrelevant in the limit
            d = avg_loss_density_limit(grid, p.terms(0), model, q, cell_average=not a.pointwise)
        else:
            p = portfolio_from_args(a, lev)
            d = avg_loss_density(grid, p, CorrelationModel(p.K, a.c, a.N), q)
        path = out / f"density_{lev:.4g}.csv"
        d.to_csv(path)
        outputs.append(path)
        for alpha, v in risk_table(d, a.levels).items():
            rows[(lev, alpha)] = v
    return outputs + _emit_risk(out, rows, {"kind": "analytic", "K": a.K, "c": a.c, "N": a.N})


def _emit_risk(out: Path, rows: dict, meta: dict) -> list:
    csv_path, txt_path = out / "risk.csv", out / "risk.txt"
    write_risk_csv(csv_path, rows, meta)
    txt_path.write_text(_risk_text(rows), encoding="utf-8")
    return [csv_path, txt_path]


def cmd_simulate(a, out: Path) -> list:
    if a.correlation:
        corr = read_correlation_csv(a.correlation)
        K = corr.shape[0]
    else:
        if a.c is None:
            raise ValueError("simulate needs --c or --correlation")
        K = a.K if a.K != "limit" else None
        if K is None:
            raise ValueError("simulate needs a finite K")
        corr = None
    rows, outputs = {}, []
    for lev in a.leverage:
        p = portfolio_from_args(a, lev, K)
        correlation = corr if corr is not None else CorrelationModel(p.K, a.c)
        cfg = SimConfig(p, correlation, N=a.N, realizations=a.realizations, seed=a.seed, chunk_size=a.chunk_size,
                        literal_paper_transform=a.literal_transform, threads=a.threads)
        s = run_simulation(cfg)
        path = out / f"losses_{lev:.4g}.csv"
        s.to_csv(path)
        outputs.append(path)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for alpha in a.levels:
                rows[(lev, alpha)] = sample_var_etl(s, alpha)
    outputs += _emit_risk(out, rows, {"kind": "monte_carlo", "N": a.N, "realizations": a.realizations, "seed": a.seed})
    if a.compare_density:
        ref = LossDensity.from_csv(a.compare_density)
        lines = [f"{'alpha':>7} {'VaR_mc':>10} {'VaR_ref':>10} {'rel':>8}"]
        lev = a.leverage[0]
        for alpha, (var, _) in risk_table(ref, a.levels).items():
            mc = rows[(lev, alpha)][0]
            lines.append(f"{alpha:>7.3%} {mc:>10.5f} {var:>10.5f} {(mc - var) / var if var else math.nan:>8.3%}")
        cmp_path = out / "compare_density.txt"
        cmp_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(cmp_path)
    return outputs


def cmd_risk_report(a, out: Path) -> list:
    rows = {}
    for path in a.density:
        d = LossDensity.from_csv(path)
        lev = _leverage_of(d.params, a)
        for alpha, v in risk_table(d, a.levels).items():
            rows[(lev, alpha)] = v
    return _emit_risk(out, rows, {"kind": "report", "sources": len(a.density)})


def _leverage_of(params: dict, a) -> float:
    for key in ("leverage", "F_over_V0"):
        if key in params:
            return round(float(params[key]), 10)
    if "F" in params and "V0" in params:
        try:
            return round(float(params["F"]) / float(params["V0"]), 10)
        except ValueError:
            pass
    if len(a.density) == 1:
        return math.nan
    raise ValueError("density file carries no leverage; pass one file per run")


def cmd_compare(a, out: Path) -> list:
    base = read_risk_csv(a.run_a)
    variant = read_risk_csv(a.run_b)
    table = relative_deviation_report(base, variant)
    csv_path, txt_path = out / "compare.csv", out / "compare.txt"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["leverage", "measure", "alpha", "delta_percent"])
        for (lev, measure, alpha), d in sorted(table.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2])):
            w.writerow([f"{lev:g}", measure, f"{alpha:g}", f"{d:g}"])
    alphas = sorted({k[2] for k in table})
    levs = sorted({k[0] for k in table})
    lines = []
    for measure in ("VaR", "ETL"):
        lines.append(f"{measure:<6}" + "".join(f"{al:>9.1%}" for al in alphas))
        for lev in levs:
            lines.append(f"{lev:<6.2f}" + "".join(f"{table[(lev, measure, al)]:>9.1f}" for al in alphas))
        lines.append("")
    txt_path.write_text("\n".join(lines), encoding="utf-8")
    return [csv_path, txt_path]


COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "loss-density": cmd_loss_density,
    "simulate": cmd_simulate,
    "risk-report": cmd_risk_report,
    "compare": cmd_compare,
}


# --- argument parsing ------------------------------------------------------


def _portfolio_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", type=_k_value, default=100, help="number of obligors, or 'limit' (loss-density only)")
    p.add_argument("--c", type=float, default=None, help="average correlation")
    p.add_argument("--N", type=_n_value, default=5.0, help="fluctuation strength; 'inf' is stationary")
    p.add_argument("--leverage", type=float, nargs="+", default=list(DEFAULT_LEVERAGES), help="F/V0 values")
    p.add_argument("--V0", type=float, default=100.0)
    p.add_argument("--mu", type=float, default=0.15, help="drift per unit time")
    p.add_argument("--rho", type=float, default=0.25, help="volatility per sqrt unit time")
    p.add_argument("--T", type=float, default=1.0, help="maturity in the same time unit")
    p.add_argument("--portfolio", default=None, help="CSV with per-obligor columns mu,rho[,V0]")
    p.add_argument("--levels", type=float, nargs="+", default=list(RISK_LEVELS))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=None,
                        help=f"output directory (default: ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR})")
    common.add_argument("--config", default=None, help="JSON file of option defaults; flags override it")
    common.add_argument("--threads", type=int, default=1, help="worker-thread cap; results do not depend on it")
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="fluctcredit", description="Credit risk under fluctuating correlations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="clean a price CSV")
    p.add_argument("prices")
    p.add_argument("--missing-threshold", type=float, default=0.10)

    p = sub.add_parser("fit", parents=[common], help="calibrate c and N from prices")
    p.add_argument("prices")
    p.add_argument("--dt", type=int, default=1, help="return interval in trading days")
    p.add_argument("--mode", choices=("empirical", "homogeneous", "both"), default="both")
    p.add_argument("--missing-threshold", type=float, default=0.10)
    p.add_argument("--time-unit-days", type=float, default=TRADING_DAYS_PER_MONTH)
    p.add_argument("--export-sample", action="store_true")

    p = sub.add_parser("loss-density", parents=[common], help="analytic average loss density")
    _portfolio_args(p)
    p.add_argument("--grid-points", type=int, default=2001)
    p.add_argument("--z-nodes", type=int, default=64)
    p.add_argument("--u-nodes", type=int, default=64)
    p.add_argument("--scheme", choices=("adaptive", "gauss_laguerre_hermite"), default="adaptive")
    p.add_argument("--pointwise", action="store_true",
                   help="limit mode: pointwise density instead of exact cell averages")

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo loss distribution")
    _portfolio_args(p)
    p.add_argument("--correlation", default=None, help="CSV correlation matrix (overrides --c)")
    p.add_argument("--realizations", type=int, default=1_000_000)
    p.add_argument("--chunk-size", type=int, default=2000)
    p.add_argument("--literal-transform", action="store_true", help="scale draws by eigenvalues, not their roots")
    p.add_argument("--compare-density", default=None, help="analytic density CSV to compare the first leverage with")

    p = sub.add_parser("risk-report", parents=[common], help="VaR/ETL table from density CSVs")
    p.add_argument("density", nargs="+")
    p.add_argument("--levels", type=float, nargs="+", default=list(RISK_LEVELS))

    p = sub.add_parser("compare", parents=[common], help="relative deviation table of two runs")
    p.add_argument("run_a", help="baseline risk.csv or run directory")
    p.add_argument("run_b", help="variant risk.csv or run directory")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    first = parser.parse_args(argv)
    if first.config is None:
        return first
    with open(first.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{first.config}: config must be a JSON object")
    known = vars(first)
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise ValueError(f"{first.config}: unknown options {unknown}")
    # re-parse with config values as defaults so explicit flags win
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparsers.choices[first.command].set_defaults(**cfg)
    return parser.parse_args(argv)


def _validate(a) -> None:
    if a.threads < 1:
        raise ValueError("--threads must be at least 1")
    for name in ("N",):
        if hasattr(a, name) and isinstance(getattr(a, name), str):
            setattr(a, name, _n_value(getattr(a, name)))
    if hasattr(a, "K") and isinstance(a.K, str):
        a.K = _k_value(a.K)
    if a.command in ("loss-density",) and a.c is None:
        raise ValueError("--c is required")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = parse_args(argv)
        _validate(a)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(a.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("error", QuadratureWarning)
            outputs = COMMANDS[a.command](a, out)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {a.command}: {exc}", file=sys.stderr)
        return code
    config = {k: v for k, v in vars(a).items() if k not in ("config",)}
    config["output_dir"] = str(out)
    write_manifest(out, a.command, config, outputs)
    print(f"{a.command}: wrote {len(outputs)} files to {out}")
    return EXIT_OK


def _exit_code(exc: BaseException) -> Optional[int]:
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, (QuadratureError, QuadratureWarning, NumericalFailure, np.linalg.LinAlgError,
                        FloatingPointError, ZeroDivisionError, OverflowError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValueError, OSError, KeyError)):
        return EXIT_VALIDATION
    return None


if __name__ == "__main__":
    sys.exit(main())
