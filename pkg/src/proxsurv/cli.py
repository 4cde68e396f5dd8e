"""Command-line entry point: ``proxsurv simulate`` and ``proxsurv analyze``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(too many failed replications, non-converged fits, positivity violations,
no events). Output files are written only after all computation succeeds.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .bridge import HBridgeSpec, QBridgeSpec, default_moments
from .censoring import DEFAULT_FLOOR, PositivityError, fit_censoring
from .data import DataError, RoleSpec, TimeGrid, event_time_grid, load_dataset
from .estimators import (CurveEstimate, EstimationError, FittedBridges, fit_h_bridge,
                         fit_q_bridge, nuc_ipw_curve, pdr_curve, pipw_curve, with_sup_test)
from .simulation import (DgpParams, SimScenario, StudyFailure, fit_with_restarts,
                         report_json, run_study, write_report_csv)
from .zsolver import SingularBreadError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CURVE_COLUMNS = ("t", "psi", "se", "ci_lo", "ci_hi", "s1", "s0")

_NUMERIC_ERRORS = (EstimationError, SingularBreadError, PositivityError, np.linalg.LinAlgError,
                   FloatingPointError)


class ConfigError(ValueError):
    """Configuration file is unreadable or fails schema validation."""


# ---------------------------------------------------------------------------
# config schemas


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DgpConfig(_Strict):
    treatment_effect: Optional[float] = None
    x_mean: float = 1.1
    x_sd: float = Field(0.75, gt=0)
    u_mean: float = 1.1
    u_sd: float = Field(0.75, gt=0)
    ps_coef: tuple[float, float, float] = (0.3, 0.4, -0.6)
    z_coef: tuple[float, float, float] = (-0.2, -0.3, 0.65)
    z_sd: float = Field(0.5, gt=0)
    w_coef: tuple[float, float, float] = (-0.6, 0.4, 0.65)
    w_sd: float = Field(0.5, gt=0)
    hazard: tuple[float, float, float, float] = (0.1, 0.6, 0.25, 0.5)
    censoring_rate: float = Field(0.2, gt=0)
    admin_censoring: float = Field(2.0, gt=0)

    def build(self) -> DgpParams:
        fields = self.model_dump(exclude={"treatment_effect"})
        params = DgpParams(**fields)
        if self.treatment_effect is not None:
            params = params.with_treatment_effect(self.treatment_effect)
        return params


class ScenarioConfig(_Strict):
    n: int = Field(2000, ge=100)
    reps: int = Field(200, ge=1)
    seed: int = Field(0, ge=0)
    estimator: Literal["pipw", "pdr", "nuc_ipw"] = "pipw"
    q_misspec: bool = False
    h_misspec: Literal["none", "sqrt_plus_one", "sqrt"] = "none"
    eval_times: tuple[float, ...] = (0.25, 0.5, 0.75)
    dgp: DgpConfig = DgpConfig()
    censoring_kind: Literal["marginal_km", "stratified_km"] = "marginal_km"
    grid_quantile: float = Field(0.95, gt=0, le=1)
    level: float = Field(0.05, gt=0, lt=1)
    sup_test: bool = False
    sup_draws: int = Field(1000, ge=100)
    sup_level: float = Field(0.05, gt=0, lt=1)
    n_boot: int = Field(200, ge=2)
    restarts: int = Field(5, ge=0)

    def build(self) -> SimScenario:
        fields = self.model_dump(exclude={"dgp"})
        try:
            return SimScenario(dgp=self.dgp.build(), **fields)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


class SimulateConfig(_Strict):
    scenarios: list[ScenarioConfig] = Field(min_length=1)
    workers: Optional[int] = Field(None, ge=1)


class RolesConfig(_Strict):
    time: str
    event: str
    treat: str
    z: list[str] = Field(min_length=1)
    w: list[str] = Field(min_length=1)
    x: list[str] = []


class AnalyzeConfig(_Strict):
    dataset: str
    roles: RolesConfig
    estimators: list[Literal["pipw", "pdr", "nuc_ipw"]] = ["pipw", "pdr"]
    censoring: Literal["marginal_km", "stratified_km"] = "marginal_km"
    floor: float = Field(DEFAULT_FLOOR, gt=0, lt=1)
    grid_quantile: float = Field(0.95, gt=0, le=1)
    sup_draws: int = Field(1000, ge=100)
    seed: int = Field(0, ge=0)
    level: float = Field(0.05, gt=0, lt=1)
    n_boot: int = Field(200, ge=2)
    restarts: int = Field(5, ge=0)
    out: Optional[str] = None

    @field_validator("estimators")
    @classmethod
    def _distinct(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("estimators must be a non-empty list without duplicates")
        return v


def _read_json(path) -> object:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def _validate(model, doc):
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
                 for e in exc.errors()]
        raise ConfigError("config failed validation:\n" + "\n".join(lines)) from None


def load_simulate_config(path) -> tuple[list[SimScenario], Optional[int]]:
    """A single scenario object, or ``{"scenarios": [...], "workers": k}``."""
    doc = _read_json(path)
    if isinstance(doc, dict) and "scenarios" in doc:
        cfg = _validate(SimulateConfig, doc)
    else:
        cfg = SimulateConfig(scenarios=[_validate(ScenarioConfig, doc)])
    return [s.build() for s in cfg.scenarios], cfg.workers


def load_analyze_config(path) -> AnalyzeConfig:
    cfg = _validate(AnalyzeConfig, _read_json(path))
    dataset = Path(cfg.dataset)
    if not dataset.is_absolute():
        dataset = Path(path).resolve().parent / dataset
    return cfg.model_copy(update={"dataset": str(dataset)})


# ---------------------------------------------------------------------------
# output helpers


def curve_csv(curve: CurveEstimate) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    se = curve.se
    for j, t in enumerate(curve.grid.points):
        writer.writerow([repr(float(v)) for v in (t, curve.psi[j], se[j], curve.ci_lo[j],
                                                  curve.ci_hi[j], curve.s1[j], curve.s0[j])])
    return buf.getvalue()


def curve_svg(curve: CurveEstimate, width: int = 640, height: int = 400) -> str:
    """Static line plot of ``psi(t)`` with its pointwise confidence band."""
    t = np.asarray(curve.grid.points, dtype=float)
    lo, hi = np.asarray(curve.ci_lo), np.asarray(curve.ci_hi)
    margin = 50
    x0, x1 = (0.0, float(t.max())) if t.max() > 0 else (0.0, 1.0)
    y0 = float(min(lo.min(), 0.0))
    y1 = float(max(hi.max(), 0.0))
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def px(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def py(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    def pts(xs, ys):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))

    band = pts(np.concatenate([t, t[::-1]]), np.concatenate([hi, lo[::-1]]))
    zero = py(0.0)
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>',
        f'<line x1="{margin}" y1="{zero:.2f}" x2="{width - margin}" y2="{zero:.2f}" '
        'stroke="gray" stroke-dasharray="4,3"/>',
        f'<polyline points="{pts(t, curve.psi)}" fill="none" stroke="#08519c" stroke-width="1.5"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" '
        'stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" '
        'font-size="12">t</text>',
        f'<text x="{margin}" y="{height - margin + 16}" text-anchor="middle" '
        f'font-size="10">{x0:.3g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="middle" '
        f'font-size="10">{x1:.3g}</text>',
        f'<text x="{margin - 4}" y="{py(y0):.2f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
        f'<text x="{margin - 4}" y="{py(y1):.2f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">'
        f'{curve.label}: psi(t) with {100 * (1 - curve.level):.0f}% pointwise band</text>',
        "</svg>",
        "",
    ])


def _write_all(out_dir: Path, files: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(config_path, out_dir) -> int:
    try:
        scenarios, workers = load_simulate_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reports = []
    for sc in scenarios:
        logger.info("running %s: n=%d, reps=%d", sc.label, sc.n, sc.reps)
        try:
            reports.append(run_study(sc, workers))
        except StudyFailure as exc:
            print(f"error: {exc}", file=sys.stderr)
            for line in exc.report.failures[:10]:
                print(f"  {line}", file=sys.stderr)
            return EXIT_NUMERIC
    buf = io.StringIO()
    write_report_csv(reports, buf)
    _write_all(Path(out_dir), {"study_report.csv": buf.getvalue(),
                               "study_report.json": report_json(reports) + "\n"})
    return EXIT_OK


def _positivity_grid(grid: TimeGrid, censoring) -> TimeGrid:
    """Drop grid points beyond the horizon where censoring survival stays above the floor."""
    ok = np.array([censoring.min_survival(t) >= censoring.floor for t in grid.points])
    if not ok[0]:
        raise PositivityError("censoring survival is below the floor at the first event time")
    stop = len(ok) if ok.all() else int(np.argmin(ok))
    if stop < len(ok):
        logger.warning("grid truncated at t=%.4g by the censoring positivity floor",
                       grid.points[stop - 1])
    return TimeGrid(grid.points[:stop])


def analyze_dataset(cfg: AnalyzeConfig) -> dict[str, CurveEstimate]:
    """Fit the requested estimators on one dataset; raises on any failure."""
    roles = RoleSpec.from_mapping(cfg.roles.model_dump())
    data = load_dataset(cfg.dataset, roles)
    censoring = fit_censoring(data, cfg.censoring, cfg.floor)
    try:
        grid = event_time_grid(data, cfg.grid_quantile)
    except DataError as exc:
        raise EstimationError(str(exc)) from None
    grid = _positivity_grid(grid, censoring)
    moments = default_moments()
    rng = np.random.default_rng([cfg.seed, 1])
    curves = {}
    bridges = None
    if {"pipw", "pdr"} & set(cfg.estimators):
        q0 = QBridgeSpec.zeros(data.z.shape[1], data.x.shape[1])
        q_fit = fit_with_restarts(lambda s: fit_q_bridge(data, s, moments), q0, rng,
                                  cfg.restarts, accept_least_squares=False)
        bridges = FittedBridges(q0.with_params(q_fit.theta_hat), q_fit, censoring, moments)
    for name in cfg.estimators:
        if name == "pipw":
            curve = pipw_curve(data, bridges, grid, cfg.level)
        elif name == "pdr":
            if bridges.h_fit is None:
                h0 = HBridgeSpec.zeros(data.w.shape[1], data.x.shape[1])
                h_fit = fit_with_restarts(
                    lambda s: fit_h_bridge(data, s, moments, censoring, grid.tau), h0, rng,
                    cfg.restarts, accept_least_squares=False)
                bridges.h_spec, bridges.h_fit = h0.with_params(h_fit.theta_hat), h_fit
                bridges.tau = grid.tau
            curve = pdr_curve(data, bridges, grid, cfg.level)
        else:
            curve = nuc_ipw_curve(data, censoring, grid, cfg.n_boot, [cfg.seed, 2], cfg.level)
        curves[name] = with_sup_test(curve, cfg.sup_draws, [cfg.seed, 3])
    return curves


def cmd_analyze(config_path, out_dir: Optional[str] = None) -> int:
    try:
        cfg = load_analyze_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = out_dir or cfg.out
    if out is None:
        print("error: no output directory (use --out or the config key 'out')", file=sys.stderr)
        return EXIT_CONFIG
    try:
        curves = analyze_dataset(cfg)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    files = {}
    sup = {}
    for name, curve in curves.items():
        files[f"curves_{name}.csv"] = curve_csv(curve)
        files[f"curves_{name}.svg"] = curve_svg(curve)
        # bootstrap-based curves test against their own replicates
        draws = cfg.sup_draws if curve.influence is not None else int(curve.boot.shape[0])
        sup[name] = {"statistic": curve.sup_stat, "p_value": curve.sup_pvalue,
                     "draws": draws, "seed": cfg.seed}
    files["suptest.json"] = json.dumps(sup, indent=2, sort_keys=True) + "\n"
    _write_all(Path(out), files)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxsurv",
        description="Proximal causal inference for survival-curve contrasts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="run a Monte Carlo study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="directory for study_report.csv/json")
    p = sub.add_parser("analyze", help="estimate survival contrasts on a CSV dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config key 'out')")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out)
    return cmd_analyze(args.config, args.out)


if __name__ == "__main__":
    sys.exit(main())
