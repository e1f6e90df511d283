"""Timestep loop, metrics and output files."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import FlowModel, accumulation_terms, well_molar_rates
from .case import BBL, DAY, P_STD, PSI, T_STD, CaseConfig, build_model, matrix_field
from .errors import ConvergenceFailure, LinearSolverError, LocsimError, NumericalError
from .grid import neighbor_set
from .locality import support_set, union
from .solvers import SOLVERS, NewtonReport, SolverOptions
from .state import FieldState

logger = logging.getLogger(__name__)


class SolverFailure(LocsimError):
    """Timestep cuts exhausted."""


@dataclass
class StepRecord:
    time_days: float
    dt_days: float
    iterations: int
    outer_iterations: int
    sum_na_over_n: float
    cuts: int
    oil_rate_m3: float
    oil_rate_bbl: float
    gas_rate_m3: float
    bhp_psi: float
    n_subdomains: int = 0


@dataclass
class RunMetrics:
    solver: str
    n_cells: int
    steps: list = field(default_factory=list)

    @property
    def timesteps(self) -> int:
        return len(self.steps)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)

    @property
    def total_outer_iterations(self) -> int:
        return sum(s.outer_iterations for s in self.steps)

    @property
    def total_ma(self) -> float:
        return float(sum(s.sum_na_over_n for s in self.steps))

    @property
    def average_ma(self) -> float:
        it = self.total_iterations
        return self.total_ma / it if it else 0.0

    @property
    def cumulative_oil_bbl(self) -> float:
        return float(sum(s.oil_rate_bbl * s.dt_days for s in self.steps))


@dataclass
class RunResult:
    config: CaseConfig
    metrics: RunMetrics
    state: FieldState
    model: FlowModel
    report_times: list = field(default_factory=list)
    report_pressure: list = field(default_factory=list)
    report_status: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    initial_moles: np.ndarray | None = None
    produced_moles: np.ndarray | None = None
    runtime: float = 0.0

    def moles_in_place(self) -> np.ndarray:
        acc, _ = accumulation_terms(self.model, self.state, np.arange(self.model.n_cells))
        return acc.sum(axis=0)


def timestep_schedule(total: float, dt0: float, dt_max: float, growth: float = 1.2) -> list:
    """Geometric ramp ``min(dt0 * growth**k, dt_max)``, last step shortened to hit ``total``."""
    if not (0 < dt0 <= dt_max):
        raise ValueError("need 0 < dt0 <= dt_max")
    out, t, k = [], 0.0, 0
    while total - t > 1e-9 * total:
        dt = min(dt0 * growth ** k, dt_max, total - t)
        out.append(dt)
        t += dt
        k += 1
    return out


def compute_ma(report: NewtonReport, n: int):
    """Total ``sum(n_A / n)`` over the iterations of a report, and its per-iteration mean."""
    if not report.n_active:
        raise ValueError("empty report")
    total = float(np.sum(report.n_active)) / n
    return total, total / len(report.n_active)


def well_rates(model: FlowModel, state: FieldState):
    """Surface oil and gas rates (m^3/day) summed over all wells."""
    q = well_molar_rates(model, state).sum(axis=0)
    oil, gas = model.fluid.surface_volumes(q, P_STD, T_STD)
    return oil * DAY, gas * DAY


def solver_options(cfg: CaseConfig, trace: bool = False, record_supports: bool = False) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(eps_p=s.eps_p_psi * PSI,
                         eps_set=None if s.eps_set_psi is None else s.eps_set_psi * PSI,
                         m=s.m, max_iter=s.max_iter, max_outer=s.max_outer, trace=trace,
                         record_supports=record_supports, max_dsg=s.max_dsg, eps_sg=s.eps_sg)


def initial_active_set(model: FlowModel, m: int, prev_support=None) -> np.ndarray:
    """Previous-step support plus fracture and well cells; the first step uses the
    fracture cells and their ``m``-layer neighbourhood."""
    g = model.graph
    always = union(g.fracture_cells, model.well_cells())
    if prev_support is None:
        return neighbor_set(g, always, m)
    return union(prev_support, always)


def _fmt_time(t: float) -> str:
    return f"{t:.6g}"


class _Writer:
    def __init__(self, out: Path | None, model: FlowModel, write_fields: bool):
        self.out = out
        self.model = model
        self.write_fields = write_fields and out is not None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

    def fields(self, t: float, state: FieldState):
        if not self.write_fields:
            return
        g = self.model.graph
        tag = _fmt_time(t)
        np.savetxt(self.out / f"pressure_t{tag}.txt", matrix_field(g, state.p / PSI), fmt="%.6f")
        np.savetxt(self.out / f"satgas_t{tag}.txt", matrix_field(g, state.sg), fmt="%.6f")
        np.savetxt(self.out / f"phasestatus_t{tag}.txt", matrix_field(g, state.status), fmt="%d")

    def flags(self, t: float, report: NewtonReport):
        if self.out is None:
            return
        g = self.model.graph
        for k, f in enumerate(report.flags):
            np.savetxt(self.out / f"flags_t{_fmt_time(t)}_iter{k + 1}.txt", matrix_field(g, f), fmt="%d")

    def tables(self, cfg: CaseConfig, metrics: RunMetrics):
        if self.out is None:
            return
        with open(self.out / "rates.csv", "w") as fh:
            fh.write("time_days,oil_rate,gas_rate,bhp\n")
            for s in metrics.steps:
                fh.write(f"{s.time_days:.6f},{s.oil_rate_bbl:.8e},{s.gas_rate_m3:.8e},{s.bhp_psi:.4f}\n")
        with open(self.out / "metrics.csv", "w") as fh:
            fh.write("step,time_days,dt_days,iterations,outer_iterations,sum_nA_over_n,cuts\n")
            for k, s in enumerate(metrics.steps, 1):
                fh.write(f"{k},{s.time_days:.6f},{s.dt_days:.6f},{s.iterations},{s.outer_iterations},"
                         f"{s.sum_na_over_n:.8f},{s.cuts}\n")
        with open(self.out / "summary.txt", "w") as fh:
            fh.write(summary_text(cfg, metrics))


def summary_text(cfg: CaseConfig, metrics: RunMetrics) -> str:
    lines = [
        f"case                         {cfg.name}",
        f"solver                       {metrics.solver}",
        f"cells                        {metrics.n_cells}",
        f"timesteps                    {metrics.timesteps}",
        f"total iterations             {metrics.total_iterations}",
        f"total ratio M_A              {metrics.total_ma:.4f}",
        f"average ratio M_A/iteration  {metrics.average_ma:.4f}",
    ]
    if metrics.solver == "adaptive_dd":
        lines.append(f"outer iterations             {metrics.total_outer_iterations}")
    lines.append(f"cumulative oil (bbl)         {metrics.cumulative_oil_bbl:.6f}")
    lines.append(f"timestep cuts                {sum(s.cuts for s in metrics.steps)}")
    return "\n".join(lines) + "\n"


def run_case(cfg: CaseConfig, out_dir=None, trace_flags: bool | None = None,
             trace_steps=None, record_supports: bool = False, keep_reports: bool = False,
             progress: bool = False) -> RunResult:
    """Run a case end to end.

    ``trace_steps`` limits flag-map tracing to the given 1-based step
    numbers.  Raises :class:`SolverFailure` when the timestep falls below
    the configured minimum.
    """
    t_start = time.perf_counter()
    cfg.validate()
    model, state = build_model(cfg)
    n = model.n_cells
    kind = cfg.solver.kind
    solver = SOLVERS[kind]
    trace = cfg.output.trace_flags if trace_flags is None else trace_flags
    out = Path(out_dir) if out_dir is not None else None
    writer = _Writer(out, model, cfg.output.write_fields)
    metrics = RunMetrics(kind, n)
    result = RunResult(cfg, metrics, state, model)
    result.initial_moles = result.moles_in_place()
    produced = np.zeros(model.nc)

    tc = cfg.time
    total = tc.total_days
    report_every = cfg.output.report_every_days
    next_report = report_every if report_every > 0 else math.inf
    t = 0.0
    dt = tc.dt0_days
    prev_support = None
    sync = state.p.copy() if cfg.solver.boundary_measure == "drift" and kind != "standard" else None
    step_no = 0
    writer.fields(0.0, state)
    result.report_times.append(0.0)
    result.report_pressure.append(state.p.copy())
    result.report_status.append(state.status.copy())

    while total - t > 1e-9 * total:
        dt = min(dt, tc.dt_max_days, total - t)
        step_no += 1
        do_trace = trace and (trace_steps is None or step_no in trace_steps)
        opts = solver_options(cfg, trace=do_trace, record_supports=record_supports)
        cuts = 0
        while True:
            trial = state.copy()
            try:
                if kind == "standard":
                    rep = solver(model, trial, state, dt * DAY, opts)
                else:
                    init = initial_active_set(model, cfg.solver.m, prev_support)
                    trial_sync = None if sync is None else sync.copy()
                    rep = solver(model, trial, state, dt * DAY, init, opts, sync=trial_sync)
                break
            except (ConvergenceFailure, LinearSolverError, NumericalError) as exc:
                cuts += 1
                dt *= 0.5
                logger.info("step %d: %s; cutting dt to %.4g days", step_no, exc, dt)
                if dt < tc.min_dt_days:
                    raise SolverFailure(f"timestep fell below {tc.min_dt_days} days at t={t:.4f} d") from exc

        dp = trial.p - state.p
        if cfg.solver.initial_set == "touched" and rep.touched is not None:
            prev_support = np.flatnonzero(rep.touched)
        else:
            prev_support = support_set(dp, opts.eps)
        state = trial
        if sync is not None:
            sync = trial_sync
        t += dt
        result.state = state

        q = well_molar_rates(model, state).sum(axis=0)
        produced += q * dt * DAY
        oil, gas = well_rates(model, state)
        total_ma, _ = compute_ma(rep, n)
        rec = StepRecord(time_days=t, dt_days=dt, iterations=rep.iterations,
                         outer_iterations=rep.outer_iterations, sum_na_over_n=total_ma, cuts=cuts,
                         oil_rate_m3=oil, oil_rate_bbl=oil / BBL, gas_rate_m3=gas,
                         bhp_psi=model.wells[0].bhp / PSI if model.wells else float("nan"),
                         n_subdomains=len(rep.subdomains))
        metrics.steps.append(rec)
        if keep_reports:
            result.reports.append(rep)
        if do_trace:
            writer.flags(t, rep)
        if progress:
            logger.info("step %3d t=%8.3f d dt=%7.3f it=%2d M_A=%.4f oil=%.5g bbl/d",
                        step_no, t, dt, rep.iterations, total_ma, oil / BBL)

        at_end = total - t <= 1e-9 * total
        if t >= next_report - 1e-9 or at_end:
            writer.fields(t, state)
            result.report_times.append(t)
            result.report_pressure.append(state.p.copy())
            result.report_status.append(state.status.copy())
            while next_report <= t + 1e-9:
                next_report += report_every
        dt = dt * tc.growth

    result.produced_moles = produced
    writer.tables(cfg, metrics)
    result.runtime = time.perf_counter() - t_start
    logger.info("%s/%s: %d steps, %d iterations, M_A %.3f, %.1f s", cfg.name, kind, metrics.timesteps,
                metrics.total_iterations, metrics.total_ma, result.runtime)
    return result
