"""
Experiment orchestration for mccpde.

Runs the stages an ExperimentConfig enables (pointwise relaxations, the
averaged sweep over coarse levels, bound tightening, certificates, upper
bounds and the enumeration oracle) and writes the result tables.
"""

import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from mccpde.certificates import (
    Constants,
    constants_for,
    embedding_bounds,
    validated_lower_bound,
)
from mccpde.errors import ConfigError, McCormickError, NonpositiveLower
from mccpde.fem1d import PdeProblem, monotone_envelope, objective_and_gradient, source_l2_norm
from mccpde.grid import CellFunction, NodalFunction, Partition, project_avg, prolong, tv
from mccpde.instances import build_problem, get_instance
from mccpde.models import (
    ExperimentConfig,
    Mode,
    ObbtSettings,
    OracleSettings,
    RelaxationKind,
)
from mccpde.obbt import ObbtOutcome, lower_bound_after_obbt, tighten, write_trace_csv
from mccpde.oracle import (
    EnumerationSpec,
    check_bound_chain,
    enumerate_optimum,
    random_toy_instance,
    write_table_csv,
)
from mccpde.relaxation import (
    Envelope,
    LowerBound,
    RelaxationSpec,
    embed_check,
    lower_bound_solve,
)
from mccpde.report import (
    Series,
    line_chart_svg,
    nodal_curve,
    step_band,
    step_curve,
    write_csv,
    write_json,
    write_svg,
)
from mccpde.upper_bounds import PrimalResult, solve_continuous, solve_integer
from mccpde.utils import format_mesh_size, table_gap

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-9

TABLE_RELAXATIONS = ["relaxation", "bounds", "alpha", "m"]
TABLE_LEVELS = ["n_cells", "h", "m_no_obbt", "m_obbt", "sweeps", "lp_iters"]
TABLE_VALIDATED = [
    "n_cells", "h", "m_no_obbt", "m_obbt",
    "lb_no_obbt_conservative", "lb_no_obbt_tight", "lb_obbt_conservative", "lb_obbt_tight",
    "extrapolated",
]
TABLE_UPPER = ["method", "objective", "smoothed", "iters", "label"]
TABLE_ORACLE = ["seed", "alpha", "obj_star", "m_before", "m_obbt", "c_quad", "validated", "passed"]


class CheckResult(BaseModel):
    """One PASS/FAIL line."""

    name: str
    passed: bool
    detail: str = ""


class LevelResult(BaseModel):
    """Averaged relaxation on one coarse level."""

    n_cells: int
    h: float
    computed: bool
    m_no_obbt: Optional[float] = None
    m_obbt: Optional[float] = None
    sweeps: int = 0
    lp_iters: int = 0


class ValidatedRow(BaseModel):
    """Validated lower bounds on one level."""

    n_cells: int
    h: float
    m_no_obbt: Optional[float]
    m_obbt: Optional[float]
    lb_no_obbt_conservative: Optional[float]
    lb_no_obbt_tight: Optional[float]
    lb_obbt_conservative: Optional[float]
    lb_obbt_tight: Optional[float]
    extrapolated: bool


class ExperimentSummary(BaseModel):
    """Everything a run emitted, plus consistency checks."""

    name: str
    lower_bounds: dict[str, float] = Field(default_factory=dict)
    upper_bounds: dict[str, float] = Field(default_factory=dict)
    gaps: dict[str, float] = Field(default_factory=dict)
    validated: list[ValidatedRow] = Field(default_factory=list)
    levels: list[LevelResult] = Field(default_factory=list)
    checks: list[CheckResult] = Field(default_factory=list)
    files: list[str] = Field(default_factory=list)
    timings: dict[str, float] = Field(default_factory=dict)
    reference: dict[str, float] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read and validate a TOML experiment configuration.

    Raises:
        ConfigError: If the file is missing, not valid TOML or fails validation
    """
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}", code="CONFIG_NOT_FOUND") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config {path} is not valid TOML: {e}") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e


def conservative_bound(config: ExperimentConfig, prob: PdeProblem) -> float:
    """Configured |u| bound, or the a-priori L-infinity bound of the averaged states."""
    if config.u_bound is not None:
        return config.u_bound
    return embedding_bounds(config.w_lo, config.w_hi, source_l2_norm(prob), "c2").linf


def _nodal_series(label: str, u: NodalFunction, dashed: bool = False) -> Series:
    x, y = nodal_curve(u)
    return Series(label=label, x=x, y=y, dashed=dashed)


def computed_levels(config: ExperimentConfig, long_running: bool) -> list[int]:
    """Coarse levels that are actually solved."""
    return [n for n in config.coarse_levels if long_running or n < config.long_running_level]


class _Run:
    """State shared by the stages of one experiment."""

    def __init__(self, config: ExperimentConfig, output_dir: Path, long_running: bool):
        self.config = config
        self.out = output_dir
        self.long_running = long_running
        self.summary = ExperimentSummary(name=config.name)
        self.prob, self.u_d = build_problem(config)
        self.u_bound = conservative_bound(config, self.prob)
        self.tightest_solution: Optional[LowerBound] = None
        self.obbt_outcomes: dict[int, ObbtOutcome] = {}
        self.continuous: Optional[PrimalResult] = None
        self.integer: Optional[PrimalResult] = None
        self.valid_lower: dict[str, float] = {}

    def path(self, suffix: str) -> Path:
        p = self.out / f"{self.config.name}_{suffix}"
        self.summary.files.append(str(p))
        return p

    def timed(self, stage: str, fn: Callable[[], None]) -> None:
        started = time.perf_counter()
        logger.info("Stage %s", stage)
        fn()
        self.summary.timings[stage] = time.perf_counter() - started

    def spec(
        self, kind: RelaxationKind, env: Envelope, alpha: Optional[float] = None
    ) -> RelaxationSpec:
        return RelaxationSpec(
            kind=kind,
            prob=self.prob,
            env=env,
            alpha=self.config.alpha if alpha is None else alpha,
            u_d=self.u_d,
        )

    def add_lower(self, key: str, value: float, valid: bool = True) -> None:
        self.summary.lower_bounds[key] = value
        if valid:
            self.valid_lower[key] = value

    # -- stages -----------------------------------------------------------

    def pointwise(self) -> None:
        fem, cfg = self.prob.fem_grid, self.config
        conservative = Envelope.uniform(fem, self.u_bound, self.prob.w_bounds)
        tightest = Envelope.tightest(self.prob, fem)
        runs = [
            ("mcc_conservative", "conservative", conservative, cfg.alpha),
            ("mcc_alpha0", "conservative", conservative, 0.0),
            ("mcc_tightest", "tightest", tightest, cfg.alpha),
        ]
        rows = []
        for key, bounds, env, alpha in runs:
            result = lower_bound_solve(self.spec(RelaxationKind.POINTWISE, env, alpha), cfg.solver)
            self.add_lower(key, result.m)
            rows.append(["mcc", bounds, alpha, result.m])
            if key == "mcc_tightest":
                self.tightest_solution = result
        write_csv(self.path("relaxations.csv"), TABLE_RELAXATIONS, rows)

    def levels(self) -> None:
        cfg = self.config
        solve_set = computed_levels(cfg, self.long_running)
        for n in cfg.coarse_levels:
            coarse = Partition(n_cells=n)
            level = LevelResult(n_cells=n, h=coarse.h, computed=n in solve_set)
            if level.computed:
                env = Envelope.uniform(coarse, self.u_bound, self.prob.w_bounds)
                spec = self.spec(RelaxationKind.FULLY_AVERAGED, env)
                if Mode.OBBT in cfg.modes:
                    outcome = lower_bound_after_obbt(spec, cfg.obbt, cfg.solver)
                    self.obbt_outcomes[n] = outcome
                    write_trace_csv(outcome.trace, self.path(f"obbt_{n}.csv"))
                    level.m_no_obbt, level.m_obbt = outcome.m_before, outcome.m
                    level.sweeps = len(outcome.trace.sweeps)
                    level.lp_iters = outcome.trace.total_iters
                    self.add_lower(f"mcchh_obbt_{n}", outcome.m, valid=False)
                else:
                    level.m_no_obbt = lower_bound_solve(spec, cfg.solver).m
                self.add_lower(f"mcchh_{n}", level.m_no_obbt, valid=False)
            else:
                logger.info("Skipping level %d; enable long_running to solve it", n)
            self.summary.levels.append(level)
        rows = [
            [lv.n_cells, lv.h, lv.m_no_obbt, lv.m_obbt, lv.sweeps, lv.lp_iters]
            for lv in self.summary.levels
        ]
        write_csv(self.path("levels.csv"), TABLE_LEVELS, rows)

    def upper(self) -> None:
        cfg = self.config
        n = cfg.ub_cells or max(cfg.coarse_levels)
        prob, _ = build_problem(cfg, control_cells=n)
        rows = []
        self.continuous = solve_continuous(
            prob, self.u_d, cfg.alpha, method=cfg.ub_method, start=cfg.ub_start
        )
        if Mode.UB_CONTINUOUS in cfg.modes:
            self.summary.upper_bounds["ub_continuous"] = self.continuous.obj_nonsmooth
            rows.append(self._upper_row(self.continuous, "upper bound"))
        if Mode.UB_INTEGER in cfg.modes:
            self.integer = solve_integer(prob, self.u_d, cfg.alpha, continuous=self.continuous)
            self.summary.upper_bounds["ub_integer"] = self.integer.obj_nonsmooth
            rows.append(self._upper_row(self.integer, "heuristic UB"))
        write_csv(self.path("upper_bounds.csv"), TABLE_UPPER, rows)

    @staticmethod
    def _upper_row(result: PrimalResult, label: str) -> list:
        return [result.method, result.obj_nonsmooth, result.obj_smoothed, result.iters, label]

    def _feasible_control(self) -> tuple[CellFunction, Optional[float]]:
        """Integer-valued control and its objective, if known."""
        if self.integer is not None:
            return self.integer.w, self.integer.obj_nonsmooth
        cfg = self.config
        start = cfg.ub_start if cfg.ub_start is not None else 0.5 * (cfg.w_lo + cfg.w_hi)
        value = float(np.clip(np.rint(start), np.ceil(cfg.w_lo), np.floor(cfg.w_hi)))
        w = CellFunction.constant(self.prob.control_grid, value)
        return w, cfg.primal_value

    def certificates(self) -> None:
        cfg, prob, fem = self.config, self.prob, self.prob.fem_grid
        w_hat, primal = self._feasible_control()
        if cfg.primal_value is not None:
            primal = cfg.primal_value if primal is None else min(primal, cfg.primal_value)
        j0 = cfg.j0_tight
        if j0 is None:
            j0 = self.summary.lower_bounds.get("mcc_alpha0", 0.0)
        conservative = constants_for(
            prob, w_hat, self.u_d, cfg.alpha,
            Envelope.uniform(fem, self.u_bound, prob.w_bounds), 0.0, primal,
        )
        tight = constants_for(
            prob, w_hat, self.u_d, cfg.alpha, Envelope.tightest(prob, fem), max(j0, 0.0), primal
        )
        write_json(
            self.path("constants.json"),
            {"conservative": conservative.model_dump(), "tight": tight.model_dump()},
        )
        self._validated(conservative, tight)

    def _validated(self, conservative: Constants, tight: Constants) -> None:
        computed = [lv for lv in self.summary.levels if lv.computed]
        finest = computed[-1] if computed else None
        rows = []
        for lv in self.summary.levels:
            source = lv if lv.computed else finest
            extrapolated = not lv.computed
            m_no = source.m_no_obbt if source else None
            m_yes = source.m_obbt if source else None

            def lb(m: Optional[float], constants: Constants) -> Optional[float]:
                if m is None:
                    return None
                return validated_lower_bound(m, constants.c_quad, lv.h).value

            row = ValidatedRow(
                n_cells=lv.n_cells,
                h=lv.h,
                m_no_obbt=m_no,
                m_obbt=m_yes,
                lb_no_obbt_conservative=lb(m_no, conservative),
                lb_no_obbt_tight=lb(m_no, tight),
                lb_obbt_conservative=lb(m_yes, conservative),
                lb_obbt_tight=lb(m_yes, tight),
                extrapolated=extrapolated,
            )
            rows.append(row)
            for key in ("lb_no_obbt_conservative", "lb_no_obbt_tight", "lb_obbt_conservative",
                        "lb_obbt_tight"):
                value = getattr(row, key)
                if value is not None:
                    self.add_lower(f"{key}_{lv.n_cells}", value, valid=not extrapolated)
        self.summary.validated = rows
        write_csv(
            self.path("validated.csv"),
            TABLE_VALIDATED,
            [[getattr(r, k) for k in TABLE_VALIDATED] for r in rows],
        )

    def oracle(self) -> None:
        cfg = self.config
        settings: OracleSettings = cfg.oracle
        spec = EnumerationSpec.from_settings(settings)
        rows, passed = [], True
        for k in range(settings.n_instances):
            inst = random_toy_instance(settings.seed + k, settings)
            enumeration = enumerate_optimum(spec, inst.prob, inst.u_d, inst.alpha)
            if k == 0:
                write_table_csv(enumeration, self.path("oracle_table.csv"))
            check = check_bound_chain(inst, spec, cfg.obbt, cfg.solver, enumeration)
            passed = passed and check.passed
            rows.append([
                inst.seed, inst.alpha, check.obj_star, check.m_before, check.m_obbt,
                check.c_quad, check.validated, check.passed,
            ])
        write_csv(self.path("oracle.csv"), TABLE_ORACLE, rows)
        self.summary.checks.append(
            CheckResult(
                name="bound validity (oracle)",
                passed=passed,
                detail=f"{sum(r[-1] for r in rows)}/{len(rows)} instances",
            )
        )

    def figures(self) -> None:
        u_min, u_max = monotone_envelope(self.prob)
        lines = [
            _nodal_series("u_d", self.u_d, dashed=True),
            _nodal_series("u_min", u_min),
            _nodal_series("u_max", u_max),
        ]
        if self.tightest_solution is not None:
            lines.append(_nodal_series("relaxation u", self.tightest_solution.solution.u))
        if self.obbt_outcomes:
            n = max(self.obbt_outcomes)
            outcome = self.obbt_outcomes[n]
            coarse = outcome.env.coarse
            initial = Envelope.uniform(coarse, self.u_bound, self.prob.w_bounds)
            bands = [
                step_band("initial bounds", initial.u_lo, initial.u_hi, color="#dde6f3"),
                step_band("tightened bounds", outcome.env.u_lo, outcome.env.u_hi),
            ]
            svg = line_chart_svg(f"State bounds on {format_mesh_size(n)} cells", lines, bands)
            write_svg(self.path(f"envelope_{n}.svg"), svg)
        else:
            write_svg(self.path("states.svg"), line_chart_svg("States", lines))

        controls = []
        for label, result in (("continuous UB", self.continuous), ("integer UB", self.integer)):
            if result is not None:
                x, y = step_curve(result.w)
                controls.append(Series(label=label, x=x, y=y))
        if self.tightest_solution is not None:
            x, y = step_curve(self.tightest_solution.solution.w)
            controls.append(Series(label="relaxation w", x=x, y=y, dashed=True))
        if controls:
            write_svg(self.path("controls.svg"), line_chart_svg("Controls", controls))

    def finish(self) -> None:
        s = self.summary
        ub, lb = s.upper_bounds, s.lower_bounds
        for ub_key, tag in (("ub_continuous", "nlp"), ("ub_integer", "minlp")):
            for lb_key in ("mcc_tightest", "mcc_conservative"):
                if ub_key in ub and lb_key in lb:
                    try:
                        s.gaps[f"{tag}_vs_{lb_key}"] = table_gap(ub[ub_key], lb[lb_key])
                    except NonpositiveLower:
                        logger.warning("No relative gap against nonpositive %s", lb_key)
        if ub and self.valid_lower:
            best_lower = max(self.valid_lower.values())
            best_upper = min(ub.values())
            s.checks.append(
                CheckResult(
                    name="lower bounds <= upper bounds",
                    passed=best_lower <= best_upper + BOUND_SLACK,
                    detail=f"max lower {best_lower:.6e}, min upper {best_upper:.6e}",
                )
            )
        for n, outcome in sorted(self.obbt_outcomes.items()):
            objectives = outcome.trace.objectives
            monotone = all(b >= a - BOUND_SLACK for a, b in zip(objectives, objectives[1:]))
            s.checks.append(
                CheckResult(name=f"OBBT monotone trace ({n} cells)", passed=monotone)
            )
        if self.config.reference:
            instance = get_instance(self.config.reference)
            if instance is not None:
                s.reference = dict(instance.reference)
        write_json(self.path("summary.json"), s)


def run_experiment(
    config: ExperimentConfig,
    output_dir: Union[str, Path],
    long_running: Optional[bool] = None,
) -> ExperimentSummary:
    """
    Run every stage enabled in ``config`` and write its outputs.

    Args:
        config: Validated experiment configuration
        output_dir: Directory for CSV, JSON and SVG files (created if missing)
        long_running: Override for ``config.long_running``

    Returns:
        ExperimentSummary with all emitted bounds and checks

    Raises:
        McCormickError: On numerical failures of any stage
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    long_running = config.long_running if long_running is None else long_running
    run = _Run(config, out, long_running)
    modes = config.modes

    # Pointwise relaxations on the FEM grid
    if Mode.MCC in modes:
        run.timed("mcc", run.pointwise)

    # Averaged relaxations per coarse level, with or without tightening
    if modes & {Mode.MCCH_SWEEP, Mode.OBBT}:
        run.timed("levels", run.levels)

    # Feasible controls
    if modes & {Mode.UB_CONTINUOUS, Mode.UB_INTEGER}:
        run.timed("upper_bounds", run.upper)

    # Constants and validated bounds
    if Mode.CERTIFICATES in modes:
        run.timed("certificates", run.certificates)

    # Brute-force ground truth
    if Mode.ORACLE in modes:
        run.timed("oracle", run.oracle)

    if modes - {Mode.ORACLE}:
        run.figures()
    run.finish()
    return run.summary


# ----------------------------------------------------------------------------
# Invariant suite
# ----------------------------------------------------------------------------


def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    try:
        passed, detail = fn()
    except McCormickError as e:
        return CheckResult(name=name, passed=False, detail=f"{e.code}: {e.message}")
    return CheckResult(name=name, passed=passed, detail=detail)


def run_invariant_suite(fem_n: int = 64, seed: int = 0) -> list[CheckResult]:
    """
    Fast property checks of the discretization, the relaxation and tightening.

    Args:
        fem_n: FEM cells; must be divisible by 8
        seed: Random seed for the sampled functions

    Returns:
        One CheckResult per property
    """
    if fem_n % 8:
        raise ConfigError(f"fem_n={fem_n} must be divisible by 8")
    rng = np.random.default_rng(seed)
    fem = Partition(n_cells=fem_n)
    coarse = Partition(n_cells=8)
    f_fine = CellFunction(partition=fem, values=rng.normal(size=fem_n))
    w_coarse = CellFunction(partition=coarse, values=rng.uniform(-4.0, 4.0, size=8))
    prob = PdeProblem(f=6.0, w_bounds=(-4.0, 4.0), fem_grid=fem, control_grid=coarse)
    u_d = NodalFunction.interpolate(fem, lambda x: np.sin(np.pi * x))
    alpha = 1e-3

    def projection() -> tuple[bool, str]:
        ratio = project_avg(f_fine, coarse).l2_norm() / f_fine.l2_norm()
        return ratio <= 1.0 + 1e-14, f"||P_h f|| / ||f|| = {ratio:.6f}"

    def tv_contraction() -> tuple[bool, str]:
        before, after = tv(f_fine), tv(project_avg(f_fine, coarse))
        return after <= before + 1e-12, f"TV {after:.4f} <= {before:.4f}"

    def orthogonality() -> tuple[bool, str]:
        phi = NodalFunction(partition=fem, values=rng.normal(size=fem_n + 1))
        psi = project_avg(f_fine, coarse)
        theta = project_avg(lambda x: np.exp(x) * np.cos(3.0 * x), coarse)
        weight = prolong(psi.with_values(psi.values * theta.values), fem)
        # exact: phi is linear on each FEM cell
        residual = phi.cell_averages() - prolong(project_avg(phi, coarse), fem).values
        value = abs(float(fem.h * residual @ weight.values))
        return value <= 1e-12, f"|((phi - P_h phi) P_h psi, P_h theta)| = {value:.2e}"

    def embedding() -> tuple[bool, str]:
        bound = embedding_bounds(-4.0, 4.0, 6.0).linf
        worst = 0.0
        for kind in (RelaxationKind.AVERAGED, RelaxationKind.FULLY_AVERAGED):
            env = Envelope.uniform(coarse, bound, prob.w_bounds)
            spec = RelaxationSpec(kind=kind, prob=prob, env=env, alpha=alpha, u_d=u_d)
            worst = max(worst, embed_check(spec, w_coarse))
        return worst <= 1e-10, f"max violation {worst:.2e}"

    def tightening() -> tuple[bool, str]:
        small = PdeProblem(
            f=6.0, w_bounds=(-4.0, 4.0), fem_grid=Partition(n_cells=32),
            control_grid=Partition(n_cells=4),
        )
        target = NodalFunction.interpolate(small.fem_grid, lambda x: np.sin(np.pi * x))
        env = Envelope.uniform(
            small.control_grid, embedding_bounds(-4.0, 4.0, 6.0).linf, small.w_bounds
        )
        spec = RelaxationSpec(
            kind=RelaxationKind.FULLY_AVERAGED, prob=small, env=env, alpha=alpha, u_d=target
        )
        result = tighten(spec, ObbtSettings(max_sweeps=5))
        objectives = result.trace.objectives
        monotone = all(b >= a - BOUND_SLACK for a, b in zip(objectives, objectives[1:]))
        ordered = bool(np.all(result.env.u_lo.values <= result.env.u_hi.values))
        return monotone and ordered, f"{len(result.trace.sweeps)} sweeps, m = {objectives[-1]:.6e}"

    def gradient() -> tuple[bool, str]:
        direction = rng.normal(size=8)
        worst = 0.0
        for pointwise in (False, True):
            _, grad, _ = objective_and_gradient(prob, w_coarse, u_d, alpha, pointwise=pointwise)
            eps = 1e-6
            plus = objective_and_gradient(
                prob, w_coarse.with_values(w_coarse.values + eps * direction), u_d, alpha,
                pointwise=pointwise,
            )[0]
            minus = objective_and_gradient(
                prob, w_coarse.with_values(w_coarse.values - eps * direction), u_d, alpha,
                pointwise=pointwise,
            )[0]
            fd = (plus - minus) / (2 * eps)
            exact = float(grad @ direction)
            worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
        return worst <= 1e-6, f"max relative error {worst:.2e}"

    checks = [
        _check("projection nonexpansive", projection),
        _check("TV nonexpansive under averaging", tv_contraction),
        _check("averaging orthogonality", orthogonality),
        _check("embedded points feasible", embedding),
        _check("OBBT monotone, bounds ordered", tightening),
        _check("adjoint gradient vs finite differences", gradient),
    ]
    for c in checks:
        logger.info("%s: %s %s", c.name, "PASS" if c.passed else "FAIL", c.detail)
    return checks
