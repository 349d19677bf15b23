"""MAP reconstruction with a learned (or analytic) energy prior.

The objective is

    f(x) = ||A x - b||^2 / (2 eta^2) + E(x) / sigma^2

with gradient ``A^H (A x - b) / eta^2 + H(x) / sigma^2``. Gradient descent
uses the step ``1 / (1/eta^2 + L/sigma^2)``; the majorize-minimize variant
minimises the quadratic upper bound built from ``L`` exactly, with
conjugate gradients. ``muse_solve`` anneals over a coarse-to-fine list of
(eta, sigma, model) stages.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import CONTRACTION_SLACK, layer_product
from .errors import SolverStalledError, StageDivergedError

TRACE_COLUMNS = ("iter", "f_map", "data_term", "prior_term", "grad_norm", "elapsed_ms")


@dataclass
class MapProblem:
    op: object
    b: np.ndarray
    eta2: float
    prior: object
    sigma2: float
    data_weight: float | None = None  # replaces 1/eta2; required when eta2 == 0

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.data_weight is None:
            if not self.eta2 > 0:
                raise ValueError("eta2 must be positive unless an explicit data_weight is given")
            self.data_weight = 1.0 / self.eta2
        elif not (np.isfinite(self.data_weight) and self.data_weight > 0):
            raise ValueError("data_weight must be finite and positive")
        if self.b.shape != (self.op.out_dim,):
            raise ValueError("measurement length does not match the operator")
        if getattr(self.prior, "dim", self.op.in_dim) != self.op.in_dim:
            raise ValueError("prior dimension does not match the operator input")


@dataclass
class SolveConfig:
    algorithm: str = "gd"
    L: float = 1.0
    step_override: float | None = None
    epsilon: float = 1e-5
    max_iter: int = 1000
    cg_tol: float = 1e-10
    cg_max_iter: int = 200
    max_backtracks: int = 20
    keep_iterates: bool = False

    def __post_init__(self):
        if self.algorithm not in ("gd", "mm", "pnp-ista", "auto"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not (self.epsilon > 0 and self.L > 0):
            raise ValueError("epsilon and L must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    x: np.ndarray | None = None
    reason: str = ""
    backtracks: int = 0
    algorithm: str = ""
    iterates: list = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    @property
    def iterations(self) -> int:
        return max(0, len(self.records) - 1)

    @property
    def f_values(self) -> np.ndarray:
        return np.array([r["f_map"] for r in self.records])

    def log(self, **rec):
        rec["elapsed_ms"] = 1e3 * (time.perf_counter() - self._t0)
        rec.setdefault("iter", len(self.records))
        self.records.append(rec)

    def to_csv(self, path, columns=TRACE_COLUMNS) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in self.records:
                w.writerow([r["iter"]] + [f"{r[c]:.9g}" for c in columns[1:]])


def read_trace_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def f_map_eval(p: MapProblem, x):
    """``(total, data_term, prior_term)`` of the MAP objective at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.op.in_dim,):
        raise ValueError(f"x must have length {p.op.in_dim}")
    r = p.op.apply(x) - p.b
    data = 0.5 * p.data_weight * float(r @ r)
    prior = float(p.prior.energy(x)) / p.sigma2
    return data + prior, data, prior


def grad_f_map(p: MapProblem, x, score=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if score is None:
        score = p.prior.score(x)
    return p.data_weight * p.op.adjoint(p.op.apply(x) - p.b) + score / p.sigma2


def default_step_size(eta2: float, sigma2: float, L: float) -> float:
    """``1 / (1/eta^2 + L/sigma^2)``: the step that guarantees descent."""
    if not (eta2 > 0 and sigma2 > 0 and L > 0):
        raise ValueError("eta2, sigma2 and L must be positive")
    return 1.0 / (1.0 / eta2 + L / sigma2)


def algorithm_select(p: MapProblem, L: float, threshold: float = 1.0) -> str:
    """MM when the data term dominates the prior curvature, else GD."""
    return "mm" if L / (p.data_weight * p.sigma2) < threshold else "gd"


def _converged(f_new, f_old, eps):
    return abs(f_new - f_old) <= abs(f_old) * eps


def _record(trace, p, x, parts, g):
    total, data, prior = parts
    trace.log(f_map=total, data_term=data, prior_term=prior, grad_norm=float(np.linalg.norm(g)))


def epnp_gd(p: MapProblem, cfg: SolveConfig, x0) -> RunTrace:
    """Gradient descent with the guaranteed step size.

    If a step ever increases the objective (possible when ``L`` is an
    empirical under-estimate) the step is halved and retried, at most
    ``cfg.max_backtracks`` times; the trace counts these retries.
    """
    gamma = cfg.step_override or default_step_size(1.0 / p.data_weight, p.sigma2, cfg.L)
    trace = RunTrace(algorithm="gd")
    x = np.array(x0, dtype=np.float64)
    parts = f_map_eval(p, x)
    g = grad_f_map(p, x)
    _record(trace, p, x, parts, g)
    if cfg.keep_iterates:
        trace.iterates.append(x.copy())
    for _ in range(cfg.max_iter):
        step = gamma
        for attempt in range(cfg.max_backtracks + 1):
            x_new = x - step * g
            new_parts = f_map_eval(p, x_new)
            if not np.isfinite(new_parts[0]) or new_parts[0] <= parts[0]:
                break
            trace.backtracks += 1
            step *= 0.5
        if not np.isfinite(new_parts[0]):
            trace.reason = "diverged"
            break
        if new_parts[0] > parts[0]:
            trace.reason = "no-descent"
            break
        f_old = parts[0]
        x, parts = x_new, new_parts
        g = grad_f_map(p, x)
        _record(trace, p, x, parts, g)
        if cfg.keep_iterates:
            trace.iterates.append(x.copy())
        if _converged(parts[0], f_old, cfg.epsilon):
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iter"
    trace.x = x
    return trace


def conjugate_gradient(apply, rhs, tol: float = 1e-10, max_iter: int = 200, x0=None):
    """Solve ``apply(x) = rhs`` for a symmetric positive-definite operator.

    Returns ``(x, relative_residual)``; raises ``SolverStalledError`` when
    the relative residual is still above ``tol`` after ``max_iter`` steps.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    norm_b = float(np.linalg.norm(rhs))
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.float64)
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0.0
    r = rhs - apply(x)
    d = r.copy()
    rs = float(r @ r)
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * norm_b:
            break
        q = apply(d)
        alpha = rs / float(d @ q)
        x += alpha * d
        r -= alpha * q
        rs_new = float(r @ r)
        d = r + (rs_new / rs) * d
        rs = rs_new
    # report the true residual, not the recursively updated one
    rel = float(np.linalg.norm(rhs - apply(x))) / norm_b
    if rel > tol:
        raise SolverStalledError(f"CG relative residual {rel:.3g} > {tol:.3g} after {max_iter} iterations")
    return x, rel


def mm_system(p: MapProblem, L: float):
    """The SPD operator ``A^H A / eta^2 + (L / sigma^2) I``."""
    c = L / p.sigma2
    return lambda v: p.data_weight * p.op.normal(v) + c * v


def mm_update(p: MapProblem, cfg: SolveConfig, x_n, L: float | None = None, score=None):
    """Minimiser of the quadratic surrogate around ``x_n`` (via CG)."""
    L = cfg.L if L is None else L
    if not L > 0:
        raise ValueError("L must be positive")
    x_n = np.asarray(x_n, dtype=np.float64)
    if score is None:
        score = p.prior.score(x_n)
    rhs = p.data_weight * p.op.adjoint(p.b) + (L * x_n - score) / p.sigma2
    x, _ = conjugate_gradient(mm_system(p, L), rhs, cfg.cg_tol, cfg.cg_max_iter)
    return x


def surrogate_eval(p: MapProblem, L: float, x, x_n, energy_n=None, score_n=None) -> float:
    """Quadratic majorizer ``g(x | x_n)`` of the MAP objective."""
    x = np.asarray(x, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64)
    if energy_n is None:
        energy_n = float(p.prior.energy(x_n))
    if score_n is None:
        score_n = p.prior.score(x_n)
    r = p.op.apply(x) - p.b
    dx = x - x_n
    return (
        0.5 * p.data_weight * float(r @ r)
        + energy_n / p.sigma2
        + L / (2.0 * p.sigma2) * float(dx @ dx)
        + float(score_n @ dx) / p.sigma2
    )


def epnp_mm(p: MapProblem, cfg: SolveConfig, x0) -> RunTrace:
    """Majorize-minimize iterations.

    Each accepted iterate satisfies ``f(x+) <= g(x+ | x) <= f(x)``. If the
    surrogate fails to majorize at the new point (``L`` too small), ``L`` is
    doubled for that iteration and the update recomputed.
    """
    trace = RunTrace(algorithm="mm")
    x = np.array(x0, dtype=np.float64)
    parts = f_map_eval(p, x)
    h = p.prior.score(x)
    _record(trace, p, x, parts, grad_f_map(p, x, h))
    trace.records[-1]["L"] = cfg.L
    if cfg.keep_iterates:
        trace.iterates.append(x.copy())
    for _ in range(cfg.max_iter):
        L = cfg.L
        energy_n = parts[2] * p.sigma2
        for attempt in range(cfg.max_backtracks + 1):
            x_new = mm_update(p, cfg, x, L, score=h)
            new_parts = f_map_eval(p, x_new)
            g_new = surrogate_eval(p, L, x_new, x, energy_n, h)
            slack = 1e-12 * max(1.0, abs(parts[0]))
            if not np.isfinite(new_parts[0]) or new_parts[0] <= g_new + slack:
                break
            trace.backtracks += 1
            L *= 2.0
        if not np.isfinite(new_parts[0]):
            trace.reason = "diverged"
            break
        if new_parts[0] > g_new + slack:
            trace.reason = "no-descent"
            break
        f_old = parts[0]
        x, parts = x_new, new_parts
        h = p.prior.score(x)
        _record(trace, p, x, parts, grad_f_map(p, x, h))
        trace.records[-1]["L"] = L
        trace.records[-1]["surrogate"] = g_new
        if cfg.keep_iterates:
            trace.iterates.append(x.copy())
        if _converged(parts[0], f_old, cfg.epsilon):
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iter"
    trace.x = x
    return trace


def solve(p: MapProblem, cfg: SolveConfig, x0) -> RunTrace:
    algorithm = cfg.algorithm
    if algorithm == "auto":
        algorithm = algorithm_select(p, cfg.L)
    if algorithm == "gd":
        return epnp_gd(p, cfg, x0)
    if algorithm == "mm":
        return epnp_mm(p, cfg, x0)
    raise ValueError(f"solve() handles gd/mm/auto, not {algorithm!r}")


@dataclass
class Stage:
    eta: float
    sigma: float
    epsilon: float
    model: object


@dataclass
class MuseSchedule:
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        sig = [s.sigma for s in self.stages]
        if any(a <= b for a, b in zip(sig, sig[1:])):
            raise ValueError(f"stage sigmas must be strictly decreasing, got {sig}")

    @classmethod
    def from_sigmas(cls, sigmas, epsilons, models, eta=None) -> "MuseSchedule":
        """Stages with ``eta_i = sigma_i``; a known smaller measurement ``eta``
        replaces the last stage's value."""
        sigmas, epsilons, models = list(sigmas), list(epsilons), list(models)
        if not len(sigmas) == len(epsilons) == len(models):
            raise ValueError("sigmas, epsilons and models must have equal length")
        stages = [Stage(s, s, e, m) for s, e, m in zip(sigmas, epsilons, models)]
        if eta is not None and eta < stages[-1].eta:
            stages[-1] = replace(stages[-1], eta=eta)
        return cls(stages)


def muse_solve(schedule: MuseSchedule, op, b, configs, x0=None):
    """Coarse-to-fine annealed MAP solve.

    ``configs`` is one SolveConfig per stage (or a single one reused); the
    stage epsilon overrides the config's. Each stage is warm-started from
    the previous solution. Returns ``(x_final, traces)``.
    """
    stages = schedule.stages
    if isinstance(configs, SolveConfig):
        configs = [configs] * len(stages)
    if len(configs) != len(stages):
        raise ValueError("need one SolveConfig per stage")
    x = op.adjoint(np.asarray(b, dtype=np.float64)) if x0 is None else np.array(x0, dtype=np.float64)
    traces = []
    for i, (stage, cfg) in enumerate(zip(stages, configs)):
        p = MapProblem(op, b, stage.eta**2, stage.model, stage.sigma**2)
        trace = solve(p, replace(cfg, epsilon=stage.epsilon), x)
        traces.append(trace)
        if trace.reason == "diverged" or not np.all(np.isfinite(trace.x)):
            raise StageDivergedError(i)
        x = trace.x
    return x, traces


def pnp_ista(op, b, eta2: float, denoiser, iters: int = 500, x0=None, gamma=None, tol=None) -> RunTrace:
    """Plug-and-play ISTA with the residual denoiser ``D(x) = x - F(x)``.

    ``x+ = D(x - gamma A^H (A x - b) / eta^2)`` with ``gamma = eta^2`` by
    default. Only contractive (score-C) networks are accepted. The trace
    holds data residuals and fixed-point residuals; there is no energy.
    """
    if getattr(denoiser, "variant", None) != "score-C":
        raise ValueError("PnP-ISTA requires a spectrally normalised score-C denoiser")
    if layer_product(denoiser.net) > 1 + CONTRACTION_SLACK:
        raise ValueError("denoiser layers are not normalised to spectral norm <= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    b = np.asarray(b, dtype=np.float64)
    gamma = eta2 if gamma is None else gamma
    x = op.adjoint(b) if x0 is None else np.array(x0, dtype=np.float64)
    trace = RunTrace(algorithm="pnp-ista")
    trace.log(data_residual=float(np.linalg.norm(op.apply(x) - b)), fixed_point_residual=float("nan"))
    trace.reason = "max_iter"
    for _ in range(iters):
        z = x - gamma * op.adjoint(op.apply(x) - b) / eta2
        x_new = z - denoiser.score(z)
        step = float(np.linalg.norm(x_new - x))
        x = x_new
        trace.log(data_residual=float(np.linalg.norm(op.apply(x) - b)), fixed_point_residual=step)
        if not np.all(np.isfinite(x)):
            trace.reason = "diverged"
            break
        if tol is not None and step <= tol * (1.0 + np.linalg.norm(x)):
            trace.reason = "converged"
            break
    trace.x = x
    return trace


PNP_COLUMNS = ("iter", "data_residual", "fixed_point_residual", "elapsed_ms")
