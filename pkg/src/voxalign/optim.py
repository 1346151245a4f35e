"""Regular-step gradient descent and a bounded L-BFGS wrapper.

Objectives are callables ``f(x) -> (value, gradient)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import LineSearchFailure, NonFiniteObjective

log = logging.getLogger(__name__)

STEP_TOLERANCE = "step_tolerance"
MAX_ITERATIONS = "max_iterations"
GRADIENT_TOLERANCE = "gradient_tolerance"
BOUND_ACTIVE = "bound_active"


@dataclass
class IterationRecord:
    iteration: int
    value: float
    step: float
    gradient_norm: float


@dataclass
class OptimizerTrace:
    records: list = field(default_factory=list)
    stop_reason: str = None
    evaluations: int = 0
    best_value: float = None

    @property
    def iterations(self):
        return len(self.records)

    @property
    def values(self):
        return [r.value for r in self.records]

    def log_lines(self):
        """``iteration value step`` lines for log scraping."""
        return [f"{r.iteration} {r.value!r} {r.step!r}" for r in self.records]

    def to_dict(self):
        return {
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "best_value": self.best_value,
            "values": self.values,
        }


@dataclass
class RSGDOptions:
    initial_step: float = 2.0
    min_step: float = 1e-3
    relaxation: float = 0.5
    max_iterations: int = 200
    gradient_tolerance: float = 1e-12


def _check(value, grad):
    if np.isnan(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjective(f"objective returned value={value}, finite gradient={np.all(np.isfinite(grad))}")


def rsgd_minimize(objective, x0, scales=None, options=None):
    """Regular-step gradient descent.

    Descent runs in the scaled space ``q = x * scales``: the direction is the
    normalized gradient with respect to ``q`` and ``step`` is the length of
    the move in that space.  The step length shrinks by ``relaxation``
    whenever the direction reverses (negative dot product with the previous
    one).  Every finite trial point is taken, so the path may climb briefly
    while it settles; the best point visited is returned, which keeps the
    final value at or below the initial one.  An objective value of ``+inf``
    marks an infeasible trial point: it is not taken and the step relaxes.

    Returns
    -------
    x : ndarray
        Best point visited.
    trace : OptimizerTrace
        One record per step taken (value at the new point).
    """
    opts = options or RSGDOptions()
    x = np.array(x0, dtype=float)
    scales = np.ones_like(x) if scales is None else np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise ValueError("parameter scales must be positive")
    trace = OptimizerTrace()
    value, grad = objective(x)
    trace.evaluations += 1
    if not np.isfinite(value):
        raise NonFiniteObjective(f"initial objective value is {value}")
    _check(value, grad)
    best_x, best_value = x.copy(), value
    step = float(opts.initial_step)
    prev_dir = None
    while True:
        if len(trace.records) >= opts.max_iterations:
            trace.stop_reason = MAX_ITERATIONS
            break
        scaled = grad / scales
        norm = float(np.linalg.norm(scaled))
        if norm <= opts.gradient_tolerance:
            trace.stop_reason = GRADIENT_TOLERANCE
            break
        direction = scaled / norm
        if prev_dir is not None and np.dot(direction, prev_dir) < 0:
            step *= opts.relaxation
        if step < opts.min_step:
            trace.stop_reason = STEP_TOLERANCE
            break
        trial = x - step * direction / scales
        t_value, t_grad = objective(trial)
        trace.evaluations += 1
        if np.isnan(t_value):
            raise NonFiniteObjective("objective returned NaN")
        if not np.isfinite(t_value):
            step *= opts.relaxation
            continue
        _check(t_value, t_grad)
        x, value, grad = trial, t_value, t_grad
        prev_dir = direction
        if value < best_value:
            best_x, best_value = x.copy(), value
        trace.records.append(IterationRecord(len(trace.records) + 1, float(value), step, norm))
        log.debug("rsgd %d value=%.10g step=%.4g", len(trace.records), value, step)
    trace.best_value = float(best_value)
    return best_x, trace


@dataclass
class LBFGSBOptions:
    memory: int = 10
    max_iterations: int = 100
    gradient_tolerance: float = 1e-9
    relative_tolerance: float = 1e-10
    max_evaluations: int = None


def lbfgsb_minimize(objective, x0, bounds=None, options=None):
    """Bound-constrained limited-memory BFGS (scipy's L-BFGS-B).

    ``bounds`` is a sequence of ``(lo, hi)`` pairs or an ``(n, 2)`` array;
    infinite limits are allowed.  Iterates are projected onto the box, so
    every reported point is feasible.
    """
    opts = options or LBFGSBOptions()
    x0 = np.array(x0, dtype=float)
    n = x0.size
    if bounds is None:
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
    else:
        b = np.asarray(bounds, dtype=float).reshape(n, 2)
        lo, hi = b[:, 0], b[:, 1]
    x0 = np.clip(x0, lo, hi)
    trace = OptimizerTrace()
    if np.all(lo == hi):
        trace.stop_reason = BOUND_ACTIVE
        return x0, trace

    last = {}

    def fun(x):
        x = np.clip(x, lo, hi)
        value, grad = objective(x)
        trace.evaluations += 1
        if not np.isfinite(value):
            raise NonFiniteObjective(f"objective returned {value}")
        _check(value, grad)
        last["x"], last["grad"] = x, grad
        return value, grad

    prev = {"x": x0}

    def callback(intermediate_result):
        xk = np.clip(intermediate_result.x, lo, hi)
        grad = last["grad"] if np.array_equal(last["x"], xk) else np.zeros_like(xk)
        proj = np.clip(xk - grad, lo, hi) - xk
        step = float(np.linalg.norm(xk - prev["x"]))
        prev["x"] = xk
        trace.records.append(IterationRecord(len(trace.records) + 1, float(intermediate_result.fun), step, float(np.linalg.norm(proj))))
        log.debug("lbfgsb %d value=%.10g step=%.4g", len(trace.records), intermediate_result.fun, step)

    f0, _ = fun(x0)
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        callback=callback,
        options={
            "maxcor": opts.memory,
            "maxiter": opts.max_iterations,
            "gtol": opts.gradient_tolerance,
            "ftol": opts.relative_tolerance,
            "maxfun": opts.max_evaluations or 20 * opts.max_iterations + 20,
        },
    )
    x = np.clip(res.x, lo, hi)
    message = str(res.message)
    if "ABNORMAL" in message.upper():
        if not trace.records:
            raise LineSearchFailure(f"line search failed at the first iteration: {message}")
        log.info("L-BFGS-B stopped by line search after %d iterations", trace.iterations)
    if len(trace.records) >= opts.max_iterations:
        trace.stop_reason = MAX_ITERATIONS
    elif "PROJ" in message.upper() or "GRADIENT" in message.upper():
        active = np.any((x <= lo) | (x >= hi))
        trace.stop_reason = BOUND_ACTIVE if active and float(np.linalg.norm(res.jac)) > opts.gradient_tolerance else GRADIENT_TOLERANCE
    else:
        trace.stop_reason = STEP_TOLERANCE
    if res.fun > f0:
        # never hand back something worse than the start
        return x0, trace
    return x, trace
