"""Numeric embodiment of the theory: loss-bound evaluation and convergence checks.

Reports are computed post hoc from run logs and never steer a simulation, so
the engine and the diagnostics stay independently testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RunLog, SystemConstants
from .aggregation import bound_coefficients


@dataclass
class BoundReport:
    """Evaluation of the loss upper bound against the measured final gradient.

    ``x`` is the gradient-drift term, ``y`` the mini-batch term, ``z`` the
    data-distribution term and ``w`` the denominator. ``applicable`` is False
    when the denominator is non-positive, in which case no bound value is
    reported. ``preconditions_met`` tracks the weight-limit regime and the
    iteration-cap consistency of the run.
    """

    x: float
    y: float
    z: float
    w: float
    r0: float
    bound_value: float | None
    measured: float
    satisfied: bool
    preconditions_met: bool
    applicable: bool
    h_used: int

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "z": self.z,
            "w": self.w,
            "r0": self.r0,
            "bound_value": self.bound_value,
            "measured": self.measured,
            "satisfied": self.satisfied,
            "preconditions_met": self.preconditions_met,
            "applicable": self.applicable,
            "h_used": self.h_used,
        }


@dataclass
class ConvergenceReport:
    """Mean cumulative squared gradient against its theoretical ceiling."""

    mean_cum_grad: float
    bound: float | None
    satisfied: bool
    applicable: bool
    step_size_limit: float

    def to_dict(self) -> dict:
        return {
            "mean_cum_grad": self.mean_cum_grad,
            "bound": self.bound,
            "satisfied": self.satisfied,
            "applicable": self.applicable,
            "step_size_limit": self.step_size_limit,
        }


def convergence_rhs(constants: SystemConstants, intervals: int, loss_gap: float) -> float:
    """Right-hand side of the convergence diagnostic.

    Equals 2*(F0 - F*) / (T * eta * (2*epsilon - eta*L*V^2)). Scales exactly
    as 1/T and linearly in the initial loss gap.
    """
    margin = 2.0 * constants.epsilon - constants.eta * constants.L * constants.V**2
    return 2.0 * loss_gap / (intervals * constants.eta * margin)


def verify_convergence(
    log: RunLog,
    constants: SystemConstants | None = None,
    f0: float | None = None,
    f_star: float | None = None,
) -> ConvergenceReport:
    """Check the mean cumulative squared gradient against its ceiling.

    The report is marked inapplicable when the learning rate violates
    eta < 2*epsilon/(V^2*L), where the ceiling's denominator changes sign.
    """
    c = constants if constants is not None else log.constants
    if f0 is None:
        f0 = float(log.records[0].global_loss)
    if f_star is None:
        f_star = float(log.analysis_inputs["f_star"])
    lhs = float(log.grad_norms().mean())
    applicable = c.eta < c.step_size_limit
    if not applicable:
        return ConvergenceReport(
            mean_cum_grad=lhs,
            bound=None,
            satisfied=False,
            applicable=False,
            step_size_limit=c.step_size_limit,
        )
    rhs = convergence_rhs(c, log.intervals, f0 - f_star)
    return ConvergenceReport(
        mean_cum_grad=lhs,
        bound=rhs,
        satisfied=lhs <= rhs,
        applicable=True,
        step_size_limit=c.step_size_limit,
    )


def evaluate_bound(
    log: RunLog,
    constants: SystemConstants | None = None,
    sigma_i=None,
    gamma_noniid=None,
    w0: np.ndarray | None = None,
    w_star: np.ndarray | None = None,
) -> BoundReport:
    """Evaluate the loss upper bound over a run log.

    The four sums run over every interval and client of the log. Arguments
    left as None are pulled from the log's analysis inputs. The iteration cap
    entering the drift coefficient is raised to the largest observed count if
    the configured one is smaller; that situation also clears
    ``preconditions_met``.
    """
    c = constants if constants is not None else log.constants
    inputs = log.analysis_inputs
    sigma = np.asarray(inputs["sigma_i"] if sigma_i is None else sigma_i, dtype=float)
    gamma = np.asarray(inputs["gamma_noniid"] if gamma_noniid is None else gamma_noniid, dtype=float)
    start = np.asarray(log.initial_model if w0 is None else w0, dtype=float)
    optimum = np.asarray(inputs["w_star"] if w_star is None else w_star, dtype=float)

    rho = log.rho_matrix() if log.intervals else np.zeros((0, c.N))
    tau = log.tau_matrix().astype(float) if log.intervals else np.zeros((0, c.N))
    observed_h = int(tau.max()) if tau.size else 0
    h_used = max(c.H, observed_h)
    coefs = bound_coefficients(c, h=h_used)

    sum_rho_tau = float((rho * tau).sum())
    x = coefs.c * float((rho * tau**2).sum())
    y = c.eta**2 * c.N * float((sigma**2 * (rho**2 * tau).sum(axis=0)).sum())
    z = coefs.a * float((gamma * (rho * tau).sum(axis=0)).sum())
    w = 1.0 + coefs.b * sum_rho_tau
    r0 = float(np.sum((start - optimum) ** 2))

    preconditions_met = c.weight_limit_ok and observed_h <= c.H
    measured = float(log.final_grad_norm_sq) / c.L**2
    if w <= 0.0:
        return BoundReport(
            x=x, y=y, z=z, w=w, r0=r0,
            bound_value=None,
            measured=measured,
            satisfied=False,
            preconditions_met=preconditions_met,
            applicable=False,
            h_used=h_used,
        )
    bound_value = (r0 + x + y + z) / w
    return BoundReport(
        x=x, y=y, z=z, w=w, r0=r0,
        bound_value=bound_value,
        measured=measured,
        satisfied=measured <= bound_value,
        preconditions_met=preconditions_met,
        applicable=True,
        h_used=h_used,
    )


def heterogeneity_degree(tau_mean) -> float:
    """Population variance of per-client mean iteration counts."""
    tau = np.asarray(tau_mean, dtype=float)
    if tau.size == 0:
        raise ValueError("need at least one client")
    return float(np.var(tau))


def estimate_dissimilarity(task, probe_points) -> tuple[float, float]:
    """Estimate the dissimilarity bound and alignment constant from probes.

    At each probe with a non-negligible global gradient, the dissimilarity
    ratio is the client-mean squared local-gradient norm over the squared
    global norm, and the alignment ratio is the inner product of the global
    gradient with the client-mean local gradient over the squared global
    norm. Returns (max dissimilarity root, min alignment). Raises when every
    probe has a near-zero global gradient.
    """
    v_sq_max = None
    eps_min = None
    for w in probe_points:
        w = np.asarray(w, dtype=float)
        global_grad = task.global_grad(w)
        denom = float(np.dot(global_grad, global_grad))
        if denom <= 1e-24:
            continue
        local_grads = [task.local_grad(i, w) for i in range(task.n_clients)]
        mean_sq = float(np.mean([np.dot(g, g) for g in local_grads]))
        mean_grad = np.mean(local_grads, axis=0)
        v_sq = mean_sq / denom
        eps = float(np.dot(global_grad, mean_grad)) / denom
        v_sq_max = v_sq if v_sq_max is None else max(v_sq_max, v_sq)
        eps_min = eps if eps_min is None else min(eps_min, eps)
    if v_sq_max is None:
        raise ValueError("every probe point had a near-zero global gradient")
    return float(np.sqrt(v_sq_max)), float(eps_min)
