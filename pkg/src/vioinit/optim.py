"""Damped least-squares (Levenberg-Marquardt) solvers.

Both solvers accept a step only when the exact objective strictly decreases,
so accepted-cost traces are strictly decreasing by construction. The
separable variant exploits the one-scalar-per-landmark structure of bundle
adjustment (each residual row touches at most one inverse depth) with a Schur
complement on the landmark block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import LmConfig

_LAMBDA_MAX = 1e10
_LAMBDA_MIN = 1e-12
_DIAG_FLOOR = 1e-12


@dataclass
class LmResult:
    x: object
    cost: float
    initial_cost: float
    iterations: int
    accepted_steps: int
    converged: bool
    cost_trace: list = field(default_factory=list)  # initial cost + accepted costs
    gradient_norm_initial: float = 0.0
    gradient_norm_final: float = 0.0


def levenberg_marquardt(x0, cost_fn, linearize_fn, retract_fn, config: LmConfig | None = None) -> LmResult:
    """Dense LM over an abstract state.

    Args:
        x0: initial state (any type).
        cost_fn: x -> exact scalar objective (may return inf for invalid x).
        linearize_fn: x -> (r, J) residual vector and Jacobian for the
            normal equations (robust weighting already applied).
        retract_fn: (x, dx) -> new state.
        config: LM schedule; defaults used when omitted.

    Returns:
        LmResult; ``cost_trace`` holds the initial cost followed by each
        accepted cost (strictly decreasing).
    """
    config = config or LmConfig()
    x = x0
    cost = float(cost_fn(x))
    lam = config.initial_lambda
    trace = [cost]
    accepted = 0
    converged = False
    g_norm0 = g_norm = 0.0
    it = -1

    for it in range(config.max_iterations):
        r, jac = linearize_fn(x)
        grad = jac.T @ r
        g_norm = float(np.linalg.norm(grad))
        if it == 0:
            g_norm0 = g_norm
        hess = jac.T @ jac
        diag = np.maximum(np.diag(hess), _DIAG_FLOOR)

        step_accepted = False
        while lam <= _LAMBDA_MAX:
            try:
                dx = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= config.lambda_up
                continue
            if np.abs(dx).max() < 1e-14:
                converged = True
                break
            x_new = retract_fn(x, dx)
            new_cost = float(cost_fn(x_new))
            if new_cost < cost:
                improvement = cost - new_cost
                x, cost = x_new, new_cost
                trace.append(cost)
                accepted += 1
                lam = max(lam / config.lambda_down, _LAMBDA_MIN)
                step_accepted = True
                if improvement < config.cost_tolerance * max(cost, 1e-30):
                    converged = True
                break
            lam *= config.lambda_up
        if converged or not step_accepted:
            break

    return LmResult(
        x=x,
        cost=cost,
        initial_cost=trace[0],
        iterations=it + 1,
        accepted_steps=accepted,
        converged=converged or accepted > 0,
        cost_trace=trace,
        gradient_norm_initial=g_norm0,
        gradient_norm_final=g_norm,
    )


def separable_lm(
    x0,
    cost_fn,
    linearize_fn,
    retract_fn,
    n_dense: int,
    n_landmarks: int,
    config: LmConfig | None = None,
) -> LmResult:
    """LM with a Schur complement over per-landmark scalar parameters.

    ``linearize_fn(x)`` must return ``(r, j_dense, j_lm_vals, j_lm_idx)``
    where row ``k`` of the Jacobian is ``[j_dense[k], e_{j_lm_idx[k]} *
    j_lm_vals[k]]`` (``j_lm_idx[k] = -1`` for rows touching no landmark).
    ``retract_fn(x, d_dense, d_lm)`` applies the split step.
    """
    config = config or LmConfig()
    x = x0
    cost = float(cost_fn(x))
    lam = config.initial_lambda
    trace = [cost]
    accepted = 0
    converged = False
    g_norm0 = g_norm = 0.0
    it = -1

    for it in range(config.max_iterations):
        r, j_d, j_lv, j_li = linearize_fn(x)
        mask = j_li >= 0
        idx = j_li[mask]
        vals = j_lv[mask]

        grad_d = j_d.T @ r
        grad_l = np.bincount(idx, weights=vals * r[mask], minlength=n_landmarks)
        g_norm = float(math.hypot(np.linalg.norm(grad_d), np.linalg.norm(grad_l)))
        if it == 0:
            g_norm0 = g_norm

        h_dd = j_d.T @ j_d
        h_ll = np.bincount(idx, weights=vals * vals, minlength=n_landmarks)
        # h_ld[l] = sum over rows of landmark l of vals * j_dense_row
        h_ld = np.zeros((n_landmarks, n_dense))
        np.add.at(h_ld, idx, j_d[mask] * vals[:, None])

        diag_d = np.maximum(np.diag(h_dd), _DIAG_FLOOR)
        diag_l = np.maximum(h_ll, _DIAG_FLOOR)

        step_accepted = False
        while lam <= _LAMBDA_MAX:
            c_inv = 1.0 / (h_ll + lam * diag_l)
            schur = h_dd + lam * np.diag(diag_d) - h_ld.T @ (h_ld * c_inv[:, None])
            rhs = -grad_d + h_ld.T @ (c_inv * grad_l)
            try:
                d_dense = np.linalg.solve(schur, rhs)
            except np.linalg.LinAlgError:
                lam *= config.lambda_up
                continue
            d_lm = c_inv * (-grad_l - h_ld @ d_dense)
            if max(np.abs(d_dense).max(initial=0.0), np.abs(d_lm).max(initial=0.0)) < 1e-14:
                converged = True
                break
            x_new = retract_fn(x, d_dense, d_lm)
            new_cost = float(cost_fn(x_new))
            if new_cost < cost:
                improvement = cost - new_cost
                x, cost = x_new, new_cost
                trace.append(cost)
                accepted += 1
                lam = max(lam / config.lambda_down, _LAMBDA_MIN)
                step_accepted = True
                if improvement < config.cost_tolerance * max(cost, 1e-30):
                    converged = True
                break
            lam *= config.lambda_up
        if converged or not step_accepted:
            break

    return LmResult(
        x=x,
        cost=cost,
        initial_cost=trace[0],
        iterations=it + 1,
        accepted_steps=accepted,
        converged=converged or accepted > 0,
        cost_trace=trace,
        gradient_norm_initial=g_norm0,
        gradient_norm_final=g_norm,
    )


def huber_weights(residual_norms: np.ndarray, delta: float) -> np.ndarray:
    """IRLS sqrt-weights for the Huber loss (1 inside delta, sqrt(delta/|r|) outside)."""
    norms = np.maximum(residual_norms, 1e-30)
    w = np.ones_like(norms)
    outside = norms > delta
    w[outside] = np.sqrt(delta / norms[outside])
    return w


def huber_cost(residual_norms: np.ndarray, delta: float) -> float:
    """Exact summed Huber loss: r^2 inside delta, delta * (2|r| - delta) outside."""
    norms = np.abs(residual_norms)
    inside = norms <= delta
    return float(np.sum(norms[inside] ** 2) + np.sum(delta * (2.0 * norms[~inside] - delta)))
