"""First- and second-order adjoint processes of the relaxed control problem.

The first-order pair solves

    dp = -(phi(mu) p + psi(mu).q + h_x(x, mu)) dt + q dB,        p_T = g_x(x_T),

and the second-order pair

    dP = -((2 phi(mu) + |psi(mu)|^2) P + 2 psi(mu).Q + h_xx(x, mu)) dt + Q dB,
    P_T = g_xx(x_T).

Two backends are provided. The closed form applies when coefficients do not
depend on the scenario, the control is a function of time only and the cost
is quadratic in the state: then ``p = a x + c`` and ``P = a`` with ``a, c``
solving linear ODEs backwards. The regression backend is a least-squares
Monte Carlo scheme that handles scenario-dependent coefficients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from relaxctl.dynamics import (
    CoefficientModel,
    CostSpec,
    PathBundle,
    _exact,
    realized_coefficients,
)
from relaxctl.errors import DomainError, SolverError
from relaxctl.measures import control_distance

RIDGE = 1e-8
CONDITION_LIMIT = 1e12
OPTIONAL_TOL = 1e-4


@dataclass(frozen=True)
class AdjointSolution:
    """Adjoint paths on the simulation knots.

    ``p, P`` have shape (S, M+1) and ``q, Q`` shape (S, M+1, d). The last
    knot of ``q`` and ``Q`` repeats the value of the last interval.
    """

    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    backend: str
    time_grid: np.ndarray

    def __post_init__(self):
        for name in ("p", "q", "P", "Q"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SolverError(f"adjoint {name} has non-finite entries")

    def to_csv(self, path) -> None:
        S, M1 = self.p.shape
        d = self.q.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "t", "p"] + [f"q_{k}" for k in range(d)] + ["P"]
                       + [f"Q_{k}" for k in range(d)])
            for s in range(S):
                for j in range(M1):
                    w.writerow([s, repr(float(self.time_grid[j])), repr(float(self.p[s, j]))]
                               + [repr(float(v)) for v in self.q[s, j]]
                               + [repr(float(self.P[s, j]))]
                               + [repr(float(v)) for v in self.Q[s, j]])


@dataclass(frozen=True)
class IntegratingFactors:
    """``Phi`` solves the homogeneous state equation from 1; ``Psi = Phi**2``
    solves the homogeneous second-order equation, both with their reciprocals."""

    Phi: np.ndarray
    Phi_inv: np.ndarray
    Psi: np.ndarray
    Psi_inv: np.ndarray


def integrating_factors(model: CoefficientModel, control, bundle: PathBundle,
                        threads: int = 1) -> IntegratingFactors:
    """Integrating factors along every path.

    Uses the same exponential recursion as :func:`relaxctl.dynamics.simulate_exact`,
    so ``Phi`` coincides with the exact-scheme factor ``z``. For feedback
    controls the states stored in ``bundle`` drive the control.
    """
    _, logz = _exact(model, control, bundle, threads, states=bundle.x)
    return IntegratingFactors(np.exp(logz), np.exp(-logz), np.exp(2 * logz), np.exp(-2 * logz))


# ---------------------------------------------------------------------------
# helpers


def _integrate_cost_derivative(fn, grid, W, states: PathBundle) -> np.ndarray:
    S, M = states.scenarios, states.steps
    u = grid.points
    out = np.empty((S, M))
    for j in range(M):
        Wj = W[j] if W.ndim == 2 else W[:, j]
        vals = np.broadcast_to(fn(states.time_grid[j], states.x[:, j][:, None], u), (S, u.shape[0]))
        out[:, j] = np.sum(vals * Wj, axis=-1)
    return out


def _phi1(z: np.ndarray) -> np.ndarray:
    """``(e^z - 1)/z`` with the removable singularity at 0."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _closed_form_applicable(model: CoefficientModel, control, cost: CostSpec) -> bool:
    if not model.deterministic or cost.quadratic is None:
        return False
    if getattr(control, "state_dependent", False):
        return False
    return control.table(model.time_grid).ndim == 2


def _select_backend(model, control, cost, backend: str) -> str:
    if backend == "auto":
        return "closed-form" if _closed_form_applicable(model, control, cost) else "regression"
    if backend == "closed-form" and not _closed_form_applicable(model, control, cost):
        raise DomainError("closed-form adjoint needs deterministic coefficients, a time-only "
                          "control and a quadratic cost")
    if backend not in ("closed-form", "regression"):
        raise DomainError(f"unknown adjoint backend {backend!r}")
    return backend


# ---------------------------------------------------------------------------
# closed form


def riccati_coefficients(model: CoefficientModel, control, cost: CostSpec):
    """Backward RK4 solution of the affine-ansatz ODEs.

    ``a' = -(2 phi + |psi|^2) a - h2`` with ``a_T = g2`` and
    ``c' = -phi c - a (upsilon + psi.chi) - h1`` with ``c_T = g1``; the
    coefficients are frozen over each interval. Returns ``a, c`` on the knots.
    """
    H2, H1, _, g2, g1, _ = cost.quadratic
    tg = model.time_grid
    table = control.table(tg)
    M = tg.size - 1
    u = model.grid.points
    a = np.empty(M + 1)
    c = np.empty(M + 1)
    a[M], c[M] = g2, g1
    for j in range(M - 1, -1, -1):
        w = table[j]
        phi = float(np.dot(model.phi[0, j], w))
        chi = model.chi[0, j].T @ w
        psi = model.psi[0, j].T @ w
        k = 2 * phi + float(psi @ psi)
        m = float(np.dot(model.upsilon[0, j], w)) + float(psi @ chi)
        h2 = float(np.dot(H2(tg[j], u), w)) if cost.running else 0.0
        h1 = float(np.dot(H1(tg[j], u), w)) if cost.running else 0.0

        def f(y):
            return np.array([-k * y[0] - h2, -phi * y[1] - m * y[0] - h1])

        h = -(tg[j + 1] - tg[j])
        y = np.array([a[j + 1], c[j + 1]])
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        a[j], c[j] = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return a, c


def _closed_form(model, control, states, cost) -> AdjointSolution:
    a, c = riccati_coefficients(model, control, cost)
    table = control.table(states.time_grid)
    chi = np.einsum("mgd,mg->md", model.chi[0], table)
    psi = np.einsum("mgd,mg->md", model.psi[0], table)
    chi = np.vstack([chi, chi[-1:]])
    psi = np.vstack([psi, psi[-1:]])
    x = states.x
    S, M = states.scenarios, states.steps
    p = a[None, :] * x + c[None, :]
    p[:, M] = cost.g_x(x[:, M])
    q = a[None, :, None] * (chi[None] + psi[None] * x[:, :, None])
    P = np.broadcast_to(a, (S, M + 1)).copy()
    P[:, M] = cost.g_xx(x[:, M])
    Q = np.zeros_like(q)
    return AdjointSolution(p, q, P, Q, "closed-form", states.time_grid.copy())


# ---------------------------------------------------------------------------
# regression


class _Regressor:
    """Ridge least squares on a standardised basis, factorised once per knot.

    ``columns`` must be linearly independent (a degenerate set raises
    :class:`SolverError`); each of ``optional`` is kept only if it is not
    already explained by the columns before it.
    """

    def __init__(self, columns: list[np.ndarray], step: int, optional=()):
        S = columns[0].size
        kept = [np.ones(S)]
        for col in columns:
            sd = col.std()
            if sd > 1e-12 * max(1.0, abs(col.mean())):
                kept.append((col - col.mean()) / sd)
        A = np.column_stack(kept)
        gram = A.T @ A / S
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise SolverError(f"regression basis is rank deficient at time step {step}", step=step)
        for col in optional:
            sd = col.std()
            if not sd > 1e-12 * max(1.0, abs(col.mean())):
                continue
            col = (col - col.mean()) / sd
            coef, *_ = np.linalg.lstsq(A, col, rcond=None)
            if np.linalg.norm(col - A @ coef) > OPTIONAL_TOL * np.sqrt(S):
                A = np.column_stack([A, col])
        gram = A.T @ A / S
        gram[np.diag_indices_from(gram)] += RIDGE
        self.A = A
        self.factor = linalg.cho_factor(gram)
        self.S = S

    def fit(self, y: np.ndarray) -> np.ndarray:
        beta = linalg.cho_solve(self.factor, self.A.T @ y / self.S)
        return self.A @ beta


def _constant(y: np.ndarray) -> bool:
    return bool(np.all(y == y[0]))


def default_basis(states: PathBundle, factors: Optional[np.ndarray], j: int):
    """Regressors at knot ``j``.

    Returns the state columns ``x, x^2`` and the optional market-factor
    columns ``f, f^2, x f``. Variables are centred before forming products,
    which spans the same space but keeps the Gram matrix well conditioned
    when the state barely moves away from its mean. Factor columns that are
    functions of the state (for instance right after the start, when both are
    driven by a single increment) are dropped by the regressor.
    """
    x = states.x[:, j] - states.x[:, j].mean()
    optional = []
    if factors is not None:
        for f in np.atleast_2d(factors[:, j].T):
            f = f - f.mean()
            optional += [f, f * f, x * f]
    return [x, x * x], optional


def _conditional(reg: Optional[_Regressor], y: np.ndarray, dW: np.ndarray, dt: float):
    """``(E[y | F_t], E[y dW | F_t] / dt)``; targets constant across scenarios are exact."""
    if _constant(y):
        return y.copy(), np.zeros(dW.shape)
    yhat = reg.fit(y)
    resid = y - yhat
    z = np.column_stack([reg.fit(resid * dW[:, k]) for k in range(dW.shape[1])]) / dt
    return yhat, z


def _regression(model, control, states, cost, basis=default_basis) -> AdjointSolution:
    ups, phi, chi, psi, W = realized_coefficients(model, control, states)
    del ups, chi
    grid = model.grid
    S, M, d = states.scenarios, states.steps, states.d
    dt = states.dt
    x = states.x
    if cost.running:
        hx = _integrate_cost_derivative(cost.h_x, grid, W, states)
        hxx = _integrate_cost_derivative(cost.h_xx, grid, W, states)
    else:
        hx = hxx = np.zeros((S, M))
    p = np.empty((S, M + 1))
    P = np.empty((S, M + 1))
    q = np.zeros((S, M + 1, d))
    Q = np.zeros((S, M + 1, d))
    p[:, M] = cost.g_x(x[:, M])
    P[:, M] = cost.g_xx(x[:, M])
    for j in range(M - 1, -1, -1):
        reg = None
        if not (_constant(p[:, j + 1]) and _constant(P[:, j + 1])):
            required, optional = basis(states, model.factors, j)
            reg = _Regressor(required, j, optional)
        dWj = states.dW[:, j]
        yp, zp = _conditional(reg, p[:, j + 1], dWj, dt[j])
        yP, zP = _conditional(reg, P[:, j + 1], dWj, dt[j])
        ph = phi[:, j]
        ps = psi[:, j]
        kk = 2 * ph + np.sum(ps * ps, axis=1)
        p[:, j] = np.exp(ph * dt[j]) * (yp + np.sum(ps * zp, axis=1) * dt[j]) \
            + hx[:, j] * dt[j] * _phi1(ph * dt[j])
        P[:, j] = np.exp(kk * dt[j]) * (yP + 2 * np.sum(ps * zP, axis=1) * dt[j]) \
            + hxx[:, j] * dt[j] * _phi1(kk * dt[j])
        q[:, j] = zp
        Q[:, j] = zP
        if not (np.all(np.isfinite(p[:, j])) and np.all(np.isfinite(P[:, j]))):
            raise SolverError(f"adjoint regression diverged at time step {j}", step=j)
    q[:, M] = q[:, M - 1]
    Q[:, M] = Q[:, M - 1]
    return AdjointSolution(p, q, P, Q, "regression", states.time_grid.copy())


# ---------------------------------------------------------------------------
# public solvers


def solve_adjoints(model: CoefficientModel, control, states: PathBundle, cost: CostSpec,
                   backend: str = "auto", basis=default_basis) -> AdjointSolution:
    """Both adjoint pairs along the simulated ``states``.

    Parameters
    ----------
    backend : {"auto", "closed-form", "regression"}
        ``auto`` picks the closed form whenever it applies.
    basis : callable
        ``basis(states, factors, j)`` returning ``(required, optional)``
        regressor columns for the regression backend; the intercept is
        always added.
    """
    if states.x is None:
        raise DomainError("states must be simulated before solving adjoints")
    chosen = _select_backend(model, control, cost, backend)
    if chosen == "closed-form":
        return _closed_form(model, control, states, cost)
    return _regression(model, control, states, cost, basis)


def solve_first_order(model, control, states, cost, backend: str = "auto"):
    """First-order adjoint pair ``(p, q)``."""
    sol = solve_adjoints(model, control, states, cost, backend)
    return sol.p, sol.q


def solve_second_order(model, control, states, cost, backend: str = "auto"):
    """Second-order adjoint pair ``(P, Q)``."""
    sol = solve_adjoints(model, control, states, cost, backend)
    return sol.P, sol.Q


def martingale_residuals(model, control, states: PathBundle, cost: CostSpec,
                         solution: AdjointSolution):
    """Per-step martingale increments ``p_{j+1} - p_j + driver_j dt``.

    ``p_t + int_0^t driver ds`` is a martingale, so every increment has mean
    zero. Returns the sample mean and standard error over scenarios for every
    step; a consistent solution has means indistinguishable from zero.
    """
    _, phi, _, psi, W = realized_coefficients(model, control, states)
    if cost.running:
        hx = _integrate_cost_derivative(cost.h_x, model.grid, W, states)
    else:
        hx = np.zeros_like(phi)
    p, q = solution.p, solution.q
    dt = states.dt
    M = states.steps
    driver = phi * p[:, :M] + np.sum(psi * q[:, :M], axis=2) + hx
    r = p[:, 1:] - p[:, :M] + driver * dt[None, :]
    return r.mean(axis=0), r.std(axis=0, ddof=1) / np.sqrt(r.shape[0])


def adjoint_gap(a: AdjointSolution, b: AdjointSolution) -> tuple[float, float]:
    """``E int (|p - p'|^2 + |q - q'|^2) dt`` with left-endpoint quadrature, and its stderr."""
    dt = np.diff(a.time_grid)
    M = dt.size
    dp = (a.p[:, :M] - b.p[:, :M]) ** 2
    dq = np.sum((a.q[:, :M] - b.q[:, :M]) ** 2, axis=2)
    per = np.sum((dp + dq) * dt[None, :], axis=1)
    se = float(per.std(ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
    return float(per.mean()), se


def adjoint_stability_probe(u, u_prime, solution: AdjointSolution,
                            solution_prime: AdjointSolution) -> dict:
    """Adjoint gap between two strict controls against ``d(u, u')^(1/8)``."""
    dist, _ = control_distance(u, u_prime)
    gap, se = adjoint_gap(solution, solution_prime)
    scale = dist ** 0.125
    return {"distance": dist, "gap": gap, "gap_stderr": se,
            "ratio": gap / scale if scale > 0 else (0.0 if gap == 0 else np.inf)}
