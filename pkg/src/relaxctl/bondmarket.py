"""Bond portfolios under Heath-Jarrow-Morton forward-rate dynamics.

Forward curves use the time-to-maturity parametrisation ``r_t(u)`` and evolve by

    dr_t(u) = (d/du r_t(u) + sigma(u) int_0^u sigma - sigma(u) Theta_t) dt + sigma(u) dB_t.

A portfolio that holds rolling bonds with times to maturity distributed by a
measure ``mu`` on ``[0, T*]`` then has wealth dynamics of the linear form with
``upsilon = chi = 0``, ``phi(u) = r_t(0) - v(u) Theta_t`` and ``psi(u) = v(u)``,
where ``v(u) = -int_0^u sigma`` is the integrated volatility. Ho-Lee
(constant ``sigma``) and Hull-White (``sigma e^{-c u}``) volatilities are
supported.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from relaxctl.adjoint import solve_adjoints
from relaxctl.dynamics import CoefficientModel, CostSpec, PathBundle
from relaxctl.errors import DomainError, SimulationDivergedError
from relaxctl.hamiltonian import HContext, batch_values, knot_parts
from relaxctl.measures import ActionGrid, AdaptedControl

KINDS = ("ho-lee", "hull-white")
_U_TOL = 1e-12


@dataclass(frozen=True)
class MarketModel:
    """Gaussian HJM market with a one-factor volatility.

    Attributes
    ----------
    kind : ``"ho-lee"`` or ``"hull-white"``.
    sigma : volatility level (>= 0; zero freezes the curve shape).
    c : Hull-White mean-reversion speed (> 0), ignored for Ho-Lee.
    theta : market price of risk; a constant or a callable of time.
    T_star : longest time to maturity traded.
    initial_curve : flat level or callable ``u -> r_0(u)``.
    """

    kind: str = "ho-lee"
    sigma: float = 0.01
    c: float = 0.5
    theta: Union[float, Callable] = 0.0
    T_star: float = 5.0
    initial_curve: Union[float, Callable] = 0.03

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown volatility kind {self.kind!r}")
        if not self.sigma >= 0:
            raise DomainError("sigma must be nonnegative")
        if self.kind == "hull-white" and not self.c > 0:
            raise DomainError("Hull-White needs c > 0")
        if not self.T_star > 0:
            raise DomainError("T_star must be positive")

    def sigma_of(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "ho-lee":
            return np.full_like(u, self.sigma)
        return self.sigma * np.exp(-self.c * u)

    def vol_bound(self) -> float:
        """``sup |v|`` over ``[0, T*]``."""
        return float(-_integrated_vol(self, self.T_star))

    def theta_at(self, t) -> np.ndarray:
        if callable(self.theta):
            return np.asarray(self.theta(np.asarray(t, dtype=float)), dtype=float)
        return np.full(np.shape(t), float(self.theta))

    def curve_at(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if callable(self.initial_curve):
            return np.asarray(self.initial_curve(u), dtype=float) * np.ones_like(u)
        return np.full_like(u, float(self.initial_curve))


def _integrated_vol(model: MarketModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if model.kind == "ho-lee":
        return -model.sigma * u
    return (model.sigma / model.c) * np.expm1(-model.c * u)


def integrated_vol(model: MarketModel, t, u) -> np.ndarray:
    """``v_t(u) = -int_0^u sigma_t(x) dx``; time-homogeneous in both models."""
    u = np.asarray(u, dtype=float)
    if np.any(u < -_U_TOL) or np.any(u > model.T_star * (1 + _U_TOL) + _U_TOL):
        raise DomainError("time to maturity outside [0, T_star]")
    return _integrated_vol(model, np.clip(u, 0.0, model.T_star))


def hjm_drift(model: MarketModel, u, theta) -> np.ndarray:
    """No-arbitrage drift ``sigma(u) int_0^u sigma - sigma(u) Theta`` (without transport)."""
    s = model.sigma_of(u)
    return s * (-_integrated_vol(model, u)) - s * theta


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class CurvePath:
    """Simulated forward curves.

    ``r`` has shape (S, M+1, N+1) on the maturity lattice ``u`` (or is None
    when only tracked prices were kept); ``r0`` and ``bank`` have shape
    (S, M+1); ``tracked`` maps calendar maturities to prices (S, M+1).
    """

    time_grid: np.ndarray
    u: np.ndarray
    r0: np.ndarray
    bank: np.ndarray
    r: Optional[np.ndarray] = None
    tracked: Optional[dict] = None

    def to_csv(self, path) -> None:
        if self.r is None:
            raise DomainError("curve surface was not stored")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "t", "u", "r"])
            for s in range(self.r.shape[0]):
                for j, t in enumerate(self.time_grid):
                    for i, uu in enumerate(self.u):
                        w.writerow([s, repr(float(t)), repr(float(uu)), repr(float(self.r[s, j, i]))])


def _trapezoid_log_price(r: np.ndarray, du: float, u: float) -> np.ndarray:
    """``int_0^u r`` by the trapezoid rule on the lattice, linear inside the last cell."""
    n = int(np.floor(u / du + 1e-9))
    frac = u / du - n
    if abs(frac) < 1e-9:
        frac = 0.0
    full = du * (0.5 * r[..., 0] + np.sum(r[..., 1:n], axis=-1) + 0.5 * r[..., n]) if n > 0 \
        else np.zeros(r.shape[:-1])
    if frac > 0:
        r_end = r[..., n] + frac * (r[..., n + 1] - r[..., n])
        full = full + 0.5 * frac * du * (r[..., n] + r_end)
    return full


def evolve_curve(model: MarketModel, bundle: PathBundle, du: Optional[float] = None,
                 track=(), keep_surface: bool = True) -> CurvePath:
    """Upwind-in-maturity, Euler-in-time evolution of the forward curve.

    The lattice spacing defaults to the time step, which makes the transport
    step an exact shift. Bond prices for calendar maturities in ``track`` are
    recorded at every knot.
    """
    tg = bundle.time_grid
    dt = bundle.dt
    if not np.allclose(dt, dt[0], rtol=1e-12, atol=0):
        raise DomainError("curve evolution needs a uniform time grid")
    if bundle.d != 1:
        raise DomainError("the one-factor market needs one Brownian coordinate")
    h = float(dt[0])
    du = h if du is None else float(du)
    if h / du > 1 + 1e-12:
        raise DomainError("CFL condition violated: time step exceeds maturity spacing")
    T = float(tg[-1])
    n_nodes = int(np.ceil((model.T_star + T) / du - 1e-9)) + 1
    u = du * np.arange(n_nodes)
    S, M = bundle.scenarios, bundle.steps
    courant = h / du
    sig = model.sigma_of(u)
    for tau in track:
        if tau > model.T_star + 1e-12 or tau < T - 1e-12:
            raise DomainError("tracked maturities must lie in [T, T_star]")

    r = np.broadcast_to(model.curve_at(u), (S, n_nodes)).copy()
    surface = np.empty((S, M + 1, n_nodes)) if keep_surface else None
    r0 = np.empty((S, M + 1))
    tracked = {float(tau): np.empty((S, M + 1)) for tau in track}

    def record(j):
        r0[:, j] = r[:, 0]
        if keep_surface:
            surface[:, j] = r
        for tau, arr in tracked.items():
            arr[:, j] = np.exp(-_trapezoid_log_price(r, du, tau - tg[j]))

    record(0)
    for j in range(M):
        theta = float(model.theta_at(tg[j]))
        ahead = np.concatenate([r[:, 1:], r[:, -1:]], axis=1)
        r = r + courant * (ahead - r) + hjm_drift(model, u, theta) * h + sig * bundle.dW[:, j, 0:1]
        if not np.all(np.isfinite(r)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(r), axis=1))[0])
            raise SimulationDivergedError(f"forward curve diverged at scenario {bad}, step {j}",
                                          scenario=bad, step=j)
        record(j + 1)
    bank = np.ones((S, M + 1))
    bank[:, 1:] = np.exp(np.cumsum(r0[:, :M] * h, axis=1))
    return CurvePath(tg.copy(), u, r0, bank, surface, tracked or None)


def bond_price(curve: CurvePath, t_index: int, u: float) -> np.ndarray:
    """``p_t(u) = exp(-int_0^u r_t)`` per scenario by trapezoid quadrature."""
    if curve.r is None:
        raise DomainError("curve surface was not stored")
    if u < 0 or u > curve.u[-1]:
        raise DomainError("time to maturity outside the lattice")
    if u == 0:
        return np.ones(curve.r.shape[0])
    du = float(curve.u[1] - curve.u[0])
    return np.exp(-_trapezoid_log_price(curve.r[:, t_index], du, u))


# ---------------------------------------------------------------------------
# control problem


def maturity_grid(model: MarketModel, count: int) -> ActionGrid:
    """Uniform action grid of ``count`` times to maturity on ``[0, T*]``."""
    return ActionGrid.uniform(0.0, model.T_star, count)


def build_control_problem(model: MarketModel, curve: CurvePath, grid: ActionGrid,
                          kappa: float) -> tuple[CoefficientModel, CostSpec]:
    """Wealth coefficients for holdings on ``grid`` and the mean-variance cost."""
    tg = curve.time_grid
    M = tg.size - 1
    G = grid.count
    u = grid.points
    v = integrated_vol(model, 0.0, u)
    theta = np.asarray(model.theta_at(tg[:-1]), dtype=float)
    phi = curve.r0[:, :M, None] - theta[None, :, None] * v[None, None, :]
    psi = np.broadcast_to(v[None, None, :, None], (1, M, G, 1)).copy()
    zeros = np.zeros((1, M, G))
    coeffs = CoefficientModel(grid, tg.copy(), zeros, phi, zeros[..., None].copy(), psi,
                              max(model.vol_bound(), 1e-300), factors=curve.r0[:, :, None])
    return coeffs, CostSpec.mean_variance(kappa)


def passive_portfolio(model: MarketModel, curve: CurvePath, maturities):
    """Holdings replicating ``x_t = sum_i p_t(T_i - t)``.

    Bond ``i`` is held with weight proportional to its price; the atoms are
    the remaining times to maturity ``T_i - t_j`` on a grid with the time
    step as spacing. Returns the adapted control, its action grid and the
    replicated value paths (S, M+1).
    """
    tg = curve.time_grid
    T = float(tg[-1])
    h = float(tg[1] - tg[0])
    mats = np.asarray(maturities, dtype=float)
    if np.any(mats > model.T_star + 1e-12):
        raise DomainError("maturity exceeds T_star")
    if np.any(mats < T - 1e-12):
        raise DomainError("maturities must not expire before the horizon")
    if curve.tracked is None or any(float(m) not in curve.tracked for m in mats):
        raise DomainError("curve must track the portfolio maturities")
    top = int(round(mats.max() / h))
    grid = ActionGrid(h * np.arange(top + 1))
    prices = np.stack([curve.tracked[float(m)] for m in mats], axis=-1)
    S, M = prices.shape[0], tg.size - 1
    w = np.zeros((S, M, grid.count))
    share = prices[:, :M] / prices[:, :M].sum(axis=-1, keepdims=True)
    for i, m in enumerate(mats):
        idx = np.rint((m - tg[:M]) / h).astype(int)
        w[:, np.arange(M), idx] += share[:, :, i]
    return AdaptedControl(grid, tg.copy(), w), grid, prices.sum(axis=-1)


# ---------------------------------------------------------------------------
# mean-variance adjoint and H-function


def mv_adjoint_and_h(coeffs: CoefficientModel, cost: CostSpec, control, states: PathBundle,
                     backend: str = "auto"):
    """Adjoints and per-knot integrated H-function of the control itself.

    Dispatches to the generic adjoint solver and evaluates the H-function in
    ``integrated`` mode, where the diffusion penalty is ``int v^2 dnu``.
    Returns the solution and an (S, M) array of H-values at ``nu = mu``.
    """
    sol = solve_adjoints(coeffs, control, states, cost, backend)
    tg = states.time_grid
    M = states.steps
    table = control.table(tg)
    values = np.empty((states.scenarios, M))
    for j in range(M):
        W = table[j] if table.ndim == 2 else table[:, j]
        x = states.x[:, j]
        L, z = knot_parts(coeffs, W, x, sol.p[:, j], sol.q[:, j], sol.P[:, j], None, j)
        values[:, j] = batch_values(L, z, sol.P[:, j], W, "integrated")
    return sol, values


def mv_h_function(model: MarketModel, grid: ActionGrid, r0: float, theta: float, x: float,
                  p: float, q: float, P: float, mu, nu) -> float:
    """Mean-variance H-function written out term by term.

    ``-p (r0 - v(nu) theta) x - (q - P v(mu) x) v(nu) x - 1/2 P v^2(nu) x^2``
    with ``v(nu) = int v dnu`` and ``v^2(nu) = int v^2 dnu``.
    """
    v = integrated_vol(model, 0.0, grid.points)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    v_mu, v_nu, v2_nu = v @ mu, v @ nu, (v * v) @ nu
    return float(-p * (r0 - v_nu * theta) * x - (q - P * v_mu * x) * v_nu * x
                 - 0.5 * P * v2_nu * x * x)


def mv_context(model: MarketModel, grid: ActionGrid, r0: float, theta: float, x: float,
               p: float, q: float, P: float, mu) -> HContext:
    """Generic H-function context for the same point as :func:`mv_h_function`."""
    v = integrated_vol(model, 0.0, grid.points)
    G = grid.count
    return HContext.build(x=x, mu=mu, p=p, q=q, P=P, upsilon=np.zeros(G),
                          phi=r0 - v * theta, chi=np.zeros(G), psi=v, h=np.zeros(G))

