"""Forward simulation of the controlled linear SDE

    dx = (upsilon(mu) + phi(mu) x) dt + (chi(mu) + psi(mu) x) . dB,

with coefficients integrated against the control measure, plus cost
evaluation and moment diagnostics.

Coefficients live on (scenario, time interval, atom[, Brownian coordinate])
arrays; a leading scenario dimension of 1 marks coefficients that do not
depend on the scenario. Brownian increments come from per-scenario Philox
streams keyed on ``(seed, scenario)``, so a scenario's path never depends on
how many scenarios or threads are used.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from relaxctl.errors import DimensionError, DomainError, SimulationDivergedError
from relaxctl.measures import ActionGrid, _check_time_grid, _locate

EXP_GUARD = 700.0


# ---------------------------------------------------------------------------
# Brownian paths


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments and (optionally) simulated state paths.

    Attributes
    ----------
    time_grid : array (M+1,)
    dW : array (S, M, d)
    x0 : float
    seed : int
    x : array (S, M+1) or None
    """

    time_grid: np.ndarray
    dW: np.ndarray
    x0: float
    seed: int
    x: Optional[np.ndarray] = None
    antithetic: bool = False

    def __post_init__(self):
        if self.dW.ndim != 3 or self.dW.shape[1] != self.time_grid.size - 1:
            raise DimensionError("dW must have shape (S, M, d)")
        if self.x is not None:
            if self.x.shape != (self.dW.shape[0], self.time_grid.size):
                raise DimensionError("state paths must have shape (S, M+1)")
            if np.any(self.x[:, 0] != self.x0):
                raise DomainError("state paths must start at x0")

    @property
    def scenarios(self) -> int:
        return self.dW.shape[0]

    @property
    def steps(self) -> int:
        return self.dW.shape[1]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.time_grid)

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def B(self) -> np.ndarray:
        """Brownian paths at the knots, shape (S, M+1, d)."""
        out = np.zeros((self.scenarios, self.steps + 1, self.d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def with_states(self, x: np.ndarray) -> "PathBundle":
        return replace(self, x=x)

    def with_x0(self, x0: float) -> "PathBundle":
        return replace(self, x0=float(x0), x=None)


def _scenario_normals(seed: int, scenario: int, shape) -> np.ndarray:
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | int(scenario)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)


def _chunks(n: int, threads: int):
    threads = max(1, min(int(threads), n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(threads)]


def _parallel(fn, n: int, threads: int):
    parts = _chunks(n, threads)
    if len(parts) == 1:
        return [fn(parts[0])]
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        return list(pool.map(fn, parts))


def generate_paths(seed: int, scenarios: int, time_grid, d: int = 1, x0: float = 0.0,
                   threads: int = 1, antithetic: bool = False) -> PathBundle:
    """Centered Gaussian increments with variance ``dt_j`` per coordinate.

    With ``antithetic=True`` scenarios come in pairs ``(2i, 2i+1)`` whose
    increments are exact negatives of each other; ``scenarios`` must be even.
    """
    tg = np.asarray(time_grid, dtype=float)
    if tg.ndim != 1 or tg.size < 2:
        raise DomainError("time grid needs at least one step")
    _check_time_grid(tg)
    if scenarios < 1 or d < 1:
        raise DomainError("scenarios and d must be positive")
    if antithetic and scenarios % 2:
        raise DomainError("antithetic sampling needs an even scenario count")
    M = tg.size - 1
    scale = np.sqrt(np.diff(tg))[:, None]
    dW = np.empty((scenarios, M, d))

    def fill(sl):
        for s in range(sl.start, sl.stop):
            if antithetic:
                z = _scenario_normals(seed, s // 2, (M, d))
                dW[s] = (z if s % 2 == 0 else -z) * scale
            else:
                dW[s] = _scenario_normals(seed, s, (M, d)) * scale

    _parallel(fill, scenarios, threads)
    return PathBundle(tg, dW, float(x0), int(seed), antithetic=antithetic)


def coarsen(bundle: PathBundle, factor: int) -> PathBundle:
    """Bundle on every ``factor``-th knot with increments summed accordingly."""
    if bundle.steps % factor:
        raise DomainError("factor must divide the number of steps")
    S, M, d = bundle.dW.shape
    dW = bundle.dW.reshape(S, M // factor, factor, d).sum(axis=2)
    return PathBundle(bundle.time_grid[::factor].copy(), dW, bundle.x0, bundle.seed,
                      antithetic=bundle.antithetic)


# ---------------------------------------------------------------------------
# coefficients


def _as_array(values, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=float), shape).copy()


@dataclass(frozen=True)
class CoefficientModel:
    """Sampled coefficients of the linear state equation.

    ``upsilon`` and ``phi`` have shape (S or 1, M, G); ``chi`` and ``psi``
    have shape (S or 1, M, G, d). ``factors`` optionally carries extra
    scenario state (S, M+1, k), such as the short rate, that the regression
    adjoint solver may use as regressors.
    """

    grid: ActionGrid
    time_grid: np.ndarray
    upsilon: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    psi: np.ndarray
    psi_bound: float
    factors: Optional[np.ndarray] = None

    def __post_init__(self):
        M, G = self.time_grid.size - 1, self.grid.count
        for name in ("upsilon", "phi"):
            a = getattr(self, name)
            if a.ndim != 3 or a.shape[1:] != (M, G):
                raise DimensionError(f"{name} must have shape (S, {M}, {G}), got {a.shape}")
        for name in ("chi", "psi"):
            a = getattr(self, name)
            if a.ndim != 4 or a.shape[1:3] != (M, G):
                raise DimensionError(f"{name} must have shape (S, {M}, {G}, d), got {a.shape}")
        if self.chi.shape[3] != self.psi.shape[3]:
            raise DimensionError("chi and psi must share the Brownian dimension")
        leading = {a.shape[0] for a in (self.upsilon, self.phi, self.chi, self.psi)} - {1}
        if len(leading) > 1:
            raise DimensionError("scenario-dependent coefficients disagree on the scenario count")
        for name in ("upsilon", "phi", "chi", "psi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} has non-finite entries")
        if not self.psi_bound > 0:
            raise DomainError("psi_bound must be positive")
        if np.max(np.linalg.norm(self.psi, axis=-1)) > self.psi_bound * (1 + 1e-12):
            raise DomainError("psi exceeds its declared bound")

    @property
    def d(self) -> int:
        return self.psi.shape[3]

    @property
    def steps(self) -> int:
        return self.time_grid.size - 1

    @property
    def scenarios(self) -> int:
        return max(a.shape[0] for a in (self.upsilon, self.phi, self.chi, self.psi))

    @property
    def deterministic(self) -> bool:
        return self.scenarios == 1 and self.factors is None

    @classmethod
    def constant(cls, grid: ActionGrid, time_grid, upsilon=0.0, phi=0.0, chi=0.0, psi=0.0,
                 d: int = 1, psi_bound: Optional[float] = None) -> "CoefficientModel":
        """Time-constant coefficients given per atom (scalars broadcast)."""
        tg = np.asarray(time_grid, dtype=float)
        M, G = tg.size - 1, grid.count
        ups = _as_array(upsilon, (G,))[None, None, :].repeat(M, axis=1)
        ph = _as_array(phi, (G,))[None, None, :].repeat(M, axis=1)
        ch = _per_atom_vector(chi, G, d)[None, None].repeat(M, axis=1)
        ps = _per_atom_vector(psi, G, d)[None, None].repeat(M, axis=1)
        bound = psi_bound if psi_bound is not None else _default_bound(ps)
        return cls(grid, tg, ups, ph, ch, ps, bound)

    @classmethod
    def from_functions(cls, grid: ActionGrid, time_grid, upsilon: Optional[Callable] = None,
                       phi: Optional[Callable] = None, chi: Optional[Callable] = None,
                       psi: Optional[Callable] = None, d: int = 1,
                       psi_bound: Optional[float] = None) -> "CoefficientModel":
        """Sample deterministic callables ``f(t, u)`` at the left knots.

        ``f`` receives ``t`` of shape (M, 1) and the grid points ``u`` and
        must broadcast to (M, G), or (M, G, d) for ``chi``/``psi``.
        """
        tg = np.asarray(time_grid, dtype=float)
        M, G = tg.size - 1, grid.count
        t = tg[:-1, None]
        u = grid.points

        def sample(f, vector):
            if f is None:
                return np.zeros((1, M, G, d) if vector else (1, M, G))
            v = np.asarray(f(t, u), dtype=float)
            if vector:
                if v.ndim == 2:
                    v = v[..., None]
                return np.broadcast_to(v, (M, G, d))[None].copy()
            return np.broadcast_to(v, (M, G))[None].copy()

        ps = sample(psi, True)
        return cls(grid, tg, sample(upsilon, False), sample(phi, False), sample(chi, True), ps,
                   psi_bound if psi_bound is not None else _default_bound(ps))

    def resample(self, time_grid) -> "CoefficientModel":
        """Piecewise-constant resampling of deterministic-in-time arrays onto a new grid."""
        tg = np.asarray(time_grid, dtype=float)
        idx = _locate(self.time_grid, tg[:-1])
        if self.factors is not None:
            raise DomainError("models carrying scenario factors cannot be resampled")
        return CoefficientModel(self.grid, tg, self.upsilon[:, idx], self.phi[:, idx],
                                self.chi[:, idx], self.psi[:, idx], self.psi_bound)

    def continuity_diagnostic(self) -> float:
        """Largest absolute discrete second difference in t and in u over all coefficients."""
        worst = 0.0
        for a in (self.upsilon, self.phi, self.chi, self.psi):
            for axis in (1, 2):
                if a.shape[axis] >= 3:
                    worst = max(worst, float(np.max(np.abs(np.diff(a, n=2, axis=axis)))))
        return worst

    def exponential_moments(self, ks=(-2, -1, 1, 2)) -> np.ndarray:
        """Sample ``E exp(k int_0^T phi_t(u) dt)`` per k and atom, shape (len(ks), G)."""
        dt = np.diff(self.time_grid)
        integral = np.sum(self.phi * dt[None, :, None], axis=1)
        with np.errstate(over="ignore"):
            return np.array([np.mean(np.exp(k * integral), axis=0) for k in ks])


def _per_atom_vector(v, G: int, d: int) -> np.ndarray:
    """Scalar, per-atom (G,), per-coordinate (d,) or full (G, d) input as a (G, d) array."""
    a = np.asarray(v, dtype=float)
    if a.ndim == 1 and a.size == G and (d == 1 or a.size != d):
        a = a[:, None]
    try:
        return np.broadcast_to(a, (G, d)).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot read shape {a.shape} as per-atom vectors of size {d}") from exc


def _default_bound(psi: np.ndarray) -> float:
    b = float(np.max(np.linalg.norm(psi, axis=-1))) if psi.size else 0.0
    return b if b > 0 else 1.0


# ---------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``h(t, x, u)``, terminal cost ``g(x)`` and their x-derivatives.

    All callables are vectorised: ``h(t, x, u)`` gets a scalar ``t``, ``x`` of
    shape (S, 1) and the grid points ``u`` and returns (S, G). ``quadratic``
    holds ``(h2, h1, h0, g2, g1, g0)`` when the cost is
    ``h = h2 x^2/2 + h1 x + h0``, ``g = g2 x^2/2 + g1 x + g0``; the closed-form
    adjoint solver needs it. ``h2, h1, h0`` are then callables of ``(t, u)``.
    """

    h: Callable
    g: Callable
    h_x: Callable
    h_xx: Callable
    g_x: Callable
    g_xx: Callable
    quadratic: Optional[tuple] = None
    running: bool = True
    lipschitz: float = np.inf
    curvature: float = 1.0

    @classmethod
    def quadratic_cost(cls, h2=0.0, h1=0.0, h0=0.0, g2=0.0, g1=0.0, g0=0.0) -> "CostSpec":
        def lift(c):
            return c if callable(c) else (lambda t, u, c=float(c): np.full(np.shape(u)[:1], c))

        H2, H1, H0 = lift(h2), lift(h1), lift(h0)
        running = any(callable(c) or c != 0.0 for c in (h2, h1, h0))
        g2, g1, g0 = float(g2), float(g1), float(g0)

        def h(t, x, u):
            return 0.5 * H2(t, u) * x * x + H1(t, u) * x + H0(t, u)

        def h_x(t, x, u):
            return H2(t, u) * x + H1(t, u)

        def h_xx(t, x, u):
            return H2(t, u) + 0.0 * x

        return cls(
            h=h, h_x=h_x, h_xx=h_xx,
            g=lambda x: 0.5 * g2 * x * x + g1 * x + g0,
            g_x=lambda x: g2 * x + g1,
            g_xx=lambda x: np.full_like(np.asarray(x, dtype=float), g2),
            quadratic=(H2, H1, H0, g2, g1, g0),
            running=running,
            curvature=max(abs(g2), 1.0),
        )

    @classmethod
    def mean_variance(cls, kappa: float) -> "CostSpec":
        """Terminal cost ``(x - kappa)^2 / 2`` with no running cost."""
        kappa = float(kappa)
        base = cls.quadratic_cost(g2=1.0, g1=-kappa, g0=0.5 * kappa * kappa)
        return replace(base, g=lambda x: 0.5 * (x - kappa) ** 2, g_x=lambda x: x - kappa)


def check_derivatives(cost: CostSpec, rng: np.random.Generator, grid: ActionGrid,
                      eps: float = 1e-4, n: int = 20, scale: float = 2.0) -> float:
    """Worst central-difference mismatch of the declared derivatives, normalised by ``eps**2``."""
    worst = 0.0
    x = rng.uniform(-scale, scale, size=(n, 1))
    t = float(rng.uniform(0, 1))
    pairs = [
        (lambda y: cost.g(y), lambda y: cost.g_x(y)),
        (lambda y: cost.g_x(y), lambda y: cost.g_xx(y)),
        (lambda y: cost.h(t, y, grid.points), lambda y: cost.h_x(t, y, grid.points)),
        (lambda y: cost.h_x(t, y, grid.points), lambda y: cost.h_xx(t, y, grid.points)),
    ]
    for f, df in pairs:
        fd = (np.asarray(f(x + eps)) - np.asarray(f(x - eps))) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(fd - np.asarray(df(x))))) / eps**2)
    return worst


# ---------------------------------------------------------------------------
# control evaluation along the simulation grid


def _control_table(control, time_grid, scenarios):
    """Weights per step: (M, G), (S, M, G), or None for state feedback."""
    if getattr(control, "state_dependent", False):
        if control.time_grid.size != time_grid.size or np.any(
                np.abs(control.time_grid - time_grid) > 1e-12):
            raise DomainError("feedback control must be defined on the simulation grid")
        return None
    table = control.table(time_grid)
    if table.ndim == 3 and table.shape[0] != scenarios:
        raise DimensionError("adapted control scenario count differs from the bundle")
    return table


def _weights_at(control, table, j, x, sl):
    if table is None:
        return control.weights_given_state(j, x)
    if table.ndim == 3:
        return table[sl, j]
    return table[j]


def _weighted(arr, W):
    """Integrate per-atom coefficients ``arr`` (S|1, G[, d]) against weights ``W``.

    Atoms are visited in grid order with a plain loop so the result is the
    same for any scenario slicing; zero weights are skipped, which makes a
    Dirac control reproduce point evaluation exactly.
    """
    out = None
    if W.ndim == 1:
        for i in np.flatnonzero(W):
            term = arr[:, i] * W[i]
            out = term if out is None else out + term
        return out
    extra = (None,) * (arr.ndim - 2)
    for i in range(W.shape[1]):
        term = arr[:, i] * W[(slice(None), i) + extra]
        out = term if out is None else out + term
    return out


def _slice_leading(a, sl):
    return a if a.shape[0] == 1 else a[sl]


@dataclass
class _StepCoefficients:
    upsilon: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    psi: np.ndarray


def _step_coefficients(model, j, W, sl) -> _StepCoefficients:
    return _StepCoefficients(
        _weighted(_slice_leading(model.upsilon, sl)[:, j], W),
        _weighted(_slice_leading(model.phi, sl)[:, j], W),
        _weighted(_slice_leading(model.chi, sl)[:, j], W),
        _weighted(_slice_leading(model.psi, sl)[:, j], W),
    )


def _check_compatible(model: CoefficientModel, bundle: PathBundle):
    if model.time_grid.size != bundle.time_grid.size or np.any(
            np.abs(model.time_grid - bundle.time_grid) > 1e-12):
        raise DomainError("model and bundle must share the time grid")
    if model.d != bundle.d:
        raise DimensionError("model and bundle Brownian dimensions differ")
    if model.scenarios not in (1, bundle.scenarios):
        raise DimensionError("scenario-dependent model does not match the bundle")


def _dot(a, b):
    """Row-wise inner product over the last axis with a fixed summation order."""
    out = a[..., 0] * b[..., 0]
    for k in range(1, a.shape[-1]):
        out = out + a[..., k] * b[..., k]
    return out


def _raise_diverged(values, j, sl, what="state"):
    bad = np.flatnonzero(~np.isfinite(values))
    s = int(sl.start + bad[0]) if bad.size else None
    raise SimulationDivergedError(f"{what} diverged at scenario {s}, step {j}", scenario=s, step=j)


def simulate_euler(model: CoefficientModel, control, bundle: PathBundle,
                   threads: int = 1) -> PathBundle:
    """Explicit Euler-Maruyama paths; returns ``bundle`` with ``x`` filled."""
    _check_compatible(model, bundle)
    S, M = bundle.scenarios, bundle.steps
    table = _control_table(control, bundle.time_grid, S)
    dt = bundle.dt
    x = np.empty((S, M + 1))

    def run(sl):
        xs = np.full(sl.stop - sl.start, bundle.x0)
        x[sl, 0] = xs
        dW = bundle.dW[sl]
        for j in range(M):
            W = _weights_at(control, table, j, xs, sl)
            c = _step_coefficients(model, j, W, sl)
            drift = c.upsilon + c.phi * xs
            vol = c.chi + c.psi * xs[:, None]
            xs = xs + drift * dt[j] + _dot(vol, dW[:, j])
            if not np.all(np.isfinite(xs)):
                _raise_diverged(xs, j, sl)
            x[sl, j + 1] = xs

    _parallel(run, S, threads)
    return bundle.with_states(x)


def _exact(model, control, bundle, threads=1, states=None):
    """Integrating-factor solution; returns (x, log z), both (S, M+1)."""
    _check_compatible(model, bundle)
    S, M = bundle.scenarios, bundle.steps
    table = _control_table(control, bundle.time_grid, S)
    dt = bundle.dt
    x = np.empty((S, M + 1))
    logz = np.empty((S, M + 1))

    def run(sl):
        n = sl.stop - sl.start
        lz = np.zeros(n)
        acc = np.zeros(n)
        xs = np.full(n, bundle.x0)
        x[sl, 0] = xs
        logz[sl, 0] = lz
        dW = bundle.dW[sl]
        for j in range(M):
            xc = xs if states is None else states[sl, j]
            W = _weights_at(control, table, j, xc, sl)
            c = _step_coefficients(model, j, W, sl)
            psi = np.broadcast_to(c.psi, (n, c.psi.shape[-1]))
            chi = np.broadcast_to(c.chi, (n, c.chi.shape[-1]))
            zinv = np.exp(-lz)
            acc = acc + (c.upsilon - _dot(psi, chi)) * zinv * dt[j] + _dot(chi, dW[:, j]) * zinv
            lz = lz + (c.phi - 0.5 * _dot(psi, psi)) * dt[j] + _dot(psi, dW[:, j])
            if np.any(np.abs(lz) > EXP_GUARD) or not np.all(np.isfinite(lz)):
                bad = np.where(np.isfinite(lz), np.abs(lz) > EXP_GUARD, True)
                s = int(sl.start + np.flatnonzero(bad)[0])
                raise SimulationDivergedError(
                    f"exponent overflow at scenario {s}, step {j}", scenario=s, step=j)
            xs = np.exp(lz) * (bundle.x0 + acc)
            if not np.all(np.isfinite(xs)):
                _raise_diverged(xs, j, sl)
            x[sl, j + 1] = xs
            logz[sl, j + 1] = lz

    _parallel(run, S, threads)
    return x, logz


def simulate_exact(model: CoefficientModel, control, bundle: PathBundle,
                   threads: int = 1) -> PathBundle:
    """State from the explicit integrating-factor formula.

    ``z_t = exp(int (phi - |psi|^2/2) ds + int psi dB)`` and
    ``x_t = z_t (x0 + int (upsilon - psi.chi)/z ds + int chi/z dB)``, with
    left-endpoint quadrature on the bundle grid and the bundle's increments.
    """
    x, _ = _exact(model, control, bundle, threads)
    return bundle.with_states(x)


def realized_coefficients(model: CoefficientModel, control, states: PathBundle):
    """Coefficients integrated against the control along simulated paths.

    Returns arrays ``upsilon, phi`` of shape (S, M) and ``chi, psi`` of shape
    (S, M, d), broadcast over scenarios, together with the weights used at
    every step (M, G) or (S, M, G).
    """
    _check_compatible(model, states)
    S, M, d = states.scenarios, states.steps, states.d
    table = _control_table(control, states.time_grid, S)
    full = slice(0, S)
    ups = np.empty((S, M))
    phi = np.empty((S, M))
    chi = np.empty((S, M, d))
    psi = np.empty((S, M, d))
    weights = []
    for j in range(M):
        W = _weights_at(control, table, j, states.x[:, j] if states.x is not None else None, full)
        weights.append(W)
        c = _step_coefficients(model, j, W, full)
        ups[:, j] = c.upsilon
        phi[:, j] = c.phi
        chi[:, j] = np.broadcast_to(c.chi, (S, d))
        psi[:, j] = np.broadcast_to(c.psi, (S, d))
    W = np.stack(weights, axis=-2) if weights[0].ndim == 2 else np.stack(weights)
    return ups, phi, chi, psi, W


# ---------------------------------------------------------------------------
# cost evaluation and diagnostics


def cost_samples(cost: CostSpec, control, states: PathBundle) -> np.ndarray:
    """Per-scenario pathwise cost ``sum_j h(t_j, x_j, mu_j) dt_j + g(x_T)``."""
    if states.x is None:
        raise DomainError("states must be simulated before evaluating the cost")
    S, M = states.scenarios, states.steps
    out = np.asarray(cost.g(states.x[:, -1]), dtype=float).copy()
    if not cost.running:
        return out
    table = _control_table(control, states.time_grid, S)
    dt = states.dt
    u = np.asarray(control.grid.points)
    full = slice(0, S)
    running = np.zeros(S)
    for j in range(M):
        xj = states.x[:, j]
        W = _weights_at(control, table, j, xj, full)
        hv = np.broadcast_to(cost.h(states.time_grid[j], xj[:, None], u), (S, u.shape[0]))
        running = running + np.sum(hv * W, axis=-1) * dt[j]
    return out + running


def evaluate_cost(cost: CostSpec, control, states: PathBundle) -> tuple[float, float]:
    """Monte Carlo estimate of the cost and its standard error."""
    samples = cost_samples(cost, control, states)
    n = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), se


def diagnostics_moments(states: PathBundle, p: float = 2.0) -> float:
    """Empirical ``E sup_t |x_t|^p``."""
    return float(np.mean(np.max(np.abs(states.x), axis=1) ** p))


def diagnostics_kolmogorov(states: PathBundle, max_lag: Optional[int] = None) -> float:
    """Largest ``E (x_t - x_s)^4 / |t - s|^2`` over knot pairs (lags up to ``max_lag``)."""
    x, t = states.x, states.time_grid
    M = t.size - 1
    worst = 0.0
    for lag in range(1, (max_lag or M) + 1):
        num = np.mean((x[:, lag:] - x[:, :-lag]) ** 4, axis=0)
        worst = max(worst, float(np.max(num / (t[lag:] - t[:-lag]) ** 2)))
    return worst


def state_gap(a: PathBundle, b: PathBundle) -> tuple[float, float]:
    """``E sup_t |x_t - x'_t|^2`` between two simulations on shared increments."""
    sup = np.max((a.x - b.x) ** 2, axis=1)
    return float(sup.mean()), float(sup.std(ddof=1) / np.sqrt(sup.size)) if sup.size > 1 else 0.0
