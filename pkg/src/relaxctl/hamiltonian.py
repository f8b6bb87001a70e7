"""Hamiltonian, H-function and its maximisation over measures on the action grid.

For a reference control ``mu`` with adjoints ``(p, q, P)`` the H-function of a
measure ``nu`` is

    L(nu) - 1/2 P |z(nu)|^2,   z(nu) = chi(nu) + psi(nu) x,

where ``L`` is the Hamiltonian evaluated with the shifted adjoint
``q - P (chi(mu) + psi(mu) x)``. ``L`` and ``z`` are affine in ``nu``, so the
H-function is a quadratic on the probability simplex. ``mode="integrated"``
replaces ``|z(nu)|^2`` by ``int |z(u)|^2 nu(du)``, which is affine in ``nu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from relaxctl.errors import DimensionError, DomainError
from relaxctl.measures import DiscreteMeasure

LINEAR_TOL = 1e-14
FW_TOL = 1e-10
FW_MAX_ITER = 500
MODES = ("squared", "integrated")


@dataclass(frozen=True)
class HContext:
    """Everything the H-function needs at one (time, scenario) point.

    ``upsilon, phi, h`` have shape (G,); ``chi, psi`` shape (G, d); ``q`` has
    shape (d,) and ``mu`` holds the reference weights (G,).
    """

    x: float
    mu: np.ndarray
    p: float
    q: np.ndarray
    P: float
    upsilon: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    psi: np.ndarray
    h: np.ndarray
    t_index: int = 0
    scenario: int = 0

    def __post_init__(self):
        G = self.mu.shape[0]
        if self.upsilon.shape != (G,) or self.phi.shape != (G,) or self.h.shape != (G,):
            raise DimensionError("upsilon, phi and h slices must have one entry per atom")
        if self.chi.ndim != 2 or self.chi.shape != self.psi.shape or self.chi.shape[0] != G:
            raise DimensionError("chi and psi slices must have shape (G, d)")
        if self.q.shape != (self.chi.shape[1],):
            raise DimensionError("q must have one entry per Brownian coordinate")
        for name in ("mu", "q", "upsilon", "phi", "chi", "psi", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"context field {name} is not finite")
        if not all(np.isfinite(v) for v in (self.x, self.p, self.P)):
            raise DomainError("context scalars must be finite")

    @classmethod
    def build(cls, x, mu, p, q, P, upsilon, phi, chi, psi, h, **kw) -> "HContext":
        """Convenience constructor broadcasting scalars and (G,) slices."""
        mu = mu.weights if isinstance(mu, DiscreteMeasure) else np.asarray(mu, dtype=float)
        G = mu.shape[0]
        q = np.atleast_1d(np.asarray(q, dtype=float))
        d = q.shape[0]

        def atoms(a):
            return np.broadcast_to(np.asarray(a, dtype=float), (G,)).copy()

        def vectors(a):
            a = np.asarray(a, dtype=float)
            if a.ndim == 1 and a.shape[0] == G and d == 1:
                a = a[:, None]
            return np.broadcast_to(a, (G, d)).copy()

        return cls(float(x), mu, float(p), q, float(P), atoms(upsilon), atoms(phi),
                   vectors(chi), vectors(psi), atoms(h), **kw)

    @property
    def count(self) -> int:
        return self.mu.shape[0]


def _weights(ctx: HContext, nu) -> np.ndarray:
    if isinstance(nu, DiscreteMeasure):
        w = nu.weights
    elif isinstance(nu, (int, np.integer)):
        w = np.zeros(ctx.count)
        w[int(nu)] = 1.0
    else:
        w = np.asarray(nu, dtype=float)
    if w.shape != (ctx.count,):
        raise DimensionError("measure and action grid sizes differ")
    return w


def hamiltonian_values(ctx: HContext, q: Optional[np.ndarray] = None) -> np.ndarray:
    """``H(t, x, u, p, q) = -h - p (upsilon + phi x) - q.(chi + psi x)`` for every atom."""
    q = ctx.q if q is None else q
    z = ctx.chi + ctx.psi * ctx.x
    return -ctx.h - ctx.p * (ctx.upsilon + ctx.phi * ctx.x) - z @ q


def hamiltonian_H(ctx: HContext, a) -> float:
    """Hamiltonian at an atom index or integrated against a measure."""
    return float(hamiltonian_values(ctx) @ _weights(ctx, a))


@dataclass(frozen=True)
class SimplexQuadratic:
    """``f(w) = lin.w - 1/2 w^T A w`` on the probability simplex."""

    lin: np.ndarray
    A: np.ndarray

    def value(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(self.lin @ w - 0.5 * w @ self.A @ w)

    def vertex_values(self) -> np.ndarray:
        return self.lin - 0.5 * np.diag(self.A)


def h_parts(ctx: HContext):
    """Affine part ``L`` per atom and the diffusion slices ``z`` (G, d)."""
    z = ctx.chi + ctx.psi * ctx.x
    z_mu = ctx.mu @ z
    q_shift = ctx.q - ctx.P * z_mu
    return hamiltonian_values(ctx, q_shift), z


def h_quadratic(ctx: HContext, mode: str = "squared") -> SimplexQuadratic:
    """The H-function of ``ctx`` as a quadratic on the simplex."""
    L, z = h_parts(ctx)
    if mode == "squared":
        return SimplexQuadratic(L, ctx.P * (z @ z.T))
    if mode == "integrated":
        return SimplexQuadratic(L - 0.5 * ctx.P * np.sum(z * z, axis=1), np.zeros((ctx.count,) * 2))
    raise DomainError(f"unknown H-function mode {mode!r}")


def h_function(ctx: HContext, nu, mode: str = "squared") -> float:
    """H-function value at the measure ``nu`` (or an atom index)."""
    w = _weights(ctx, nu)
    L, z = h_parts(ctx)
    if mode == "squared":
        zw = w @ z
        return float(L @ w - 0.5 * ctx.P * (zw @ zw))
    if mode == "integrated":
        return float((L - 0.5 * ctx.P * np.sum(z * z, axis=1)) @ w)
    raise DomainError(f"unknown H-function mode {mode!r}")


def h_strict(ctx: HContext, index: int, mode: str = "squared") -> float:
    """H-function restricted to the Dirac at atom ``index``."""
    return h_function(ctx, DiscreteMeasure.dirac(ctx.count, index), mode)


# ---------------------------------------------------------------------------
# maximisation


@dataclass(frozen=True)
class HMaximizerReport:
    """Result of maximising a simplex quadratic."""

    nu: DiscreteMeasure
    value: float
    vertex_value: float
    vertex_index: int
    iterations: int
    branch: str
    dual_gap: float = 0.0
    trace: tuple = field(default=(), repr=False)

    @property
    def gap_to_vertex(self) -> float:
        return self.value - self.vertex_value


def _classify(A: np.ndarray) -> str:
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale < LINEAR_TOL:
        return "linear"
    eig = np.linalg.eigvalsh(0.5 * (A + A.T))
    tol = 1e-12 * scale * A.shape[0]
    if eig[0] >= -tol:
        return "concave"
    if eig[-1] <= tol:
        return "convex"
    return "indefinite"


def _frank_wolfe(quad: SimplexQuadratic, w0: np.ndarray, tol: float, max_iter: int):
    """Away-step Frank-Wolfe with exact line search (ascent)."""
    c, A = quad.lin, quad.A
    w = w0.copy()
    Aw = A @ w
    value = float(c @ w - 0.5 * w @ Aw)
    trace = [value]
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = c - Aw
        gw = float(g @ w)
        s = int(np.argmax(g))
        gap = float(g[s] - gw)
        if gap <= tol:
            it -= 1
            break
        support = np.flatnonzero(w > 0)
        a = int(support[np.argmin(g[support])])
        away = gw - float(g[a])
        toward = gap >= away or w[a] >= 1.0
        if toward:
            d = -w.copy()
            d[s] += 1.0
            gmax, slope = 1.0, gap
        else:
            d = w.copy()
            d[a] -= 1.0
            gmax, slope = w[a] / (1.0 - w[a]), away
        curv = float(d @ (A @ d))
        gamma = gmax if curv <= 0 else min(gmax, slope / curv)
        new = w + gamma * d
        if not toward and gamma == gmax:
            new[a] = 0.0
        new[new < 0] = 0.0
        new /= new.sum()
        new_Aw = A @ new
        new_value = float(c @ new - 0.5 * new @ new_Aw)
        if new_value < value:
            break
        w, Aw, value = new, new_Aw, new_value
        trace.append(value)
    return w, value, it, max(gap, 0.0), tuple(trace)


def maximize_quadratic(quad: SimplexQuadratic, start: Optional[np.ndarray] = None,
                       tol: float = FW_TOL, max_iter: int = FW_MAX_ITER) -> HMaximizerReport:
    """Maximise ``quad`` over the simplex.

    Linear and convex objectives are maximised at a vertex (lowest index on
    ties). Concave objectives use away-step Frank-Wolfe from the better of the
    best vertex and ``start``; indefinite ones polish the best vertex the
    same way, which yields a local maximiser only.
    """
    if not (np.all(np.isfinite(quad.lin)) and np.all(np.isfinite(quad.A))):
        raise DomainError("non-finite H-function coefficients")
    G = quad.lin.size
    vv = quad.vertex_values()
    best = int(np.argmax(vv))
    vbest = float(vv[best])
    kind = _classify(quad.A)
    if kind in ("linear", "convex"):
        return HMaximizerReport(DiscreteMeasure.dirac(G, best), vbest, vbest, best, 0, "vertex")
    w0 = np.zeros(G)
    w0[best] = 1.0
    if start is not None and quad.value(start) > vbest:
        w0 = np.asarray(start, dtype=float).copy()
    w, value, it, gap, trace = _frank_wolfe(quad, w0, tol, max_iter)
    if value < vbest:
        w, value = np.eye(G)[best], vbest
    branch = "frank-wolfe" if kind == "concave" else "indefinite"
    return HMaximizerReport(DiscreteMeasure(w), value, vbest, best, it, branch, gap, trace)


def maximize_h(ctx: HContext, mode: str = "squared", start=None) -> HMaximizerReport:
    """Supremum of the H-function over probability measures on the grid."""
    return maximize_quadratic(h_quadratic(ctx, mode), start)


# ---------------------------------------------------------------------------
# batched evaluation along simulated paths


def knot_parts(model, control_weights, x, p, q, P, h_values, j: int):
    """Vectorised ``L`` (S, G) and ``z`` (S, G, d) at knot ``j`` for all scenarios.

    ``control_weights`` holds the reference weights, (G,) or (S, G);
    ``h_values`` the running cost per atom (S, G) or None.
    """
    ups = model.upsilon[:, j]
    phi = model.phi[:, j]
    z = model.chi[:, j] + model.psi[:, j] * x[:, None, None]
    W = control_weights
    z_mu = np.einsum("sgd,sg->sd", z, np.broadcast_to(W, z.shape[:2]))
    q_shift = q - P[:, None] * z_mu
    L = -p[:, None] * (ups + phi * x[:, None]) - np.einsum("sgd,sd->sg", z, q_shift)
    if h_values is not None:
        L = L - h_values
    return L, z


def batch_values(L: np.ndarray, z: np.ndarray, P: np.ndarray, W: np.ndarray,
                 mode: str = "squared") -> np.ndarray:
    """H-function of weights ``W`` (G,) or (S, G) for every scenario."""
    W = np.broadcast_to(W, L.shape)
    if mode == "squared":
        zw = np.einsum("sgd,sg->sd", z, W)
        return np.sum(L * W, axis=1) - 0.5 * P * np.sum(zw * zw, axis=1)
    return np.sum((L - 0.5 * P[:, None] * np.sum(z * z, axis=2)) * W, axis=1)


def batch_maximize(L: np.ndarray, z: np.ndarray, P: np.ndarray, mode: str = "squared"):
    """Per-scenario supremum over the simplex; returns (values, weights (S, G)).

    For a one-dimensional noise the quadratic has rank one and a maximiser
    uses at most two atoms, so every pair of atoms is checked in closed form.
    Other cases fall back to :func:`maximize_quadratic` per scenario.
    """
    S, G = L.shape
    if mode == "integrated":
        c = L - 0.5 * P[:, None] * np.sum(z * z, axis=2)
        idx = np.argmax(c, axis=1)
        return c[np.arange(S), idx], np.eye(G)[idx]
    if z.shape[2] != 1 or G > 32:
        vals = np.empty(S)
        ws = np.empty((S, G))
        for s in range(S):
            zs = z[s]
            rep = maximize_quadratic(SimplexQuadratic(L[s], P[s] * (zs @ zs.T)))
            vals[s], ws[s] = rep.value, rep.nu.weights
        return vals, ws
    zz = z[:, :, 0]
    vert = L - 0.5 * P[:, None] * zz * zz
    best_i = np.argmax(vert, axis=1)
    best = vert[np.arange(S), best_i]
    bw = np.eye(G)[best_i]
    for i in range(G):
        for k in range(i + 1, G):
            # w = lam e_i + (1 - lam) e_k
            dz = zz[:, i] - zz[:, k]
            dl = L[:, i] - L[:, k]
            curv = P * dz * dz
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(curv > 0, (dl - P * zz[:, k] * dz) / curv, -1.0)
            inner = (lam > 0) & (lam < 1)
            if not inner.any():
                continue
            lam = np.where(inner, lam, 0.0)
            zl = lam * zz[:, i] + (1 - lam) * zz[:, k]
            val = lam * L[:, i] + (1 - lam) * L[:, k] - 0.5 * P * zl * zl
            better = inner & (val > best)
            if better.any():
                best = np.where(better, val, best)
                bw[better] = 0.0
                bw[better, i] = lam[better]
                bw[better, k] = 1 - lam[better]
    return best, bw
