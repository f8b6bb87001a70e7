"""Probability measures on a finite action grid and relaxed control paths.

The action set U is represented by an :class:`ActionGrid`; a measure on U is a
weight vector over the grid points. A :class:`RelaxedControl` is a piecewise
constant path of such measures on a time grid, right-continuous, with one
measure per interval ``[t_j, t_{j+1})``. Strict controls are the Dirac-valued
special case.

Two further control representations are used by the simulator:

* :class:`AdaptedControl` holds one measure path per scenario (a realised
  adapted control), e.g. the passive bond portfolio whose weights depend on
  simulated prices.
* :class:`FeedbackControl` selects the measure from the current state through
  fixed state bins, one weight vector per (time interval, bin).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relaxctl.errors import DimensionError, DomainError

MASS_TOL = 1e-12
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class ActionGrid:
    """Finite grid standing in for the compact action set U.

    Points are stored as an array of shape ``(count,)`` when ``dim == 1`` and
    ``(count, dim)`` otherwise.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 0 or pts.size == 0:
            raise DomainError("action grid needs at least one point")
        if pts.ndim > 2:
            raise DimensionError("action grid points must be 1-d or 2-d")
        if not np.all(np.isfinite(pts)):
            raise DomainError("action grid points must be finite")
        if pts.ndim == 1:
            if np.any(np.diff(pts) <= 0):
                raise DomainError("action grid points must be strictly increasing")
        elif len(np.unique(pts, axis=0)) != len(pts):
            raise DomainError("action grid points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return 1 if self.points.ndim == 1 else int(self.points.shape[1])

    def __len__(self):
        return self.count

    @classmethod
    def uniform(cls, lo: float, hi: float, count: int) -> "ActionGrid":
        if count == 1:
            return cls(np.array([lo], dtype=float))
        return cls(np.linspace(lo, hi, count))

    def index_of(self, value, atol: float = 1e-12) -> int:
        """Index of the grid point equal to ``value`` (within ``atol``)."""
        dist = np.abs(self.points - value) if self.dim == 1 else np.linalg.norm(
            self.points - np.asarray(value), axis=1)
        i = int(np.argmin(dist))
        if dist[i] > atol:
            raise DomainError(f"{value!r} is not a grid point")
        return i

    def to_csv(self, path) -> None:
        if self.dim == 1:
            tokens = [repr(float(v)) for v in self.points]
        else:
            tokens = [":".join(repr(float(c)) for c in row) for row in self.points]
        Path(path).write_text(",".join(tokens) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ActionGrid":
        line = Path(path).read_text().strip()
        tokens = line.split(",")
        if any(":" in tok for tok in tokens):
            return cls(np.array([[float(c) for c in tok.split(":")] for tok in tokens]))
        return cls(np.array([float(tok) for tok in tokens]))


def _check_weights(w: np.ndarray, what: str = "measure") -> None:
    if np.any(~np.isfinite(w)):
        raise DomainError(f"{what} weights must be finite")
    if np.any(w < 0):
        raise DomainError(f"{what} weights must be nonnegative")
    sums = w.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > MASS_TOL):
        raise DomainError(f"{what} weights must sum to one (worst {sums.flat[np.argmax(np.abs(sums - 1))]!r})")


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure on an action grid, stored as a dense weight vector."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1:
            raise DimensionError("measure weights must be a vector")
        _check_weights(w)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, count: int, index: int) -> "DiscreteMeasure":
        w = np.zeros(count)
        w[index] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, count: int) -> "DiscreteMeasure":
        return cls(np.full(count, 1.0 / count))

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def is_dirac(self) -> bool:
        return bool(np.count_nonzero(self.weights) == 1 and self.weights.max() == 1.0)

    @property
    def atom(self) -> int:
        if not self.is_dirac:
            raise DomainError("measure is not a Dirac mass")
        return int(np.argmax(self.weights))


def _as_weights(nu) -> np.ndarray:
    return nu.weights if isinstance(nu, DiscreteMeasure) else np.asarray(nu, dtype=float)


def integrate_measure(f, nu):
    """Integrate grid values ``f`` against a measure: ``sum_i f(u_i) w_i``.

    ``f`` has one entry (scalar or vector) per grid point along its first
    axis; the result drops that axis.
    """
    w = _as_weights(nu)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[0] != w.shape[-1]:
        raise DimensionError(f"f has {f.shape[0] if f.ndim else 0} values for a grid of {w.shape[-1]} points")
    return np.tensordot(w, f, axes=([w.ndim - 1], [0]))


def _locate(time_grid: np.ndarray, times) -> np.ndarray:
    """Interval index ``j`` with ``t_j <= t < t_{j+1}`` (right-continuous)."""
    T = time_grid[-1]
    idx = np.searchsorted(time_grid, np.asarray(times) + _TIME_TOL * max(T, 1.0), side="right") - 1
    return np.clip(idx, 0, len(time_grid) - 2)


def _check_time_grid(tg: np.ndarray) -> None:
    if tg.ndim != 1 or tg.size < 2:
        raise DomainError("time grid needs at least two knots")
    if tg[0] != 0.0:
        raise DomainError("time grid must start at 0")
    if np.any(np.diff(tg) <= 0):
        raise DomainError("time grid must be strictly increasing")


@dataclass(frozen=True)
class OccupationMeasure:
    """Masses ``dt_j * w_ji`` of the product measure on (time interval x atom) cells."""

    time_grid: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        if np.any(self.masses < 0):
            raise DomainError("occupation masses must be nonnegative")
        T = self.time_grid[-1]
        if abs(self.masses.sum() - T) > 1e-10:
            raise DomainError("occupation measure total mass must equal T")

    @property
    def total(self) -> float:
        return float(self.masses.sum())


@dataclass(frozen=True)
class RelaxedControl:
    """Piecewise-constant path of probability measures on an action grid.

    Attributes
    ----------
    grid : ActionGrid
    time_grid : array (M+1,)
        Knots ``0 = t_0 < ... < t_M = T``.
    weights : array (M, G)
        Measure used on ``[t_j, t_{j+1})``.
    """

    grid: ActionGrid
    time_grid: np.ndarray
    weights: np.ndarray
    state_dependent: bool = field(default=False, init=False)

    def __post_init__(self):
        tg = np.array(self.time_grid, dtype=float)
        w = np.array(self.weights, dtype=float)
        _check_time_grid(tg)
        if w.shape != (tg.size - 1, self.grid.count):
            raise DimensionError(f"weights shape {w.shape} does not match "
                                 f"({tg.size - 1}, {self.grid.count})")
        _check_weights(w, "control")
        tg.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "time_grid", tg)
        object.__setattr__(self, "weights", w)

    # constructors
    @classmethod
    def constant(cls, grid: ActionGrid, time_grid, weights) -> "RelaxedControl":
        tg = np.asarray(time_grid, dtype=float)
        w = np.broadcast_to(np.asarray(weights, dtype=float), (tg.size - 1, grid.count))
        return cls(grid, tg, w.copy())

    @classmethod
    def dirac(cls, grid: ActionGrid, time_grid, index: int) -> "RelaxedControl":
        return cls.constant(grid, time_grid, DiscreteMeasure.dirac(grid.count, index).weights)

    @classmethod
    def from_atoms(cls, grid: ActionGrid, time_grid, atoms) -> "RelaxedControl":
        atoms = np.asarray(atoms, dtype=int)
        w = np.zeros((atoms.size, grid.count))
        w[np.arange(atoms.size), atoms] = 1.0
        return cls(grid, time_grid, w)

    # accessors
    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def steps(self) -> int:
        return self.weights.shape[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.time_grid)

    @property
    def is_strict(self) -> bool:
        return bool(np.all(np.count_nonzero(self.weights, axis=1) == 1)
                    and np.all(self.weights.max(axis=1) == 1.0))

    @property
    def atoms(self) -> np.ndarray:
        if not self.is_strict:
            raise DomainError("control is not strict")
        return np.argmax(self.weights, axis=1)

    def measure(self, j: int) -> DiscreteMeasure:
        return DiscreteMeasure(self.weights[j])

    def measure_at(self, t: float) -> DiscreteMeasure:
        return DiscreteMeasure(self.weights[int(_locate(self.time_grid, t))])

    def table(self, time_grid) -> np.ndarray:
        """Weights sampled at the left endpoints of ``time_grid`` intervals, shape (M', G)."""
        tg = np.asarray(time_grid, dtype=float)
        if abs(tg[-1] - self.T) > _TIME_TOL * max(self.T, 1.0):
            raise DomainError("control horizon differs from the simulation horizon")
        return self.weights[_locate(self.time_grid, tg[:-1])]

    def occupation(self) -> OccupationMeasure:
        return OccupationMeasure(self.time_grid, self.dt[:, None] * self.weights)

    def mix(self, other: "RelaxedControl", beta: float) -> "RelaxedControl":
        """Convex combination ``(1 - beta) * self + beta * other`` per interval."""
        if other.weights.shape != self.weights.shape or np.any(other.time_grid != self.time_grid):
            raise DimensionError("controls must share grid and time grid")
        w = (1.0 - beta) * self.weights + beta * other.weights
        return RelaxedControl(self.grid, self.time_grid, w / w.sum(axis=1, keepdims=True))

    def equivalent(self, other: "RelaxedControl", atol: float = 1e-12) -> bool:
        """True when both describe the same piecewise-constant measure path."""
        if abs(self.T - other.T) > atol or self.grid.count != other.grid.count:
            return False
        union = np.union1d(self.time_grid, other.time_grid)
        return bool(np.allclose(self.table(union), other.table(union), atol=atol, rtol=0))

    # serialization
    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"u_{i}" for i in range(self.grid.count)])
            rows = np.vstack([self.weights, self.weights[-1:]])
            for t, w in zip(self.time_grid, rows):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in w])

    @classmethod
    def from_csv(cls, path, grid: ActionGrid) -> "RelaxedControl":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[0] != "t" or len(header) != grid.count + 1:
                raise DimensionError("control CSV header does not match the grid")
            rows = np.array([[float(v) for v in row] for row in reader])
        return cls(grid, rows[:, 0], rows[:-1, 1:])


@dataclass(frozen=True)
class AdaptedControl:
    """One measure path per scenario, shape ``(S, M, G)`` on a fixed time grid."""

    grid: ActionGrid
    time_grid: np.ndarray
    weights: np.ndarray
    state_dependent: bool = field(default=False, init=False)

    def __post_init__(self):
        tg = np.asarray(self.time_grid, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        _check_time_grid(tg)
        if w.ndim != 3 or w.shape[1:] != (tg.size - 1, self.grid.count):
            raise DimensionError("adapted control weights must have shape (S, M, G)")
        _check_weights(w, "adapted control")
        object.__setattr__(self, "time_grid", tg)
        object.__setattr__(self, "weights", w)

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def scenarios(self) -> int:
        return self.weights.shape[0]

    @property
    def is_strict(self) -> bool:
        return bool(np.all(np.count_nonzero(self.weights, axis=2) == 1)
                    and np.all(self.weights.max(axis=2) == 1.0))

    def table(self, time_grid) -> np.ndarray:
        tg = np.asarray(time_grid, dtype=float)
        return self.weights[:, _locate(self.time_grid, tg[:-1])]


@dataclass(frozen=True)
class FeedbackControl:
    """Measure chosen from the state through fixed bins at each time interval.

    ``edges[j]`` holds the ``B - 1`` interior bin edges used on interval ``j``;
    ``weights[j, b]`` is the measure for bin ``b``. The time grid must match
    the simulation grid.
    """

    grid: ActionGrid
    time_grid: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    state_dependent: bool = field(default=True, init=False)

    def __post_init__(self):
        tg = np.asarray(self.time_grid, dtype=float)
        _check_time_grid(tg)
        M = tg.size - 1
        if self.weights.ndim != 3 or self.weights.shape[0] != M or self.weights.shape[2] != self.grid.count:
            raise DimensionError("feedback weights must have shape (M, B, G)")
        if self.edges.shape != (M, self.weights.shape[1] - 1):
            raise DimensionError("feedback edges must have shape (M, B - 1)")
        _check_weights(self.weights, "feedback control")
        object.__setattr__(self, "time_grid", tg)

    @property
    def T(self) -> float:
        return float(self.time_grid[-1])

    @property
    def bins(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_states(cls, control: RelaxedControl, x: np.ndarray, bins: int = 8) -> "FeedbackControl":
        """Quantile bins of the state paths ``x`` (S, M+1), seeded with ``control``."""
        M = control.steps
        qs = np.linspace(0, 1, bins + 1)[1:-1]
        edges = np.quantile(x[:, :M], qs, axis=0).T
        w = np.repeat(control.weights[:, None, :], bins, axis=1)
        return cls(control.grid, control.time_grid, edges, w)

    def bin_index(self, j: int, x) -> np.ndarray:
        return np.searchsorted(self.edges[j], np.asarray(x), side="right")

    def weights_given_state(self, j: int, x) -> np.ndarray:
        return self.weights[j][self.bin_index(j, x)]

    def with_weights(self, weights) -> "FeedbackControl":
        return FeedbackControl(self.grid, self.time_grid, self.edges, np.asarray(weights, dtype=float))


# ---------------------------------------------------------------------------
# mollification and chattering


def _cumulative(control: RelaxedControl) -> np.ndarray:
    """Knot values of ``C(t) = int_0^t mu_s ds`` per atom, shape (M+1, G)."""
    out = np.zeros((control.steps + 1, control.grid.count))
    np.cumsum(control.dt[:, None] * control.weights, axis=0, out=out[1:])
    return out


def _cumulative_at(control: RelaxedControl, C: np.ndarray, t) -> np.ndarray:
    # C is piecewise linear between knots, so interpolation is exact
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.stack([np.interp(t, control.time_grid, C[:, i]) for i in range(C.shape[1])], axis=-1)


def mollified_weights(control: RelaxedControl, k: int, t) -> np.ndarray:
    """Causal sliding average of ``control`` with window ``2**-k`` evaluated at ``t``."""
    h = 2.0 ** (-k)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    C = _cumulative(control)
    out = np.empty((t.size, control.grid.count))
    for n, tn in enumerate(t):
        if tn <= 0.0:
            out[n] = control.weights[0]
        elif tn < h:
            out[n] = _cumulative_at(control, C, tn)[0] / tn
        else:
            out[n] = (_cumulative_at(control, C, tn)[0] - _cumulative_at(control, C, tn - h)[0]) / h
    return out


def mollify_control(control: RelaxedControl, k: int) -> RelaxedControl:
    """Time-continuous approximation of a relaxed control.

    Each atom's weight is replaced by its average over the trailing window
    ``[t - 2**-k, t]`` (or ``[0, t]`` near the origin), sampled at the left
    knot of every interval so the result stays adapted. When the window is
    shorter than every time step the mollifier cannot act on the grid and the
    control is returned unchanged.
    """
    if k < 1:
        raise DomainError("k must be a positive integer")
    if 2.0 ** (-k) < control.dt.min():
        return control
    w = mollified_weights(control, k, control.time_grid[:-1])
    w = np.clip(w, 0.0, None)
    return RelaxedControl(control.grid, control.time_grid, w / w.sum(axis=1, keepdims=True))


def block_averages(control: RelaxedControl, blocks: int) -> np.ndarray:
    """Time-averaged weights over ``blocks`` equal sub-intervals of [0, T], shape (blocks, G)."""
    edges = np.linspace(0.0, control.T, blocks + 1)
    C = _cumulative_at(control, _cumulative(control), edges)
    avg = np.diff(C, axis=0) / np.diff(edges)[:, None]
    avg = np.clip(avg, 0.0, None)
    return avg / avg.sum(axis=1, keepdims=True)


def chatter(control: RelaxedControl, k: int) -> RelaxedControl:
    """Strict control whose occupation measure approximates that of ``control``.

    [0, T] is cut into ``2**k`` equal blocks. Inside each block the time is
    shared among the atoms in grid order, proportionally to the block-averaged
    weights, so every (block x atom) cell carries exactly the relaxed mass.
    """
    if k < 0:
        raise DomainError("k must be nonnegative")
    blocks = 2 ** k
    T = control.T
    edges = np.linspace(0.0, T, blocks + 1)
    avg = block_averages(control, blocks)
    starts, atoms = [], []
    sliver = 1e-14 * T
    for b in range(blocks):
        length = edges[b + 1] - edges[b]
        t = edges[b]
        cum = np.cumsum(avg[b]) * length
        cum[-1] = length
        prev = 0.0
        for i in range(control.grid.count):
            if cum[i] - prev > sliver:
                if not atoms or atoms[-1] != i:
                    starts.append(t + prev)
                    atoms.append(i)
            prev = cum[i]
    tg = np.append(np.array(starts), T)
    tg[0] = 0.0
    return RelaxedControl.from_atoms(control.grid, tg, atoms)


def occupation_on_blocks(control: RelaxedControl, blocks: int) -> np.ndarray:
    """Occupation masses aggregated over ``blocks`` equal time blocks, shape (blocks, G)."""
    edges = np.linspace(0.0, control.T, blocks + 1)
    C = _cumulative_at(control, _cumulative(control), edges)
    return np.diff(C, axis=0)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


def test_function_integral(control: RelaxedControl, g) -> float:
    """``int_0^T int_U g(t, u) mu_t(du) dt`` with 3-point Gauss-Legendre in time.

    ``g`` is called as ``g(t, u)`` with ``t`` of shape (n, 1) and ``u`` the grid
    points, and must broadcast to (n, G).
    """
    a, b = control.time_grid[:-1], control.time_grid[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    total = 0.0
    for node, weight in zip(_GL_NODES, _GL_WEIGHTS):
        t = (mid + half * node)[:, None]
        vals = np.broadcast_to(g(t, control.grid.points), control.weights.shape)
        total += float(np.sum(weight * half * np.sum(vals * control.weights, axis=1)))
    return total


test_function_integral.__test__ = False  # not a pytest test


def _strict_atoms_on(control, union: np.ndarray) -> np.ndarray:
    w = control.table(union)
    if w.ndim == 2:
        return np.argmax(w, axis=1)[None, :]
    return np.argmax(w, axis=2)


def control_distance(u, v) -> tuple[float, float]:
    """Empirical ``(P x dt)``-measure of the set where two strict controls differ.

    Either argument may be a deterministic :class:`RelaxedControl` or a
    per-scenario :class:`AdaptedControl`. Returns the scenario average of the
    Lebesgue measure of ``{t : u_t != v_t}`` and its Monte Carlo standard
    error.
    """
    for c in (u, v):
        if not c.is_strict:
            raise DomainError("control_distance is defined for strict controls only")
    if abs(u.T - v.T) > _TIME_TOL:
        raise DomainError("controls must share the horizon")
    union = np.union1d(u.time_grid, v.time_grid)
    dt = np.diff(union)
    au, av = _strict_atoms_on(u, union), _strict_atoms_on(v, union)
    per_scenario = np.sum((au != av) * dt, axis=1)
    n = per_scenario.size
    se = float(per_scenario.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(per_scenario.mean()), se
