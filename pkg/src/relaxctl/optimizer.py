"""Maximum-principle certificates and the method of successive approximations.

The certificate at knot ``t_j`` compares the H-function of the current
control with its supremum. The supremum is taken inside the control's own
class: one measure per knot for time-only controls, one per (knot, state bin)
for feedback controls and one per (knot, scenario) for adapted controls. The
adapted supremum (per scenario) and the best constant Dirac control are
reported alongside.

MSA iterates simulate, solve adjoints, maximise the H-function and move the
control a damped step towards the maximiser, backtracking whenever the
sample-average cost on the shared scenarios does not decrease.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from relaxctl.adjoint import AdjointSolution, solve_adjoints
from relaxctl.dynamics import (
    CoefficientModel,
    CostSpec,
    PathBundle,
    cost_samples,
    simulate_euler,
    simulate_exact,
)
from relaxctl.errors import DomainError
from relaxctl.hamiltonian import (
    SimplexQuadratic,
    batch_maximize,
    batch_values,
    knot_parts,
    maximize_quadratic,
)
from relaxctl.measures import AdaptedControl, FeedbackControl, RelaxedControl, chatter

GAP_FLOOR = -1e-9


@dataclass(frozen=True)
class ControlProblem:
    """A sample-average control problem on a fixed bundle of Brownian paths.

    Attributes
    ----------
    model, cost : the state coefficients and the cost.
    bundle : shared Brownian increments (common random numbers).
    scheme : ``"exact"`` or ``"euler"`` forward simulation.
    backend : adjoint backend passed to :func:`relaxctl.adjoint.solve_adjoints`.
    mode : H-function mode, ``"squared"`` or ``"integrated"``.
    """

    model: CoefficientModel
    cost: CostSpec
    bundle: PathBundle
    scheme: str = "exact"
    backend: str = "auto"
    mode: str = "squared"
    threads: int = 1

    def __post_init__(self):
        if self.scheme not in ("exact", "euler"):
            raise DomainError(f"unknown scheme {self.scheme!r}")

    def simulate(self, control) -> PathBundle:
        run = simulate_exact if self.scheme == "exact" else simulate_euler
        return run(self.model, control, self.bundle, self.threads)

    def cost_samples(self, control, states: Optional[PathBundle] = None) -> np.ndarray:
        states = states if states is not None else self.simulate(control)
        return cost_samples(self.cost, control, states)

    def on_grid(self, control):
        """Re-express a time-only control on the simulation grid."""
        if isinstance(control, RelaxedControl) and (
                control.time_grid.size != self.bundle.time_grid.size
                or np.any(control.time_grid != self.bundle.time_grid)):
            tg = self.bundle.time_grid
            return RelaxedControl(control.grid, tg, control.table(tg))
        return control


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    n = samples.size
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


@dataclass
class Certificate:
    """Maximum-principle diagnostics of one control.

    ``pointwise`` and ``integrated`` refer to the supremum within the
    control's class; ``adapted_*`` to the per-scenario supremum;
    ``vertex_gap`` to the best constant Dirac control minus the control
    itself in the time-integrated H-function.
    """

    time_grid: np.ndarray
    pointwise: np.ndarray
    pointwise_se: np.ndarray
    integrated: float
    integrated_se: float
    adapted_pointwise: np.ndarray
    adapted_integrated: float
    adapted_integrated_se: float
    vertex_gap: float
    J: float
    J_se: float
    targets: np.ndarray = field(repr=False)
    trace: list = field(default_factory=list)
    converged: bool = False
    status: str = "certified"

    @property
    def max_pointwise(self) -> float:
        return float(np.max(self.pointwise))

    @property
    def min_pointwise(self) -> float:
        return float(np.min(self.pointwise))

    def detail_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "gap_mean", "gap_stderr"])
            for t, g, s in zip(self.time_grid[:-1], self.pointwise, self.pointwise_se):
                w.writerow([repr(float(t)), repr(float(g)), repr(float(s))])

    def trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "J", "stderr", "int_gap", "max_pointwise_gap", "beta"])
            for row in self.trace:
                w.writerow([row["iter"]] + [repr(float(row[k])) for k in
                                            ("J", "stderr", "int_gap", "max_pointwise_gap", "beta")])


def _averaged_quadratic(L, z, P, mode) -> SimplexQuadratic:
    n = L.shape[0]
    if mode == "integrated":
        c = L - 0.5 * P[:, None] * np.sum(z * z, axis=2)
        return SimplexQuadratic(c.mean(axis=0), np.zeros((L.shape[1],) * 2))
    A = np.einsum("s,sgd,shd->gh", P, z, z) / n
    return SimplexQuadratic(L.mean(axis=0), 0.5 * (A + A.T))


def _knot_weights(control, j, x_j, table):
    if isinstance(control, FeedbackControl):
        return control.weights_given_state(j, x_j)
    if table.ndim == 3:
        return table[:, j]
    return table[j]


def certify(problem: ControlProblem, control, states: Optional[PathBundle] = None,
            solution: Optional[AdjointSolution] = None) -> Certificate:
    """Evaluate the maximum-principle gaps of ``control`` on the problem's paths."""
    control = problem.on_grid(control)
    model, cost = problem.model, problem.cost
    states = states if states is not None else problem.simulate(control)
    sol = solution if solution is not None else solve_adjoints(
        model, control, states, cost, problem.backend)
    J, J_se = _mean_se(cost_samples(cost, control, states))
    S, M = states.scenarios, states.steps
    dt = states.dt
    tg = states.time_grid
    u = model.grid.points
    G = model.grid.count
    table = None if isinstance(control, FeedbackControl) else control.table(tg)
    if isinstance(control, FeedbackControl):
        targets = np.empty_like(control.weights)
    elif table.ndim == 3:
        targets = None
    else:
        targets = np.empty((M, G))

    class_contrib = np.zeros(S)
    adapted_contrib = np.zeros(S)
    pointwise = np.empty(M)
    pointwise_se = np.empty(M)
    adapted = np.empty(M)
    vertex_int = np.zeros(G)
    current_int = 0.0
    for j in range(M):
        x_j = states.x[:, j]
        W = _knot_weights(control, j, x_j, table)
        h_vals = None
        if cost.running:
            h_vals = np.broadcast_to(cost.h(tg[j], x_j[:, None], u), (S, G))
        L, z = knot_parts(model, W, x_j, sol.p[:, j], sol.q[:, j], sol.P[:, j], h_vals, j)
        P = sol.P[:, j]
        current = batch_values(L, z, P, W, problem.mode)
        best, _ = batch_maximize(L, z, P, problem.mode)
        adapted_gap = np.maximum(best - current, 0.0)

        if isinstance(control, FeedbackControl):
            bins = control.bin_index(j, x_j)
            gap = np.zeros(S)
            for b in range(control.bins):
                mask = bins == b
                if not mask.any():
                    targets[j, b] = control.weights[j, b]
                    continue
                quad = _averaged_quadratic(L[mask], z[mask], P[mask], problem.mode)
                rep = maximize_quadratic(quad, start=control.weights[j, b])
                targets[j, b] = rep.nu.weights
                gap[mask] = batch_values(L[mask], z[mask], P[mask], rep.nu.weights,
                                         problem.mode) - current[mask]
        elif targets is None:
            gap = adapted_gap
        else:
            quad = _averaged_quadratic(L, z, P, problem.mode)
            rep = maximize_quadratic(quad, start=W)
            targets[j] = rep.nu.weights
            gap = batch_values(L, z, P, rep.nu.weights, problem.mode) - current

        pointwise[j], pointwise_se[j] = _mean_se(gap)
        adapted[j] = adapted_gap.mean()
        class_contrib += gap * dt[j]
        adapted_contrib += adapted_gap * dt[j]
        # both H-function modes agree on Dirac measures
        vert = L - 0.5 * P[:, None] * np.sum(z * z, axis=2)
        vertex_int += vert.mean(axis=0) * dt[j]
        current_int += current.mean() * dt[j]

    integ, integ_se = _mean_se(class_contrib)
    a_int, a_se = _mean_se(adapted_contrib)
    return Certificate(
        time_grid=tg.copy(), pointwise=pointwise, pointwise_se=pointwise_se,
        integrated=integ, integrated_se=integ_se, adapted_pointwise=adapted,
        adapted_integrated=a_int, adapted_integrated_se=a_se,
        vertex_gap=float(vertex_int.max() - current_int), J=J, J_se=J_se, targets=targets)


# ---------------------------------------------------------------------------
# MSA


@dataclass(frozen=True)
class MsaConfig:
    """Settings of the successive-approximation loop.

    ``tolerance`` bounds the integrated class gap; with ``relative=True`` the
    bound is ``tolerance * |J|``.
    """

    max_iterations: int = 50
    beta: float = 0.5
    backtrack: float = 0.5
    min_beta: float = 1e-4
    tolerance: float = 1e-3
    relative: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise DomainError("damping beta must lie in (0, 1]")
        if not 0 < self.backtrack < 1:
            raise DomainError("backtracking factor must lie in (0, 1)")
        if not self.tolerance > 0:
            raise DomainError("tolerance must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be positive")


def _step(control, targets, beta):
    if isinstance(control, FeedbackControl):
        w = (1 - beta) * control.weights + beta * targets
        return control.with_weights(w / w.sum(axis=2, keepdims=True))
    if isinstance(control, AdaptedControl):
        raise DomainError("MSA updates are defined for time-only and feedback controls")
    return control.mix(RelaxedControl(control.grid, control.time_grid, targets), beta)


def msa_optimize(problem: ControlProblem, initial, config: MsaConfig = MsaConfig()):
    """Damped successive approximations with paired backtracking.

    Returns the final control and its certificate; ``certificate.trace`` lists
    every accepted iterate and ``certificate.status`` is ``"converged"``,
    ``"stalled"`` (no descending step above ``min_beta``) or ``"max-iterations"``.
    """
    control = problem.on_grid(initial)
    states = problem.simulate(control)
    samples = cost_samples(problem.cost, control, states)
    beta = config.beta
    trace = []
    status = "max-iterations"
    for it in range(config.max_iterations + 1):
        cert = certify(problem, control, states)
        trace.append({"iter": it, "J": cert.J, "stderr": cert.J_se, "int_gap": cert.integrated,
                      "max_pointwise_gap": cert.max_pointwise, "beta": beta})
        bound = config.tolerance * (abs(cert.J) if config.relative else 1.0)
        if cert.integrated <= bound:
            status = "converged"
            break
        if it == config.max_iterations:
            break
        trial_beta = beta
        accepted = False
        while trial_beta >= config.min_beta:
            candidate = _step(control, cert.targets, trial_beta)
            cand_states = problem.simulate(candidate)
            cand_samples = cost_samples(problem.cost, candidate, cand_states)
            if np.mean(cand_samples - samples) < 0:
                control, states, samples = candidate, cand_states, cand_samples
                accepted = True
                break
            trial_beta *= config.backtrack
        if not accepted:
            status = "stalled"
            break
        beta = min(config.beta, trial_beta / config.backtrack)
    cert.trace = trace
    cert.converged = status == "converged"
    cert.status = status
    return control, cert


# ---------------------------------------------------------------------------
# near-optimality


@dataclass(frozen=True)
class NearOptimalityRow:
    k: int
    eps: float
    eps_se: float
    J: float
    J_se: float
    gap: float
    gap_se: float


def near_optimality_probe(problem: ControlProblem, relaxed: RelaxedControl, ks) -> list:
    """Chattered strict controls of ``relaxed`` with their cost excess and certificate gap.

    ``eps_k = J(strict_k) - J(relaxed)`` is estimated on shared paths; the
    gap is the integrated certificate gap of ``strict_k``.
    """
    relaxed = problem.on_grid(relaxed)
    base = cost_samples(problem.cost, relaxed, problem.simulate(relaxed))
    rows = []
    for k in ks:
        strict = problem.on_grid(chatter(relaxed, k))
        states = problem.simulate(strict)
        samples = cost_samples(problem.cost, strict, states)
        eps, eps_se = _mean_se(samples - base)
        J, J_se = _mean_se(samples)
        cert = certify(problem, strict, states)
        rows.append(NearOptimalityRow(int(k), eps, eps_se, J, J_se, cert.integrated,
                                      cert.integrated_se))
    return rows


def near_optimality_trend(rows) -> dict:
    """Trend checks on a near-optimality table.

    Reports the Spearman correlation of ``(eps_k, gap_k)``, whether the last
    gap is at most the first, and whether ``gap_k <= C eps_k^(1/3)`` with
    ``C`` fitted on the first row.
    """
    eps = np.array([r.eps for r in rows])
    gap = np.array([r.gap for r in rows])
    rho = float(stats.spearmanr(eps, gap).statistic) if len(rows) > 2 else float("nan")
    dominated = False
    C = float("nan")
    if eps[0] > 0:
        C = gap[0] / eps[0] ** (1 / 3)
        dominated = bool(np.all(gap[1:] <= C * np.maximum(eps[1:], 0) ** (1 / 3) * (1 + 1e-9)))
    return {"spearman": rho, "last_le_first": bool(gap[-1] <= gap[0]), "C": C,
            "dominated": dominated}


def rows_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "eps", "eps_stderr", "J", "J_stderr", "gap", "gap_stderr"])
        for r in rows:
            w.writerow([r.k] + [repr(float(v)) for v in (r.eps, r.eps_se, r.J, r.J_se, r.gap,
                                                         r.gap_se)])
