"""Small reference problems with known answers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from relaxctl.dynamics import CoefficientModel, CostSpec
from relaxctl.measures import ActionGrid, RelaxedControl


@dataclass(frozen=True)
class Instance:
    """Model, cost and reference control of a toy problem."""

    model: CoefficientModel
    cost: CostSpec
    x0: float
    reference: RelaxedControl
    optimum: float


def gbm(phi: float = 0.05, psi: float = 0.2, x0: float = 1.0, T: float = 1.0, M: int = 64,
        kappa: float | None = None) -> Instance:
    """Geometric Brownian motion with a single action and a mean-variance cost.

    ``kappa`` defaults to the mean terminal state, so the optimum is the
    terminal variance ``x0^2 e^{2 phi T}(e^{psi^2 T} - 1) / 2``.
    """
    tg = np.linspace(0.0, T, M + 1)
    grid = ActionGrid(np.array([0.0]))
    model = CoefficientModel.constant(grid, tg, phi=phi, psi=psi)
    kappa = x0 * np.exp(phi * T) if kappa is None else kappa
    var = 0.5 * x0**2 * np.exp(2 * phi * T) * np.expm1(psi**2 * T)
    return Instance(model, CostSpec.mean_variance(kappa), x0, RelaxedControl.dirac(grid, tg, 0), var)


def diffusion_gap(T: float = 1.0, M: int = 64) -> Instance:
    """Two actions steering the volatility to ``-x`` or ``+x``.

    ``dx = psi(u) x dB`` with ``psi = (-1, +1)``, ``x0 = 1`` and terminal cost
    ``(x - 1)^2 / 2``. The half/half measure removes the noise, so its cost is
    0, while every strict control has cost ``(e^T - 1) / 2``.
    """
    tg = np.linspace(0.0, T, M + 1)
    grid = ActionGrid(np.array([-1.0, 1.0]))
    model = CoefficientModel.constant(grid, tg, psi=[-1.0, 1.0])
    ref = RelaxedControl.constant(grid, tg, [0.5, 0.5])
    return Instance(model, CostSpec.mean_variance(1.0), 1.0, ref, 0.0)


def drift_chatter(T: float = 1.0, M: int = 512) -> Instance:
    """Bang-bang drift around a quadratic running cost.

    ``dx = u dt + dB`` with ``u in {-1, +1}``, ``x0 = 0`` and running cost
    ``x^2 / 2``. The half/half measure has zero drift and cost ``T^2 / 4``,
    which strict controls approach only by switching ever faster.
    """
    tg = np.linspace(0.0, T, M + 1)
    grid = ActionGrid(np.array([-1.0, 1.0]))
    model = CoefficientModel.constant(grid, tg, upsilon=[-1.0, 1.0], chi=1.0)
    ref = RelaxedControl.constant(grid, tg, [0.5, 0.5])
    return Instance(model, CostSpec.quadratic_cost(h2=1.0), 0.0, ref, 0.25 * T * T)
