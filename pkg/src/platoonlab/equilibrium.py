"""Optimal equilibrium cruise state for green-phase throughput.

At a steady car-following equilibrium every vehicle moves at the same
velocity v with the spacing d(v) that makes the OVM acceleration vanish.
The number of vehicles a green phase of length ``t_green`` can discharge at
that equilibrium is ``v * t_green / d(v)``, so the best terminal state for a
platoon is the v that maximizes the flow ratio ``v / d(v)``.  The maximizer
depends only on the car-following parameters, never on the signal timing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .models import OvmParams

__all__ = ["EquilibriumSolution", "solve_vstar"]

# Objective spread below which the flow ratio is treated as flat (degenerate).
_FLAT_TOL = 1e-9


@dataclass(frozen=True)
class EquilibriumSolution:
    """Throughput-optimal equilibrium for a given green duration.

    Attributes:
        v_star: optimal equilibrium velocity [m/s].
        d_star: equilibrium (front-to-front) spacing at ``v_star`` [m].
        f_star: flow ratio ``v_star / d_star`` [veh/s].
        n_max: real-valued passing count ``v_star * t_green / d_star``.
            Flooring to an integer platoon size is left to the caller.
        t_green: green duration the count was evaluated for [s].
        degenerate: True when the flow ratio was flat over the whole
            admissible interval and ``v_star`` is just its midpoint.
    """

    v_star: float
    d_star: float
    f_star: float
    n_max: float
    t_green: float
    degenerate: bool = False


def _spacing_for(params: OvmParams) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized equilibrium spacing; NaN outside the invertible domain."""
    v1, v2, c1, c2, lveh = params.v1, params.v2, params.c1, params.c2, params.l_veh

    def spacing(v):
        r = (np.asarray(v, dtype=float) - v1) / v2
        with np.errstate(invalid="ignore", divide="ignore"):
            return (np.arctanh(r) + c2) / c1 + lveh

    return spacing


def solve_vstar(
    params: OvmParams,
    t_green: float,
    grid_step: float = 0.001,
    *,
    v_max: float = 15.0,
    spacing_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> EquilibriumSolution:
    """Maximize the equilibrium flow ratio v / d(v).

    The admissible velocities are the open interval where the desired
    velocity map is invertible, (v1 - v2, v1 + v2), intersected with
    [0, v_max].  A uniform grid scan at ``grid_step`` locates the best
    cell, then a bounded golden-section/parabolic search refines the
    maximizer inside that cell.  Velocities whose spacing is not finite or
    does not exceed the vehicle length are excluded: d <= l_veh would mean
    overlapping vehicles, and the ratio spikes meaninglessly as d -> 0.

    Args:
        params: car-following parameters defining d(v).
        t_green: green duration used for the passing count [s].
        grid_step: scan resolution [m/s].
        v_max: scenario speed limit capping the search window [m/s].
        spacing_fn: override for d(v) (testing hook); defaults to the OVM
            equilibrium spacing of ``params``.

    Raises:
        ValueError: non-positive ``t_green``/``grid_step``, an empty
            admissible interval, or a spacing map with no valid points.
    """
    if not t_green > 0.0:
        raise ValueError(f"t_green must be positive, got {t_green}")
    if not grid_step > 0.0:
        raise ValueError(f"grid_step must be positive, got {grid_step}")

    spacing = spacing_fn if spacing_fn is not None else _spacing_for(params)

    lo = max(0.0, params.v1 - params.v2)
    hi = min(float(v_max), params.v1 + params.v2)
    if not hi > lo:
        raise ValueError(
            f"empty admissible velocity interval: "
            f"max(0, v1-v2)={lo:.6g} >= min(v_max, v1+v2)={hi:.6g}"
        )

    grid = np.arange(lo, hi, grid_step)
    grid = np.append(grid, hi)
    d_grid = spacing(grid)
    feasible = np.isfinite(d_grid) & (d_grid > params.l_veh)
    with np.errstate(invalid="ignore", divide="ignore"):
        f_grid = np.where(feasible, grid / d_grid, -np.inf)
    valid = np.isfinite(f_grid)
    if valid.sum() < 2:
        raise ValueError("flow ratio undefined on the admissible interval")

    spread = f_grid[valid].max() - f_grid[valid].min()
    if spread <= _FLAT_TOL * max(1.0, abs(f_grid[valid].max())):
        v_star = 0.5 * (lo + hi)
        d_star = float(spacing(v_star))
        f_star = v_star / d_star
        return EquilibriumSolution(
            v_star=v_star,
            d_star=d_star,
            f_star=f_star,
            n_max=f_star * t_green,
            t_green=float(t_green),
            degenerate=True,
        )

    best = int(np.argmax(f_grid))
    bracket_lo = grid[max(best - 1, 0)]
    bracket_hi = grid[min(best + 1, grid.size - 1)]

    def neg_flow(v: float) -> float:
        d = float(spacing(v))
        if not np.isfinite(d) or d <= params.l_veh:
            return 1e18  # finite penalty keeps the parabolic steps sane
        return -v / d

    res = optimize.minimize_scalar(
        neg_flow,
        bounds=(bracket_lo, bracket_hi),
        method="bounded",
        options={"xatol": 1e-10},
    )
    v_star = float(grid[best])
    f_star = float(f_grid[best])
    if res.success and np.isfinite(res.fun) and -res.fun >= f_star:
        v_star = float(res.x)
        f_star = float(-res.fun)

    d_star = float(spacing(v_star))
    return EquilibriumSolution(
        v_star=v_star,
        d_star=d_star,
        f_star=f_star,
        n_max=f_star * t_green,
        t_green=float(t_green),
        degenerate=False,
    )
