"""Car-following physics and the fuel-rate model shared by every module.

Implements the optimal velocity model (OVM) for human-driven vehicles,
its linearization around an equilibrium velocity, and the Akcelik-style
instantaneous fuel-rate model. All operations are pure functions of
plain floats; batched variants for the simulator live in
:mod:`platoonlab._kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class OvmParams:
    """Calibrated constants of the OVM car-following law.

    Attributes
    ----------
    kappa : float
        Driver sensitivity gain (1/s).
    v1 : float
        Desired-velocity offset (m/s).
    v2 : float
        Desired-velocity range (m/s).
    c1 : float
        Spacing gain inside the tanh (1/m).
    c2 : float
        Spacing offset inside the tanh (dimensionless).
    l_veh : float
        Vehicle length (m); headways below l_veh are bumper overlap.
    """

    kappa: float = 0.85
    v1: float = 6.75
    v2: float = 7.91
    c1: float = 0.13
    c2: float = 1.57
    l_veh: float = 5.0

    def __post_init__(self):
        if not (self.kappa > 0 and self.v2 > 0 and self.c1 > 0
                and self.l_veh > 0):
            raise ValueError(
                "OvmParams requires kappa > 0, v2 > 0, c1 > 0, l_veh > 0")


@dataclass(frozen=True)
class LinearCoeffs:
    """Coefficients of the linearized car-following law.

    alpha1 is the spacing-feedback gain (1/s^2), alpha2 the velocity
    damping (1/s), alpha3 the predecessor-velocity feedthrough (1/s).
    No sign restriction at type level; stability is checked separately.
    """

    alpha1: float
    alpha2: float
    alpha3: float

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"LinearCoeffs.{name} must be finite")


@dataclass(frozen=True)
class FuelParams:
    """Constants of the instantaneous fuel-rate model.

    Values are used exactly as calibrated, with velocity in m/s and mass
    in kg; the source table does not annotate the units of beta1 or the
    drag coefficients, so no rescaling is applied.
    """

    alpha_idle: float = 0.666   # idle fuel rate (ml/s)
    beta1: float = 0.072        # drive-power to fuel factor
    beta2: float = 0.0344       # inertial-drag factor
    mass: float = 1680.0        # vehicle mass (kg)
    d1: float = 0.269           # drag polynomial, linear term
    d2: float = 0.0171          # drag polynomial, quadratic term
    d3: float = 0.000672        # drag polynomial, cubic term

    def __post_init__(self):
        for name in ("alpha_idle", "beta1", "beta2", "mass",
                     "d1", "d2", "d3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"FuelParams.{name} must be >= 0")


def desired_velocity(params: OvmParams, headway: float) -> float:
    """Gap-dependent desired velocity of the OVM driver."""
    return params.v1 + params.v2 * math.tanh(
        params.c1 * (headway - params.l_veh) - params.c2)


def ovm_accel(params: OvmParams, headway: float, own_velocity: float,
              gain: float = 1.0) -> float:
    """OVM acceleration at the given spacing and velocity.

    gain is the per-vehicle stochastic sensitivity multiplier; 1 gives
    the deterministic model.
    """
    if not (math.isfinite(headway) and math.isfinite(own_velocity)
            and math.isfinite(gain)):
        raise ValueError("ovm_accel requires finite inputs")
    return gain * params.kappa * (desired_velocity(params, headway)
                                  - own_velocity)


def equilibrium_spacing(params: OvmParams, v_eq: float) -> float:
    """Headway at which the desired velocity equals v_eq.

    Inverts the tanh desired-velocity curve; only velocities strictly
    inside (v1 - v2, v1 + v2) have a finite spacing.
    """
    if not math.isfinite(v_eq):
        raise ValueError("equilibrium_spacing requires finite v_eq")
    lo = params.v1 - params.v2
    hi = params.v1 + params.v2
    if not lo < v_eq < hi:
        raise ValueError(
            f"v_eq={v_eq} outside the admissible open interval "
            f"({lo}, {hi})")
    return ((math.atanh((v_eq - params.v1) / params.v2) + params.c2)
            / params.c1 + params.l_veh)


def linearize(params: OvmParams, v_eq: float) -> LinearCoeffs:
    """Linearize the OVM around the equilibrium at velocity v_eq.

    alpha2 equals kappa and alpha3 is zero exactly for this model; only
    alpha1 depends on the operating point.
    """
    d_star = equilibrium_spacing(params, v_eq)
    th = math.tanh(params.c1 * (d_star - params.l_veh) - params.c2)
    alpha1 = params.kappa * params.v2 * params.c1 * (1.0 - th * th)
    return LinearCoeffs(alpha1=alpha1, alpha2=params.kappa, alpha3=0.0)


def fuel_rate(params: FuelParams, velocity: float,
              acceleration: float) -> float:
    """Instantaneous fuel rate in ml/s.

    Drive power clamps at zero (no fuel credit for braking) and the
    inertial term engages only for a > 0. Velocity is clamped at zero
    from below; the model is never evaluated in reverse.
    """
    if not (math.isfinite(velocity) and math.isfinite(acceleration)):
        raise ValueError("fuel_rate requires finite inputs")
    v = max(velocity, 0.0)
    a = acceleration
    p_t = params.d1 * v + params.d2 * v * v + params.d3 * v ** 3 \
        + params.mass * a * v
    p_t = max(p_t, 0.0)
    g = params.alpha_idle + params.beta1 * p_t
    if a > 0.0:
        g += params.beta2 * params.mass * a * a * v
    return g
