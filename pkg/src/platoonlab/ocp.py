"""Constrained Bolza trajectory optimization for one 1+n platoon.

The leading automated vehicle is the only actuator; its followers obey the
nonlinear car-following model against whoever precedes them.  The problem
minimizes terminal state deviation (stopping-line position for the leader,
equilibrium velocity for everyone) plus total platoon fuel, subject to
headway floors, velocity and acceleration boxes, and a terminal position
box that lets the leader stop short of the line but never past it.

Solution approach: single shooting on a uniform trapezoidal grid.  The
decision variables are the leader's control nodes only; leader states
follow in closed form and follower states from a per-step implicit
trapezoid solve, so the discrete dynamics hold exactly by construction.
Path constraints (headway floors, velocity boxes, follower acceleration
boxes, the terminal position box) carry Powell-Hestenes-Rockafellar
multipliers in an augmented-Lagrangian outer loop around bound-constrained
L-BFGS-B inner iterations; the control box is a plain variable bound.
Gradients chain through the implicit steps with a per-step 2x2 adjoint
solve and are exact for the discrete problem.  The nonsmooth fuel model is
softplus-smoothed inside the NLP only.

The published plan carries the trajectory the optimized control sequence
actually produces (fine-grid RK4 re-integration sampled at the nodes) and
its reported cost is the exact, unsmoothed cost of that trajectory.  An
independent fine-grid RK4 auditor replays every candidate; only audited
plans are ever labeled ``converged``, and if the feasibility seed audits
cheaper than the optimizer's output, the seed wins.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import optimize

from . import _kernels as K
from .models import FuelParams, OvmParams, fuel_rate, ovm_accel

__all__ = [
    "OcpProblem",
    "TrajectoryPlan",
    "AuditReport",
    "SolverOptions",
    "terminal_cost",
    "running_cost",
    "solve_ocp",
    "audit_plan",
    "write_plan_csv",
]


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """One planning instance: who is where, and what the target is.

    Vehicle 0 is the controlled leader; vehicles 1..n are followers in
    predecessor order.  ``x_tar`` is the stopping line (0 in the simulator
    frame, so upstream positions are negative).
    """

    n: int
    t0: float
    tf: float
    x_init: np.ndarray
    v_init: np.ndarray
    v_star: float
    x_tar: float = 0.0
    w1: float = 1.0e5
    w2: float = 1.0e4
    v_max: float = 15.0
    a_min: float = -6.0
    a_max: float = 3.0
    d_safe: float = 2.0
    x0_max: float = 10.0
    ovm: OvmParams = field(default_factory=OvmParams)
    fuel: FuelParams = field(default_factory=FuelParams)

    def __post_init__(self):
        object.__setattr__(self, "x_init", np.asarray(self.x_init, dtype=float).copy())
        object.__setattr__(self, "v_init", np.asarray(self.v_init, dtype=float).copy())
        if self.n < 0:
            raise ValueError(f"n must be >= 0, got {self.n}")
        if self.x_init.shape != (self.n + 1,) or self.v_init.shape != (self.n + 1,):
            raise ValueError(
                f"x_init/v_init must have shape ({self.n + 1},), got "
                f"{self.x_init.shape} and {self.v_init.shape}"
            )
        if not (np.all(np.isfinite(self.x_init)) and np.all(np.isfinite(self.v_init))):
            raise ValueError("initial state must be finite")
        if not self.tf > self.t0:
            raise ValueError(f"need tf > t0, got [{self.t0}, {self.tf}]")
        if not (self.a_min < 0.0 < self.a_max):
            raise ValueError(f"need a_min < 0 < a_max, got [{self.a_min}, {self.a_max}]")
        if self.v_max < 0.0:
            raise ValueError(f"v_max must be >= 0, got {self.v_max}")
        if not self.d_safe > 0.0:
            raise ValueError(f"d_safe must be positive, got {self.d_safe}")
        if not self.x0_max > 0.0:
            raise ValueError(f"x0_max must be positive, got {self.x0_max}")
        if self.n > 0:
            gaps = self.x_init[:-1] - self.x_init[1:] - self.ovm.l_veh
            if not np.all(gaps > self.d_safe):
                raise ValueError(
                    f"initial bumper gaps must exceed d_safe={self.d_safe}, "
                    f"got min {gaps.min():.3f}"
                )

    @property
    def horizon(self) -> float:
        return self.tf - self.t0


@dataclass(frozen=True)
class AuditReport:
    """Outcome of replaying a plan's controls on a finer grid.

    All violation fields are nonnegative magnitudes in natural units
    (m, m/s, m/s^2); ``ok`` means every one is within ``tol``.
    """

    ok: bool
    headway_violation: float
    velocity_violation: float
    follower_accel_violation: float
    control_violation: float
    terminal_violation: float
    refine: int
    tol: float

    @property
    def worst(self) -> float:
        return max(
            self.headway_violation,
            self.velocity_violation,
            self.follower_accel_violation,
            self.control_violation,
            self.terminal_violation,
        )


@dataclass(frozen=True, eq=False)
class TrajectoryPlan:
    """A solved platoon trajectory on a uniform time grid.

    ``x``/``v`` have shape (n+1, N) with vehicle 0 the leader; they are the
    trajectory the control sequence actually produces, integrated on a
    10x finer RK4 grid and sampled at the nodes (exact for the leader;
    follower error is the fine integrator's, far below the transcription
    step), so transcription residuals at the nodes are bounded by the
    trapezoid truncation error O(h^2) and honesty re-simulation agrees to
    fine-grid accuracy.  ``cost`` is the exact (unsmoothed) objective of
    this trajectory.
    """

    times: np.ndarray
    u: np.ndarray
    x: np.ndarray
    v: np.ndarray
    cost: float
    solver_status: str
    terminal_cost_value: float
    fuel_cost_value: float
    audit: Optional[AuditReport] = None

    @property
    def states(self) -> np.ndarray:
        """Per-node kinematics, shape (n+1, 2, N): [:, 0] = x, [:, 1] = v."""
        return np.stack([self.x, self.v], axis=1)

    @property
    def n(self) -> int:
        return self.x.shape[0] - 1


@dataclass(frozen=True)
class SolverOptions:
    """Tunables for :func:`solve_ocp`; defaults fit the 300 m approach.

    The margin fields tighten constraints inside the NLP so that the
    published plan still satisfies the true constraints after exact
    re-integration (discretization shifts states by a few centimeters);
    they are bumped automatically when an audit fails.
    """

    margin_headway: float = 0.05
    margin_velocity: float = 0.02
    margin_accel: float = 0.02
    margin_terminal: float = 0.01
    seed_shortfall: float = 0.3
    seed_ramp: float = 0.6
    smooth_width: float = 1.0e-2
    in_tol: float = 2.0e-3
    rho0: float = 1.0e4
    rho_growth: float = 10.0
    rho_max: float = 1.0e8
    max_outer: int = 8
    inner_maxiter: int = 300
    first_inner_maxiter: int = 600
    audit_refine: int = 10
    audit_tol: float = 2.5e-3
    margin_retries: int = 2


def terminal_cost(x0_tf, v_tf, x_tar: float, v_star: float, w1: float, w2: float) -> float:
    """Quadratic terminal deviation: leader position plus every velocity."""
    v_tf = np.asarray(v_tf, dtype=float)
    ex = float(x0_tf) - x_tar
    return w1 * ex * ex + w2 * float(np.sum((v_tf - v_star) ** 2))


def running_cost(x, v, u: float, ovm: OvmParams, fuel: FuelParams) -> float:
    """Instantaneous platoon fuel rate [ml/s] at one state.

    The leader burns at its commanded acceleration ``u``; each follower at
    the acceleration the nonlinear car-following model assigns it.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    total = fuel_rate(fuel, v[0], u)
    for i in range(1, x.size):
        a_i = ovm_accel(ovm, x[i - 1] - x[i], v[i])
        total += fuel_rate(fuel, v[i], a_i)
    return total


# ---------------------------------------------------------------------------
# internals

def _integrate_exact(problem: OcpProblem, u: np.ndarray, h: float,
                     refine: int):
    """States of the control sequence at the plan nodes, integrated on a
    ``refine``-times finer RK4 grid (exact for the leader, whose dynamics
    are polynomial under piecewise-linear control)."""
    p = problem.ovm
    xs, vs = K.integrate_platoon_fine(
        u, h, refine, problem.x_init, problem.v_init,
        p.kappa, p.v1, p.v2, p.c1, p.c2, p.l_veh,
    )
    return np.ascontiguousarray(xs[:, ::refine]), \
        np.ascontiguousarray(vs[:, ::refine])


def _exact_cost(problem: OcpProblem, x: np.ndarray, v: np.ndarray,
                u: np.ndarray, h: float):
    """(total, terminal, fuel) of a trajectory under the unsmoothed model."""
    p, f = problem.ovm, problem.fuel
    facc = np.empty_like(v)
    facc[0] = u
    if problem.n > 0:
        gaps = x[:-1] - x[1:]
        facc[1:] = K.ovm_accel_vec(
            p.kappa, p.v1, p.v2, p.c1, p.c2, p.l_veh, gaps, v[1:], 1.0
        )
    rates = K.fuel_rate_vec(
        f.alpha_idle, f.beta1, f.beta2, f.mass, f.d1, f.d2, f.d3, v, facc
    )
    wq = np.full(u.shape[0], h)
    wq[0] = 0.5 * h
    wq[-1] = 0.5 * h
    fuel_cost = float(np.sum(rates * wq))
    term = terminal_cost(
        x[0, -1], v[:, -1], problem.x_tar, problem.v_star, problem.w1, problem.w2
    )
    return term + fuel_cost, term, fuel_cost


def _pack_par(problem: OcpProblem, h: float, opt: SolverOptions,
              margins, rho: float) -> np.ndarray:
    p, f = problem.ovm, problem.fuel
    par = np.zeros(K.PAR_LEN)
    par[K.P_H] = h
    par[K.P_KAPPA] = p.kappa
    par[K.P_V1] = p.v1
    par[K.P_V2] = p.v2
    par[K.P_C1] = p.c1
    par[K.P_C2] = p.c2
    par[K.P_LVEH] = p.l_veh
    par[K.P_FALPHA] = f.alpha_idle
    par[K.P_B1] = f.beta1
    par[K.P_B2] = f.beta2
    par[K.P_MASS] = f.mass
    par[K.P_D1] = f.d1
    par[K.P_D2] = f.d2
    par[K.P_D3] = f.d3
    par[K.P_XTAR] = problem.x_tar
    par[K.P_VSTAR] = problem.v_star
    par[K.P_W1] = problem.w1
    par[K.P_W2] = problem.w2
    par[K.P_DMIN] = problem.d_safe + p.l_veh + margins[0]
    par[K.P_ALOF] = problem.a_min + margins[2]
    par[K.P_AHIF] = problem.a_max - margins[2]
    par[K.P_WS] = opt.smooth_width
    par[K.P_RHO] = rho
    par[K.P_VCAP] = max(problem.v_max - margins[1], 0.0)
    par[K.P_TLO] = problem.x_tar - problem.x0_max + margins[3]
    par[K.P_THI] = problem.x_tar - margins[3]
    par[K.P_X0MAX] = problem.x0_max
    return par


def _seed_controls(problem: OcpProblem, nn: int, h: float,
                   opt: SolverOptions) -> np.ndarray:
    """Ramp/cruise/ramp control hitting (x_aim, v_star), boxed and v-safe.

    Cruise speed is solved by bisection on the distance covered; when the
    two ramps alone exceed the horizon they are compressed to fit.
    """
    T = problem.horizon
    v0 = problem.v_init[0]
    vs = problem.v_star
    ar = opt.seed_ramp
    x_aim = problem.x_tar - max(opt.margin_terminal, opt.seed_shortfall)
    D = x_aim - problem.x_init[0]
    vcap = max(problem.v_max - opt.margin_velocity, 0.0)

    def profile(vc: float):
        t1 = abs(vc - v0) / ar
        t3 = abs(vs - vc) / ar
        if t1 + t3 > T:
            s = T / (t1 + t3)
            t1 *= s
            t3 *= s
        return t1, T - t1 - t3, t3

    def dist(vc: float) -> float:
        t1, t2, t3 = profile(vc)
        return 0.5 * (v0 + vc) * t1 + vc * t2 + 0.5 * (vc + vs) * t3

    lo, hi = 0.0, vcap
    if dist(lo) >= D:
        vc = lo
    elif dist(hi) <= D:
        vc = hi
    else:
        for _ in range(80):
            vc = 0.5 * (lo + hi)
            if dist(vc) < D:
                lo = vc
            else:
                hi = vc
        vc = 0.5 * (lo + hi)

    t1, t2, t3 = profile(vc)
    a1 = (vc - v0) / t1 if t1 > 1e-12 else 0.0
    a3 = (vs - vc) / t3 if t3 > 1e-12 else 0.0
    t = np.arange(nn) * h
    u = np.where(t < t1 - 1e-12, a1, np.where(t < t1 + t2 - 1e-12, 0.0, a3))
    u = np.clip(u, problem.a_min, problem.a_max)

    # forward pass keeping the trapezoid velocity inside [0, vcap]
    v = v0
    for k in range(nn - 1):
        hi_k = 2.0 * (vcap - v) / h - u[k]
        lo_k = 2.0 * (0.0 - v) / h - u[k]
        u[k + 1] = min(max(u[k + 1], lo_k), hi_k)
        u[k + 1] = min(max(u[k + 1], problem.a_min), problem.a_max)
        v = v + 0.5 * h * (u[k] + u[k + 1])
    return u


def _max_advance(v0: float, T: float, a_max: float, v_max: float) -> float:
    t1 = max(0.0, (v_max - v0) / a_max)
    if t1 >= T:
        return v0 * T + 0.5 * a_max * T * T
    return 0.5 * (v0 + v_max) * t1 + v_max * (T - t1)


def _min_advance(v0: float, T: float, brake: float) -> float:
    t2 = v0 / brake
    if t2 >= T:
        return v0 * T - 0.5 * brake * T * T
    return v0 * v0 / (2.0 * brake)  # stops, then stands


def _alm(problem: OcpProblem, nn: int, h: float, opt: SolverOptions,
         margins, u0: np.ndarray):
    """Augmented-Lagrangian outer loop in control space; returns (u, feas)."""
    n = problem.n
    m1 = nn - 1
    n_in = 3 * n * m1 + 2 * (n + 1) * m1 + 4
    mu = np.zeros(n_in)
    # warm-start the stop-line face multipliers at a binding magnitude
    # (the terminal quadratic pulls straight into the near face; an
    # inactive face sheds its multiplier in one update)
    mu[n_in - 4] = 2.0 * problem.w1 * margins[3]
    mu[n_in - 2] = 2.0 * problem.w1 * margins[3]
    rho = opt.rho0
    bounds = optimize.Bounds(np.full(nn, problem.a_min),
                             np.full(nn, problem.a_max))
    u = np.clip(u0, problem.a_min, problem.a_max)
    xi = problem.x_init
    vi = problem.v_init
    feas = math.inf
    prev = math.inf
    for outer in range(opt.max_outer):
        par = _pack_par(problem, h, opt, margins, rho)

        def al_fun(uu):
            val, gu, _, _, _ = K.ocp_shoot_value_grad(uu, mu, par, xi, vi)
            return val, gu

        maxiter = opt.first_inner_maxiter if outer == 0 else opt.inner_maxiter
        res = optimize.minimize(
            al_fun, u, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": maxiter, "maxcor": 30,
                     "ftol": 1e-14, "gtol": 1e-7},
        )
        u = res.x
        _, _, gin, _, _ = K.ocp_shoot_value_grad(u, mu, par, xi, vi)
        feas = float(max(0.0, -np.min(gin)))
        if feas <= opt.in_tol:
            break
        mu = np.maximum(0.0, mu - rho * gin)
        if feas > 0.25 * prev:
            rho = min(rho * opt.rho_growth, opt.rho_max)
        prev = feas
    return u, feas


def _finish(problem: OcpProblem, u: np.ndarray, nn: int, h: float,
            status: str, audit: Optional[AuditReport],
            refine: int = 10) -> TrajectoryPlan:
    x, v = _integrate_exact(problem, u, h, refine)
    total, term, fuel_cost = _exact_cost(problem, x, v, u, h)
    times = problem.t0 + h * np.arange(nn)
    return TrajectoryPlan(
        times=times, u=u.copy(), x=x, v=v, cost=total, solver_status=status,
        terminal_cost_value=term, fuel_cost_value=fuel_cost, audit=audit,
    )


def audit_plan(problem: OcpProblem, plan: TrajectoryPlan,
               refine: int = 10, tol: float = 5e-3) -> AuditReport:
    """Replay the plan's controls on a ``refine``-times finer RK4 grid and
    re-check every path and terminal constraint against the problem.

    Independent of the transcription: starts from the problem's initial
    state, interpolates the control linearly, integrates followers with
    the unclamped car-following model.  The initial node is given data and
    is not judged.
    """
    if refine < 1:
        raise ValueError("refine must be >= 1")
    h = float(plan.times[1] - plan.times[0])
    p = problem.ovm
    xs, vs = K.integrate_platoon_fine(
        plan.u, h, refine, problem.x_init, problem.v_init,
        p.kappa, p.v1, p.v2, p.c1, p.c2, p.l_veh,
    )
    floor = problem.d_safe + p.l_veh
    if problem.n > 0:
        gaps = xs[:-1, 1:] - xs[1:, 1:]
        head_v = float(max(0.0, np.max(floor - gaps)))
        facc = K.ovm_accel_vec(
            p.kappa, p.v1, p.v2, p.c1, p.c2, p.l_veh, gaps, vs[1:, 1:], 1.0
        )
        acc_v = float(max(0.0, np.max(facc - problem.a_max),
                          np.max(problem.a_min - facc)))
    else:
        head_v = 0.0
        acc_v = 0.0
    vel_v = float(max(0.0, np.max(vs[:, 1:] - problem.v_max),
                      np.max(-vs[:, 1:])))
    ctl_v = float(max(0.0, np.max(plan.u - problem.a_max),
                      np.max(problem.a_min - plan.u)))
    e = problem.x_tar - xs[0, -1]
    term_v = float(max(0.0, -e, e - problem.x0_max))
    worst = max(head_v, vel_v, acc_v, ctl_v, term_v)
    return AuditReport(
        ok=bool(worst <= tol),
        headway_violation=head_v,
        velocity_violation=vel_v,
        follower_accel_violation=acc_v,
        control_violation=ctl_v,
        terminal_violation=term_v,
        refine=refine,
        tol=tol,
    )


def solve_ocp(problem: OcpProblem, transcription_nodes: int = 60,
              options: Optional[SolverOptions] = None) -> TrajectoryPlan:
    """Solve one platoon trajectory problem.

    Returns a plan whose ``solver_status`` is ``converged`` only when the
    internal fine-grid audit passed (at a tolerance stricter than the
    public 5e-3 contract); ``infeasible`` when reachability prechecks show
    no control can satisfy the terminal box; ``max-iter`` otherwise.  The
    returned cost never exceeds the feasibility seed's cost when that seed
    itself audits as feasible.
    """
    opt = options if options is not None else SolverOptions()
    nn = int(transcription_nodes)
    if nn < 10:
        raise ValueError(f"transcription_nodes must be >= 10, got {nn}")
    T = problem.horizon
    h = T / (nn - 1)

    # reachability prechecks: terminal box attainable at all?
    D = problem.x_tar - problem.x_init[0]
    v0 = problem.v_init[0]
    reach = _max_advance(v0, T, problem.a_max, problem.v_max)
    closest = _min_advance(v0, T, -problem.a_min)
    if reach < D - problem.x0_max - 1e-9 or closest > D + 1e-9:
        u0 = np.zeros(nn)
        plan = _finish(problem, u0, nn, h, "infeasible", None,
                       opt.audit_refine)
        return replace(plan, cost=math.inf)

    margins = [opt.margin_headway, opt.margin_velocity,
               opt.margin_accel, opt.margin_terminal]

    # audited incumbents: the feasibility seed and the zero-control coast
    u_seed = _seed_controls(problem, nn, h, opt)
    incumbent = None
    fallback = None  # least-violating candidate, for honest max-iter output
    for u_c in (u_seed, np.zeros(nn)):
        cand = _finish(problem, u_c, nn, h, "seed", None,
                       opt.audit_refine)
        rep = audit_plan(problem, cand, opt.audit_refine, opt.audit_tol)
        cand = replace(cand, audit=rep)
        if rep.ok and (incumbent is None or cand.cost < incumbent.cost):
            incumbent = cand
        if fallback is None or rep.worst < fallback.audit.worst:
            fallback = cand

    u_cur = u_seed
    solution = None
    for attempt in range(opt.margin_retries + 1):
        u_cur, feas_in = _alm(problem, nn, h, opt, margins, u_cur)
        cand = _finish(problem, u_cur.copy(), nn, h, "candidate", None,
                       opt.audit_refine)
        rep = audit_plan(problem, cand, opt.audit_refine, opt.audit_tol)
        cand = replace(cand, audit=rep)
        if rep.worst < fallback.audit.worst:
            fallback = cand
        if rep.ok:
            solution = cand
            break
        # widen whatever margin the audit flagged and retry warm
        bump = 1.5 * rep.worst + 0.01
        if rep.headway_violation > 0:
            margins[0] += bump
        if rep.velocity_violation > 0:
            margins[1] += bump
        if rep.follower_accel_violation > 0:
            margins[2] += bump
        if rep.terminal_violation > 0:
            margins[3] += bump

    if solution is not None:
        best = solution
        if incumbent is not None and incumbent.cost < best.cost:
            best = incumbent
        return replace(best, solver_status="converged")
    if incumbent is not None:
        return replace(incumbent, solver_status="converged")
    return replace(fallback, solver_status="max-iter")


def write_plan_csv(plan: TrajectoryPlan, fh: io.TextIOBase) -> None:
    """Plan as CSV: summary comment, header, then one row per node."""
    audit_state = "none"
    if plan.audit is not None:
        audit_state = "ok" if plan.audit.ok else "violated"
    fh.write(
        f"# cost={plan.cost:.6f} status={plan.solver_status} "
        f"audit={audit_state}\n"
    )
    nveh = plan.x.shape[0]
    cols = ["t", "u"]
    for i in range(nveh):
        cols += [f"x_{i}", f"v_{i}"]
    fh.write(",".join(cols) + "\n")
    for k in range(plan.times.size):
        row = [f"{plan.times[k]:.6f}", f"{plan.u[k]:.6f}"]
        for i in range(nveh):
            row += [f"{plan.x[i, k]:.6f}", f"{plan.v[i, k]:.6f}"]
        fh.write(",".join(row) + "\n")
