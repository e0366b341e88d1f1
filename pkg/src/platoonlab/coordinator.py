"""Central decision layer for signalized-intersection platooning.

Implements the cloud side of the hierarchy: fixed-time signal bookkeeping,
green-window selection (with the slacked velocity cap used by the platoon
controller), shockwave-based distance adjustment for queues, platoon
partitioning, the four-state event-triggered FSM that dispatches trajectory
optimizations, and the PCC+ single-vehicle benchmark controller.

Geometry convention: the stop line sits at x = 0 and vehicles approach from
negative x, so the distance to the line is D = -x.  The control zone spans
[-control_zone, 0) and the observation zone lies upstream of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .models import FuelParams, OvmParams, ovm_accel
from .ocp import OcpProblem, SolverOptions, TrajectoryPlan, solve_ocp


class SchedulingError(Exception):
    """No admissible green window within the configured phase lookahead."""


@dataclass(frozen=True)
class SignalTiming:
    """Fixed-time signal: green for green_duration, then red, repeating.

    offset shifts the start of the first green phase.  Phase state at any
    time is deterministic from these three numbers.
    """

    green_duration: float
    red_duration: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.green_duration > 0:
            raise ValueError("green_duration must be positive")
        if self.red_duration < 0:
            raise ValueError("red_duration must be >= 0")

    @property
    def cycle(self) -> float:
        return self.green_duration + self.red_duration

    def _phase_pos(self, t: float) -> float:
        return (t - self.offset) % self.cycle

    def is_green(self, t: float) -> bool:
        return self._phase_pos(t) < self.green_duration

    def phase_windows(self, t: float, count: int) -> list[tuple[float, float]]:
        """(g_j, r_j) pairs for the next `count` green intervals.

        g_j is the start of the j-th green interval whose end lies strictly
        after t; r_j is that interval's end (the following red start).  If t
        is inside a green interval, j = 1 refers to it and g_1 <= t.
        """
        k = math.floor((t - self.offset) / self.cycle)
        g = self.offset + k * self.cycle
        if g + self.green_duration <= t:
            g += self.cycle
        out = []
        for _ in range(count):
            out.append((g, g + self.green_duration))
            g += self.cycle
        return out

    def next_red_start(self, t: float) -> float:
        return self.phase_windows(t, 1)[0][1]

    def red_elapsed(self, t: float) -> float:
        """Time since the most recent red phase began (spans into green)."""
        if self.red_duration == 0.0:
            return 0.0
        p = self._phase_pos(t)
        if p >= self.green_duration:
            return p - self.green_duration
        return p + self.red_duration


@dataclass(frozen=True)
class GreenWindow:
    """Admissible average-velocity interval for catching a green phase."""

    v_low: float
    v_high: float
    phase_index: int
    t_f: float

    def __post_init__(self):
        if self.v_low > self.v_high:
            raise ValueError("empty window")


def select_window(distance: float, now: float, timing: SignalTiming,
                  v_min: float, v_cap: float, lookahead: int = 8,
                  min_clearance: float = 0.0,
                  earliest_arrival: Optional[float] = None) -> GreenWindow:
    """First nonempty [D/(r_j - now), D/(g_j - now)] ∩ [v_min, v_cap].

    The target velocity is the window's upper edge and t_f = D / v_target.
    When phase j is already green (g_j <= now) the upper bound degenerates
    and only the lower bound D/(r_j - now) remains.  min_clearance skips
    windows whose arrival lands within that many seconds of the red start
    (the terminal box lets the vehicle cross slightly after t_f, so pinched
    windows would risk arriving on red).  earliest_arrival pushes the
    usable part of a phase later, e.g. past the clearance time of a queue
    discharging ahead.  Raises SchedulingError when no phase within the
    lookahead admits a window.
    """
    if distance <= 0:
        raise ValueError("distance must be positive")
    if not v_cap > v_min or v_min < 0:
        raise ValueError("need v_cap > v_min >= 0")
    for j, (g, r) in enumerate(timing.phase_windows(now, lookahead), start=1):
        g_eff = g if earliest_arrival is None else max(g, earliest_arrival)
        if g_eff >= r:
            continue
        lo = distance / (r - now)
        hi = v_cap if g_eff <= now else min(v_cap, distance / (g_eff - now))
        lo = max(lo, v_min)
        if lo <= hi and now + distance / hi + min_clearance <= r:
            return GreenWindow(lo, hi, j, distance / hi)
    raise SchedulingError(
        f"no green window within {lookahead} phases for D={distance:.1f}")


def adjust_for_queue(distance: float, v_k: float, v_ac: float,
                     red_start: float, now: float) -> float:
    """Queue-corrected distance to the effective stop point.

    D* = v_k / (v_k + v_ac) * [D + v_ac (r_j - now)] with v_ac the upstream
    shockwave speed of the discharging queue.  v_ac = 0 recovers D.
    """
    if v_k + v_ac <= 0:
        raise ValueError("v_k + v_ac must be positive")
    return v_k / (v_k + v_ac) * (distance + v_ac * (red_start - now))


@dataclass(frozen=True)
class QueueEstimate:
    v_ac: float
    length: float
    count: int = 0


def estimate_queue(x_ahead: np.ndarray, v_ahead: np.ndarray,
                   red_elapsed: float, zone_length: float,
                   v_thresh: float = 0.5) -> Optional[QueueEstimate]:
    """Detect a queue among vehicles ahead inside the control zone.

    A queue exists when any such vehicle is near standstill (< v_thresh).
    The shockwave speed is estimated as queue length over elapsed red time,
    clamped to [1, 10] m/s since the growth-rate estimate is crude.
    """
    x = np.asarray(x_ahead, dtype=float)
    v = np.asarray(v_ahead, dtype=float)
    mask = (x >= -zone_length) & (x <= 0.0) & (v < v_thresh)
    if not mask.any():
        return None
    length = -float(np.min(x[mask]))
    v_ac = min(10.0, max(1.0, length / max(red_elapsed, 0.1)))
    return QueueEstimate(v_ac=v_ac, length=length, count=int(mask.sum()))


def partition_platoon(follower_is_cav: Sequence[bool], n_opt: float) -> int:
    """Number of followers joining a platoon behind a leader CAV.

    Membership extends over consecutive vehicles behind the leader, stopping
    at the first CAV (it will lead its own platoon) and capped at
    floor(n_opt).  Any CAV that nevertheless ends up inside a platoon must
    run the HDV car-following law; the simulator enforces that for all
    non-leading members regardless of type.
    """
    cap = max(0, math.floor(n_opt))
    n = 0
    for is_cav in follower_is_cav:
        if is_cav or n >= cap:
            break
        n += 1
    return n


class CavFsmState(Enum):
    UNCONTROLLED = "uncontrolled"
    COMPUTED = "computed"
    CONTROLLED = "controlled"
    RECOMPUTED = "recomputed"


# pseudo-state used only in transition logs: permanent car-following fallback
OVM_TERMINAL = "ovm_terminal"


@dataclass
class CavAgent:
    """Mutable per-CAV controller record owned by one scenario run."""

    state: CavFsmState = CavFsmState.UNCONTROLLED
    plan: Optional[TrajectoryPlan] = None
    plan_start: float = 0.0
    fallback: bool = False
    last_replan: float = -math.inf
    trigger_armed: bool = True    # rearms once the gap recovers
    solves: int = 0
    failed_solves: int = 0
    transitions: list[tuple[float, str, str]] = field(default_factory=list)

    def _goto(self, t: float, new: "CavFsmState | str") -> None:
        old = self.state.value
        if isinstance(new, CavFsmState):
            self.state = new
            self.transitions.append((t, old, new.value))
        else:  # terminal pseudo-state
            self.fallback = True
            self.transitions.append((t, old, new))


@dataclass(frozen=True)
class WorldView:
    """Snapshot of everything one CAV's controller may look at."""

    t: float
    x: float
    v: float
    pred_x: Optional[float] = None
    pred_v: Optional[float] = None
    follower_x: tuple[float, ...] = ()
    follower_v: tuple[float, ...] = ()
    queue: Optional[QueueEstimate] = None
    n_ahead: int = 0              # vehicles ahead that have not crossed yet

    @property
    def spacing(self) -> Optional[float]:
        """Axle-to-axle distance to the predecessor."""
        return None if self.pred_x is None else self.pred_x - self.x


@dataclass(frozen=True)
class CoordinatorConfig:
    v_star: float
    v_min: float = 0.0
    v_max: float = 15.0
    a_min: float = -6.0
    a_max: float = 3.0
    d_safe: float = 2.0
    x0_max: float = 10.0
    w1: float = 1e5
    w2: float = 1e4
    control_zone: float = 300.0
    kc: float = 0.5               # re-plan allowed while D > kc * control_zone
    trigger_gap: float = 6.0
    replan_cooldown: float = 1.0  # rate guard; first trigger always fires
    replan_gain: float = 3.0      # schedule drift, s, that warrants a re-plan
    v_floor: float = 2.0          # slower windows advance to the next phase
    h_star: Optional[float] = None  # line crossing headway at v_star, s/veh
    h_discharge: float = 2.5      # observed OVM queue discharge headway
    t_startup: float = 1.0        # queue start-up lag at green onset
    arrival_clearance: Optional[float] = None
    phase_lookahead: int = 8
    nodes: int = 60
    tracker_q: float = 1.0
    tracker_r: float = 0.05
    tracker_dt: float = 0.1
    ovm: OvmParams = OvmParams()
    fuel: FuelParams = FuelParams()

    @property
    def platoon_cap(self) -> float:
        # slacked upper velocity bound for the mixed-platoon controller
        return 0.5 * (self.v_max + self.v_star)

    @property
    def clearance(self) -> float:
        """Arrival clearance before red: terminal-box slip plus a buffer."""
        if self.arrival_clearance is not None:
            return self.arrival_clearance
        return self.x0_max / self.v_star + 1.5


def _ovm_command(view: WorldView, cfg: CoordinatorConfig) -> float:
    if view.pred_x is None:
        # free driving: relax toward the speed limit at the OVM gain
        return cfg.ovm.kappa * (cfg.v_max - view.v)
    return ovm_accel(cfg.ovm, view.pred_x - view.x, view.v)


def effective_distance(view: WorldView, timing: SignalTiming) -> float:
    """Distance to the effective stop point, shortened by a queue ahead.

    The shockwave correction can mathematically exceed the raw distance
    (the spec's fixed-point example sits exactly on the boundary); the
    physical target is never beyond the stop line, so the result is capped
    at -x.  Near-standstill vehicles skip the correction: the formula
    degenerates as v_k -> 0 and such a CAV is queued itself.
    """
    dist = -view.x
    if view.queue is not None and view.v > 0.1:
        adj = adjust_for_queue(dist, view.v, view.queue.v_ac,
                               timing.next_red_start(view.t), view.t)
        if adj > 1.0:
            dist = min(adj, dist)
    return dist


def _queue_clearance(view: WorldView, timing: SignalTiming,
                     cfg: CoordinatorConfig) -> Optional[float]:
    """Time everything ahead should have crossed the line.

    With a standing queue the line is a backlog: everything ahead funnels
    through it at the observed discharge rate from the first usable green.
    In free flow only the predecessor's projected crossing binds.
    """
    if cfg.h_star is None or view.n_ahead <= 0:
        return None
    n_stop = view.queue.count if view.queue is not None else 0
    if n_stop > 0:
        n_roll = max(view.n_ahead - n_stop, 0)
        g_first, _ = timing.phase_windows(view.t, 1)[0]
        return (max(g_first, view.t) + cfg.t_startup
                + n_stop * cfg.h_discharge + n_roll * cfg.h_star)
    if view.pred_x is None or view.pred_x >= 0:
        return None
    t_pred = view.t + (-view.pred_x) / max(view.pred_v, cfg.v_floor)
    return t_pred + cfg.h_star


def _select_schedule(view: WorldView, timing: SignalTiming,
                     cfg: CoordinatorConfig
                     ) -> Optional[tuple[GreenWindow, float]]:
    """Pick the window and target distance a plan would be built on.

    With a queue ahead the primary schedule keeps the stop line as the
    target and delays arrival past the queue's estimated clearance time;
    the shockwave-adjusted distance (a target at the queue rear) is the
    fallback when no such window exists.  Windows slower than v_floor are
    treated as empty, so a blocked phase advances to the next one instead
    of producing a crawl.  Cheap: no OCP involved.
    """
    if -view.x <= 0:
        return None
    v_lo = max(cfg.v_min, cfg.v_floor)
    # followers cross after the leader; reserve their green time too
    clearance = cfg.clearance
    if cfg.h_star is not None:
        clearance += len(view.follower_x) * cfg.h_star
    dist = -view.x
    t_clear = _queue_clearance(view, timing, cfg)
    if t_clear is not None:
        try:
            win = select_window(dist, view.t, timing, v_lo,
                                cfg.platoon_cap, cfg.phase_lookahead,
                                min_clearance=clearance,
                                earliest_arrival=t_clear)
            return win, dist
        except SchedulingError:
            pass
    dist = effective_distance(view, timing)
    try:
        win = select_window(dist, view.t, timing, v_lo,
                            cfg.platoon_cap, cfg.phase_lookahead,
                            min_clearance=clearance)
        return win, dist
    except SchedulingError:
        return None


def _try_plan(rec: CavAgent, view: WorldView, timing: SignalTiming,
              cfg: CoordinatorConfig,
              options: Optional[SolverOptions]) -> Optional[TrajectoryPlan]:
    """Window selection + queue adjustment + one synchronous OCP solve."""
    sel = _select_schedule(view, timing, cfg)
    if sel is None:
        return None
    win, dist = sel
    rec.solves += 1
    try:
        problem = OcpProblem(
            n=len(view.follower_x),
            t0=view.t, tf=view.t + win.t_f,
            x_init=np.concatenate([[view.x], view.follower_x]),
            v_init=np.concatenate([[view.v], view.follower_v]),
            x_tar=view.x + dist,
            v_star=cfg.v_star, w1=cfg.w1, w2=cfg.w2,
            v_max=cfg.v_max, a_min=cfg.a_min, a_max=cfg.a_max,
            d_safe=cfg.d_safe, x0_max=cfg.x0_max,
            ovm=cfg.ovm, fuel=cfg.fuel)
        plan = solve_ocp(problem, cfg.nodes, options)
    except ValueError:
        rec.failed_solves += 1
        return None
    if plan.solver_status != "converged":
        rec.failed_solves += 1
        return None
    return plan


def step_fsm(rec: CavAgent, view: WorldView, timing: SignalTiming,
             cfg: CoordinatorConfig,
             options: Optional[SolverOptions] = None) -> float:
    """Advance one CAV's FSM by one simulation step; returns acceleration.

    Transition graph: Uncontrolled -> Computed -> Controlled -> Recomputed
    -> {Controlled, terminal OVM}.  Computed and Recomputed also fall back
    to terminal OVM on scheduling or solver failure; a fallback never halts
    the run.  Computed and Recomputed resolve within the step they fire.
    """
    if rec.fallback:
        return _ovm_command(view, cfg)

    if rec.state is CavFsmState.UNCONTROLLED:
        if view.x < -cfg.control_zone:
            return _ovm_command(view, cfg)
        rec._goto(view.t, CavFsmState.COMPUTED)
        plan = _try_plan(rec, view, timing, cfg, options)
        if plan is None:
            rec._goto(view.t, OVM_TERMINAL)
            return _ovm_command(view, cfg)
        rec.plan = plan
        rec.plan_start = view.t
        rec._goto(view.t, CavFsmState.CONTROLLED)
        return float(plan.u[0])

    if rec.state is CavFsmState.CONTROLLED:
        spacing = view.spacing
        # the gap trigger fires once per pinch: only while actually
        # closing in, and it rearms after the gap recovers, so a vehicle
        # pinned behind a queue re-plans once, not every cooldown
        pinched = (spacing is not None
                   and spacing - cfg.ovm.l_veh < cfg.trigger_gap)
        if not pinched:
            rec.trigger_armed = True
        triggered = (pinched and rec.trigger_armed
                     and view.t - rec.last_replan >= cfg.replan_cooldown)
        # a plan that ran out before the vehicle crossed has failed its
        # schedule (queues or the envelope held it back); re-enter
        expired = view.t > rec.plan.times[-1]
        if triggered or expired:
            if triggered:
                rec.trigger_armed = False
            return _recompute(rec, view, timing, cfg, options)
        # closed-loop schedule maintenance: the booking behind the plan
        # drifts as queues build or clear; while enough control zone
        # remains, re-plan once the best window has moved materially
        if (view.t - rec.last_replan >= cfg.replan_cooldown
                and -view.x > cfg.kc * cfg.control_zone):
            sel = _select_schedule(view, timing, cfg)
            if sel is not None:
                drift = view.t + sel[0].t_f - rec.plan.times[-1]
                if abs(drift) >= cfg.replan_gain:
                    rec._goto(view.t, CavFsmState.RECOMPUTED)
                    plan = _try_plan(rec, view, timing, cfg, options)
                    rec.last_replan = view.t
                    rec._goto(view.t, CavFsmState.CONTROLLED)
                    if plan is not None:
                        rec.plan = plan
                        rec.plan_start = view.t
                        return float(plan.u[0])
        return float(np.interp(view.t, rec.plan.times, rec.plan.u))

    raise RuntimeError(f"step_fsm called in transient state {rec.state}")


def _recompute(rec: CavAgent, view: WorldView, timing: SignalTiming,
               cfg: CoordinatorConfig,
               options: Optional[SolverOptions]) -> float:
    """Controlled -> Recomputed -> {Controlled, terminal OVM}."""
    rec._goto(view.t, CavFsmState.RECOMPUTED)
    if -view.x > cfg.kc * cfg.control_zone:
        plan = _try_plan(rec, view, timing, cfg, options)
        if plan is not None:
            rec.plan = plan
            rec.plan_start = view.t
            rec.last_replan = view.t
            rec._goto(view.t, CavFsmState.CONTROLLED)
            return float(plan.u[0])
    # too close to the line, or the re-plan failed
    rec._goto(view.t, OVM_TERMINAL)
    return _ovm_command(view, cfg)


def _tracker_gain(cfg: CoordinatorConfig) -> float:
    """Steady-state LQ gain for the scalar velocity-tracking problem."""
    q, r, dt = cfg.tracker_q, cfg.tracker_r, cfg.tracker_dt
    p = (q * dt * dt + math.sqrt(q * q * dt ** 4 + 4 * dt * dt * q * r)) \
        / (2 * dt * dt)
    return dt * p / (r + dt * dt * p)


def pcc_plus_command(rec: CavAgent, view: WorldView, timing: SignalTiming,
                     cfg: CoordinatorConfig) -> float:
    """Single-CAV benchmark: window at the full v_max cap, queue-adjusted
    distance, receding-horizon velocity tracking under the same bounds.

    The tracker is the stationary solution of the quadratic tracking
    problem, projected onto the acceleration box, the velocity box, and a
    braking-distance gap guard that keeps the commanded gap >= d_safe.
    """
    if rec.fallback or -view.x <= 0:
        return _ovm_command(view, cfg)
    dist = effective_distance(view, timing)
    try:
        win = select_window(dist, view.t, timing, cfg.v_min, cfg.v_max,
                            cfg.phase_lookahead)
    except SchedulingError:
        rec._goto(view.t, OVM_TERMINAL)
        return _ovm_command(view, cfg)
    dt = cfg.tracker_dt
    a = -_tracker_gain(cfg) * (view.v - win.v_high)
    a = min(max(a, cfg.a_min), cfg.a_max)
    # velocity box over one step
    a = min(a, (cfg.v_max - view.v) / dt)
    spacing = view.spacing
    if spacing is not None:
        # admissible next-step speed w: this step's travel w*dt plus the
        # braking distance w^2/(2b) must fit into the free gap, hence
        # w = -b*dt + sqrt(b^2 dt^2 + 2 b free); a moving predecessor
        # shifts the bound by its speed
        free = max(0.0, spacing - cfg.ovm.l_veh - cfg.d_safe)
        b = -cfg.a_min
        v_allow = view.pred_v + math.sqrt(b * b * dt * dt + 2.0 * b * free) \
            - b * dt
        a = min(a, (v_allow - view.v) / dt)
    a = max(a, cfg.a_min, -view.v / dt)
    return a
