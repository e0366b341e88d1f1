"""Deterministic single-lane signalized-intersection microsimulation.

One approach lane: vehicles spawn at the observation-zone entrance, follow
their predecessor (OVM for HDVs, a pluggable controller for CAVs), respect
the signal through a virtual standing wall at the stop line, and exit past
x = 0.  The stop line sits at x = 0 and upstream positions are negative.

Red-light mechanics: the SUMO substrate the experiments were originally
run on stops vehicles implicitly.  Here a standing virtual predecessor at
the stop line drives OVM deceleration whenever the signal is red, or when
a vehicle could not reach the line before the upcoming red even at full
speed (t + D/v_max >= red start - margin).  That optimistic arrival bound
is monotone along a trajectory, so a vehicle is either waved through in
green or caught early enough to stop; discharging queues are never blocked
because their bound shrinks as they speed up.

Collision avoidance: the desired-velocity relaxation alone overshoots
badly when closing on a standing queue (it brakes from the current
spacing with no anticipation), so every commanded acceleration passes
through a discrete-time safe-velocity envelope against the real
predecessor, the same implicit guard the original substrate applies under
any car-following model.  The envelope binds only in emergency closes;
equilibrium following and queue discharge are untouched by it.

Determinism: all randomness is pre-drawn from one seeded generator before
the loop starts (arrival times, vehicle classes, OVM gains), so identical
(config, seed) pairs give bit-identical artifacts and logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .coordinator import (CavAgent, CavFsmState, CoordinatorConfig,
                          SignalTiming, WorldView, estimate_queue,
                          partition_platoon, pcc_plus_command, step_fsm)
from .equilibrium import solve_vstar
from .models import FuelParams, OvmParams, equilibrium_spacing, fuel_rate, ovm_accel
from .ocp import SolverOptions

CONTROLLERS = ("none", "pcc_plus", "mixed_platoon")


@dataclass(frozen=True)
class ZoneGeometry:
    """Approach geometry; OZ upstream of CZ, stop line at x = 0."""

    l_obs: float = 500.0
    l_ctrl: float = 300.0

    def __post_init__(self):
        if self.l_obs <= 0 or self.l_ctrl <= 0:
            raise ValueError("zone lengths must be positive")

    @property
    def spawn_x(self) -> float:
        return -(self.l_obs + self.l_ctrl)

    def in_cz(self, x: float) -> bool:
        return -self.l_ctrl <= x < 0.0

    def in_oz(self, x: float) -> bool:
        return self.spawn_x <= x < -self.l_ctrl


@dataclass(frozen=True)
class ScenarioConfig:
    volume: float                 # veh/(hour*lane)
    mpr: float
    total_vehicles: int
    seed: int
    controller: str = "none"
    geometry: ZoneGeometry = ZoneGeometry()
    timing: SignalTiming = SignalTiming(green_duration=30.0,
                                        red_duration=30.0)
    step: float = 0.1
    v_max: float = 15.0
    a_min: float = -6.0
    a_max: float = 3.0
    d_safe: float = 2.0
    x0_max: float = 10.0
    w1: float = 1e5
    w2: float = 1e4
    nodes: int = 60
    kc: float = 0.5
    gamma_low: float = 0.9
    gamma_high: float = 1.1
    red_margin: float = 2.0       # wall anticipation for car-followers
    cav_red_margin: float = 0.3   # for CAVs executing an audited plan
    g_min: float = 0.5            # envelope standstill bumper gap, above
                                  # the 0.1 m fault threshold
    despawn_x: float = 100.0
    max_steps: int = 60000
    ovm: OvmParams = OvmParams()
    fuel: FuelParams = FuelParams()

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.volume <= 0:
            raise ValueError("volume must be positive")
        if not 0.0 <= self.mpr <= 1.0:
            raise ValueError("mpr must lie in [0, 1]")
        if self.total_vehicles <= 0:
            raise ValueError("total_vehicles must be positive")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.g_min <= 0.1:
            raise ValueError("g_min must exceed the 0.1 m fault threshold")

    @property
    def free_flow_time(self) -> float:
        return self.geometry.l_ctrl / self.v_max


@dataclass(frozen=True)
class Arrival:
    time: float
    vclass: str    # "CAV" | "HDV"
    gamma: float


def spawn_process(config: ScenarioConfig, rng: np.random.Generator
                  ) -> list[Arrival]:
    """Poisson arrival stream: exponential gaps at mean 3600/volume s,
    CAV with probability mpr, per-HDV OVM gain drawn once at spawn."""
    mean = 3600.0 / config.volume
    out = []
    t = 0.0
    for _ in range(config.total_vehicles):
        t += float(rng.exponential(mean))
        is_cav = bool(rng.random() < config.mpr)
        gamma = 1.0 if is_cav else float(
            rng.uniform(config.gamma_low, config.gamma_high))
        out.append(Arrival(t, "CAV" if is_cav else "HDV", gamma))
    return out


def spawn_gate_gap(ovm: OvmParams, v_max: float) -> float:
    """Entrance gap required before a new vehicle may be inserted.

    Nominally the equilibrium spacing at v_max, but the desired-velocity
    curve saturates below the usual 15 m/s limit, where that spacing is
    infinite; the 98% saturation point is used instead (34.8 m for the
    default parameters).
    """
    v_sat = ovm.v1 + 0.98 * ovm.v2
    return equilibrium_spacing(ovm, min(v_max, v_sat))


def safe_follow_velocity(free: float, v_pred: float, brake: float,
                         dt: float) -> float:
    """Largest next-step speed that still admits a no-collision stop.

    Assuming both vehicles brake at `brake` from the next step on, the
    follower's stopping point stays at least `free` short of the
    predecessor's: solves w*dt + w^2/(2b) <= free + v_pred^2/(2b).
    """
    slack = max(free, 0.0) + v_pred * v_pred / (2.0 * brake)
    disc = brake * brake * dt * dt + 2.0 * brake * slack
    return max(0.0, float(np.sqrt(disc)) - brake * dt)


class _Vehicle:
    __slots__ = ("vid", "vclass", "spawn_index", "x", "v", "a", "gamma",
                 "t_spawn", "t_in", "t_out", "fuel_total", "fuel_cz",
                 "dist_cz", "cz_v", "cz_a", "agent", "leader_vid",
                 "follower_ids", "shadow", "partitioned", "seen_events")

    def __init__(self, vid, vclass, spawn_index, x, v, gamma, t_spawn):
        self.vid = vid
        self.vclass = vclass
        self.spawn_index = spawn_index
        self.x = x
        self.v = v
        self.a = 0.0
        self.gamma = gamma
        self.t_spawn = t_spawn
        self.t_in: Optional[float] = None
        self.t_out: Optional[float] = None
        self.fuel_total = 0.0
        self.fuel_cz = 0.0
        self.dist_cz = 0.0
        self.cz_v: list[float] = []
        self.cz_a: list[float] = []
        self.agent: Optional[CavAgent] = None
        self.leader_vid: Optional[int] = None
        self.follower_ids: list[int] = []
        self.shadow = False          # CAV absorbed into a platoon
        self.partitioned = False
        self.seen_events = 0

    def fsm_label(self) -> str:
        if self.vclass != "CAV":
            return "-"
        if self.agent is None:
            return "shadow" if self.shadow else "-"
        return "ovm_terminal" if self.agent.fallback else self.agent.state.value


@dataclass
class VehicleLog:
    """Per-vehicle summary in the run artifact."""

    vid: int
    vclass: str
    spawn_index: int
    gamma: float
    t_spawn: float
    t_in_cz: Optional[float]
    t_out_cz: Optional[float]
    fuel_cz_ml: float
    dist_cz_m: float
    fuel_total_ml: float
    cz_v: np.ndarray
    cz_a: np.ndarray


@dataclass
class RunArtifact:
    config: ScenarioConfig
    complete: bool
    n_steps: int
    t_end: float
    vehicles: list[VehicleLog]
    events: list[tuple[float, int, str, str]]
    faults: list[str]
    solves: int
    commands_issued: int
    trajectory: Optional[list[tuple]] = None

    def vehicle(self, vid: int) -> VehicleLog:
        for rec in self.vehicles:
            if rec.vid == vid:
                return rec
        raise KeyError(vid)


def _free_accel(cfg: ScenarioConfig, veh: _Vehicle) -> float:
    return cfg.ovm.kappa * (cfg.v_max - veh.v)


def _follow_accel(cfg: ScenarioConfig, veh: _Vehicle,
                  pred: Optional[_Vehicle]) -> float:
    if pred is None:
        return _free_accel(cfg, veh)
    return ovm_accel(cfg.ovm, pred.x - veh.x, veh.v, veh.gamma)


def _wall_active(cfg: ScenarioConfig, veh: _Vehicle, t: float,
                 green: bool, next_red: float, margin: float) -> bool:
    if veh.x >= 0.0:
        return False
    if not green:
        return True
    return t + (-veh.x) / cfg.v_max >= next_red - margin


def run_scenario(config: ScenarioConfig,
                 log_trajectories: bool = False,
                 solver_options: Optional[SolverOptions] = None
                 ) -> RunArtifact:
    """Run one scenario to completion (all vehicles through CZ) or cap."""
    rng = np.random.default_rng(config.seed)
    arrivals = spawn_process(config, rng)

    coord_cfg = None
    n_opt = 0.0
    if config.controller in ("mixed_platoon", "pcc_plus"):
        eq = solve_vstar(config.ovm, config.timing.green_duration,
                         v_max=config.v_max)
        n_opt = eq.n_max
        coord_cfg = CoordinatorConfig(
            v_star=eq.v_star, v_min=0.0, v_max=config.v_max,
            a_min=config.a_min, a_max=config.a_max, d_safe=config.d_safe,
            x0_max=config.x0_max, w1=config.w1, w2=config.w2,
            control_zone=config.geometry.l_ctrl, kc=config.kc,
            nodes=config.nodes, tracker_dt=config.step,
            h_star=eq.d_star / eq.v_star,
            ovm=config.ovm, fuel=config.fuel)

    geo = config.geometry
    timing = config.timing
    dt = config.step
    gate = spawn_gate_gap(config.ovm, config.v_max)

    vehicles: list[_Vehicle] = []   # front to back
    done: list[_Vehicle] = []
    events: list[tuple[float, int, str, str]] = []
    faults: list[str] = []
    traj: Optional[list[tuple]] = [] if log_trajectories else None
    next_arrival = 0
    commands = 0
    t = 0.0
    steps_used = config.max_steps

    def active_index(vid: int) -> Optional[int]:
        for i, v in enumerate(vehicles):
            if v.vid == vid:
                return i
        return None

    def drain_agent_events(veh: _Vehicle) -> None:
        ag = veh.agent
        for tt, frm, to in ag.transitions[veh.seen_events:]:
            events.append((tt, veh.vid, "fsm_transition", f"{frm}->{to}"))
            if to == "controlled" and frm == "recomputed":
                events.append((tt, veh.vid, "replan", ""))
        veh.seen_events = len(ag.transitions)

    for k in range(config.max_steps):
        t = k * dt

        # spawn pending arrivals once the entrance is clear
        while next_arrival < len(arrivals) and \
                arrivals[next_arrival].time <= t:
            if vehicles and vehicles[-1].x - geo.spawn_x < gate:
                break
            arr = arrivals[next_arrival]
            veh = _Vehicle(next_arrival, arr.vclass, next_arrival,
                           geo.spawn_x, config.v_max, arr.gamma, t)
            if arr.vclass == "CAV" and config.controller != "none":
                veh.agent = CavAgent()
            vehicles.append(veh)
            events.append((t, veh.vid, "spawn", arr.vclass))
            next_arrival += 1

        green = timing.is_green(t)
        next_red = timing.next_red_start(t)

        # platoon partitioning happens the moment a leader CAV reaches CZ
        if config.controller == "mixed_platoon":
            for i, veh in enumerate(vehicles):
                if (veh.vclass == "CAV" and not veh.partitioned
                        and not veh.shadow and veh.x >= -geo.l_ctrl
                        and veh.x < 0.0):
                    veh.partitioned = True
                    behind = vehicles[i + 1:]
                    n = partition_platoon(
                        [b.vclass == "CAV" for b in behind], n_opt)
                    veh.follower_ids = [b.vid for b in behind[:n]]
                    for b in behind[:n]:
                        b.leader_vid = veh.vid
                        if b.vclass == "CAV":
                            b.shadow = True

        # command pass; all decisions read the state at time t
        xs = np.array([v.x for v in vehicles])
        vs = np.array([v.v for v in vehicles])
        red_elapsed = timing.red_elapsed(t)
        cmds = np.empty(len(vehicles))
        for i, veh in enumerate(vehicles):
            pred = vehicles[i - 1] if i > 0 else None
            margin = config.red_margin
            a_cmd = None
            if veh.x >= 0.0:
                a_cmd = _free_accel(config, veh)
            elif veh.vclass == "CAV" and not veh.shadow and \
                    config.controller == "mixed_platoon":
                margin = config.cav_red_margin
                followers = [vehicles[j] for j in
                             (active_index(fid) for fid in veh.follower_ids)
                             if j is not None]
                queue = estimate_queue(xs[:i], vs[:i], red_elapsed,
                                       geo.l_ctrl) if i > 0 else None
                view = WorldView(
                    t=t, x=veh.x, v=veh.v,
                    pred_x=pred.x if pred is not None else None,
                    pred_v=pred.v if pred is not None else None,
                    follower_x=tuple(f.x for f in followers),
                    follower_v=tuple(f.v for f in followers),
                    queue=queue, n_ahead=int(np.sum(xs[:i] < 0.0)))
                a_cmd = step_fsm(veh.agent, view, timing, coord_cfg,
                                 solver_options)
                drain_agent_events(veh)
                if veh.agent.fallback:
                    margin = config.red_margin
                elif veh.agent.state is CavFsmState.CONTROLLED:
                    commands += 1
            elif veh.vclass == "CAV" and not veh.shadow and \
                    config.controller == "pcc_plus" and geo.in_cz(veh.x):
                queue = estimate_queue(xs[:i], vs[:i], red_elapsed,
                                       geo.l_ctrl) if i > 0 else None
                view = WorldView(
                    t=t, x=veh.x, v=veh.v,
                    pred_x=pred.x if pred is not None else None,
                    pred_v=pred.v if pred is not None else None,
                    queue=queue)
                a_cmd = pcc_plus_command(veh.agent, view, timing, coord_cfg)
                if not veh.agent.fallback:
                    commands += 1
                else:
                    margin = config.red_margin
            if a_cmd is None:
                a_cmd = _follow_accel(config, veh, pred)
            # red-light wall supervisor, applied uniformly
            if _wall_active(config, veh, t, green, next_red, margin):
                a_cmd = min(a_cmd,
                            ovm_accel(config.ovm, -veh.x, veh.v, veh.gamma))
            # safe-velocity envelope against the real predecessor
            if pred is not None:
                free = pred.x - veh.x - config.ovm.l_veh - config.g_min
                w = safe_follow_velocity(free, pred.v, -config.a_min, dt)
                a_cmd = min(a_cmd, (w - veh.v) / dt)
            cmds[i] = min(max(a_cmd, config.a_min), config.a_max)

        # semi-implicit Euler: v first, then x
        for i, veh in enumerate(vehicles):
            v_new = min(max(veh.v + cmds[i] * dt, 0.0), config.v_max)
            x_new = veh.x + v_new * dt
            a_applied = (v_new - veh.v) / dt
            t_next = t + dt

            if veh.t_in is None and x_new >= -geo.l_ctrl:
                veh.t_in = t_next
                events.append((t_next, veh.vid, "enter_cz", ""))
            if veh.t_out is None and x_new >= 0.0 > veh.x:
                frac = (0.0 - veh.x) / (x_new - veh.x)
                t_cross = t + frac * dt
                if not timing.is_green(t_cross):
                    raise RuntimeError(
                        f"red-light violation: vehicle {veh.vid} crossed "
                        f"x=0 at t={t_cross:.2f} during red")
                veh.t_out = t_next
                events.append((t_next, veh.vid, "exit_cz", ""))

            # CZ accounting covers every step ending inside CZ plus the
            # exit step itself
            in_cz_now = (-geo.l_ctrl <= x_new < 0.0) or (x_new >= 0.0 > veh.x)
            rate = fuel_rate(config.fuel, v_new, a_applied)
            if in_cz_now:
                veh.fuel_cz += rate * dt
                veh.dist_cz += v_new * dt
                veh.cz_v.append(v_new)
                veh.cz_a.append(a_applied)
            veh.fuel_total += rate * dt
            veh.x = x_new
            veh.v = v_new
            veh.a = a_applied

            if traj is not None:
                traj.append((t_next, veh.vid, veh.vclass, veh.fsm_label(),
                             x_new, v_new, a_applied, rate, veh.fuel_total))

        # ordering and overlap faults (recorded, never repaired)
        for i in range(1, len(vehicles)):
            lead, lag = vehicles[i - 1], vehicles[i]
            gap = lead.x - lag.x - config.ovm.l_veh
            if gap < 0.1:
                dump = (f"t={t + dt:.2f} lead={lead.vid} "
                        f"(x={lead.x:.3f},v={lead.v:.3f}) lag={lag.vid} "
                        f"(x={lag.x:.3f},v={lag.v:.3f}) gap={gap:.3f}")
                faults.append(dump)
                events.append((t + dt, lag.vid, "fault", dump))

        # retire vehicles far past the line
        while vehicles and vehicles[0].x > config.despawn_x:
            done.append(vehicles.pop(0))

        if next_arrival == len(arrivals) and \
                all(v.t_out is not None for v in vehicles):
            steps_used = k + 1
            break

    done.extend(vehicles)
    complete = next_arrival == len(arrivals) and \
        all(v.t_out is not None for v in done)
    logs = [VehicleLog(v.vid, v.vclass, v.spawn_index, v.gamma, v.t_spawn,
                       v.t_in, v.t_out, v.fuel_cz, v.dist_cz, v.fuel_total,
                       np.asarray(v.cz_v), np.asarray(v.cz_a))
            for v in sorted(done, key=lambda v: v.vid)]
    solves = sum(v.agent.solves for v in done if v.agent is not None)
    return RunArtifact(config=config, complete=complete, n_steps=steps_used,
                       t_end=steps_used * dt, vehicles=logs, events=events,
                       faults=faults, solves=solves,
                       commands_issued=commands, trajectory=traj)


TRAJECTORY_HEADER = ("t,vehicle_id,class,fsm_state,x,v,a,"
                     "fuel_rate_ml_s,fuel_accum_ml")
EVENTS_HEADER = "t,vehicle_id,event,detail"


def write_trajectory_csv(artifact: RunArtifact, fh) -> None:
    if artifact.trajectory is None:
        raise ValueError("run was executed without trajectory logging")
    fh.write(TRAJECTORY_HEADER + "\n")
    for row in artifact.trajectory:
        t, vid, vclass, fsm, x, v, a, rate, accum = row
        fh.write(f"{t:.6f},{vid},{vclass},{fsm},{x:.6f},{v:.6f},"
                 f"{a:.6f},{rate:.6f},{accum:.6f}\n")


def write_events_csv(artifact: RunArtifact, fh) -> None:
    fh.write(EVENTS_HEADER + "\n")
    for t, vid, event, detail in artifact.events:
        fh.write(f"{t:.6f},{vid},{event},{detail}\n")
