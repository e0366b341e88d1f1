"""Evaluation indexes computed from run artifacts.

All four indexes follow the evaluation protocol of the benchmark study:
average travel time delay against the free-flow control-zone traverse,
fleet fuel consumption per 100 km over control-zone distance, mean
acceleration-deceleration cycles, and mean idling time.  Only the last
half of the spawned vehicles is counted so the intersection is warm
(queues already formed) when measurement starts.

The delay index nominally prints a 1/n prefactor against a sum over n+1
vehicles; it is implemented as the true mean over the counted set.  The
idle threshold (0.1 m/s) and the cycle hysteresis band (0.05 m/s^2) are
artifact choices, stated here because the source protocol leaves both
undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simulator import RunArtifact, VehicleLog

IDLE_SPEED = 0.1          # m/s, below this the vehicle counts as idling
CYCLE_HYSTERESIS = 0.05   # m/s^2, sign band for accel-decel cycle counting


@dataclass(frozen=True)
class MetricsSummary:
    attd: float                      # s
    fuel_per_100km: float            # L/100km
    accel_decel_cycles_per_vehicle: float
    idling_time_per_vehicle: float   # s
    counted_vehicle_ids: tuple[int, ...]
    excluded_vehicle_ids: tuple[int, ...] = ()


def counted_set(artifact: RunArtifact) -> list[int]:
    """Ids of the last ceil(total/2) spawned vehicles (the warm half)."""
    total = artifact.config.total_vehicles
    cut = total - math.ceil(total / 2)
    return [v.vid for v in artifact.vehicles if v.spawn_index >= cut]


def _split(artifact: RunArtifact, counted: list[int]
           ) -> tuple[list[VehicleLog], list[int]]:
    """Counted vehicles with both CZ timestamps, plus the excluded ids."""
    ok, excluded = [], []
    for vid in counted:
        log = artifact.vehicle(vid)
        if log.t_in_cz is None or log.t_out_cz is None:
            excluded.append(vid)
        else:
            ok.append(log)
    return ok, excluded


def compute_attd(artifact: RunArtifact, counted: list[int]) -> float:
    """Mean delay vs the free-flow traverse, seconds.

    Counted vehicles that never exited the control zone are excluded
    here; summarize() reports them.
    """
    ok, _ = _split(artifact, counted)
    if not ok:
        raise ValueError("no counted vehicle completed the control zone")
    free = artifact.config.free_flow_time
    return float(np.mean([v.t_out_cz - v.t_in_cz - free for v in ok]))


def compute_fuel_per_100km(artifact: RunArtifact, counted: list[int]
                           ) -> float:
    """Fleet fuel over fleet control-zone distance, liters per 100 km.

    Idling burns fuel while covering no distance, so standing at the
    line drives this index up by design.
    """
    ok, _ = _split(artifact, counted)
    fuel_ml = sum(v.fuel_cz_ml for v in ok)
    dist_m = sum(v.dist_cz_m for v in ok)
    if dist_m <= 0.0:
        raise ValueError("counted fleet covered zero control-zone distance")
    return fuel_ml / dist_m * 1e5 / 1000.0


def count_cycles(accel: np.ndarray,
                 band: float = CYCLE_HYSTERESIS) -> int:
    """Accel-decel cycles: deceleration intervals followed by acceleration.

    Sign is tracked with hysteresis: only |a| > band flips the state, so
    solver jitter around zero does not mint cycles.
    """
    state = 0
    cycles = 0
    for a in accel:
        if a > band:
            if state == -1:
                cycles += 1
            state = 1
        elif a < -band:
            state = -1
    return cycles


def compute_cycles_and_idling(artifact: RunArtifact, counted: list[int]
                              ) -> tuple[float, float]:
    """(mean accel-decel cycles, mean idling seconds) over counted set."""
    ok, _ = _split(artifact, counted)
    if not ok:
        raise ValueError("no counted vehicle completed the control zone")
    dt = artifact.config.step
    cycles = [count_cycles(v.cz_a) for v in ok]
    idling = [float(np.sum(v.cz_v < IDLE_SPEED)) * dt for v in ok]
    return float(np.mean(cycles)), float(np.mean(idling))


def summarize(artifact: RunArtifact,
              counted: list[int] | None = None) -> MetricsSummary:
    if counted is None:
        counted = counted_set(artifact)
    ok, excluded = _split(artifact, counted)
    cycles, idling = compute_cycles_and_idling(artifact, counted)
    return MetricsSummary(
        attd=compute_attd(artifact, counted),
        fuel_per_100km=compute_fuel_per_100km(artifact, counted),
        accel_decel_cycles_per_vehicle=cycles,
        idling_time_per_vehicle=idling,
        counted_vehicle_ids=tuple(v.vid for v in ok),
        excluded_vehicle_ids=tuple(excluded))


METRICS_FIELDS = ("attd_s", "fuel_l_per_100km", "cycles_per_vehicle",
                  "idling_s_per_vehicle", "n_counted", "n_excluded")


def metrics_values(summary: MetricsSummary) -> tuple:
    return (summary.attd, summary.fuel_per_100km,
            summary.accel_decel_cycles_per_vehicle,
            summary.idling_time_per_vehicle,
            len(summary.counted_vehicle_ids),
            len(summary.excluded_vehicle_ids))


def write_metrics_text(summary: MetricsSummary, fh) -> None:
    """Flat key=value rendering, one key per line."""
    for key, val in zip(METRICS_FIELDS, metrics_values(summary)):
        if isinstance(val, float):
            fh.write(f"{key} = {val:.6f}\n")
        else:
            fh.write(f"{key} = {val}\n")
    ids = ",".join(str(i) for i in summary.counted_vehicle_ids)
    fh.write(f"counted_vehicle_ids = {ids}\n")
    if summary.excluded_vehicle_ids:
        ids = ",".join(str(i) for i in summary.excluded_vehicle_ids)
        fh.write(f"excluded_vehicle_ids = {ids}\n")


def metrics_csv_row(summary: MetricsSummary) -> str:
    """One aggregation-ready CSV row (no header, no newline)."""
    vals = metrics_values(summary)
    return ",".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                    for v in vals)
