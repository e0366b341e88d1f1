"""Coordinator tests: signal bookkeeping, green-window selection, queue
adjustment, platoon partitioning, the event-triggered FSM, and the PCC+
benchmark tracker."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonlab.coordinator import (CavAgent, CavFsmState, CoordinatorConfig,
                                    QueueEstimate, SchedulingError,
                                    SignalTiming, WorldView, adjust_for_queue,
                                    effective_distance, estimate_queue,
                                    partition_platoon, pcc_plus_command,
                                    select_window, step_fsm)
from platoonlab.models import OvmParams, equilibrium_spacing, ovm_accel

V_STAR = 12.326
OVM = OvmParams()

# greens at [10, 40), [60, 90), ... - matches the worked window example
EX_TIMING = SignalTiming(green_duration=30.0, red_duration=20.0, offset=10.0)

ALLOWED_TRANSITIONS = {
    ("uncontrolled", "computed"),
    ("computed", "controlled"),
    ("computed", "ovm_terminal"),
    ("controlled", "recomputed"),
    ("recomputed", "controlled"),
    ("recomputed", "ovm_terminal"),
}


def make_cfg(**kw):
    kw.setdefault("v_star", V_STAR)
    kw.setdefault("nodes", 40)
    return CoordinatorConfig(**kw)


def make_view(t, x, v, n_follow=2, pred_gap=None, queue=None):
    """CAV view with followers resting at their equilibrium spacing."""
    d = equilibrium_spacing(OVM, v) if n_follow else 0.0
    fx = tuple(x - (i + 1) * d for i in range(n_follow))
    fv = (v,) * n_follow
    pred_x = None if pred_gap is None else x + OVM.l_veh + pred_gap
    pred_v = None if pred_gap is None else v
    return WorldView(t=t, x=x, v=v, pred_x=pred_x, pred_v=pred_v,
                     follower_x=fx, follower_v=fv, queue=queue)


class TestSignalTiming:
    def test_phase_classification(self):
        assert EX_TIMING.is_green(15.0)
        assert not EX_TIMING.is_green(45.0)
        assert not EX_TIMING.is_green(5.0)
        assert EX_TIMING.is_green(65.0)

    def test_phase_windows_from_red(self):
        assert EX_TIMING.phase_windows(0.0, 2) == [(10.0, 40.0), (60.0, 90.0)]

    def test_phase_windows_inside_green(self):
        # j = 1 is the current interval, so g_1 <= t
        assert EX_TIMING.phase_windows(15.0, 1) == [(10.0, 40.0)]

    def test_next_red_start(self):
        assert EX_TIMING.next_red_start(0.0) == 40.0
        assert EX_TIMING.next_red_start(15.0) == 40.0
        assert EX_TIMING.next_red_start(41.0) == 90.0

    def test_red_elapsed(self):
        assert EX_TIMING.red_elapsed(45.0) == pytest.approx(5.0)
        # inside green: time since the previous red began
        assert EX_TIMING.red_elapsed(15.0) == pytest.approx(25.0)

    def test_all_green_degenerate(self):
        t = SignalTiming(green_duration=30.0, red_duration=0.0)
        assert t.is_green(12345.6)
        assert t.red_elapsed(77.0) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SignalTiming(green_duration=0.0, red_duration=10.0)
        with pytest.raises(ValueError):
            SignalTiming(green_duration=10.0, red_duration=-1.0)


class TestSelectWindow:
    def test_worked_example(self):
        win = select_window(300.0, 0.0, EX_TIMING, 0.0, 15.0)
        assert win.v_low == pytest.approx(7.5)
        assert win.v_high == pytest.approx(15.0)
        assert win.phase_index == 1
        assert win.t_f == pytest.approx(20.0)

    def test_already_green_drops_upper_bound(self):
        win = select_window(300.0, 15.0, EX_TIMING, 0.0, 15.0)
        assert win.v_low == pytest.approx(300.0 / 25.0)
        assert win.v_high == pytest.approx(15.0)

    def test_slacked_cap(self):
        cap = 0.5 * (15.0 + 12.2)
        win = select_window(300.0, 0.0, EX_TIMING, 0.0, cap)
        assert win.v_high == pytest.approx(13.6)
        assert win.t_f == pytest.approx(300.0 / 13.6)

    def test_skips_to_later_phase(self):
        win = select_window(300.0, 0.0, EX_TIMING, 0.0, 6.0)
        assert win.phase_index == 2
        assert win.v_high == pytest.approx(5.0)  # 300 / 60
        assert win.v_low == pytest.approx(300.0 / 90.0)

    def test_no_window_raises(self):
        # 2 s greens: the j = 1 window lies above the cap, later ones
        # fall below v_min, so nothing within the lookahead fits
        narrow = SignalTiming(green_duration=2.0, red_duration=58.0,
                              offset=10.0)
        with pytest.raises(SchedulingError):
            select_window(300.0, 0.0, narrow, 5.0, 6.0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            select_window(-1.0, 0.0, EX_TIMING, 0.0, 15.0)
        with pytest.raises(ValueError):
            select_window(300.0, 0.0, EX_TIMING, 15.0, 15.0)

    @given(shift=st.floats(-5e3, 5e3), t=st.floats(0.0, 50.0),
           dist=st.floats(50.0, 500.0))
    @settings(max_examples=60, deadline=None)
    def test_time_translation_invariance(self, shift, t, dist):
        base = select_window(dist, t, EX_TIMING, 0.0, 15.0)
        moved = SignalTiming(EX_TIMING.green_duration,
                             EX_TIMING.red_duration,
                             EX_TIMING.offset + shift)
        win = select_window(dist, t + shift, moved, 0.0, 15.0)
        assert win.phase_index == base.phase_index
        assert win.v_low == pytest.approx(base.v_low, rel=1e-6, abs=1e-6)
        assert win.v_high == pytest.approx(base.v_high, rel=1e-6, abs=1e-6)


class TestAdjustForQueue:
    def test_no_shockwave_is_identity(self):
        assert adjust_for_queue(300.0, 10.0, 0.0, 20.0, 0.0) == 300.0

    def test_worked_example(self):
        got = adjust_for_queue(300.0, 10.0, 5.0, 20.0, 0.0)
        assert got == pytest.approx(10.0 / 15.0 * 400.0)

    def test_fixed_point(self):
        assert adjust_for_queue(300.0, 15.0, 5.0, 20.0, 0.0) == \
            pytest.approx(300.0)

    def test_precondition(self):
        with pytest.raises(ValueError):
            adjust_for_queue(300.0, 0.0, 0.0, 20.0, 0.0)


class TestEffectiveDistance:
    # greens [-10, 20): next red starts 20 s after t = 0
    TIMING = SignalTiming(green_duration=30.0, red_duration=30.0,
                          offset=-10.0)

    def test_no_queue(self):
        view = make_view(0.0, -300.0, 10.0)
        assert effective_distance(view, self.TIMING) == 300.0

    def test_queue_shortens(self):
        q = QueueEstimate(v_ac=5.0, length=30.0)
        view = make_view(0.0, -300.0, 10.0, queue=q)
        assert effective_distance(view, self.TIMING) == \
            pytest.approx(10.0 / 15.0 * 400.0)

    def test_capped_at_raw_distance(self):
        # fast CAV: the formula exceeds D and is capped
        q = QueueEstimate(v_ac=5.0, length=30.0)
        view = make_view(0.0, -200.0, 15.0, n_follow=0, queue=q)
        assert effective_distance(view, self.TIMING) == 200.0

    def test_standstill_skips_correction(self):
        q = QueueEstimate(v_ac=5.0, length=30.0)
        view = make_view(0.0, -300.0, 0.05, queue=q)
        assert effective_distance(view, self.TIMING) == 300.0


class TestEstimateQueue:
    def test_no_queue(self):
        x = np.array([-50.0, -120.0])
        v = np.array([8.0, 11.0])
        assert estimate_queue(x, v, 5.0, 300.0) is None

    def test_basic_estimate(self):
        x = np.array([-4.0, -12.0, -250.0])
        v = np.array([0.0, 0.2, 9.0])
        q = estimate_queue(x, v, 6.0, 300.0)
        assert q.length == pytest.approx(12.0)
        assert q.v_ac == pytest.approx(2.0)

    def test_shockwave_clamped(self):
        x = np.array([-100.0])
        v = np.array([0.0])
        assert estimate_queue(x, v, 5.0, 300.0).v_ac == 10.0
        assert estimate_queue(x, v, 500.0, 300.0).v_ac == 1.0

    def test_outside_zone_ignored(self):
        x = np.array([-350.0, 5.0])
        v = np.array([0.0, 0.0])
        assert estimate_queue(x, v, 5.0, 300.0) is None


class TestPartitionPlatoon:
    def test_stops_at_next_cav(self):
        assert partition_platoon([False] * 4 + [True], 10.0) == 4

    def test_cap_rule(self):
        assert partition_platoon([False] * 6, 3.7) == 3

    def test_full_mpr_degenerate(self):
        assert partition_platoon([True, False, False], 10.0) == 0

    def test_empty_road(self):
        assert partition_platoon([], 5.0) == 0


class TestFsm:
    # green [0, 30), red [30, 60)
    TIMING = SignalTiming(green_duration=30.0, red_duration=30.0)

    def test_uncontrolled_in_observation_zone(self):
        cfg = make_cfg()
        rec = CavAgent()
        view = make_view(1.0, -400.0, 10.0, pred_gap=25.0)
        a = step_fsm(rec, view, self.TIMING, cfg)
        assert rec.state is CavFsmState.UNCONTROLLED
        assert rec.transitions == [] and rec.solves == 0
        assert a == pytest.approx(ovm_accel(OVM, 25.0 + OVM.l_veh, 10.0))

    def test_free_drive_without_predecessor(self):
        cfg = make_cfg()
        rec = CavAgent()
        a = step_fsm(rec, make_view(0.0, -500.0, 10.0), self.TIMING, cfg)
        assert a == pytest.approx(OVM.kappa * (cfg.v_max - 10.0))

    def test_entry_plans_and_controls(self):
        cfg = make_cfg()
        rec = CavAgent()
        view = make_view(0.5, -299.0, 8.0)
        a = step_fsm(rec, view, self.TIMING, cfg)
        assert rec.state is CavFsmState.CONTROLLED
        assert [(f, s) for _, f, s in rec.transitions] == [
            ("uncontrolled", "computed"), ("computed", "controlled")]
        assert rec.solves == 1 and rec.failed_solves == 0
        plan = rec.plan
        assert plan.solver_status == "converged"
        assert plan.times[0] == pytest.approx(0.5)
        assert plan.times[-1] == pytest.approx(0.5 + 299.0 / cfg.platoon_cap)
        assert a == pytest.approx(float(plan.u[0]))
        # playback fidelity on a later step, no new transitions
        later = make_view(0.8, -296.0, 8.4)
        a2 = step_fsm(rec, later, self.TIMING, cfg)
        assert a2 == pytest.approx(float(np.interp(0.8, plan.times, plan.u)))
        assert len(rec.transitions) == 2

    def _controlled_rec(self, cfg):
        rec = CavAgent()
        step_fsm(rec, make_view(0.5, -299.0, 8.0), self.TIMING, cfg)
        assert rec.state is CavFsmState.CONTROLLED
        return rec

    def test_close_gap_triggers_replan(self):
        cfg = make_cfg()
        rec = self._controlled_rec(cfg)
        old_plan = rec.plan
        view = make_view(1.5, -200.0, 8.5, pred_gap=5.9)
        a = step_fsm(rec, view, self.TIMING, cfg)
        assert rec.state is CavFsmState.CONTROLLED
        assert [(f, s) for _, f, s in rec.transitions[-2:]] == [
            ("controlled", "recomputed"), ("recomputed", "controlled")]
        assert rec.solves == 2 and rec.plan is not old_plan
        assert rec.last_replan == pytest.approx(1.5)
        assert a == pytest.approx(float(rec.plan.u[0]))
        # within the cooldown the same gap does not re-trigger
        again = make_view(1.6, -199.2, 8.5, pred_gap=5.9)
        a2 = step_fsm(rec, again, self.TIMING, cfg)
        assert rec.solves == 2
        assert a2 == pytest.approx(
            float(np.interp(1.6, rec.plan.times, rec.plan.u)))

    def test_close_gap_near_line_falls_back(self):
        cfg = make_cfg()
        rec = self._controlled_rec(cfg)
        # D = 100 <= kc * L_ctrl = 150: no room left to re-plan
        view = make_view(5.0, -100.0, 11.0, pred_gap=5.0)
        a = step_fsm(rec, view, self.TIMING, cfg)
        assert rec.fallback
        assert [(f, s) for _, f, s in rec.transitions[-2:]] == [
            ("controlled", "recomputed"), ("recomputed", "ovm_terminal")]
        assert a == pytest.approx(ovm_accel(OVM, 5.0 + OVM.l_veh, 11.0))
        # fallback is permanent
        a2 = step_fsm(rec, make_view(5.1, -99.0, 10.9, pred_gap=5.1),
                      self.TIMING, cfg)
        assert rec.solves == 1 and len(rec.transitions) == 4
        assert a2 == pytest.approx(ovm_accel(OVM, 5.1 + OVM.l_veh, 10.9))

    def test_invalid_problem_falls_back(self):
        cfg = make_cfg()
        rec = CavAgent()
        # followers bunched below the safety gap: problem rejected
        view = WorldView(t=0.0, x=-299.0, v=8.0,
                         follower_x=(-305.5, -312.0),
                         follower_v=(8.0, 8.0))
        a = step_fsm(rec, view, self.TIMING, cfg)
        assert rec.fallback and rec.failed_solves == 1
        assert [(f, s) for _, f, s in rec.transitions] == [
            ("uncontrolled", "computed"), ("computed", "ovm_terminal")]
        assert a == pytest.approx(OVM.kappa * (cfg.v_max - 8.0))

    def test_no_window_falls_back(self):
        cfg = make_cfg(v_min=5.0)
        narrow = SignalTiming(green_duration=2.0, red_duration=58.0,
                              offset=10.0)
        rec = CavAgent()
        a = step_fsm(rec, make_view(0.0, -299.0, 8.0), narrow, cfg)
        assert rec.fallback and rec.solves == 0
        assert rec.transitions[-1][1:] == ("computed", "ovm_terminal")
        assert math.isfinite(a)

    def test_transition_log_stays_within_graph(self):
        cfg = make_cfg()
        recs = [self._controlled_rec(cfg)]
        step_fsm(recs[0], make_view(5.0, -100.0, 11.0, pred_gap=5.0),
                 self.TIMING, cfg)
        rec2 = CavAgent()
        step_fsm(rec2, make_view(0.0, -299.0, 8.0), self.TIMING, cfg)
        recs.append(rec2)
        for rec in recs:
            for _, frm, to in rec.transitions:
                assert (frm, to) in ALLOWED_TRANSITIONS


class TestPccPlus:
    TIMING = SignalTiming(green_duration=30.0, red_duration=30.0)

    def test_tracking_fixed_point(self):
        cfg = make_cfg()
        rec = CavAgent()
        view = make_view(0.0, -300.0, 15.0, n_follow=0)
        a = pcc_plus_command(rec, view, self.TIMING, cfg)
        assert abs(a) < 1e-12

    def test_settles_at_target(self):
        cfg = make_cfg()
        rec = CavAgent()
        x, v, t = -300.0, 8.0, 0.0
        dt = cfg.tracker_dt
        for _ in range(80):
            view = WorldView(t=t, x=x, v=v)
            a = pcc_plus_command(rec, view, self.TIMING, cfg)
            assert cfg.a_min - 1e-12 <= a <= cfg.a_max + 1e-12
            v = v + a * dt
            x = x + v * dt
            t += dt
        assert v == pytest.approx(15.0, abs=0.2)

    def test_gap_guard_never_violates_safety(self):
        cfg = make_cfg()
        rec = CavAgent()
        x, v, t = -120.0, 12.0, 0.0
        pred_x = -60.0
        dt = cfg.tracker_dt
        min_gap = math.inf
        for _ in range(300):
            view = WorldView(t=t, x=x, v=v, pred_x=pred_x, pred_v=0.0)
            a = pcc_plus_command(rec, view, self.TIMING, cfg)
            v = max(0.0, v + a * dt)
            x = x + v * dt
            t += dt
            min_gap = min(min_gap, pred_x - x - OVM.l_veh)
        assert min_gap >= cfg.d_safe - 1e-9
        assert v < 0.05  # halted behind the stopped predecessor

    def test_no_window_falls_back_to_ovm(self):
        cfg = make_cfg(v_min=5.0)
        narrow = SignalTiming(green_duration=2.0, red_duration=58.0,
                              offset=10.0)
        rec = CavAgent()
        view = make_view(0.0, -300.0, 8.0, n_follow=0, pred_gap=20.0)
        a = pcc_plus_command(rec, view, narrow, cfg)
        assert rec.fallback
        assert a == pytest.approx(ovm_accel(OVM, 20.0 + OVM.l_veh, 8.0))
