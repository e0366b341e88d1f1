"""Throughput-optimal equilibrium: oracle pins and certificates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonlab.equilibrium import solve_vstar
from platoonlab.models import OvmParams, equilibrium_spacing, ovm_accel

PARAMS = OvmParams()

# Frozen 0.001 m/s exhaustive-grid oracle over (0, v1+v2), default params:
# argmax of v/d(v) and its value/spacing at the grid point.
GRID_VSTAR = 12.326
GRID_FSTAR = 0.5173917531661818
GRID_DSTAR = 23.82334067864356


class TestGoldenValues:
    def test_matches_grid_oracle(self):
        sol = solve_vstar(PARAMS, t_green=30.0)
        assert abs(sol.v_star - GRID_VSTAR) < 0.005
        assert abs(sol.d_star - GRID_DSTAR) < 0.005
        # refinement never loses to the scan it started from
        assert sol.f_star >= GRID_FSTAR - 1e-15
        assert abs(sol.f_star - GRID_FSTAR) < 1e-6
        assert not sol.degenerate

    def test_passing_count(self):
        sol = solve_vstar(PARAMS, t_green=20.0)
        assert sol.n_max == pytest.approx(sol.v_star * 20.0 / sol.d_star, rel=1e-12)
        # ~10 vehicles clear a 20 s green at the optimum
        assert 10.0 < sol.n_max < 10.7

    def test_fixed_point_of_car_following(self):
        sol = solve_vstar(PARAMS, t_green=30.0)
        assert abs(ovm_accel(PARAMS, sol.d_star, sol.v_star)) <= 1e-9


class TestSignalIndependence:
    def test_vstar_identical_nmax_scales(self):
        s10 = solve_vstar(PARAMS, t_green=10.0)
        s40 = solve_vstar(PARAMS, t_green=40.0)
        assert s10.v_star == s40.v_star
        assert s10.d_star == s40.d_star
        assert s40.n_max == 4.0 * s10.n_max


class TestOptimalityCertificates:
    def test_first_order_condition(self):
        # d(v) - d'(v) v = 0 at the optimum, d' by central differences
        sol = solve_vstar(PARAMS, t_green=30.0)
        h = 1e-5
        dp = (
            equilibrium_spacing(PARAMS, sol.v_star + h)
            - equilibrium_spacing(PARAMS, sol.v_star - h)
        ) / (2.0 * h)
        resid = abs(sol.d_star - dp * sol.v_star) / sol.d_star
        assert resid < 1e-4

    def test_interior_local_max(self):
        sol = solve_vstar(PARAMS, t_green=30.0)
        lo = max(0.0, PARAMS.v1 - PARAMS.v2)
        hi = min(15.0, PARAMS.v1 + PARAMS.v2)
        assert lo + 0.1 < sol.v_star < hi - 0.1

        def flow(v):
            return v / equilibrium_spacing(PARAMS, v)

        delta = 0.05
        left_slope = flow(sol.v_star) - flow(sol.v_star - delta)
        right_slope = flow(sol.v_star + delta) - flow(sol.v_star)
        assert left_slope > 0.0 > right_slope


class TestDegenerateAndErrors:
    def test_proportional_spacing_flags_degenerate(self):
        sol = solve_vstar(PARAMS, t_green=30.0, spacing_fn=lambda v: 2.0 * np.asarray(v))
        assert sol.degenerate
        lo = max(0.0, PARAMS.v1 - PARAMS.v2)
        hi = min(15.0, PARAMS.v1 + PARAMS.v2)
        assert sol.v_star == pytest.approx(0.5 * (lo + hi))
        assert sol.f_star == pytest.approx(0.5)

    def test_empty_interval_raises(self):
        fast = OvmParams(v1=20.0, v2=1.0)  # window (19, 21) above the 15 cap
        with pytest.raises(ValueError, match="empty admissible"):
            solve_vstar(fast, t_green=30.0)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            solve_vstar(PARAMS, t_green=0.0)
        with pytest.raises(ValueError):
            solve_vstar(PARAMS, t_green=30.0, grid_step=-0.1)


@given(
    v1=st.floats(5.0, 8.0),
    v2=st.floats(6.0, 9.0),
    c1=st.floats(0.08, 0.2),
    c2=st.floats(1.0, 2.0),
)
@settings(max_examples=40, deadline=None)
def test_solution_beats_grid_neighbours(v1, v2, c1, c2):
    p = OvmParams(v1=v1, v2=v2, c1=c1, c2=c2)
    sol = solve_vstar(p, t_green=30.0, grid_step=0.01)
    assert not sol.degenerate
    assert sol.d_star > 0.0

    def flow(v):
        return v / equilibrium_spacing(p, v)

    assert sol.f_star == pytest.approx(flow(sol.v_star), rel=1e-12)
    for dv in (-0.01, 0.01):
        v = sol.v_star + dv
        if max(0.0, v1 - v2) < v < min(15.0, v1 + v2):
            if equilibrium_spacing(p, v) > p.l_veh:  # same feasibility rule
                assert flow(v) <= sol.f_star + 1e-12
