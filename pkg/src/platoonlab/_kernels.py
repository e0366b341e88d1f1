"""Hot numeric kernels, written once and compiled per the active backend.

Everything here is vectorized numpy operating on plain float64 arrays so
that the same source runs under numba nopython compilation and as the
pure-numpy fallback (see :mod:`platoonlab._backend`). No python objects,
no dataclasses: callers unpack their parameter structs into scalars or
packed parameter vectors.

Kernel inventory:

* ``ovm_accel_vec``          car-following accelerations for a batch of vehicles
* ``fuel_rate_vec``          exact (nonsmooth) instantaneous fuel rates
* ``propagate_followers_trap`` implicit-trapezoid follower propagation
* ``ocp_shoot_value_grad``   augmented-Lagrangian value + exact adjoint
                             gradient of the control-space (single-shooting)
                             form of the trapezoidal transcription
* ``integrate_platoon_fine`` fine-grid RK4 replay of a plan for auditing
"""

import numpy as np

from ._backend import njit

# Layout of the packed parameter vector consumed by ocp_shoot_value_grad.
# Kept as module constants so ocp.py and the kernels cannot drift apart.
P_H = 0
P_KAPPA = 1
P_V1 = 2
P_V2 = 3
P_C1 = 4
P_C2 = 5
P_LVEH = 6
P_FALPHA = 7
P_B1 = 8
P_B2 = 9
P_MASS = 10
P_D1 = 11
P_D2 = 12
P_D3 = 13
P_XTAR = 14
P_VSTAR = 15
P_W1 = 16
P_W2 = 17
P_DMIN = 18
P_ALOF = 19
P_AHIF = 20
P_WS = 21
P_RHO = 22
P_VCAP = 23
P_TLO = 24
P_THI = 25
P_X0MAX = 26
PAR_LEN = 27


def ovm_accel_vec(kappa, v1, v2, c1, c2, lveh, headway, velocity, gain):
    """Acceleration commanded by the optimal velocity model, batched.

    headway is front-to-front spacing to the predecessor; gain is the
    per-vehicle sensitivity multiplier (1 for the deterministic model).
    """
    vdes = v1 + v2 * np.tanh(c1 * (headway - lveh) - c2)
    return gain * kappa * (vdes - velocity)


def fuel_rate_vec(falpha, b1, b2, mass, d1, d2, d3, velocity, accel):
    """Exact instantaneous fuel rate in ml/s, batched.

    Clamps velocity at zero from below; the inertial term only engages
    for strictly positive acceleration, the drive power clamps at zero.
    """
    v = np.maximum(velocity, 0.0)
    pt = d1 * v + d2 * v * v + d3 * v * v * v + mass * accel * v
    pt = np.maximum(pt, 0.0)
    inert = np.where(accel > 0.0, b2 * mass * accel * accel * v, 0.0)
    return falpha + b1 * pt + inert


def _trap_step_newton(xk, vk, fk, xp1, h, kappa, v1, v2, c1, c2, lveh):
    """One implicit-trapezoid follower step, solved by scalar Newton.

    Eliminating the position update leaves a single monotone equation in
    the new velocity (dF/dv = 1 + h*kappa/2 + h^2*kappa*V'/4 > 0), so the
    iteration is globally safe for any step size.
    """
    vn = vk + h * fk
    for _ in range(50):
        xn = xk + 0.5 * h * (vk + vn)
        th = np.tanh(c1 * ((xp1 - xn) - lveh) - c2)
        fn = kappa * (v1 + v2 * th - vn)
        res = vn - vk - 0.5 * h * (fk + fn)
        if abs(res) < 1e-13:
            break
        fp = kappa * v2 * c1 * (1.0 - th * th)
        dres = 1.0 + 0.5 * h * kappa + 0.25 * h * h * fp
        vn = vn - res / dres
    return xk + 0.5 * h * (vk + vn), vn


def propagate_followers_trap(x_lead, v_lead, x0f, v0f, h,
                             kappa, v1, v2, c1, c2, lveh):
    """Propagate follower chains under the implicit trapezoid rule.

    Given the leader trajectory sampled on a uniform grid (step h) and
    initial follower states, advances each follower against its
    predecessor with the same trapezoidal scheme the transcription uses.

    Returns (xf, vf) with shape (n_followers, N).
    """
    nf = x0f.shape[0]
    nn = x_lead.shape[0]
    xf = np.empty((nf, nn))
    vf = np.empty((nf, nn))
    for i in range(nf):
        if i == 0:
            xp = x_lead
        else:
            xp = xf[i - 1]
        x = x0f[i]
        v = v0f[i]
        xf[i, 0] = x
        vf[i, 0] = v
        for k in range(nn - 1):
            dx = xp[k] - x
            fk = kappa * (v1 + v2 * np.tanh(c1 * (dx - lveh) - c2) - v)
            x, v = _trap_step_newton(x, v, fk, xp[k + 1], h,
                                     kappa, v1, v2, c1, c2, lveh)
            xf[i, k + 1] = x
            vf[i, k + 1] = v
    return xf, vf


def ocp_shoot_value_grad(u, mu, par, x_init, v_init):
    """Augmented-Lagrangian value and exact gradient in control space.

    The trapezoidal transcription is solved in its sequential (single
    shooting) form: the state trajectory is the exact discrete solution
    for the given control sequence, so there are no defect constraints
    and the decision vector is just u.  The gradient chains through the
    implicit trapezoid steps with a per-step 2x2 adjoint solve, making it
    exact for the discrete problem up to the Newton tolerance.

    Inequalities g >= 0 carry Powell-Hestenes-Rockafellar multipliers mu
    and live on nodes 1..N-1 (node 0 is measured data, not a decision):
    follower headways above the floor, follower accelerations inside
    their box, every velocity inside [0, vcap], plus four terminal
    position faces.  The leader's grid endpoint differs from the exact
    continuous endpoint by h^2 (u_0 - u_{N-1}) / 12 (trapezoid error for
    piecewise-linear control telescopes), so the margined box [tlo, thi]
    is imposed on the corrected endpoint while the full box
    [xtar - x0max, xtar] is imposed on the grid endpoint that plans
    publish.  gin layout: [headway n*(N-1) | accel-low n*(N-1) |
    accel-high n*(N-1) | vel-low (n+1)*(N-1) | vel-high (n+1)*(N-1) |
    corr-high | corr-low | grid-high | grid-low].  The control box is
    left to the outer solver's variable bounds.

    With par[P_RHO] <= 0 the multiplier terms are skipped and the value
    is the bare (smoothed) objective: the finite-difference gradient
    check exercises that path.

    Returns (value, grad_u, gin, x, v).
    """
    h = par[P_H]
    kappa = par[P_KAPPA]
    v1 = par[P_V1]
    v2 = par[P_V2]
    c1 = par[P_C1]
    c2 = par[P_C2]
    lveh = par[P_LVEH]
    falpha = par[P_FALPHA]
    b1 = par[P_B1]
    b2 = par[P_B2]
    mass = par[P_MASS]
    d1 = par[P_D1]
    d2 = par[P_D2]
    d3 = par[P_D3]
    x_tar = par[P_XTAR]
    v_star = par[P_VSTAR]
    w1 = par[P_W1]
    w2 = par[P_W2]
    d_min = par[P_DMIN]
    a_lo_f = par[P_ALOF]
    a_hi_f = par[P_AHIF]
    ws = par[P_WS]
    rho = par[P_RHO]
    vcap = par[P_VCAP]
    t_lo = par[P_TLO]
    t_hi = par[P_THI]
    x0max = par[P_X0MAX]

    nveh = x_init.shape[0]
    n = nveh - 1
    nn = u.shape[0]
    m1 = nn - 1

    # forward sweep: leader closed-form, followers implicit trapezoid
    x = np.empty((nveh, nn))
    v = np.empty((nveh, nn))
    x[0, 0] = x_init[0]
    v[0, 0] = v_init[0]
    for k in range(m1):
        v[0, k + 1] = v[0, k] + 0.5 * h * (u[k] + u[k + 1])
        x[0, k + 1] = x[0, k] + 0.5 * h * (v[0, k] + v[0, k + 1])
    for i in range(1, nveh):
        x[i, 0] = x_init[i]
        v[i, 0] = v_init[i]
        xi = x_init[i]
        vi = v_init[i]
        for k in range(m1):
            dx = x[i - 1, k] - xi
            fk = kappa * (v1 + v2 * np.tanh(c1 * (dx - lveh) - c2) - vi)
            xi, vi = _trap_step_newton(xi, vi, fk, x[i - 1, k + 1], h,
                                       kappa, v1, v2, c1, c2, lveh)
            x[i, k + 1] = xi
            v[i, k + 1] = vi

    # follower accelerations and gap-sensitivities on the trajectory
    facc = np.empty((nveh, nn))
    fp = np.empty((nveh, nn))
    facc[0] = u
    fp[0] = 0.0
    for i in range(1, nveh):
        dx = x[i - 1] - x[i]
        th = np.tanh(c1 * (dx - lveh) - c2)
        facc[i] = kappa * (v1 + v2 * th - v[i])
        fp[i] = kappa * v2 * c1 * (1.0 - th * th)

    gu = np.zeros(nn)
    gx = np.zeros((nveh, nn))
    gv = np.zeros((nveh, nn))

    # quadrature weights: trapezoid over the node grid
    wq = np.full(nn, h)
    wq[0] = 0.5 * h
    wq[nn - 1] = 0.5 * h

    # smoothed running cost (softplus drive power, sigmoid a>0 gate)
    val = 0.0
    for i in range(nveh):
        vi = v[i]
        a = facc[i]
        p = d1 * vi + d2 * vi * vi + d3 * vi * vi * vi + mass * a * vi
        tp = p / ws
        ep = np.exp(-np.abs(tp))
        sig_p = np.where(tp >= 0.0, 1.0 / (1.0 + ep), ep / (1.0 + ep))
        sp = np.where(tp > 0.0, p, 0.0) + ws * np.log1p(ep)
        ta = a / ws
        ea = np.exp(-np.abs(ta))
        sig_a = np.where(ta >= 0.0, 1.0 / (1.0 + ea), ea / (1.0 + ea))
        g = falpha + b1 * sp + b2 * mass * a * a * vi * sig_a
        val += np.sum(wq * g)

        dgdv = b1 * sig_p * (d1 + 2.0 * d2 * vi + 3.0 * d3 * vi * vi + mass * a) \
            + b2 * mass * a * a * sig_a
        dgda = b1 * sig_p * (mass * vi) \
            + b2 * mass * vi * (2.0 * a * sig_a
                                + a * a * sig_a * (1.0 - sig_a) / ws)
        gv[i] += wq * dgdv
        if i == 0:
            gu += wq * dgda
        else:
            cfa = wq * dgda
            gx[i - 1] += cfa * fp[i]
            gx[i] -= cfa * fp[i]
            gv[i] -= cfa * kappa

    # terminal cost
    ex = x[0, nn - 1] - x_tar
    val += w1 * ex * ex
    gx[0, nn - 1] += 2.0 * w1 * ex
    for i in range(nveh):
        ev = v[i, nn - 1] - v_star
        val += w2 * ev * ev
        gv[i, nn - 1] += 2.0 * w2 * ev

    # inequalities on nodes 1..N-1, plus the terminal box faces
    n_in = 3 * n * m1 + 2 * nveh * m1 + 4
    gin = np.empty(n_in)
    for i in range(1, nveh):
        gin[(i - 1) * m1:i * m1] = (x[i - 1, 1:] - x[i, 1:]) - d_min
        gin[n * m1 + (i - 1) * m1:n * m1 + i * m1] = facc[i][1:] - a_lo_f
        gin[2 * n * m1 + (i - 1) * m1:2 * n * m1 + i * m1] = \
            a_hi_f - facc[i][1:]
    vbase = 3 * n * m1
    for i in range(nveh):
        gin[vbase + i * m1:vbase + (i + 1) * m1] = v[i, 1:]
        gin[vbase + nveh * m1 + i * m1:vbase + nveh * m1 + (i + 1) * m1] = \
            vcap - v[i, 1:]
    xtrap = x[0, nn - 1]
    xcorr = xtrap + h * h * (u[0] - u[nn - 1]) / 12.0
    gin[n_in - 4] = t_hi - xcorr
    gin[n_in - 3] = xcorr - t_lo
    gin[n_in - 2] = x_tar - xtrap
    gin[n_in - 1] = xtrap - (x_tar - x0max)

    if rho > 0.0:
        # Powell-Hestenes-Rockafellar terms: s = max(0, mu - rho*g)
        for i in range(1, nveh):
            gg = gin[(i - 1) * m1:i * m1]
            mm = mu[(i - 1) * m1:i * m1]
            s = np.maximum(0.0, mm - rho * gg)
            val += (0.5 / rho) * np.sum(s * s - mm * mm)
            gx[i - 1][1:] -= s
            gx[i][1:] += s

            glo = gin[n * m1 + (i - 1) * m1:n * m1 + i * m1]
            mlo = mu[n * m1 + (i - 1) * m1:n * m1 + i * m1]
            ghi = gin[2 * n * m1 + (i - 1) * m1:2 * n * m1 + i * m1]
            mhi = mu[2 * n * m1 + (i - 1) * m1:2 * n * m1 + i * m1]
            slo = np.maximum(0.0, mlo - rho * glo)
            shi = np.maximum(0.0, mhi - rho * ghi)
            val += (0.5 / rho) * np.sum(slo * slo - mlo * mlo)
            val += (0.5 / rho) * np.sum(shi * shi - mhi * mhi)
            cf = shi - slo  # net multiplier on d(facc_i), nodes 1..N-1
            gx[i - 1][1:] += cf * fp[i][1:]
            gx[i][1:] -= cf * fp[i][1:]
            gv[i][1:] -= cf * kappa
        for i in range(nveh):
            glo = gin[vbase + i * m1:vbase + (i + 1) * m1]
            mlo = mu[vbase + i * m1:vbase + (i + 1) * m1]
            ghi = gin[vbase + nveh * m1 + i * m1:
                      vbase + nveh * m1 + (i + 1) * m1]
            mhi = mu[vbase + nveh * m1 + i * m1:
                     vbase + nveh * m1 + (i + 1) * m1]
            slo = np.maximum(0.0, mlo - rho * glo)
            shi = np.maximum(0.0, mhi - rho * ghi)
            val += (0.5 / rho) * np.sum(slo * slo - mlo * mlo)
            val += (0.5 / rho) * np.sum(shi * shi - mhi * mhi)
            gv[i][1:] += shi - slo
        sa = max(0.0, mu[n_in - 4] - rho * gin[n_in - 4])
        sb = max(0.0, mu[n_in - 3] - rho * gin[n_in - 3])
        sc = max(0.0, mu[n_in - 2] - rho * gin[n_in - 2])
        sd = max(0.0, mu[n_in - 1] - rho * gin[n_in - 1])
        val += (0.5 / rho) * (sa * sa - mu[n_in - 4] * mu[n_in - 4])
        val += (0.5 / rho) * (sb * sb - mu[n_in - 3] * mu[n_in - 3])
        val += (0.5 / rho) * (sc * sc - mu[n_in - 2] * mu[n_in - 2])
        val += (0.5 / rho) * (sd * sd - mu[n_in - 1] * mu[n_in - 1])
        gx[0, nn - 1] += sa - sb + sc - sd
        pull_c = (sa - sb) * h * h / 12.0
        gu[0] += pull_c
        gu[nn - 1] -= pull_c

    # reverse sweep: adjoint of the implicit trapezoid steps.
    # For follower step k -> k+1 the implicit system is
    #   G1 = v' - v - h/2 (f_k + f') = 0,  G2 = x' - x - h/2 (v + v') = 0
    # with f' = f(p' - x', v'); solve M^T mu = -gbar for the step
    # multipliers, then push partials to (x,v,p) at k and p at k+1.
    for i in range(n, 0, -1):
        for k in range(m1 - 1, -1, -1):
            gxp = gx[i, k + 1]
            gvp = gv[i, k + 1]
            a11 = 0.5 * h * fp[i, k + 1]
            a12 = 1.0 + 0.5 * h * kappa
            a21 = 1.0
            a22 = -0.5 * h
            det = a11 * a22 - a21 * a12
            m1_ = (-a22 * gxp + a21 * gvp) / det
            m2_ = (a12 * gxp - a11 * gvp) / det
            gx[i, k] += m1_ * (0.5 * h * fp[i, k]) - m2_
            gv[i, k] += m1_ * (0.5 * h * kappa - 1.0) - 0.5 * h * m2_
            gx[i - 1, k] -= m1_ * 0.5 * h * fp[i, k]
            gx[i - 1, k + 1] -= m1_ * 0.5 * h * fp[i, k + 1]
    for k in range(m1 - 1, -1, -1):
        gxp = gx[0, k + 1]
        gvp = gv[0, k + 1]
        pull = 0.25 * h * h * gxp + 0.5 * h * gvp
        gu[k] += pull
        gu[k + 1] += pull
        gx[0, k] += gxp
        gv[0, k] += gvp + h * gxp

    return val, gu, gin, x, v


def integrate_platoon_fine(u_nodes, h, refine, x_init, v_init,
                           kappa, v1, v2, c1, c2, lveh):
    """Replay a plan on a refine-times finer grid with classic RK4.

    The CAV acceleration is the piecewise-linear interpolant of the plan
    control nodes; followers obey the unclamped OVM against their
    predecessor. Used by the independent plan auditor, so it shares no
    machinery with the transcription beyond the model formulas.

    Returns (xs, vs) of shape (n_veh, (N-1)*refine + 1).
    """
    nv = x_init.shape[0]
    nn = u_nodes.shape[0]
    nf = (nn - 1) * refine + 1
    hf = h / refine
    xs = np.empty((nv, nf))
    vs = np.empty((nv, nf))
    xs[:, 0] = x_init
    vs[:, 0] = v_init

    x = x_init.copy()
    v = v_init.copy()
    kx = np.empty((4, nv))
    kv = np.empty((4, nv))
    for s in range(nf - 1):
        t = s * hf
        for stage in range(4):
            if stage == 0:
                dt_s = 0.0
                xa = x
                va = v
            elif stage == 1:
                dt_s = 0.5 * hf
                xa = x + 0.5 * hf * kx[0]
                va = v + 0.5 * hf * kv[0]
            elif stage == 2:
                dt_s = 0.5 * hf
                xa = x + 0.5 * hf * kx[1]
                va = v + 0.5 * hf * kv[1]
            else:
                dt_s = hf
                xa = x + hf * kx[2]
                va = v + hf * kv[2]
            ts = t + dt_s
            # piecewise-linear control interpolation on the node grid
            pos = ts / h
            idx = int(pos)
            if idx >= nn - 1:
                idx = nn - 2
            frac = pos - idx
            ua = u_nodes[idx] * (1.0 - frac) + u_nodes[idx + 1] * frac
            kx[stage] = va
            kv[stage, 0] = ua
            for i in range(1, nv):
                dx = xa[i - 1] - xa[i]
                vdes = v1 + v2 * np.tanh(c1 * (dx - lveh) - c2)
                kv[stage, i] = kappa * (vdes - va[i])
        x = x + (hf / 6.0) * (kx[0] + 2.0 * kx[1] + 2.0 * kx[2] + kx[3])
        v = v + (hf / 6.0) * (kv[0] + 2.0 * kv[1] + 2.0 * kv[2] + kv[3])
        xs[:, s + 1] = x
        vs[:, s + 1] = v
    return xs, vs


ovm_accel_vec = njit(ovm_accel_vec)
fuel_rate_vec = njit(fuel_rate_vec)
_trap_step_newton = njit(_trap_step_newton)
propagate_followers_trap = njit(propagate_followers_trap)
ocp_shoot_value_grad = njit(ocp_shoot_value_grad)
integrate_platoon_fine = njit(integrate_platoon_fine)
