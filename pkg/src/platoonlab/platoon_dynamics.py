"""Linear state-space analysis of the 1+n mixed platoon.

The platoon state is X = [x0, v0, d1~, v1~, ..., dn~, vn~] where the
leading vehicle keeps absolute position/velocity and each follower
carries spacing and velocity errors. This module assembles the block
(A, B) pair, classifies open-loop stability from the spectrum, and
decides controllability both by the closed-form coefficient condition
and by the eigenvalue-wise PBH rank test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import LinearCoeffs


@dataclass(frozen=True)
class PlatoonModel:
    """Immutable (A, B) pair for a platoon with n followers."""

    n: int
    coeffs: LinearCoeffs
    a_matrix: np.ndarray
    b_matrix: np.ndarray

    @property
    def dim(self) -> int:
        return 2 * self.n + 2


@dataclass(frozen=True)
class StabilityReport:
    """Spectrum classification of the open-loop platoon.

    zero_count counts eigenvalues below the zero tolerance; the platoon
    is Lyapunov stable when exactly the two structural zero eigenvalues
    remain and everything else has strictly negative real part.
    """

    eigenvalues: np.ndarray
    zero_count: int
    is_lyapunov_stable: bool
    max_real_part_nonzero: float
    zero_tol: float = field(default=1e-9)


def build_platoon(coeffs: LinearCoeffs, n: int) -> PlatoonModel:
    """Assemble the (2n+2)-dimensional platoon state-space pair.

    Block template: the leading-vehicle rows integrate position from
    velocity and take the single control input; each follower block
    couples to its predecessor's velocity entry.
    """
    if n < 1:
        raise ValueError(f"platoon needs at least one follower, got n={n}")
    a1, a2, a3 = coeffs.alpha1, coeffs.alpha2, coeffs.alpha3
    dim = 2 * n + 2
    blk_own = np.array([[0.0, -1.0], [a1, -a2]])     # own (spacing, velocity)
    blk_pred = np.array([[0.0, 1.0], [0.0, a3]])     # predecessor velocity
    blk_lead = np.array([[0.0, 1.0], [0.0, 0.0]])    # leader kinematics

    a = np.zeros((dim, dim))
    a[0:2, 0:2] = blk_lead
    for i in range(1, n + 1):
        r = 2 * i
        a[r:r + 2, r - 2:r] = blk_pred
        a[r:r + 2, r:r + 2] = blk_own
    b = np.zeros((dim, 1))
    b[1, 0] = 1.0
    return PlatoonModel(n=n, coeffs=coeffs, a_matrix=a, b_matrix=b)


def closed_form_spectrum_n1(coeffs: LinearCoeffs) -> np.ndarray:
    """Eigenvalues of the n = 1 platoon in closed form.

    Two structural zeros plus the roots of lambda^2 + alpha2 lambda +
    alpha1; the discriminant may be negative, hence complex output.
    """
    a1, a2 = coeffs.alpha1, coeffs.alpha2
    disc = np.emath.sqrt(a2 * a2 - 4.0 * a1)
    return np.array([0.0, 0.0, (-a2 + disc) / 2.0, (-a2 - disc) / 2.0],
                    dtype=complex)


def follower_block_roots(coeffs: LinearCoeffs) -> np.ndarray:
    """Roots of lambda^2 + alpha2 lambda + alpha1.

    Each additional follower appends exactly this conjugate pair (or
    real pair) to the platoon spectrum.
    """
    a1, a2 = coeffs.alpha1, coeffs.alpha2
    disc = np.emath.sqrt(a2 * a2 - 4.0 * a1)
    return np.array([(-a2 + disc) / 2.0, (-a2 - disc) / 2.0], dtype=complex)


def stability_report(model: PlatoonModel,
                     zero_tol: float = 1e-9) -> StabilityReport:
    """Classify the open-loop spectrum of the platoon.

    An eigenvalue counts as structurally zero when its magnitude is
    below zero_tol relative to max(1, spectral radius). Lyapunov
    stability requires exactly two such zeros and strictly negative real
    part everywhere else; the double zero rules out asymptotic
    stability regardless of platoon size.
    """
    if zero_tol <= 0:
        raise ValueError("zero_tol must be positive")
    try:
        eig = np.linalg.eigvals(model.a_matrix)
    except np.linalg.LinAlgError as err:
        cond = float(np.linalg.cond(model.a_matrix + np.eye(model.dim)))
        raise ArithmeticError(
            f"eigen-decomposition failed (shifted condition {cond:.3e})"
        ) from err
    radius = float(np.max(np.abs(eig))) if eig.size else 0.0
    tol = zero_tol * max(1.0, radius)
    zero_mask = np.abs(eig) <= tol
    zero_count = int(np.count_nonzero(zero_mask))
    nonzero = eig[~zero_mask]
    max_re = float(np.max(nonzero.real)) if nonzero.size else float("-inf")
    stable = zero_count == 2 and (nonzero.size == 0 or max_re < 0.0)
    return StabilityReport(eigenvalues=eig, zero_count=zero_count,
                           is_lyapunov_stable=stable,
                           max_real_part_nonzero=max_re, zero_tol=zero_tol)


def controllability_condition(coeffs: LinearCoeffs,
                              tol: float = 1e-9) -> bool:
    """Closed-form controllability condition on the coefficients.

    The platoon is controllable (for every n) when alpha1 - alpha2*alpha3
    + alpha3^2 is nonzero; values within tol of zero count as violating.
    """
    value = coeffs.alpha1 - coeffs.alpha2 * coeffs.alpha3 \
        + coeffs.alpha3 * coeffs.alpha3
    return abs(value) > tol


def is_controllable_numeric(model: PlatoonModel,
                            rank_tol: float = 1e-10) -> bool:
    """PBH rank test over every eigenvalue of A.

    Checks rank [lambda I - A, B] = 2n+2 via singular values with
    threshold rank_tol * sigma_max. The Kalman matrix is deliberately
    avoided: it is catastrophically ill-conditioned beyond n of about 4.
    """
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    a = model.a_matrix
    b = model.b_matrix
    dim = a.shape[0]
    eye = np.eye(dim)
    try:
        eig = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as err:
        raise ArithmeticError("eigen-decomposition failed in PBH test") from err
    # eigenvalues clustered closer than the rank tolerance scale give the
    # same pencil; dedupe to stay cheap on large platoons
    tested: list[complex] = []
    for lam in eig:
        if any(abs(lam - t) < 1e-12 for t in tested):
            continue
        tested.append(complex(lam))
        pencil = np.hstack([lam * eye - a, b]).astype(complex)
        try:
            sv = np.linalg.svd(pencil, compute_uv=False)
        except np.linalg.LinAlgError as err:
            raise ArithmeticError(
                f"SVD failed in PBH test at eigenvalue {lam}") from err
        if sv[-1] <= rank_tol * sv[0]:
            return False
    return True
