"""Rotation-matrix and heading calculus.

Conventions: ``R`` maps body vectors to the world frame, its columns are the
body axes b1, b2, b3 expressed in world coordinates.  Angular velocities are
body-frame, so ``dR/dt = R @ hat(omega)``.  Heading is the azimuth of b1
projected onto the world xy-plane, wrapped to (-pi, pi].
"""

from __future__ import annotations

import math

import numpy as np

E3 = np.array([0.0, 0.0, 1.0])

HEADING_EPS = 1e-6
_SKEW_TOL = 1e-9
_PROJ_EPS = 1e-9


class HeadingUndefined(ValueError):
    """b1 is (numerically) vertical, so the heading has no meaning."""


class DegenerateForce(ValueError):
    pass


class ParallelHeading(ValueError):
    pass


class DegenerateProjection(ValueError):
    pass


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def angle_diff(a: float, b: float) -> float:
    """Shortest signed arc from ``b`` to ``a``."""
    return wrap_angle(a - b)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def hat(w) -> np.ndarray:
    """Skew matrix such that ``hat(w) @ v == cross(w, v)``."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat`; rejects matrices that are not skew-symmetric."""
    m = np.asarray(m, dtype=float)
    if np.max(np.abs(m + m.T)) > _SKEW_TOL:
        raise ValueError("matrix is not skew-symmetric")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def expm_so3(w) -> np.ndarray:
    """Rodrigues formula for ``expm(hat(w))``."""
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    K = hat(w)
    if theta < 1e-8:
        # second-order Taylor keeps the result orthonormal to ~1e-24
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(R)
    Q = u @ vt
    if np.linalg.det(Q) < 0.0:
        u[:, -1] *= -1.0
        Q = u @ vt
    return Q


def tilt_angle(R: np.ndarray) -> float:
    """Angle between b3 and the world vertical."""
    return math.acos(max(-1.0, min(1.0, R[2, 2])))


def _heading_xy(R: np.ndarray) -> tuple[float, float]:
    x, y = R[0, 0], R[1, 0]
    if math.hypot(x, y) <= HEADING_EPS:
        raise HeadingUndefined("b1 is aligned with the world vertical")
    return x, y


def heading_of(R: np.ndarray) -> float:
    x, y = _heading_xy(R)
    return wrap_angle(math.atan2(y, x))


def heading_vector(R: np.ndarray) -> np.ndarray:
    """Unit heading vector [cos, sin, 0]."""
    x, y = _heading_xy(R)
    n = math.hypot(x, y)
    return np.array([x / n, y / n, 0.0])


def heading_rate_from_body_rates(R: np.ndarray, omega) -> float:
    """Heading rate produced by body rates ``omega`` at orientation ``R``.

    Evaluates the total differential of atan2(R21, R11) along dR = R hat(omega).
    """
    x, y = _heading_xy(R)
    Rdot = R @ hat(omega)
    return (-y * Rdot[0, 0] + x * Rdot[1, 0]) / (x * x + y * y)


def apply_heading(R_o: np.ndarray, heading: float) -> np.ndarray:
    """Rotate ``R_o`` about the world z-axis so that its heading becomes ``heading``."""
    delta = heading - heading_of(R_o)
    return rot_z(delta) @ R_o


def _thrust_axis(f_d) -> np.ndarray:
    f_d = np.asarray(f_d, dtype=float)
    n = np.linalg.norm(f_d)
    if n <= 1e-6:
        raise DegenerateForce("desired force is (close to) zero")
    return f_d / n


def desired_orientation_original(f_d, heading: float) -> np.ndarray:
    """b3 along ``f_d``, b1 the orthogonal projection of the heading vector.

    The heading of the result generally differs from ``heading`` when tilted.
    """
    b3 = _thrust_axis(f_d)
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    p2 = np.cross(b3, h)
    n = np.linalg.norm(p2)
    if n <= _PROJ_EPS:
        raise ParallelHeading("thrust axis is parallel to the heading vector")
    p2 /= n
    p1 = np.cross(p2, b3)
    return np.column_stack((p1, p2, b3))


def desired_orientation_heading_compliant(f_d, heading: float) -> np.ndarray:
    """b3 along ``f_d``, b1 the projection of the heading vector along e3.

    Sliding the heading vector vertically until it meets the plane orthogonal
    to b3 keeps its azimuth, so ``heading_of(result) == heading``.
    """
    b3 = _thrust_axis(f_d)
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    if abs(b3[2]) <= _PROJ_EPS or np.linalg.norm(np.cross(b3, h)) <= _PROJ_EPS:
        raise ParallelHeading("heading vector cannot be projected along e3 onto the thrust plane")
    b1 = h - (b3 @ h) / b3[2] * E3
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(b3, b1)
    return np.column_stack((b1, b2, b3))


def rotation_error(R_d: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Geometric attitude error vee(0.5 (R_d^T R - R^T R_d))."""
    E = 0.5 * (R_d.T @ R - R.T @ R_d)
    return np.array([E[2, 1], E[0, 2], E[1, 0]])


def heading_rate_to_yaw_rate(R: np.ndarray, heading_rate: float) -> float:
    """Body yaw rate (about b3) that realizes ``heading_rate`` at orientation ``R``."""
    if heading_rate == 0.0:
        return 0.0
    x, y = _heading_xy(R)
    h = np.array([x, y, 0.0])
    n = math.hypot(x, y)
    hdot = np.cross([0.0, 0.0, heading_rate], h)
    # e3 x h_hat spans the tangent of the heading circle
    t = np.array([-y / n, x / n, 0.0])
    p = t * (t @ R[:, 1])
    pn = np.linalg.norm(p)
    if pn <= _PROJ_EPS:
        raise DegenerateProjection("b2 has no component along the heading tangent")
    return math.copysign(1.0, hdot @ p) * np.linalg.norm(hdot) / pn


def parasitic_heading_rate(R: np.ndarray, omega) -> float:
    """Yaw rate equivalent of the heading rate induced by the roll/pitch rates.

    Only ``omega[0]`` and ``omega[1]`` are used.  Subtracting the returned
    value from the commanded yaw rate cancels the induced heading rate.
    """
    induced = heading_rate_from_body_rates(R, (omega[0], omega[1], 0.0))
    return heading_rate_to_yaw_rate(R, induced)
