"""Quaternion helpers on the (x, y, z, w) real-last, Hamilton convention.

Composition order matches rotation matrices: ``rotate(quat_mul(a, b), v) ==
Ra @ Rb @ v``. Everything here accepts plain ndarrays or tape Variables; the
differentiable primitives live in :mod:`kinedyn.autodiff`, this module wires
them into the conventions used by the rest of the package.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import (quat_mul, quat_normalize, quat_to_matrix,
                       quat_to_rotvec, rotvec_to_quat)

__all__ = [
    "IDENTITY", "quat_mul", "quat_normalize", "quat_to_matrix",
    "quat_to_rotvec", "rotvec_to_quat", "quat_conjugate", "quat_inverse",
    "quat_delta", "quat_integrate", "from_axis_angle", "rotate_vector",
    "assert_unit",
]

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])

_CONJ = np.array([-1.0, -1.0, -1.0, 1.0])

UNIT_TOL = 1e-6


def assert_unit(q, name="quaternion"):
    qv = ad.value(q)
    err = abs(float(np.dot(qv, qv)) - 1.0)
    if err > UNIT_TOL:
        raise ValueError(f"{name} is not unit length (|q|^2 off by {err:.3e})")


def quat_conjugate(q):
    return q * _CONJ if isinstance(q, ad.Variable) else ad.value(q) * _CONJ


def quat_inverse(q):
    """Inverse of a unit quaternion (validated), i.e. its conjugate."""
    assert_unit(q)
    return quat_conjugate(q)


def quat_delta(q_next, q_curr):
    """Relative rotation taking q_curr to q_next: q_next * q_curr^{-1}."""
    assert_unit(q_next, "q_next")
    assert_unit(q_curr, "q_curr")
    return quat_mul(q_next, quat_conjugate(q_curr))


def quat_integrate(q, omega, dt):
    """Advance a unit quaternion by a world-frame angular velocity.

    q <- normalize(q + 0.5 * (omega_quat * q) * dt) with omega_quat the pure
    quaternion (wx, wy, wz, 0); the left product is the world-frame form.
    """
    omega_quat = ad.concat([omega, np.zeros(1)])
    return quat_normalize(q + (0.5 * dt) * quat_mul(omega_quat, q))


def from_axis_angle(axis, angle):
    """Unit quaternion for a rotation of `angle` about a (non-zero) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return rotvec_to_quat(axis * float(angle))


def rotate_vector(q, v):
    """Rotate a 3-vector by a unit quaternion."""
    return quat_to_matrix(q) @ v
