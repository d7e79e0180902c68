"""Quaternion helper correctness against closed-form rotations."""
from __future__ import annotations

import numpy as np
import pytest

import kinedyn.autodiff as ad
import kinedyn.quaternions as qt


def val(x):
    return np.asarray(ad.value(x))


def test_identity_is_unit_and_no_op():
    assert np.allclose(np.linalg.norm(qt.IDENTITY), 1.0)
    v = np.array([0.3, -1.2, 2.0])
    assert np.allclose(val(qt.rotate_vector(qt.IDENTITY, v)), v)


def test_from_axis_angle_z_90deg():
    q = qt.from_axis_angle([0, 0, 1], np.pi / 2)
    # x axis maps to y axis
    assert np.allclose(val(qt.rotate_vector(q, [1.0, 0, 0])),
                       [0.0, 1.0, 0.0], atol=1e-12)


def test_rotate_matches_matrix():
    rng = np.random.default_rng(3)
    for _ in range(20):
        rv = rng.normal(size=3)
        v = rng.normal(size=3)
        q = val(ad.rotvec_to_quat(rv))
        R = val(ad.quat_to_matrix(q))
        assert np.allclose(val(qt.rotate_vector(q, v)), R @ v, atol=1e-12)


def test_conjugate_inverts_rotation():
    q = qt.from_axis_angle([1, 2, -1], 0.8)
    v = np.array([0.5, 0.1, -0.7])
    w = val(qt.rotate_vector(q, v))
    assert np.allclose(val(qt.rotate_vector(qt.quat_conjugate(q), w)), v,
                       atol=1e-12)


def test_mul_composes_rotations():
    qa = qt.from_axis_angle([0, 0, 1], 0.5)
    qb = qt.from_axis_angle([0, 1, 0], -0.3)
    v = np.array([1.0, -2.0, 0.5])
    lhs = val(qt.rotate_vector(ad.quat_mul(qa, qb), v))
    rhs = val(qt.rotate_vector(qa, qt.rotate_vector(qb, v)))
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_delta_recovers_increment():
    qa = qt.from_axis_angle([0.2, 1.0, 0.1], 0.4)
    dq = qt.from_axis_angle([1, 0, 0], 0.25)
    qb = val(ad.quat_mul(dq, qa))
    assert np.allclose(val(qt.quat_delta(qb, qa)), val(dq), atol=1e-12)


def test_integrate_constant_rate_matches_axis_angle():
    # spin about a fixed world axis; many small steps converge on the
    # closed-form rotation
    omega = np.array([0.0, 0.0, 1.3])
    dt = 1e-4
    q = qt.IDENTITY.copy()
    for _ in range(10000):
        q = val(qt.quat_integrate(q, omega, dt))
    q_ref = qt.from_axis_angle([0, 0, 1], 1.3)
    assert np.allclose(q, val(q_ref), atol=1e-4)


def test_integrate_preserves_unit_norm():
    rng = np.random.default_rng(0)
    q = val(qt.from_axis_angle([1, 1, 1], 0.7))
    for _ in range(200):
        q = val(qt.quat_integrate(q, rng.normal(size=3) * 5.0, 0.02))
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_assert_unit_rejects_non_unit():
    with pytest.raises(ValueError):
        qt.assert_unit(np.array([0.0, 0.0, 0.0, 1.5]))


def test_rotvec_round_trip():
    rng = np.random.default_rng(11)
    for _ in range(20):
        rv = rng.normal(size=3)
        if np.linalg.norm(rv) > 3.0:
            rv = rv / np.linalg.norm(rv) * 3.0
        back = val(ad.quat_to_rotvec(ad.rotvec_to_quat(rv)))
        assert np.allclose(back, rv, atol=1e-10)
