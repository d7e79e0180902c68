"""Forward kinematics and point Jacobians against geometric oracles."""
from __future__ import annotations

import json

import numpy as np
import pytest

import kinedyn.autodiff as ad
import kinedyn.quaternions as qt
from kinedyn.skeleton import (SystemState, character_from_dict,
                              character_to_dict, fk, make_biped, make_chain,
                              make_humanoid17, point_jacobian,
                              point_velocity)
from tests.conftest import random_state


def val(x):
    return np.asarray(ad.value(x))


def keypoints(char, q, quat):
    return val(fk(char, q, quat, with_motion=False).keypoints)


def draw(char, rng, scale=0.3):
    q, _ = random_state(char, rng, scale)
    return q, val(ad.rotvec_to_quat(q[3:6]))


def test_two_link_planar_tip():
    # lengths 1,1 hanging along -z; pitching the first joint +90 deg swings
    # the straight pair horizontal: Ry(pi/2) maps (0,0,-1) to (-1,0,0)
    char = make_chain(2, link_length=1.0, point_mass=True, com_at_end=True)
    q = np.zeros(char.nq)
    q[7] = np.pi / 2            # first link pitch
    kp = keypoints(char, q, qt.IDENTITY)
    assert np.allclose(kp[1], [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(kp[2], [-2.0, 0.0, 0.0], atol=1e-12)


def test_two_link_planar_tip_rotated_root():
    char = make_chain(2, link_length=1.0, point_mass=True, com_at_end=True)
    q = np.zeros(char.nq)
    q[7] = np.pi / 2
    q[0:3] = [0.3, -0.2, 1.5]
    quat = qt.from_axis_angle([0, 0, 1], np.pi / 2)  # world yaw 90 deg
    kp = keypoints(char, q, val(quat))
    # local tip (-2,0,0); yaw 90 deg sends (x,y) to (-y,x); root offset adds
    assert np.allclose(kp[2], [0.3, -2.2, 1.5], atol=1e-12)


def test_straight_chain_hangs_down():
    char = make_chain(3, link_length=0.5)
    kp = keypoints(char, np.zeros(char.nq), qt.IDENTITY)
    assert np.allclose(kp[:, 2], [0.0, -0.5, -1.0, -1.5], atol=1e-12)


def test_fk_repeatable():
    char = make_biped()
    rng = np.random.default_rng(5)
    q, quat = draw(char, rng)
    assert np.array_equal(keypoints(char, q, quat),
                          keypoints(char, q, quat))


@pytest.mark.parametrize("builder", [
    lambda: make_chain(3, link_length=0.4),
    lambda: make_chain(5, link_length=0.3),
    make_biped,
])
def test_jacobian_matches_fk_differences(builder):
    char = builder()
    rng = np.random.default_rng(17)
    eps = 1e-6
    for _ in range(20 if char.n_bodies == 6 else 10):
        q, quat = draw(char, rng)
        cache = fk(char, q, quat)
        for body in range(1, char.n_bodies):
            J = val(point_jacobian(char, cache, body))
            # root rotation columns are world-frame rates; compare against
            # quaternion-perturbed FK for those three, coordinate FD for the
            # rest
            for k in range(char.nq):
                if 3 <= k < 6:
                    axis = np.zeros(3)
                    axis[k - 3] = 1.0
                    qp = val(ad.quat_mul(val(qt.from_axis_angle(axis, eps)),
                                         quat))
                    qm = val(ad.quat_mul(val(qt.from_axis_angle(axis, -eps)),
                                         quat))
                    kp = keypoints(char, q, qp)[body]
                    km = keypoints(char, q, qm)[body]
                else:
                    dq = q.copy()
                    dq[k] += eps
                    kp = keypoints(char, dq, quat)[body]
                    dq[k] -= 2 * eps
                    km = keypoints(char, dq, quat)[body]
                fd = (kp - km) / (2 * eps)
                scale = max(1.0, np.abs(fd).max())
                assert np.abs(J[:, k] - fd).max() / scale < 1e-6, \
                    f"body {body} dof {k}"


def test_tip_jacobian_100_random_states():
    char = make_chain(5, link_length=0.3)
    rng = np.random.default_rng(23)
    eps = 1e-6
    tip = char.n_bodies - 1
    for _ in range(100):
        q, quat = draw(char, rng)
        cache = fk(char, q, quat)
        J = val(point_jacobian(char, cache, tip))
        for k in list(range(0, 3)) + list(range(6, char.nq)):
            dq = q.copy()
            dq[k] += eps
            kp = keypoints(char, dq, quat)[tip]
            dq[k] -= 2 * eps
            km = keypoints(char, dq, quat)[tip]
            fd = (kp - km) / (2 * eps)
            scale = max(1.0, np.abs(fd).max())
            assert np.abs(J[:, k] - fd).max() / scale < 1e-6


def test_point_velocity_consistency():
    char = make_biped()
    rng = np.random.default_rng(2)
    q, quat = draw(char, rng)
    qdot = rng.normal(size=char.nq)
    cache = fk(char, q, quat)
    for body in (1, 3, 5):
        v1 = val(point_velocity(char, cache, qdot, body))
        v2 = val(point_jacobian(char, cache, body)) @ qdot
        assert np.allclose(v1, v2, atol=1e-12)


def test_jacobian_zero_off_chain():
    char = make_biped()
    rng = np.random.default_rng(9)
    q, quat = draw(char, rng)
    cache = fk(char, q, quat)
    J = val(point_jacobian(char, cache, char.left_foot))
    # right-leg DOFs (bodies 4, 5 -> slots 15..21) cannot move the left foot
    assert np.allclose(J[:, 15:21], 0.0)
    assert np.abs(J[:, 0:3]).max() > 0.9      # root translation always acts


def test_biped_shape():
    char = make_biped()
    assert char.nq == 21
    assert char.n_bodies == 6
    assert char.foot_bodies() == (3, 5)
    assert char.total_mass == pytest.approx(36.0)


def test_humanoid17_tree():
    char = make_humanoid17()
    assert char.n_bodies == 17
    assert char.nq == 6 + 16 * 3
    assert char.left_foot is not None and char.right_foot is not None


def test_character_dict_round_trip():
    char = make_biped()
    data = json.loads(json.dumps(character_to_dict(char)))
    back = character_from_dict(data)
    assert back.nq == char.nq
    assert back.total_mass == pytest.approx(char.total_mass)
    assert back.foot_bodies() == char.foot_bodies()
    rng = np.random.default_rng(1)
    q, quat = draw(char, rng)
    assert np.allclose(keypoints(char, q, quat),
                       keypoints(back, q, quat), atol=1e-12)


def test_make_character_validates_parent_order():
    from kinedyn.skeleton import _mk_body, Sphere, make_character
    bodies = [_mk_body("root", -1, 1.0, np.zeros(3), Sphere(0.1)),
              _mk_body("b", 5, 1.0, np.array([0, 0, -1.0]), Sphere(0.1))]
    with pytest.raises(ValueError):
        make_character("x", bodies)
