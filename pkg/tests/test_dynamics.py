"""Rigid-body dynamics against textbook and conservation oracles."""
from __future__ import annotations

import time

import numpy as np
import pytest

import kinedyn.autodiff as ad
import kinedyn.quaternions as qt
from kinedyn.dynamics import (bias_forces, com_positions, forward_dynamics,
                              forward_dynamics_biased, integrate_semi_implicit,
                              inverse_dynamics, kinetic_energy, mass_matrix,
                              potential_energy, spatial_momentum)
from kinedyn.skeleton import fk, make_biped, make_chain
from tests.conftest import random_state

G = 9.81


def val(x):
    return np.asarray(ad.value(x))


def draw(char, rng, scale=0.3):
    q, qdot = random_state(char, rng, scale)
    return q, val(ad.rotvec_to_quat(q[3:6])), qdot


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# -- structural identities ---------------------------------------------------

def test_crba_columns_match_inverse_dynamics():
    # M e_i equals the torque of a unit-acceleration, zero-velocity,
    # zero-gravity state; 100 random biped states under a 5 s budget
    char = make_biped()
    rng = np.random.default_rng(0)
    t0 = time.time()
    for _ in range(100):
        q, quat, _ = draw(char, rng)
        cache = fk(char, q, quat)
        M = val(mass_matrix(char, cache))
        zero = np.zeros(char.nq)
        cols = np.stack([
            val(inverse_dynamics(char, cache, zero, e, gravity=False))
            for e in np.eye(char.nq)], axis=1)
        assert rel_err(M, cols) < 1e-8
    assert time.time() - t0 <= 5.0


def test_mass_matrix_symmetric_positive_definite():
    char = make_biped()
    rng = np.random.default_rng(4)
    for _ in range(20):
        q, quat, _ = draw(char, rng)
        M = val(mass_matrix(char, fk(char, q, quat)))
        assert rel_err(M, M.T) < 1e-12
        assert np.linalg.eigvalsh(M)[0] > 0


def test_forward_inverse_round_trip():
    char = make_biped()
    rng = np.random.default_rng(1)
    for _ in range(20):
        q, quat, qdot = draw(char, rng)
        cache = fk(char, q, quat)
        qddot = rng.normal(size=char.nq)
        tau = inverse_dynamics(char, cache, qdot, qddot)
        back = val(forward_dynamics(char, cache, qdot, tau))
        assert rel_err(back, qddot) < 1e-8


def test_bias_forces_are_zero_acceleration_torques():
    char = make_chain(3)
    rng = np.random.default_rng(7)
    q, quat, qdot = draw(char, rng)
    cache = fk(char, q, quat)
    h = val(bias_forces(char, cache, qdot))
    tau0 = val(inverse_dynamics(char, cache, qdot, None))
    assert np.allclose(h, tau0, atol=1e-12)


def test_forward_dynamics_biased_reduces_to_plain():
    char = make_biped()
    rng = np.random.default_rng(8)
    q, quat, qdot = draw(char, rng)
    cache = fk(char, q, quat)
    tau = rng.normal(size=char.nq)
    m = mass_matrix(char, cache)
    h = bias_forces(char, cache, qdot)
    a1 = val(forward_dynamics_biased(m, h, tau, np.zeros(char.nq),
                                     np.zeros((char.nq, char.nq))))
    a2 = val(forward_dynamics(char, cache, qdot, tau))
    assert rel_err(a1, a2) < 1e-10


# -- closed-form oracles -----------------------------------------------------

def test_double_pendulum_mass_matrix_closed_form():
    # textbook planar double pendulum: point masses at the link ends,
    # M = [[(m1+m2)l1^2 + m2 l2^2 + 2 m2 l1 l2 c2, m2 l2^2 + m2 l1 l2 c2],
    #      [sym,                                   m2 l2^2]]
    l1, l2 = 0.7, 0.4
    char = make_chain(2, link_length=np.array([l1, l2]), point_mass=True,
                      com_at_end=True, point_radius=0.0)
    rng = np.random.default_rng(3)
    for _ in range(10):
        th2 = rng.uniform(-2.5, 2.5)
        th1 = rng.uniform(-2.5, 2.5)
        q = np.zeros(char.nq)
        q[7], q[10] = th1, th2
        M = val(mass_matrix(char, fk(char, q, qt.IDENTITY)))
        c2 = np.cos(th2)
        m1_, m2_ = 1.0, 1.0      # builder default masses
        exp = np.array([
            [(m1_ + m2_) * l1**2 + m2_ * l2**2 + 2 * m2_ * l1 * l2 * c2,
             m2_ * l2**2 + m2_ * l1 * l2 * c2],
            [m2_ * l2**2 + m2_ * l1 * l2 * c2, m2_ * l2**2]])
        got = M[np.ix_([7, 10], [7, 10])]
        assert np.abs(got - exp).max() < 1e-9


def test_static_chain_root_supports_weight():
    char = make_chain(3)
    q = np.zeros(char.nq)
    cache = fk(char, q, qt.IDENTITY)
    tau = val(inverse_dynamics(char, cache, np.zeros(char.nq), None))
    assert tau[2] == pytest.approx(char.total_mass * G, rel=1e-12)


def test_spinning_body_centrifugal_matches_euler_equation():
    # rigid assembly spinning about the world origin: the rotational bias
    # force is the gyroscopic torque omega x (I omega) with I the assembly
    # angular inertia about the origin
    from kinedyn.dynamics import spatial_inertias
    char = make_chain(1, link_length=0.3, point_mass=False)
    q = np.zeros(char.nq)
    cache = fk(char, q, qt.IDENTITY)
    omega = np.array([2.0, -1.0, 3.0])
    qdot = np.zeros(char.nq)
    qdot[3:6] = omega
    h = val(bias_forces(char, cache, qdot, gravity=False))
    I3 = sum(val(I)[:3, :3] for I in spatial_inertias(char, cache))
    exp = np.cross(omega, I3 @ omega)
    assert np.allclose(h[3:6], exp, atol=1e-10)


# -- integrator physics -------------------------------------------------------

def simulate_passive(char, q0, quat0, qdot0, dt, steps, gravity=True):
    q, quat, qdot = q0.copy(), quat0.copy(), qdot0.copy()
    qs, quats, qdots = [q], [quat], [qdot]
    for _ in range(steps):
        cache = fk(char, q, quat)
        qddot = forward_dynamics(char, cache, qdot, np.zeros(char.nq),
                                 gravity=gravity)
        q, quat, qdot = (val(x) for x in
                         integrate_semi_implicit(q, quat, qdot,
                                                 val(qddot), dt))
        qs.append(q); quats.append(quat); qdots.append(qdot)
    return np.array(qs), np.array(quats), np.array(qdots)


def com_of(char, q, quat):
    cache = fk(char, q, quat, with_motion=False)
    pos = val(com_positions(char, cache))
    masses = np.array([b.mass for b in char.bodies])
    return masses @ pos / masses.sum()


def test_free_fall_com_parabola():
    char = make_biped()
    q0 = np.zeros(char.nq)
    q0[2] = 5.0
    quat0 = qt.IDENTITY.copy()
    qdot0 = np.zeros(char.nq)
    dt, T = 0.02, 1.0
    steps = int(T / dt)
    qs, quats, _ = simulate_passive(char, q0, quat0, qdot0, dt, steps)
    z0 = com_of(char, q0, quat0)[2]
    zT = com_of(char, qs[-1], quats[-1])[2]
    analytic = z0 - 0.5 * G * T**2
    assert abs(zT - analytic) <= 2 * G * dt * T


def test_linear_momentum_exact_without_gravity():
    char = make_biped()
    rng = np.random.default_rng(12)
    q0, quat0, qdot0 = draw(char, rng, scale=0.2)
    qs, quats, qdots = simulate_passive(char, q0, quat0, qdot0, 0.01, 50,
                                        gravity=False)
    moms = [val(spatial_momentum(char, fk(char, qs[i], quats[i]),
                                 qdots[i]))[3:6]
            for i in (0, 25, 50)]
    drift = max(np.abs(moms[i + 1] - moms[i]).max() for i in range(2))
    assert drift / 25 < 1e-10


def test_angular_momentum_drift_halves_with_dt():
    char = make_chain(3, link_length=0.4)
    rng = np.random.default_rng(13)
    q0, quat0, qdot0 = draw(char, rng, scale=0.4)

    def drift(dt):
        steps = int(0.5 / dt)
        qs, quats, qdots = simulate_passive(char, q0, quat0, qdot0, dt,
                                            steps, gravity=False)
        h0 = val(spatial_momentum(char, fk(char, qs[0], quats[0]), qdots[0]))
        h1 = val(spatial_momentum(char, fk(char, qs[-1], quats[-1]),
                                  qdots[-1]))
        return np.abs(h1 - h0)[:3].max()

    d1, d2 = drift(0.008), drift(0.004)
    assert d2 / d1 < 0.62      # first-order integrator: halving dt at least
    assert d2 < d1             # roughly halves the conserved-quantity drift


def test_pendulum_small_angle_period():
    length = 0.8
    char = make_chain(1, link_length=length, point_mass=True,
                      com_at_end=True, point_radius=0.0)
    amp = 0.02
    q0 = np.zeros(char.nq)
    q0[7] = amp
    dt = 0.001
    qs, _, _ = simulate_passive(char, q0, qt.IDENTITY.copy(),
                                np.zeros(char.nq), dt, 4000)
    theta = qs[:, 7]
    # period from successive positive-going zero crossings
    crossings = np.where((theta[:-1] < 0) & (theta[1:] >= 0))[0]
    period = np.diff(crossings).mean() * dt
    assert period == pytest.approx(2 * np.pi * np.sqrt(length / G), rel=0.01)


def test_pendulum_energy_nearly_conserved():
    char = make_chain(1, link_length=0.5, point_mass=True, com_at_end=True,
                      point_radius=0.0)
    q0 = np.zeros(char.nq)
    q0[7] = 1.0
    dt = 0.0005
    qs, quats, qdots = simulate_passive(char, q0, qt.IDENTITY.copy(),
                                        np.zeros(char.nq), dt, 2000)
    def energy(i):
        cache = fk(char, qs[i], quats[i])
        return float(val(kinetic_energy(char, cache, qdots[i]))
                     + val(potential_energy(char, cache)))
    e0, e1 = energy(0), energy(2000)
    assert abs(e1 - e0) < 0.01 * abs(e0)


def test_kinetic_energy_quadratic_form():
    char = make_biped()
    rng = np.random.default_rng(21)
    q, quat, qdot = draw(char, rng)
    cache = fk(char, q, quat)
    ke = float(val(kinetic_energy(char, cache, qdot)))
    M = val(mass_matrix(char, cache))
    assert ke == pytest.approx(0.5 * qdot @ M @ qdot, rel=1e-10)
