"""Rigid-body dynamics in world-frame spatial algebra.

Spatial vectors live at the world origin as [omega; v_O] (motion) and
[n_O; f] (force). Per-body spatial inertias are expressed about the origin,
so composite inertias add without frame transforms and the whole algorithm
vectorizes over DOF columns; the traced footprint stays O(bodies) tape nodes.

Conventions: gravity is (0, 0, -9.81) (z-up); generalized forces follow the
state layout of :mod:`kinedyn.skeleton`. ``inverse_dynamics`` returns the
actuation needed to realize an acceleration (gravity load included), so
``bias_forces`` (its qddot=0 case) is the combined Coriolis, centrifugal and
gravity term and forward dynamics solves M(q) qddot = tau + lam - bias.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import quaternions as qt
from .skeleton import com_local

__all__ = [
    "GRAVITY", "G_SPATIAL", "spatial_inertias", "mass_matrix", "crba",
    "inverse_dynamics", "rnea", "bias_forces", "forward_dynamics",
    "forward_dynamics_biased", "spatial_momentum", "com_positions",
    "kinetic_energy", "potential_energy", "integrate_semi_implicit",
]

GRAVITY = np.array([0.0, 0.0, -9.81])
G_SPATIAL = np.concatenate([np.zeros(3), GRAVITY])
G_SPATIAL.setflags(write=False)

_EYE3 = np.eye(3)


def spatial_inertias(char, cache):
    """Per-body 6x6 spatial inertia about the world origin."""
    lengths = cache.lengths
    out = []
    for b in range(char.n_bodies):
        body = char.bodies[b]
        m = body.mass
        rest = char.bone_lengths[b]
        if lengths is None or rest == 0.0:
            i_loc = body.inertia_a + rest * rest * body.inertia_b
        else:
            lb = lengths[b]
            i_loc = body.inertia_a + (lb * lb) * body.inertia_b
        r = cache.R[b]
        i_com = r @ i_loc @ ad.transpose(r)
        cl = com_local(char, b, lengths)
        if isinstance(cl, np.ndarray) and not np.any(cl):
            com_w = cache.origin[b]
        else:
            com_w = cache.origin[b] + r @ cl
        cx = ad.skew(com_w)
        tl = i_com - m * (cx @ cx)
        tr = m * cx
        top = ad.concat([tl, tr], axis=1)
        bot = ad.concat([-1.0 * tr, m * _EYE3], axis=1)
        out.append(ad.concat([top, bot], axis=0))
    return out


def mass_matrix(char, cache):
    """Joint-space mass matrix via the composite rigid-body algorithm."""
    inertias = spatial_inertias(char, cache)
    comp = [None] * char.n_bodies
    for b in reversed(range(char.n_bodies)):
        acc = inertias[b]
        for c in char.children[b]:
            acc = acc + comp[c]
        comp[b] = acc
    f_blocks = [comp[b] @ cache.S[:, char.dof_slices[b]]
                for b in range(char.n_bodies)]
    f = ad.concat(f_blocks, axis=1)
    g = ad.transpose(cache.S) @ f
    return g * char.mask_keep + ad.transpose(g * char.mask_strict)


def inverse_dynamics(char, cache, qdot, qddot=None, gravity=True):
    """Generalized forces realizing qddot at (q, qdot); qddot=None means 0.

    Recursive Newton-Euler, vectorized over DOF columns. Gravity load is
    included via the accelerating-base trick unless gravity=False.
    """
    s = cache.S
    sw = s * qdot
    vmat = sw @ char.anc_dof
    # carrier velocity of each axis: like vmat but without rotation carry
    # inside the root block (world-fixed root axes do not precess)
    vcar = sw @ char.anc_sdot
    c_omega = ad.cross(vcar[0:3, :], sw[0:3, :])
    c_lin = ad.cross(vcar[0:3, :], sw[3:6, :]) + ad.cross(vcar[3:6, :], sw[0:3, :])
    sdot_w = ad.concat([c_omega, c_lin], axis=0)
    inertias = spatial_inertias(char, cache)

    f_cols = []
    for b in range(char.n_bodies):
        anc = char.anc_body[:, b]
        a_b = sdot_w @ anc
        if qddot is not None:
            a_b = a_b + s @ (qddot * anc)
        if gravity:
            a_b = a_b - G_SPATIAL
        v_b = vmat[:, char.last_dof[b]]
        h_b = inertias[b] @ v_b
        w_b, u_b = v_b[0:3], v_b[3:6]
        bias = ad.concat([ad.cross(w_b, h_b[0:3]) + ad.cross(u_b, h_b[3:6]),
                          ad.cross(w_b, h_b[3:6])])
        f_b = inertias[b] @ a_b + bias
        f_cols.append(ad.reshape(f_b, (6, 1)))
    f = ad.concat(f_cols, axis=1)
    t = ad.transpose(s) @ f
    return ad.asum(t * char.anc_body, axis=1)


def bias_forces(char, cache, qdot, gravity=True):
    """Combined Coriolis, centrifugal, and gravity load h(q, qdot)."""
    return inverse_dynamics(char, cache, qdot, None, gravity=gravity)


crba = mass_matrix
rnea = inverse_dynamics


def forward_dynamics(char, cache, qdot, tau, lam=None, gravity=True,
                     fixed_base=False):
    """Solve M(q) qddot = tau + lam - bias for qddot (exact Cholesky solve).

    fixed_base=True clamps the root 6 DOFs (solves the joint sub-block only),
    used by anchored test plants.
    """
    m = mass_matrix(char, cache)
    rhs = tau - bias_forces(char, cache, qdot, gravity=gravity)
    if lam is not None:
        rhs = rhs + lam
    if fixed_base:
        qdd = ad.cholesky_solve(m[6:, 6:], rhs[6:])
        return ad.concat([np.zeros(6), qdd])
    return ad.cholesky_solve(m, rhs)


def forward_dynamics_biased(m, bias, tau, lam, learned_bias_matrix):
    """qddot = (M^{-1} + M^b)(tau + lam - bias) with a learned additive M^b."""
    return (ad.cholesky_inverse(m) + learned_bias_matrix) @ (tau + lam - bias)


def spatial_momentum(char, cache, qdot):
    """Total [angular momentum about origin; linear momentum]."""
    s = cache.S
    sw = s * qdot
    vmat = sw @ char.anc_dof
    inertias = spatial_inertias(char, cache)
    total = None
    for b in range(char.n_bodies):
        h_b = inertias[b] @ vmat[:, char.last_dof[b]]
        total = h_b if total is None else total + h_b
    return total


def com_positions(char, cache):
    out = []
    for b in range(char.n_bodies):
        cl = com_local(char, b, cache.lengths)
        if isinstance(cl, np.ndarray) and not np.any(cl):
            out.append(cache.origin[b])
        else:
            out.append(cache.origin[b] + cache.R[b] @ cl)
    return out


def kinetic_energy(char, cache, qdot):
    m = mass_matrix(char, cache)
    return 0.5 * float(np.dot(ad.value(qdot), ad.value(m) @ ad.value(qdot)))


def potential_energy(char, cache):
    coms = com_positions(char, cache)
    return float(sum(char.bodies[b].mass * 9.81 * ad.value(coms[b])[2]
                     for b in range(char.n_bodies)))


def integrate_semi_implicit(q, root_quat, qdot, qddot, dt):
    """One semi-implicit Euler step: velocity first, then position.

    Root orientation advances multiplicatively from the new world angular
    velocity; the exponential-coordinate slots q[3:6] are then rewritten from
    the integrated quaternion (the additive value for those slots is
    discarded, keeping the quaternion the single source of truth).
    """
    qdot_new = qdot + qddot * dt
    q_lin = q + qdot_new * dt
    quat_new = qt.quat_integrate(root_quat, qdot_new[3:6], dt)
    q_new = ad.concat([q_lin[0:3], ad.quat_to_rotvec(quat_new), q_lin[6:]])
    return q_new, quat_new, qdot_new
