"""Meta-PD torque law and assembly of external contact forces.

The PD torque drives the predicted pose toward the filtered (updated) pose.
As printed in its source, the damping term enters with a plus sign; classical
PD damping is reachable via ``pd_damping_sign="classical"`` and the choice is a
documented configuration flag (the learned gains can absorb either).

Contact forces from the two feet map into generalized forces through the
contact-point Jacobians. The transpose mapping (virtual work) is the default;
``jacobian_transpose=False`` reinterprets the same Jacobian coefficients in
the (nq, 3) orientation, which only matters for a learned, orientation-free
Jacobian head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quaternions as qt

__all__ = [
    "PD_SCALE_KP", "PD_SCALE_KD", "PDGains", "ContactSet",
    "expand_group_scales", "default_gains", "pd_torque", "external_forces",
]

# per-group gain scales: (translation, root rotation, joints)
PD_SCALE_KP = np.array([30.0, 14.0, 1.9])
PD_SCALE_KD = np.array([1.5, 0.1, 0.05])


def expand_group_scales(nq, scale3):
    """Spread (translation, root-rotation, joint) scales over the nq slots."""
    out = np.empty(nq)
    out[0:3] = ad.value(scale3)[0]
    out[3:6] = ad.value(scale3)[1]
    out[6:] = ad.value(scale3)[2]
    return out


@dataclass
class PDGains:
    """Final per-slot gains (nonnegative) plus the group scales they used."""

    kp: object                  # (nq,) >= 0
    kd: object                  # (nq,) >= 0
    scale_kp: np.ndarray = None
    scale_kd: np.ndarray = None

    def validate(self):
        if np.any(ad.value(self.kp) < 0) or np.any(ad.value(self.kd) < 0):
            raise ValueError("PD gains must be elementwise nonnegative")
        return self


def default_gains(nq):
    """Untrained gains: softplus(0) times the per-group scales."""
    base = float(np.log(2.0))  # softplus(0)
    return PDGains(kp=base * expand_group_scales(nq, PD_SCALE_KP),
                   kd=base * expand_group_scales(nq, PD_SCALE_KD),
                   scale_kp=PD_SCALE_KP, scale_kd=PD_SCALE_KD).validate()


def _pose_error(target, predicted):
    """Slotwise target - predicted; root-rotation slots use the axis-angle
    vector of the relative quaternion instead of a Euclidean difference."""
    rot_err = ad.quat_to_rotvec(qt.quat_delta(target.root_quat,
                                              predicted.root_quat))
    return ad.concat([target.q[0:3] - predicted.q[0:3],
                      rot_err,
                      target.q[6:] - predicted.q[6:]])


def pd_torque(gains, target, predicted, qdot, pd_damping_sign="paper"):
    """tau = kp * err(target, predicted) (+/-) kd * qdot.

    target/predicted are SystemStates (updated and predicted poses); the
    damping term is +kd*qdot under the default "paper" sign and -kd*qdot
    under "classical".
    """
    if pd_damping_sign not in ("paper", "classical"):
        raise ValueError(f"unknown pd_damping_sign {pd_damping_sign!r}")
    err = _pose_error(target, predicted)
    damp = gains.kd * qdot
    if pd_damping_sign == "classical":
        return gains.kp * err - damp
    return gains.kp * err + damp


@dataclass
class ContactSet:
    """Per-foot contact data: probabilities, linear forces, point Jacobians."""

    rho: object                 # (2,) in [0, 1]
    forces: object              # (2, 3) N
    jacobians: object           # (2, 3, nq)


def external_forces(contacts, jacobian_transpose=True):
    """Generalized contact force lambda = sum_c rho_c * J_c^T f_c.

    With jacobian_transpose=False the Jacobian coefficients are read in the
    (nq, 3) orientation and applied directly (the printed-orientation
    reading); for an analytic point Jacobian the transpose form is the
    physically meaningful one.
    """
    lam = None
    for c in range(2):
        jc = contacts.jacobians[c]
        fc = contacts.forces[c]
        if jacobian_transpose:
            contrib = contacts.rho[c] * (ad.transpose(jc) @ fc)
        else:
            nq = ad.value(jc).shape[1] if ad.value(jc).ndim == 2 else None
            contrib = contacts.rho[c] * (ad.reshape(jc, (nq, 3)) @ fc)
        lam = contrib if lam is None else lam + contrib
    return lam
