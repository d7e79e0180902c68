"""The closed estimation loop: one step per observation frame.

Step order is fixed: transition, dynamics features, network forward, Kalman
update, PD torque, external forces, mass matrix + bias forces evaluated at
the updated pose with the pre-step velocity, biased forward dynamics, and the
velocity update. The frame output is the updated pose; the new velocity feeds
the next transition.

Modes:
  osd           learned Kalman gain plus learned PD gains/forces/bias
  pd_only       no filter; PD tracks the raw observation; simulated pose out
  classical_kf  covariance-propagating Kalman gain at a fixed process-to-
                observation noise ratio
  median, gaussian, passthrough   signal-level baselines (no physics)

pd_only and classical_kf still evaluate the network when one is given (its
PD gains, contact forces, and inertia bias drive the simulation; only the
gain source changes); without a network they fall back to default PD gains
with no contact forces.

Running with plain ndarray parameters executes tape-free; the same code path
under an active Tape with Variable parameters yields gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .control import (ContactSet, default_gains, external_forces, pd_torque)
from .dynamics import (bias_forces, forward_dynamics_biased, mass_matrix)
from .filtering import (NoiseCovarianceConfig, ObservationMaps,
                        classical_kf_step, dynamics_features, gaussian_smooth,
                        identity_maps, kalman_update, median_smooth)
from .skeleton import SystemState, fk, point_jacobian

__all__ = ["RunConfig", "LoopState", "RolloutResult", "NumericError",
           "init_loop_state", "run_osd_step", "rollout_window",
           "run_sequence", "MODES"]

MODES = ("osd", "pd_only", "classical_kf", "median", "gaussian", "passthrough")


class NumericError(RuntimeError):
    """Non-finite state during a rollout; carries the frame index."""

    def __init__(self, frame, detail=""):
        self.frame = frame
        super().__init__(f"non-finite state at frame {frame}: {detail}")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "osd"
    dt: float = 0.02
    pd_damping_sign: str = "paper"
    jacobian_transpose: bool = True
    ratio: float = 1.0              # classical_kf process/observation ratio
    obs_cov: float = 0.01           # classical_kf observation noise scale
    median_window: int = 5
    gaussian_sigma: float = 2.0
    override_gain: object = None    # test hook: fixed Kalman gain matrix
    # auto: PD tracks the filter update, except pd_only tracks the raw
    # observation (there is no update without a filter).
    pd_target: str = "auto"         # auto | update | predicted | observation
    # treat |qdot| beyond this as divergence (None: only non-finite counts);
    # keeps truncated training prefixes inside the physically sane region
    qdot_limit: float | None = None
    collect_diagnostics: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.pd_target not in ("auto", "update", "predicted",
                                  "observation"):
            raise ValueError(f"unknown pd_target {self.pd_target!r}")


@dataclass
class LoopState:
    q: object                       # q_{t|t}
    root_quat: object
    qdot: object                    # qdot_{t|t}
    q_prev: object                  # q_{t-1|t-1}
    q_pred_prev: object             # q_{t|t-1}
    h_gru: object
    cov: object = None              # classical mode covariance
    frame: int = 0


@dataclass
class RolloutResult:
    q_opt: list                     # per frame, [0] is the bootstrap
    p_opt: list
    q_pred: list
    p_pred: list
    qddot: list                     # per step
    rho: list | None                # per step, None without feet
    foot_points: list | None        # per frame (n_feet, 3)
    diagnostics: dict


def init_loop_state(char, obs0, net=None):
    """Bootstrap: adopt the first observation with zero velocity."""
    q0 = np.asarray(obs0, dtype=np.float64).copy()
    quat0 = ad.rotvec_to_quat(q0[3:6])
    h = net.zero_gru_state() if net is not None else None
    return LoopState(q=q0, root_quat=quat0, qdot=np.zeros(char.nq),
                     q_prev=q0.copy(), q_pred_prev=q0.copy(), h_gru=h,
                     frame=0)


def _feet_io(char, cache, qdot):
    """Foot positions, velocities, and stacked analytic point Jacobians."""
    feet = char.foot_bodies()
    if not feet:
        z = np.zeros(6)
        return z, z, None
    pos = ad.concat([cache.keypoint[b] for b in feet])
    jacs = [point_jacobian(char, cache, b) for b in feet]
    vel = ad.concat([j @ qdot for j in jacs])
    nq = char.nq
    jac_base = ad.concat([ad.reshape(j, (1, 3, nq)) for j in jacs], axis=0)
    return pos, vel, jac_base


def _check_finite(frame, *arrays):
    for arr in arrays:
        v = np.asarray(ad.value(arr))
        if not np.all(np.isfinite(v)):
            raise NumericError(frame, f"values {v.ravel()[:4]}...")
    return arrays


def run_osd_step(char, state, obs_next, cfg, net=None, params=None,
                 maps=None):
    """One estimation step; returns (opt SystemState, new LoopState, bundle,
    diagnostics).

    `params` selects the parameter set (Variables for training, plain arrays
    for inference); defaults to net.params when a network is given. The
    network feeds every physics mode: pd_only drops the Kalman update and
    classical_kf swaps the learned gain for the covariance-recursion gain,
    but PD gains, contact forces, and the inertia bias stay the network's.
    Without a network (pd_only / classical_kf only), default PD gains are
    used and contact forces and the inertia bias are zero. `bundle` is None
    in that case.
    """
    dt = cfg.dt
    nq = char.nq
    obs_next = obs_next if isinstance(obs_next, ad.Variable) \
        else np.asarray(obs_next, dtype=np.float64)

    if cfg.mode == "osd" and net is None:
        raise ValueError("mode osd needs a network")
    use_net = net is not None
    if use_net and params is None:
        params = net.params
    if maps is None:
        maps = ObservationMaps(H=params["H"], C=params["C"]) if use_net \
            else identity_maps(nq)
    lengths = params["bone_lengths"] if use_net else None

    # transition: linear extrapolation of all coordinates
    q_pred = state.q + state.qdot * dt
    quat_pred = ad.rotvec_to_quat(q_pred[3:6])
    pred_state = SystemState(q=q_pred, qdot=state.qdot, root_quat=quat_pred)

    bundle = None
    diag = {}
    kalman_evals = 0
    new_cov = state.cov
    h_new = state.h_gru

    if use_net:
        feats = dynamics_features(state.q, state.q_prev, state.q_pred_prev,
                                  q_pred, obs_next, state.q, maps)
        cache_now = fk(char, state.q, state.root_quat, lengths=lengths)
        feet_pos, feet_vel, jac_base = _feet_io(char, cache_now, state.qdot)
        bundle, h_new = net.forward_step(state.q, state.qdot, feet_pos,
                                         feet_vel, feats, state.h_gru,
                                         params=params, jac_base=jac_base)

    if cfg.mode == "osd":
        gain = bundle.gain if cfg.override_gain is None else cfg.override_gain
        upd_state = kalman_update(pred_state, obs_next, gain, maps)
        kalman_evals = 1
    elif cfg.mode == "classical_kf":
        cov_cfg = NoiseCovarianceConfig(
            process_ratio=cfg.ratio * cfg.obs_cov,
            measurement_ratio=cfg.obs_cov)
        if cfg.override_gain is not None:
            upd_state = kalman_update(pred_state, obs_next,
                                      cfg.override_gain, maps)
        else:
            upd_state, new_cov = classical_kf_step(pred_state, obs_next,
                                                   state.cov, cov_cfg, maps)
        kalman_evals = 1
    elif cfg.mode == "pd_only":
        upd_state = pred_state
    else:
        raise ValueError(f"mode {cfg.mode!r} has no per-step loop")

    gains = bundle.pd_gains() if bundle is not None else default_gains(nq)
    if bundle is not None and char.foot_bodies():
        contacts = ContactSet(rho=bundle.rho, forces=bundle.forces,
                              jacobians=bundle.jacobians)
        lam = external_forces(contacts, cfg.jacobian_transpose)
    else:
        # no feet or no network: no contact machinery
        lam = np.zeros(nq)
    mbias = bundle.inertia_bias if bundle is not None else np.zeros((nq, nq))

    pd_target = cfg.pd_target
    if pd_target == "auto":
        pd_target = "observation" if cfg.mode == "pd_only" else "update"
    if pd_target == "update":
        target = upd_state
    elif pd_target == "predicted":
        target = pred_state
    else:
        target = SystemState(q=obs_next, qdot=state.qdot,
                             root_quat=ad.rotvec_to_quat(obs_next[3:6]))
    tau = pd_torque(gains, target, pred_state, state.qdot,
                    pd_damping_sign=cfg.pd_damping_sign)

    # mass matrix and bias forces at the updated pose, pre-step velocity
    cache_upd = fk(char, upd_state.q, upd_state.root_quat, lengths=lengths)
    try:
        m = mass_matrix(char, cache_upd)
        h = bias_forces(char, cache_upd, state.qdot)
        qddot = forward_dynamics_biased(m, h, tau, lam, mbias)
    except np.linalg.LinAlgError as exc:
        raise NumericError(state.frame + 1, str(exc)) from exc
    qdot_new = state.qdot + qddot * dt

    out_state = upd_state if cfg.mode != "pd_only" else pred_state
    _check_finite(state.frame + 1, out_state.q, qdot_new)
    if cfg.qdot_limit is not None:
        abs_qdot = np.abs(np.asarray(ad.value(qdot_new)))
        worst = int(np.argmax(abs_qdot))
        speed = float(abs_qdot[worst])
        if speed > cfg.qdot_limit:
            raise NumericError(
                state.frame + 1,
                f"|qdot[{worst}]| {speed:.1f} exceeds {cfg.qdot_limit}")

    new_state = LoopState(q=out_state.q, root_quat=out_state.root_quat,
                          qdot=qdot_new, q_prev=state.q, q_pred_prev=q_pred,
                          h_gru=h_new, cov=new_cov, frame=state.frame + 1)
    if cfg.collect_diagnostics:
        diag = {
            "gain_diag": None if bundle is None
            else np.diag(np.asarray(ad.value(bundle.gain))).copy(),
            "rho": None if bundle is None
            else np.asarray(ad.value(bundle.rho)).copy(),
            "torque_norm": float(np.linalg.norm(np.asarray(ad.value(tau)))),
        }
    diag["kalman_evals"] = kalman_evals
    return out_state, new_state, bundle, (qddot, diag)


def rollout_window(net, seq, cfg, params=None, on_diverge="raise"):
    """Roll the per-step loop over a sequence; collects loss inputs.

    Traced when params (default net.params) contain Variables. on_diverge
    controls what a non-finite state does: "raise" propagates NumericError,
    "truncate" stops the rollout and returns the finite prefix with
    diagnostics["aborted_at"] set (early training windows routinely blow up
    before the network has learned to gate its contact forces; the prefix
    still carries a usable gradient).
    """
    if on_diverge not in ("raise", "truncate"):
        raise ValueError(f"unknown on_diverge {on_diverge!r}")
    char = seq.character
    if net is not None and params is None:
        params = net.params
    lengths = params["bone_lengths"] if net is not None else None
    state = init_loop_state(char, seq.obs[0], net)
    if cfg.mode == "classical_kf":
        state.cov = cfg.obs_cov * np.eye(char.nq)

    def keypoints_of(q, quat):
        return fk(char, q, quat, lengths=lengths, with_motion=False).keypoints

    feet = char.foot_bodies()
    p0 = keypoints_of(state.q, state.root_quat)
    res = RolloutResult(
        q_opt=[state.q], p_opt=[p0], q_pred=[state.q], p_pred=[p0],
        qddot=[], rho=[] if feet else None,
        foot_points=[_foot_rows(p0, feet)] if feet else None,
        diagnostics={"kalman_evals": 0, "steps": []})

    for t in range(1, seq.n_frames):
        obs = seq.obs[t]
        try:
            out_state, state, bundle, (qddot, diag) = run_osd_step(
                char, state, obs, cfg, net=net, params=params)
        except NumericError as err:
            if on_diverge == "raise":
                raise
            res.diagnostics["aborted_at"] = t
            res.diagnostics["abort_detail"] = str(err)
            break
        res.q_opt.append(out_state.q)
        p_opt = keypoints_of(out_state.q, out_state.root_quat)
        res.p_opt.append(p_opt)
        q_pred = state.q_pred_prev
        res.q_pred.append(q_pred)
        res.p_pred.append(keypoints_of(q_pred, ad.rotvec_to_quat(q_pred[3:6])))
        res.qddot.append(qddot)
        if feet:
            res.rho.append(bundle.rho if bundle is not None
                           else np.zeros(len(feet)))
            res.foot_points.append(_foot_rows(p_opt, feet))
        res.diagnostics["kalman_evals"] += diag.get("kalman_evals", 0)
        if cfg.collect_diagnostics:
            res.diagnostics["steps"].append(diag)
    return res


def _foot_rows(keypoints, feet):
    rows = [keypoints[b] for b in feet]
    return ad.concat([ad.reshape(r, (1, 3)) for r in rows], axis=0)


def run_sequence(seq, cfg, net=None):
    """Filter a full sequence; returns (q_est (T, nq), keypoints (T, J, 3),
    diagnostics dict). Inference only (never traced)."""
    char = seq.character
    if cfg.mode == "passthrough":
        q_est = seq.obs.copy()
        diag = {"kalman_evals": 0}
    elif cfg.mode == "median":
        q_est = median_smooth(seq.obs.copy(), cfg.median_window)
        diag = {"kalman_evals": 0}
    elif cfg.mode == "gaussian":
        q_est = gaussian_smooth(seq.obs.copy(), cfg.gaussian_sigma)
        diag = {"kalman_evals": 0}
    else:
        params = net.numpy_params() if net is not None else None
        res = rollout_window(net, seq, cfg, params=params)
        q_est = np.stack([np.asarray(ad.value(q)) for q in res.q_opt])
        keypoints = np.stack([np.asarray(ad.value(p)) for p in res.p_opt])
        return q_est, keypoints, res.diagnostics
    keypoints = np.stack([
        np.asarray(fk(char, q_est[t], ad.rotvec_to_quat(q_est[t, 3:6]),
                      with_motion=False).keypoints)
        for t in range(q_est.shape[0])])
    return q_est, keypoints, diag
