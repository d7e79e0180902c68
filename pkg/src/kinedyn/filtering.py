"""State fusion: Kalman update, dynamics features, and baseline filters.

The learnable loop uses :func:`kalman_update` with a predicted gain matrix;
:func:`classical_kf_step` is the constant-noise-covariance baseline with a
Riccati-propagated time-varying gain (Joseph-form covariance update). The
naive median/Gaussian smoothers operate per coordinate over time.

All updates are slot-uniform linear algebra on q; the root-quaternion mirror
is resynchronized from the updated rotation slots afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .skeleton import SystemState

__all__ = [
    "ObservationMaps", "DynamicsFeatures", "NoiseCovarianceConfig",
    "identity_maps", "kalman_update", "dynamics_features",
    "classical_kf_step", "steady_state_gain", "median_smooth",
    "gaussian_smooth",
]


@dataclass
class ObservationMaps:
    """Prediction map H and observation adaptation map C (identity at init)."""

    H: object                   # (nq, nq)
    C: object                   # (nq, nq)


def identity_maps(nq):
    return ObservationMaps(H=np.eye(nq), C=np.eye(nq))


def kalman_update(predicted, obs_q, gain, maps):
    """q_upd = q_pred + K (C qhat - H q_pred); quaternion mirror resynced.

    predicted is a SystemState at q_{t+1|t}; returns the updated SystemState
    with the same velocity and root_quat rebuilt from the updated rotation
    slots via the exponential map.
    """
    innov = maps.C @ obs_q - maps.H @ predicted.q
    q_upd = predicted.q + gain @ innov
    quat_upd = ad.rotvec_to_quat(q_upd[3:6])
    return SystemState(q=q_upd, qdot=predicted.qdot, root_quat=quat_upd)


@dataclass
class DynamicsFeatures:
    """The four per-step filter features (each (nq,))."""

    d_evolution: object         # q_{t|t} - q_{t-1|t-1}
    d_update: object            # q_{t|t} - q_{t|t-1}
    d_innovation: object        # C qhat - H q_{t+1|t}
    d_observation: object       # C qhat - prev committed pose

    def stacked(self):
        return ad.concat([self.d_evolution, self.d_update,
                          self.d_innovation, self.d_observation])


def dynamics_features(curr, prev, pred_prev, pred, obs_next, prev_state, maps):
    """Assemble the four dynamics features from the stated filter poses.

    curr = q_{t|t}, prev = q_{t-1|t-1}, pred_prev = q_{t|t-1},
    pred = q_{t+1|t}, obs_next = incoming observation, prev_state = the
    previously committed pose fed to the observation-difference feature.
    """
    c_obs = maps.C @ obs_next
    return DynamicsFeatures(
        d_evolution=curr - prev,
        d_update=curr - pred_prev,
        d_innovation=c_obs - maps.H @ pred,
        d_observation=c_obs - prev_state)


@dataclass
class NoiseCovarianceConfig:
    """Constant process/measurement covariance scales for the baseline."""

    process_ratio: float
    measurement_ratio: float

    def __post_init__(self):
        if self.process_ratio <= 0 or self.measurement_ratio <= 0:
            raise ValueError("covariance ratios must be > 0")


def classical_kf_step(predicted, obs_q, cov, cfg, maps):
    """Standard Kalman step with Q = q*I, R = r*I and identity transition.

    Returns (updated SystemState, updated covariance). The covariance update
    is Joseph form followed by symmetrization, so it stays symmetric positive
    definite under roundoff.
    """
    h, c = np.asarray(maps.H, dtype=float), np.asarray(maps.C, dtype=float)
    nq = h.shape[0]
    p_minus = cov + cfg.process_ratio * np.eye(nq)
    s = h @ p_minus @ h.T + cfg.measurement_ratio * np.eye(nq)
    gain = np.linalg.solve(s.T, (p_minus @ h.T).T).T
    state = kalman_update(predicted, obs_q, gain, ObservationMaps(H=h, C=c))
    i_kh = np.eye(nq) - gain @ h
    p_plus = i_kh @ p_minus @ i_kh.T + cfg.measurement_ratio * (gain @ gain.T)
    p_plus = 0.5 * (p_plus + p_plus.T)
    return state, p_plus


def steady_state_gain(cfg, iters=200, tol=1e-14):
    """Scalar steady-state gain for the identity-transition baseline.

    Iterates p <- (1 - k) (p + q) with k = (p + q) / (p + q + r) until the
    predicted covariance converges; returns (k*, p_minus*).
    """
    q, r = cfg.process_ratio, cfg.measurement_ratio
    p = q
    for _ in range(iters):
        p_minus = p + q
        k = p_minus / (p_minus + r)
        p_new = (1.0 - k) * p_minus
        if abs(p_new - p) < tol:
            p = p_new
            break
        p = p_new
    p_minus = p + q
    return p_minus / (p_minus + r), p_minus


def _obs_track(seq):
    if isinstance(seq, np.ndarray):
        return seq, None
    return seq.obs, seq


def _rewrap(track, seq, smoothed):
    if seq is None:
        return smoothed
    return replace(seq, obs=smoothed)


def median_smooth(seq, window):
    """Per-coordinate sliding median over time, edges clamped.

    Accepts a MotionSequence (smooths its observation track) or a raw (T, n)
    array. window must be odd.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("median window must be odd and >= 1")
    track, wrapped = _obs_track(seq)
    if window == 1:
        return _rewrap(track, wrapped, track.copy())
    half = window // 2
    padded = np.concatenate([np.repeat(track[:1], half, axis=0), track,
                             np.repeat(track[-1:], half, axis=0)], axis=0)
    views = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
    return _rewrap(track, wrapped, np.median(views, axis=-1))


def gaussian_smooth(seq, sigma):
    """Per-coordinate convolution with a truncated (+-3 sigma) Gaussian.

    The kernel is normalized; near the edges the effective kernel is
    renormalized over the available samples, so constants pass unchanged.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    track, wrapped = _obs_track(seq)
    radius = int(np.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (k / sigma) ** 2)
    kernel /= kernel.sum()
    t = track.shape[0]
    weight = np.convolve(np.ones(t), kernel, mode="same")
    out = np.empty_like(track)
    for j in range(track.shape[1]):
        out[:, j] = np.convolve(track[:, j], kernel, mode="same") / weight
    return _rewrap(track, wrapped, out)
