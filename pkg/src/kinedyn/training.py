"""Losses, contact labels, and the optimization loop.

The window loss follows the estimator's training objective: per-frame keypoint
terms are sums of per-keypoint Euclidean norms, state terms are per-coordinate
absolute sums, contact terms are binary cross-entropy over the two feet, and
the regularizer adds acceleration smoothness, a velocity-magnitude term, and a
contact-point friction term. The velocity term's printed form is a difference
of magnitude sums and can be negative; ``velocity_form="absdiff"`` switches to
the magnitude of the difference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = ["LossWeights", "TrainConfig", "TrainingDiverged",
           "generate_contact_labels", "main_loss", "regularizer",
           "window_loss", "learning_rate", "Adam", "train"]


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.5     # keypoints of the updated state
    w2: float = 0.1     # coordinates of the updated state
    w3: float = 0.7     # keypoints of the predicted state
    w4: float = 0.2     # coordinates of the predicted state
    w5: float = 0.4     # contact cross-entropy
    w6: float = 0.14    # acceleration smoothness
    w7: float = 0.03    # velocity magnitude
    w8: float = 0.28    # contact-point friction


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, window, frame, detail=""):
        self.epoch, self.window, self.frame = epoch, window, frame
        where = f"epoch {epoch}, window {window}"
        if frame is not None:
            where += f", frame {frame}"
        super().__init__(f"training diverged at {where}: {detail}")


# ---------------------------------------------------------------------------
# contact labels

def generate_contact_labels(keypoints, foot_indices, ground_height=0.0,
                            height_threshold=0.10, move_threshold=0.02):
    """Per-frame per-foot binary labels from the two-threshold rule.

    A foot is in contact iff its height above the ground is <= 0.10 m AND its
    frame-to-frame displacement is <= 0.02 m (both inclusive). Frame 0 uses
    the displacement to frame 1.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.shape[0] < 2:
        raise ValueError("contact labeling needs at least 2 frames")
    feet = keypoints[:, list(foot_indices)]           # (T, F, 3)
    height = feet[..., 2] - ground_height
    disp = np.empty(height.shape)
    disp[1:] = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    disp[0] = disp[1]
    labels = (height <= height_threshold) & (disp <= move_threshold)
    return labels.astype(np.float64)


# ---------------------------------------------------------------------------
# losses

def main_loss(q_opt, p_opt, q_pred, p_pred, rho, q_gt, p_gt, rho_gt, w):
    """(1/T) sum of the five weighted per-frame terms.

    All sequence arguments are aligned lists/arrays of length T (frames with
    ground truth). rho/rho_gt may be None when the character has no feet.
    """
    t_steps = len(q_opt)
    if not (len(p_opt) == len(q_pred) == len(p_pred) == len(q_gt)
            == len(p_gt) == t_steps):
        raise ValueError("main_loss arguments have mismatched lengths")
    total = 0.0
    for t in range(t_steps):
        total = total + w.w1 * ad.row_norms_sum(p_opt[t] - p_gt[t]) \
                      + w.w2 * ad.l1_norm(q_opt[t] - q_gt[t]) \
                      + w.w3 * ad.row_norms_sum(p_pred[t] - p_gt[t]) \
                      + w.w4 * ad.l1_norm(q_pred[t] - q_gt[t])
        if rho is not None:
            if len(rho) != t_steps or len(rho_gt) != t_steps:
                raise ValueError("rho length mismatch")
            total = total + w.w5 * ad.bce(rho[t], rho_gt[t])
    return total / float(t_steps)


def regularizer(qddot, q_gt, q_est, contact_points, rho, w,
                velocity_form="printed"):
    """Unnormalized sum of the three regularization terms.

    qddot: accelerations per step; q_gt/q_est: states per frame (est list may
    hold traced values); contact_points: per-frame contact positions (F, 3)
    or None; rho: per-step contact probabilities or None.
    """
    if velocity_form not in ("printed", "absdiff"):
        raise ValueError(f"unknown velocity_form {velocity_form!r}")
    total = 0.0
    for s in range(1, len(qddot)):
        total = total + w.w6 * ad.l1_norm(qddot[s] - qddot[s - 1])
    n_pairs = len(q_est) - 1
    if len(q_gt) != len(q_est):
        raise ValueError("regularizer state lengths mismatch")
    for s in range(n_pairs):
        d_gt = ad.l1_norm(np.asarray(q_gt[s + 1]) - np.asarray(q_gt[s]))
        d_est = ad.l1_norm(q_est[s + 1] - q_est[s])
        if velocity_form == "printed":
            total = total + w.w7 * (d_gt - d_est)
        else:
            total = total + w.w7 * ad.l1_norm(
                (np.asarray(q_gt[s + 1]) - np.asarray(q_gt[s]))
                - (q_est[s + 1] - q_est[s]))
    if contact_points is not None and rho is not None:
        for s in range(min(len(rho), len(contact_points) - 1)):
            drift = contact_points[s + 1] - contact_points[s]
            n_feet = ad.value(drift).shape[0]
            for c in range(n_feet):
                total = total + w.w8 * rho[s][c] * ad.l2_norm(drift[c])
    return total


def window_loss(res, seq, w, velocity_form="printed"):
    """Total loss of one rolled-out window; returns (scalar, components).

    `res` is a pipeline RolloutResult; `seq` supplies ground truth. Frames
    1..T-1 carry estimates (frame 0 is the bootstrap). A truncated rollout
    (diverged before the window end) is scored over its finite prefix.
    """
    seq.require_gt()
    t_total = len(res.q_opt)
    if t_total < 2:
        raise ValueError("rollout carries no estimated frames")
    sl = slice(1, t_total)
    rho_gt = None
    rho = None
    if res.rho is not None and seq.contacts is not None:
        rho = res.rho
        rho_gt = [seq.contacts[s] for s in range(t_total - 1)]
    main = main_loss(res.q_opt[sl], res.p_opt[sl], res.q_pred[sl],
                     res.p_pred[sl], rho, seq.q_gt[sl], seq.p_gt[sl],
                     rho_gt, w)
    reg = regularizer(res.qddot, seq.q_gt[:t_total], res.q_opt,
                      res.foot_points, res.rho, w, velocity_form)
    steps = t_total - 1
    total = main + reg / float(steps)
    components = {"main": float(ad.value(main)), "reg": float(ad.value(reg)) / steps}
    return total, components


# ---------------------------------------------------------------------------
# schedule and optimizer

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    base_lr: float = 5e-4
    batch: int = 64
    lr_drop_epochs: tuple = (10, 13)
    lr_drop_factor: float = 0.1
    warmup_epoch: int = 5
    warmup_factor: float = 2.0
    window: int = 100
    dt: float = 0.02
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    velocity_form: str = "printed"
    pd_damping_sign: str = "paper"
    jacobian_transpose: bool = True
    # velocity cap marking the divergence horizon for prefix truncation;
    # None scores truncated windows right up to the non-finite frame
    qdot_limit: float | None = None
    # global-norm gradient clip applied to the averaged batch gradient;
    # None disables. BPTT through a not-yet-stabilized simulation multiplies
    # per-step Jacobians, so early-epoch gradient norms can reach 1e8.
    grad_clip: float | None = None

    def __post_init__(self):
        if min(self.epochs, self.batch, self.window) <= 0 or self.base_lr <= 0 \
                or self.dt <= 0:
            raise ValueError("TrainConfig values must be positive")
        if self.lr_drop_epochs and self.warmup_epoch >= min(self.lr_drop_epochs):
            raise ValueError("warmup must end before the first lr drop")


def learning_rate(cfg, epoch):
    """Linear warmup to warmup_factor x base at warmup_epoch, then drops."""
    if epoch <= cfg.warmup_epoch:
        ramp = 1.0 + (cfg.warmup_factor - 1.0) * (epoch / cfg.warmup_epoch)
    else:
        ramp = cfg.warmup_factor
    lr = cfg.base_lr * ramp
    for drop in cfg.lr_drop_epochs:
        if epoch >= drop:
            lr *= cfg.lr_drop_factor
    return lr


class Adam:
    """Adam with bias correction; updates Variable values in place."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            self.params[k].value = self.params[k].value - lr * update


# ---------------------------------------------------------------------------
# training loop

def train(net, windows, cfg, log_path=None):
    """Full-window backpropagation-through-time training.

    Mutates net.params; returns the per-epoch history. Deterministic given
    cfg.seed. Raises TrainingDiverged when a loss or state goes non-finite.
    """
    from .pipeline import NumericError, RunConfig, rollout_window

    if not windows:
        raise ValueError("no training windows")
    for wseq in windows:
        wseq.require_gt()
    run_cfg = RunConfig(mode="osd", dt=cfg.dt,
                        pd_damping_sign=cfg.pd_damping_sign,
                        jacobian_transpose=cfg.jacobian_transpose,
                        qdot_limit=cfg.qdot_limit)
    opt = Adam(net.params)
    rng = np.random.default_rng(cfg.seed)
    history = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            order = rng.permutation(len(windows))
            epoch_losses, comp_sums = [], {}
            epoch_aborts = 0
            accum, n_accum = None, 0

            def apply_update():
                nonlocal accum, n_accum
                if not n_accum:
                    return
                grads = {k: g / n_accum for k, g in accum.items()}
                if cfg.grad_clip is not None:
                    total = np.sqrt(sum(float(np.sum(g * g))
                                        for g in grads.values()))
                    if total > cfg.grad_clip:
                        scale = cfg.grad_clip / total
                        grads = {k: g * scale for k, g in grads.items()}
                opt.step(grads, lr)
                for name in ("scale_kp", "scale_kd"):
                    np.maximum(net.params[name].value, 0.0,
                               out=net.params[name].value)
                accum, n_accum = None, 0

            for wi, idx in enumerate(order):
                seq = windows[idx]
                try:
                    with ad.Tape() as tape:
                        res = rollout_window(net, seq, run_cfg,
                                             on_diverge="truncate")
                        aborted = res.diagnostics.get("aborted_at")
                        if aborted is not None:
                            epoch_aborts += 1
                        if len(res.q_opt) < 2:
                            # nothing scorable; skip unless the whole
                            # epoch turns out this way
                            continue
                        loss, comps = window_loss(res, seq, cfg.weights,
                                                  cfg.velocity_form)
                        loss_val = float(ad.value(loss))
                        if not np.isfinite(loss_val):
                            raise TrainingDiverged(epoch, int(idx), aborted,
                                                   f"loss = {loss_val}")
                        tape.backward(loss)
                except NumericError as err:
                    raise TrainingDiverged(epoch, int(idx), err.frame,
                                           str(err)) from err
                grads = {k: p.grad for k, p in net.params.items()
                         if p.grad is not None}
                for p in net.params.values():
                    p.grad = None
                if accum is None:
                    accum = {k: g.copy() for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        accum[k] = accum.get(k, 0.0) + g
                n_accum += 1
                if n_accum >= cfg.batch:
                    apply_update()
                epoch_losses.append(loss_val)
                for k, v in comps.items():
                    comp_sums[k] = comp_sums.get(k, 0.0) + v
            apply_update()

            if not epoch_losses:
                raise TrainingDiverged(
                    epoch, -1, None,
                    "every window diverged before its first scorable frame")
            entry = {"epoch": epoch, "lr": lr,
                     "loss": float(np.mean(epoch_losses)),
                     "aborted_windows": epoch_aborts}
            for k, v in comp_sums.items():
                entry[k] = v / len(epoch_losses)
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return history
