"""Pose-estimation evaluation metrics.

Positions enter in meters; every reported number is in millimeters (or
mm/s, mm/s^2, percent) as named in MetricReport. Keypoint sequences are
arrays of shape (T, J, 3).

Interpretation notes (documented, not from a standard):
  * Procrustes alignment includes scale (similarity transform).
  * friction_err is the mean horizontal contact-point drift per labeled
    contact frame pair, in mm.
  * velocity_err is the mean norm of the first-difference keypoint velocity
    discrepancy against ground truth, in mm/s.
  * The six ground-distance contact points are the two foot keypoints tiled
    three times each (heel/foot/toe refinement collapsed onto the keypoint).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, fields

import numpy as np

__all__ = ["MetricReport", "mpjpe", "pck", "cps", "accel_metric", "grp",
           "expand_foot_points", "ground_metrics", "compute_report",
           "report_to_json", "report_from_json", "reports_to_csv"]

MM = 1000.0


@dataclass
class MetricReport:
    mpjpe: float          # root-aligned, mm
    mpjpe_g: float        # global, mm
    mpjpe_pa: float       # procrustes-aligned, mm
    grp: float            # global root position error, mm
    gd: float             # ground distance, mm
    gp: float             # ground penetration, mm
    friction_err: float   # mm
    velocity_err: float   # mm/s
    pck: float            # percent
    cps: float            # mm (AUC over 1..300 mm)
    accel: float          # mm/s^2
    foot_skate: float     # percent

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _check_shapes(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"expected (T, J, 3) keypoints, got {pred.shape}")
    return pred, gt


def _procrustes_align(pred, gt):
    """Per-frame optimal similarity transform of pred onto gt."""
    pc = pred - pred.mean(axis=1, keepdims=True)
    gc = gt - gt.mean(axis=1, keepdims=True)
    out = np.empty_like(pred)
    for t in range(pred.shape[0]):
        h = pc[t].T @ gc[t]
        u, s, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        dvec = np.array([1.0, 1.0, d])
        rot = vt.T @ np.diag(dvec) @ u.T
        denom = (pc[t] ** 2).sum()
        scale = (s * dvec).sum() / denom if denom > 0 else 1.0
        out[t] = scale * pc[t] @ rot.T + gt[t].mean(axis=0)
    return out


def mpjpe(pred, gt, mode="root_aligned", root_index=0):
    """Mean per-joint position error in mm.

    mode: root_aligned | global | procrustes
    """
    pred, gt = _check_shapes(pred, gt)
    if mode == "global":
        pass
    elif mode == "root_aligned":
        pred = pred - pred[:, root_index:root_index + 1]
        gt = gt - gt[:, root_index:root_index + 1]
    elif mode == "procrustes":
        pred = _procrustes_align(pred, gt)
    else:
        raise ValueError(f"unknown mpjpe mode {mode!r}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def pck(pred, gt, threshold_mm=150.0, root_index=0):
    """Percentage of root-aligned joints within threshold (inclusive)."""
    pred, gt = _check_shapes(pred, gt)
    pred = pred - pred[:, root_index:root_index + 1]
    gt = gt - gt[:, root_index:root_index + 1]
    err = np.linalg.norm(pred - gt, axis=-1) * MM
    return float((err <= threshold_mm).mean() * 100.0)


def cps(pred, gt, root_index=0):
    """Correct-pose AUC over thresholds 1..300 mm (trapezoid), in mm.

    A pose is correct at a threshold iff all its root-aligned joints are
    within it. Perfect input scores 299 (grid spans 1..300).
    """
    pred, gt = _check_shapes(pred, gt)
    pred = pred - pred[:, root_index:root_index + 1]
    gt = gt - gt[:, root_index:root_index + 1]
    worst = np.linalg.norm(pred - gt, axis=-1).max(axis=1) * MM
    thresholds = np.arange(1, 301, dtype=np.float64)
    frac = (worst[None, :] <= thresholds[:, None]).mean(axis=1)
    return float(np.trapz(frac, thresholds))


def accel_metric(pred, fps):
    """Mean keypoint acceleration magnitude from second differences, mm/s^2."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[0] < 3:
        raise ValueError("accel_metric needs at least 3 frames")
    dd = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    acc = dd * float(fps) ** 2
    return float(np.linalg.norm(acc, axis=-1).mean() * MM)


def grp(pred_root, gt_root):
    """Mean root-to-root distance without alignment, mm."""
    pred_root = np.asarray(pred_root, dtype=np.float64)
    gt_root = np.asarray(gt_root, dtype=np.float64)
    if pred_root.shape != gt_root.shape:
        raise ValueError(f"length mismatch: {pred_root.shape} vs {gt_root.shape}")
    return float(np.linalg.norm(pred_root - gt_root, axis=-1).mean() * MM)


def expand_foot_points(keypoints, foot_indices):
    """(T, J, 3) -> (T, 3*len(feet), 3): each foot keypoint tiled 3 times."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    feet = keypoints[:, list(foot_indices)]
    return np.repeat(feet, 3, axis=1)


def ground_metrics(pred_keypoints, gt_keypoints, labels, foot_indices, fps,
                   ground_height=0.0, skate_threshold_mm=20.0):
    """Ground-interaction metrics; labels are per-frame per-foot in {0,1}.

    Returns dict with gp, gd, foot_skate, friction_err, velocity_err.
    """
    pred_keypoints = np.asarray(pred_keypoints, dtype=np.float64)
    gt_keypoints = np.asarray(gt_keypoints, dtype=np.float64)

    if not foot_indices:
        # footless character: only the velocity discrepancy is defined
        out = {"gp": 0.0, "gd": 0.0, "foot_skate": 0.0, "friction_err": 0.0,
               "velocity_err": 0.0}
        if pred_keypoints.shape[0] >= 2:
            v_pred = (pred_keypoints[1:] - pred_keypoints[:-1]) * float(fps)
            v_gt = (gt_keypoints[1:] - gt_keypoints[:-1]) * float(fps)
            out["velocity_err"] = float(
                np.linalg.norm(v_pred - v_gt, axis=-1).mean() * MM)
        return out

    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] != pred_keypoints.shape[0]:
        raise ValueError("labels must be (T, n_feet) aligned with keypoints")

    pred_pts = expand_foot_points(pred_keypoints, foot_indices)   # (T, 6, 3)
    gt_pts = expand_foot_points(gt_keypoints, foot_indices)
    lab6 = np.repeat(labels, 3, axis=1)

    # penetration: pooled depth over penetrating points, 0 when none
    depth = ground_height - pred_pts[..., 2]
    pen = depth[depth > 0]
    gp = float(pen.mean() * MM) if pen.size else 0.0

    # ground distance: (1/6) sum_c rho_c |vertical difference|, frame mean
    vdiff = np.abs(pred_pts[..., 2] - gt_pts[..., 2])
    gd = float((lab6 * vdiff).sum(axis=1).mean() / lab6.shape[1] * MM)

    # foot skate: % of labeled-contact frames whose contact point moves
    # more than the threshold since the previous frame
    feet_pred = pred_keypoints[:, list(foot_indices)]             # (T, 2, 3)
    disp = np.zeros_like(labels)
    disp[1:] = np.linalg.norm(feet_pred[1:] - feet_pred[:-1], axis=-1) * MM
    contact = labels > 0.5
    contact_frames = contact.any(axis=1)
    skating = ((disp > skate_threshold_mm) & contact).any(axis=1)
    denom = int(contact_frames.sum())
    foot_skate = float(skating.sum() / denom * 100.0) if denom else 0.0

    # friction: horizontal contact-point drift per labeled pair, mm
    hdrift = np.linalg.norm(feet_pred[1:, :, :2] - feet_pred[:-1, :, :2],
                            axis=-1) * MM
    pair_contact = contact[1:] & contact[:-1]
    friction_err = float(hdrift[pair_contact].mean()) if pair_contact.any() else 0.0

    # velocity discrepancy over all keypoints, mm/s
    if pred_keypoints.shape[0] >= 2:
        v_pred = (pred_keypoints[1:] - pred_keypoints[:-1]) * float(fps)
        v_gt = (gt_keypoints[1:] - gt_keypoints[:-1]) * float(fps)
        velocity_err = float(np.linalg.norm(v_pred - v_gt, axis=-1).mean() * MM)
    else:
        velocity_err = 0.0

    return {"gp": gp, "gd": gd, "foot_skate": foot_skate,
            "friction_err": friction_err, "velocity_err": velocity_err}


def compute_report(pred_keypoints, gt_keypoints, labels, foot_indices, fps,
                   root_index=0, ground_height=0.0):
    """Full MetricReport for one sequence."""
    ground = ground_metrics(pred_keypoints, gt_keypoints, labels,
                            foot_indices, fps, ground_height=ground_height)
    return MetricReport(
        mpjpe=mpjpe(pred_keypoints, gt_keypoints, "root_aligned", root_index),
        mpjpe_g=mpjpe(pred_keypoints, gt_keypoints, "global", root_index),
        mpjpe_pa=mpjpe(pred_keypoints, gt_keypoints, "procrustes", root_index),
        grp=grp(pred_keypoints[:, root_index], gt_keypoints[:, root_index]),
        gd=ground["gd"], gp=ground["gp"],
        friction_err=ground["friction_err"],
        velocity_err=ground["velocity_err"],
        pck=pck(pred_keypoints, gt_keypoints, root_index=root_index),
        cps=cps(pred_keypoints, gt_keypoints, root_index=root_index),
        accel=accel_metric(pred_keypoints, fps),
        foot_skate=ground["foot_skate"],
    )


def aggregate_reports(reports):
    """Field-wise mean of several MetricReports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    names = [f.name for f in fields(MetricReport)]
    return MetricReport(**{n: float(np.mean([getattr(r, n) for r in reports]))
                           for n in names})


def report_to_json(report, indent=2):
    return json.dumps(report.to_dict(), indent=indent)


def report_from_json(text):
    return MetricReport(**json.loads(text))


def reports_to_csv(reports, row_names=None):
    """CSV text, one row per report, columns exactly the metric names."""
    names = [f.name for f in fields(MetricReport)]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["sequence"] + names)
    for i, rep in enumerate(reports):
        label = row_names[i] if row_names else str(i)
        writer.writerow([label] + [repr(float(getattr(rep, n))) for n in names])
    return buf.getvalue()
