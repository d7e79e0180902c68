"""Motion-sequence container, file I/O, preprocessing, synthetic plants.

A MotionSequence carries the noisy pose observations plus optional ground
truth (states, keypoints, contact labels) at a constant frame rate. Files are
self-contained: the character definition is embedded, so a sequence loads
without external references. JSON is the interchange format (floats
round-trip exactly via repr); .npz is the packed binary variant for large
sequences.

Synthetic plants: `pendulum` and `double_pendulum` (fixed base) and
`floating_chain` (free base) are integrated with RK4 at one tenth of the
frame timestep through the dynamics module; `keyframed_walk` is an analytic
gait on the 5-joint biped whose driving torque is defined by inverse
dynamics, so the rigid-body equation holds by construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quaternions as qt
from .dynamics import forward_dynamics
from .skeleton import (character_from_dict, character_to_dict, fk, make_biped,
                       make_chain, point_jacobian)

__all__ = ["MotionSequence", "SyntheticPlantConfig", "load_sequence",
           "save_sequence", "preprocess", "synthesize", "plant_character",
           "import_keypoint_csv"]

SEQUENCE_VERSION = 1


@dataclass
class MotionSequence:
    fps: float
    character: object                       # ProxyCharacter
    obs: np.ndarray                         # (T, nq) observed poses
    q_gt: np.ndarray | None = None          # (T, nq)
    p_gt: np.ndarray | None = None          # (T, n_bodies, 3)
    contacts: np.ndarray | None = None      # (T, n_feet) binary
    ground_height: float = 0.0

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim != 2:
            raise ValueError(f"obs must be (T, nq), got {self.obs.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        t = self.obs.shape[0]
        for name in ("q_gt", "p_gt", "contacts"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape[0] != t:
                raise ValueError(f"{name} has {arr.shape[0]} frames, obs has {t}")
            setattr(self, name, arr)

    @property
    def n_frames(self):
        return self.obs.shape[0]

    def require_gt(self):
        if self.q_gt is None or self.p_gt is None:
            raise ValueError("sequence has no ground truth; training and "
                             "evaluation need q_gt and p_gt")


# ---------------------------------------------------------------------------
# file I/O

def _frame_dict(seq, t):
    frame = {"obs": seq.obs[t].tolist()}
    if seq.q_gt is not None:
        frame["q_gt"] = seq.q_gt[t].tolist()
    if seq.p_gt is not None:
        frame["p_gt"] = seq.p_gt[t].tolist()
    if seq.contacts is not None:
        frame["contacts"] = seq.contacts[t].tolist()
    return frame


def save_sequence(seq, path):
    path = str(path)
    if path.endswith(".npz"):
        payload = {"obs": seq.obs}
        for name in ("q_gt", "p_gt", "contacts"):
            arr = getattr(seq, name)
            if arr is not None:
                payload[name] = arr
        meta = {"version": SEQUENCE_VERSION, "fps": seq.fps,
                "ground_height": seq.ground_height,
                "character": character_to_dict(seq.character)}
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.frombuffer(
                json.dumps(meta).encode(), dtype=np.uint8), **payload)
        return
    doc = {
        "version": SEQUENCE_VERSION,
        "kind": "motion_sequence",
        "fps": seq.fps,
        "ground_height": seq.ground_height,
        "character": character_to_dict(seq.character),
        "frames": [_frame_dict(seq, t) for t in range(seq.n_frames)],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def _stack_optional(frames, key, t_total):
    if not any(key in fr for fr in frames):
        return None
    rows = []
    for t, fr in enumerate(frames):
        if key not in fr:
            raise ValueError(f"frame {t}: missing field {key!r} "
                             "(present in other frames)")
        rows.append(np.asarray(fr[key], dtype=np.float64))
        if rows[-1].shape != rows[0].shape:
            raise ValueError(f"frame {t}: field {key!r} has shape "
                             f"{rows[-1].shape}, expected {rows[0].shape}")
    return np.stack(rows)


def load_sequence(path):
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != SEQUENCE_VERSION:
                raise ValueError(f"unsupported sequence version "
                                 f"{meta.get('version')!r}")
            char = character_from_dict(meta["character"])
            kw = {k: data[k] for k in ("q_gt", "p_gt", "contacts")
                  if k in data}
            return MotionSequence(fps=meta["fps"], character=char,
                                  obs=data["obs"],
                                  ground_height=meta.get("ground_height", 0.0),
                                  **kw)
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "motion_sequence":
        raise ValueError("not a motion sequence file")
    if doc.get("version") != SEQUENCE_VERSION:
        raise ValueError(f"unsupported sequence version {doc.get('version')!r}")
    char = character_from_dict(doc["character"])
    frames = doc["frames"]
    nq = char.nq
    obs = []
    for t, fr in enumerate(frames):
        row = np.asarray(fr.get("obs", ()), dtype=np.float64)
        if row.shape != (nq,):
            raise ValueError(f"frame {t}: obs has shape {row.shape}, "
                             f"expected ({nq},)")
        obs.append(row)
    return MotionSequence(
        fps=doc["fps"], character=char, obs=np.stack(obs),
        q_gt=_stack_optional(frames, "q_gt", len(frames)),
        p_gt=_stack_optional(frames, "p_gt", len(frames)),
        contacts=_stack_optional(frames, "contacts", len(frames)),
        ground_height=doc.get("ground_height", 0.0),
    )


# ---------------------------------------------------------------------------
# preprocessing

def preprocess(seq, target_fps=50.0, window=100, align_axes=(0, 1)):
    """Decimate, align the first-frame root, cut non-overlapping windows.

    Root alignment subtracts the first-frame root translation along
    `align_axes` (default horizontal only, keeping the ground plane at its
    source height). The final window shorter than `window` is dropped.
    """
    if seq.fps < target_fps or (seq.fps % target_fps) != 0.0:
        raise ValueError(f"fps {seq.fps} not an integer multiple of "
                         f"target {target_fps}")
    stride = int(round(seq.fps / target_fps))
    obs = seq.obs[::stride].copy()
    q_gt = None if seq.q_gt is None else seq.q_gt[::stride].copy()
    p_gt = None if seq.p_gt is None else seq.p_gt[::stride].copy()
    contacts = None if seq.contacts is None else seq.contacts[::stride].copy()

    ref = q_gt[0] if q_gt is not None else obs[0]
    shift = np.zeros(3)
    axes = list(align_axes)
    shift[axes] = ref[0:3][axes]
    obs[:, 0:3] -= shift
    if q_gt is not None:
        q_gt[:, 0:3] -= shift
    if p_gt is not None:
        p_gt -= shift

    windows = []
    for start in range(0, obs.shape[0] - window + 1, window):
        sl = slice(start, start + window)
        windows.append(MotionSequence(
            fps=target_fps, character=seq.character, obs=obs[sl],
            q_gt=None if q_gt is None else q_gt[sl],
            p_gt=None if p_gt is None else p_gt[sl],
            contacts=None if contacts is None else contacts[sl],
            ground_height=seq.ground_height))
    return windows


# ---------------------------------------------------------------------------
# synthetic plants

@dataclass
class SyntheticPlantConfig:
    kind: str                       # pendulum | double_pendulum | floating_chain | keyframed_walk
    sigma: float = 0.0              # per-coordinate Gaussian noise std
    burst_count: int = 0            # sporadic mis-detection bursts
    burst_offset: float = 0.2       # constant offset added during a burst
    burst_duration: int = 10        # frames
    seed: int = 0
    fps: float = 100.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.burst_duration < 1:
            raise ValueError("burst duration must be >= 1")


def plant_character(cfg):
    kind = cfg.kind
    p = cfg.params
    if kind == "pendulum":
        return make_chain(1, link_length=p.get("length", 0.5),
                          point_mass=True, com_at_end=True, name="pendulum1",
                          point_radius=0.05)
    if kind == "double_pendulum":
        return make_chain(2, link_length=p.get("length", 0.5),
                          point_mass=True, com_at_end=True, name="pendulum2",
                          point_radius=0.05)
    if kind == "floating_chain":
        return make_chain(p.get("n_links", 3),
                          link_length=p.get("length", 0.3), radius=0.05,
                          mass=2.0, root_mass=3.0, name="floatchain")
    if kind == "keyframed_walk":
        return make_biped()
    raise ValueError(f"unknown plant kind {cfg.kind!r}")


def _rk4_rollout(char, q0, quat0, qdot0, n_frames, dt, substeps=10,
                 fixed_base=False):
    """High-accuracy passive rollout; returns (q, quat, qdot) per frame."""
    h = dt / substeps
    nq = char.nq

    def deriv(q, quat, qdot):
        cache = fk(char, q, quat)
        qddot = forward_dynamics(char, cache, qdot, np.zeros(nq),
                                 fixed_base=fixed_base)
        dquat = 0.5 * qt.quat_mul(np.concatenate([qdot[3:6], [0.0]]), quat)
        return qdot, dquat, np.asarray(qddot)

    q, quat, qdot = q0.copy(), quat0.copy(), qdot0.copy()
    qs, quats, qdots = [q.copy()], [quat.copy()], [qdot.copy()]
    for _ in range(n_frames - 1):
        for _ in range(substeps):
            k1 = deriv(q, quat, qdot)
            k2 = deriv(q + 0.5 * h * k1[0], quat + 0.5 * h * k1[1],
                       qdot + 0.5 * h * k1[2])
            k3 = deriv(q + 0.5 * h * k2[0], quat + 0.5 * h * k2[1],
                       qdot + 0.5 * h * k2[2])
            k4 = deriv(q + h * k3[0], quat + h * k3[1], qdot + h * k3[2])
            q = q + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            quat = quat + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            qdot = qdot + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            quat = quat / np.linalg.norm(quat)
            q[3:6] = ad.quat_to_rotvec(quat)
        qs.append(q.copy())
        quats.append(quat.copy())
        qdots.append(qdot.copy())
    return np.stack(qs), np.stack(quats), np.stack(qdots)


def _leg_ik(dx, dz, l1, l2):
    """Sagittal 2-link IK: hip/knee pitch for a foot target relative to the
    hip, legs resting straight down. Positive pitch swings backward."""
    r = np.hypot(dx, dz)
    r = np.clip(r, abs(l1 - l2) + 1e-9, l1 + l2 - 1e-9)
    psi = np.arctan2(-dx, -dz)
    cos_d1 = (l1 * l1 + r * r - l2 * l2) / (2.0 * l1 * r)
    d1 = np.arccos(np.clip(cos_d1, -1.0, 1.0))
    cos_g = (l1 * l1 + l2 * l2 - r * r) / (2.0 * l1 * l2)
    gamma = np.arccos(np.clip(cos_g, -1.0, 1.0))
    hip = psi - d1
    knee = np.pi - gamma
    return hip, knee


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def _walk_gt(char, n_frames, dt, params):
    """Analytic gait: world-fixed stance feet, cycloid swing, exact leg IK.

    Defaults keep peak knee flexion near 0.95 rad. The XYZ joint triplets
    are gimbal-singular at pitch pi/2, where the inertia matrix loses rank
    and forward dynamics blows up, so the gait must stay clear of it.
    """
    period = params.get("period", 1.1)
    speed = params.get("speed", 0.35)
    lift = params.get("lift", 0.04)
    root_z = params.get("root_z", 0.765)
    bob = params.get("bob", 0.01)
    l1 = abs(char.bodies[2].link[2])
    l2 = abs(char.bodies[3].link[2])
    hip_off = {0: char.bodies[2].branch.copy(), 1: char.bodies[4].branch.copy()}
    step_len = speed * period

    def foot_world(side, t):
        # side 0 = left (stance during first half cycle), 1 = right
        phase = (t / period + 0.5 * side) % 1.0
        cycle = np.floor(t / period + 0.5 * side)
        base_x = (cycle - 0.5 * side) * step_len
        if phase < 0.5:                       # stance
            return base_x, 0.0
        s = (phase - 0.5) / 0.5               # swing
        x = base_x + step_len * _smoothstep(s)
        z = lift * np.sin(np.pi * s)
        return x, z

    qs = np.zeros((n_frames, char.nq))
    for i in range(n_frames):
        t = i * dt
        root = np.array([speed * t,
                         0.0,
                         root_z - bob * 0.5 * (1 - np.cos(4 * np.pi * t / period))])
        q = np.zeros(char.nq)
        q[0:3] = root
        q[7] = 0.04 * np.sin(2 * np.pi * t / period)   # torso pitch
        for side, (hip_slice, knee_slice) in enumerate((((9, 12), (12, 15)),
                                                        ((15, 18), (18, 21)))):
            fx, fz = foot_world(side, t)
            hip = root + hip_off[side]
            hip_pitch, knee_pitch = _leg_ik(fx - hip[0], fz - hip[2], l1, l2)
            q[hip_slice[0] + 1] = hip_pitch
            q[knee_slice[0] + 1] = knee_pitch
        qs[i] = q
    return qs


def synthesize(cfg, duration):
    """Generate a MotionSequence with ground truth for the configured plant."""
    char = plant_character(cfg)
    dt = 1.0 / cfg.fps
    n_frames = int(round(duration * cfg.fps))
    rng = np.random.default_rng(cfg.seed)
    p = cfg.params

    if cfg.kind in ("pendulum", "double_pendulum"):
        q0 = np.zeros(char.nq)
        amp = np.deg2rad(p.get("amplitude_deg", 5.0))
        q0[7] = amp                                 # first joint pitch
        if cfg.kind == "double_pendulum":
            q0[10] = p.get("amplitude2", 0.0)
        quat0 = qt.IDENTITY.copy()
        qdot0 = np.zeros(char.nq)
        q_gt, quat_gt, qdot_gt = _rk4_rollout(char, q0, quat0, qdot0,
                                              n_frames, dt, fixed_base=True)
    elif cfg.kind == "floating_chain":
        q0 = np.zeros(char.nq)
        q0[2] = p.get("height", 1.0)
        quat0 = qt.IDENTITY.copy()
        qdot0 = np.zeros(char.nq)
        qdot0[3:6] = p.get("spin", (0.6, 1.1, -0.4))
        qdot0[0:3] = p.get("velocity", (0.4, 0.0, 1.2))
        q0[3:6] = 0.0
        q_gt, quat_gt, qdot_gt = _rk4_rollout(char, q0, quat0, qdot0,
                                              n_frames, dt, fixed_base=False)
    elif cfg.kind == "keyframed_walk":
        q_gt = _walk_gt(char, n_frames, dt, p)
    else:
        raise ValueError(f"unknown plant kind {cfg.kind!r}")

    p_gt = np.stack([np.asarray(fk(char, q_gt[i],
                                   ad.rotvec_to_quat(q_gt[i, 3:6]),
                                   with_motion=False).keypoints)
                     for i in range(n_frames)])

    obs = q_gt + rng.normal(0.0, cfg.sigma, q_gt.shape) if cfg.sigma > 0 \
        else q_gt.copy()
    for _ in range(cfg.burst_count):
        start = int(rng.integers(0, max(1, n_frames - cfg.burst_duration)))
        coord = int(rng.integers(0, char.nq))
        obs[start:start + cfg.burst_duration, coord] += cfg.burst_offset

    contacts = None
    if char.foot_bodies():
        from .training import generate_contact_labels
        contacts = generate_contact_labels(p_gt, char.foot_bodies())

    return MotionSequence(fps=cfg.fps, character=char, obs=obs, q_gt=q_gt,
                          p_gt=p_gt, contacts=contacts)


# ---------------------------------------------------------------------------
# CSV keypoint import (x,y,z per joint per row) with least-squares IK.
# The pose fit is an interpretation: the source material implies but does not
# define the keypoint-to-state mapping.

def import_keypoint_csv(path, char, fps, iterations=20, damping=1e-4):
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    n = char.n_bodies
    if raw.shape[1] != 3 * n:
        raise ValueError(f"expected {3 * n} columns (x,y,z per joint), "
                         f"got {raw.shape[1]}")
    targets = raw.reshape(raw.shape[0], n, 3)
    nq = char.nq
    q = np.zeros(nq)
    out = np.zeros((raw.shape[0], nq))
    for t in range(raw.shape[0]):
        q = q.copy()
        q[0:3] = targets[t, 0]
        for _ in range(iterations):
            quat = ad.rotvec_to_quat(q[3:6])
            cache = fk(char, q, quat)
            resid = (targets[t] - np.asarray(cache.keypoints)).reshape(-1)
            jac = np.concatenate(
                [np.asarray(point_jacobian(char, cache, b))
                 for b in range(n)], axis=0)
            gram = jac.T @ jac + damping * np.eye(nq)
            step = np.linalg.solve(gram, jac.T @ resid)
            q = q + step
            if np.linalg.norm(step) < 1e-10:
                break
        out[t] = q
    return MotionSequence(fps=fps, character=char, obs=out)
