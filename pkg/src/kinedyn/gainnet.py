"""The gain-predicting network: MLP trunk, output heads, GRU Kalman head.

One forward step consumes the current filtered state (q, qdot, feet
positions/velocities), the four dynamics features, and the GRU hidden state;
it emits a GainBundle: Kalman gain matrix, PD gains, inertia-bias matrix,
contact probabilities, contact forces, and contact-point Jacobians.

Parameters are a flat dict of named arrays. Passing Variables runs the step
on the active tape for training; passing plain ndarrays (see
``GainNet.numpy_params``) runs it tape-free for inference. Head
initializations: Kalman-gain diagonal starts at 0.5, per-foot vertical force
bias equals 9.81 * total mass, PD group scales start at (30, 14, 1.9) and
(1.5, 0.1, 0.05), and H and C start as identity.

The Jacobian head emits a learned correction added to the analytic point
Jacobian supplied by the caller. It starts at exactly zero: contact forces
are weight-scale (hundreds of N) while distal twist inertias are ~3e-3
kg m^2, so even 1e-3 of initial Jacobian noise produces torques that blow
up a rollout before training can correct them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .control import PD_SCALE_KD, PD_SCALE_KP, PDGains

__all__ = ["GainNetConfig", "GainBundle", "GainNet", "gru_step",
           "save_checkpoint", "load_checkpoint"]


def _default_head_scales():
    # Forward maps are out = bias + scale * (W @ x). The scale bounds how far
    # a fresh head strays from its bias values (gain 0.5 I, weight force,
    # zero inertia bias) and, since Adam steps every weight by ~lr per
    # update, also slows how fast the head output can drift during the
    # unstable early epochs. Heads multiplying weight-scale forces against
    # small inertias (gain, inertia bias, force, Jacobian) get small scales;
    # the sigmoid/softplus-bounded heads run at full scale.
    return {"k": 0.1, "kp": 1.0, "kd": 1.0,
            "mb": 0.01, "rho": 1.0, "f": 0.01, "jac": 0.001}


@dataclass(frozen=True)
class GainNetConfig:
    trunk_width: int = 512
    trunk_depth: int = 3
    gru_hidden: int = 128
    leaky_slope: float = 0.01
    head_scales: dict = field(default_factory=_default_head_scales)

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("trunk_width", "trunk_depth", "gru_hidden", "leaky_slope",
                 "head_scales")}


@dataclass
class GainBundle:
    """All per-step network outputs."""

    gain: object                # (nq, nq) Kalman gain
    kp: object                  # (nq,)
    kd: object                  # (nq,)
    inertia_bias: object        # (nq, nq), symmetric
    rho: object                 # (2,)
    forces: object              # (2, 3)
    jacobians: object           # (2, 3, nq)

    def pd_gains(self, scale_kp=None, scale_kd=None):
        return PDGains(kp=self.kp, kd=self.kd,
                       scale_kp=scale_kp, scale_kd=scale_kd)


def gru_step(params, prefix, x, h):
    """Standard GRU cell (update/reset gates, tanh candidate)."""
    p = params
    r = ad.sigmoid(p[prefix + "w_ir"] @ x + p[prefix + "b_ir"]
                   + p[prefix + "w_hr"] @ h + p[prefix + "b_hr"])
    z = ad.sigmoid(p[prefix + "w_iz"] @ x + p[prefix + "b_iz"]
                   + p[prefix + "w_hz"] @ h + p[prefix + "b_hz"])
    n = ad.tanh(p[prefix + "w_in"] @ x + p[prefix + "b_in"]
                + r * (p[prefix + "w_hn"] @ h + p[prefix + "b_hn"]))
    return (1.0 - z) * n + z * h


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class GainNet:
    """Parameter container plus the forward step."""

    def __init__(self, char, config, params):
        self.char = char
        self.config = config
        self.params = params

    # ------------------------------------------------------------------
    @property
    def nq(self):
        return self.char.nq

    def state_input_dim(self):
        return 2 * self.nq + 12

    def feature_dim(self):
        return 4 * self.nq

    @classmethod
    def param_shapes(cls, char, config):
        nq = char.nq
        w, d, gh = config.trunk_width, config.trunk_depth, config.gru_hidden
        sdim = 2 * nq + 12
        fdim = 4 * nq
        shapes = {}
        last = sdim
        for i in range(d):
            shapes[f"trunk{i}_w"] = (w, last)
            shapes[f"trunk{i}_b"] = (w,)
            shapes[f"trunk{i}_gamma"] = (w,)
            shapes[f"trunk{i}_beta"] = (w,)
            last = w
        for g in ("r", "z", "n"):
            shapes[f"gru_w_i{g}"] = (gh, fdim)
            shapes[f"gru_b_i{g}"] = (gh,)
            shapes[f"gru_w_h{g}"] = (gh, gh)
            shapes[f"gru_b_h{g}"] = (gh,)
        shapes["k_head_w"] = (nq * nq, gh + w)
        shapes["k_head_b"] = (nq * nq,)
        shapes["kp_head_w"] = (nq, w)
        shapes["kp_head_b"] = (nq,)
        shapes["kd_head_w"] = (nq, w)
        shapes["kd_head_b"] = (nq,)
        shapes["mb_head_w"] = (nq * nq, w)
        shapes["mb_head_b"] = (nq * nq,)
        shapes["rho_head_w"] = (2, w)
        shapes["rho_head_b"] = (2,)
        shapes["f_head_w"] = (6, w)
        shapes["f_head_b"] = (6,)
        shapes["jac_head_w"] = (6 * nq, w)
        shapes["jac_head_b"] = (6 * nq,)
        shapes["scale_kp"] = (3,)
        shapes["scale_kd"] = (3,)
        shapes["H"] = (nq, nq)
        shapes["C"] = (nq, nq)
        shapes["bone_lengths"] = (char.n_bodies,)
        return shapes

    @classmethod
    def init(cls, char, seed=0, config=None):
        config = config or GainNetConfig()
        rng = np.random.default_rng(seed)
        nq = char.nq
        shapes = cls.param_shapes(char, config)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(("_b", "_beta")) or name.startswith("gru_b"):
                params[name] = np.zeros(shape)
            elif name.endswith("_gamma"):
                params[name] = np.ones(shape)
            elif name == "jac_head_w":
                # exact zero: force-amplified against tiny twist inertias
                params[name] = np.zeros(shape)
            elif name.endswith("_w") or name.startswith("gru_w"):
                fan_in = shape[-1]
                params[name] = _uniform(rng, fan_in, shape)
            else:
                params[name] = None  # filled below
        # Kalman gain diagonal starts near 0.5
        kb = np.zeros(nq * nq)
        kb[:: nq + 1] = 0.5
        params["k_head_b"] = kb
        # per-foot vertical force bias = body weight
        fb = np.zeros(6)
        fb[2] = fb[5] = 9.81 * char.total_mass
        params["f_head_b"] = fb
        params["scale_kp"] = PD_SCALE_KP.copy()
        params["scale_kd"] = PD_SCALE_KD.copy()
        params["H"] = np.eye(nq)
        params["C"] = np.eye(nq)
        params["bone_lengths"] = char.bone_lengths.copy()
        missing = [k for k, v in params.items() if v is None]
        if missing:
            raise RuntimeError(f"uninitialized parameters: {missing}")
        return cls(char, config, {k: ad.Variable(v) for k, v in params.items()})

    # ------------------------------------------------------------------
    def numpy_params(self):
        """Plain-array view of the parameters (for tape-free inference)."""
        return {k: v.value for k, v in self.params.items()}

    def _trunk(self, p, x):
        e = x
        for i in range(self.config.trunk_depth):
            e = ad.leaky_relu(
                ad.layer_norm(p[f"trunk{i}_w"] @ e + p[f"trunk{i}_b"],
                              p[f"trunk{i}_gamma"], p[f"trunk{i}_beta"]),
                self.config.leaky_slope)
        return e

    def forward_step(self, q, qdot, feet_pos, feet_vel, features, h_gru,
                     params=None, jac_base=None):
        """One network evaluation; returns (GainBundle, new gru hidden).

        feet_pos/feet_vel are flat 6-vectors (left then right foot).
        features is a DynamicsFeatures instance. jac_base, if given, is the
        (2, 3, nq) analytic point Jacobian the learned correction is added
        to; without it the head output is returned as-is.
        """
        p = self.params if params is None else params
        s = self.config.head_scales
        nq = self.nq
        x = ad.concat([q, qdot, feet_pos, feet_vel])
        e = self._trunk(p, x)

        h_new = gru_step(p, "gru_", features.stacked(), h_gru)
        k_in = ad.concat([h_new, e])
        gain = ad.reshape(s["k"] * (p["k_head_w"] @ k_in) + p["k_head_b"],
                          (nq, nq))

        sp_kp = ad.softplus(s["kp"] * (p["kp_head_w"] @ e) + p["kp_head_b"])
        sp_kd = ad.softplus(s["kd"] * (p["kd_head_w"] @ e) + p["kd_head_b"])
        kp = ad.concat([sp_kp[0:3] * p["scale_kp"][0],
                        sp_kp[3:6] * p["scale_kp"][1],
                        sp_kp[6:] * p["scale_kp"][2]])
        kd = ad.concat([sp_kd[0:3] * p["scale_kd"][0],
                        sp_kd[3:6] * p["scale_kd"][1],
                        sp_kd[6:] * p["scale_kd"][2]])

        b_raw = ad.reshape(s["mb"] * (p["mb_head_w"] @ e) + p["mb_head_b"],
                           (nq, nq))
        inertia_bias = b_raw + ad.transpose(b_raw)

        rho = ad.sigmoid(s["rho"] * (p["rho_head_w"] @ e) + p["rho_head_b"])
        forces = ad.reshape(s["f"] * (p["f_head_w"] @ e) + p["f_head_b"],
                            (2, 3))
        jacobians = ad.reshape(s["jac"] * (p["jac_head_w"] @ e)
                               + p["jac_head_b"], (2, 3, nq))
        if jac_base is not None:
            jacobians = jac_base + jacobians

        bundle = GainBundle(gain=gain, kp=kp, kd=kd,
                            inertia_bias=inertia_bias, rho=rho,
                            forces=forces, jacobians=jacobians)
        return bundle, h_new

    def zero_gru_state(self):
        return np.zeros(self.config.gru_hidden)


# ---------------------------------------------------------------------------
# checkpoint I/O: single .npz with a JSON meta record and the flat payload

CHECKPOINT_VERSION = 1


def save_checkpoint(net, path):
    meta = {
        "version": CHECKPOINT_VERSION,
        "character": net.char.name,
        "nq": net.nq,
        "config": net.config.to_dict(),
        "shapes": {k: list(v.value.shape) for k, v in net.params.items()},
    }
    payload = {k: v.value for k, v in net.params.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(
            json.dumps(meta).encode(), dtype=np.uint8), **payload)


def load_checkpoint(char, path):
    """Load a checkpoint, validating version and shapes against `char`."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        config = GainNetConfig(**meta["config"])
        expected = GainNet.param_shapes(char, config)
        params = {}
        for name, shape in expected.items():
            if name not in data:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            arr = data[name]
            if tuple(arr.shape) != tuple(shape):
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"expected {shape} for character {char.name!r}")
            params[name] = ad.Variable(arr.astype(np.float64))
    return GainNet(char, config, params)
