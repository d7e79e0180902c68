"""Proxy character model and differentiable forward kinematics.

State layout for a character with B bodies (body 0 is the floating root) and
N = B - 1 joints, nq = 6 + 3N:

  q[0:3]   root position (world)
  q[3:6]   root orientation, exponential coordinates; a mirror of the root
           quaternion kept in sync by the callers that own the state
  q[6+3k : 9+3k]  intrinsic XYZ Euler angles of joint k (body k+1)

Generalized velocities follow the same slots; qdot[3:6] are world-frame
angular velocity components (the root rotation axes are the world axes), so
the root quaternion integrates multiplicatively from them.

Each body carries a link vector in its own frame; its keypoint is the distal
end of that link. A child attaches at the parent keypoint plus a fixed branch
offset expressed in the parent frame. Root keypoint == q[0:3] (zero link).

``bone lengths`` are the per-body link norms. Forward kinematics optionally
takes a replacement lengths vector (e.g. a learnable Variable); links and COM
offsets scale proportionally and local inertia decomposes as A + l^2 B so
length gradients flow through both kinematics and dynamics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autodiff as ad

__all__ = [
    "Sphere", "Cylinder", "RigidBody", "ProxyCharacter", "SystemState",
    "KinCache", "make_character", "fk", "forward_kinematics",
    "point_jacobian", "point_velocity", "make_chain", "make_biped",
    "make_humanoid17", "character_to_dict", "character_from_dict",
    "load_character", "save_character",
]


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class Cylinder:
    """Solid cylinder whose axis runs along the body's link."""
    radius: float


@dataclass(frozen=True)
class RigidBody:
    name: str
    parent: int                 # -1 for the root
    mass: float
    link: np.ndarray            # (3,) bone vector, body frame
    branch: np.ndarray          # (3,) extra attach offset, parent frame
    geometry: object
    com_offset: np.ndarray      # (3,) COM, body frame
    inertia_a: np.ndarray       # (3,3) about COM: constant part
    inertia_b: np.ndarray       # (3,3) about COM: coefficient of length^2


def _rot_between(a, b):
    """Rotation matrix taking unit vector a to unit vector b (Rodrigues)."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        # opposite: rotate pi about any perpendicular axis
        perp = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            perp = np.array([0.0, 1.0, 0.0])
        perp = perp - a * np.dot(a, perp)
        perp /= np.linalg.norm(perp)
        return 2.0 * np.outer(perp, perp) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * (1.0 / (1.0 + c))


def _local_inertia(body_mass, geometry, link):
    """(A, B) with I_com(l) = A + l^2 B in the body frame."""
    m = body_mass
    if isinstance(geometry, Sphere):
        a = (2.0 / 5.0) * m * geometry.radius ** 2 * np.eye(3)
        return a, np.zeros((3, 3))
    if isinstance(geometry, Cylinder):
        r = geometry.radius
        length = np.linalg.norm(link)
        axis = link / length if length > 0 else np.array([0.0, 0.0, 1.0])
        rot = _rot_between(np.array([0.0, 0.0, 1.0]), axis)
        a_diag = np.diag([3 * m * r * r / 12.0, 3 * m * r * r / 12.0, m * r * r / 2.0])
        b_diag = np.diag([m / 12.0, m / 12.0, 0.0])
        return rot @ a_diag @ rot.T, rot @ b_diag @ rot.T
    raise TypeError(f"unknown geometry {geometry!r}")


@dataclass(frozen=True)
class ProxyCharacter:
    """Immutable rigid-body tree with precomputed topology masks."""

    name: str
    bodies: tuple
    left_foot: int | None
    right_foot: int | None
    nq: int
    total_mass: float
    bone_lengths: np.ndarray    # (B,) rest link norms; root entry may be 0
    children: tuple             # tuple of tuples of child indices
    dof_slices: tuple           # per body, slice into q
    last_dof: np.ndarray        # (B,) index of the body's last DOF
    anc_dof: np.ndarray         # (nq, nq) [i, j] = 1 iff DOF i precedes-or-is j on j's chain
    anc_sdot: np.ndarray        # anc_dof minus rotation carry inside the root block:
                                # root axes are world-fixed (q̇[3:6] is world-frame ω),
                                # so their directions do not ride on earlier root spins
    anc_body: np.ndarray        # (nq, B) [k, b] = 1 iff DOF k on the chain of body b
    mask_keep: np.ndarray       # (nq, nq) CRBA upper-shape mask (== anc_dof)
    mask_strict: np.ndarray     # (nq, nq) anc_dof without the diagonal
    prism_cols: np.ndarray      # (3, nq) identity block in the 3 prismatic slots

    @property
    def n_bodies(self):
        return len(self.bodies)

    @property
    def n_joints(self):
        return len(self.bodies) - 1

    def foot_bodies(self):
        return tuple(b for b in (self.left_foot, self.right_foot) if b is not None)


def make_character(name, bodies, left_foot=None, right_foot=None):
    """Validate a body list and build a ProxyCharacter with topology masks."""
    bodies = tuple(bodies)
    nb = len(bodies)
    if nb == 0:
        raise ValueError("character needs at least a root body")
    if bodies[0].parent != -1:
        raise ValueError("body 0 must be the root (parent == -1)")
    for i, b in enumerate(bodies):
        if i > 0 and not (0 <= b.parent < i):
            raise ValueError(f"body {i} ({b.name}): parent must precede it")
        if b.mass <= 0:
            raise ValueError(f"body {i} ({b.name}): mass must be > 0")
        if i > 0 and np.linalg.norm(b.link) <= 0:
            raise ValueError(f"body {i} ({b.name}): bone length must be > 0")
    for f in (left_foot, right_foot):
        if f is not None and not (0 <= f < nb):
            raise ValueError("foot body index out of range")

    nq = 6 + 3 * (nb - 1)
    children = [[] for _ in range(nb)]
    for i, b in enumerate(bodies):
        if i > 0:
            children[b.parent].append(i)
    dof_slices = [slice(0, 6)] + [slice(6 + 3 * k, 9 + 3 * k) for k in range(nb - 1)]
    last_dof = np.array([s.stop - 1 for s in dof_slices])

    # chain of DOF indices from the root down to each body, in motion order
    chains = []
    for i in range(nb):
        path = []
        j = i
        while j != -1:
            path.append(j)
            j = bodies[j].parent
        path.reverse()
        dofs = []
        for j in path:
            dofs.extend(range(dof_slices[j].start, dof_slices[j].stop))
        chains.append(dofs)

    anc_dof = np.zeros((nq, nq))
    for i in range(nb):
        dofs = chains[i]
        for a, k in enumerate(dofs):
            anc_dof[dofs[:a + 1], k] = 1.0
    anc_body = np.zeros((nq, nb))
    for i in range(nb):
        anc_body[chains[i], i] = 1.0
    mask_strict = anc_dof * (1.0 - np.eye(nq))
    anc_sdot = anc_dof.copy()
    anc_sdot[3, 4] = anc_sdot[3, 5] = anc_sdot[4, 5] = 0.0
    prism_cols = np.zeros((3, nq))
    prism_cols[:, 0:3] = np.eye(3)

    for arr in (last_dof, anc_dof, anc_sdot, anc_body, mask_strict,
                prism_cols):
        arr.setflags(write=False)

    return ProxyCharacter(
        name=name, bodies=bodies, left_foot=left_foot, right_foot=right_foot,
        nq=nq, total_mass=float(sum(b.mass for b in bodies)),
        bone_lengths=np.array([np.linalg.norm(b.link) for b in bodies]),
        children=tuple(tuple(c) for c in children),
        dof_slices=tuple(dof_slices), last_dof=last_dof,
        anc_dof=anc_dof, anc_sdot=anc_sdot, anc_body=anc_body,
        mask_keep=anc_dof, mask_strict=mask_strict, prism_cols=prism_cols)


@dataclass
class SystemState:
    """Generalized position/velocity plus the root-quaternion sidecar.

    q[3:6] mirrors root_quat in exponential coordinates; whoever updates one
    is responsible for resynchronizing the other (see filtering/pipeline).
    """

    q: object                   # (nq,)
    qdot: object                # (nq,)
    root_quat: object           # (4,) unit, (x, y, z, w)

    def with_q(self, q, root_quat=None):
        return SystemState(q=q, qdot=self.qdot,
                           root_quat=self.root_quat if root_quat is None else root_quat)


@dataclass
class KinCache:
    """World-frame kinematic quantities for one state, traced or plain."""

    q: object
    root_quat: object
    lengths: object             # None or (B,) replacement bone lengths
    R: list                     # per body (3,3) world rotation
    origin: list                # per body (3,) world joint origin
    keypoint: list              # per body (3,) distal end of the link
    keypoints: object           # (B, 3) stacked keypoints
    S: object                   # (6, nq) spatial joint motion matrix at world origin


def _link_vec(char, b, lengths):
    body = char.bodies[b]
    rest = char.bone_lengths[b]
    if lengths is None or rest == 0.0:
        return body.link
    return lengths[b] * (body.link / rest)


def com_local(char, b, lengths):
    """Body-frame COM, scaled proportionally when lengths are overridden."""
    body = char.bodies[b]
    rest = char.bone_lengths[b]
    if lengths is None or rest == 0.0:
        return body.com_offset
    return lengths[b] * (body.com_offset / rest)


def fk(char, q, root_quat, lengths=None, with_motion=True):
    """Forward kinematics; also assembles the (6, nq) joint motion matrix.

    Works on Variables (recording to the active tape) and on plain arrays.
    Set with_motion=False to skip the motion-matrix assembly when only
    keypoints are needed.
    """
    nb = char.n_bodies
    r_root = ad.quat_to_matrix(root_quat)
    p_root = q[0:3]
    rot = [r_root]
    origin = [p_root]
    root_link = _link_vec(char, 0, lengths)
    if isinstance(root_link, np.ndarray) and not np.any(root_link):
        keypoint = [p_root]
    else:
        keypoint = [p_root + r_root @ root_link]

    axes_blocks = []
    point_blocks = []
    for b in range(1, nb):
        body = char.bodies[b]
        par = body.parent
        rp = rot[par]
        if np.any(body.branch):
            o_b = keypoint[par] + rp @ body.branch
        else:
            o_b = keypoint[par]
        s = char.dof_slices[b]
        ax, ay, az = q[s.start], q[s.start + 1], q[s.start + 2]
        r_mid = rp @ ad.rotx(ax)
        r_b = r_mid @ ad.roty(ay) @ ad.rotz(az)
        rot.append(r_b)
        origin.append(o_b)
        keypoint.append(o_b + r_b @ _link_vec(char, b, lengths))
        if with_motion:
            axes_blocks.append(ad.concat(
                [rp[:, 0:1], r_mid[:, 1:2], r_b[:, 2:3]], axis=1))
            o_col = ad.reshape(o_b, (3, 1))
            point_blocks.append(ad.concat([o_col, o_col, o_col], axis=1))

    kps = ad.concat([ad.reshape(k, (1, 3)) for k in keypoint], axis=0)

    S = None
    if with_motion:
        p_col = ad.reshape(p_root, (3, 1))
        omega = ad.concat(
            [np.zeros((3, 3)), np.eye(3)] + axes_blocks, axis=1)
        pivots = ad.concat(
            [np.zeros((3, 3)), ad.concat([p_col, p_col, p_col], axis=1)]
            + point_blocks, axis=1)
        lin = ad.cross(pivots, omega) + char.prism_cols
        S = ad.concat([omega, lin], axis=0)

    return KinCache(q=q, root_quat=root_quat, lengths=lengths, R=rot,
                    origin=origin, keypoint=keypoint, keypoints=kps, S=S)


def forward_kinematics(char, state):
    """(B, 3) world keypoints for a SystemState (root keypoint == q[0:3])."""
    return fk(char, state.q, state.root_quat, with_motion=False).keypoints


def _as_cache(char, state_or_cache):
    if isinstance(state_or_cache, KinCache):
        return state_or_cache
    s = state_or_cache
    return fk(char, s.q, s.root_quat)


def point_jacobian(char, state_or_cache, body, local_point=None,
                   world_point=None):
    """(3, nq) Jacobian of a point rigidly attached to `body`.

    world linear velocity of the point = J @ qdot. The point defaults to the
    body's keypoint; `local_point` gives it in the body frame instead.
    Columns for DOFs off the body's chain are zero.
    """
    if not (0 <= body < char.n_bodies):
        raise IndexError(f"body index {body} out of range")
    cache = _as_cache(char, state_or_cache)
    if world_point is not None:
        point = world_point
    elif local_point is not None:
        point = cache.origin[body] + cache.R[body] @ np.asarray(local_point, dtype=np.float64)
    else:
        point = cache.keypoint[body]
    S = cache.S
    col = ad.reshape(point, (3, 1))
    return (S[3:6, :] + ad.cross(S[0:3, :], col)) * char.anc_body[:, body]


def point_velocity(char, cache, qdot, body, world_point=None):
    return point_jacobian(char, cache, body, world_point=world_point) @ qdot


# ---------------------------------------------------------------------------
# builders


def _mk_body(name, parent, mass, link, geometry, branch=None, com_offset=None):
    link = np.asarray(link, dtype=np.float64)
    branch = np.zeros(3) if branch is None else np.asarray(branch, dtype=np.float64)
    com = 0.5 * link if com_offset is None else np.asarray(com_offset, dtype=np.float64)
    ia, ib = _local_inertia(mass, geometry, link)
    for arr in (link, branch, com, ia, ib):
        arr.setflags(write=False)
    return RigidBody(name=name, parent=parent, mass=mass, link=link,
                     branch=branch, geometry=geometry, com_offset=com,
                     inertia_a=ia, inertia_b=ib)


def make_chain(n_links, link_length=0.3, mass=1.0, radius=0.04,
               direction=(0.0, 0.0, -1.0), point_mass=False,
               com_at_end=False, name=None, root_mass=1.0,
               point_radius=0.0):
    """Serial chain of n_links bodies hanging off a floating root.

    point_mass=True puts a sphere of radius point_radius at each link's COM
    (used by the textbook pendulum oracles together with com_at_end=True).
    point_radius=0 gives the exact textbook mass matrix but makes the axial
    rotation DOF singular; simulation needs a small positive radius.
    """
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    bodies = [_mk_body("root", -1, root_mass, np.zeros(3), Sphere(0.05))]
    lengths = np.broadcast_to(np.asarray(link_length, dtype=np.float64),
                              (n_links,))
    for i in range(n_links):
        link = direction * lengths[i]
        geom = Sphere(point_radius) if point_mass else Cylinder(radius)
        com = link if com_at_end else None
        bodies.append(_mk_body(f"link{i + 1}", i, mass, link, geom,
                               com_offset=com))
    return make_character(name or f"chain{n_links}", bodies)


def make_biped(name="walker5"):
    """Minimal 5-joint biped for the desk-scale experiments.

    Root pelvis, one torso joint, and two 2-joint legs; the shins' distal
    keypoints act as the feet.
    """
    # Limb radii are deliberately thick: the bone-axis (twist) inertia of a
    # cylinder is m r^2 / 2, and contact forces acting on a noisy foot
    # position kick the twist coordinates with torque ~ |f| * pose noise.
    # Thin limbs make those coordinates the stiffest part of the system by
    # orders of magnitude and the simulation step unusable at 50 Hz.
    bodies = [
        _mk_body("pelvis", -1, 6.0, np.zeros(3), Sphere(0.12)),
        _mk_body("torso", 0, 14.0, (0.0, 0.0, 0.45), Cylinder(0.16)),
        _mk_body("l_thigh", 0, 5.0, (0.0, 0.0, -0.40), Cylinder(0.13),
                 branch=(0.0, 0.10, 0.0)),
        _mk_body("l_shin", 2, 3.0, (0.0, 0.0, -0.40), Cylinder(0.12)),
        _mk_body("r_thigh", 0, 5.0, (0.0, 0.0, -0.40), Cylinder(0.13),
                 branch=(0.0, -0.10, 0.0)),
        _mk_body("r_shin", 4, 3.0, (0.0, 0.0, -0.40), Cylinder(0.12)),
    ]
    return make_character(name, bodies, left_foot=3, right_foot=5)


def make_humanoid17():
    """17-keypoint humanoid approximating a standard mocap skeleton."""
    with resources.files("kinedyn.characters").joinpath("humanoid17.json").open() as f:
        return character_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# (de)serialization


def character_to_dict(char):
    def geom(g):
        if isinstance(g, Sphere):
            return {"type": "sphere", "radius": g.radius}
        return {"type": "cylinder", "radius": g.radius}

    return {
        "version": 1,
        "name": char.name,
        "left_foot": None if char.left_foot is None else char.bodies[char.left_foot].name,
        "right_foot": None if char.right_foot is None else char.bodies[char.right_foot].name,
        "bodies": [
            {
                "name": b.name,
                "parent": None if b.parent == -1 else char.bodies[b.parent].name,
                "mass": b.mass,
                "link": list(b.link),
                "branch": list(b.branch),
                "geometry": geom(b.geometry),
                "com_offset": list(b.com_offset),
            }
            for b in char.bodies
        ],
    }


def character_from_dict(data):
    if data.get("version") != 1:
        raise ValueError(f"unsupported character version {data.get('version')!r}")
    name_to_idx = {}
    bodies = []
    for i, bd in enumerate(data["bodies"]):
        parent = -1 if bd["parent"] is None else name_to_idx[bd["parent"]]
        g = bd["geometry"]
        geometry = Sphere(g["radius"]) if g["type"] == "sphere" else Cylinder(g["radius"])
        bodies.append(_mk_body(bd["name"], parent, bd["mass"], bd["link"],
                               geometry, branch=bd.get("branch"),
                               com_offset=bd.get("com_offset")))
        name_to_idx[bd["name"]] = i
    lf = data.get("left_foot")
    rf = data.get("right_foot")
    return make_character(
        data["name"], bodies,
        left_foot=None if lf is None else name_to_idx[lf],
        right_foot=None if rf is None else name_to_idx[rf])


def load_character(path):
    with open(path) as f:
        return character_from_dict(json.load(f))


def save_character(char, path):
    with open(path, "w") as f:
        json.dump(character_to_dict(char), f, indent=2)
        f.write("\n")
