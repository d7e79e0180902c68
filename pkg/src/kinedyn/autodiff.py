"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Variable` wraps a float64 ndarray. Operations on Variables record
nodes onto the active :class:`Tape`; record order is creation order, which is
a valid topological order by construction, so ``Tape.backward`` is a single
reverse sweep with no sorting. Every module-level op also accepts plain
ndarrays (or scalars) and then evaluates eagerly without recording, so the
same numerical code serves traced (training) and untraced (inference) paths.

All computation is float64 and single-threaded numpy, so repeated runs over
identical inputs produce bitwise-identical values and gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "Variable", "Tape", "value", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "power",
    "transpose", "reshape", "concat", "getitem",
    "asum", "amean", "sin", "cos", "exp", "log", "sqrt", "tanh", "absolute",
    "atan2", "sigmoid", "softplus", "leaky_relu", "layer_norm",
    "l1_norm", "l2_norm", "row_norms_sum", "bce",
    "cholesky_solve", "cholesky_inverse",
    "cross", "skew", "outer", "rotx", "roty", "rotz",
    "quat_mul", "quat_normalize", "quat_to_matrix",
    "rotvec_to_quat", "quat_to_rotvec",
]

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; nesting is not supported. ``backward`` seeds the
    root gradient and walks the records once in reverse, accumulating into
    every reachable Variable's ``.grad``.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root):
        """Accumulate d(root)/d(leaf) into .grad for everything on the tape."""
        if not isinstance(root, Variable):
            raise TypeError("backward root must be a Variable")
        if root.value.size != 1:
            raise ValueError("backward root must be scalar")
        root.grad = np.ones_like(root.value)
        for out, inputs, backfn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for var, ig in zip(inputs, backfn(g)):
                if ig is None or not isinstance(var, Variable):
                    continue
                if var.grad is None:
                    var.grad = ig
                else:
                    var.grad = var.grad + ig

    def reset(self):
        """Drop all records (and their captured buffers)."""
        self._nodes.clear()


class Variable:
    """A float64 array with a gradient slot; arithmetic records to the tape."""

    __slots__ = ("value", "grad")

    # Make numpy defer mixed expressions like `ndarray @ Variable` to our
    # reflected operators instead of coercing the Variable to an object array.
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return asum(self, axis)

    def __repr__(self):
        return f"Variable({self.value!r})"

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x):
    """Unwrap a Variable to its ndarray; pass ndarrays/scalars through."""
    return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


def _record(out_value, inputs, backfn):
    out = Variable(out_value)
    if _ACTIVE_TAPE is None:
        raise RuntimeError("operation on Variables requires an active Tape")
    _ACTIVE_TAPE._nodes.append((out, inputs, backfn))
    return out


def _any_var(*xs):
    return any(isinstance(x, Variable) for x in xs)


def _unbroadcast(grad, shape):
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return av + bv

    def backfn(g, asha=av.shape, bsha=bv.shape):
        return _unbroadcast(g, asha), _unbroadcast(g, bsha)

    return _record(av + bv, (a, b), backfn)


def sub(a, b):
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return av - bv

    def backfn(g, asha=av.shape, bsha=bv.shape):
        return _unbroadcast(g, asha), _unbroadcast(-g, bsha)

    return _record(av - bv, (a, b), backfn)


def mul(a, b):
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return av * bv

    def backfn(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(av * bv, (a, b), backfn)


def div(a, b):
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return av / bv

    def backfn(g):
        return (_unbroadcast(g / bv, av.shape),
                _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _record(av / bv, (a, b), backfn)


def neg(a):
    av = value(a)
    if not _any_var(a):
        return -av
    return _record(-av, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise a**p with constant exponent p."""
    av = value(a)
    p = float(p)
    if not _any_var(a):
        return av ** p
    return _record(av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def matmul(a, b):
    """Matrix product for 2-D/1-D operand combinations."""
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return av @ bv
    out = av @ bv

    def backfn(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av  # 1-D dot

    return _record(out, (a, b), backfn)


def transpose(a):
    av = value(a)
    if not _any_var(a):
        return av.T
    return _record(av.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = value(a)
    if not _any_var(a):
        return av.reshape(shape)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def concat(parts, axis=0):
    vals = [value(p) for p in parts]
    if not _any_var(*parts):
        return np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backfn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate(vals, axis=axis), tuple(parts), backfn)


def getitem(a, idx):
    av = value(a)
    if not _any_var(a):
        return av[idx]

    def backfn(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _record(av[idx], (a,), backfn)


def asum(a, axis=None):
    av = value(a)
    if not _any_var(a):
        return np.sum(av, axis=axis)

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return _record(np.sum(av, axis=axis), (a,), backfn)


def amean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return div(asum(a, axis), float(n))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sin(a):
    av = value(a)
    if not _any_var(a):
        return np.sin(av)
    return _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    if not _any_var(a):
        return np.cos(av)
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a):
    av = value(a)
    if not _any_var(a):
        return np.exp(av)
    ev = np.exp(av)
    return _record(ev, (a,), lambda g: (g * ev,))


def log(a):
    av = value(a)
    if not _any_var(a):
        return np.log(av)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    av = value(a)
    if not _any_var(a):
        return np.sqrt(av)
    sv = np.sqrt(av)
    return _record(sv, (a,), lambda g: (g / (2.0 * sv),))


def tanh(a):
    av = value(a)
    if not _any_var(a):
        return np.tanh(av)
    tv = np.tanh(av)
    return _record(tv, (a,), lambda g: (g * (1.0 - tv * tv),))


def absolute(a):
    """|a| with subgradient 0 at 0."""
    av = value(a)
    if not _any_var(a):
        return np.abs(av)
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def atan2(y, x):
    yv, xv = value(y), value(x)
    if not _any_var(y, x):
        return np.arctan2(yv, xv)
    d = xv * xv + yv * yv

    def backfn(g):
        return (_unbroadcast(g * xv / d, yv.shape),
                _unbroadcast(-g * yv / d, xv.shape))

    return _record(np.arctan2(yv, xv), (y, x), backfn)


def _expit(av):
    # overflow-safe logistic
    out = np.empty_like(av, dtype=np.float64)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ex = np.exp(av[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    av = np.asarray(value(a), dtype=np.float64)
    sv = _expit(av)
    if not _any_var(a):
        return sv
    return _record(sv, (a,), lambda g: (g * sv * (1.0 - sv),))


def softplus(a):
    av = np.asarray(value(a), dtype=np.float64)
    ov = np.logaddexp(0.0, av)
    if not _any_var(a):
        return ov
    return _record(ov, (a,), lambda g: (g * _expit(av),))


def leaky_relu(a, slope=0.01):
    av = value(a)
    fac = np.where(av > 0.0, 1.0, slope)
    if not _any_var(a):
        return av * fac
    return _record(av * fac, (a,), lambda g: (g * fac,))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xv, gv, bv = value(x), value(gamma), value(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gv * xhat + bv
    if not _any_var(x, gamma, beta):
        return out

    def backfn(g):
        dxhat = g * gv
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = _unbroadcast(g * xhat, gv.shape)
        dbeta = _unbroadcast(g, bv.shape)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backfn)


# ---------------------------------------------------------------------------
# reductions used as losses


def l1_norm(a):
    """sum(|a|); subgradient 0 at kinks."""
    av = value(a)
    if not _any_var(a):
        return np.sum(np.abs(av))
    return _record(np.sum(np.abs(av)), (a,), lambda g: (g * np.sign(av),))


def l2_norm(a):
    """Euclidean norm of the flattened input; gradient 0 at the origin."""
    av = value(a)
    nv = np.sqrt(np.sum(av * av))
    if not _any_var(a):
        return nv

    def backfn(g):
        if nv == 0.0:
            return (np.zeros_like(av),)
        return (g * av / nv,)

    return _record(nv, (a,), backfn)


def row_norms_sum(a):
    """sum over rows of the Euclidean norm along the last axis.

    Zero-norm rows get zero gradient.
    """
    av = value(a)
    norms = np.sqrt(np.sum(av * av, axis=-1))
    out = np.sum(norms)
    if not _any_var(a):
        return out

    def backfn(g):
        safe = np.where(norms == 0.0, 1.0, norms)
        scale = np.where(norms == 0.0, 0.0, 1.0 / safe)
        return (g * av * scale[..., None],)

    return _record(out, (a,), backfn)


def bce(p, target, eps=1e-7):
    """Summed binary cross-entropy; probabilities clamped to [eps, 1-eps].

    Gradient is zero where the clamp is active (target is a constant).
    """
    pv, tv = value(p), value(target)
    pc = np.clip(pv, eps, 1.0 - eps)
    out = -np.sum(tv * np.log(pc) + (1.0 - tv) * np.log(1.0 - pc))
    if not _any_var(p):
        return out
    inside = (pv > eps) & (pv < 1.0 - eps)

    def backfn(g):
        dp = (pc - tv) / (pc * (1.0 - pc)) * inside
        return (g * dp, None)

    return _record(out, (p, target), backfn)


# ---------------------------------------------------------------------------
# linear solves (symmetric positive definite only)


def _chol(av):
    return np.linalg.cholesky(av)


def _chol_solve(L, b):
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


def cholesky_solve(A, b):
    """Solve A x = b for symmetric positive-definite A via Cholesky.

    A must be exactly symmetric: the factorization reads only the lower
    triangle, and the adjoint (-A^{-1} g x^T for the A slot) assumes the
    upstream graph produces symmetric perturbations.
    """
    av, bv = value(A), value(b)
    L = _chol(av)
    x = _chol_solve(L, bv)
    if not _any_var(A, b):
        return x

    def backfn(g):
        gb = _chol_solve(L, g)
        if x.ndim == 1:
            ga = -np.outer(gb, x)
        else:
            ga = -gb @ x.T
        return ga, gb

    return _record(x, (A, b), backfn)


def cholesky_inverse(A):
    """A^{-1} for symmetric positive-definite A, formed from Cholesky factors.

    Adjoint is -A^{-T} g A^{-T} (= -Y g Y here since Y = A^{-1} is symmetric).
    """
    av = value(A)
    L = _chol(av)
    Y = _chol_solve(L, np.eye(av.shape[0]))
    if not _any_var(A):
        return Y
    return _record(Y, (A,), lambda g: (-Y @ g @ Y,))


# ---------------------------------------------------------------------------
# geometric primitives


def cross(a, b):
    """3-vector cross product; matrices are treated as stacked columns (3, n)."""
    av, bv = value(a), value(b)
    ov = np.cross(av, bv, axis=0)
    if not _any_var(a, b):
        return ov

    def backfn(g):
        ga = _unbroadcast(np.cross(bv, g, axis=0), av.shape)
        gb = _unbroadcast(np.cross(g, av, axis=0), bv.shape)
        return ga, gb

    return _record(ov, (a, b), backfn)


def skew(v):
    """3-vector -> 3x3 skew matrix S with S y = v x y."""
    vv = value(v)
    out = np.array([[0.0, -vv[2], vv[1]],
                    [vv[2], 0.0, -vv[0]],
                    [-vv[1], vv[0], 0.0]])
    if not _any_var(v):
        return out

    def backfn(g):
        return (np.array([g[2, 1] - g[1, 2],
                          g[0, 2] - g[2, 0],
                          g[1, 0] - g[0, 1]]),)

    return _record(out, (v,), backfn)


def outer(u, v):
    uv, vv = value(u), value(v)
    if not _any_var(u, v):
        return np.outer(uv, vv)

    def backfn(g):
        return g @ vv, g.T @ uv

    return _record(np.outer(uv, vv), (u, v), backfn)


def _rot_prim(theta, build, dbuild):
    tv = float(value(theta))
    out = build(np.cos(tv), np.sin(tv))
    if not _any_var(theta):
        return out
    dR = dbuild(np.cos(tv), np.sin(tv))

    def backfn(g):
        return (np.asarray(np.sum(g * dR)).reshape(value(theta).shape),)

    return _record(out, (theta,), backfn)


def rotx(theta):
    return _rot_prim(
        theta,
        lambda c, s: np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]),
        lambda c, s: np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]))


def roty(theta):
    return _rot_prim(
        theta,
        lambda c, s: np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]),
        lambda c, s: np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]))


def rotz(theta):
    return _rot_prim(
        theta,
        lambda c, s: np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]),
        lambda c, s: np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]))


# ---------------------------------------------------------------------------
# quaternions (x, y, z, w) real-last, Hamilton convention


def _qmul_np(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + bw * ax + ay * bz - az * by,
        aw * by + bw * ay + az * bx - ax * bz,
        aw * bz + bw * az + ax * by - ay * bx,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def _qconj_np(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_mul(a, b):
    """Hamilton product a*b for (x, y, z, w) quaternions."""
    av, bv = value(a), value(b)
    if not _any_var(a, b):
        return _qmul_np(av, bv)

    def backfn(g):
        return _qmul_np(g, _qconj_np(bv)), _qmul_np(_qconj_np(av), g)

    return _record(_qmul_np(av, bv), (a, b), backfn)


def quat_normalize(q):
    qv = value(q)
    n = np.sqrt(np.sum(qv * qv))
    out = qv / n
    if not _any_var(q):
        return out

    def backfn(g):
        return ((g - out * np.dot(out, g)) / n,)

    return _record(out, (q,), backfn)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (polynomial form, as written)."""
    x, y, z, w = value(q)
    out = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    if not _any_var(q):
        return out
    dx = np.array([[0, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = np.array([[-4 * y, 2 * x, 2 * w], [2 * x, 0, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = np.array([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, 0]])
    dw = np.array([[0, -2 * z, 2 * y], [2 * z, 0, -2 * x], [-2 * y, 2 * x, 0]])

    def backfn(g):
        return (np.array([np.sum(g * dx), np.sum(g * dy),
                          np.sum(g * dz), np.sum(g * dw)]),)

    return _record(out, (q,), backfn)


_SMALL_ANGLE = 1e-4


def rotvec_to_quat(r):
    """Exponential map: rotation vector -> unit quaternion (x, y, z, w)."""
    rv = value(r)
    t = np.sqrt(np.sum(rv * rv))
    if t > _SMALL_ANGLE:
        k = np.sin(0.5 * t) / t
        dk_over_t = (0.5 * np.cos(0.5 * t) * t - np.sin(0.5 * t)) / t ** 3
        half_sinc = np.sin(0.5 * t) / (2.0 * t)
    else:
        # series around t = 0, accurate to ~1e-16 below the cutoff
        k = 0.5 - t * t / 48.0
        dk_over_t = -1.0 / 24.0 + t * t / 960.0
        half_sinc = 0.25 - t * t / 96.0
    out = np.concatenate([rv * k, [np.cos(0.5 * t)]])
    if not _any_var(r):
        return out

    def backfn(g):
        gv, gw = g[:3], g[3]
        gr = k * gv + dk_over_t * rv * np.dot(rv, gv) - gw * half_sinc * rv
        return (gr,)

    return _record(out, (r,), backfn)


def quat_to_rotvec(q):
    """Log map: unit quaternion -> rotation vector.

    The sign of q is canonicalized (w >= 0) first so the angle is <= pi; the
    sign factor is treated as a constant under differentiation.
    """
    qv = value(q)
    sg = 1.0 if qv[3] >= 0.0 else -1.0
    v, w = sg * qv[:3], sg * qv[3]
    s = np.sqrt(np.sum(v * v))
    n2 = s * s + w * w
    if s > _SMALL_ANGLE:
        theta = 2.0 * np.arctan2(s, w)
        f = theta / s
        df_ds_over_s = (2.0 * w * s / n2 - theta) / s ** 3
        df_dw = -2.0 / n2
    else:
        f = 2.0 / w - 2.0 * s * s / (3.0 * w ** 3)
        df_ds_over_s = -4.0 / (3.0 * w ** 3)
        df_dw = -2.0 / w ** 2 + 2.0 * s * s / w ** 4
    out = v * f
    if not _any_var(q):
        return out

    def backfn(g):
        vdotg = np.dot(v, g)
        gv = f * g + df_ds_over_s * v * vdotg
        gw = vdotg * df_dw
        return (sg * np.concatenate([gv, [gw]]),)

    return _record(out, (q,), backfn)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None):
    """Compare tape gradients of scalar f() against central finite differences.

    ``params`` maps names to leaf Variables that f reads. Large parameters can
    be subsampled (``max_entries`` per parameter, seeded by ``rng``). Returns
    ``{name: max relative error}`` with rel = |a-b| / max(|a|, |b|, 1e-2); the
    floor turns the test absolute (~1e-6 at eps=1e-5) for near-zero gradients.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        out = f()
        tape.backward(out)
    analytic = {k: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    def eval_scalar():
        with Tape():
            return float(value(f()))

    report = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = np.sort(r.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            fp = eval_scalar()
            flat[i] = keep - eps
            fm = eval_scalar()
            flat[i] = keep
            fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(fd), 1e-2)
            worst = max(worst, abs(ga[i] - fd) / denom)
        report[name] = worst
    return report
