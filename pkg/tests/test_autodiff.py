"""Finite-difference verification of every differentiable primitive."""
from __future__ import annotations

import numpy as np
import pytest

import kinedyn.autodiff as ad

RTOL = 1e-4


def check(build, arrays, eps=1e-5):
    params = {k: ad.Variable(np.asarray(v, dtype=np.float64))
              for k, v in arrays.items()}
    report = ad.grad_check(lambda: build(params), params, eps=eps)
    for name, err in report.items():
        assert err < RTOL, f"{name}: rel error {err:.3e}"


R = np.random.default_rng(42)
A23 = R.normal(0.7, 0.4, (2, 3))
B23 = R.normal(-0.3, 0.5, (2, 3))
M33 = R.normal(0.0, 0.6, (3, 3))
V3 = R.normal(0.4, 0.8, 3)
W3 = R.normal(-0.2, 0.7, 3)
POS = np.abs(R.normal(1.2, 0.3, (2, 3))) + 0.2
SPD = M33 @ M33.T + 2.0 * np.eye(3)
UNIT_Q = np.array([0.2, -0.3, 0.4, 0.8])
UNIT_Q = UNIT_Q / np.linalg.norm(UNIT_Q)

CASES = {
    "add": (lambda p: ad.asum(p["a"] + p["b"]), {"a": A23, "b": B23}),
    "add_broadcast": (lambda p: ad.asum(p["a"] + p["v"]),
                      {"a": A23, "v": V3}),
    "sub": (lambda p: ad.asum(p["a"] - p["b"]), {"a": A23, "b": B23}),
    "mul": (lambda p: ad.asum(p["a"] * p["b"]), {"a": A23, "b": B23}),
    "div": (lambda p: ad.asum(p["a"] / p["b"]), {"a": A23, "b": POS}),
    "neg": (lambda p: ad.asum(-p["a"]), {"a": A23}),
    "power": (lambda p: ad.asum(p["a"] ** 3), {"a": A23}),
    "matmul": (lambda p: ad.asum(p["a"] @ p["m"]), {"a": A23, "m": M33}),
    "matvec": (lambda p: ad.asum(p["m"] @ p["v"]), {"m": M33, "v": V3}),
    "transpose": (lambda p: ad.asum(ad.transpose(p["a"]) @ p["a"]),
                  {"a": A23}),
    "reshape": (lambda p: ad.asum(ad.reshape(p["a"], (3, 2)) @ p["a"]),
                {"a": A23}),
    "concat": (lambda p: ad.l2_norm(ad.concat([p["v"], p["w"]])),
               {"v": V3, "w": W3}),
    "concat_axis1": (lambda p: ad.l2_norm(ad.reshape(
        ad.concat([p["a"], p["b"]], axis=1), (-1,))), {"a": A23, "b": B23}),
    "getitem": (lambda p: ad.asum(p["a"][0, 1:3] * p["a"][1, 0:2]),
                {"a": A23}),
    "sum_axis": (lambda p: ad.l2_norm(ad.asum(p["a"], axis=0)), {"a": A23}),
    "mean": (lambda p: ad.amean(p["a"] * p["a"]), {"a": A23}),
    "sin": (lambda p: ad.asum(ad.sin(p["a"])), {"a": A23}),
    "cos": (lambda p: ad.asum(ad.cos(p["a"])), {"a": A23}),
    "exp": (lambda p: ad.asum(ad.exp(p["a"])), {"a": A23}),
    "log": (lambda p: ad.asum(ad.log(p["p"])), {"p": POS}),
    "sqrt": (lambda p: ad.asum(ad.sqrt(p["p"])), {"p": POS}),
    "tanh": (lambda p: ad.asum(ad.tanh(p["a"])), {"a": A23}),
    "absolute": (lambda p: ad.asum(ad.absolute(p["a"])), {"a": A23}),
    "atan2": (lambda p: ad.asum(ad.atan2(p["v"], p["p"])),
              {"v": V3, "p": POS[0]}),
    "sigmoid": (lambda p: ad.asum(ad.sigmoid(p["a"])), {"a": A23}),
    "softplus": (lambda p: ad.asum(ad.softplus(p["a"])), {"a": A23}),
    "leaky_relu": (lambda p: ad.asum(ad.leaky_relu(p["a"], 0.01)),
                   {"a": A23}),
    "layer_norm": (lambda p: ad.l2_norm(
        ad.layer_norm(p["v"], p["g"], p["b"])),
        {"v": V3, "g": np.ones(3) + 0.1 * W3, "b": 0.1 * V3}),
    "l1_norm": (lambda p: ad.l1_norm(p["a"]), {"a": A23}),
    "l2_norm": (lambda p: ad.l2_norm(p["a"]), {"a": A23}),
    "row_norms_sum": (lambda p: ad.row_norms_sum(p["a"]), {"a": A23}),
    "bce": (lambda p: ad.bce(ad.sigmoid(p["v"]), np.array([1.0, 0.0, 1.0])),
            {"v": V3}),
    "cholesky_solve": (lambda p: ad.l2_norm(
        ad.cholesky_solve(p["s"] + ad.transpose(p["s"]) + 6.0 * np.eye(3),
                          p["v"])), {"s": 0.3 * M33, "v": V3}),
    "cholesky_inverse": (lambda p: ad.asum(ad.cholesky_inverse(
        p["s"] + ad.transpose(p["s"]) + 6.0 * np.eye(3))),
        {"s": 0.3 * M33}),
    "cross": (lambda p: ad.l2_norm(ad.cross(p["v"], p["w"])),
              {"v": V3, "w": W3}),
    "skew": (lambda p: ad.asum(ad.skew(p["v"]) @ p["w"]),
             {"v": V3, "w": W3}),
    "outer": (lambda p: ad.asum(ad.outer(p["v"], p["w"])),
              {"v": V3, "w": W3}),
    "rotx": (lambda p: ad.l2_norm(ad.rotx(p["t"]) @ p["v"]),
             {"t": 0.6, "v": V3}),
    "roty": (lambda p: ad.l2_norm(ad.roty(p["t"]) @ p["v"]),
             {"t": -0.4, "v": V3}),
    "rotz": (lambda p: ad.l2_norm(ad.rotz(p["t"]) @ p["v"]),
             {"t": 1.1, "v": V3}),
    "quat_mul": (lambda p: ad.l2_norm(
        ad.quat_mul(ad.quat_normalize(p["q"]), ad.quat_normalize(p["r"]))),
        {"q": UNIT_Q, "r": np.array([0.1, 0.5, -0.2, 0.7])}),
    "quat_normalize": (lambda p: ad.l2_norm(
        ad.quat_normalize(p["q"]) * np.array([1.0, 2.0, 3.0, 4.0])),
        {"q": 2.0 * UNIT_Q}),
    "quat_to_matrix": (lambda p: ad.asum(
        ad.quat_to_matrix(ad.quat_normalize(p["q"])) @ p["v"]),
        {"q": UNIT_Q, "v": V3}),
    "rotvec_to_quat": (lambda p: ad.l2_norm(ad.rotvec_to_quat(p["r"])
                                            * np.array([1.0, 2.0, 3.0, 4.0])),
                       {"r": 0.7 * V3}),
    "rotvec_to_quat_small": (lambda p: ad.l2_norm(
        ad.rotvec_to_quat(p["r"]) * np.array([1.0, 2.0, 3.0, 4.0])),
        {"r": 1e-7 * V3}),
    "quat_to_rotvec": (lambda p: ad.l2_norm(
        ad.quat_to_rotvec(ad.rotvec_to_quat(p["r"]))), {"r": 0.5 * W3}),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient(name):
    build, arrays = CASES[name]
    check(build, arrays)


def test_deep_chain_gradient():
    # long mixed composition exercising re-used intermediates (fan-out)
    def build(p):
        x = p["x"]
        y = ad.tanh(p["m"] @ x) + ad.sigmoid(x)
        z = ad.softplus(y * y - ad.sin(x))
        return ad.l2_norm(z) + ad.l1_norm(y) + ad.amean(z * y)

    check(build, {"x": V3, "m": M33})


def test_backward_accumulates_fanout():
    x = ad.Variable(np.array([2.0]))
    with ad.Tape() as tape:
        y = x * x + x * x          # two paths into the same leaf
        tape.backward(ad.asum(y))
    assert np.allclose(x.grad, [8.0])


def test_value_passthrough():
    assert ad.value(3.5) == 3.5
    v = ad.Variable(np.arange(3.0))
    assert np.all(ad.value(v) == np.arange(3.0))


def test_requires_tape():
    v = ad.Variable(np.ones(2))
    with pytest.raises(RuntimeError):
        _ = v + v


def test_gradients_deterministic():
    def run():
        p = ad.Variable(M33.copy())
        with ad.Tape() as tape:
            out = ad.l2_norm(ad.tanh(p @ p) @ V3)
            tape.backward(out)
        return p.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_unbroadcast_shapes():
    a = ad.Variable(np.ones((2, 3)))
    b = ad.Variable(np.ones(3))
    with ad.Tape() as tape:
        tape.backward(ad.asum(a * b))
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, [2.0, 2.0, 2.0])
