import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from causalign import autodiff as ad
from causalign.autodiff import Tensor
from causalign.errors import MissingArtifactError, ShapeError, SingularMatrixError


def numeric_grad(f, arrays, i, h=1e-6):
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    for idx in np.ndindex(base[i].shape):
        up = [a.copy() for a in base]
        dn = [a.copy() for a in base]
        up[i][idx] += h
        dn[i][idx] -= h
        g[idx] = (f(*up) - f(*dn)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def check_grads(build, arrays, tol=1e-4):
    """``build`` maps Tensors to a Tensor; the scalar probed is <out, W>."""
    rng = np.random.default_rng(0)
    w = None

    def scalar(*arrs):
        nonlocal w
        out = build(*[Tensor(a) for a in arrs]).data
        if w is None:
            w = rng.normal(size=out.shape)
        return float(np.sum(out * w))

    scalar(*arrays)
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward(w)
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i)
        assert rel_err(t.grad, num) < tol, f"operand {i}"


rng = np.random.default_rng(1)
A34, B45, C34 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(3, 4))

OPS = {
    "matmul": (lambda a, b: ad.matmul(a, b), [A34, B45]),
    "add": (lambda a, b: a + b, [A34, C34]),
    "sub": (lambda a, b: a - b, [A34, C34]),
    "neg": (lambda a: -a, [A34]),
    "mul": (lambda a, b: a * b, [A34, C34]),
    "mul_const": (lambda a: a * C34, [A34]),
    "scalar_add": (lambda a, b: a + b, [A34, np.array(0.7)]),
    "add_bias": (lambda a, b: ad.add_bias(a, b), [A34, rng.normal(size=4)]),
    "linear": (lambda x, w, b: ad.linear(x, w, b), [A34, B45, rng.normal(size=5)]),
    "linear_nobias": (lambda x, w: ad.linear(x, w), [A34, B45]),
    "transpose": (lambda a: a.T, [A34]),
    "sum": (lambda a: a.sum(), [A34]),
    "mean": (lambda a: a.mean(), [A34]),
    "relu": (lambda a: ad.relu(a), [A34 + 0.05]),
    "rowmax": (lambda a: ad.rowmax(a), [A34]),
    "slice": (lambda a: a[:, 1:3], [A34]),
    "fancy": (lambda a: a[np.array([0, 2, 0])], [A34]),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), [A34, C34]),
    "concat1": (lambda a, b: ad.concat([a, b], axis=1), [A34, C34]),
    "softmax": (lambda a: ad.softmax(a), [A34]),
    "xent": (lambda a: ad.softmax_cross_entropy(a, np.array([0, 3, 1])), [A34]),
    "solve": (lambda a, b: ad.gauss_solve(a, b),
              [rng.normal(size=(4, 4)) + 4 * np.eye(4), rng.normal(size=(4, 2))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name):
    build, arrays = OPS[name]
    check_grads(build, arrays)


def test_composite_graph_gradient():
    # shared subexpressions exercise gradient accumulation on the tape
    def build(x, w):
        h = ad.relu(ad.matmul(x, w))
        return ad.softmax_cross_entropy(ad.concat([h, h * h], axis=1), np.array([0, 1, 5]))

    check_grads(build, [A34, rng.normal(size=(4, 3))])


def test_softmax_cross_entropy_matches_logsumexp_oracle():
    z = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 10.0]])
    y = np.array([2, 0])
    expect = np.mean(logsumexp(z, axis=1) - z[[0, 1], y])
    assert ad.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expect, abs=1e-14)
    # frozen: log(1 + e^-1 + e^-2) for row 0
    assert ad.softmax_cross_entropy(Tensor(z[:1]), y[:1]).item() == pytest.approx(0.40760596444438013, abs=1e-15)


def test_softmax_rows_sum_to_one_and_survive_large_logits():
    p = ad.softmax(Tensor([[1000.0, 0.0], [-5.0, 5.0]])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        ad.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2))).backward()


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([[-1.0, 0.0, 2.0]]), requires_grad=True)
    ad.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_rowmax_tie_sends_gradient_to_first():
    x = Tensor(np.array([[3.0, 3.0, 1.0]]), requires_grad=True)
    ad.rowmax(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_solve_matches_numpy_and_flags_singular():
    a = rng.normal(size=(6, 6))
    b = rng.normal(size=(6, 3))
    np.testing.assert_allclose(ad.solve_numeric(a, b), np.linalg.solve(a, b), atol=1e-10)
    with pytest.raises(SingularMatrixError):
        ad.solve_numeric(np.ones((3, 3)), np.ones(3))


def test_no_tape_without_grad():
    out = ad.matmul(Tensor(A34), Tensor(B45))
    assert not out.requires_grad and out._parents == ()


def test_tape_order_parents_first():
    x = Tensor(A34, requires_grad=True)
    y = ad.relu(x)
    z = (y * y).sum()
    order = ad.tape(z)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            assert pos[id(p)] < pos[id(t)]
    assert order[-1] is z


def test_adam_first_step_is_lr_times_sign():
    # bias correction makes step one equal lr * g / (|g| + eps')
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 0.0])]
    new, state = ad.adam_step(p, g, None, lr=0.1)
    np.testing.assert_allclose(new[0], [0.9, -1.9, 0.5], atol=1e-8)
    assert state["t"] == 1
    assert p[0][0] == 1.0  # inputs untouched


def test_adam_minimises_quadratic():
    w = Tensor(np.array([[3.0, -2.0]]), requires_grad=True)
    opt = ad.Adam([w], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert np.abs(w.data).max() < 1e-3


def test_bundle_roundtrip(tmp_path):
    arrays = {"w": rng.normal(size=(3, 2)), "b": np.arange(4.0), "s": np.array(2.5)}
    ad.save_bundle(tmp_path / "ck", arrays, {"note": "x"})
    got, header = ad.load_bundle(tmp_path / "ck")
    assert header == {"note": "x"}
    for k, v in arrays.items():
        assert got[k].shape == v.shape
        np.testing.assert_array_equal(got[k], v)
    manifest = json.loads((tmp_path / "ck.json").read_text())
    assert manifest["dtype"] == "f64" and manifest["byteorder"] == "little"
    assert (tmp_path / "ck.bin").stat().st_size == 8 * (6 + 4 + 1)
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_missing_bundle(tmp_path):
    with pytest.raises(MissingArtifactError):
        ad.load_bundle(tmp_path / "nope")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_linear_gradient_property(n, d, k, seed):
    r = np.random.default_rng(seed)
    check_grads(lambda x, w, b: ad.linear(x, w, b),
                [r.normal(size=(n, d)), r.normal(size=(d, k)), r.normal(size=k)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_solve_residual_property(n, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(n, n)) + n * np.eye(n)
    b = r.normal(size=(n, 2))
    x = ad.solve_numeric(a, b)
    assert np.abs(a @ x - b).max() < 1e-9
