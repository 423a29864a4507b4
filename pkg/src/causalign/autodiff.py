"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation on a :class:`Tensor` that has at least one input requiring
gradients records its parents and a backward rule on the output.  Calling
:meth:`Tensor.backward` linearises the recorded graph into a tape (parents
before children) and replays the rules in reverse order.

Only bias-vector broadcasting is supported; every other binary op requires
identical shapes.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ShapeError, SingularMatrixError

__all__ = [
    "Tensor",
    "tensor",
    "tape",
    "matmul",
    "linear",
    "add_bias",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "concat",
    "rowmax",
    "gauss_solve",
    "solve_numeric",
    "Adam",
    "adam_step",
    "save_bundle",
    "load_bundle",
]

PIVOT_TOL = 1e-12


class Tensor:
    """Dense float64 array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the Tensor methods

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_as_tensor(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return _transpose(self)

    def sum(self):
        return _sum(self)

    def mean(self):
        return _sum(self) * (1.0 / self.data.size)

    def relu(self):
        return relu(self)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed grad shape {grad.shape} != output shape {self.shape}")
        order = tape(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def tape(root):
    """Recorded operations reachable from ``root`` in topological order.

    Leaves (parameters and constants that require grad) appear before the
    operations that consume them; ``root`` is last.
    """
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- elementwise / structural ops ---------------------------------------------
def _add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if b.ndim == 0 or a.ndim == 0:
            return _add_scalar(a, b)
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (use add_bias for bias rows)")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def _add_scalar(a, b):
    if a.ndim == 0:
        a, b = b, a
    return _make(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())))


def _neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def _mul(a, b):
    """Elementwise product; ``b`` may be a Python scalar or same-shape array."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        if c.ndim and c.shape != a.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {c.shape} differ")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _transpose(a):
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def _sum(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def _getitem(a, key):
    shape = a.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    """Concatenate 2-D tensors along ``axis``."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def rowmax(x):
    """Row-wise maximum of a 2-D tensor; the gradient goes to the first argmax."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros(x.shape)
        full[rows, idx] = g
        return (full,)

    return _make(x.data[rows, idx], (x,), backward)


# -- linear algebra -----------------------------------------------------------
def _check_2d(name, *ts):
    for t in ts:
        if t.ndim != 2:
            raise ShapeError(f"{name}: expected 2-D operands, got shape {t.shape}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x, b):
    """Add a bias vector of length n to every row of an (m, n) tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def linear(x, w, b=None):
    """Fused ``x @ w + b`` for row-vector batches."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_2d("linear", x, w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: inner dims differ, {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    if b is None:
        return _make(xd @ wd, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    b = _as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    return _make(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def solve_numeric(a, b):
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    Raises SingularMatrixError when a pivot falls below ``PIVOT_TOL`` in
    magnitude.
    """
    a = np.array(a, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    n = a.shape[0]
    if a.shape != (n, n) or x.shape[0] != n:
        raise ShapeError(f"solve: incompatible shapes {a.shape} and {np.shape(b)}")
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(f"pivot {a[p, k]:.3e} below {PIVOT_TOL:g} at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            x[[k, p]] = x[[p, k]]
        f = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(f, a[k, k:])
        x[k + 1:] -= np.outer(f, x[k])
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x[:, 0] if vector else x


def gauss_solve(a, b):
    """Differentiable solve of ``a @ x = b`` for square ``a`` and 2-D ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_2d("gauss_solve", a, b)
    if a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
        raise ShapeError(f"gauss_solve: incompatible shapes {a.shape} and {b.shape}")
    x = solve_numeric(a.data, b.data)
    ad = a.data

    def backward(g):
        gb = solve_numeric(ad.T, g)
        return (-gb @ x.T, gb)

    return _make(x, (a, b), backward)


# -- probabilistic heads ------------------------------------------------------
def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits):
    logits = _as_tensor(logits)
    _check_2d("softmax", logits)
    p = _softmax_rows(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    _check_2d("softmax_cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - z[rows, labels]))

    def backward(g):
        p = np.exp(z - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), backward)


# -- optimisation -------------------------------------------------------------
def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are sequences of arrays; ``state`` is the dict
    returned by a previous call (or ``None`` for a fresh optimiser).
    Returns ``(new_params, new_state)`` and never mutates its inputs.
    """
    b1, b2 = betas
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    if len(state["m"]) != len(params) or any(m.shape != p.shape for m, p in zip(state["m"], params)):
        raise ShapeError("Adam state does not match parameter shapes")
    t = state["t"] + 1
    new_m, new_v, new_p = [], [], []
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper over :func:`adam_step` for a list of leaf tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                    self.lr, self.betas, self.eps)
        for p, d in zip(self.params, new):
            p.data = d


# -- checkpoints --------------------------------------------------------------
def _atomic_write(path, payload, mode="wb"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_bundle(path, arrays, header=None):
    """Write named arrays as ``<path>.json`` (manifest) + ``<path>.bin`` (blob).

    The blob holds little-endian f64 values back to back; the manifest lists
    name, shape and byte offset for each array in insertion order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format": "causalign-bundle/1",
        "dtype": "f64",
        "byteorder": "little",
        "blob": path.name + ".bin",
        "tensors": entries,
        "header": header or {},
    }
    _atomic_write(path.with_name(path.name + ".bin"), b"".join(chunks))
    _atomic_write(path.with_name(path.name + ".json"),
                  json.dumps(manifest, indent=2, sort_keys=True), mode="w")


def load_bundle(path):
    """Inverse of :func:`save_bundle`; returns ``(arrays, header)``."""
    from .errors import MissingArtifactError

    path = Path(path)
    mpath = path.with_name(path.name + ".json")
    if not mpath.exists():
        raise MissingArtifactError(f"no bundle manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    blob = (mpath.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return arrays, manifest.get("header", {})
