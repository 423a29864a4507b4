"""Bijective alignment maps on a layer's activation space.

All maps act on row batches: ``apply`` sends hidden states ``(n, d)`` to
latents ``(n, d)`` and ``invert`` undoes it.  Both are differentiable with
respect to the map's parameters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, ValidationError


# -- partitions ---------------------------------------------------------------
@dataclass(frozen=True)
class Partition:
    """Disjoint latent coordinate sets, one per inner node; the rest unused."""

    nodes: dict
    layer_dim: int

    def __post_init__(self):
        nodes = {str(k): tuple(int(i) for i in v) for k, v in dict(self.nodes).items()}
        object.__setattr__(self, "nodes", nodes)
        seen = set()
        for v, idx in nodes.items():
            if not idx:
                raise ValidationError(f"node {v!r} has an empty coordinate set")
            if min(idx) < 0 or max(idx) >= self.layer_dim:
                raise ValidationError(f"node {v!r} uses coordinates outside [0, {self.layer_dim})")
            if len(set(idx)) != len(idx) or seen.intersection(idx):
                raise ValidationError(f"coordinate sets overlap at node {v!r}")
            seen.update(idx)

    @classmethod
    def contiguous(cls, node_ids, size, layer_dim):
        """Node k gets latent coordinates ``[k*size, (k+1)*size)``."""
        node_ids = list(node_ids)
        if size <= 0 or size * len(node_ids) > layer_dim:
            raise ConfigError(f"{len(node_ids)} nodes of size {size} do not fit in {layer_dim} coordinates")
        return cls({v: range(k * size, (k + 1) * size) for k, v in enumerate(node_ids)}, layer_dim)

    @property
    def unused(self):
        used = set(itertools.chain.from_iterable(self.nodes.values()))
        return tuple(i for i in range(self.layer_dim) if i not in used)

    @property
    def intervention_size(self):
        sizes = {len(v) for v in self.nodes.values()}
        return sizes.pop() if len(sizes) == 1 else None

    def __getitem__(self, v):
        return self.nodes[v]

    def __iter__(self):
        return iter(self.nodes)

    def to_dict(self):
        return {"layer_dim": self.layer_dim, "nodes": {k: list(v) for k, v in self.nodes.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["nodes"], d["layer_dim"])


# -- maps ---------------------------------------------------------------------
class AlignmentMap:
    family = "abstract"

    def __init__(self, dim):
        if dim <= 0:
            raise ConfigError("map dimension must be positive")
        self.dim = int(dim)

    def parameters(self):
        return []

    def _check(self, h):
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.ndim != 2 or h.shape[1] != self.dim:
            raise ShapeError(f"{self.family} map expects (n, {self.dim}), got {h.shape}")
        return h

    def state(self):
        return {f"p{i}": p.data.copy() for i, p in enumerate(self.parameters())}

    def load_state(self, state):
        for i, p in enumerate(self.parameters()):
            p.data = np.array(state[f"p{i}"], dtype=np.float64)

    def header(self):
        return {"family": self.family, "d": self.dim}

    def save(self, path, partition=None, extra=None):
        h = self.header()
        if partition is not None:
            h["partition"] = partition.to_dict()
        h.update(extra or {})
        ad.save_bundle(path, self.state(), h)


class IdentityMap(AlignmentMap):
    family = "identity"

    def apply(self, h):
        return self._check(h)

    def invert(self, z):
        return self._check(z)


class OrthogonalMap(AlignmentMap):
    """``z = Q h`` with ``Q`` the Cayley transform of a skew matrix.

    Only the strictly lower triangle of ``A`` matters; ``S = L - L^T`` where
    ``L`` is that triangle, and ``Q = (I - S)(I + S)^-1``.
    """

    family = "orthogonal"

    def __init__(self, dim, a=None):
        super().__init__(dim)
        self.a = Tensor(np.zeros((dim, dim)) if a is None else a, requires_grad=True)
        self._lower = np.tril(np.ones((dim, dim)), -1)

    def parameters(self):
        return [self.a]

    def q(self):
        return materialize_orthogonal(self.a, self._lower)

    def apply(self, h):
        return ad.matmul(self._check(h), self.q().T)

    def invert(self, z):
        return ad.matmul(self._check(z), self.q())


def materialize_orthogonal(a, lower=None):
    """Differentiable Cayley transform of the skew part of ``a``."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    d = a.shape[0]
    if a.shape != (d, d):
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    low = a * (np.tril(np.ones((d, d)), -1) if lower is None else lower)
    s = low - low.T
    eye = np.eye(d)
    return ad.gauss_solve(s + eye, eye - s)


class _Subnet:
    """linear -> relu -> linear with the last layer starting at zero."""

    def __init__(self, d_in, hidden, rng):
        bound = 1.0 / np.sqrt(d_in)
        self.w1 = Tensor(rng.uniform(-bound, bound, (d_in, hidden)), True)
        self.b1 = Tensor(rng.uniform(-bound, bound, hidden), True)
        self.w2 = Tensor(np.zeros((hidden, d_in)), True)
        self.b2 = Tensor(np.zeros(d_in), True)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        return ad.linear(ad.relu(ad.linear(x, self.w1, self.b1)), self.w2, self.b2)


class RevNetMap(AlignmentMap):
    """Stack of additive coupling blocks.

    Block forward: ``y1 = x1 + F(x2)``, ``y2 = x2 + G(y1)``.
    Block inverse: ``x2 = y2 - G(y1)``, ``x1 = y1 - F(x2)``.
    """

    family = "revnet"

    def __init__(self, dim, n_blocks=10, hidden=16, seed=0):
        super().__init__(dim)
        if dim % 2:
            raise ConfigError(f"RevNet needs an even dimension, got {dim}")
        if n_blocks <= 0 or hidden <= 0:
            raise ConfigError("RevNet needs at least one block and a positive hidden width")
        self.n_blocks, self.hidden, self.seed = int(n_blocks), int(hidden), seed
        rng = np.random.default_rng(seed)
        half = dim // 2
        self.blocks = [(_Subnet(half, hidden, rng), _Subnet(half, hidden, rng)) for _ in range(n_blocks)]

    def parameters(self):
        return [p for f, g in self.blocks for p in (*f.params(), *g.params())]

    def header(self):
        return {**super().header(), "L_rn": self.n_blocks, "d_rn": self.hidden, "seed": self.seed}

    def apply(self, h):
        h = self._check(h)
        half = self.dim // 2
        x1, x2 = h[:, :half], h[:, half:]
        for f, g in self.blocks:
            x1 = x1 + f(x2)
            x2 = x2 + g(x1)
        return ad.concat([x1, x2], axis=1)

    def invert(self, z):
        z = self._check(z)
        half = self.dim // 2
        y1, y2 = z[:, :half], z[:, half:]
        for f, g in reversed(self.blocks):
            y2 = y2 - g(y1)
            y1 = y1 - f(y2)
        return ad.concat([y1, y2], axis=1)


def make_map(family, dim, n_blocks=10, hidden=16, seed=0):
    if family == "identity":
        return IdentityMap(dim)
    if family in ("orthogonal", "linear"):
        return OrthogonalMap(dim)
    if family in ("revnet", "nonlinear"):
        return RevNetMap(dim, n_blocks, hidden, seed)
    raise ConfigError(f"unknown map family {family!r}")


def load_map(path):
    """Returns ``(map, partition or None, header)``."""
    arrays, h = ad.load_bundle(path)
    m = make_map(h["family"], h["d"], h.get("L_rn", 10), h.get("d_rn", 16), h.get("seed", 0))
    m.load_state(arrays)
    part = Partition.from_dict(h["partition"]) if "partition" in h else None
    return m, part, h


# -- greedy search for identity partitions ------------------------------------
@dataclass
class GreedyResult:
    partition: Partition
    trace: list = field(default_factory=list)


def patched_hidden(h_base, h_src, mask, nodes, sets):
    """Identity-map interchange on cached hidden states (numpy)."""
    out = h_base.copy()
    for j, v in enumerate(nodes):
        idx = list(sets.get(v, ()))
        if idx:
            rows = mask[:, j]
            out[np.ix_(rows, idx)] = h_src[rows, j][:, idx]
    return out


def _ce_and_iia(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    return loss, strict_argmax_accuracy(logits, y)


def strict_argmax_accuracy(logits, y):
    gold = logits[np.arange(len(y)), y]
    others = logits.copy()
    others[np.arange(len(y)), y] = -np.inf
    return float(np.mean(gold > others.max(axis=1)))


def greedy_identity_search(dnn, alg, layer, max_size, eval_set):
    """Grow one neuron per inner node per round, scoring by cross-entropy.

    With at most two inner nodes, every ordered combination of distinct
    unassigned neurons is scored jointly each round.  With more nodes the
    nodes are extended one after another, each choice conditioned on the
    current sets.  ``alg`` may be a model or a list of inner node ids in the
    column order of ``eval_set``.
    """
    nodes = list(eval_set.nodes)
    inner = list(getattr(alg, "inner", alg))
    if sorted(inner) != sorted(nodes):
        raise ValidationError(f"eval set nodes {nodes} do not match algorithm nodes {inner}")
    d = dnn.layer_dim(layer)
    if max_size <= 0 or max_size * len(nodes) > d - 1:
        raise ConfigError(f"size {max_size} for {len(nodes)} nodes leaves no unused neuron out of {d}")
    n, k, width = eval_set.sources.shape
    h_base = dnn.hidden_states(eval_set.x_base)[layer - 1]
    h_src = dnn.hidden_states(eval_set.sources.reshape(n * k, width))[layer - 1].reshape(n, k, d)
    y = eval_set.y_gold

    def score(sets):
        h = patched_hidden(h_base, h_src, eval_set.mask, nodes, sets)
        return _ce_and_iia(dnn.numpy_logits_from_layer(h, layer), y)

    sets = {v: () for v in nodes}
    trace = []
    for rnd in range(1, max_size + 1):
        used = set(itertools.chain.from_iterable(sets.values()))
        free = [i for i in range(d) if i not in used]
        evaluated = 0
        if len(nodes) <= 2:
            best = None
            for combo in itertools.permutations(free, len(nodes)):
                cand = {v: sets[v] + (c,) for v, c in zip(nodes, combo)}
                loss, iia = score(cand)
                evaluated += 1
                if best is None or loss < best[0]:
                    best = (loss, iia, cand)
            loss, iia, sets = best
        else:
            for v in nodes:
                used = set(itertools.chain.from_iterable(sets.values()))
                best = None
                for c in (i for i in range(d) if i not in used):
                    cand = dict(sets, **{v: sets[v] + (c,)})
                    loss, iia = score(cand)
                    evaluated += 1
                    if best is None or loss < best[0]:
                        best = (loss, iia, cand)
                loss, iia, sets = best
        trace.append({"round": rnd, "candidates": evaluated, "loss": loss, "iia": iia,
                      "partition": {v: list(s) for v, s in sets.items()}})
    return GreedyResult(Partition(sets, d), trace)
