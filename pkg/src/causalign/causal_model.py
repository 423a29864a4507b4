"""Deterministic causal models: DAGs of named nodes evaluated under interventions.

Node functions are looked up by name in a module-level registry so a model
can be written to and read from JSON.  Intervened nodes skip their function
and take the assigned value; everything else is computed in topological
order from parent values.
"""

from __future__ import annotations

import heapq
import json
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, ValidationError

KINDS = ("input", "inner", "output")
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}

FUNCTIONS = {}


def register(name):
    """Decorator adding a pure node function to the registry under ``name``."""

    def deco(fn):
        if name in FUNCTIONS and FUNCTIONS[name] is not fn:
            raise ValueError(f"node function {name!r} already registered")
        FUNCTIONS[name] = fn
        return fn

    return deco


def vectors_equal(a, b):
    # exact: equal blocks are produced by copying
    return bool(np.array_equal(a, b))


@register("identity")
def _identity(a):
    return np.array(a, copy=True)


@register("vec_eq")
def _vec_eq(a, b):
    return vectors_equal(a, b)


@register("bool_eq")
def _bool_eq(a, b):
    return bool(a) == bool(b)


@register("and")
def _and(a, b):
    return bool(a) and bool(b)


@register("or")
def _or(a, b):
    return bool(a) or bool(b)


@register("and_of_vec_eqs")
def _and_of_vec_eqs(a, b, c, d):
    return vectors_equal(a, b) and vectors_equal(c, d)


@register("or_of_vec_eqs")
def _or_of_vec_eqs(a, b, c, d):
    return vectors_equal(a, b) or vectors_equal(c, d)


@register("bool_eq_vec_eq")
def _bool_eq_vec_eq(v, c, d):
    return bool(v) == vectors_equal(c, d)


@register("vec_eq_eq_vec_eq")
def _vec_eq_eq_vec_eq(a, b, c, d):
    return vectors_equal(a, b) == vectors_equal(c, d)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    parents: tuple = ()
    func: str | None = None
    dim: int | None = None  # vector-valued nodes only; None means boolean

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.kind not in KINDS:
            raise GraphError(f"node {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == "input":
            if self.parents or self.func is not None:
                raise GraphError(f"input node {self.id!r} cannot have parents or a function")
        elif self.func not in FUNCTIONS:
            raise GraphError(f"node {self.id!r}: unregistered function {self.func!r}")


@dataclass(frozen=True)
class CausalModel:
    """An immutable DAG of :class:`Node` objects.

    Input values are supplied either as a mapping from input-node id to value
    or as one flat vector split into equal blocks across the input nodes in
    declaration order.
    """

    name: str
    nodes: tuple
    order: tuple = field(init=False, repr=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        by_id = {}
        for n in nodes:
            if n.id in by_id:
                raise GraphError(f"duplicate node id {n.id!r}")
            by_id[n.id] = n
        for n in nodes:
            for p in n.parents:
                if p not in by_id:
                    raise GraphError(f"node {n.id!r} has unknown parent {p!r}")
                if by_id[p].kind == "output":
                    raise GraphError(f"output node {p!r} cannot be a parent of {n.id!r}")
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "order", tuple(topo_order(self)))

    def __getitem__(self, node_id):
        return self._by_id[node_id]

    def __contains__(self, node_id):
        return node_id in self._by_id

    def ids(self, kind):
        return [n.id for n in self.nodes if n.kind == kind]

    @property
    def inputs(self):
        return self.ids("input")

    @property
    def inner(self):
        return self.ids("inner")

    @property
    def outputs(self):
        return self.ids("output")

    def ancestors(self, node_id):
        seen, stack = set(), list(self[node_id].parents)
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self[p].parents)
        return seen

    # -- serialisation ---------------------------------------------------
    def to_dict(self):
        return {
            "name": self.name,
            "nodes": [
                {"id": n.id, "kind": n.kind, "parents": list(n.parents), "func": n.func, "dim": n.dim}
                for n in self.nodes
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(Node(n["id"], n["kind"], tuple(n.get("parents", ())),
                                         n.get("func"), n.get("dim")) for n in d["nodes"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def topo_order(model):
    """Parents before children; ties broken by (kind, id) for reproducibility.

    Ranking by kind first keeps every input ahead of every inner node and
    every inner node ahead of the outputs whenever the edges allow it.
    """
    nodes = {n.id: n for n in model.nodes}
    children = {i: [] for i in nodes}
    indeg = {i: len(n.parents) for i, n in nodes.items()}
    for n in nodes.values():
        for p in n.parents:
            children[p].append(n.id)
    heap = [(_KIND_RANK[nodes[i].kind], i) for i, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, i = heapq.heappop(heap)
        out.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, (_KIND_RANK[nodes[c].kind], c))
    if len(out) != len(nodes):
        cyclic = sorted(i for i, d in indeg.items() if d > 0)
        raise GraphError(f"graph has a cycle through {cyclic}")
    return out


def _bind_inputs(model, x):
    ids = model.inputs
    if isinstance(x, Mapping):
        missing = [i for i in ids if i not in x]
        if missing:
            raise ValidationError(f"missing input values for {missing}")
        return {i: x[i] for i in ids}
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size % len(ids):
        raise ValidationError(f"input of length {x.size} does not split into {len(ids)} blocks")
    return dict(zip(ids, np.split(x, len(ids))))


def validate_intervention(model, iv):
    for node_id, value in iv.items():
        if node_id not in model:
            raise ValidationError(f"intervention on unknown node {node_id!r}")
        node = model[node_id]
        if node.kind == "input":
            raise ValidationError(f"cannot intervene on input node {node_id!r}")
        if node.dim is not None and np.shape(value) != (node.dim,):
            raise ValidationError(f"node {node_id!r} expects a vector of length {node.dim}, got shape {np.shape(value)}")
        if node.dim is None and np.ndim(value) != 0:
            raise ValidationError(f"node {node_id!r} expects a scalar value, got shape {np.shape(value)}")


def evaluate(model, x, iv=None):
    """Run ``model`` on ``x`` under intervention ``iv``.

    Returns ``(output, trace)`` where ``trace`` maps every node id to its
    value.  With a single output node ``output`` is that node's value,
    otherwise a tuple in declaration order.
    """
    iv = iv or {}
    validate_intervention(model, iv)
    trace = _bind_inputs(model, x)
    for node_id in model.order:
        node = model[node_id]
        if node.kind == "input":
            continue
        if node_id in iv:
            trace[node_id] = iv[node_id]
        else:
            trace[node_id] = FUNCTIONS[node.func](*(trace[p] for p in node.parents))
    outs = tuple(trace[o] for o in model.outputs)
    return (outs[0] if len(outs) == 1 else outs), trace


def run_until(model, x, iv, node_id):
    """Value taken by ``node_id`` when running ``model`` on ``x`` under ``iv``."""
    if node_id not in model:
        raise ValidationError(f"unknown node {node_id!r}")
    return evaluate(model, x, iv)[1][node_id]
