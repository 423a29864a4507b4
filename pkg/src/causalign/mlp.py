"""Classification MLP and its training loops.

Layers follow the composition::

    h_1     = x W_0
    h_{l+1} = relu(h_l) W_l + b_l        1 <= l < L
    p       = softmax(h_L W_L)

Weights are stored as (fan_in, fan_out) so batches are rows.  "Hidden state
at layer l" always means the pre-activation ``h_l``; that is where
interventions are applied.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, ValidationError


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple = (16, 16, 16)
    num_classes: int = 2
    seed: int = 0
    lr: float = 1e-3
    batch: int = 1024
    max_epochs: int = 20
    patience: int = 3
    min_improvement: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be nonempty")
        if min((self.input_dim, self.num_classes, *self.hidden_dims)) <= 0:
            raise ConfigError("all dimensions must be positive")
        if self.batch <= 0 or self.max_epochs <= 0 or self.patience <= 0 or self.lr <= 0:
            raise ConfigError("batch, max_epochs, patience and lr must be positive")

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


class Mlp:
    def __init__(self, weights, biases):
        self.weights = [w if isinstance(w, Tensor) else Tensor(w, True) for w in weights]
        self.biases = [b if isinstance(b, Tensor) else Tensor(b, True) for b in biases]
        if len(self.biases) != len(self.weights) - 2:
            raise ShapeError("an MLP with L hidden layers has L+1 weight matrices and L-1 biases")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ShapeError(f"consecutive weights {w0.shape} and {w1.shape} do not chain")
        for b, w in zip(self.biases, self.weights[1:]):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"bias {b.shape} does not match weight {w.shape}")

    @classmethod
    def init(cls, cfg):
        rng = np.random.default_rng(cfg.seed)
        dims = [cfg.input_dim, *cfg.hidden_dims, cfg.num_classes]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            bound = 1.0 / np.sqrt(a)
            weights.append(rng.uniform(-bound, bound, size=(a, b)))
            if 0 < i < len(dims) - 2:
                biases.append(rng.uniform(-bound, bound, size=b))
        return cls(weights, biases)

    @property
    def num_layers(self):
        return len(self.weights) - 1

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def layer_dim(self, layer):
        self._check_layer(layer)
        return self.weights[layer].shape[0]

    def parameters(self):
        return [*self.weights, *self.biases]

    def state(self):
        return {f"W{i}": w.data.copy() for i, w in enumerate(self.weights)} | {
            f"b{i + 1}": b.data.copy() for i, b in enumerate(self.biases)}

    def load_state(self, state):
        for i, w in enumerate(self.weights):
            w.data = np.array(state[f"W{i}"], dtype=np.float64)
        for i, b in enumerate(self.biases):
            b.data = np.array(state[f"b{i + 1}"], dtype=np.float64)

    def copy(self):
        s = self.state()
        return Mlp([s[f"W{i}"] for i in range(len(self.weights))],
                   [s[f"b{i + 1}"] for i in range(len(self.biases))])

    def frozen(self):
        """Copy whose parameters take no part in gradient tapes."""
        m = self.copy()
        for p in m.parameters():
            p.requires_grad = False
        return m

    def _check_layer(self, layer):
        if not 1 <= layer <= self.num_layers:
            raise ValidationError(f"layer {layer} out of range 1..{self.num_layers}")

    # -- forward pieces --------------------------------------------------
    def forward_to_layer(self, x, layer):
        """Pre-activation hidden state ``h_layer``."""
        self._check_layer(layer)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of shape (n, {self.input_dim}), got {x.shape}")
        h = ad.linear(x, self.weights[0])
        for l in range(1, layer):
            h = ad.linear(ad.relu(h), self.weights[l], self.biases[l - 1])
        return h

    def logits_from_layer(self, h, layer):
        self._check_layer(layer)
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.ndim != 2 or h.shape[1] != self.layer_dim(layer):
            raise ShapeError(f"expected hidden states of width {self.layer_dim(layer)}, got {h.shape}")
        for l in range(layer, self.num_layers):
            h = ad.linear(ad.relu(h), self.weights[l], self.biases[l - 1])
        return ad.linear(h, self.weights[-1])

    def forward_from_layer(self, h, layer):
        """Class probabilities from a (possibly intervened) ``h_layer``."""
        return ad.softmax(self.logits_from_layer(h, layer))

    def logits(self, x):
        return self.logits_from_layer(self.forward_to_layer(x, 1), 1)

    def forward(self, x):
        return ad.softmax(self.logits(x))

    def hidden_states(self, x):
        """Numpy list ``[h_1, ..., h_L]`` for a batch, no tape."""
        h = np.asarray(x, dtype=np.float64) @ self.weights[0].data
        out = [h]
        for l in range(1, self.num_layers):
            h = np.maximum(h, 0.0) @ self.weights[l].data + self.biases[l - 1].data
            out.append(h)
        return out

    def numpy_logits_from_layer(self, h, layer):
        self._check_layer(layer)
        h = np.asarray(h, dtype=np.float64)
        for l in range(layer, self.num_layers):
            h = np.maximum(h, 0.0) @ self.weights[l].data + self.biases[l - 1].data
        return h @ self.weights[-1].data

    def predict(self, x, batch=65536):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(len(x), dtype=np.int64)
        for i in range(0, len(x), batch):
            out[i:i + batch] = self.logits(x[i:i + batch]).data.argmax(axis=1)
        return out

    def accuracy(self, x, y):
        return float(np.mean(self.predict(x) == np.asarray(y)))

    # -- persistence -----------------------------------------------------
    def save(self, path, header=None):
        ad.save_bundle(path, self.state(), {"kind": "mlp", "num_layers": self.num_layers, **(header or {})})

    @classmethod
    def load(cls, path):
        arrays, header = ad.load_bundle(path)
        n = header["num_layers"]
        return cls([arrays[f"W{i}"] for i in range(n + 1)], [arrays[f"b{i}"] for i in range(1, n)])


@dataclass
class TrainResult:
    model: Mlp
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_eval: float = float("-inf")
    stopped_early: bool = False
    shuffle_seed: int | None = None

    def write_csv(self, path):
        write_metrics_csv(path, self.history)


def write_metrics_csv(path, rows):
    path = Path(path)
    keys = list(rows[0]) if rows else ["epoch"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def _early_stopping_loop(model, cfg, run_epoch, evaluate):
    """Shared epoch loop: evaluate after each epoch, keep the best state."""
    rng = np.random.default_rng([cfg.seed, 1])
    res = TrainResult(model, shuffle_seed=cfg.seed)
    best_state, stale = model.state(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        loss = run_epoch(rng)
        score = evaluate()
        res.history.append({"epoch": epoch, "loss": loss, "eval_acc": score})
        if score > res.best_eval + cfg.min_improvement:
            res.best_eval, res.best_epoch, stale = score, epoch, 0
            best_state = model.state()
        else:
            stale += 1
            if stale >= cfg.patience:
                res.stopped_early = True
                break
    model.load_state(best_state)
    return res


def train(model, dataset, cfg, eval_dataset=None):
    """Adam on mean cross-entropy with early stopping on eval accuracy.

    ``dataset`` and ``eval_dataset`` are objects with ``x`` and ``y`` arrays.
    Without an eval set the training set is scored instead.  The model is
    updated in place and restored to its best-scoring epoch.
    """
    x, y = np.asarray(dataset.x, dtype=np.float64), np.asarray(dataset.y, dtype=np.int64)
    if len(y) == 0:
        raise ValidationError("training set is empty")
    ev = eval_dataset if eval_dataset is not None else dataset
    opt = ad.Adam(model.parameters(), lr=cfg.lr)

    def run_epoch(rng):
        perm = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), cfg.batch):
            idx = perm[i:i + cfg.batch]
            loss = ad.softmax_cross_entropy(model.logits(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        return total / len(y)

    return _early_stopping_loop(model, cfg, run_epoch, lambda: model.accuracy(ev.x, ev.y))


def _check_partition(partition, width):
    seen = set()
    for node, idx in partition.items():
        idx = list(idx)
        if not idx:
            raise ValidationError(f"node {node!r} has no neurons assigned")
        if any(i < 0 or i >= width for i in idx):
            raise ValidationError(f"node {node!r} has indices outside 0..{width - 1}")
        if seen.intersection(idx) or len(set(idx)) != len(idx):
            raise ValidationError(f"partition overlaps at node {node!r}")
        seen.update(idx)


def interchange_logits(model, layer, partition, x_base, sources, mask):
    """Logits after overwriting each node's neurons with that node's source
    activations, for rows where ``mask`` is set.  Identity alignment."""
    n, k, d = sources.shape
    stacked = np.concatenate([x_base, sources.reshape(n * k, d)])
    h = model.forward_to_layer(stacked, layer)
    width = h.shape[1]
    keep = np.ones((n, width))
    pick = []
    for j, node in enumerate(partition):
        sel = np.zeros((n, width))
        sel[np.ix_(mask[:, j], list(partition[node]))] = 1.0
        keep -= sel
        pick.append(sel)
    out = h[:n] * keep
    for j in range(k):
        out = out + _rows(h, n, k, j) * pick[j]
    return model.logits_from_layer(out, layer)


def _rows(h, n, k, j):
    # source j of sample i sits at row n + i*k + j
    return h[n + j + np.arange(n) * k]


def interchange_accuracy(model, layer, partition, ds, batch=8192):
    hits = 0
    for i in range(0, len(ds), batch):
        s = slice(i, i + batch)
        lg = interchange_logits(model, layer, partition, ds.x_base[s], ds.sources[s], ds.mask[s])
        hits += int(np.sum(lg.data.argmax(axis=1) == ds.y_gold[s]))
    return hits / len(ds)


def train_with_interventions(model, dataset, layer, partition, cfg, eval_dataset=None):
    """Train the network itself so ``partition`` at ``layer`` realises the
    algorithm behind ``dataset`` under identity alignment.

    ``partition`` maps each inner node (in ``dataset.nodes`` order) to its
    neuron indices.  Rows with an all-false mask are ordinary supervised
    samples, so a dataset with no interventions reduces to :func:`train`.
    Early stopping monitors interchange accuracy on ``eval_dataset``.
    """
    if len(dataset) == 0:
        raise ValidationError("training set is empty")
    partition = {v: tuple(partition[v]) for v in dataset.nodes}
    _check_partition(partition, model.layer_dim(layer))
    ev = eval_dataset if eval_dataset is not None else dataset
    opt = ad.Adam(model.parameters(), lr=cfg.lr)

    def run_epoch(rng):
        perm = rng.permutation(len(dataset))
        total = 0.0
        for i in range(0, len(dataset), cfg.batch):
            idx = perm[i:i + cfg.batch]
            lg = interchange_logits(model, layer, partition, dataset.x_base[idx],
                                    dataset.sources[idx], dataset.mask[idx])
            loss = ad.softmax_cross_entropy(lg, dataset.y_gold[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        return total / len(dataset)

    return _early_stopping_loop(model, cfg, run_epoch,
                                lambda: interchange_accuracy(model, layer, partition, ev))
