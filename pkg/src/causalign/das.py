"""Interchange interventions through alignment maps, DAS training, and IIA."""

from __future__ import annotations

import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import Partition, make_map, strict_argmax_accuracy
from .errors import ConfigError, ValidationError
from .records import RunRecord, config_hash


@dataclass(frozen=True)
class DasConfig:
    layer: int
    algorithm: str
    family: str = "revnet"
    intervention_size: int = 8
    L_rn: int = 10
    d_rn: int = 16
    lr: float = 1e-3
    batch: int = 6400
    max_epochs: int = 50
    patience: int = 5
    improve_threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.layer, (list, tuple)):
            raise ConfigError("one intervention layer per run; multi-layer partitions are not supported")
        if self.family not in ("identity", "orthogonal", "revnet"):
            raise ConfigError(f"unknown map family {self.family!r}")
        if self.intervention_size <= 0:
            raise ConfigError("intervention_size must be positive")
        if self.batch <= 0 or self.max_epochs <= 0 or self.patience <= 0 or self.lr <= 0:
            raise ConfigError("batch, max_epochs, patience and lr must be positive")
        if self.family == "revnet" and (self.L_rn <= 0 or self.d_rn <= 0):
            raise ConfigError("RevNet needs L_rn > 0 and d_rn > 0")

    def validate_for(self, dnn, nodes):
        if not 1 <= self.layer <= dnn.num_layers:
            raise ConfigError(f"layer {self.layer} out of range 1..{dnn.num_layers}")
        d = dnn.layer_dim(self.layer)
        # a full-width assignment (no unused coordinate) is allowed for trained maps
        if self.intervention_size * len(nodes) > d:
            raise ConfigError(f"{len(nodes)} nodes of size {self.intervention_size} exceed layer width {d}")
        if self.family == "revnet" and d % 2:
            raise ConfigError(f"RevNet needs an even layer width, got {d}")

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


@dataclass
class IiaReport:
    iia: float
    n: int
    node_counts: dict
    dnn_plain_accuracy: float
    config_hash: str = ""
    seed: int | None = None
    loss: float | None = None

    def to_dict(self):
        return asdict(self)


# -- interventions ------------------------------------------------------------
def _selectors(partition, nodes, mask, width):
    n = len(mask)
    keep = np.ones((n, width))
    picks = []
    for j, v in enumerate(nodes):
        sel = np.zeros((n, width))
        if v in partition.nodes:
            sel[np.ix_(mask[:, j], list(partition[v]))] = 1.0
        keep -= sel
        picks.append(sel)
    return keep, picks


def layer_states(dnn, ds, layer):
    """Cached ``(h_base, h_src)`` for an interchange dataset; the DNN is frozen."""
    n, k, d = ds.sources.shape
    h_base = dnn.hidden_states(ds.x_base)[layer - 1]
    h_src = dnn.hidden_states(ds.sources.reshape(n * k, d))[layer - 1].reshape(n, k, -1)
    return h_base, h_src


def intervened_logits(dnn, amap, partition, h_base, h_src, mask, nodes, layer):
    """Logits after the latent interchange.

    ``h_base`` is ``(n, d)`` and ``h_src`` is ``(n, k, d)`` with column ``j``
    holding the hidden state of the source for ``nodes[j]``.  Every row goes
    through ``amap`` so gradients reach the map via base and source paths.
    """
    n, k, width = h_src.shape
    stacked = np.concatenate([h_base, *(h_src[:, j] for j in range(k))])
    z = amap.apply(ad.Tensor(stacked))
    keep, picks = _selectors(partition, nodes, mask, width)
    out = z[:n] * keep
    for j in range(k):
        if picks[j].any():
            out = out + z[n * (j + 1):n * (j + 2)] * picks[j]
    return dnn.logits_from_layer(amap.invert(out), layer)


def intervened_forward(dnn, amap, partition, sample, layer, nodes=None):
    """Class probabilities for one :class:`InterchangeSample`."""
    nodes = list(nodes or partition.nodes)
    missing = [v for v in sample.sources if v not in partition.nodes]
    if missing:
        raise ValidationError(f"nodes {missing} have no coordinates in the partition")
    hb = dnn.hidden_states(np.asarray(sample.x_base)[None])[layer - 1]
    src = np.stack([np.asarray(sample.sources.get(v, sample.x_base)) for v in nodes])
    hs = dnn.hidden_states(src)[layer - 1][None]
    mask = np.array([[v in sample.sources for v in nodes]])
    return ad.softmax(intervened_logits(dnn.frozen(), amap, partition, hb, hs, mask, nodes, layer))


def _batched_logits(dnn, amap, partition, ds, layer, states=None, batch=8192):
    h_base, h_src = states if states is not None else layer_states(dnn, ds, layer)
    out = []
    for i in range(0, len(ds), batch):
        s = slice(i, i + batch)
        out.append(intervened_logits(dnn, amap, partition, h_base[s], h_src[s], ds.mask[s],
                                     ds.nodes, layer).data)
    return np.concatenate(out)


def _ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def eval_iia(dnn, amap, partition, ds, layer, cfg_hash="", seed=None, states=None):
    """Strict-argmax interchange intervention accuracy on ``ds``."""
    frozen = dnn.frozen()
    logits = _batched_logits(frozen, amap, partition, ds, layer, states)
    return IiaReport(
        iia=strict_argmax_accuracy(logits, ds.y_gold),
        n=len(ds),
        node_counts=ds.node_counts(),
        dnn_plain_accuracy=frozen.accuracy(ds.x_base, ds.y_base),
        config_hash=cfg_hash,
        seed=seed,
        loss=_ce(logits, ds.y_gold),
    )


# -- training -----------------------------------------------------------------
@dataclass
class DasResult:
    map: object
    partition: Partition
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_iia: float = float("-inf")
    stopped_early: bool = False


def build_map(cfg, width):
    return make_map(cfg.family, width, cfg.L_rn, cfg.d_rn, seed=cfg.seed)


def train_das(dnn, amap, partition, train_ds, eval_ds, cfg):
    """Fit ``amap`` by Adam on the interchange cross-entropy.

    The DNN is never modified.  Early stopping watches eval IIA: an epoch
    counts as an improvement only if it beats the best so far by more than
    ``cfg.improve_threshold``.  The best-scoring parameters are restored.
    """
    cfg.validate_for(dnn, train_ds.nodes)
    frozen = dnn.frozen()
    h_base, h_src = layer_states(frozen, train_ds, cfg.layer)
    ev_states = layer_states(frozen, eval_ds, cfg.layer)
    params = amap.parameters()
    opt = ad.Adam(params, lr=cfg.lr) if params else None
    rng = np.random.default_rng([cfg.seed, 2])
    res = DasResult(amap, partition)
    best_state, stale = amap.state(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        if opt is not None:
            perm = rng.permutation(len(train_ds))
            for i in range(0, len(perm), cfg.batch):
                idx = perm[i:i + cfg.batch]
                lg = intervened_logits(frozen, amap, partition, h_base[idx], h_src[idx],
                                       train_ds.mask[idx], train_ds.nodes, cfg.layer)
                loss = ad.softmax_cross_entropy(lg, train_ds.y_gold[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
        logits = _batched_logits(frozen, amap, partition, eval_ds, cfg.layer, ev_states)
        iia = strict_argmax_accuracy(logits, eval_ds.y_gold)
        res.history.append({"epoch": epoch, "train_loss": total / len(train_ds),
                            "eval_loss": _ce(logits, eval_ds.y_gold), "eval_iia": iia})
        if iia > res.best_iia + cfg.improve_threshold or epoch == 1:
            res.best_iia, res.best_epoch, stale = iia, epoch, 0
            best_state = amap.state()
        else:
            stale += 1
            if stale >= cfg.patience or opt is None:
                res.stopped_early = stale >= cfg.patience
                break
    amap.load_state(best_state)
    return res


def run_das(dnn, datasets, cfg, partition=None):
    """Build a map, train it, and score it on the test set.  Returns a RunRecord."""
    train_ds, eval_ds, test_ds = datasets
    t0 = time.perf_counter()
    width = dnn.layer_dim(cfg.layer)
    part = partition or Partition.contiguous(train_ds.nodes, cfg.intervention_size, width)
    amap = build_map(cfg, width)
    res = train_das(dnn, amap, part, train_ds, eval_ds, cfg)
    rep = eval_iia(dnn, amap, part, test_ds, cfg.layer, cfg.hash(), cfg.seed)
    return RunRecord(
        config_hash=cfg.hash(), seed=cfg.seed, task=test_ds.task, alg=cfg.algorithm,
        family=cfg.family, layer=cfg.layer, size=cfg.intervention_size,
        d_rn=cfg.d_rn if cfg.family == "revnet" else None,
        L_rn=cfg.L_rn if cfg.family == "revnet" else None,
        iia=rep.iia, plain_acc=rep.dnn_plain_accuracy, epochs=len(res.history),
        wall_ms=round((time.perf_counter() - t0) * 1000.0, 1),
        config=cfg.to_dict(), history=res.history,
    ), amap, part


# -- sweeps -------------------------------------------------------------------
def _sweep_job(args):
    dnn_by_layer, datasets, cfg = args
    try:
        return run_das(dnn_by_layer, datasets, cfg)[0]
    except Exception as exc:  # recorded, sweep continues
        return RunRecord(config_hash=cfg.hash(), seed=cfg.seed, alg=cfg.algorithm, family=cfg.family,
                         layer=cfg.layer, size=cfg.intervention_size, status="failed",
                         error="".join(traceback.format_exception_only(type(exc), exc)).strip(),
                         config=cfg.to_dict())


def expand_grid(algorithm, layers, sizes, families, seeds, L_rn=10, d_rn=(16,), **kw):
    d_rn = d_rn if isinstance(d_rn, (list, tuple)) else (d_rn,)
    out = []
    for fam in families:
        for layer in layers:
            for size in sizes:
                for h in (d_rn if fam == "revnet" else d_rn[:1]):
                    for seed in seeds:
                        out.append(DasConfig(layer=layer, algorithm=algorithm, family=fam,
                                             intervention_size=size, L_rn=L_rn, d_rn=h, seed=seed, **kw))
    return out


def sweep(dnn, datasets, configs, jobs=1):
    """Run every config; failures become records with ``status='failed'``.

    ``datasets`` is a ``(train, eval, test)`` triple shared by all jobs.
    """
    tasks = [(dnn, datasets, c) for c in configs]
    if jobs <= 1:
        return [_sweep_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_sweep_job, tasks))


def aggregate(records):
    """Per-cell max, mean and 95% interval (mean +- 1.96 sd / sqrt(n)) over seeds."""
    cells = {}
    for r in records:
        if r.status != "ok":
            continue
        key = (r.task, r.alg, r.family, r.layer, r.size, r.d_rn, r.L_rn)
        cells.setdefault(key, []).append(r.iia)
    rows = []
    for key in sorted(cells, key=lambda k: tuple("" if v is None else v for v in k)):
        v = np.array(cells[key])
        sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        half = 1.96 * sd / math.sqrt(len(v))
        mean = float(v.mean())
        rows.append(dict(zip(("task", "alg", "family", "layer", "size", "d_rn", "L_rn"), key),
                         n=len(v), max=float(v.max()), mean=mean, ci_low=mean - half, ci_high=mean + half))
    return rows
