"""Serial and three-level parallel training of the branch array.

Parallel schedule, per epoch:

* branch level: every branch (aging + k fluctuation) runs on its own worker;
* data level: a branch is split into contiguous temporal slices, one replica
  per slice, and optionally into disjoint node batches;
* layer level: node batches of one replica stream through the four layers
  as a pipeline, one thread per layer.

Replicas talk to the coordinator through three message kinds.  ``SHIP``
hands a replica its slice and initial parameters, ``OUTPUT`` returns the
replica's slice output, ``RESIDUAL`` carries back the slice of
``X - sum(branch outputs)``.  The residual is the only coupling between
branches: it is exactly the reconstruction-error gradient, so each replica
backpropagates on its own.  Replicas are averaged per branch after the last
epoch.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from .fleet_graph import FleetGraph
from .gae_array import (
    BranchParams,
    ConfigError,
    Decomposition,
    DecompositionModel,
    ModelConfig,
    _attention_backward,
    _attention_forward,
    _transformer_backward,
    _transformer_forward,
    init_params,
    slice_bounds,
)
from .objective import (
    LossWeights,
    loss_and_gradients,
    mean_constraint_rows,
    slope_constraint_rows,
    smoothness_rows,
)

log = logging.getLogger(__name__)

PAPER_SPLIT = (0.5, 0.25, 0.25)
RECEPTIVE_HOPS = 4  # two encoder and two decoder propagation steps


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_finite_epoch, log_records):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
        self.log = log_records


class WorkerFailure(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and schedule settings.

    `slice_windows` holds the temporal slice length of every branch (aging
    first).  ``None`` derives it from the model: each fluctuation branch uses
    its own window and the aging branch the smallest one.  A node batch size
    of 0 keeps the full graph in one batch.  `layer_gains` scales each
    array's Adam step by ``1/sqrt(fan_in)`` (see `fan_in_gains`).
    `weighted_aggregate` merges replicas weighted by the samples each owns
    instead of uniformly.
    """

    epochs: int = 500
    learning_rate: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    slice_windows: tuple[int, ...] | None = None
    node_batch_size: int = 0
    n_workers: int = 1
    seed: int = 0
    split: tuple[float, float, float] = PAPER_SPLIT
    pipeline: bool = True
    checkpoint_every: int = 0
    layer_gains: bool = True
    weighted_aggregate: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be at least 1")
        if self.node_batch_size < 0:
            raise ConfigError("node_batch_size must be nonnegative")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be a triple summing to 1")


# -- utilities ---------------------------------------------------------------


def split_nodes(n_nodes: int, fractions=PAPER_SPLIT, seed: int = 0):
    """Disjoint train/val/test node masks covering all nodes."""
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions <= 0) or abs(fractions.sum() - 1) > 1e-9:
        raise SplitError("fractions must be three positive numbers summing to 1")
    raw = fractions * n_nodes
    counts = np.floor(raw).astype(int)
    leftover = n_nodes - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:leftover]] += 1
    if np.any(counts == 0):
        raise SplitError(f"split {tuple(fractions)} leaves an empty part for {n_nodes} nodes")
    perm = np.random.default_rng(seed).permutation(n_nodes)
    masks = []
    start = 0
    for c in counts:
        m = np.zeros(n_nodes, dtype=bool)
        m[perm[start:start + c]] = True
        masks.append(m)
        start += c
    return tuple(masks)


def fan_in_gains(params: dict[str, np.ndarray]) -> dict[str, float]:
    """Per-array step gains ``1/sqrt(fan_in)`` (fan-in is the column count of a matrix).

    Running Adam on ``V = W * sqrt(fan_in)`` and mapping back gives every layer
    the same relative step size, whatever its width.  Without this, a fixed
    learning rate that suits the narrow layers blows up the wide ones.
    """
    return {k: 1.0 / np.sqrt(v.shape[1] if v.ndim == 2 else v.shape[0])
            for k, v in params.items()}


class Adam:
    """Adam over a flat dict of arrays, updated in place.

    `gains` rescales each array's step; with gain ``c`` this is exactly Adam
    on the reparametrized array ``W / c`` up to where ``eps`` enters.
    """

    def __init__(self, params: dict[str, np.ndarray], lr, betas=(0.9, 0.999), eps=1e-8,
                 gains: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.gains = {k: 1.0 for k in params} if gains is None else dict(gains)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            step = self.lr * self.gains[k]
            p -= step * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def aggregate_replicas(replicas: list[BranchParams], weights=None) -> BranchParams:
    """Elementwise (optionally weighted) mean of replica parameters."""
    if not replicas:
        raise ValueError("no replicas to aggregate")
    arrays = [r.arrays() for r in replicas]
    names = list(arrays[0])
    for a in arrays[1:]:
        if list(a) != names or any(a[n].shape != arrays[0][n].shape for n in names):
            raise ValueError("replica parameter shapes differ")
    w = np.ones(len(replicas)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    merged = {n: sum(wi * a[n] for wi, a in zip(w, arrays)) for n in names}
    return BranchParams.from_arrays(merged)


class Normalization(NamedTuple):
    offset: float
    scale: float
    input_scale: float


def fit_normalization(X: np.ndarray) -> Normalization:
    """Center on the fleet mean; inputs as fractions of the level, outputs in percent.

    The level is the absolute fleet mean, or the standard deviation when that
    is larger (near-zero-mean data).  Measuring the loss in percent of the
    level, the unit PLR is reported in, fixes how reconstruction trades off
    against the flatness and smoothness terms regardless of the data's
    physical unit.  Feeding the network the same deviations a hundred times
    smaller keeps the encoder activations away from saturation.
    """
    offset = float(X.mean())
    level = max(abs(offset), float(X.std()))
    level = level if level > 0 else 1.0
    return Normalization(offset, level / 100.0, level)


def _optimizer(arrays: dict[str, np.ndarray], config: TrainConfig) -> Adam:
    gains = fan_in_gains(arrays) if config.layer_gains else None
    return Adam(arrays, config.learning_rate, config.betas, config.adam_eps, gains)


def _center_backward(g: np.ndarray) -> np.ndarray:
    return g - g.mean(axis=1, keepdims=True)


# -- layer stages and pipelining ---------------------------------------------


def _stages(params: BranchParams, config: ModelConfig):
    """Forward stage functions ``(h, graph) -> (h', cache)`` for one branch."""
    return [
        lambda h, g: _transformer_forward(h, g, params.enc_transformer, config.n_heads),
        lambda h, g: _attention_forward(h, g, params.enc_attention, config.leaky_slope, "elu"),
        lambda h, g: _transformer_forward(h, g, params.dec_transformer, config.n_heads),
        lambda h, g: _attention_forward(h, g, params.dec_attention, config.leaky_slope, "identity"),
    ]


def _backward_stages(params: BranchParams):
    return [
        lambda g, c: _attention_backward(g, c, params.dec_attention),
        lambda g, c: _transformer_backward(g, c, params.dec_transformer),
        lambda g, c: _attention_backward(g, c, params.enc_attention),
        lambda g, c: _transformer_backward(g, c, params.enc_transformer),
    ]


class LayerPipeline:
    """Stream independent items through a chain of stages, one thread each.

    Stage ``s`` starts on item ``b`` as soon as it finished item ``b - 1``,
    without waiting for later stages; items never interact, so results equal
    a sequential run exactly.
    """

    def __init__(self, stages):
        self.stages = list(stages)

    def run(self, items: list) -> list:
        if len(items) <= 1 or len(self.stages) <= 1:
            return [self._sequential(x) for x in items]
        queues = [queue.Queue() for _ in range(len(self.stages) + 1)]
        errors = []

        def worker(s):
            while True:
                item = queues[s].get()
                if item is None:
                    queues[s + 1].put(None)
                    return
                idx, value = item
                if not errors:
                    try:
                        value = self.stages[s](value)
                    except Exception as exc:  # surfaced after join
                        errors.append(exc)
                queues[s + 1].put((idx, value))

        threads = [threading.Thread(target=worker, args=(s,), daemon=True)
                   for s in range(len(self.stages))]
        for t in threads:
            t.start()
        for idx, x in enumerate(items):
            queues[0].put((idx, x))
        queues[0].put(None)
        results = [None] * len(items)
        while True:
            item = queues[-1].get()
            if item is None:
                break
            results[item[0]] = item[1]
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return results

    def _sequential(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


@dataclass
class NodeBatch:
    nodes: np.ndarray        # rows of the full graph produced by this batch
    halo: np.ndarray         # rows needed as input (receptive field)
    graph: FleetGraph        # induced subgraph on `halo`
    position: np.ndarray     # index of each batch node inside `halo`


def make_node_batches(graph: FleetGraph, batch_size: int, seed: int = 0) -> list[NodeBatch]:
    """Disjoint node batches, each with its exact 4-hop receptive field."""
    n = graph.n_nodes
    if batch_size <= 0 or batch_size >= n:
        full = np.arange(n)
        return [NodeBatch(full, full, graph, full)]
    order = np.random.default_rng(seed).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        nodes = np.sort(order[start:start + batch_size])
        halo = graph.ball(nodes, RECEPTIVE_HOPS)
        position = np.searchsorted(halo, nodes)
        batches.append(NodeBatch(nodes, halo, graph.subgraph(halo), position))
    return batches


# -- replicas ----------------------------------------------------------------


@dataclass
class Replica:
    """Parameters and optimizer state of one (branch, temporal slice) pair."""

    branch: int
    slice_index: int
    start: int
    stop: int
    own_from: int
    params: BranchParams
    optimizer: Adam
    batches: list[NodeBatch]
    centered: bool
    pipeline: bool = True
    caches: list = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int]:
        return self.branch, self.slice_index

    def forward(self, X_slice: np.ndarray, config: ModelConfig) -> np.ndarray:
        stages = [(lambda item, f=f: self._fwd(f, item)) for f in _stages(self.params, config)]
        items = [(X_slice[b.halo], [], b.graph) for b in self.batches]
        if self.pipeline:
            results = LayerPipeline(stages).run(items)
        else:
            results = [self._run_chain(stages, it) for it in items]
        out = np.empty((X_slice.shape[0], X_slice.shape[1]))
        self.caches = []
        for b, (h, caches, _) in zip(self.batches, results):
            out[b.nodes] = h[b.position]
            self.caches.append(caches)
        if self.centered:
            out -= out.mean(axis=1, keepdims=True)
        return out

    @staticmethod
    def _fwd(f, item):
        h, caches, g = item
        h, c = f(h, g)
        return h, caches + [c], g

    @staticmethod
    def _run_chain(stages, item):
        for s in stages:
            item = s(item)
        return item

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        if self.centered:
            grad_out = _center_backward(grad_out)
        bstages = _backward_stages(self.params)
        items = []
        for b, caches in zip(self.batches, self.caches):
            g = np.zeros((b.halo.size, grad_out.shape[1]))
            g[b.position] = grad_out[b.nodes]
            items.append((g, caches, []))

        def make(s):
            def stage(item):
                g, caches, grads = item
                g, pg = bstages[s](g, caches[3 - s])
                return g, caches, grads + [pg]
            return stage

        stages = [make(s) for s in range(4)]
        if self.pipeline:
            results = LayerPipeline(stages).run(items)
        else:
            results = [self._run_chain(stages, it) for it in items]
        total = None
        for _, _, grads in results:
            bp = BranchParams(grads[3], grads[2], grads[1], grads[0]).arrays()
            if total is None:
                total = bp
            else:
                for k in total:
                    total[k] = total[k] + bp[k]
        self.caches = []
        return total


def local_regularizer(replica: Replica, out: np.ndarray, rows: np.ndarray, T: int,
                      k: int, model_cfg: ModelConfig, weights: LossWeights):
    """Slice-local flatness or smoothness term of one replica, with gradient.

    Scaled by the share of the series the replica owns, so the replicas of a
    branch together reproduce the full-series term.
    """
    share = (replica.stop - replica.own_from) / T
    L = out.shape[1]
    n = rows.size
    h = out[rows]
    grad = np.zeros_like(out)
    vals = {"mc": 0.0, "sc": 0.0, "sr": 0.0}
    if replica.branch == 0:
        if L >= 3:
            sv, sg = smoothness_rows(h)
            norm = n if weights.normalized else 1.0
            vals["sr"] = share * float(sv.sum()) / norm
            grad[rows] += weights.lambda3 * share * sg / norm
    else:
        w = model_cfg.window_sizes[replica.branch - 1]
        norm = k * n if weights.normalized else 1.0
        if L >= 2 * w:
            mv, mg = mean_constraint_rows(h, w)
            vals["mc"] = share * float(mv.sum()) / norm
            grad[rows] += weights.lambda1 * share * mg / norm
        if L >= 2:
            sv, sg = slope_constraint_rows(h)
            vals["sc"] = share * float(sv.sum()) / norm
            grad[rows] += weights.lambda2 * share * sg / norm
    value = weights.lambda1 * vals["mc"] + weights.lambda2 * vals["sc"] + weights.lambda3 * vals["sr"]
    return vals, value, grad


# -- serial reference --------------------------------------------------------


def _prepare(X, graph: FleetGraph, model_cfg: ModelConfig, config: TrainConfig):
    X = np.asarray(X, dtype=float)
    if X.shape != (graph.n_nodes, model_cfg.series_len):
        raise ConfigError(
            f"data shape {X.shape} does not match graph ({graph.n_nodes}) and "
            f"series_len ({model_cfg.series_len})"
        )
    if len(config.weights.segment_window) != model_cfg.k:
        config = replace(config, weights=replace(config.weights,
                                                 segment_window=model_cfg.window_sizes))
    norm = fit_normalization(X)
    masks = split_nodes(graph.n_nodes, config.split, config.seed)
    return (X - norm.offset) / norm.input_scale, (X - norm.offset) / norm.scale, norm, masks, config


def train_serial(X, graph: FleetGraph, model_cfg: ModelConfig, config: TrainConfig,
                 on_checkpoint=None):
    """Full-batch joint optimization of all branches.

    Returns ``(DecompositionModel, log)`` where `log` holds one loss record
    per epoch, evaluated before that epoch's update.
    """
    Xin, Y, norm, (train, val, _), config = _prepare(X, graph, model_cfg, config)
    model_cfg = replace(model_cfg, branch_lengths=None)
    branches = init_params(model_cfg)
    opts = [_optimizer(b.arrays(), config) for b in branches]
    full = make_node_batches(graph, 0)
    replicas = [
        Replica(i, 0, 0, model_cfg.series_len, 0, b, o, full,
                centered=i > 0 and model_cfg.center_fluctuations, pipeline=False)
        for i, (b, o) in enumerate(zip(branches, opts))
    ]
    records = []
    for epoch in range(config.epochs):
        outs = [r.forward(Xin, model_cfg) for r in replicas]
        d = Decomposition(outs[0], outs[1:])
        loss, g_a, g_f = loss_and_gradients(Y, d, config.weights, mask=train)
        val_loss = loss_and_gradients(Y, d, config.weights, mask=val, need_grad=False)[0]
        rec = loss.record(step=epoch, epoch=epoch, branch=None, slice=None)
        rec["val_total"] = val_loss.total
        if not math.isfinite(loss.total):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch - 1, records)
        records.append(rec)
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6g (val %.6g)", epoch, loss.total, val_loss.total)
        for r, g in zip(replicas, [g_a, *g_f]):
            r.optimizer.step(r.backward(g))
        if on_checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            on_checkpoint(epoch + 1, DecompositionModel(model_cfg, branches, *norm))
    return DecompositionModel(model_cfg, branches, *norm), records


# -- parallel schedule -------------------------------------------------------


class Kind(Enum):
    SHIP = "ship"
    OUTPUT = "output"
    RESIDUAL = "residual"


@dataclass
class Message:
    kind: Kind
    replica: tuple[int, int]
    epoch: int = 0
    payload: dict = field(default_factory=dict)
    error: BaseException | None = None


@dataclass
class TimingReport:
    n_workers: int
    epoch_times: list[float]
    worker_busy: list[float]
    messaging_s: float
    n_messages: int
    n_replicas: int
    n_node_batches: int

    @property
    def epoch_time_s(self) -> float:
        """Median wall time per epoch, skipping the first (shipping) epoch."""
        times = self.epoch_times[1:] or self.epoch_times
        return float(np.median(times))

    def as_dict(self) -> dict:
        return {
            "workers": self.n_workers,
            "epoch_time_s": self.epoch_time_s,
            "epoch_times": list(self.epoch_times),
            "worker_busy_s": list(self.worker_busy),
            "messaging_s": self.messaging_s,
            "n_messages": self.n_messages,
            "n_replicas": self.n_replicas,
            "n_node_batches": self.n_node_batches,
        }


def default_slice_windows(model_cfg: ModelConfig) -> tuple[int, ...]:
    w = model_cfg.window_sizes
    return (min(w), *w)


def assign_workers(replicas: list[Replica], n_workers: int) -> dict[tuple[int, int], int]:
    """Longest-first greedy placement of replicas on workers."""
    load = [0.0] * n_workers
    placement = {}
    order = sorted(replicas, key=lambda r: (-(r.stop - r.start), r.branch, r.slice_index))
    for r in order:
        w = min(range(n_workers), key=lambda i: (load[i], i))
        placement[r.key] = w
        load[w] += (r.stop - r.start) * len(r.batches)
    return placement


class _Worker(threading.Thread):
    def __init__(self, wid, coordinator_inbox, model_cfg, n_epochs, snapshot_epochs, stats):
        super().__init__(daemon=True, name=f"worker-{wid}")
        self.inbox: queue.Queue = queue.Queue()
        self.outbox = coordinator_inbox
        self.model_cfg = model_cfg
        self.n_epochs = n_epochs
        self.snapshot_epochs = snapshot_epochs
        self.replicas: dict[tuple[int, int], Replica] = {}
        self.slices: dict[tuple[int, int], np.ndarray] = {}
        self.stats = stats
        self.wid = wid

    def send(self, msg: Message) -> None:
        t0 = time.perf_counter()
        self.outbox.put(msg)
        self.stats["messaging"][self.wid] += time.perf_counter() - t0
        self.stats["count"][self.wid] += 1

    def run(self):
        while True:
            msg = self.inbox.get()
            if msg is None:
                return
            try:
                self.handle(msg)
            except Exception as exc:
                self.send(Message(Kind.OUTPUT, msg.replica, msg.epoch, error=exc))

    def _forward_and_report(self, replica: Replica, epoch: int):
        t0 = time.perf_counter()
        out = replica.forward(self.slices[replica.key], self.model_cfg)
        self.stats["busy"][self.wid] += time.perf_counter() - t0
        payload = {"output": out}
        if epoch in self.snapshot_epochs:
            payload["params"] = replica.params.copy()
        self.send(Message(Kind.OUTPUT, replica.key, epoch, payload))

    def handle(self, msg: Message):
        if msg.kind is Kind.SHIP:
            replica = msg.payload["replica"]
            self.replicas[msg.replica] = replica
            self.slices[msg.replica] = msg.payload["data"]
            self._forward_and_report(replica, 0)
        elif msg.kind is Kind.RESIDUAL:
            replica = self.replicas[msg.replica]
            t0 = time.perf_counter()
            grads = replica.backward(msg.payload["grad"])
            replica.optimizer.step(grads)
            self.stats["busy"][self.wid] += time.perf_counter() - t0
            if msg.epoch + 1 < self.n_epochs:
                self._forward_and_report(replica, msg.epoch + 1)
            else:
                self.send(Message(Kind.OUTPUT, msg.replica, msg.epoch + 1,
                                  {"params": replica.params, "final": True}))
        else:
            raise ValueError(f"worker cannot handle {msg.kind}")


def train_parallel(X, graph: FleetGraph, model_cfg: ModelConfig, config: TrainConfig,
                   on_checkpoint=None):
    """Three-level parallel training with in-process workers.

    Returns ``(DecompositionModel, log, TimingReport)``.  The log has one
    global record per epoch (``branch``/``slice`` set to ``None``) followed by
    one record per replica.  The returned model's branches take inputs of
    their slice length; `model_forward` tiles them over the full series.
    """
    Xin, Y, norm, (train, val, _), config = _prepare(X, graph, model_cfg, config)
    T = model_cfg.series_len
    windows = config.slice_windows or default_slice_windows(model_cfg)
    if len(windows) != model_cfg.n_branches:
        raise ConfigError("slice_windows needs one entry per branch")
    run_cfg = replace(model_cfg, branch_lengths=tuple(int(w) for w in windows))
    base = init_params(run_cfg)
    batches = make_node_batches(graph, config.node_batch_size, config.seed)
    train_rows = np.flatnonzero(train)
    weights = config.weights

    replicas: list[Replica] = []
    for i, w in enumerate(run_cfg.branch_lengths):
        for j, (start, stop, own) in enumerate(slice_bounds(T, w)):
            params = base[i].copy()
            replicas.append(Replica(
                i, j, start, stop, own, params,
                _optimizer(params.arrays(), config),
                batches, centered=i > 0 and run_cfg.center_fluctuations,
                pipeline=config.pipeline and len(batches) > 1,
            ))
    by_key = {r.key: r for r in replicas}
    placement = assign_workers(replicas, config.n_workers)

    snapshot_epochs = set()
    if config.checkpoint_every:
        snapshot_epochs = set(range(config.checkpoint_every, config.epochs, config.checkpoint_every))
    inbox: queue.Queue = queue.Queue()
    stats = {"busy": [0.0] * config.n_workers, "messaging": [0.0] * config.n_workers,
             "count": [0] * config.n_workers}
    workers = [_Worker(w, inbox, run_cfg, config.epochs, snapshot_epochs, stats)
               for w in range(config.n_workers)]
    coord_msg_time = 0.0
    coord_msgs = 0

    def send(wid, msg):
        nonlocal coord_msg_time, coord_msgs
        t0 = time.perf_counter()
        workers[wid].inbox.put(msg)
        coord_msg_time += time.perf_counter() - t0
        coord_msgs += 1

    def collect(n_expected):
        nonlocal coord_msg_time
        got = {}
        while len(got) < n_expected:
            msg = inbox.get()
            t0 = time.perf_counter()
            if msg.error is not None:
                raise WorkerFailure(f"replica {msg.replica} failed: {msg.error!r}") from msg.error
            got[msg.replica] = msg
            coord_msg_time += time.perf_counter() - t0
        return got

    records: list[dict] = []
    epoch_times: list[float] = []
    final_params: dict[tuple[int, int], BranchParams] = {}
    limit = threadpool_limits(1) if config.n_workers > 1 else None
    for w in workers:
        w.start()
    try:
        t_epoch = time.perf_counter()
        for r in replicas:
            data = Xin[:, r.start:r.stop]
            send(placement[r.key], Message(Kind.SHIP, r.key, 0, {"replica": r, "data": data}))
        for epoch in range(config.epochs):
            outputs = collect(len(replicas))
            assembled = [np.empty_like(Y) for _ in range(run_cfg.n_branches)]
            for key, msg in outputs.items():
                r = by_key[key]
                out = msg.payload["output"]
                assembled[r.branch][:, r.own_from:r.stop] = out[:, r.own_from - r.start:]
            d = Decomposition(assembled[0], assembled[1:])
            loss = loss_and_gradients(Y, d, weights, mask=train, need_grad=False)[0]
            val_loss = loss_and_gradients(Y, d, weights, mask=val, need_grad=False)[0]
            if not math.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch - 1, records)
            rec = loss.record(step=epoch, epoch=epoch, branch=None, slice=None)
            rec["val_total"] = val_loss.total
            records.append(rec)

            if epoch in snapshot_epochs and on_checkpoint:
                on_checkpoint(epoch, _assemble(run_cfg, outputs, by_key, norm,
                                                config.weighted_aggregate))

            residual = Y - d.reconstruction()
            denom = train_rows.size * T if weights.normalized else 1.0
            for key in sorted(outputs):
                r = by_key[key]
                out = outputs[key].payload["output"]
                vals, value, grad = local_regularizer(r, out, train_rows, T, run_cfg.k,
                                                      run_cfg, weights)
                r_slice = residual[:, r.start:r.stop]
                g_re = np.zeros_like(r_slice)
                g_re[train_rows] = -2.0 * r_slice[train_rows] / denom
                g_re[:, : r.own_from - r.start] = 0.0
                records.append({"step": epoch, "epoch": epoch, "branch": r.branch,
                                "slice": r.slice_index, "re": loss.re, **vals,
                                "total": loss.re + value})
                send(placement[key], Message(Kind.RESIDUAL, key, epoch,
                                             {"residual": r_slice, "grad": g_re + grad}))
            now = time.perf_counter()
            epoch_times.append(now - t_epoch)
            t_epoch = now
        finals = collect(len(replicas))
        final_params = {k: m.payload["params"] for k, m in finals.items()}
    finally:
        for w in workers:
            w.inbox.put(None)
        for w in workers:
            w.join(timeout=10)
        if limit is not None:
            limit.unregister()

    model = _assemble(run_cfg, {k: Message(Kind.OUTPUT, k, payload={"params": p})
                                for k, p in final_params.items()}, by_key, norm,
                      config.weighted_aggregate)
    report = TimingReport(
        n_workers=config.n_workers,
        epoch_times=epoch_times,
        worker_busy=list(stats["busy"]),
        messaging_s=coord_msg_time + sum(stats["messaging"]),
        n_messages=coord_msgs + sum(stats["count"]),
        n_replicas=len(replicas),
        n_node_batches=len(batches),
    )
    return model, records, report


def _assemble(run_cfg, messages, by_key, norm, weighted=False) -> DecompositionModel:
    branches = []
    for i in range(run_cfg.n_branches):
        keys = sorted(k for k in messages if k[0] == i)
        owned = [by_key[k].stop - by_key[k].own_from for k in keys] if weighted else None
        branches.append(aggregate_replicas([messages[k].payload["params"] for k in keys], owned))
    return DecompositionModel(run_cfg, branches, *norm)


# -- benchmarking ------------------------------------------------------------


@dataclass
class BenchmarkReport:
    rows: list[dict]
    reports: list[TimingReport]
    flags: list[str]

    def table(self) -> str:
        lines = ["workers,epoch_time_s,speedup"]
        lines += [f"{r['workers']},{r['epoch_time_s']:.6f},{r['speedup']:.4f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def benchmark_speedup(X, graph: FleetGraph, model_cfg: ModelConfig, config: TrainConfig,
                      worker_counts) -> BenchmarkReport:
    """Per-epoch wall time of `train_parallel` for each worker count.

    ``speedup(w) = time(1) / time(w)``.  Each row also carries
    ``overhead_s = time(w) * w - time(1)`` (time lost to imperfect scaling)
    and the directly measured messaging time per epoch.
    """
    counts = list(worker_counts)
    if not counts or counts[0] != 1 or counts != sorted(counts):
        raise ValueError("worker_counts must be ascending and start at 1")
    reports = []
    for w in counts:
        _, _, rep = train_parallel(X, graph, model_cfg, replace(config, n_workers=w))
        reports.append(rep)
    t1 = reports[0].epoch_time_s
    rows = []
    for w, rep in zip(counts, reports):
        rows.append({
            "workers": w,
            "epoch_time_s": rep.epoch_time_s,
            "speedup": t1 / rep.epoch_time_s,
            "overhead_s": rep.epoch_time_s * w - t1,
            "messaging_s_per_epoch": rep.messaging_s / config.epochs,
            "n_messages": rep.n_messages,
        })
    flags = []
    n_units = reports[0].n_replicas * reports[0].n_node_batches
    for w in counts:
        if w > model_cfg.n_branches:
            flags.append(f"{w} workers exceed the {model_cfg.n_branches} branches: "
                         "no further branch-level gain")
        if w > n_units:
            flags.append(f"{w} workers exceed the {n_units} replica/node-batch units: "
                         "idle workers")
    return BenchmarkReport(rows, reports, flags)
