"""Parallel array of graph autoencoders.

Branch 0 reconstructs the aging (trend) term, branches 1..k one fluctuation
term each.  Every branch is an encoder (graph transformer T->H, graph
attention H->Z) followed by a mirrored decoder (graph transformer Z->H, graph
attention H->T).  Each series is a node feature vector, so a branch maps an
N x T block to an N x T block.

Forward and backward passes are written out explicitly in numpy; gradients
are validated against finite differences in the test-suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fleet_graph import FleetGraph

CHECKPOINT_VERSION = "1"
LAYERS = ("enc_transformer", "enc_attention", "dec_transformer", "dec_attention")


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the branch array.

    `branch_lengths` gives the temporal input length of every branch; it
    defaults to `series_len` and is shorter when branches are trained on
    temporal slices.
    """

    series_len: int
    k: int = 1
    hidden_dim: int = 64
    latent_dim: int = 32
    n_heads: int = 4
    leaky_slope: float = 0.2
    window_sizes: tuple[int, ...] = ()
    seed: int = 0
    center_fluctuations: bool = True
    branch_lengths: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "window_sizes", tuple(int(w) for w in self.window_sizes))
        if self.branch_lengths is not None:
            object.__setattr__(self, "branch_lengths", tuple(int(x) for x in self.branch_lengths))
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if len(self.window_sizes) != self.k:
            raise ConfigError(f"expected {self.k} window sizes, got {len(self.window_sizes)}")
        for w in self.window_sizes:
            if not 2 <= w <= self.series_len:
                raise ConfigError(f"window size {w} outside [2, {self.series_len}]")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if min(self.hidden_dim, self.latent_dim, self.n_heads) < 1:
            raise ConfigError("layer sizes must be positive")
        if self.branch_lengths is not None:
            if len(self.branch_lengths) != self.k + 1:
                raise ConfigError("branch_lengths needs one entry per branch")
            if any(not 1 <= x <= self.series_len for x in self.branch_lengths):
                raise ConfigError("branch lengths must lie in [1, series_len]")

    @property
    def n_branches(self) -> int:
        return self.k + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def input_len(self, branch: int) -> int:
        if self.branch_lengths is None:
            return self.series_len
        return self.branch_lengths[branch]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["window_sizes"] = list(self.window_sizes)
        if self.branch_lengths is not None:
            out["branch_lengths"] = list(self.branch_lengths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        data = dict(data)
        data["window_sizes"] = tuple(data.get("window_sizes", ()))
        if data.get("branch_lengths") is not None:
            data["branch_lengths"] = tuple(data["branch_lengths"])
        return cls(**data)


@dataclass
class TransformerLayerParams:
    """Root (W1), value (W2), query (W3) and key (W4) maps, each out x in.

    Query and key rows are split into `n_heads` consecutive blocks of
    ``out / n_heads`` rows, one block per head.
    """

    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray


@dataclass
class AttentionLayerParams:
    W: np.ndarray
    a: np.ndarray


@dataclass
class BranchParams:
    enc_transformer: TransformerLayerParams
    enc_attention: AttentionLayerParams
    dec_transformer: TransformerLayerParams
    dec_attention: AttentionLayerParams

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in LAYERS:
            params = getattr(self, layer)
            for f in fields(params):
                out[f"{layer}.{f.name}"] = getattr(params, f.name)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "BranchParams":
        def take(layer, kind):
            names = [f.name for f in fields(kind)]
            return kind(**{n: np.asarray(arrays[f"{layer}.{n}"], dtype=float) for n in names})

        return cls(
            take("enc_transformer", TransformerLayerParams),
            take("enc_attention", AttentionLayerParams),
            take("dec_transformer", TransformerLayerParams),
            take("dec_attention", AttentionLayerParams),
        )

    def copy(self) -> "BranchParams":
        return BranchParams.from_arrays({n: a.copy() for n, a in self.arrays().items()})


@dataclass
class Decomposition:
    h_a: np.ndarray
    h_f: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.h_a = np.asarray(self.h_a, dtype=float)
        self.h_f = [np.asarray(h, dtype=float) for h in self.h_f]
        for h in self.h_f:
            if h.shape != self.h_a.shape:
                raise ShapeError("all decomposition terms must share one N x T shape")

    @property
    def k(self) -> int:
        return len(self.h_f)

    def reconstruction(self) -> np.ndarray:
        return self.h_a + sum(self.h_f, np.zeros_like(self.h_a))


# -- attention primitives ----------------------------------------------------


def _segment_softmax(scores: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    starts = indptr[:-1]
    counts = np.diff(indptr)
    top = np.maximum.reduceat(scores, starts, axis=0)
    ex = np.exp(scores - np.repeat(top, counts, axis=0))
    total = np.add.reduceat(ex, starts, axis=0)
    return ex / np.repeat(total, counts, axis=0)


def _segment_softmax_backward(alpha, d_alpha, indptr):
    counts = np.diff(indptr)
    inner = np.add.reduceat(alpha * d_alpha, indptr[:-1], axis=0)
    return alpha * (d_alpha - np.repeat(inner, counts, axis=0))


def _check_graph(X: np.ndarray, graph: FleetGraph, in_dim: int) -> None:
    if graph.n_nodes == 0:
        raise ValueError("the fleet graph has no nodes")
    if X.ndim != 2 or X.shape[0] != graph.n_nodes:
        raise ShapeError(f"input has shape {X.shape}, graph has {graph.n_nodes} nodes")
    if X.shape[1] != in_dim:
        raise ShapeError(f"input feature size {X.shape[1]} != layer input size {in_dim}")


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _transformer_forward(X, graph, p: TransformerLayerParams, n_heads: int):
    out_dim, in_dim = p.W1.shape
    _check_graph(X, graph, in_dim)
    for name in ("W2", "W3", "W4"):
        if getattr(p, name).shape != (out_dim, in_dim):
            raise ShapeError(f"{name} must have shape {(out_dim, in_dim)}")
    if out_dim % n_heads:
        raise ShapeError("layer output size must be divisible by n_heads")
    dst, src, indptr = graph.message_index
    n = X.shape[0]
    head = out_dim // n_heads
    Q = (X @ p.W3.T).reshape(n, n_heads, head)
    K = (X @ p.W4.T).reshape(n, n_heads, head)
    V = X @ p.W2.T
    scores = np.einsum("ehd,ehd->eh", Q[dst], K[src]) / np.sqrt(head)
    alpha = _segment_softmax(scores, indptr)
    mixing = graph.neighborhood_matrix(alpha.mean(axis=1))
    out = X @ p.W1.T + mixing @ V
    cache = dict(X=X, Q=Q, K=K, V=V, alpha=alpha, mixing=mixing, graph=graph)
    return out, cache


def _transformer_backward(G, cache, p: TransformerLayerParams):
    X, Q, K, V, alpha = cache["X"], cache["Q"], cache["K"], cache["V"], cache["alpha"]
    graph, mixing = cache["graph"], cache["mixing"]
    dst, src, indptr = graph.message_index
    n, n_heads, head = Q.shape

    dW1 = G.T @ X
    dX = G @ p.W1
    dV = mixing.T @ G
    dW2 = dV.T @ X
    dX += dV @ p.W2

    d_mean = np.einsum("ef,ef->e", G[dst], V[src])
    d_alpha = np.repeat(d_mean[:, None] / n_heads, n_heads, axis=1)
    d_scores = _segment_softmax_backward(alpha, d_alpha, indptr) / np.sqrt(head)
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    for h in range(n_heads):
        S = graph.neighborhood_matrix(d_scores[:, h])
        dQ[:, h, :] = S @ K[:, h, :]
        dK[:, h, :] = S.T @ Q[:, h, :]
    dQ = dQ.reshape(n, n_heads * head)
    dK = dK.reshape(n, n_heads * head)
    dW3 = dQ.T @ X
    dW4 = dK.T @ X
    dX += dQ @ p.W3 + dK @ p.W4
    return dX, TransformerLayerParams(dW1, dW2, dW3, dW4)


def _attention_forward(H, graph, p: AttentionLayerParams, leaky_slope: float, activation: str):
    out_dim, in_dim = p.W.shape
    _check_graph(H, graph, in_dim)
    if p.a.shape != (2 * out_dim,):
        raise ShapeError(f"attention vector must have shape {(2 * out_dim,)}")
    dst, src, indptr = graph.message_index
    Z = H @ p.W.T
    own = Z @ p.a[:out_dim]
    other = Z @ p.a[out_dim:]
    raw = own[dst] + other[src]
    scores = np.where(raw > 0, raw, leaky_slope * raw)
    alpha = _segment_softmax(scores, indptr)
    mixing = graph.neighborhood_matrix(alpha)
    pre = mixing @ Z
    if activation == "elu":
        out = _elu(pre)
    elif activation == "identity":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    cache = dict(H=H, Z=Z, raw=raw, alpha=alpha, mixing=mixing, pre=pre, graph=graph,
                 activation=activation, leaky_slope=leaky_slope)
    return out, cache


def _attention_backward(G, cache, p: AttentionLayerParams):
    H, Z, raw, alpha = cache["H"], cache["Z"], cache["raw"], cache["alpha"]
    graph, mixing, pre = cache["graph"], cache["mixing"], cache["pre"]
    dst, src, indptr = graph.message_index
    out_dim = Z.shape[1]
    if cache["activation"] == "elu":
        d_pre = G * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))
    else:
        d_pre = G
    dZ = mixing.T @ d_pre
    d_alpha = np.einsum("ef,ef->e", d_pre[dst], Z[src])
    d_scores = _segment_softmax_backward(alpha, d_alpha, indptr)
    d_raw = d_scores * np.where(raw > 0, 1.0, cache["leaky_slope"])
    d_own = np.add.reduceat(d_raw, indptr[:-1])
    d_other = np.bincount(src, weights=d_raw, minlength=Z.shape[0])
    a_own, a_other = p.a[:out_dim], p.a[out_dim:]
    dZ += np.outer(d_own, a_own) + np.outer(d_other, a_other)
    da = np.concatenate([Z.T @ d_own, Z.T @ d_other])
    dW = dZ.T @ H
    dH = dZ @ p.W
    return dH, AttentionLayerParams(dW, da)


def transformer_conv(X, graph: FleetGraph, params: TransformerLayerParams, n_heads: int,
                     return_attention: bool = False):
    """Graph transformer layer with head-averaged attention and self-loops.

    ``x'_i = W1 x_i + sum_j alpha_ij W2 x_j`` where, per head,
    ``alpha_ij = softmax_j(<W3 x_i, W4 x_j> / sqrt(D))`` over the
    neighborhood of i (including i) and the head weights are averaged.
    With ``return_attention`` also returns the ``(E, n_heads)`` weights,
    ordered like ``graph.message_index``.
    """
    out, cache = _transformer_forward(np.asarray(X, dtype=float), graph, params, n_heads)
    if return_attention:
        return out, cache["alpha"]
    return out


def gat_conv(H, graph: FleetGraph, params: AttentionLayerParams, leaky_slope: float = 0.2,
             activation: str = "elu", return_attention: bool = False):
    """Graph attention layer ``act(sum_j alpha_ij W h_j)`` with self-loops.

    ``alpha_ij`` is the neighborhood softmax of
    ``LeakyReLU(a . [W h_i || W h_j])``.  `activation` is ``"elu"`` or
    ``"identity"``.
    """
    out, cache = _attention_forward(np.asarray(H, dtype=float), graph, params, leaky_slope,
                                    activation)
    if return_attention:
        return out, cache["alpha"]
    return out


# -- branches ----------------------------------------------------------------


def _branch_forward_cached(X, graph, params: BranchParams, config: ModelConfig):
    caches = []
    h, c = _transformer_forward(X, graph, params.enc_transformer, config.n_heads)
    caches.append(c)
    h, c = _attention_forward(h, graph, params.enc_attention, config.leaky_slope, "elu")
    caches.append(c)
    h, c = _transformer_forward(h, graph, params.dec_transformer, config.n_heads)
    caches.append(c)
    h, c = _attention_forward(h, graph, params.dec_attention, config.leaky_slope, "identity")
    caches.append(c)
    return h, caches


def _branch_backward(G, caches, params: BranchParams) -> BranchParams:
    g, dec_att = _attention_backward(G, caches[3], params.dec_attention)
    g, dec_tr = _transformer_backward(g, caches[2], params.dec_transformer)
    g, enc_att = _attention_backward(g, caches[1], params.enc_attention)
    _, enc_tr = _transformer_backward(g, caches[0], params.enc_transformer)
    return BranchParams(enc_tr, enc_att, dec_tr, dec_att)


def branch_forward(X, graph: FleetGraph, params: BranchParams, config: ModelConfig) -> np.ndarray:
    """Encoder then decoder of one branch; maps N x L to N x L."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.enc_transformer.W1.shape[1]:
        raise ShapeError(
            f"branch expects series of length {params.enc_transformer.W1.shape[1]}, "
            f"got shape {X.shape}"
        )
    out, _ = _branch_forward_cached(X, graph, params, config)
    return out


def _center(h: np.ndarray) -> np.ndarray:
    return h - h.mean(axis=1, keepdims=True)


def slice_bounds(length: int, window: int) -> list[tuple[int, int, int]]:
    """Contiguous temporal slices of `window` samples covering ``[0, length)``.

    Returns ``(start, stop, own_from)`` triples.  Slices do not overlap except
    when `length` is not a multiple of `window`: the last slice is then
    right-aligned and only owns samples from ``own_from`` onwards.
    """
    if not 1 <= window <= length:
        raise ConfigError(f"window {window} must lie in [1, {length}]")
    n_slices = -(-length // window)
    bounds = []
    for j in range(n_slices):
        start = j * window
        if start + window <= length:
            bounds.append((start, start + window, start))
        else:
            bounds.append((length - window, length, start))
    return bounds


def branch_apply(X, graph, params: BranchParams, config: ModelConfig, branch: int) -> np.ndarray:
    """Run one branch over a full-length input, slicing it when needed."""
    L = config.input_len(branch)
    centered = branch > 0 and config.center_fluctuations
    out = np.empty_like(X)
    for start, stop, own in slice_bounds(X.shape[1], L):
        h = branch_forward(X[:, start:stop], graph, params, config)
        if centered:
            h = _center(h)
        out[:, own:stop] = h[:, own - start:]
    return out


def model_forward(X, graph: FleetGraph, model: list[BranchParams], config: ModelConfig) -> Decomposition:
    """Decompose `X` into one aging term and `k` fluctuation terms.

    Branches are independent given `X`.  With ``config.center_fluctuations``
    each fluctuation output is shifted to zero temporal mean per node, which
    pins the constant level to the aging term.
    """
    X = np.asarray(X, dtype=float)
    if len(model) != config.n_branches:
        raise ConfigError(f"expected {config.n_branches} branches, got {len(model)}")
    if X.ndim != 2 or X.shape[1] != config.series_len:
        raise ShapeError(f"input must be N x {config.series_len}, got {X.shape}")
    terms = [branch_apply(X, graph, p, config, i) for i, p in enumerate(model)]
    return Decomposition(terms[0], terms[1:])


def _glorot(rng, out_dim, in_dim, shape=None):
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=shape or (out_dim, in_dim))


def _init_transformer(rng, out_dim, in_dim):
    return TransformerLayerParams(*(_glorot(rng, out_dim, in_dim) for _ in range(4)))


def _init_attention(rng, out_dim, in_dim):
    W = _glorot(rng, out_dim, in_dim)
    a = _glorot(rng, 1, 2 * out_dim, shape=(2 * out_dim,))
    return AttentionLayerParams(W, a)


def init_branch(config: ModelConfig, branch: int, rng) -> BranchParams:
    L = config.input_len(branch)
    H, Z = config.hidden_dim, config.latent_dim
    return BranchParams(
        _init_transformer(rng, H, L),
        _init_attention(rng, Z, H),
        _init_transformer(rng, H, Z),
        _init_attention(rng, L, H),
    )


def init_params(config: ModelConfig) -> list[BranchParams]:
    """Glorot-uniform parameters for all branches, one sub-seed per branch."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_branches)
    return [init_branch(config, i, np.random.default_rng(s)) for i, s in enumerate(seeds)]


# -- trained model and checkpoints -------------------------------------------


@dataclass
class DecompositionModel:
    """Trained branch array plus the affine data normalization.

    The network reads ``(X - offset) / input_scale`` and its outputs are
    expressed in units of `scale`, the unit the loss was trained in.
    `decompose` maps the terms back so that ``h_a + sum(h_f)`` approximates
    `X` in its original units.
    """

    config: ModelConfig
    branches: list[BranchParams]
    offset: float = 0.0
    scale: float = 1.0
    input_scale: float | None = None

    def __post_init__(self):
        if self.input_scale is None:
            self.input_scale = self.scale

    def normalize(self, X: np.ndarray) -> np.ndarray:
        """Network input for `X`."""
        return (np.asarray(X, dtype=float) - self.offset) / self.input_scale

    def target(self, X: np.ndarray) -> np.ndarray:
        """`X` in output units; what the terms reconstruct during training."""
        return (np.asarray(X, dtype=float) - self.offset) / self.scale

    def decompose(self, X, graph: FleetGraph) -> Decomposition:
        d = model_forward(self.normalize(X), graph, self.branches, self.config)
        return Decomposition(d.h_a * self.scale + self.offset, [h * self.scale for h in d.h_f])


def save_checkpoint(model: DecompositionModel, directory, extra: dict | None = None) -> Path:
    """Write ``meta.json`` plus one ``branch_<i>.bin`` per branch.

    Each array is stored as an ASCII header line ``name rows cols`` followed
    by ``rows * cols`` little-endian float32 values.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, branch in enumerate(model.branches):
        name = f"branch_{i}.bin"
        with (directory / name).open("wb") as fh:
            for key, arr in branch.arrays().items():
                mat = np.atleast_2d(arr)
                fh.write(f"{key} {mat.shape[0]} {mat.shape[1]}\n".encode("ascii"))
                fh.write(mat.astype("<f4").tobytes(order="C"))
        files.append(name)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "n_branches": len(model.branches),
        "normalization": {"offset": model.offset, "scale": model.scale,
                          "input_scale": model.input_scale},
        "branch_files": files,
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return directory


class CheckpointError(ValueError):
    pass


def _read_branch_file(path: Path) -> dict[str, np.ndarray]:
    blob = path.read_bytes()
    pos = 0
    arrays = {}
    while pos < len(blob):
        end = blob.index(b"\n", pos)
        name, rows, cols = blob[pos:end].decode("ascii").split()
        rows, cols = int(rows), int(cols)
        pos = end + 1
        nbytes = 4 * rows * cols
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4").astype(float).reshape(rows, cols)
        pos += nbytes
        arrays[name] = arr[0] if name.endswith(".a") else arr
    return arrays


def load_checkpoint(directory) -> DecompositionModel:
    directory = Path(directory)
    if not (directory / "meta.json").is_file():
        raise CheckpointError(f"{directory} holds no checkpoint (meta.json missing)")
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    version = str(meta.get("format_version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {version!r} is not supported (expected {CHECKPOINT_VERSION!r})"
        )
    config = ModelConfig.from_dict(meta["config"])
    branches = [BranchParams.from_arrays(_read_branch_file(directory / f))
                for f in meta["branch_files"]]
    if len(branches) != config.n_branches:
        raise CheckpointError("branch count does not match the stored config")
    norm = meta.get("normalization", {})
    scale = float(norm.get("scale", 1.0))
    return DecompositionModel(config, branches, float(norm.get("offset", 0.0)), scale,
                              float(norm.get("input_scale", scale)))


def with_branch_lengths(config: ModelConfig, lengths) -> ModelConfig:
    return replace(config, branch_lengths=tuple(lengths))
