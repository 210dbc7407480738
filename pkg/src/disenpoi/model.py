"""The dual-graph CTR network.

Two branches encode a user's context. The geographical branch message-passes
over the global POI graph with a distance kernel exp(-d^2) and Laplacian-style
1/sqrt(|N_i||N_j|) normalization, then attends over the context's propagated
rows with the target's propagated row as query. The sequential branch runs a
gated (GRU-style) propagation over the per-sample session graph and attends
with the target's raw embedding as query. Mean-pooled proxies of each graph
view supervise disentanglement through a softplus ranking loss on projected
vectors, and a 2-layer MLP over [e_geo, e_seq, x_target, h_target] produces
the click probability.

All math is expressed in the autodiff primitive set with row-vector
convention: states are stacked rows and parameter matrices right-multiply, so
a stored matrix is the transpose of its column-vector counterpart.

Geo propagation is computed over the L-hop ball of the requested nodes; rows
for the requested nodes are exactly the full-graph values, rows for other
ball members are boundary-truncated and never exposed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ManifestMismatch, ShapeMismatch
from .graphs import GeoGraph, SeqGraph, build_seq_graph

BCE_CLAMP_EPS = 1e-7
CHECKPOINT_FORMAT = "disenpoi-ckpt-v1"

# below this many ball nodes a dense adjacency is cheaper than CSR
_SPARSE_THRESHOLD = 64


@dataclass(frozen=True)
class ModelDims:
    num_pois: int
    D: int = 64
    L: int = 2      # geo propagation layers
    T: int = 2      # gated propagation steps
    H: int = 0      # MLP hidden width; 0 means 2 * D

    def __post_init__(self):
        if self.H == 0:
            object.__setattr__(self, "H", 2 * self.D)

    def to_json(self) -> dict:
        return {"num_pois": self.num_pois, "D": self.D, "L": self.L,
                "T": self.T, "H": self.H}

    @classmethod
    def from_json(cls, d: dict) -> "ModelDims":
        return cls(num_pois=d["num_pois"], D=d["D"], L=d["L"], T=d["T"], H=d["H"])


class ModelParams:
    """Ordered store of named trainable tensors."""

    def __init__(self, dims: ModelDims):
        self.dims = dims
        self._params: dict[str, Tensor] = {}

    def _add(self, name: str, array: np.ndarray) -> None:
        if name in self._params:
            raise DataError(f"duplicate parameter {name}")
        self._params[name] = Tensor(array, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def manifest(self) -> list[tuple[str, tuple[int, int]]]:
        return [(name, t.shape) for name, t in self._params.items()]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            v = values[name]
            if v.shape != t.shape:
                raise ShapeMismatch(f"{name}: {v.shape} vs {t.shape}")
            t.data = np.array(v, dtype=np.float64)
            t.grad = None

    @classmethod
    def build(cls, dims: ModelDims, seed: int) -> "ModelParams":
        """All weights uniform in +-1/sqrt(D), biases zero, seeded."""
        p = cls(dims)
        rng = np.random.default_rng([seed])
        bound = 1.0 / np.sqrt(dims.D)

        def weight(name, rows, cols):
            p._add(name, rng.uniform(-bound, bound, size=(rows, cols)))

        def zero(name, rows, cols):
            p._add(name, np.zeros((rows, cols)))

        D, H = dims.D, dims.H
        weight("embedding.X", dims.num_pois, D)
        for layer in range(dims.L):
            weight(f"geo.layer{layer}.W1", D, D)
            weight(f"geo.layer{layer}.W2", D, D)
        for name in ("agg_in", "agg_out"):
            weight(f"ggnn.{name}", D, D)
        zero("ggnn.bias", 1, D)
        for name in ("Wz", "Uz", "Wr", "Ur", "Wo", "Uo"):
            weight(f"ggnn.{name}", D, D)
        for branch in ("attn_geo", "attn_seq"):
            weight(f"{branch}.alpha", D, 1)
            weight(f"{branch}.Q", D, D)
            weight(f"{branch}.K", D, D)
        weight("proj_geo.W", D, D)
        weight("proj_seq.W", D, D)
        weight("mlp.W1", 4 * D, H)
        zero("mlp.b1", 1, H)
        weight("mlp.W2", H, 1)
        zero("mlp.b2", 1, 1)
        return p


# ---------------------------------------------------------------------------
# row gathering
# ---------------------------------------------------------------------------

def gather_rows(t: Tensor, rows: list[int]) -> Tensor:
    """Stack the given rows of t, differentiably. Duplicates allowed."""
    n = len(rows)
    if n == 0:
        raise ShapeMismatch("gather_rows of nothing")
    first = rows[0]
    if n == 1:
        return ad.slice_row(t, first)
    contiguous = all(rows[i] == first + i for i in range(1, n))
    if contiguous:
        return ad.slice_row(t, first, first + n)
    return ad.concat_rows([ad.slice_row(t, r) for r in rows])


# ---------------------------------------------------------------------------
# geographical propagation
# ---------------------------------------------------------------------------

class GeoCache:
    """Per-graph precomputation for geo propagation operators.

    Stores the per-edge normalization 1/sqrt(|N_i||N_j|) and its product with
    the distance kernel exp(-d^2), plus a memo of the full-graph operator
    matrices (the common case once a batch's ball covers every node).
    """

    def __init__(self, geo: GeoGraph):
        self.geo = geo
        deg = geo.degree.astype(np.float64)
        src = np.repeat(np.arange(geo.num_nodes, dtype=np.int64), geo.degree)
        dst = geo.nbr_index
        norm = np.zeros(len(dst))
        both = deg[src] * deg[dst]
        np.divide(1.0, np.sqrt(both), out=norm, where=both > 0)
        self.edge_src = src
        self.edge_norm = norm
        self.edge_norm_kernel = norm * np.exp(-geo.nbr_dist_km ** 2)
        self._full_ops: tuple | None = None

    def operators(self, ball: np.ndarray):
        """(C, A_kernel) over the ball's local indexing, as Tensor constants.

        C[j, i] = 1/sqrt(|N_i||N_j|) for edges i-j inside the ball;
        A_kernel additionally carries the exp(-d^2) kernel.
        """
        geo = self.geo
        if len(ball) == geo.num_nodes:
            if self._full_ops is None:
                self._full_ops = self._build(np.arange(geo.num_nodes),
                                             full=True)
            return self._full_ops
        return self._build(ball, full=False)

    def _build(self, ball: np.ndarray, full: bool):
        geo = self.geo
        n = len(ball)
        if full:
            rows, cols = self.edge_src, geo.nbr_index
            c_vals, a_vals = self.edge_norm, self.edge_norm_kernel
        else:
            local = np.full(geo.num_nodes, -1, dtype=np.int64)
            local[ball] = np.arange(n)
            keep_rows = []
            keep_cols = []
            keep_pos = []
            for j_local, j in enumerate(ball):
                lo, hi = geo.offsets[j], geo.offsets[j + 1]
                nbrs = geo.nbr_index[lo:hi]
                inside = local[nbrs] >= 0
                keep_rows.append(np.full(int(inside.sum()), j_local, dtype=np.int64))
                keep_cols.append(local[nbrs[inside]])
                keep_pos.append(np.arange(lo, hi)[inside])
            rows = np.concatenate(keep_rows) if keep_rows else np.empty(0, np.int64)
            cols = np.concatenate(keep_cols) if keep_cols else np.empty(0, np.int64)
            pos = np.concatenate(keep_pos) if keep_pos else np.empty(0, np.int64)
            c_vals = self.edge_norm[pos]
            a_vals = self.edge_norm_kernel[pos]

        if n >= _SPARSE_THRESHOLD:
            c = sp.csr_matrix((c_vals, (rows, cols)), shape=(n, n))
            a = sp.csr_matrix((a_vals, (rows, cols)), shape=(n, n))
            return Tensor(c), Tensor(a)
        c = np.zeros((n, n))
        a = np.zeros((n, n))
        c[rows, cols] = c_vals
        a[rows, cols] = a_vals
        return ad.constant(c), ad.constant(a)


class GeoState:
    """Propagated geo rows for a requested node set.

    Only rows of the nodes originally requested are exact full-graph values;
    access is restricted to them. ``local`` maps global POI index ->
    ball-local row (-1 for nodes outside the ball).
    """

    def __init__(self, ball: np.ndarray, requested: set[int],
                 h: Tensor, x0: Tensor, num_nodes: int):
        self.ball = ball
        self.pos = {int(g): i for i, g in enumerate(ball)}
        self.local = np.full(num_nodes, -1, dtype=np.int64)
        self.local[ball] = np.arange(len(ball))
        self.requested = requested
        self.h = h
        self.x0 = x0

    def row(self, poi: int) -> Tensor:
        if poi not in self.requested:
            raise DataError(f"poi {poi} not in the propagated node set")
        return ad.slice_row(self.h, self.pos[poi])

    def rows(self, pois: list[int]) -> Tensor:
        for p in pois:
            if p not in self.requested:
                raise DataError(f"poi {p} not in the propagated node set")
        return gather_rows(self.h, [self.pos[p] for p in pois])


def _hop_ball(geo: GeoGraph, nodes: np.ndarray, hops: int) -> np.ndarray:
    ball = nodes
    frontier = nodes
    for _ in range(hops):
        if len(ball) == geo.num_nodes:
            break
        parts = [geo.nbr_index[geo.offsets[i]:geo.offsets[i + 1]]
                 for i in frontier]
        if not parts:
            break
        grown = np.unique(np.concatenate(parts)) if parts else frontier
        new_ball = np.union1d(ball, grown)
        frontier = np.setdiff1d(grown, ball, assume_unique=False)
        ball = new_ball
        if len(frontier) == 0:
            break
    return ball


def geo_propagate(params: ModelParams, geo: GeoGraph, node_set,
                  cache: GeoCache | None = None,
                  layers: int | None = None) -> GeoState:
    """Message-pass over the geo graph; exact rows for node_set.

    Per layer, in row convention:
        H <- LeakyReLU((H + C @ H) @ W1 + ((A @ H) * H) @ W2)
    where C holds the pair normalizations and A additionally the distance
    kernel. The (A @ H) * H factorization equals summing the elementwise
    products with every neighbor because Hadamard distributes over the sum.
    """
    if layers is None:
        layers = params.dims.L
    nodes = np.unique(np.asarray(list(node_set), dtype=np.int64))
    if len(nodes) == 0:
        raise DataError("empty node set")
    if nodes[0] < 0 or nodes[-1] >= geo.num_nodes:
        raise DataError("node set out of range")
    cache = cache or GeoCache(geo)
    ball = _hop_ball(geo, nodes, layers)

    x0 = gather_rows(params["embedding.X"], ball.tolist())
    h = x0
    if layers > 0:
        c_op, a_op = cache.operators(ball)
        for layer in range(layers):
            w1 = params[f"geo.layer{layer}.W1"]
            w2 = params[f"geo.layer{layer}.W2"]
            spread = ad.matmul(c_op, h)
            first = ad.matmul(ad.add(h, spread), w1)
            affinity = ad.elementwise_mul(ad.matmul(a_op, h), h)
            h = ad.leaky_relu(ad.add(first, ad.matmul(affinity, w2)))
    return GeoState(ball, {int(x) for x in nodes}, h, x0, geo.num_nodes)


# ---------------------------------------------------------------------------
# sequential propagation
# ---------------------------------------------------------------------------

def _ggnn_steps(params: ModelParams, h: Tensor, in_op: Tensor, out_op: Tensor,
                steps: int) -> Tensor:
    """The shared gate math; in_op/out_op may cover one session or a
    block-diagonal stack of many."""
    ones = ad.constant(np.ones(h.shape))
    bias = params["ggnn.bias"]
    for _ in range(steps):
        agg = ad.add(ad.add(ad.matmul(ad.matmul(in_op, h), params["ggnn.agg_in"]),
                            ad.matmul(ad.matmul(out_op, h), params["ggnn.agg_out"])),
                     bias)
        update = ad.sigmoid(ad.add(ad.matmul(agg, params["ggnn.Wz"]),
                                   ad.matmul(h, params["ggnn.Uz"])))
        reset = ad.sigmoid(ad.add(ad.matmul(agg, params["ggnn.Wr"]),
                                  ad.matmul(h, params["ggnn.Ur"])))
        candidate = ad.tanh(ad.add(ad.matmul(agg, params["ggnn.Wo"]),
                                   ad.matmul(ad.elementwise_mul(reset, h),
                                             params["ggnn.Uo"])))
        h = ad.add(ad.elementwise_mul(ad.sub(ones, update), h),
                   ad.elementwise_mul(update, candidate))
    return h


def ggnn_propagate(params: ModelParams, seq: SeqGraph,
                   steps: int | None = None) -> Tensor:
    """Gated propagation over a session graph; returns per-node states.

    State starts at the raw embeddings. Each step aggregates the in/out
    neighborhoods through separate linear halves plus a shared bias, then
    applies GRU-style update/reset gates.
    """
    if steps is None:
        steps = params.dims.T
    if steps < 1:
        raise DataError("at least one propagation step required")
    h = gather_rows(params["embedding.X"], seq.nodes)
    return _ggnn_steps(params, h, ad.constant(seq.in_mat),
                       ad.constant(seq.out_mat), steps)


# ---------------------------------------------------------------------------
# attention, proxies, losses, prediction
# ---------------------------------------------------------------------------

def soft_attention(query: Tensor, keys: Tensor, alpha: Tensor,
                   q_mat: Tensor, k_mat: Tensor) -> Tensor:
    """Raw (unnormalized) additive attention: sum_i (alpha . sig(qQ + k_i K)) k_i."""
    scores = ad.sigmoid(ad.add(ad.matmul(keys, k_mat), ad.matmul(query, q_mat)))
    weights = ad.matmul(scores, alpha)  # (n, 1)
    spread = ad.matmul(weights, ad.constant(np.ones((1, keys.shape[1]))))
    return ad.sum_rows(ad.elementwise_mul(spread, keys))


def proxies(params: ModelParams, context: list[int], geo: GeoGraph,
            x_source: GeoState | None = None) -> tuple[Tensor, Tensor]:
    """Mean-pooled readouts: geo proxy over the context's one-hop neighbors
    (weighted by neighborhood sizes, duplicates counted), sequential proxy
    over the context embeddings themselves. Falls back to the sequential
    proxy when no context POI has geo neighbors."""
    x = params["embedding.X"]
    p_seq = ad.mean_rows(gather_rows(x, list(context)))

    counts: dict[int, float] = {}
    total = 0
    for poi in context:
        nbrs, _ = geo.neighbors(poi)
        total += len(nbrs)
        for j in nbrs:
            j = int(j)
            counts[j] = counts.get(j, 0.0) + 1.0
    if total == 0:
        return p_seq, p_seq

    if x_source is not None and all(j in x_source.pos for j in counts):
        coef = np.zeros((1, x_source.x0.shape[0]))
        for j, c in counts.items():
            coef[0, x_source.pos[j]] = c / total
        p_geo = ad.matmul(ad.constant(coef), x_source.x0)
    else:
        coef = np.zeros((1, params.dims.num_pois))
        for j, c in counts.items():
            coef[0, j] = c / total
        p_geo = ad.matmul(ad.constant(coef), x)
    return p_geo, p_seq


def ranking_term(anchor: Tensor, positive: Tensor, negative: Tensor) -> Tensor:
    """softplus(<anchor, negative> - <anchor, positive>)"""
    return ad.softplus(ad.sub(ad.inner_product(anchor, negative),
                              ad.inner_product(anchor, positive)))


def contrastive_loss(e_geo_p: Tensor, p_geo_p: Tensor,
                     e_seq_p: Tensor, p_seq_p: Tensor) -> Tensor:
    """Pull each projected embedding to its own proxy, push from the other's."""
    return ad.add(ranking_term(e_geo_p, p_geo_p, p_seq_p),
                  ranking_term(e_seq_p, p_seq_p, p_geo_p))


def predict(params: ModelParams, e_geo: Tensor, e_seq: Tensor,
            x_t: Tensor, h_t: Tensor) -> Tensor:
    """sigmoid(MLP([e_geo, e_seq, x_t, h_t])), the 4D->H->1 head.

    The concatenation is folded into four row-blocks of the first layer, which
    is the same linear map without needing a column concat primitive.
    """
    D = params.dims.D
    w1 = params["mlp.W1"]
    z = ad.matmul(e_geo, ad.slice_row(w1, 0, D))
    z = ad.add(z, ad.matmul(e_seq, ad.slice_row(w1, D, 2 * D)))
    z = ad.add(z, ad.matmul(x_t, ad.slice_row(w1, 2 * D, 3 * D)))
    z = ad.add(z, ad.matmul(h_t, ad.slice_row(w1, 3 * D, 4 * D)))
    z = ad.leaky_relu(ad.add(z, params["mlp.b1"]))
    logit = ad.add(ad.matmul(z, params["mlp.W2"]), params["mlp.b2"])
    return ad.sigmoid(logit)


def bce_loss(label: int, y_hat: Tensor) -> Tensor:
    """-[y log p + (1-y) log(1-p)] with p clamped away from {0, 1}."""
    p = ad.clamp(y_hat, BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)
    if label == 1:
        return ad.scalar_mul(-1.0, ad.log(p))
    if label == 0:
        return ad.scalar_mul(-1.0, ad.log(ad.sub(ad.constant(1.0), p)))
    raise DataError(f"label must be 0 or 1, got {label}")


@dataclass
class ForwardOutput:
    e_geo: Tensor
    e_seq: Tensor
    p_geo: Tensor
    p_seq: Tensor
    e_geo_proj: Tensor
    e_seq_proj: Tensor
    p_geo_proj: Tensor
    p_seq_proj: Tensor
    x_t: Tensor
    h_t: Tensor
    y_hat: Tensor
    l_con: Tensor


def total_loss(label: int, out: ForwardOutput, beta: float) -> Tensor:
    rec = bce_loss(label, out.y_hat)
    if beta == 0.0:
        return rec
    return ad.add(rec, ad.scalar_mul(beta, out.l_con))


def forward_sample(params: ModelParams, context: list[int], target: int,
                   geo: GeoGraph, geo_state: GeoState | None,
                   disable_geo: bool = False,
                   disable_seq: bool = False) -> ForwardOutput:
    """Run one (context, target) pair through both branches.

    geo_state must cover the context POIs and the target unless the geo
    branch is disabled. A disabled branch contributes zero vectors and drops
    its own ranking term from the contrastive loss.
    """
    D = params.dims.D
    zero_row = ad.zeros(1, D)
    x = params["embedding.X"]
    x_t = ad.slice_row(x, target)

    if disable_geo:
        e_geo = p_geo = h_t = e_geo_proj = p_geo_proj = zero_row
        p_seq_raw = ad.mean_rows(gather_rows(x, list(context)))
    else:
        if geo_state is None:
            raise DataError("geo_state required unless the geo branch is off")
        p_geo, p_seq_raw = proxies(params, list(context), geo, x_source=geo_state)
        h_t = geo_state.row(target)
        keys = geo_state.rows(list(context))
        e_geo = soft_attention(h_t, keys, params["attn_geo.alpha"],
                               params["attn_geo.Q"], params["attn_geo.K"])
        e_geo_proj = ad.matmul(e_geo, params["proj_geo.W"])
        p_geo_proj = ad.matmul(p_geo, params["proj_geo.W"])

    if disable_seq:
        e_seq = p_seq = e_seq_proj = p_seq_proj = zero_row
    else:
        sg = build_seq_graph(list(context))
        h_nodes = ggnn_propagate(params, sg)
        keys = gather_rows(h_nodes, sg.alias)
        e_seq = soft_attention(x_t, keys, params["attn_seq.alpha"],
                               params["attn_seq.Q"], params["attn_seq.K"])
        p_seq = p_seq_raw
        e_seq_proj = ad.matmul(e_seq, params["proj_seq.W"])
        p_seq_proj = ad.matmul(p_seq, params["proj_seq.W"])

    terms = []
    if not disable_geo:
        terms.append(ranking_term(e_geo_proj, p_geo_proj, p_seq_proj))
    if not disable_seq:
        terms.append(ranking_term(e_seq_proj, p_seq_proj, p_geo_proj))
    if not terms:
        l_con = ad.zeros(1, 1)
    elif len(terms) == 1:
        l_con = terms[0]
    else:
        l_con = ad.add(terms[0], terms[1])

    y_hat = predict(params, e_geo, e_seq, x_t, h_t)
    return ForwardOutput(e_geo, e_seq, p_geo, p_seq,
                         e_geo_proj, e_seq_proj, p_geo_proj, p_seq_proj,
                         x_t, h_t, y_hat, l_con)


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------

def _sparse_rows(col_of_row, num_cols, values=None) -> Tensor:
    """Constant CSR selection matrix with exactly one entry per row."""
    n = len(col_of_row)
    data = np.ones(n) if values is None else np.asarray(values, dtype=np.float64)
    indptr = np.arange(n + 1, dtype=np.int64)
    mat = sp.csr_matrix((data, np.asarray(col_of_row, dtype=np.int64), indptr),
                        shape=(n, num_cols))
    return Tensor(mat)


def _sparse_coo(rows, cols, values, shape) -> Tensor:
    mat = sp.csr_matrix((np.asarray(values, dtype=np.float64),
                         (np.asarray(rows), np.asarray(cols))), shape=shape)
    return Tensor(mat)


def _row_dots(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two (n, D) stacks -> (n, 1)."""
    ones_col = ad.constant(np.ones((a.shape[1], 1)))
    return ad.matmul(ad.elementwise_mul(a, b), ones_col)


def _attention_batch(queries: Tensor, keys: Tensor, pos_sample: np.ndarray,
                     n_samples: int, alpha: Tensor, q_mat: Tensor,
                     k_mat: Tensor) -> Tensor:
    """soft_attention for many samples at once.

    keys stacks every sample's key rows; pos_sample maps each key row to its
    sample. Values equal running soft_attention per sample.
    """
    num_rows = keys.shape[0]
    spread_q = _sparse_rows(pos_sample, n_samples)          # (P, n)
    pool = _sparse_coo(pos_sample, np.arange(num_rows),
                       np.ones(num_rows), (n_samples, num_rows))  # (n, P)
    scores = ad.sigmoid(ad.add(ad.matmul(keys, k_mat),
                               ad.matmul(spread_q, ad.matmul(queries, q_mat))))
    weights = ad.matmul(scores, alpha)
    weighted = ad.elementwise_mul(
        ad.matmul(weights, ad.constant(np.ones((1, keys.shape[1])))), keys)
    return ad.matmul(pool, weighted)


@dataclass
class BatchOutput:
    y_hat: Tensor      # (n, 1) click probabilities
    l_rec_vec: Tensor  # (n, 1) per-sample cross entropies
    l_con_vec: Tensor  # (n, 1) per-sample contrastive losses


def forward_batch(params: ModelParams, samples, geo: GeoGraph,
                  geo_state: GeoState | None,
                  disable_geo: bool = False,
                  disable_seq: bool = False) -> BatchOutput:
    """Batched forward over many (context, target, label) samples.

    Equivalent to forward_sample per sample but expressed as a handful of
    stacked-matrix tape operations: per-sample gathers become sparse constant
    selection matmuls, the session graphs run as one block-diagonal gated
    propagation, and attention/proxy reductions become pooled matmuls. Used
    by the trainer; the per-sample path remains the reference and the tests
    pin them together.
    """
    n = len(samples)
    D = params.dims.D
    contexts = [list(s.context) for s in samples]
    targets = [s.target for s in samples]
    labels = np.array([[float(s.label)] for s in samples])

    if disable_geo:
        x_src = params["embedding.X"]
        to_local = None
        m_src = params.dims.num_pois
    else:
        if geo_state is None:
            raise DataError("geo_state required unless the geo branch is off")
        x_src = geo_state.x0
        to_local = geo_state.local
        m_src = x_src.shape[0]

    def local(ids):
        ids = np.asarray(ids, dtype=np.int64)
        return ids if to_local is None else to_local[ids]

    ctx_lens = np.array([len(c) for c in contexts], dtype=np.int64)
    pos_sample = np.repeat(np.arange(n), ctx_lens)
    ctx_flat = np.array([poi for ctx in contexts for poi in ctx],
                        dtype=np.int64)

    x_t_all = ad.matmul(_sparse_rows(local(targets), m_src), x_src)

    # sequential-branch proxy: per-sample mean of context embeddings
    seq_coef_vals = np.repeat(1.0 / ctx_lens, ctx_lens)
    p_seq_all = ad.matmul(_sparse_coo(pos_sample, local(ctx_flat),
                                      seq_coef_vals, (n, m_src)), x_src)

    if disable_seq:
        e_seq_all = p_seq_out = e_seq_proj = p_seq_proj = ad.zeros(n, D)
    else:
        graphs = [build_seq_graph(ctx) for ctx in contexts]
        sizes = [len(g.nodes) for g in graphs]
        node_offsets = np.concatenate([[0], np.cumsum(sizes)])
        total_nodes = int(node_offsets[-1])
        nodes_flat = np.array([poi for g in graphs for poi in g.nodes],
                              dtype=np.int64)
        in_block = _block_diag(( g.in_mat for g in graphs), sizes, total_nodes)
        out_block = _block_diag((g.out_mat for g in graphs), sizes, total_nodes)
        h0 = ad.matmul(_sparse_rows(local(nodes_flat), m_src), x_src)
        h_sess = _ggnn_steps(params, h0, in_block, out_block, params.dims.T)
        alias_flat = np.concatenate(
            [node_offsets[i] + np.asarray(g.alias, dtype=np.int64)
             for i, g in enumerate(graphs)])
        keys_seq = ad.matmul(_sparse_rows(alias_flat, total_nodes), h_sess)
        e_seq_all = _attention_batch(x_t_all, keys_seq, pos_sample, n,
                                     params["attn_seq.alpha"],
                                     params["attn_seq.Q"],
                                     params["attn_seq.K"])
        p_seq_out = p_seq_all
        e_seq_proj = ad.matmul(e_seq_all, params["proj_seq.W"])
        p_seq_proj = ad.matmul(p_seq_all, params["proj_seq.W"])

    if disable_geo:
        e_geo_all = p_geo_out = h_t_all = e_geo_proj = p_geo_proj = ad.zeros(n, D)
    else:
        m_ball = geo_state.h.shape[0]
        h_t_all = ad.matmul(
            _sparse_rows(geo_state.local[np.asarray(targets)], m_ball),
            geo_state.h)
        keys_geo = ad.matmul(_sparse_rows(geo_state.local[ctx_flat], m_ball),
                             geo_state.h)
        e_geo_all = _attention_batch(h_t_all, keys_geo, pos_sample, n,
                                     params["attn_geo.alpha"],
                                     params["attn_geo.Q"],
                                     params["attn_geo.K"])
        p_geo_out = _geo_proxy_batch(params, contexts, geo, geo_state)
        e_geo_proj = ad.matmul(e_geo_all, params["proj_geo.W"])
        p_geo_proj = ad.matmul(p_geo_out, params["proj_geo.W"])

    terms = []
    if not disable_geo:
        terms.append(ad.softplus(ad.sub(_row_dots(e_geo_proj, p_seq_proj),
                                        _row_dots(e_geo_proj, p_geo_proj))))
    if not disable_seq:
        terms.append(ad.softplus(ad.sub(_row_dots(e_seq_proj, p_geo_proj),
                                        _row_dots(e_seq_proj, p_seq_proj))))
    if not terms:
        l_con_vec = ad.zeros(n, 1)
    elif len(terms) == 1:
        l_con_vec = terms[0]
    else:
        l_con_vec = ad.add(terms[0], terms[1])

    y_hat = predict(params, e_geo_all, e_seq_all, x_t_all, h_t_all)

    p = ad.clamp(y_hat, BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)
    ones_col = ad.constant(np.ones((n, 1)))
    y_const = ad.constant(labels)
    y_flip = ad.constant(1.0 - labels)
    l_rec_vec = ad.scalar_mul(
        -1.0, ad.add(ad.elementwise_mul(y_const, ad.log(p)),
                     ad.elementwise_mul(y_flip, ad.log(ad.sub(ones_col, p)))))
    return BatchOutput(y_hat=y_hat, l_rec_vec=l_rec_vec, l_con_vec=l_con_vec)


def _block_diag(mats, sizes, total: int) -> Tensor:
    """Block-diagonal CSR constant from small dense blocks."""
    rows_parts, cols_parts, vals_parts = [], [], []
    offset = 0
    for mat, size in zip(mats, sizes):
        r, c = np.nonzero(mat)
        rows_parts.append(r + offset)
        cols_parts.append(c + offset)
        vals_parts.append(mat[r, c])
        offset += size
    if rows_parts:
        rows = np.concatenate(rows_parts)
        cols = np.concatenate(cols_parts)
        vals = np.concatenate(vals_parts)
    else:
        rows = cols = vals = np.empty(0)
    return Tensor(sp.csr_matrix((vals, (rows, cols)), shape=(total, total)))


def _geo_proxy_batch(params, contexts, geo, geo_state) -> Tensor:
    """Stacked geo proxies via one coefficient matmul.

    Duplicate (sample, neighbor) entries merge during CSR construction, which
    realizes the multiplicity-weighted mean. Samples whose contexts have no
    geo neighbors fall back to the sequential-proxy coefficients.
    """
    n = len(contexts)
    rows, cols, vals = [], [], []
    outside_ball = False
    for i, ctx in enumerate(contexts):
        nbr_parts = [geo.neighbors(poi)[0] for poi in ctx]
        nbrs = np.concatenate(nbr_parts) if nbr_parts else np.empty(0, np.int64)
        total = len(nbrs)
        if total == 0:
            rows.append(np.full(len(ctx), i, dtype=np.int64))
            cols.append(np.asarray(ctx, dtype=np.int64))
            vals.append(np.full(len(ctx), 1.0 / len(ctx)))
        else:
            rows.append(np.full(total, i, dtype=np.int64))
            cols.append(nbrs)
            vals.append(np.full(total, 1.0 / total))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    local = geo_state.local[cols]
    if (local >= 0).all():
        coef = _sparse_coo(rows, local, vals, (n, geo_state.x0.shape[0]))
        return ad.matmul(coef, geo_state.x0)
    # a neighbor fell outside the propagation ball (layers == 0):
    # aggregate straight from the global embedding table instead
    coef = _sparse_coo(rows, cols, vals, (n, params.dims.num_pois))
    return ad.matmul(coef, params["embedding.X"])


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """JSON header line + raw little-endian fp64 blocks in manifest order.

    Written via temp-file-then-rename so an interrupted run never leaves a
    partial checkpoint behind.
    """
    header = {"format": CHECKPOINT_FORMAT,
              "dims": params.dims.to_json(),
              "extra": extra or {},
              "manifest": [[name, list(shape)] for name, shape in params.manifest()]}
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, tensor in params.items():
            fh.write(tensor.data.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt checkpoint header: {path}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ManifestMismatch(f"unknown checkpoint format in {path}")
        dims = ModelDims.from_json(header["dims"])
        params = ModelParams(dims)
        for name, shape in header["manifest"]:
            rows, cols = int(shape[0]), int(shape[1])
            buf = fh.read(8 * rows * cols)
            if len(buf) != 8 * rows * cols:
                raise ManifestMismatch(f"checkpoint truncated at {name}")
            arr = np.frombuffer(buf, dtype="<f8").reshape(rows, cols)
            params._add(name, arr.astype(np.float64))
        if fh.read(1):
            raise ManifestMismatch(f"trailing bytes after manifest in {path}")
    return params, header.get("extra", {})
