"""Distance-aware masked graph attention over traffic sensor graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import AttentionVariant, Module, QKVMappings, glorot, parameter
from .tensor import ShapeError, Tensor


@dataclass(eq=False)
class TrafficGraph:
    """Undirected sensor graph; every node is its own neighbor at distance 0."""

    node_ids: list[str]
    edges: list[tuple[int, int, float]]  # (a, b, meters), a != b, one row per undirected edge
    _src: np.ndarray = field(init=False, repr=False)
    _dst: np.ndarray = field(init=False, repr=False)
    _dist: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.node_ids)
        if len(set(self.node_ids)) != n:
            raise ValueError("duplicate node ids")
        pairs: dict[tuple[int, int], float] = {}
        for a, b, d in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a node outside 0..{n - 1}")
            if d < 0 or not np.isfinite(d):
                raise ValueError(f"edge ({a}, {b}) has invalid distance {d}")
            if a == b:
                continue
            pairs[(a, b)] = float(d)
            pairs[(b, a)] = float(d)
        for i in range(n):
            pairs[(i, i)] = 0.0
        keys = sorted(pairs)
        self._src = np.array([k[0] for k in keys], dtype=np.intp)
        self._dst = np.array([k[1] for k in keys], dtype=np.intp)
        self._dist = np.array([pairs[k] for k in keys])

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def src(self) -> np.ndarray:
        """Receiving node i of each directed (i <- j) attention edge, sorted."""
        return self._src

    @property
    def dst(self) -> np.ndarray:
        return self._dst

    @property
    def distances(self) -> np.ndarray:
        return self._dist

    @property
    def num_edges(self) -> int:
        return int(self._src.size)

    def normalized_distances(self) -> np.ndarray:
        scale = self._dist.max()
        return self._dist / scale if scale > 0 else self._dist.copy()

    def neighbors(self, i: int) -> list[int]:
        return self._dst[self._src == i].tolist()

    def distance(self, i: int, j: int) -> float:
        mask = (self._src == i) & (self._dst == j)
        if not mask.any():
            raise KeyError(f"nodes {i} and {j} are not neighbors")
        return float(self._dist[mask][0])

    def index_of(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def dense(self, edge_values: np.ndarray) -> np.ndarray:
        """Scatter per-edge values (edge axis first) into a dense [N, N, ...] array."""
        n = self.num_nodes
        out = np.zeros((n, n) + edge_values.shape[1:])
        out[self._src, self._dst] = edge_values
        return out


@dataclass(eq=False)
class SparseAttention:
    """Attention coefficients keyed by the graph's directed edge list."""

    graph: TrafficGraph
    values: np.ndarray  # [E] or [E, ...]

    def to_dense(self) -> np.ndarray:
        return self.graph.dense(self.values)

    def row(self, i: int) -> dict[int, float]:
        mask = self.graph.src == i
        return dict(zip(self.graph.dst[mask].tolist(), self.values[mask].tolist()))


class GraphAttentionLayer(Module):
    """Masked attention ``alpha_ij = softmax_j(sigma(W_sp [F_Q h_i | F_K h_j | d_ij]))``.

    Under identity-value variants the output is the plain attention-weighted
    sum of neighbor features; the full variant applies the feature activation
    and the ``W_2`` projection on top.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        variant: AttentionVariant = AttentionVariant.IDENTITY_VALUE,
        score_activation: str = "tanh",
        feature_activation: str = "tanh",
    ):
        self.dim = dim
        self.variant = AttentionVariant(variant)
        self.mappings = QKVMappings(rng, dim, self.variant)
        self.w_sp = parameter(glorot(rng, 2 * dim + 1, 1, shape=(2 * dim + 1,)))
        self.w_out = None if self.variant.identity_value else parameter(glorot(rng, dim, dim))
        self._score = T.activation(score_activation)
        self._feature = T.activation(feature_activation)

    def _check(self, h: Tensor) -> None:
        if h.shape[-1] != self.dim:
            raise ShapeError(f"feature width {h.shape[-1]} does not match layer width {self.dim}")

    def edge_logits(self, h: Tensor, graph: TrafficGraph, node_axis: int) -> Tensor:
        d = self.dim
        w = self.w_sp
        q_part = T.matmul(self.mappings.q(h), T.reshape(T.slice_axis(w, 0, d), (d, 1)))
        k_part = T.matmul(self.mappings.k(h), T.reshape(T.slice_axis(w, d, 2 * d), (d, 1)))
        q_part = T.reshape(q_part, q_part.shape[:-1])
        k_part = T.reshape(k_part, k_part.shape[:-1])
        logits = T.take(q_part, graph.src, node_axis) + T.take(k_part, graph.dst, node_axis)
        dist_shape = [1] * logits.ndim
        dist_shape[node_axis] = graph.num_edges
        dist = Tensor(graph.normalized_distances().reshape(dist_shape))
        return logits + dist * T.slice_axis(w, 2 * d, 2 * d + 1)

    def attention(self, h: Tensor, graph: TrafficGraph, node_axis: int) -> Tensor:
        importance = self._score(self.edge_logits(h, graph, node_axis))
        return T.segment_softmax(importance, graph.src, graph.num_nodes, axis=node_axis)

    def aggregate(self, h: Tensor, alpha, graph: TrafficGraph, node_axis: int) -> Tensor:
        values = T.take(self.mappings.v(h), graph.dst, node_axis)
        weighted = T.expand_dims(T.as_tensor(alpha), -1) * values
        out = T.segment_sum(weighted, graph.src, graph.num_nodes, axis=node_axis)
        if self.w_out is not None:
            out = T.matmul(self._feature(out), self.w_out)
        return out

    def forward(self, h: Tensor, graph: TrafficGraph, alpha: np.ndarray | None = None):
        """h: [B, N, L, D] -> (h': [B, N, L, D], alpha: [B, E, L]).

        Passing ``alpha`` replays previously computed coefficients as constants.
        """
        self._check(h)
        if h.shape[1] != graph.num_nodes:
            raise ShapeError(f"feature rows {h.shape[1]} do not match graph size {graph.num_nodes}")
        if alpha is None:
            alpha_t = self.attention(h, graph, node_axis=1)
        else:
            alpha_t = Tensor(alpha)
        return self.aggregate(h, alpha_t, graph, node_axis=1), alpha_t

    __call__ = forward


def node_importance(layer: GraphAttentionLayer, h_i, h_j, d_ij: float) -> Tensor:
    """Unnormalized importance ``I_ij`` of node j to node i (``d_ij`` pre-normalized)."""
    h_i, h_j = T.as_tensor(h_i), T.as_tensor(h_j)
    layer._check(h_i)
    layer._check(h_j)
    if d_ij < 0:
        raise ValueError("distance must be nonnegative")
    joint = T.concat([layer.mappings.q(h_i), layer.mappings.k(h_j), Tensor([d_ij])], axis=0)
    return layer._score(T.reduce_sum(joint * layer.w_sp))


def masked_attention(layer: GraphAttentionLayer, H, graph: TrafficGraph) -> SparseAttention:
    """Coefficients for one time step of node features ``H``: [N, D]."""
    H = T.as_tensor(H)
    layer._check(H)
    if H.shape[0] != graph.num_nodes:
        raise ShapeError(f"feature rows {H.shape[0]} do not match graph size {graph.num_nodes}")
    with T.no_grad():
        alpha = layer.attention(H, graph, node_axis=0)
    return SparseAttention(graph, alpha.data)


def aggregate(layer: GraphAttentionLayer, H, alpha: SparseAttention | np.ndarray, graph: TrafficGraph) -> Tensor:
    """New node features ``h'_i`` from one time step ``H``: [N, D]."""
    H = T.as_tensor(H)
    layer._check(H)
    values = alpha.values if isinstance(alpha, SparseAttention) else alpha
    return layer.aggregate(H, values, graph, node_axis=0)
