"""Graph values, batching, feature masking, augmentation and prompt addition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def round_half_up(x: float) -> int:
    # the small offset absorbs products like 0.1 * 25 landing just under .5
    return int(math.floor(x + 0.5 + 1e-9))


def _check_rate(name: str, rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {rate}")


def canonical_edges(edges, num_nodes: int) -> np.ndarray:
    """Unique undirected pairs (i < j) as an (E, 2) int array, sorted."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise ValueError(f"edge endpoint outside [0, {num_nodes})")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with dense node features.

    ``edges`` holds each undirected pair once as ``(i, j)`` with ``i < j``.
    """

    x: np.ndarray
    edges: np.ndarray
    label: int | None = None
    id: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"node features must be an N x D matrix with N >= 1, got {x.shape}")
        x.setflags(write=False)
        e = canonical_edges(self.edges, x.shape[0])
        e.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "edges", e)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def directed_edges(self) -> np.ndarray:
        return np.concatenate([self.edges, self.edges[:, ::-1]], axis=0)

    def replace(self, **kw) -> "Graph":
        fields = {"x": self.x, "edges": self.edges, "label": self.label, "id": self.id}
        fields.update(kw)
        return Graph(**fields)

    def permute(self, perm) -> "Graph":
        """Relabel nodes: old node ``perm[k]`` becomes new node ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return self.replace(x=self.x[perm], edges=inv[self.edges])

    def same_as(self, other: "Graph") -> bool:
        return (self.label == other.label and np.array_equal(self.x, other.x)
                and np.array_equal(self.edges, other.edges))


@dataclass
class GraphBatch:
    """Several graphs packed into one block-diagonal structure."""

    graphs: list[Graph]
    node_offsets: np.ndarray = field(init=False)
    graph_of_node: np.ndarray = field(init=False)
    x: np.ndarray = field(init=False)
    adj: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("empty batch")
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) != 1:
            raise ValueError(f"mixed feature dimensions in batch: {sorted(dims)}")
        sizes = np.array([g.num_nodes for g in self.graphs])
        self.node_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.graph_of_node = np.repeat(np.arange(len(self.graphs)), sizes)
        self.x = np.concatenate([g.x for g in self.graphs], axis=0)
        n = int(self.node_offsets[-1])
        parts = [g.directed_edges() + off for g, off in zip(self.graphs, self.node_offsets[:-1])]
        e = np.concatenate(parts, axis=0) if parts else np.zeros((0, 2), dtype=np.int64)
        self.adj = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return int(self.node_offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.node_offsets)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs])

    def pool_matrix(self, kind: str = "mean") -> sp.csr_matrix:
        w = 1.0 / self.sizes[self.graph_of_node] if kind == "mean" else np.ones(self.num_nodes)
        return sp.csr_matrix((w, (self.graph_of_node, np.arange(self.num_nodes))),
                             shape=(self.num_graphs, self.num_nodes))


@dataclass(frozen=True)
class MaskPlan:
    masked_nodes: np.ndarray
    token_nodes: np.ndarray
    replaced_nodes: np.ndarray
    replace_sources: np.ndarray
    rng_seed: int | None = None

    @classmethod
    def empty(cls, seed=None) -> "MaskPlan":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, seed)

    def shifted(self, offset: int) -> "MaskPlan":
        return MaskPlan(self.masked_nodes + offset, self.token_nodes + offset,
                        self.replaced_nodes + offset, self.replace_sources + offset, self.rng_seed)

    @staticmethod
    def concat(plans: list["MaskPlan"]) -> "MaskPlan":
        if not plans:
            return MaskPlan.empty()
        cat = lambda attr: np.concatenate([getattr(p, attr) for p in plans]).astype(np.int64)
        return MaskPlan(cat("masked_nodes"), cat("token_nodes"), cat("replaced_nodes"),
                        cat("replace_sources"))


def plan_mask(num_nodes: int, rate: float, replace_rate: float, rng: np.random.Generator,
              candidates: np.ndarray | None = None, seed: int | None = None) -> MaskPlan:
    """Choose masked nodes among ``candidates`` (default: all nodes).

    A ``replace_rate`` share of the masked nodes takes the features of another
    uniformly chosen node; the rest take the mask token.
    """
    _check_rate("masking rate", rate)
    _check_rate("replace rate", replace_rate)
    pool = np.arange(num_nodes) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if rate == 0 or len(pool) == 0:
        return MaskPlan.empty(seed)
    k = min(len(pool), max(1, round_half_up(rate * len(pool))))
    masked = np.sort(rng.choice(pool, size=k, replace=False))
    n_rep = round_half_up(replace_rate * k) if num_nodes > 1 else 0
    order = rng.permutation(k)
    replaced = np.sort(masked[order[:n_rep]])
    token = np.sort(masked[order[n_rep:]])
    # source drawn uniformly from the other nodes of the graph
    src = rng.integers(0, num_nodes - 1, size=n_rep) if n_rep else np.zeros(0, dtype=np.int64)
    src = src + (src >= replaced)
    return MaskPlan(masked, token, replaced, src.astype(np.int64), seed)


def apply_mask(g: Graph, rate: float, replace_rate: float, mask_token, seed: int) -> tuple[Graph, MaskPlan]:
    _check_rate("masking rate", rate)
    _check_rate("replace rate", replace_rate)
    token = np.asarray(mask_token, dtype=np.float64).reshape(-1)
    if token.shape[0] != g.feature_dim:
        raise ValueError(f"mask token length {token.shape[0]} != feature dim {g.feature_dim}")
    plan = plan_mask(g.num_nodes, rate, replace_rate, np.random.default_rng(seed), seed=seed)
    x = g.x.copy()
    x[plan.replaced_nodes] = g.x[plan.replace_sources]
    x[plan.token_nodes] = token
    return g.replace(x=x), plan


@dataclass(frozen=True)
class AugmentSpec:
    feat_mask_rate: float = 0.0
    drop_edge_rate: float = 0.0

    def __post_init__(self):
        _check_rate("feat_mask_rate", self.feat_mask_rate)
        _check_rate("drop_edge_rate", self.drop_edge_rate)

    @property
    def is_identity(self) -> bool:
        return self.feat_mask_rate == 0 and self.drop_edge_rate == 0


def augment_with_rng(g: Graph, spec: AugmentSpec, rng: np.random.Generator) -> Graph:
    if spec.is_identity:
        return g
    n_drop = round_half_up(spec.drop_edge_rate * g.num_edges)
    keep = np.sort(rng.permutation(g.num_edges)[n_drop:])
    n_zero = round_half_up(spec.feat_mask_rate * g.num_nodes)
    x = g.x
    if n_zero:
        x = g.x.copy()
        x[rng.choice(g.num_nodes, size=n_zero, replace=False)] = 0.0
    return g.replace(x=x, edges=g.edges[keep])


def augment(g: Graph, spec: AugmentSpec, seed: int) -> Graph:
    """Drop a fraction of undirected edges and zero the features of a fraction of nodes."""
    return augment_with_rng(g, spec, np.random.default_rng(seed))


def add_prompt_supernode(g: Graph, mask_token) -> Graph:
    """Prepend node 0 carrying ``mask_token`` and link it to every original node."""
    token = np.asarray(mask_token, dtype=np.float64).reshape(1, -1)
    if token.shape[1] != g.feature_dim:
        raise ValueError(f"mask token length {token.shape[1]} != feature dim {g.feature_dim}")
    n = g.num_nodes
    star = np.stack([np.zeros(n, dtype=np.int64), np.arange(1, n + 1)], axis=1)
    return g.replace(x=np.concatenate([token, g.x], axis=0),
                     edges=np.concatenate([star, g.edges + 1], axis=0))
