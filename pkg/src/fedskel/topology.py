"""Skeleton graphs, partitioned adjacency construction, and the ternary topology.

The spatial graph is split into three distance partitions relative to a root
joint (self, centripetal, centrifugal), each symmetrically degree-normalized
by the full self-loop-augmented adjacency. The ternary structure augments the
fixed partitions with a shared learnable matrix (aggregated across clients)
and a private learnable matrix (never aggregated), mixed by three
coefficients.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import TopologyError
from .tensor import Tensor, add, smul

Array = np.ndarray

PARTITION_COUNT = 3


@dataclass(frozen=True)
class SkeletonGraph:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    root_joint: int = 0

    def __post_init__(self):
        v = self.joint_count
        if v < 1:
            raise TopologyError(f"joint count must be positive, got {v}")
        if not 0 <= self.root_joint < v:
            raise TopologyError(f"root joint {self.root_joint} out of range [0, {v})")
        canon = []
        for a, b in self.edges:
            if not (0 <= a < v and 0 <= b < v):
                raise TopologyError(f"edge ({a}, {b}) out of range [0, {v})")
            if a == b:
                raise TopologyError(f"self-loop edge ({a}, {b}) not allowed")
            canon.append((min(a, b), max(a, b)))
        # Canonical ordering makes downstream construction independent of the
        # edge-list order given in configs.
        object.__setattr__(self, "edges", tuple(sorted(set(canon))))
        if self.hop_distances() is None:
            raise TopologyError("skeleton graph is disconnected")

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.joint_count)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def hop_distances(self) -> list[int] | None:
        """BFS distance of every joint from the root; None if disconnected."""
        dist = [-1] * self.joint_count
        dist[self.root_joint] = 0
        q = deque([self.root_joint])
        adj = self.neighbors()
        while q:
            u = q.popleft()
            for w in adj[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return None if any(d < 0 for d in dist) else dist

    def spanning_tree_parents(self) -> list[int]:
        """BFS-tree parent of each joint (-1 for the root)."""
        parents = [-1] * self.joint_count
        seen = [False] * self.joint_count
        seen[self.root_joint] = True
        q = deque([self.root_joint])
        adj = self.neighbors()
        while q:
            u = q.popleft()
            for w in sorted(adj[u]):
                if not seen[w]:
                    seen[w] = True
                    parents[w] = u
                    q.append(w)
        return parents


@dataclass(frozen=True)
class PartitionedAdjacency:
    """Fixed, normalized distance partitions of a skeleton graph."""

    graph: SkeletonGraph
    mats: tuple[Array, ...]

    @property
    def joint_count(self) -> int:
        return self.graph.joint_count

    def full(self) -> Array:
        total = np.zeros_like(self.mats[0])
        for m in self.mats:
            total = total + m
        return total


def build_partitions(graph: SkeletonGraph) -> PartitionedAdjacency:
    """Distance-partition and symmetrically normalize the skeleton adjacency.

    Partition 0 holds self-connections (plus edges between equidistant
    joints); partition 1 holds entries pointing toward the root (centripetal);
    partition 2 holds entries pointing away from it (centrifugal).
    """
    dist = graph.hop_distances()
    if dist is None:
        raise TopologyError("skeleton graph is disconnected")
    v = graph.joint_count

    full = np.eye(v, dtype=np.float64)
    parts = [np.eye(v, dtype=np.float64), np.zeros((v, v)), np.zeros((v, v))]
    for a, b in graph.edges:
        full[a, b] = full[b, a] = 1.0
        for u, w in ((a, b), (b, a)):
            if dist[w] < dist[u]:
                parts[1][u, w] = 1.0
            elif dist[w] > dist[u]:
                parts[2][u, w] = 1.0
            else:
                parts[0][u, w] = 1.0

    dinv = 1.0 / np.sqrt(full.sum(axis=1))
    norm = dinv[:, None] * dinv[None, :]
    mats = tuple((p * norm).astype(np.float32) for p in parts)
    return PartitionedAdjacency(graph=graph, mats=mats)


@dataclass
class AdjacencyTernary:
    """Fixed + shared-learnable + private-learnable adjacency mixture."""

    base: PartitionedAdjacency
    inflected: list[Tensor]
    unique: list[Tensor]
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    mode: str = "learnable"
    base_tensors: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.base_tensors:
            self.base_tensors = [Tensor(m) for m in self.base.mats]


UNIQUE_INIT_SCALE = 1e-2


def init_ternary(
    base: PartitionedAdjacency, mode: str, seed: int | np.random.Generator
) -> AdjacencyTernary:
    """Start from the fixed topology: shared matrices copy the base partitions,
    private matrices start as small uniform noise, coefficients at 1.0."""
    if mode not in ("fixed", "learnable"):
        raise ValueError(f"unknown ternary mode '{mode}'")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = base.joint_count
    learn_coeffs = mode == "learnable"
    inflected = [Tensor(m.copy(), requires_grad=True) for m in base.mats]
    unique = [
        Tensor(
            rng.uniform(-UNIQUE_INIT_SCALE, UNIQUE_INIT_SCALE, size=(v, v)).astype(np.float32),
            requires_grad=True,
        )
        for _ in base.mats
    ]
    coeffs = [Tensor(np.float32(1.0), requires_grad=learn_coeffs) for _ in range(3)]
    return AdjacencyTernary(
        base=base,
        inflected=inflected,
        unique=unique,
        alpha=coeffs[0],
        beta=coeffs[1],
        gamma=coeffs[2],
        mode=mode,
    )


def effective_adjacency(t: AdjacencyTernary, s: int) -> Tensor:
    """alpha*A_s + beta*I_s + gamma*U_s as a tape-participating tensor."""
    if not 0 <= s < len(t.base.mats):
        raise IndexError(f"partition index {s} out of range")
    return mix_adjacency(
        t.base_tensors[s], t.inflected[s], t.unique[s], t.alpha, t.beta, t.gamma
    )


def mix_adjacency(
    base: Tensor,
    inflected: Tensor | None,
    unique: Tensor | None,
    alpha: Tensor | None,
    beta: Tensor | None,
    gamma: Tensor | None,
) -> Tensor:
    """Mixture used in the forward pass; missing pieces drop out of the sum.

    The server model carries no private matrix and no coefficients: absent
    coefficients count as 1, an absent private matrix contributes nothing.
    """
    out = base if alpha is None else smul(alpha, base)
    if inflected is not None:
        out = add(out, inflected if beta is None else smul(beta, inflected))
    if unique is not None:
        out = add(out, unique if gamma is None else smul(gamma, unique))
    return out


# ---------------------------------------------------------------------------
# Skeleton presets
# ---------------------------------------------------------------------------

# 25-joint skeleton matching the common motion-capture joint layout
# (spine base at index 0 as root).
NTU25_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 21), (7, 22),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 23), (11, 24),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)

# Compact 11-joint body used for desk-scale experiments:
# pelvis(0)-chest(1)-head(2), two arms off the chest, two legs off the pelvis.
MINI11_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 2),
    (1, 3), (3, 4),
    (1, 5), (5, 6),
    (0, 7), (7, 8),
    (0, 9), (9, 10),
)

SKELETON_PRESETS: dict[str, SkeletonGraph] = {
    "ntu25": SkeletonGraph(joint_count=25, edges=NTU25_EDGES, root_joint=0),
    "mini11": SkeletonGraph(joint_count=11, edges=MINI11_EDGES, root_joint=0),
}


def chain_graph(n: int, root: int = 0) -> SkeletonGraph:
    return SkeletonGraph(n, tuple((i, i + 1) for i in range(n - 1)), root)


def star_graph(n: int, center: int = 0) -> SkeletonGraph:
    return SkeletonGraph(n, tuple((center, i) for i in range(n) if i != center), center)
