"""Sub-tree decomposition of O-T-P trees with vote masks, and tensor materialization.

A node may vote (contribute to pooling) only when all of its descendants
within ``C`` levels are present in the same sub-tree, so its output after
``C`` tree-convolution layers equals the output on the full tree.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .otp import OtpNode, Vocab, iter_otp

if TYPE_CHECKING:
    from .predicate_embedding import EmbeddingModel

log = logging.getLogger(__name__)
_warned_bounds: set[tuple[int, int]] = set()


@dataclass(frozen=True)
class SamplerConfig:
    """``N`` max typed nodes per sub-tree (``None`` = whole tree), ``C`` conv layers, ``K`` sub-trees kept."""

    N: int | None = 15
    C: int = 3
    K: int = 5

    def __post_init__(self):
        if self.C < 1 or self.K < 1:
            raise ValueError("C and K must be >= 1")
        if self.N is not None:
            floor = 2 ** (self.C + 1) - 1
            if self.N < floor:
                raise ValueError(f"N={self.N} violates N >= 2^(C+1)-1 = {floor}")
            if self.N == floor and (self.N, self.C) not in _warned_bounds:
                _warned_bounds.add((self.N, self.C))
                log.warning("N=%d sits exactly at the 2^(C+1)-1 bound for C=%d", self.N, self.C)

    @property
    def full_tree(self) -> bool:
        return self.N is None


@dataclass(frozen=True)
class SubTreeSample:
    """Breadth-first node list plus tensor-slot child pointers.

    ``left_idx[i]`` / ``right_idx[i]`` are the tensor slots (node position + 1)
    of node ``i``'s children inside this sample, 0 when absent.
    """

    nodes: tuple[OtpNode, ...] = ()
    left_idx: tuple[int, ...] = ()
    right_idx: tuple[int, ...] = ()
    votes: tuple[int, ...] = ()

    def __len__(self):
        return len(self.nodes)

    @property
    def is_padding(self) -> bool:
        return not self.nodes


@dataclass(frozen=True)
class QuerySample:
    subtrees: tuple[SubTreeSample, ...]
    dropped_votes: int = 0
    total_votes: int = field(default=0)


def get_nodes(root: OtpNode, depth: int) -> list[OtpNode]:
    """Typed nodes down to ``depth`` (root is depth 0), breadth-first."""
    if depth < 0:
        return []
    out = [root]
    frontier = [root]
    for _ in range(depth):
        nxt = []
        for n in frontier:
            if n.left is not None:
                nxt.append(n.left)
            if n.right is not None:
                nxt.append(n.right)
        if not nxt:
            break
        out.extend(nxt)
        frontier = nxt
    return out


def _make_sample(nodes: list[OtpNode], votes: list[int]) -> SubTreeSample:
    slot = {id(n): i + 1 for i, n in enumerate(nodes)}
    left = tuple(slot.get(id(n.left), 0) if n.left is not None else 0 for n in nodes)
    right = tuple(slot.get(id(n.right), 0) if n.right is not None else 0 for n in nodes)
    return SubTreeSample(tuple(nodes), left, right, tuple(votes))


def whole_tree_sample(root: OtpNode) -> SubTreeSample:
    nodes = []
    q = deque([root])
    while q:
        n = q.popleft()
        nodes.append(n)
        if n.left is not None:
            q.append(n.left)
        if n.right is not None:
            q.append(n.right)
    return _make_sample(nodes, [1] * len(nodes))


def sample_subtrees(root: OtpNode, config: SamplerConfig) -> list[SubTreeSample]:
    """Greedy breadth-first decomposition into sub-trees of at most ``N`` typed nodes.

    For each queued root the sub-tree grows one level at a time. If level
    ``D`` would push it past ``N`` nodes, levels ``0..D-1`` are kept, nodes at
    depths ``0..D-C-1`` vote, and the nodes at depth ``D-C`` are queued as new
    roots. Otherwise the rest of the tree fits and every node votes.
    """
    if config.full_tree:
        return [whole_tree_sample(root)]
    n_max, c = config.N, config.C
    out: list[SubTreeSample] = []
    queue = deque([root])
    while queue:
        node = queue.popleft()
        levels = [[node]]
        kept = 1
        overflow = False
        while True:
            nxt = []
            for n in levels[-1]:
                if n.left is not None:
                    nxt.append(n.left)
                if n.right is not None:
                    nxt.append(n.right)
            if not nxt:
                break
            if kept + len(nxt) > n_max:
                overflow = True
                break
            levels.append(nxt)
            kept += len(nxt)
        nodes = [n for lvl in levels for n in lvl]
        if not overflow:
            out.append(_make_sample(nodes, [1] * len(nodes)))
            continue
        # levels holds depths 0..D-1 where D is the overflowing depth
        d = len(levels)
        eligible = sum(len(lvl) for lvl in levels[: d - c])
        out.append(_make_sample(nodes, [1] * eligible + [0] * (len(nodes) - eligible)))
        queue.extend(levels[d - c])
    return out


def select_top_k(samples: list[SubTreeSample], k: int) -> QuerySample:
    """First ``k`` samples in emission order, padded with empty samples."""
    if k < 1:
        raise ValueError("K must be >= 1")
    kept = list(samples[:k])
    total = sum(sum(s.votes) for s in samples)
    dropped = total - sum(sum(s.votes) for s in kept)
    if dropped:
        log.debug("top-%d truncation dropped %d of %d voting nodes", k, dropped, total)
    kept.extend(SubTreeSample() for _ in range(k - len(kept)))
    return QuerySample(tuple(kept), dropped, total)


def to_tensor(
    q: QuerySample,
    vocab: Vocab,
    embedder: "EmbeddingModel",
    n_slots: int,
    pred_vectors: dict[int, np.ndarray] | None = None,
    dtype=np.float64,
) -> dict[str, np.ndarray]:
    """Materialize a query sample as arrays with ``n_slots + 1`` rows per sub-tree.

    Row 0 of every sub-tree is the all-zero sentinel; node ``i`` sits in row
    ``i + 1``. ``pred_vectors`` maps ``id(pred_node)`` to its embedding.
    """
    from .otp import encode_node

    k = len(q.subtrees)
    f = vocab.feature_size(embedder.p_f)
    feats = np.zeros((k, n_slots + 1, f), dtype=dtype)
    left = np.zeros((k, n_slots + 1), dtype=np.int64)
    right = np.zeros((k, n_slots + 1), dtype=np.int64)
    votes = np.zeros((k, n_slots + 1), dtype=np.int8)
    pred_vectors = pred_vectors or {}
    for j, s in enumerate(q.subtrees):
        if len(s) > n_slots:
            raise ValueError(f"sub-tree has {len(s)} nodes, tensor holds {n_slots}")
        for i, node in enumerate(s.nodes):
            feats[j, i + 1] = encode_node(node, vocab, embedder, pred_vectors.get(id(node)))
        m = len(s)
        left[j, 1 : m + 1] = s.left_idx
        right[j, 1 : m + 1] = s.right_idx
        votes[j, 1 : m + 1] = s.votes
    return {"features": feats, "left": left, "right": right, "votes": votes}


def count_typed(root: OtpNode) -> int:
    return sum(1 for _ in iter_otp(root))
