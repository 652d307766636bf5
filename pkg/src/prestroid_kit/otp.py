"""Operator-Table-Predicate recast of logical plans and per-node feature vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator

import numpy as np

from .plan_ir import PlanNode, PredicateExpr, Workload, iter_plan_nodes

if TYPE_CHECKING:
    from .predicate_embedding import EmbeddingModel

OPR = "OPR"
PRED = "PRED"
TBL = "TBL"
UNK_TABLE = "<unk>"


class OtpNode:
    """Typed node of the recast binary tree. ``None`` children stand for the empty sentinel."""

    __slots__ = ("kind", "label", "left", "right", "predicate")

    def __init__(
        self,
        kind: str,
        label: str,
        left: "OtpNode | None" = None,
        right: "OtpNode | None" = None,
        predicate: PredicateExpr | None = None,
    ):
        if kind not in (OPR, PRED, TBL):
            raise ValueError(f"unknown node kind {kind!r}")
        if kind != OPR and (left is not None or right is not None):
            raise ValueError(f"{kind} nodes are leaves")
        if (predicate is not None) != (kind == PRED):
            raise ValueError("exactly the PRED nodes carry a predicate")
        self.kind = kind
        self.label = label
        self.left = left
        self.right = right
        self.predicate = predicate

    def __repr__(self):
        return f"OtpNode({self.kind}, {self.label!r})"

    def __eq__(self, other):
        if not isinstance(other, OtpNode):
            return NotImplemented
        stack = [(self, other)]
        while stack:
            a, b = stack.pop()
            if a is None or b is None:
                if a is not b:
                    return False
                continue
            if (a.kind, a.label, a.predicate) != (b.kind, b.label, b.predicate):
                return False
            stack.append((a.left, b.left))
            stack.append((a.right, b.right))
        return True

    __hash__ = None


def iter_otp(root: OtpNode) -> Iterator[OtpNode]:
    """Typed nodes in pre-order (root, left subtree, right subtree)."""
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if node.right is not None:
            stack.append(node.right)
        if node.left is not None:
            stack.append(node.left)


@dataclass(eq=False)
class OtpTree:
    root: OtpNode
    typed_node_count: int

    def __eq__(self, other):
        return (
            isinstance(other, OtpTree)
            and self.typed_node_count == other.typed_node_count
            and self.root == other.root
        )

    def pred_nodes(self) -> list[OtpNode]:
        return [n for n in iter_otp(self.root) if n.kind == PRED]


def build_otp_tree(root: PlanNode) -> OtpTree:
    """Recast a binarized plan into the O-T-P binary tree.

    * leaf scan: OPR(op) with left=TBL(table); right=PRED if the scan carries
      a predicate, else empty
    * join: OPR(op) over both recast children
    * other nodes: OPR(op), left = recast child (or empty), right = PRED or empty
    """
    built: dict[int, OtpNode] = {}
    count = 0
    # post-order without recursion
    stack: list[tuple[PlanNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if not expanded:
            if len(node.children) > 2:
                raise ValueError(f"node {node.op_name!r} has {len(node.children)} children; binarize first")
            stack.append((node, True))
            stack.extend((c, False) for c in reversed(node.children))
            continue
        kids = [built.pop(id(c)) for c in node.children]
        binary = node.is_join or len(kids) == 2
        if node.is_join and len(kids) != 2:
            raise ValueError(f"join {node.op_name!r} needs two children, has {len(kids)}")
        pred = None
        # join conditions have no slot in the recast tree
        if node.predicate is not None and not binary:
            pred = OtpNode(PRED, "pred", predicate=node.predicate)
            count += 1
        if binary:
            count += 1
            built[id(node)] = OtpNode(OPR, node.op_name, kids[0], kids[1])
        elif not kids:
            if node.table is None:
                raise ValueError(f"leaf {node.op_name!r} has no table")
            count += 2
            built[id(node)] = OtpNode(OPR, node.op_name, OtpNode(TBL, node.table), pred)
        else:
            count += 1
            built[id(node)] = OtpNode(OPR, node.op_name, kids[0], pred)
    return OtpTree(built[id(root)], count)


def full_binary_otp(depth: int, label: str = "op") -> OtpNode:
    """Complete binary tree of OPR nodes (test and benchmark helper)."""
    level = [OtpNode(OPR, label) for _ in range(2**depth)]
    for _ in range(depth):
        level = [OtpNode(OPR, label, level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def chain_otp(n: int, label: str = "op") -> OtpNode:
    """Left-deep chain of ``n`` OPR nodes."""
    node = OtpNode(OPR, label)
    for _ in range(n - 1):
        node = OtpNode(OPR, label, node, None)
    return node


# ---------------------------------------------------------------------------
# Vocabulary and node features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    operators: tuple[str, ...]
    tables: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.operators)) != len(self.operators) or len(set(self.tables)) != len(self.tables):
            raise ValueError("vocabulary entries must be unique")
        object.__setattr__(self, "_op_index", {o: i for i, o in enumerate(self.operators)})
        object.__setattr__(self, "_tbl_index", {t: i for i, t in enumerate(self.tables)})

    @property
    def unk_table_index(self) -> int:
        return len(self.tables)

    @property
    def table_slots(self) -> int:
        return len(self.tables) + 1

    def feature_size(self, p_f: int) -> int:
        return len(self.operators) + p_f + self.table_slots

    def op_index(self, op: str) -> int:
        try:
            return self._op_index[op]
        except KeyError:
            raise KeyError(f"operator {op!r} not in vocabulary") from None

    def table_index(self, table: str) -> int:
        return self._tbl_index.get(table, self.unk_table_index)


def build_vocabularies(workload: Workload) -> Vocab:
    if len(workload) == 0:
        raise ValueError("cannot build vocabularies from an empty workload")
    ops: set[str] = set()
    tables: set[str] = set()
    for trace in workload:
        for node in iter_plan_nodes(trace.root):
            ops.add(node.op_name)
            if node.table is not None:
                tables.add(node.table)
    return Vocab(tuple(sorted(ops)), tuple(sorted(tables)))


def encode_node(
    node: OtpNode | None,
    vocab: Vocab,
    embedder: "EmbeddingModel",
    pred_vector: np.ndarray | None = None,
) -> np.ndarray:
    """Feature row laid out as [operator one-hot | predicate embedding | table one-hot].

    ``pred_vector`` overrides the embedding of a PRED node; the tree-level
    encoder passes it so that out-of-vocabulary fallbacks can use the rest of
    the query as context.
    """
    from .predicate_embedding import encode_predicate

    n_ops = len(vocab.operators)
    p_f = embedder.p_f
    out = np.zeros(vocab.feature_size(p_f))
    if node is None:
        return out
    if node.kind == OPR:
        out[vocab.op_index(node.label)] = 1.0
    elif node.kind == TBL:
        out[n_ops + p_f + vocab.table_index(node.label)] = 1.0
    else:
        vec = pred_vector if pred_vector is not None else encode_predicate(node.predicate, embedder)
        out[n_ops : n_ops + p_f] = vec
    return out
