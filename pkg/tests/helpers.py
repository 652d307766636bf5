"""Tree builders and independent reference implementations shared by the tests."""

from __future__ import annotations

import numpy as np

from prestroid_kit.otp import OPR, OtpNode
from prestroid_kit.plan_ir import PlanNode


def chain_plan(n: int) -> PlanNode:
    node = PlanNode("TableScan", table="T")
    for _ in range(n - 1):
        node = PlanNode("Filter", children=(node,))
    return node


def complete_plan(depth: int) -> PlanNode:
    if depth == 0:
        return PlanNode("TableScan", table="T")
    return PlanNode("InnerJoin", children=(complete_plan(depth - 1), complete_plan(depth - 1)))


def random_plan(rng: np.random.Generator, size: int) -> PlanNode:
    """Random plan with exactly ``size`` nodes; unary nodes are filters, binary ones joins."""
    if size == 1:
        return PlanNode("TableScan", table=f"t{int(rng.integers(5))}")
    if size >= 3 and rng.random() < 0.4:
        left = int(rng.integers(1, size - 1))
        return PlanNode("InnerJoin", children=(random_plan(rng, left), random_plan(rng, size - 1 - left)))
    return PlanNode("Filter", children=(random_plan(rng, size - 1),))


def random_otp(rng: np.random.Generator, size: int, label: str = "op") -> OtpNode:
    """Random binary OPR tree with exactly ``size`` typed nodes (built iteratively)."""
    # grow by attaching new leaves to random free child slots
    root = OtpNode(OPR, label)
    free = [(root, "left"), (root, "right")]
    for _ in range(size - 1):
        i = int(rng.integers(len(free)))
        parent, side = free.pop(i)
        child = OtpNode(OPR, label)
        setattr(parent, side, child)
        free.extend([(child, "left"), (child, "right")])
    return root


def recursive_tree_conv(root: OtpNode, x: dict[int, np.ndarray], layers) -> dict[int, np.ndarray]:
    """Reference tree convolution on the whole tree, one node at a time.

    ``x`` maps ``id(node)`` to its input row; ``layers`` is a list of
    ``(Wt, Wl, Wr, b)`` tuples with ReLU between layers. Returns the last
    layer's output per node id.
    """
    nodes = []
    stack = [root]
    while stack:
        n = stack.pop()
        nodes.append(n)
        for c in (n.left, n.right):
            if c is not None:
                stack.append(c)
    h = dict(x)
    for wt, wl, wr, b in layers:
        zero = np.zeros(wt.shape[1])
        nxt = {}
        for n in nodes:
            xl = h[id(n.left)] if n.left is not None else zero
            xr = h[id(n.right)] if n.right is not None else zero
            nxt[id(n)] = np.maximum(wt @ h[id(n)] + wl @ xl + wr @ xr + b, 0.0)
        h = nxt
    return h


def descendants_within(node: OtpNode, depth: int) -> list[OtpNode]:
    out = []
    frontier = [node]
    for _ in range(depth):
        frontier = [c for n in frontier for c in (n.left, n.right) if c is not None]
        out.extend(frontier)
    return out


def random_conv_layers(rng: np.random.Generator, widths: list[int]):
    return [
        tuple(rng.normal(scale=0.5, size=(o, i)) for _ in range(3)) + (rng.normal(scale=0.1, size=o),)
        for i, o in zip(widths[:-1], widths[1:])
    ]


def subtree_vs_full_max_diff(rng: np.random.Generator, size: int, n_max: int, c: int, width: int = 4) -> float:
    """Largest gap between sub-tree and whole-tree conv outputs over all voting nodes.

    The sub-tree side runs the library layer on each sample's slot matrix;
    the whole-tree side is the node-by-node reference above.
    """
    from prestroid_kit.sampler import SamplerConfig, sample_subtrees
    from prestroid_kit.tree_cnn import tree_conv_layer
    from prestroid_kit.otp import iter_otp

    root = random_otp(rng, size)
    x = {id(n): rng.normal(size=width) for n in iter_otp(root)}
    layers = random_conv_layers(rng, [width] * (c + 1))
    full = recursive_tree_conv(root, x, layers)
    worst = 0.0
    for s in sample_subtrees(root, SamplerConfig(N=n_max, C=c)):
        h = np.zeros((len(s) + 1, width))
        for i, node in enumerate(s.nodes):
            h[i + 1] = x[id(node)]
        left = np.array((0,) + s.left_idx)
        right = np.array((0,) + s.right_idx)
        for wt, wl, wr, b in layers:
            h = tree_conv_layer(h, left, right, wt, wl, wr, b, "relu")
        for i, (node, v) in enumerate(zip(s.nodes, s.votes)):
            if v:
                worst = max(worst, float(np.abs(h[i + 1] - full[id(node)]).max()))
    return worst


def tiny_batch(rng: np.random.Generator, b: int = 4, k: int = 2, s: int = 8, f: int = 5):
    """Random heap-shaped sub-trees in slot layout with random votes and targets."""
    from prestroid_kit.tree_cnn import Batch

    feats = rng.normal(size=(b, k, s, f))
    left = np.zeros((b, k, s), dtype=np.int64)
    right = np.zeros((b, k, s), dtype=np.int64)
    votes = np.zeros((b, k, s), dtype=np.int8)
    for i in range(b):
        for j in range(k):
            m = int(rng.integers(1, s))
            feats[i, j, m + 1 :] = 0.0
            for slot in range(1, m + 1):
                if 2 * slot <= m:
                    left[i, j, slot] = 2 * slot
                if 2 * slot + 1 <= m:
                    right[i, j, slot] = 2 * slot + 1
            votes[i, j, 1 : m + 1] = rng.random(m) < 0.7
    feats[:, :, 0] = 0.0
    return Batch(feats, left, right, votes, rng.random(b))


def gradient_check(seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of analytic gradients against central differences.

    Tiny float64 model, dropout off, batch norm on but frozen at random
    running statistics so every parameter is exercised.
    """
    from prestroid_kit.tree_cnn import ArchConfig, ModelParams, loss_and_grads

    rng = np.random.default_rng(seed)
    batch = tiny_batch(rng)
    arch = ArchConfig(conv_channels=(2, 2, 2), dense_units=(2, 2), dropout_rate=0.0)
    p = ModelParams.init(arch, batch.features.shape[-1], batch.features.shape[1], seed=seed, dtype=np.float64)
    for name in p.weights:
        p.weights[name] = p.weights[name] + rng.normal(scale=0.3, size=p.weights[name].shape)
    for name, a in p.state.items():
        if name.endswith(".var"):
            p.state[name] = np.abs(rng.normal(size=a.shape)) + 0.5
        elif name.endswith(".mean"):
            p.state[name] = rng.normal(size=a.shape)

    def loss():
        return loss_and_grads(p, batch, train=False, bn_mode="frozen")[0]

    _, grads = loss_and_grads(p, batch, train=False, bn_mode="frozen")
    worst = 0.0
    for name, a in p.weights.items():
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = loss()
            a[idx] = old - h
            down = loss()
            a[idx] = old
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def forced_cooccurrence_corpus():
    """``a`` and ``b`` always share a window; ``z`` lives in sentences that never contain ``a``.

    ``rare`` appears 9 times, one short of the default minimum count.
    """
    from prestroid_kit.predicate_embedding import TokenCorpus

    rng = np.random.default_rng(0)
    left = [f"p{i}" for i in range(6)]
    right = [f"q{i}" for i in range(6)]
    sents = []
    for _ in range(300):
        s = [str(t) for t in rng.choice(left, 4)]
        s.insert(int(rng.integers(0, 5)), "a")
        s.insert(s.index("a") + 1, "b")
        sents.append(s)
        sents.append(["z"] + [str(t) for t in rng.choice(right, 5)])
    sents.append(["rare"] * 9)
    return TokenCorpus.from_sentences(sents)
