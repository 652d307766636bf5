"""Skip-gram token embeddings for predicates and pooled predicate encodings.

Predicates are reduced to their column names and comparison operators
(literal values and AND/OR labels are dropped) and one token sentence is
built per query. A clause encodes to the mean of its known token vectors;
AND pools its children with an element-wise min and OR with a max.

Clauses whose tokens are all unknown fall back, in order, to: the mean of
the query's other fully-known predicate encodings, the mean of every known
token in the query, and finally the global mean predicate encoding recorded
at training time.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .otp import PRED, OtpNode, OtpTree, build_otp_tree, iter_otp
from .plan_ir import Clause, Conjunction, PredicateExpr, Workload, iter_clauses


def tokenize_clause(c: Clause) -> list[str]:
    toks = [t.lower() for t in c.column_tokens]
    if c.comparison_op:
        toks.append(c.comparison_op.lower())
    return toks


def tokenize_predicate(p: PredicateExpr) -> list[str]:
    out: list[str] = []
    for c in iter_clauses(p):
        out.extend(tokenize_clause(c))
    return out


@dataclass
class TokenCorpus:
    sentences: list[list[str]]
    token_counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]]) -> "TokenCorpus":
        sents = [list(s) for s in sentences]
        counts: Counter = Counter()
        for s in sents:
            counts.update(s)
        return cls(sents, counts)


def tree_sentence(tree: OtpTree) -> list[str]:
    out: list[str] = []
    for node in tree.pred_nodes():
        out.extend(tokenize_predicate(node.predicate))
    return out


def build_corpus(workload: Workload) -> TokenCorpus:
    """One sentence per query: predicate tokens of its PRED nodes in pre-order."""
    return TokenCorpus.from_sentences(tree_sentence(build_otp_tree(t.root)) for t in workload)


# ---------------------------------------------------------------------------
# Skip-gram with negative sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class W2VHyper:
    negative: int = 5
    ns_exponent: float = 0.75
    epochs: int = 5
    alpha: float = 0.025
    min_alpha: float = 0.0001
    batch_size: int = 32
    reduced_windows: bool = True
    algorithm: str = "skipgram-ns"


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    p_f: int
    tokens: tuple[str, ...]
    vectors: np.ndarray  # (len(tokens), p_f)
    window: int = 5
    min_count: int = 10
    hyper: W2VHyper = W2VHyper()
    global_fallback: np.ndarray | None = None

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.shape != (len(self.tokens), self.p_f):
            raise ValueError(f"vectors shape {vecs.shape} != ({len(self.tokens)}, {self.p_f})")
        object.__setattr__(self, "vectors", vecs)
        fb = self.global_fallback
        fb = np.zeros(self.p_f) if fb is None else np.asarray(fb, dtype=np.float64)
        if fb.shape != (self.p_f,):
            raise ValueError("global_fallback must have length p_f")
        object.__setattr__(self, "global_fallback", fb)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __len__(self):
        return len(self.tokens)

    def vector(self, token: str) -> np.ndarray | None:
        i = self._index.get(token)
        return None if i is None else self.vectors[i]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        return (
            self.p_f == other.p_f
            and self.tokens == other.tokens
            and self.window == other.window
            and self.min_count == other.min_count
            and self.hyper == other.hyper
            and np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.global_fallback, other.global_fallback)
        )

    def cosine(self, a: str, b: str) -> float:
        va, vb = self.vector(a), self.vector(b)
        if va is None or vb is None:
            raise KeyError("both tokens must be in the vocabulary")
        return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))

    def export_text(self, path) -> None:
        """Write ``token<TAB>v1 v2 ... vPf`` lines."""
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for tok, vec in zip(self.tokens, self.vectors):
                fh.write(tok + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


def _training_pairs(sents: list[np.ndarray], window: int, rng, reduced: bool) -> np.ndarray:
    centers, contexts = [], []
    for s in sents:
        n = len(s)
        if n < 2:
            continue
        spans = window - rng.integers(0, window, n) if reduced else np.full(n, window)
        for i in range(n):
            lo, hi = max(0, i - spans[i]), min(n, i + spans[i] + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(s[i])
                    contexts.append(s[j])
    return np.array([centers, contexts], dtype=np.int64).reshape(2, -1)


def train_word2vec(
    corpus: TokenCorpus,
    p_f: int,
    window: int = 5,
    min_count: int = 10,
    hyper: W2VHyper | None = None,
    seed: int = 0,
) -> EmbeddingModel:
    """Skip-gram with negative sampling, trained by mini-batch SGD with linear rate decay.

    Tokens seen fewer than ``min_count`` times are dropped before windowing.
    The result is a pure function of the arguments.
    """
    hyper = hyper or W2VHyper()
    if p_f <= 0 or window <= 0:
        raise ValueError("p_f and window must be positive")
    kept = [(t, c) for t, c in corpus.token_counts.items() if c >= min_count]
    if not kept:
        raise ValueError(f"no token reaches min_count={min_count}")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = tuple(t for t, _ in kept)
    index = {t: i for i, t in enumerate(tokens)}
    counts = np.array([c for _, c in kept], dtype=np.float64)
    sents = [np.array([index[t] for t in s if t in index], dtype=np.int64) for s in corpus.sentences]

    rng = np.random.default_rng(seed)
    v = len(tokens)
    w_in = (rng.random((v, p_f)) - 0.5) / p_f
    w_out = np.zeros((v, p_f))
    noise = counts**hyper.ns_exponent
    noise_cdf = np.cumsum(noise / noise.sum())
    noise_cdf[-1] = 1.0

    epoch_pairs = [_training_pairs(sents, window, rng, hyper.reduced_windows) for _ in range(hyper.epochs)]
    total = sum(p.shape[1] for p in epoch_pairs)
    done = 0
    bs = hyper.batch_size
    k = hyper.negative
    for pairs in epoch_pairs:
        for start in range(0, pairs.shape[1], bs):
            c_idx = pairs[0, start : start + bs]
            o_idx = pairs[1, start : start + bs]
            b = len(c_idx)
            lr = max(hyper.alpha - (hyper.alpha - hyper.min_alpha) * done / total, hyper.min_alpha)
            done += b
            neg = np.searchsorted(noise_cdf, rng.random((b, k)), side="right")
            targets = np.concatenate([o_idx[:, None], neg], axis=1)  # (b, 1+k)
            labels = np.zeros((b, 1 + k))
            labels[:, 0] = 1.0
            u = w_in[c_idx]  # (b, p)
            t_vecs = w_out[targets]  # (b, 1+k, p)
            scores = np.einsum("bp,bkp->bk", u, t_vecs)
            g = lr * (labels - 1.0 / (1.0 + np.exp(-scores)))
            grad_u = np.einsum("bk,bkp->bp", g, t_vecs)
            grad_t = g[:, :, None] * u[:, None, :]
            np.add.at(w_out, targets.ravel(), grad_t.reshape(-1, p_f))
            np.add.at(w_in, c_idx, grad_u)
    return EmbeddingModel(p_f, tokens, w_in, window, min_count, hyper)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def _clause_vector(c: Clause, model: EmbeddingModel) -> np.ndarray | None:
    vecs = [model.vector(t) for t in tokenize_clause(c)]
    vecs = [x for x in vecs if x is not None]
    if not vecs:
        return None
    return np.mean(vecs, axis=0)


def encode_predicate(
    p: PredicateExpr, model: EmbeddingModel, fallback: np.ndarray | None = None
) -> np.ndarray:
    """Encode a predicate tree; clauses with no known token use ``fallback``.

    Without an explicit ``fallback`` the model's global fallback is used.
    """
    if fallback is None:
        fallback = model.global_fallback
    # post-order over the expression tree
    results: dict[int, np.ndarray] = {}
    stack: list[tuple[PredicateExpr, bool]] = [(p, False)]
    while stack:
        node, expanded = stack.pop()
        if isinstance(node, Clause):
            vec = _clause_vector(node, model)
            results[id(node)] = fallback if vec is None else vec
        elif not expanded:
            stack.append((node, True))
            stack.extend((c, False) for c in node.children)
        else:
            kids = np.stack([results[id(c)] for c in node.children])
            results[id(node)] = kids.min(axis=0) if node.kind == "AND" else kids.max(axis=0)
    return np.array(results[id(p)], dtype=np.float64)


def encode_oov(
    query_context: Sequence[np.ndarray], known_tokens: Sequence[str], model: EmbeddingModel
) -> np.ndarray:
    if len(query_context):
        return np.mean(np.stack(query_context), axis=0)
    vecs = [model.vector(t) for t in known_tokens]
    vecs = [x for x in vecs if x is not None]
    if vecs:
        return np.mean(vecs, axis=0)
    return model.global_fallback.copy()


def encode_query_predicates(
    preds: Sequence[PredicateExpr], model: EmbeddingModel
) -> list[np.ndarray]:
    """Encode all predicates of one query, resolving unknown clauses with query context.

    Fully-known predicates encode directly and form the first fallback tier.
    Partially-known ones fill their unknown clauses from the token-level
    tiers. Predicates with no known token take :func:`encode_oov`.
    """
    token_lists = [tokenize_predicate(p) for p in preds]
    known_tokens = [t for toks in token_lists for t in toks if t in model]
    token_tier = encode_oov([], known_tokens, model)
    out: list[np.ndarray | None] = [None] * len(preds)
    full_known: list[np.ndarray] = []
    unknown: list[int] = []
    for i, p in enumerate(preds):
        clause_known = [any(t in model for t in tokenize_clause(c)) for c in iter_clauses(p)]
        if all(clause_known):
            out[i] = encode_predicate(p, model)
            full_known.append(out[i])
        elif any(clause_known):
            out[i] = encode_predicate(p, model, fallback=token_tier)
        else:
            unknown.append(i)
    for i in unknown:
        out[i] = encode_oov(full_known, known_tokens, model)
    return out  # type: ignore[return-value]


def encode_tree_predicates(tree: OtpTree | OtpNode, model: EmbeddingModel) -> dict[int, np.ndarray]:
    """Map ``id(pred_node)`` to its encoding for every PRED node of a tree."""
    root = tree.root if isinstance(tree, OtpTree) else tree
    nodes = [n for n in iter_otp(root) if n.kind == PRED]
    vecs = encode_query_predicates([n.predicate for n in nodes], model)
    return {id(n): v for n, v in zip(nodes, vecs)}


def finalize_embedding(model: EmbeddingModel, trees: Iterable[OtpTree]) -> EmbeddingModel:
    """Set the global fallback to the mean encoding of training PRED nodes with a known token."""
    encs = []
    for tree in trees:
        preds = [n.predicate for n in tree.pred_nodes()]
        for p, vec in zip(preds, encode_query_predicates(preds, model)):
            if any(t in model for t in tokenize_predicate(p)):
                encs.append(vec)
    fb = np.mean(encs, axis=0) if encs else np.zeros(model.p_f)
    return dataclasses.replace(model, global_fallback=fb)
