"""Logical plan data model, JSON Lines ingestion and a seeded synthetic workload generator.

Workload files hold one query per line::

    {"query_id": "q1", "total_cpu_min": 2.5,
     "root": {"op": "Filter", "predicate": {"clause": "t1.c0 > 3"},
              "children": [{"op": "TableScan", "table": "t1", "children": []}]}}

A predicate is ``{"and": [...]}``, ``{"or": [...]}`` or ``{"clause": "<text>"}``.
A bare string is also accepted and parsed with the clause grammar in
:func:`parse_predicate_text`.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

MIN_CPU_MIN = 1.0
MAX_CPU_MIN = 60.0


class WorkloadFormatError(ValueError):
    """A workload record violates the ingestion schema."""

    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        self.line = line
        self.field_name = field_name
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Clause:
    raw_text: str
    column_tokens: tuple[str, ...]
    comparison_op: str
    value_text: str


@dataclass(frozen=True)
class Conjunction:
    kind: str  # "AND" | "OR"
    children: tuple["PredicateExpr", ...]

    def __post_init__(self):
        if self.kind not in ("AND", "OR"):
            raise ValueError(f"conjunction kind must be AND or OR, got {self.kind!r}")
        if not self.children:
            raise ValueError("conjunction needs at least one child")


PredicateExpr = Union[Clause, Conjunction]

_COMPARISONS = (
    r"not\s+like|like|not\s+in|in|is\s+not|is|between|<=|>=|<>|!=|=|<|>"
)
_CLAUSE_RE = re.compile(
    r"^\s*(?P<col>[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*)\s*"
    r"(?P<op>" + _COMPARISONS + r")(?![\w=<>])\s*(?P<val>.*?)\s*$",
    re.IGNORECASE | re.DOTALL,
)
_NUMERIC_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _fallback_tokens(text: str) -> tuple[str, ...]:
    out = []
    for tok in text.split():
        if tok[:1] in ("'", '"') or _NUMERIC_RE.match(tok):
            continue
        out.append(tok.lower())
    return tuple(out)


def parse_clause(text: str) -> Clause:
    """Parse ``column(.column)* OP value``; anything else keeps its non-literal words."""
    m = _CLAUSE_RE.match(text)
    if m is None:
        return Clause(text, _fallback_tokens(text), "", "")
    op = " ".join(m.group("op").lower().split())
    return Clause(text, (m.group("col").lower(),), op, m.group("val"))


_LEX_RE = re.compile(r"\s*(?:(?P<paren>[()])|(?P<quoted>'(?:[^']|'')*'|\"[^\"]*\")|(?P<word>[^\s()'\"]+))")


def _lex(text: str) -> list[tuple[str, str, int, int]]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _LEX_RE.match(text, pos)
        if m is None or m.end() == pos:
            break
        kind = m.lastgroup
        toks.append((kind, m.group(kind), m.start(kind), m.end(kind)))
        pos = m.end()
    return toks


class _PredicateParser:
    """or := and (OR and)* ; and := atom (AND atom)* ; atom := '(' or ')' | clause."""

    def __init__(self, text: str):
        self.text = text
        self.toks = _lex(text)
        self.i = 0

    def _peek_word(self) -> str | None:
        if self.i < len(self.toks) and self.toks[self.i][0] == "word":
            return self.toks[self.i][1].lower()
        return None

    def parse(self) -> PredicateExpr:
        expr = self._or()
        if self.i != len(self.toks):
            # trailing junk: keep the whole text as one opaque clause
            return parse_clause(self.text.strip())
        return expr

    def _chain(self, word: str, sub) -> PredicateExpr:
        items = [sub()]
        while self._peek_word() == word:
            self.i += 1
            items.append(sub())
        if len(items) == 1:
            return items[0]
        return Conjunction(word.upper(), tuple(items))

    def _or(self) -> PredicateExpr:
        return self._chain("or", self._and)

    def _and(self) -> PredicateExpr:
        return self._chain("and", self._atom)

    def _atom(self) -> PredicateExpr:
        if self.i < len(self.toks) and self.toks[self.i][1] == "(":
            save = self.i
            self.i += 1
            inner = self._or()
            if self.i < len(self.toks) and self.toks[self.i][1] == ")":
                self.i += 1
                return inner
            self.i = save
        start = self.toks[self.i][2] if self.i < len(self.toks) else len(self.text)
        end = start
        depth = 0
        pending_between = False
        while self.i < len(self.toks):
            kind, val, s, e = self.toks[self.i]
            low = val.lower()
            if depth == 0 and kind == "word" and low in ("and", "or"):
                if low == "and" and pending_between:
                    pending_between = False
                else:
                    break
            if kind == "paren":
                if val == "(":
                    depth += 1
                elif depth == 0:
                    break
                else:
                    depth -= 1
            if kind == "word" and low == "between":
                pending_between = True
            end = e
            self.i += 1
        return parse_clause(self.text[start:end])


def parse_predicate_text(text: str) -> PredicateExpr:
    """Parse a textual predicate; AND binds tighter than OR, parentheses group."""
    return _PredicateParser(text).parse()


def predicate_to_json(p: PredicateExpr):
    if isinstance(p, Clause):
        return {"clause": p.raw_text}
    return {p.kind.lower(): [predicate_to_json(c) for c in p.children]}


def predicate_from_json(obj, line: int | None = None) -> PredicateExpr:
    if isinstance(obj, str):
        return parse_predicate_text(obj)
    if not isinstance(obj, dict) or len(obj) != 1:
        raise WorkloadFormatError("predicate must be an object with one key", line, "predicate")
    (key, val), = obj.items()
    if key == "clause":
        if not isinstance(val, str):
            raise WorkloadFormatError("clause must be a string", line, "predicate.clause")
        return parse_clause(val)
    if key in ("and", "or"):
        if not isinstance(val, list) or not val:
            raise WorkloadFormatError(f"{key} needs a nonempty list", line, f"predicate.{key}")
        return Conjunction(key.upper(), tuple(predicate_from_json(v, line) for v in val))
    raise WorkloadFormatError(f"unknown predicate key {key!r}", line, "predicate")


def iter_clauses(p: PredicateExpr) -> Iterator[Clause]:
    """Clauses of ``p`` in left-to-right order."""
    stack = [p]
    while stack:
        node = stack.pop()
        if isinstance(node, Clause):
            yield node
        else:
            stack.extend(reversed(node.children))


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanNode:
    op_name: str
    table: str | None = None
    predicate: PredicateExpr | None = None
    children: tuple["PlanNode", ...] = ()

    def __post_init__(self):
        if self.table is not None and self.children:
            raise ValueError(f"node {self.op_name!r} has a table and children")

    @property
    def is_join(self) -> bool:
        return is_join_op(self.op_name)


def is_join_op(op_name: str) -> bool:
    return "join" in op_name.lower()


@dataclass(frozen=True)
class QueryTrace:
    query_id: str
    root: PlanNode
    total_cpu_min: float

    def __post_init__(self):
        if not (math.isfinite(self.total_cpu_min) and self.total_cpu_min > 0):
            raise ValueError(f"total_cpu_min must be finite and positive, got {self.total_cpu_min}")


@dataclass(frozen=True)
class Workload:
    traces: tuple[QueryTrace, ...] = ()
    source_tag: str = ""

    def __post_init__(self):
        seen = set()
        for t in self.traces:
            if t.query_id in seen:
                raise ValueError(f"duplicate query_id {t.query_id!r}")
            seen.add(t.query_id)

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)


@dataclass(frozen=True)
class PlanStats:
    node_count: int
    max_depth: int


def iter_plan_nodes(root: PlanNode) -> Iterator[PlanNode]:
    """Pre-order, left to right."""
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def plan_stats(root: PlanNode) -> PlanStats:
    count = 0
    deepest = 0
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        count += 1
        deepest = max(deepest, d)
        stack.extend((c, d + 1) for c in node.children)
    return PlanStats(count, deepest)


def plan_tables(root: PlanNode) -> set[str]:
    return {n.table for n in iter_plan_nodes(root) if n.table is not None}


def workload_tables(workload: Workload) -> set[str]:
    out: set[str] = set()
    for t in workload:
        out |= plan_tables(t.root)
    return out


def binarize(node: PlanNode) -> PlanNode:
    """Fold nodes with more than two children left-deep under copies of their operator."""
    kids = tuple(binarize(c) for c in node.children)
    if len(kids) <= 2:
        return PlanNode(node.op_name, node.table, node.predicate, kids)
    acc = PlanNode(node.op_name, None, None, kids[:2])
    for extra in kids[2:-1]:
        acc = PlanNode(node.op_name, None, None, (acc, extra))
    return PlanNode(node.op_name, None, node.predicate, (acc, kids[-1]))


# ---------------------------------------------------------------------------
# JSON Lines ingestion
# ---------------------------------------------------------------------------


def _node_from_json(obj, line: int, path: str = "root") -> PlanNode:
    if not isinstance(obj, dict):
        raise WorkloadFormatError("plan node must be an object", line, path)
    op = obj.get("op")
    if not isinstance(op, str) or not op:
        raise WorkloadFormatError("missing or empty 'op'", line, f"{path}.op")
    table = obj.get("table")
    if table is not None and not isinstance(table, str):
        raise WorkloadFormatError("table must be a string", line, f"{path}.table")
    pred = obj.get("predicate")
    predicate = predicate_from_json(pred, line) if pred is not None else None
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise WorkloadFormatError("children must be a list", line, f"{path}.children")
    if table is not None and children:
        raise WorkloadFormatError("a node with a table must not have children", line, path)
    unknown = set(obj) - {"op", "table", "predicate", "children"}
    if unknown:
        raise WorkloadFormatError(f"unknown keys {sorted(unknown)}", line, path)
    kids = tuple(
        _node_from_json(c, line, f"{path}.children[{i}]") for i, c in enumerate(children)
    )
    return PlanNode(op, table, predicate, kids)


def node_to_json(node: PlanNode) -> dict:
    out: dict = {"op": node.op_name}
    if node.table is not None:
        out["table"] = node.table
    if node.predicate is not None:
        out["predicate"] = predicate_to_json(node.predicate)
    out["children"] = [node_to_json(c) for c in node.children]
    return out


def trace_from_json(obj, line: int | None = None) -> QueryTrace:
    if not isinstance(obj, dict):
        raise WorkloadFormatError("record must be a JSON object", line)
    for key in ("query_id", "total_cpu_min", "root"):
        if key not in obj:
            raise WorkloadFormatError("missing required field", line, key)
    unknown = set(obj) - {"query_id", "total_cpu_min", "root"}
    if unknown:
        raise WorkloadFormatError(f"unknown keys {sorted(unknown)}", line)
    qid = obj["query_id"]
    if not isinstance(qid, str) or not qid:
        raise WorkloadFormatError("query_id must be a nonempty string", line, "query_id")
    cost = obj["total_cpu_min"]
    if isinstance(cost, bool) or not isinstance(cost, (int, float)):
        raise WorkloadFormatError("total_cpu_min must be a number", line, "total_cpu_min")
    if not (math.isfinite(cost) and cost > 0):
        raise WorkloadFormatError("total_cpu_min must be finite and > 0", line, "total_cpu_min")
    root = binarize(_node_from_json(obj["root"], line))
    return QueryTrace(qid, root, float(cost))


def trace_to_json(trace: QueryTrace) -> dict:
    return {
        "query_id": trace.query_id,
        "total_cpu_min": trace.total_cpu_min,
        "root": node_to_json(trace.root),
    }


def parse_workload_lines(
    lines: Iterable[str], source_tag: str = "", cost_filter: bool = True
) -> Workload:
    traces = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise WorkloadFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        trace = trace_from_json(obj, lineno)
        if trace.query_id in seen:
            raise WorkloadFormatError(
                f"duplicate query_id {trace.query_id!r} (first on line {seen[trace.query_id]})",
                lineno,
                "query_id",
            )
        seen[trace.query_id] = lineno
        if cost_filter and not (MIN_CPU_MIN <= trace.total_cpu_min <= MAX_CPU_MIN):
            continue
        traces.append(trace)
    return Workload(tuple(traces), source_tag)


def parse_workload(path, cost_filter: bool = True) -> Workload:
    """Read a JSON Lines workload file.

    With ``cost_filter`` on, traces outside [1, 60] CPU minutes are dropped.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        return parse_workload_lines(fh, source_tag=str(path), cost_filter=cost_filter)


def serialize_workload(workload: Workload) -> str:
    return "".join(
        json.dumps(trace_to_json(t), separators=(",", ":")) + "\n" for t in workload
    )


def write_workload(workload: Workload, path) -> None:
    Path(path).write_text(serialize_workload(workload), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# Distribution statistics
# ---------------------------------------------------------------------------


def workload_distribution(workload: Workload, percentile: float) -> dict[str, float]:
    """Share of traces and of CPU time held by the top ``percentile`` % of plans by node count.

    The cutoff keeps ``ceil(n * percentile / 100)`` traces; ties in node count
    are broken by input order.
    """
    if len(workload) == 0:
        raise ValueError("workload is empty")
    if not 0 < percentile < 100:
        raise ValueError("percentile must be in (0, 100)")
    sizes = np.array([plan_stats(t.root).node_count for t in workload])
    costs = np.array([t.total_cpu_min for t in workload])
    n = len(sizes)
    top = max(1, math.ceil(n * percentile / 100.0 - 1e-9))
    order = np.argsort(-sizes, kind="stable")[:top]
    return {"count_share": top / n, "cost_share": float(costs[order].sum() / costs.sum())}


# ---------------------------------------------------------------------------
# Synthetic workloads
# ---------------------------------------------------------------------------

UNARY_OPS = ("Filter", "Project", "Aggregate", "Exchange", "Sort", "TopN", "Window")
JOIN_OPS = ("InnerJoin", "LeftJoin", "SemiJoin", "CrossJoin")
SCAN_OP = "TableScan"

# additive effects on log CPU time
_OP_EFFECT = {
    "Aggregate": 0.4,
    "Sort": 0.3,
    "Window": 0.8,
    "TopN": -0.3,
    "CrossJoin": 1.0,
    "SemiJoin": -0.3,
    "LeftJoin": 0.3,
}
_CMP_OPS = ("=", "<", ">", "<=", ">=", "!=", "in", "like")
# selectivity multipliers for the selectivity proxy
_CMP_SELECTIVITY = {"=": 0.1, "in": 0.3, "like": 0.5, "!=": 0.95, "<": 0.4, ">": 0.4, "<=": 0.45, ">=": 0.45}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator.

    CPU minutes are planted as ``exp(log_cost)`` clamped to [1, 60] with::

        log_cost = base_log_cost
                 + size_exponent * ln(node_count)
                 + tail_slope * max(0, node_count - tail_start)
                 + max(table_weight[t] for scanned t)
                 + sum(op_effect[o] for distinct operator names o in the plan)
                 - filter_weight * ln(min selectivity over filters, 1 if none)
                 + N(0, noise_sigma)

    Table weights are drawn once per (config, seed) from N(0, table_weight_sd),
    then the ``heavy_tables`` tables starting at popularity rank ``heavy_rank``
    are pinned to ``heavy_weight`` (rare but expensive fact tables).
    Per-column selectivities come from U(0.05, 1), scaled per comparison
    operator. AND multiplies child selectivities, OR adds them (capped at 1).
    Apart from the size terms every component is a max or a presence test,
    which a max-pooled tree model can represent.
    """

    count: int = 2000
    n_tables: int = 24
    columns_per_table: int = 4
    size_log_mean: float = 1.5
    size_log_sigma: float = 0.35
    tail_fraction: float = 0.035
    tail_size_log_mean: float = 5.0
    tail_size_log_sigma: float = 0.4
    max_nodes: int = 600
    join_prob: float = 0.3
    filter_prob: float = 0.3
    clause_max: int = 3
    table_zipf: float = 0.8
    base_log_cost: float = -2.3
    size_exponent: float = 0.3
    tail_start: int = 40
    tail_slope: float = 0.1
    table_weight_sd: float = 0.6
    heavy_tables: int = 1
    heavy_rank: int = 10
    heavy_weight: float = 3.6
    filter_weight: float = 0.05
    noise_sigma: float = 0.05

    def validate(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.heavy_tables < 0 or self.heavy_rank < 0:
            raise ValueError("heavy_tables and heavy_rank must be >= 0")
        for name in ("n_tables", "columns_per_table", "max_nodes", "clause_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.tail_fraction <= 1:
            raise ValueError("tail_fraction must lie in [0, 1]")
        if min(self.size_log_sigma, self.tail_size_log_sigma, self.noise_sigma, self.table_weight_sd) < 0:
            raise ValueError("spreads must be nonnegative")
        if not (0 <= self.join_prob <= 1 and 0 <= self.filter_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")


class _Generator:
    def __init__(self, cfg: SynthConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.tables = [f"t{i:03d}" for i in range(cfg.n_tables)]
        ranks = np.arange(1, cfg.n_tables + 1, dtype=float)
        pop = ranks ** -cfg.table_zipf
        self.table_p = pop / pop.sum()
        self.table_weight = self.rng.normal(0.0, cfg.table_weight_sd, cfg.n_tables)
        self.table_weight[cfg.heavy_rank : cfg.heavy_rank + cfg.heavy_tables] = cfg.heavy_weight
        self.col_sel = self.rng.uniform(0.05, 1.0, (cfg.n_tables, cfg.columns_per_table))
        cranks = np.arange(1, cfg.columns_per_table + 1, dtype=float) ** -1.0
        self.col_p = cranks / cranks.sum()

    def _value(self, op: str) -> str:
        rng = self.rng
        if op == "like":
            return f"'%{rng.integers(0, 1000):03d}%'"
        if op == "in":
            vals = rng.integers(0, 100, rng.integers(2, 5))
            return "(" + ", ".join(str(v) for v in vals) + ")"
        if rng.random() < 0.5:
            return str(int(rng.integers(-50, 5000)))
        return f"{rng.uniform(-100, 100):.3f}"

    def _clause(self, tables: list[int]) -> tuple[PredicateExpr, float]:
        rng = self.rng
        ti = tables[int(rng.integers(len(tables)))]
        ci = int(rng.choice(self.cfg.columns_per_table, p=self.col_p))
        op = _CMP_OPS[int(rng.integers(len(_CMP_OPS)))]
        text = f"{self.tables[ti]}.c{ci} {op} {self._value(op)}"
        sel = self.col_sel[ti, ci] * _CMP_SELECTIVITY[op]
        return parse_clause(text), sel

    def _predicate(self, tables: list[int], budget: int) -> tuple[PredicateExpr, float]:
        if budget <= 1 or self.rng.random() < 0.35:
            return self._clause(tables)
        kind = "AND" if self.rng.random() < 0.7 else "OR"
        k = int(self.rng.integers(2, budget + 1))
        parts = []
        sizes = [1] * k
        for _ in range(budget - k):
            if self.rng.random() < 0.3:
                sizes[int(self.rng.integers(k))] += 1
        for s in sizes:
            parts.append(self._predicate(tables, s))
        sels = [s for _, s in parts]
        sel = float(np.prod(sels)) if kind == "AND" else min(1.0, float(sum(sels)))
        return Conjunction(kind, tuple(p for p, _ in parts)), sel

    def _plan(self, budget: int, acc: dict) -> tuple[PlanNode, list[int]]:
        # iterative spine for unary chains keeps recursion bounded by join nesting
        rng = self.rng
        cfg = self.cfg
        spine: list[tuple[str, int]] = []
        while budget > 1 and not (budget >= 3 and rng.random() < cfg.join_prob):
            if rng.random() < cfg.filter_prob:
                spine.append(("Filter", budget))
            else:
                spine.append((UNARY_OPS[1 + int(rng.integers(len(UNARY_OPS) - 1))], budget))
            budget -= 1
        if budget == 1:
            ti = int(rng.choice(cfg.n_tables, p=self.table_p))
            node = PlanNode(SCAN_OP, table=self.tables[ti])
            tables = [ti]
            acc["tables"].append(ti)
        else:
            rest = budget - 1
            left_share = int(rng.integers(1, rest))
            op = JOIN_OPS[int(rng.choice(len(JOIN_OPS), p=[0.55, 0.25, 0.12, 0.08]))]
            lnode, lt = self._plan(left_share, acc)
            rnode, rt = self._plan(rest - left_share, acc)
            node = PlanNode(op, children=(lnode, rnode))
            tables = lt + rt
            acc["ops"].add(op)
        for op, _ in reversed(spine):
            acc["ops"].add(op)
            if op == "Filter":
                pred, sel = self._predicate(tables, int(rng.integers(1, self.cfg.clause_max + 1)))
                acc["min_sel"] = min(acc["min_sel"], max(sel, 1e-6))
                node = PlanNode(op, predicate=pred, children=(node,))
            else:
                node = PlanNode(op, children=(node,))
        return node, tables

    def trace(self, i: int) -> QueryTrace:
        cfg = self.cfg
        rng = self.rng
        if rng.random() < cfg.tail_fraction:
            size = int(round(rng.lognormal(cfg.tail_size_log_mean, cfg.tail_size_log_sigma)))
        else:
            size = int(round(rng.lognormal(cfg.size_log_mean, cfg.size_log_sigma)))
        size = min(max(size, 1), cfg.max_nodes)
        acc = {"tables": [], "ops": set(), "min_sel": 1.0}
        root, _ = self._plan(size, acc)
        log_cost = (
            cfg.base_log_cost
            + cfg.size_exponent * math.log(size)
            + cfg.tail_slope * max(0, size - cfg.tail_start)
            + float(np.max(self.table_weight[acc["tables"]]))
            + sum(_OP_EFFECT.get(op, 0.0) for op in sorted(acc["ops"]))
            - cfg.filter_weight * math.log(acc["min_sel"])
            + rng.normal(0.0, cfg.noise_sigma)
        )
        cost = min(max(math.exp(log_cost), MIN_CPU_MIN), MAX_CPU_MIN)
        return QueryTrace(f"q{i:06d}", root, round(cost, 6))


def generate_synthetic_workload(config: SynthConfig, seed: int) -> Workload:
    """Deterministic long-tailed workload with a planted CPU-time function (see :class:`SynthConfig`)."""
    config.validate()
    gen = _Generator(config, seed)
    traces = tuple(gen.trace(i) for i in range(config.count))
    return Workload(traces, f"synthetic(seed={seed})")
