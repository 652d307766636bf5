import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prestroid_kit.otp import OPR, PRED, TBL, Vocab, build_otp_tree, build_vocabularies, encode_node, iter_otp, OtpNode
from prestroid_kit.plan_ir import PlanNode, QueryTrace, Workload, parse_clause, plan_stats
from prestroid_kit.predicate_embedding import EmbeddingModel, encode_predicate

from .helpers import random_plan


def scan(t="T", pred=None):
    return PlanNode("TableScan", table=t, predicate=pred)


def toy_embedder(p_f=4):
    toks = ("a.x", ">", "b", "=")
    vecs = np.arange(len(toks) * p_f, dtype=float).reshape(len(toks), p_f) / 10.0
    return EmbeddingModel(p_f, toks, vecs, global_fallback=np.full(p_f, 0.5))


class TestRecast:
    def test_scan(self):
        t = build_otp_tree(scan())
        assert t.typed_node_count == 2
        assert (t.root.kind, t.root.label) == (OPR, "TableScan")
        assert (t.root.left.kind, t.root.left.label) == (TBL, "T")
        assert t.root.right is None

    def test_filter_over_scan(self):
        p = parse_clause("a.x > 1")
        t = build_otp_tree(PlanNode("Filter", predicate=p, children=(scan(),)))
        assert t.typed_node_count == 4
        r = t.root
        assert r.label == "Filter" and r.left.label == "TableScan"
        assert r.left.left.kind == TBL and r.left.right is None
        assert r.right.kind == PRED and r.right.predicate == p

    def test_join(self):
        t = build_otp_tree(PlanNode("InnerJoin", children=(scan("A"), scan("B"))))
        assert t.typed_node_count == 5
        assert t.root.left.left.label == "A" and t.root.right.left.label == "B"

    def test_join_predicate_dropped(self):
        j = PlanNode("InnerJoin", predicate=parse_clause("a.id = b.id"), children=(scan("A"), scan("B")))
        assert all(n.kind != PRED for n in iter_otp(build_otp_tree(j).root))

    def test_unary_without_predicate(self):
        t = build_otp_tree(PlanNode("Project", children=(scan(),)))
        assert t.root.right is None and t.typed_node_count == 3

    def test_errors(self):
        with pytest.raises(ValueError):
            build_otp_tree(PlanNode("InnerJoin", children=(scan(),)))
        with pytest.raises(ValueError):
            build_otp_tree(PlanNode("TableScan"))

    def test_leaf_kinds_are_leaves(self):
        with pytest.raises(ValueError):
            OtpNode(TBL, "T", left=OtpNode(TBL, "U"))

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 60))
    def test_count_and_determinism(self, seed, size):
        plan = random_plan(np.random.default_rng(seed), size)
        a, b = build_otp_tree(plan), build_otp_tree(plan)
        assert a == b
        assert a.typed_node_count == sum(1 for _ in iter_otp(a.root))
        assert a.typed_node_count >= plan_stats(plan).node_count


class TestVocab:
    def wl(self, *roots):
        return Workload(tuple(QueryTrace(f"q{i}", r, 2.0) for i, r in enumerate(roots)))

    def test_single_operator(self):
        v = build_vocabularies(self.wl(scan("A")))
        assert v.operators == ("TableScan",)

    def test_unk_slot(self):
        v = build_vocabularies(self.wl(scan("A"), scan("B")))
        assert v.tables == ("A", "B") and v.table_slots == 3
        assert v.table_index("C") == v.unk_table_index == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            build_vocabularies(Workload())


class TestEncodeNode:
    def test_sentinel(self):
        v = Vocab(("a", "b", "c"), ("A", "B"))
        e = toy_embedder()
        out = encode_node(None, v, e)
        assert out.shape == (3 + 4 + 3,) and not out.any()

    def test_table_layout(self):
        v = Vocab(("a", "b", "c"), ("A", "B"))
        out = encode_node(OtpNode(TBL, "A"), v, toy_embedder())
        assert out.shape == (10,) and out[7] == 1.0 and out.sum() == 1.0

    def test_unseen_table(self):
        v = Vocab(("a",), ("A", "B"))
        out = encode_node(OtpNode(TBL, "Z"), v, toy_embedder())
        assert out[1 + 4 + 2] == 1.0

    def test_operator(self):
        v = Vocab(("a", "b", "c"), ("A",))
        out = encode_node(OtpNode(OPR, "b"), v, toy_embedder())
        assert out[1] == 1.0 and out.sum() == 1.0

    def test_unseen_operator_is_hard_error(self):
        with pytest.raises(KeyError):
            encode_node(OtpNode(OPR, "Nope"), Vocab(("a",), ()), toy_embedder())

    def test_predicate_segment(self):
        e = toy_embedder()
        v = Vocab(("a", "b"), ("A",))
        p = parse_clause("a.x > 3")
        out = encode_node(OtpNode(PRED, "p", predicate=p), v, e)
        np.testing.assert_array_equal(out[2:6], encode_predicate(p, e))
        assert not out[:2].any() and not out[6:].any()
