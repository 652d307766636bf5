import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prestroid_kit.otp import OPR, OtpNode, Vocab, chain_otp, full_binary_otp, iter_otp
from prestroid_kit.predicate_embedding import EmbeddingModel
from prestroid_kit.sampler import (
    SamplerConfig,
    SubTreeSample,
    get_nodes,
    sample_subtrees,
    select_top_k,
    to_tensor,
    whole_tree_sample,
)

from .helpers import descendants_within, random_otp


def n(label="op", left=None, right=None):
    return OtpNode(OPR, label, left, right)


class TestGetNodes:
    def test_depth_zero(self):
        r = full_binary_otp(3)
        assert get_nodes(r, 0) == [r]

    def test_depth_one(self):
        a, b = n("a"), n("b")
        r = n("r", a, b)
        assert [x.label for x in get_nodes(r, 1)] == ["r", "a", "b"]

    def test_full_depth_three(self):
        assert len(get_nodes(full_binary_otp(3), 3)) == 15

    def test_depth_past_leaves(self):
        assert len(get_nodes(chain_otp(3), 10)) == 3

    def test_negative(self):
        assert get_nodes(n(), -1) == []


class TestConfig:
    def test_bound(self):
        with pytest.raises(ValueError):
            SamplerConfig(N=14, C=3)
        with pytest.raises(ValueError):
            SamplerConfig(N=15, C=0)

    def test_warns_at_bound(self, caplog, monkeypatch):
        monkeypatch.setattr("prestroid_kit.sampler._warned_bounds", set())
        with caplog.at_level(logging.WARNING, logger="prestroid_kit.sampler"):
            SamplerConfig(N=15, C=3)
        assert "bound" in caplog.text

    def test_full_tree(self):
        assert SamplerConfig(N=None).full_tree


class TestHandTraces:
    def test_complete_31_c1(self):
        root = full_binary_otp(4)
        samples = sample_subtrees(root, SamplerConfig(N=15, C=1))
        assert len(samples) == 9
        assert [sum(s.votes) for s in samples] == [7] + [3] * 8
        assert len(samples[0]) == 15
        # depth-3 nodes of the first sample become the next roots
        assert [s.nodes[0] for s in samples[1:]] == get_nodes(root, 3)[7:]

    def test_chain_40_c3(self):
        root = chain_otp(40)
        order = list(iter_otp(root))
        samples = sample_subtrees(root, SamplerConfig(N=15, C=3))
        assert [sum(s.votes) for s in samples] == [12, 12, 12, 4]
        assert [order.index(s.nodes[0]) for s in samples] == [0, 12, 24, 36]
        assert [len(s) for s in samples] == [15, 15, 15, 4]

    def test_small_tree_single_sample(self):
        root = full_binary_otp(2)
        (s,) = sample_subtrees(root, SamplerConfig(N=15, C=3))
        assert len(s) == 7 and all(s.votes)

    def test_slot_pointers(self):
        a, b = n("a"), n("b")
        r = n("r", a, b)
        (s,) = sample_subtrees(r, SamplerConfig(N=15, C=3))
        assert s.left_idx == (2, 0, 0) and s.right_idx == (3, 0, 0)

    def test_full_tree_mode(self):
        root = chain_otp(40)
        (s,) = sample_subtrees(root, SamplerConfig(N=None))
        assert len(s) == 40 and sum(s.votes) == 40


@settings(max_examples=150, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.integers(1, 200),
    st.sampled_from([(15, 1), (15, 2), (15, 3), (32, 1), (32, 2), (32, 3)]),
)
def test_decomposition_invariants(seed, size, nc):
    n_max, c = nc
    root = random_otp(np.random.default_rng(seed), size)
    samples = sample_subtrees(root, SamplerConfig(N=n_max, C=c))
    voters = [id(x) for s in samples for x, v in zip(s.nodes, s.votes) if v]
    # every node votes exactly once
    assert sorted(voters) == sorted(id(x) for x in iter_otp(root))
    for s in samples:
        assert 1 <= len(s) <= n_max
        members = {id(x) for x in s.nodes}
        for x, v in zip(s.nodes, s.votes):
            if v:
                assert all(id(d) in members for d in descendants_within(x, c))
        for x, li, ri in zip(s.nodes, s.left_idx, s.right_idx):
            if li:
                assert s.nodes[li - 1] is x.left
            if ri:
                assert s.nodes[ri - 1] is x.right


class TestTopK:
    def test_padding(self):
        samples = sample_subtrees(full_binary_otp(2), SamplerConfig())
        q = select_top_k(samples, 5)
        assert len(q.subtrees) == 5
        assert sum(s.is_padding for s in q.subtrees) == 4
        assert q.dropped_votes == 0 and q.total_votes == 7

    def test_truncation_counts_dropped_votes(self):
        samples = sample_subtrees(chain_otp(40), SamplerConfig(N=15, C=3))
        q = select_top_k(samples, 2)
        assert q.subtrees == tuple(samples[:2])
        assert (q.dropped_votes, q.total_votes) == (16, 40)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            select_top_k([], 0)


class TestTensor:
    vocab = Vocab(("op", "x"), ("T",))
    emb = EmbeddingModel(3, (), np.zeros((0, 3)), global_fallback=np.zeros(3))

    def test_shapes_and_sentinel(self):
        q = select_top_k(sample_subtrees(full_binary_otp(2), SamplerConfig()), 5)
        t = to_tensor(q, self.vocab, self.emb, 15)
        f = self.vocab.feature_size(3)
        assert t["features"].shape == (5, 16, f)
        assert not t["features"][:, 0].any()
        assert t["left"][0, 1] == 2 and t["right"][0, 1] == 3
        assert t["votes"][0].sum() == 7
        assert not t["features"][1:].any() and not t["votes"][1:].any()

    def test_padded_rows_zero(self):
        q = select_top_k([whole_tree_sample(n())], 1)
        t = to_tensor(q, self.vocab, self.emb, 15)
        assert t["features"][0, 1, 0] == 1.0
        assert not t["features"][0, 2:].any()

    def test_overflow(self):
        q = select_top_k([whole_tree_sample(chain_otp(20))], 1)
        with pytest.raises(ValueError):
            to_tensor(q, self.vocab, self.emb, 15)

    def test_empty_sample(self):
        assert SubTreeSample().is_padding
