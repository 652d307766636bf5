import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prestroid_kit.evaluation import (
    PROVISIONING_DEFINITION,
    TargetTransform,
    cost_projection,
    epoch_timing_bench,
    fit_transform,
    footprint_report,
    format_usd,
    log_binning_fit,
    log_binning_predict,
    metrics_csv,
    mse_minutes,
    provisioning_report,
    split_workload,
    table_drift,
    workload_footprint,
)
from prestroid_kit.otp import build_otp_tree, build_vocabularies
from prestroid_kit.plan_ir import PlanNode, QueryTrace, SynthConfig, Workload, generate_synthetic_workload
from prestroid_kit.predicate_embedding import EmbeddingModel
from prestroid_kit.sampler import SamplerConfig
from prestroid_kit.training import featurize

from .helpers import chain_plan


def traces(costs, sizes=None, tables=None):
    sizes = sizes or [1] * len(costs)
    out = []
    for i, (c, s) in enumerate(zip(costs, sizes)):
        root = chain_plan(s)
        if tables:
            root = PlanNode("TableScan", table=tables[i])
        out.append(QueryTrace(f"q{i}", root, float(c)))
    return Workload(tuple(out))


class TestTransform:
    t = TargetTransform(0.0, math.log(60.0))

    def test_endpoints(self):
        np.testing.assert_array_equal(self.t.apply([1.0, 60.0]), [0.0, 1.0])

    def test_log_midpoint(self):
        assert self.t.apply(math.sqrt(60.0)) == pytest.approx(0.5, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0, 60.0))
    def test_inverse(self, y):
        assert self.t.invert(self.t.apply(y)) == pytest.approx(y, rel=1e-9)

    def test_fit(self):
        t = fit_transform([2.0, 5.0, 40.0])
        assert (t.min_minutes, t.max_minutes) == pytest.approx((2.0, 40.0))

    def test_degenerate(self):
        with pytest.raises(ValueError):
            fit_transform([3.0, 3.0])

    def test_out_of_range_clipped(self):
        assert self.t.apply(120.0) == 1.0 and self.t.invert(-1.0) == 1.0


class TestSplit:
    def test_ratio_counts(self):
        sp = split_workload(traces([2.0] * 10), seed=0)
        assert [len(sp[k]) for k in ("train", "val", "test")] == [8, 1, 1]

    def test_partition_and_determinism(self):
        wl = traces(range(2, 52))
        a, b = split_workload(wl, seed=4), split_workload(wl, seed=4)
        assert all(a[k].traces == b[k].traces for k in a)
        ids = sorted(t.query_id for k in a for t in a[k])
        assert ids == sorted(t.query_id for t in wl)
        assert split_workload(wl, seed=5)["train"].traces != a["train"].traces

    def test_groups_never_straddle(self):
        wl = traces([2.0] * 30)
        key = lambda t: int(t.query_id[1:]) // 3  # noqa: E731
        sp = split_workload(wl, seed=1, group_key=key)
        seen = [{key(t) for t in sp[k]} for k in ("train", "val", "test")]
        assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
        assert sum(len(s) for s in seen) == 10

    def test_errors(self):
        with pytest.raises(ValueError):
            split_workload(Workload())
        with pytest.raises(ValueError):
            split_workload(traces([2.0] * 4), ratios=(1, 1))


class TestLogBinning:
    def test_single_bin_is_mean(self):
        wl = traces([2.0, 4.0, 9.0], sizes=[1, 5, 30])
        m = log_binning_fit(wl, 1)
        assert all(log_binning_predict(m, t) == 5.0 for t in wl)

    def test_two_bins(self):
        wl = traces([4.0, 6.0, 18.0, 22.0], sizes=[1, 1, 50, 50])
        m = log_binning_fit(wl, 2)
        assert [log_binning_predict(m, t) for t in wl] == [5.0, 5.0, 20.0, 20.0]

    def test_empty_bin_uses_nearest(self):
        wl = traces([4.0, 20.0], sizes=[1, 100])
        m = log_binning_fit(wl, 10)
        assert m.predict_count(2) == 4.0
        assert m.predict_count(90) == 20.0
        assert m.predict_count(5000) == 20.0

    def test_bad_bins(self):
        with pytest.raises(ValueError):
            log_binning_fit(traces([2.0]), 0)


class TestMetrics:
    def test_mse(self):
        assert mse_minutes([1, 2], [1, 2]) == 0.0
        assert mse_minutes([3, 4, 5], [1, 2, 3]) == 4.0

    def test_provisioning(self):
        r = provisioning_report([10, 5], [8, 10])
        assert (r["over_pct"], r["under_pct"]) == (25.0, 50.0)
        assert provisioning_report([3, 4], [3, 4])["over_pct"] == 0.0
        assert "over_pct" in PROVISIONING_DEFINITION

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 60), st.integers(1, 60)), min_size=1, max_size=30))
    def test_provisioning_partitions(self, pairs):
        p, a = map(np.array, zip(*pairs))
        r = provisioning_report(p, a)
        assert r["over_count"] + r["under_count"] == int((p != a).sum())

    def test_csv(self):
        assert metrics_csv([("mse", 1.5, "min2")]) == "name,value,unit\nmse,1.5,min2\n"


class TestFootprint:
    def test_identical(self):
        assert footprint_report(100, (15, 5), (15, 5), 32, 10).reduction_factor == 1.0

    def test_reference_configuration(self):
        r = footprint_report(1945, (15, 9), None, 32, 50)
        assert r.reduction_factor == 1946 / 144
        assert float(f"{r.reduction_factor:.3g}") == 13.5

    def test_brute_force_materialized(self):
        wl = generate_synthetic_workload(SynthConfig(count=32), 1)
        vocab = build_vocabularies(wl)
        emb = EmbeddingModel(4, (), np.zeros((0, 4)), global_fallback=np.zeros(4))
        f = vocab.feature_size(4)
        for sampler, cfg in ((SamplerConfig(15, 3, 9), (15, 9)), (SamplerConfig(N=None, K=1), None)):
            b = featurize(wl, vocab, emb, sampler).batch
            r = workload_footprint(wl, cfg, None, len(wl), f)
            assert b.features.size == r.sub_features
            assert b.left.size + b.right.size + b.votes.size == r.sub_indices
        biggest = max(build_otp_tree(t.root).typed_node_count for t in wl)
        assert workload_footprint(wl, None, None, 1, 1).sub_features == biggest + 1

    def test_csv(self):
        text = footprint_report(10, (15, 1), None, 1, 1).to_csv()
        assert text.splitlines()[0] == "config,elements_features,elements_indices,factor"


class TestCostAndDrift:
    def test_cost(self):
        assert cost_projection(600, 0, 4.23) == 0.0
        assert cost_projection(600, 49, 4.23) == pytest.approx(34.545)
        assert format_usd(cost_projection(600, 49, 4.23)) == "34.54"

    def test_drift(self):
        ref = traces([2.0] * 9, tables=[f"t{i}" for i in range(9)])
        fut = traces([2.0] * 10, tables=[f"t{i}" for i in range(10)])
        assert table_drift(ref, ref) == 0.0
        assert table_drift(ref, fut) == 10.0

    def test_bench(self):
        calls = []
        assert epoch_timing_bench(lambda: calls.append(1), 3) >= 0
        assert len(calls) == 4
        with pytest.raises(ValueError):
            epoch_timing_bench(lambda: None, 0)
