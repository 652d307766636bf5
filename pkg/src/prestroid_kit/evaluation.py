"""Target transform, splitting, the log-binning baseline and measurement reports."""

from __future__ import annotations

import csv
import io
import math
import time
from decimal import ROUND_HALF_EVEN, Decimal
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .plan_ir import QueryTrace, Workload, plan_stats, workload_tables

PROVISIONING_DEFINITION = (
    "over_pct = 100 * sum(pred - actual | pred > actual) / sum(actual | pred > actual); "
    "under_pct = 100 * sum(actual - pred | pred < actual) / sum(actual | pred < actual)"
)


# ---------------------------------------------------------------------------
# Target transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetTransform:
    """Natural log followed by min-max scaling to [0, 1]."""

    min_log: float
    max_log: float

    def __post_init__(self):
        if not self.max_log > self.min_log:
            raise ValueError("max_log must exceed min_log")

    @property
    def min_minutes(self) -> float:
        return math.exp(self.min_log)

    @property
    def max_minutes(self) -> float:
        return math.exp(self.max_log)

    def apply(self, y):
        z = (np.log(np.asarray(y, dtype=np.float64)) - self.min_log) / (self.max_log - self.min_log)
        return np.clip(z, 0.0, 1.0)

    def invert(self, z):
        z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
        return np.exp(self.min_log + z * (self.max_log - self.min_log))


def fit_transform(targets: Sequence[float]) -> TargetTransform:
    logs = np.log(np.asarray(targets, dtype=np.float64))
    if logs.size < 2 or logs.min() == logs.max():
        raise ValueError("need at least two distinct training targets")
    return TargetTransform(float(logs.min()), float(logs.max()))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = n * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    # largest remainders get the leftovers
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_workload(
    workload: Workload,
    ratios: Sequence[float] = (8, 1, 1),
    seed: int = 0,
    group_key: Callable[[QueryTrace], Hashable] | None = None,
) -> dict[str, Workload]:
    """Seeded train/val/test split; with ``group_key`` whole groups move together."""
    if len(workload) == 0:
        raise ValueError("workload is empty")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ValueError("ratios must be three nonnegative numbers with a positive sum")
    rng = np.random.default_rng(seed)
    names = ("train", "val", "test")
    traces = list(workload)
    if group_key is None:
        order = rng.permutation(len(traces))
        counts = _split_counts(len(traces), ratios)
        out, start = {}, 0
        for name, c in zip(names, counts):
            out[name] = Workload(tuple(traces[i] for i in sorted(order[start : start + c])), workload.source_tag)
            start += c
        return out
    groups: dict[Hashable, list[QueryTrace]] = {}
    for t in traces:
        groups.setdefault(group_key(t), []).append(t)
    needed = sum(1 for r in ratios if r > 0)
    if len(groups) < needed:
        raise ValueError(f"{len(groups)} groups cannot fill {needed} splits")
    keys = list(groups)
    order = rng.permutation(len(keys))
    counts = _split_counts(len(keys), ratios)
    out, start = {}, 0
    for name, c in zip(names, counts):
        chosen = {keys[i] for i in order[start : start + c]}
        out[name] = Workload(tuple(t for t in traces if group_key(t) in chosen), workload.source_tag)
        start += c
    return out


# ---------------------------------------------------------------------------
# Log-binning baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogBinModel:
    edges: np.ndarray  # B + 1 increasing edges over log(node_count)
    bin_means: np.ndarray  # NaN for empty bins
    global_mean: float

    @property
    def n_bins(self) -> int:
        return len(self.bin_means)

    def bin_of(self, node_count: int) -> int:
        x = math.log(node_count)
        i = int(np.searchsorted(self.edges, x, side="right")) - 1
        return min(max(i, 0), self.n_bins - 1)

    def predict_count(self, node_count: int) -> float:
        i = self.bin_of(node_count)
        if not np.isnan(self.bin_means[i]):
            return float(self.bin_means[i])
        filled = np.flatnonzero(~np.isnan(self.bin_means))
        if filled.size == 0:
            return self.global_mean
        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        x = math.log(node_count)
        # nearest populated bin by distance to its edge interval, ties to the lower bin
        dist = np.maximum(self.edges[filled] - x, 0) + np.maximum(x - self.edges[filled + 1], 0)
        best = filled[np.lexsort((centers[filled], dist))[0]]
        return float(self.bin_means[best])


def log_binning_fit(train: Workload, n_bins: int) -> LogBinModel:
    """Bins of equal width in log(node count) spanning the training range."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if len(train) == 0:
        raise ValueError("training workload is empty")
    sizes = np.array([plan_stats(t.root).node_count for t in train], dtype=np.float64)
    costs = np.array([t.total_cpu_min for t in train])
    lo, hi = math.log(sizes.min()), math.log(sizes.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    model = LogBinModel(edges, np.full(n_bins, np.nan), float(costs.mean()))
    which = np.array([model.bin_of(int(s)) for s in sizes])
    means = np.full(n_bins, np.nan)
    for i in range(n_bins):
        sel = which == i
        if sel.any():
            means[i] = costs[sel].mean()
    if n_bins == 1:
        means[0] = costs.mean()
    return LogBinModel(edges, means, float(costs.mean()))


def log_binning_predict(model: LogBinModel, trace: QueryTrace) -> float:
    return model.predict_count(plan_stats(trace.root).node_count)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def mse_minutes(preds, actuals) -> float:
    p = np.asarray(preds, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != a.shape or p.size == 0:
        raise ValueError("predictions and actuals need equal nonzero length")
    return float(np.mean((p - a) ** 2))


def provisioning_report(preds, actuals) -> dict[str, float]:
    """Over/under allocation as a percentage of the actual CPU time of each group."""
    p = np.asarray(preds, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != a.shape or p.size == 0:
        raise ValueError("predictions and actuals need equal nonzero length")
    over = p > a
    under = p < a
    over_pct = 100.0 * (p[over] - a[over]).sum() / a[over].sum() if over.any() else 0.0
    under_pct = 100.0 * (a[under] - p[under]).sum() / a[under].sum() if under.any() else 0.0
    return {
        "over_pct": float(over_pct),
        "under_pct": float(under_pct),
        "over_count": int(over.sum()),
        "under_count": int(under.sum()),
    }


@dataclass(frozen=True)
class FootprintReport:
    """Per-batch element counts of the sub-tree and the reference (usually full-tree) layout."""

    batch_size: int
    feature_size: int
    sub_label: str
    sub_features: int
    sub_indices: int
    ref_label: str
    ref_features: int
    ref_indices: int

    @property
    def reduction_factor(self) -> float:
        return self.ref_features / self.sub_features

    @property
    def total_reduction_factor(self) -> float:
        return (self.ref_features + self.ref_indices) / (self.sub_features + self.sub_indices)

    def rows(self) -> list[dict]:
        return [
            {"config": self.ref_label, "elements_features": self.ref_features,
             "elements_indices": self.ref_indices, "factor": 1.0},
            {"config": self.sub_label, "elements_features": self.sub_features,
             "elements_indices": self.sub_indices, "factor": self.reduction_factor},
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["config", "elements_features", "elements_indices", "factor"], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow(r)
        return buf.getvalue()


def layout_elements(batch_size: int, k: int, n_slots: int, feature_size: int) -> tuple[int, int]:
    """(feature elements, index+vote elements) of one padded batch."""
    rows = batch_size * k * (n_slots + 1)
    return rows * feature_size, rows * 3


def footprint_report(
    max_typed_nodes: int,
    sub_config: tuple[int, int] | None,
    ref_config: tuple[int, int] | None,
    batch_size: int,
    feature_size: int,
) -> FootprintReport:
    """Compare padded batch sizes. A config is ``(N, K)``; ``None`` means full tree.

    A full tree pads every query to ``max_typed_nodes`` slots with K = 1.
    """
    if max_typed_nodes < 1 or batch_size < 1 or feature_size < 1:
        raise ValueError("sizes must be positive")

    def resolve(cfg):
        if cfg is None:
            return "full", 1, max_typed_nodes
        n, k = cfg
        return f"{n}-{k}", k, n

    s_label, s_k, s_n = resolve(sub_config)
    r_label, r_k, r_n = resolve(ref_config)
    sf, si = layout_elements(batch_size, s_k, s_n, feature_size)
    rf, ri = layout_elements(batch_size, r_k, r_n, feature_size)
    return FootprintReport(batch_size, feature_size, s_label, sf, si, r_label, rf, ri)


def workload_footprint(
    workload: Workload,
    sub_config: tuple[int, int] | None,
    ref_config: tuple[int, int] | None,
    batch_size: int,
    feature_size: int,
) -> FootprintReport:
    from .otp import build_otp_tree

    if len(workload) == 0:
        raise ValueError("workload is empty")
    biggest = max(build_otp_tree(t.root).typed_node_count for t in workload)
    return footprint_report(biggest, sub_config, ref_config, batch_size, feature_size)


def cost_projection(epoch_seconds: float, epochs: float, hourly_rate_usd: float) -> float:
    if min(epoch_seconds, epochs, hourly_rate_usd) < 0:
        raise ValueError("inputs must be nonnegative")
    return epochs * epoch_seconds / 3600.0 * hourly_rate_usd


def format_usd(amount: float) -> str:
    """Dollars to whole cents, ties to even (34.545 -> "34.54")."""
    return str(Decimal(repr(float(amount))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def table_drift(reference_window: Workload, future_window: Workload) -> float:
    """Percent of the future window's tables absent from the reference window."""
    if len(reference_window) == 0 or len(future_window) == 0:
        raise ValueError("both windows must be nonempty")
    future = workload_tables(future_window)
    if not future:
        raise ValueError("future window scans no tables")
    seen = workload_tables(reference_window)
    return 100.0 * len(future - seen) / len(future)


def epoch_timing_bench(run_epoch: Callable[[], None], repetitions: int) -> float:
    """Mean wall-clock seconds of ``run_epoch`` after one untimed warm-up call."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    run_epoch()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run_epoch()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def metrics_csv(rows: Sequence[tuple[str, float, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "unit"])
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
