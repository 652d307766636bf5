"""Featurization of workloads, the Adam training loop and the deployable model bundle."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import TargetTransform, fit_transform
from .otp import Vocab, build_otp_tree
from .plan_ir import QueryTrace, Workload
from .predicate_embedding import EmbeddingModel, encode_tree_predicates
from .sampler import SamplerConfig, sample_subtrees, select_top_k, to_tensor
from .tree_cnn import ArchConfig, Batch, ModelParams, forward, huber_loss, loss_and_grads

log = logging.getLogger(__name__)

PREDICT_CHUNK = 256


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    huber_delta: float = 1.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.huber_delta > 0 and self.epsilon > 0):
            raise ValueError("learning_rate, huber_delta and epsilon must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


class Adam:
    def __init__(self, weights: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in weights.items()}
        self.v = {n: np.zeros_like(a) for n, a in weights.items()}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1**self.t
        corr2 = 1.0 - c.beta2**self.t
        for name, w in weights.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            w -= (c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.epsilon)).astype(w.dtype)


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


@dataclass
class Featurized:
    batch: Batch
    query_ids: tuple[str, ...]
    minutes: np.ndarray | None
    dropped_votes: int = 0
    total_votes: int = 0


def featurize(
    traces,
    vocab: Vocab,
    embedder: EmbeddingModel,
    sampler: SamplerConfig,
    transform: TargetTransform | None = None,
    n_slots: int | None = None,
    dtype=np.float32,
) -> Featurized:
    """Turn traces into one padded batch.

    Sub-tree mode pads every sub-tree to ``N`` slots. Full-tree mode keeps one
    sample per query and pads to ``n_slots`` (default: the largest tree given).
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to featurize")
    trees = [build_otp_tree(t.root) for t in traces]
    if sampler.full_tree:
        k = 1
        slots = n_slots or max(t.typed_node_count for t in trees)
    else:
        k, slots = sampler.K, sampler.N
    parts = []
    dropped = total = 0
    for tree in trees:
        pv = encode_tree_predicates(tree, embedder)
        q = select_top_k(sample_subtrees(tree.root, sampler), k)
        dropped += q.dropped_votes
        total += q.total_votes
        parts.append(to_tensor(q, vocab, embedder, slots, pv, dtype=dtype))
    minutes = np.array([t.total_cpu_min for t in traces]) if all(t.total_cpu_min is not None for t in traces) else None
    targets = None if transform is None or minutes is None else transform.apply(minutes).astype(dtype)
    batch = Batch(
        np.stack([p["features"] for p in parts]),
        np.stack([p["left"] for p in parts]),
        np.stack([p["right"] for p in parts]),
        np.stack([p["votes"] for p in parts]),
        targets,
    )
    if dropped:
        log.info("top-K kept %d of %d voting nodes", total - dropped, total)
    return Featurized(batch, tuple(t.query_id for t in traces), minutes, dropped, total)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epoch_seconds: list[float] = field(default_factory=list)


def predict_normalized(params: ModelParams, batch: Batch) -> np.ndarray:
    out = [forward(params, batch.subset(slice(i, i + PREDICT_CHUNK)), "eval") for i in range(0, len(batch), PREDICT_CHUNK)]
    return np.concatenate(out)


def evaluate_loss(params: ModelParams, batch: Batch, delta: float) -> float:
    pred = predict_normalized(params, batch)
    return float(huber_loss(pred, batch.targets.astype(pred.dtype), delta))


def run_epoch(params: ModelParams, opt: Adam, batch: Batch, cfg: TrainConfig, order_rng, drop_rng, epoch: int = 0) -> float:
    """One shuffled pass of Adam updates; returns the sample-weighted mean training loss."""
    order = order_rng.permutation(len(batch))
    total = 0.0
    for step, start in enumerate(range(0, len(batch), cfg.batch_size)):
        idx = np.sort(order[start : start + cfg.batch_size])
        loss, grads = loss_and_grads(params, batch.subset(idx), cfg.huber_delta, True, drop_rng, "batch")
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingDiverged(epoch, step, loss)
        opt.step(params.weights, grads)
        total += loss * len(idx)
    return total / len(batch)


def fit(
    params: ModelParams,
    train_batch: Batch,
    val_batch: Batch,
    cfg: TrainConfig,
) -> TrainResult:
    """Adam with early stopping on validation Huber loss; best weights are restored."""
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ValueError("train and validation splits must be nonempty")
    if train_batch.targets is None or val_batch.targets is None:
        raise ValueError("batches need targets")
    params = params.copy()
    opt = Adam(params.weights, cfg)
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    best = math.inf
    best_params = params.copy()
    best_epoch = 0
    history: list[dict] = []
    seconds: list[float] = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss = run_epoch(params, opt, train_batch, cfg, order_rng, drop_rng, epoch)
        val_loss = evaluate_loss(params, val_batch, cfg.huber_delta)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, -1, val_loss)
        seconds.append(time.perf_counter() - t0)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, train_loss, val_loss, seconds[-1])
        if val_loss < best:
            best, best_epoch = val_loss, epoch
            best_params = params.copy()
        elif epoch - best_epoch >= cfg.patience:
            log.info("early stop at epoch %d, best epoch %d", epoch, best_epoch)
            break
    return TrainResult(best_params, history, best_epoch, seconds)


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PrestroidModel:
    params: ModelParams
    vocab: Vocab
    embedder: EmbeddingModel
    transform: TargetTransform
    sampler: SamplerConfig
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, PrestroidModel):
            return NotImplemented
        return (
            self.params.equals(other.params)
            and self.vocab == other.vocab
            and self.embedder == other.embedder
            and self.transform == other.transform
            and self.sampler == other.sampler
            and self.history == other.history
            and self.meta == other.meta
        )

    def featurize(self, traces) -> Featurized:
        return featurize(traces, self.vocab, self.embedder, self.sampler, None, dtype=self.params.dtype)

    def predict_many(self, traces) -> np.ndarray:
        """Predicted total CPU minutes, one per trace, in input order."""
        traces = list(traces)
        if not traces:
            return np.zeros(0)
        out = []
        for i in range(0, len(traces), PREDICT_CHUNK):
            feats = self.featurize(traces[i : i + PREDICT_CHUNK])
            out.append(self.transform.invert(predict_normalized(self.params, feats.batch)))
        return np.concatenate(out)

    def predict(self, trace: QueryTrace) -> float:
        return float(self.predict_many([trace])[0])


def predict(model: PrestroidModel, trace: QueryTrace) -> float:
    return model.predict(trace)


def train_model(
    splits: dict[str, Workload],
    arch: ArchConfig,
    cfg: TrainConfig,
    embedder: EmbeddingModel,
    vocab: Vocab,
    sampler: SamplerConfig,
    transform: TargetTransform | None = None,
) -> tuple[PrestroidModel, TrainResult]:
    """Featurize the train/val splits, fit the network and bundle it for prediction."""
    train_wl, val_wl = splits.get("train"), splits.get("val")
    if not train_wl or not val_wl or len(train_wl) == 0 or len(val_wl) == 0:
        raise ValueError("train and validation splits must be nonempty")
    dtype = np.dtype(cfg.dtype)
    transform = transform or fit_transform([t.total_cpu_min for t in train_wl])
    tr = featurize(train_wl, vocab, embedder, sampler, transform, dtype=dtype)
    # full-tree validation pads to its own largest tree; the conv stack is size-agnostic
    va = featurize(val_wl, vocab, embedder, sampler, transform, dtype=dtype)
    k = tr.batch.features.shape[1]
    params = ModelParams.init(arch, tr.batch.features.shape[3], k, seed=cfg.seed, dtype=dtype)
    result = fit(params, tr.batch, va.batch, cfg)
    meta = {
        "train_config": cfg.__dict__.copy(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "train_queries": len(train_wl),
        "val_queries": len(val_wl),
    }
    model = PrestroidModel(result.params, vocab, embedder, transform, sampler, result.history, meta)
    return model, result
