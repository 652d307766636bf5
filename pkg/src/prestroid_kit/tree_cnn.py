"""Sub-tree convolution regressor in numpy with hand-written gradients.

Per query: three tree-convolution layers over each of its K sub-trees, a
vote-masked max pool per sub-tree, the K pooled vectors concatenated, two
dense layers (affine, batch normalization, ReLU), and a sigmoid unit.
Dropout is applied to the input of every dense layer during training.

Tensors follow :func:`prestroid_kit.sampler.to_tensor`: each sub-tree owns
``S = N + 1`` rows, row 0 being the all-zero sentinel that absent children
point to. The B x K sub-trees of a batch are flattened into one row matrix
so each layer is a single matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONV_LAYERS = 3


@dataclass(frozen=True)
class ArchConfig:
    conv_channels: tuple[int, ...] = (512, 512, 512)
    dense_units: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.10
    use_batchnorm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    conv_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        if len(self.conv_channels) != CONV_LAYERS:
            raise ValueError(f"exactly {CONV_LAYERS} conv layers are supported")
        if len(self.dense_units) != 2:
            raise ValueError("exactly two hidden dense layers are supported")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.conv_activation not in ("relu", "identity"):
            raise ValueError("conv_activation must be relu or identity")

    @classmethod
    def small(cls, **overrides) -> "ArchConfig":
        return cls(conv_channels=(128, 128, 128), dense_units=(32, 8), **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ArchConfig":
        if name == "default":
            return cls(**overrides)
        if name == "small":
            return cls.small(**overrides)
        raise ValueError(f"unknown arch preset {name!r}")


@dataclass
class Batch:
    features: np.ndarray  # (B, K, S, F)
    left: np.ndarray  # (B, K, S) local slot indices, 0 = absent
    right: np.ndarray
    votes: np.ndarray  # (B, K, S)
    targets: np.ndarray | None = None  # (B,) normalized to [0, 1]

    def __post_init__(self):
        b, k, s, _ = self.features.shape
        for name in ("left", "right", "votes"):
            if getattr(self, name).shape != (b, k, s):
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {(b, k, s)}")
        if self.targets is not None and self.targets.shape != (b,):
            raise ValueError("targets must have shape (B,)")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(
            self.features[idx],
            self.left[idx],
            self.right[idx],
            self.votes[idx],
            None if self.targets is None else self.targets[idx],
        )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


@dataclass
class ModelParams:
    """Trainable weights (``weights``) and batch-norm running statistics (``state``)."""

    arch: ArchConfig
    in_features: int
    k: int
    weights: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, arch: ArchConfig, in_features: int, k: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        w: dict[str, np.ndarray] = {}
        st: dict[str, np.ndarray] = {}
        c_in = in_features
        for layer, c_out in enumerate(arch.conv_channels, start=1):
            for part in ("Wt", "Wl", "Wr"):
                w[f"conv{layer}.{part}"] = _glorot(rng, 3 * c_in, c_out, (c_out, c_in), dtype)
            w[f"conv{layer}.b"] = np.zeros(c_out, dtype)
            c_in = c_out
        d_in = k * arch.conv_channels[-1]
        for layer, units in enumerate(arch.dense_units, start=1):
            w[f"dense{layer}.W"] = _glorot(rng, d_in, units, (d_in, units), dtype)
            w[f"dense{layer}.b"] = np.zeros(units, dtype)
            if arch.use_batchnorm:
                w[f"bn{layer}.gamma"] = np.ones(units, dtype)
                w[f"bn{layer}.beta"] = np.zeros(units, dtype)
                st[f"bn{layer}.mean"] = np.zeros(units, dtype)
                st[f"bn{layer}.var"] = np.ones(units, dtype)
                st[f"bn{layer}.steps"] = np.zeros(1, dtype)
            d_in = units
        w["out.W"] = _glorot(rng, d_in, 1, (d_in, 1), dtype)
        w["out.b"] = np.zeros(1, dtype)
        return cls(arch, in_features, k, w, st)

    @property
    def dtype(self):
        return self.weights["out.b"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.arch,
            self.in_features,
            self.k,
            {n: a.astype(dtype) for n, a in self.weights.items()},
            {n: a.astype(dtype) for n, a in self.state.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def n_trainable(self) -> int:
        return sum(a.size for a in self.weights.values())

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.arch == other.arch
            and self.in_features == other.in_features
            and self.k == other.k
            and self.weights.keys() == other.weights.keys()
            and self.state.keys() == other.state.keys()
            and all(np.array_equal(a, other.weights[n]) for n, a in self.weights.items())
            and all(np.array_equal(a, other.state[n]) for n, a in self.state.items())
        )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def tree_conv_layer(features, left_idx, right_idx, Wt, Wl, Wr, b, activation="relu"):
    """One triangular-kernel convolution over a single tree's slot matrix.

    ``out[i] = act(Wt x_i + Wl x_left(i) + Wr x_right(i) + b)`` with row 0
    (the sentinel) forced back to zero.
    """
    features = np.asarray(features)
    s = features.shape[0]
    left_idx = np.asarray(left_idx)
    right_idx = np.asarray(right_idx)
    if left_idx.shape != (s,) or right_idx.shape != (s,):
        raise ValueError("index arrays must have one entry per slot")
    if s and (left_idx.min() < 0 or right_idx.min() < 0 or left_idx.max() >= s or right_idx.max() >= s):
        raise IndexError("child index out of range")
    sentinel = np.zeros(s, dtype=bool)
    sentinel[0] = True
    out, _ = _conv_forward(features, left_idx, right_idx, sentinel, Wt, Wl, Wr, b, activation)
    return out


def _conv_forward(x, left, right, sentinel, Wt, Wl, Wr, b, activation):
    c_out = Wt.shape[0]
    w_cat = np.concatenate([Wt, Wl, Wr], axis=0)  # (3*out, in)
    y = x @ w_cat.T
    pre = y[:, :c_out] + y[left, c_out : 2 * c_out] + y[right, 2 * c_out :] + b
    pre[sentinel] = 0.0
    out = np.maximum(pre, 0.0) if activation == "relu" else pre
    return out, (x, pre, w_cat)


def _conv_backward(d_out, cache, left, right, sentinel, left_real, right_real, activation):
    x, pre, w_cat = cache
    c_out = pre.shape[1]
    d_pre = d_out * (pre > 0) if activation == "relu" else d_out.copy()
    d_pre[sentinel] = 0.0
    d_y = np.zeros((x.shape[0], 3 * c_out), dtype=d_pre.dtype)
    d_y[:, :c_out] = d_pre
    # every real node has at most one parent, so these scatters never collide
    d_y[left[left_real], c_out : 2 * c_out] = d_pre[left_real]
    d_y[right[right_real], 2 * c_out :] = d_pre[right_real]
    d_w = d_y.T @ x
    d_x = d_y @ w_cat
    grads = (d_w[:c_out], d_w[c_out : 2 * c_out], d_w[2 * c_out :], d_pre.sum(axis=0))
    return d_x, grads


def dynamic_pool(features, votes):
    """Per-channel max over voting rows; zero vector when nothing votes."""
    features = np.asarray(features)
    votes = np.asarray(votes).astype(bool)
    pooled, _ = _pool_forward(features[None], votes[None])
    return pooled[0]


def _pool_forward(h, votes):
    # h: (T, S, C), votes: (T, S) bool
    masked = np.where(votes[:, :, None], h, -np.inf)
    arg = masked.argmax(axis=1)  # (T, C)
    pooled = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
    any_vote = votes.any(axis=1)
    pooled = np.where(any_vote[:, None], pooled, 0.0).astype(h.dtype)
    return pooled, (arg, any_vote)


def _pool_backward(d_pooled, cache, shape):
    arg, any_vote = cache
    t, s, c = shape
    d_h = np.zeros(shape, dtype=d_pooled.dtype)
    d = np.where(any_vote[:, None], d_pooled, 0.0)
    np.put_along_axis(d_h, arg[:, None, :], d[:, None, :], axis=1)
    return d_h


def huber_loss(pred, target, delta: float = 1.0):
    """Mean Huber loss: 0.5 e^2 inside ``delta``, linear outside."""
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(e)
    vals = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return float(np.mean(vals))


def _huber_grad(pred, target, delta):
    e = pred - target
    return np.clip(e, -delta, delta) / e.shape[0]


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _flat_indices(batch: Batch):
    b, k, s, _ = batch.features.shape
    base = (np.arange(b * k, dtype=np.int64) * s)[:, None]
    left_local = batch.left.reshape(b * k, s)
    right_local = batch.right.reshape(b * k, s)
    left = (base + left_local).ravel()
    right = (base + right_local).ravel()
    sentinel = np.zeros((b * k, s), dtype=bool)
    sentinel[:, 0] = True
    return left, right, sentinel.ravel(), left_local.ravel() != 0, right_local.ravel() != 0


def _forward(params: ModelParams, batch: Batch, train: bool, rng, bn_mode: str):
    """Returns predictions and the cache needed by :func:`_backward`.

    ``bn_mode``: ``"batch"`` normalizes with batch statistics and updates the
    running averages, ``"frozen"`` normalizes with the running averages.
    """
    arch = params.arch
    w = params.weights
    dtype = params.dtype
    bsz, k, s, f = batch.features.shape
    if f != params.in_features or k != params.k:
        raise ValueError(f"batch has (K={k}, F={f}), model expects (K={params.k}, F={params.in_features})")
    left, right, sentinel, left_real, right_real = _flat_indices(batch)
    h = batch.features.reshape(bsz * k * s, f).astype(dtype, copy=False)
    cache: dict = {"idx": (left, right, sentinel, left_real, right_real), "conv": []}
    for layer in range(1, CONV_LAYERS + 1):
        h, c = _conv_forward(
            h, left, right, sentinel,
            w[f"conv{layer}.Wt"], w[f"conv{layer}.Wl"], w[f"conv{layer}.Wr"], w[f"conv{layer}.b"],
            arch.conv_activation,
        )
        cache["conv"].append(c)
    c3 = h.shape[1]
    h3 = h.reshape(bsz * k, s, c3)
    votes = batch.votes.reshape(bsz * k, s).astype(bool)
    pooled, pc = _pool_forward(h3, votes)
    cache["pool"] = (pc, h3.shape)
    z = pooled.reshape(bsz, k * c3)
    cache["dense"] = []
    for layer in range(1, len(arch.dense_units) + 2):
        name = f"dense{layer}" if layer <= len(arch.dense_units) else "out"
        mask = None
        if train and arch.dropout_rate > 0:
            keep = 1.0 - arch.dropout_rate
            mask = (rng.random(z.shape) < keep).astype(dtype) / dtype.type(keep)
            z = z * mask
        z_in = z
        pre = z_in @ w[f"{name}.W"] + w[f"{name}.b"]
        entry = {"in": z_in, "mask": mask, "pre": pre}
        if name == "out":
            cache["dense"].append(entry)
            z = pre
            break
        a = pre
        if arch.use_batchnorm:
            a, bnc = _bn_forward(params, layer, a, train and bn_mode == "batch", arch)
            entry["bn"] = bnc
        entry["act"] = a
        cache["dense"].append(entry)
        z = np.maximum(a, 0.0)
    logits = z[:, 0]
    pred = _sigmoid(logits).astype(dtype)
    cache["pred"] = pred
    return pred, cache


def _bn_forward(params, layer, a, use_batch_stats, arch):
    g = params.weights[f"bn{layer}.gamma"]
    beta = params.weights[f"bn{layer}.beta"]
    if use_batch_stats:
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        # bias-corrected moving average: equals the plain EMA started from zero, divided by 1 - m^t
        m = arch.bn_momentum
        steps = params.state[f"bn{layer}.steps"]
        steps += 1
        rate = (1 - m) / (1 - m ** float(steps[0]))
        for key, batch_stat in (("mean", mu), ("var", var)):
            old = params.state[f"bn{layer}.{key}"]
            params.state[f"bn{layer}.{key}"] = (old + rate * (batch_stat - old)).astype(a.dtype)
    else:
        mu = params.state[f"bn{layer}.mean"]
        var = params.state[f"bn{layer}.var"]
    inv = 1.0 / np.sqrt(var + arch.bn_eps)
    xhat = (a - mu) * inv
    return g * xhat + beta, (xhat, inv, use_batch_stats)


def _bn_backward(d_y, bnc, gamma):
    xhat, inv, batch_stats = bnc
    d_gamma = (d_y * xhat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_xhat = d_y * gamma
    if not batch_stats:
        return d_xhat * inv, d_gamma, d_beta
    n = d_y.shape[0]
    d_a = inv / n * (n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
    return d_a, d_gamma, d_beta


def _backward(params: ModelParams, batch: Batch, cache, d_pred) -> dict[str, np.ndarray]:
    arch = params.arch
    w = params.weights
    grads: dict[str, np.ndarray] = {}
    pred = cache["pred"]
    d = (d_pred * pred * (1.0 - pred))[:, None]
    n_dense = len(arch.dense_units)
    for layer in range(n_dense + 1, 0, -1):
        name = f"dense{layer}" if layer <= n_dense else "out"
        entry = cache["dense"][layer - 1]
        if name != "out":
            d = d * (entry["act"] > 0)
            if arch.use_batchnorm:
                d, dg, db = _bn_backward(d, entry["bn"], w[f"bn{layer}.gamma"])
                grads[f"bn{layer}.gamma"] = dg
                grads[f"bn{layer}.beta"] = db
        grads[f"{name}.W"] = entry["in"].T @ d
        grads[f"{name}.b"] = d.sum(axis=0)
        d = d @ w[f"{name}.W"].T
        if entry["mask"] is not None:
            d = d * entry["mask"]
    bsz, k, s, f = batch.features.shape
    pc, shape = cache["pool"]
    d_h = _pool_backward(d.reshape(bsz * k, -1), pc, shape).reshape(bsz * k * s, -1)
    left, right, sentinel, left_real, right_real = cache["idx"]
    for layer in range(CONV_LAYERS, 0, -1):
        d_h, (g_t, g_l, g_r, g_b) = _conv_backward(
            d_h, cache["conv"][layer - 1], left, right, sentinel, left_real, right_real, arch.conv_activation
        )
        grads[f"conv{layer}.Wt"] = g_t
        grads[f"conv{layer}.Wl"] = g_l
        grads[f"conv{layer}.Wr"] = g_r
        grads[f"conv{layer}.b"] = g_b
    return grads


def forward(params: ModelParams, batch: Batch, mode: str = "eval", seed: int = 0, bn_mode: str = "batch"):
    """Predictions in (0, 1). ``mode="train"`` applies dropout drawn from ``seed``."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    rng = np.random.default_rng(seed)
    pred, _ = _forward(params, batch, mode == "train", rng, bn_mode)
    return pred


def loss_and_grads(
    params: ModelParams,
    batch: Batch,
    delta: float = 1.0,
    train: bool = True,
    seed: int | np.random.Generator = 0,
    bn_mode: str = "batch",
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean Huber loss of ``batch`` and its gradient for every trainable weight."""
    if batch.targets is None:
        raise ValueError("batch has no targets")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pred, cache = _forward(params, batch, train, rng, bn_mode)
    targets = batch.targets.astype(pred.dtype)
    loss = huber_loss(pred, targets, delta)
    grads = _backward(params, batch, cache, _huber_grad(pred, targets, delta))
    return loss, grads


def backward(params: ModelParams, batch: Batch, seed: int = 0, delta: float = 1.0, bn_mode: str = "frozen"):
    """Gradients of the mean Huber loss in training mode (dropout from ``seed``)."""
    return loss_and_grads(params, batch, delta, True, seed, bn_mode)[1]
