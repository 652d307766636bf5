# %% [markdown]
# # Training a cost model on a synthetic long-tailed workload
#
# Most queries are small and cheap; a few percent are huge plans that hit the
# 60-minute ceiling. The log-binning baseline predicts the mean cost of plans
# of similar size.
#
# This is the acceptance recipe: 2000 queries and up to 100 epochs, about five
# minutes on one core. Shorter runs stop while the model still over-predicts
# the body of the workload and lose to the baseline.

# %%
import logging

import numpy as np

from prestroid_kit import (
    ArchConfig,
    SamplerConfig,
    SynthConfig,
    TrainConfig,
    build_corpus,
    build_vocabularies,
    build_otp_tree,
    finalize_embedding,
    generate_synthetic_workload,
    log_binning_fit,
    log_binning_predict,
    mse_minutes,
    provisioning_report,
    split_workload,
    train_model,
    train_word2vec,
    workload_distribution,
)

logging.basicConfig(level=logging.WARNING)
workload = generate_synthetic_workload(SynthConfig(count=2000), seed=7)
print(len(workload), "queries; top 1% of plans by size carry",
      f"{workload_distribution(workload, 1)['cost_share']:.0%} of the CPU time")

# %%
splits = split_workload(workload, seed=0)
train = splits["train"]
emb = finalize_embedding(train_word2vec(build_corpus(train), 32, seed=0), [build_otp_tree(t.root) for t in train])
vocab = build_vocabularies(train)
model, result = train_model(
    splits, ArchConfig.small(), TrainConfig(learning_rate=1e-3, max_epochs=100), emb, vocab, SamplerConfig(15, 3, 5)
)
print("epochs", len(result.history), "best", result.best_epoch)

# %% [markdown]
# Compare in minutes squared on the validation split.

# %%
val = list(splits["val"])
actual = np.array([t.total_cpu_min for t in val])
pred = model.predict_many(val)
baseline = log_binning_fit(train, 20)
base = np.array([log_binning_predict(baseline, t) for t in val])
m, b = mse_minutes(pred, actual), mse_minutes(base, actual)
print(f"model MSE {m:.2f}, log-binning MSE {b:.2f}, ratio {m / b:.3f}")
print("model provisioning", provisioning_report(pred, actual))
print("baseline provisioning", provisioning_report(base, actual))
