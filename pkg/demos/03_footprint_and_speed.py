# %% [markdown]
# # Memory footprint and epoch time
#
# Padding every plan to the largest one wastes memory: a batch holds
# `max_nodes + 1` rows per query. Sub-trees hold `K * (N + 1)` rows instead.

# %%
from prestroid_kit import footprint_report

for n, k in [(15, 5), (15, 9), (32, 5)]:
    r = footprint_report(1945, (n, k), None, batch_size=32, feature_size=64)
    print(f"N={n:2d} K={k}: {r.sub_features:>9,d} vs {r.ref_features:>10,d} feature elements, {r.reduction_factor:5.1f}x smaller")

# %% [markdown]
# Smaller tensors mean faster epochs. Time one epoch each way on a small
# synthetic workload (numbers depend on the machine).

# %%
import logging

from prestroid_kit import SynthConfig, generate_synthetic_workload
from prestroid_kit.cli import bench_epochs, resolve_config

logging.basicConfig(level=logging.WARNING)
cfg = resolve_config(None, {"embedding": {"min_count": 2}})
wl = generate_synthetic_workload(SynthConfig(count=400), seed=3)
sub = bench_epochs(wl, cfg, full_tree=False, repetitions=1)
full = bench_epochs(wl, cfg, full_tree=True, repetitions=1)
print(f"sub-tree epoch {sub:.2f}s, full-tree epoch {full:.2f}s, speed-up {full / sub:.1f}x")
