# %% [markdown]
# # From a plan to sub-trees
#
# A logical plan is recast into a binary tree of operators, tables and
# predicates, then cut into small sub-trees. Each node "votes" in exactly one
# sub-tree: the one where its three-level neighbourhood is complete.

# %%
import numpy as np

from prestroid_kit import (
    PlanNode,
    SamplerConfig,
    build_otp_tree,
    parse_predicate_text,
    sample_subtrees,
    select_top_k,
)
from prestroid_kit.otp import iter_otp

scan_a = PlanNode("TableScan", table="orders", predicate=parse_predicate_text("o.status = 'open'"))
scan_b = PlanNode("TableScan", table="lineitem")
join = PlanNode("InnerJoin", predicate=parse_predicate_text("o.id = l.order_id"), children=(scan_a, scan_b))
plan = PlanNode("Aggregate", children=(PlanNode("Filter", predicate=parse_predicate_text("l.qty > 10"), children=(join,)),))

tree = build_otp_tree(plan)
print("typed nodes:", tree.typed_node_count)
for node in iter_otp(tree.root):
    print(f"  {node.kind:4s} {node.label}")

# %% [markdown]
# The join predicate is gone: only the filter and scan predicates survive as
# PRED leaves. A small tree fits into a single sub-tree where everyone votes.

# %%
(only,) = sample_subtrees(tree.root, SamplerConfig(N=15, C=3))
print(len(only), "nodes, votes", only.votes)

# %% [markdown]
# A deep chain shows the decomposition: each sub-tree keeps 15 nodes, the top
# 12 vote, and the node at depth 12 starts the next sub-tree.

# %%
from prestroid_kit.otp import chain_otp

samples = sample_subtrees(chain_otp(40), SamplerConfig(N=15, C=3))
print([(len(s), sum(s.votes)) for s in samples])
query = select_top_k(samples, 2)
print("kept", len(query.subtrees), "sub-trees, dropped", query.dropped_votes, "of", query.total_votes, "votes")

# %% [markdown]
# Why the voting rule matters: three convolution layers computed inside a
# sub-tree match the whole-tree result at every voting node.

# %%
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from tests.helpers import subtree_vs_full_max_diff  # noqa: E402

rng = np.random.default_rng(0)
print("max |sub-tree - full| over 20 random trees:",
      max(subtree_vs_full_max_diff(rng, int(rng.integers(5, 300)), 15, 3) for _ in range(20)))
