# %% [markdown]
# # Constraint sets and the hybrid split
#
# Builds the two interaction constraint sets for a small space-time grid,
# reduces them to full rank and splits each into an absorbed block (handled
# by the projection Z) and a kriging block.

# %%
import numpy as np
import scipy.sparse as sp

from hymik.constraints import (build_gc_constraints, build_sc_constraints, reduce_to_full_rank,
                               split_constraints)

n_T, n_S = 6, 5
for build in (build_gc_constraints, build_sc_constraints):
    raw = build(n_T, n_S)
    full = reduce_to_full_rank(raw)
    print(f"{raw.label}: {raw.n_rows} rows, rank {full.n_rows}")
    for policy in ("spatial_first", "temporal_first"):
        s = split_constraints(full, n_T, n_S, policy)
        Z = s.Z.toarray()
        print(f"  {policy:15s} k1={s.k1:2d} k2={s.k2:2d}  "
              f"|Z^2 - Z|={np.abs(Z @ Z - Z).max():.1e}  |A1 Z|={np.abs(s.A1 @ Z).max():.1e}")

# %% [markdown]
# The projection is dense within each absorbed group, so its sparsity depends
# on which side is absorbed: grouping along time touches n_T entries per row,
# grouping along space touches n_S.

# %%
full = reduce_to_full_rank(build_gc_constraints(10, 544))
for policy in ("spatial_first", "temporal_first"):
    s = split_constraints(full, 10, 544, policy)
    print(policy, f"nnz(Z) fraction {s.Z.nnz / s.Z.shape[0] ** 2:.4%}", f"k2 = {s.k2}")
