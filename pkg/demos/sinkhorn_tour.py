"""Entropic transport on a small random cost: cost and entropy as lambda shrinks.

    python demos/sinkhorn_tour.py
"""

import numpy as np

from remote_fusion.ot import exact_ot_oracle, solve

rng = np.random.default_rng(0)
C = rng.random((5, 5))
perm, best = exact_ot_oracle(C)
print(f"best permutation {perm}, cost {best:.4f}")
for lam in (1.0, 0.5, 0.1, 0.05, 0.01, 0.001):
    plan = solve(C, lam)
    print(
        f"lambda={lam:<6} cost={plan.transport_cost:.4f} entropy={plan.entropy:.4f} "
        f"iters={plan.iterations} converged={plan.converged}"
    )
