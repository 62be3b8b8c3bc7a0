"""Unbalanced transport on a toy instance: why an outlier gets dropped.

Source mass sits on three points; the target has two clusters plus nothing
near the third source point. Balanced OT must ship that mass across the
plane. As the KL marginal penalty weakens, the unbalanced plan destroys
it instead. Run: ``python3 demos/discrete_uot.py``.
"""

import numpy as np

from uotlab.cost import EntropyFn
from uotlab.oracle import (marginal_deviation, solve_uot_bruteforce, solve_uot_sinkhorn,
                           squared_euclidean_cost)

x = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 3.0]])
y = np.array([[0.0, 0.1], [1.0, -0.1]])
mu = np.array([1.0, 1.0, 0.5])
nu = np.array([1.0, 1.0])
cost = squared_euclidean_cost(x, y)

print("scale   mass kept from outlier   total mass   marginal deviation")
for scale in (100.0, 10.0, 1.0, 0.1):
    fn = EntropyFn("kl", scale)
    plan = solve_uot_sinkhorn(mu, nu, cost, 1e-2, fn, fn)
    kept = plan.row_marginal[2] / mu[2]
    print(f"{scale:6.1f}   {kept:22.3f}   {plan.pi.sum():10.3f}   "
          f"{marginal_deviation(plan, mu, nu):18.3f}")

# the two independent solvers agree on the same problem
a = solve_uot_sinkhorn(mu, nu, cost, 1e-2)
b = solve_uot_bruteforce(mu, nu, cost, 1e-2)
print(f"\nSinkhorn vs Newton brute force, max entry difference: {np.abs(a.pi - b.pi).max():.2e}")
