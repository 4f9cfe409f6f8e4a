"""Count-weighted ("prediction") loss via the homoscedastic transform.

Scaling observed averages by the square root of their counts turns the
weighted-loss problem into an ordinary one with unit noise variance and a
symmetric shrinkage matrix; URE tuning then applies unchanged.
"""

import numpy as np

from twoway_shrink import CellTable, loss_ss, loss_weighted, weighted_transform

rng = np.random.default_rng(3)
r, c = 6, 5
alpha = rng.normal(0, 0.7, r)
beta = rng.normal(0, 0.5, c)
truth = 2.0 + alpha[:, None] + beta[None, :]
counts = rng.integers(1, 9, size=(r, c))
y = truth + rng.normal(0, 1, (r, c)) / np.sqrt(counts)
table = CellTable(counts, y, sigma2=1.0)

problem = weighted_transform(table)

# the transform preserves the loss exactly
a = rng.normal(0, 1, r * c)
b = rng.normal(0, 1, r * c)
direct = loss_weighted(a, b, table)
transformed = loss_ss(problem.sqrt_k * a, problem.sqrt_k * b)
print(f"weighted loss on original scale:     {direct:.10f}")
print(f"plain loss on transformed scale:     {transformed:.10f}")

# the transformed shrinkage matrix is symmetric, unlike the raw one
v = problem.shrinkage_matrix(1.2, 0.6)
print(f"max asymmetry of shrinkage matrix:   {np.max(np.abs(v - v.T)):.2e}")

hp, eta_hat, objective = problem.fit_ure()
print(f"\nweighted-loss URE fit: lambda = ({hp.lambda_a:.3f}, {hp.lambda_b:.3f}), "
      f"mu = {hp.mu:.3f}, objective = {objective:.5f}")
print(f"weighted loss of the fit vs truth:   "
      f"{loss_weighted(eta_hat, truth.ravel(), table):.5f}")
print(f"weighted loss of raw averages:       "
      f"{loss_weighted(table.y_observed, truth.ravel(), table):.5f}")
