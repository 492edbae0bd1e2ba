"""
Which architecture parameters drive the score
=============================================

Sample networks around a shallow starting point under the A1 budget, rank
correlate each summary parameter with fitness, then hold A1's CNN fixed
and sweep the Transformer widths.
"""

from entronas.analysis import bivariate_sweep, sample_dataset
from entronas.arch import estimate_flops, fixture, shallow_seed
from entronas.fitness import A1

budget = estimate_flops(fixture("a1")).total
ds = sample_dataset(shallow_seed(), 2000, A1, flops_budget=budget, seed=0)
for row in ds.correlations(n_perm=200):
    print(f"{row.parameter:<16} rho={row.rho:6.3f}{row.stars}")

# Depth dominates: every extra layer adds a full ln(c*k^2) term, while
# width and kernel size only enter through logarithms.

sweep = bivariate_sweep(fixture("a1"), A1)
print(f"\nsweep over {len(sweep)} Transformer shapes")
for row in sweep.correlations(n_perm=200):
    print(f"{row.parameter:<16} rho={row.rho:6.3f}{row.stars}")
