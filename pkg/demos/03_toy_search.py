"""
Evolution on a space small enough to enumerate
==============================================

Only the kernel size and depth of stages C4 and C5 are allowed to change.
That leaves a few thousand feasible networks under the budget, so the
search result can be compared with the true optimum.
"""

import itertools
from dataclasses import replace

from entronas.arch import InputShape, estimate_flops, shallow_seed
from entronas.entropy import McConfig
from entronas.evolution import SearchConfig, evolve, score_architecture
from entronas.fitness import A1

shape = InputShape(64, 64)
mc = McConfig(shape=shape)
seed = shallow_seed()


def variant(k4, l4, k5, l5):
    a = seed.replace_stage(3, replace(seed[3], kernel=k4, layers=l4))
    return a.replace_stage(4, replace(a[4], kernel=k5, layers=l5))


budget = estimate_flops(variant(5, 14, 5, 14), shape).total

best, count = None, 0
for k4, k5 in itertools.product((3, 5), repeat=2):
    for l4 in range(1, 200):
        if estimate_flops(variant(k4, l4, k5, 1), shape).total > budget:
            break
        for l5 in range(1, 200):
            a = variant(k4, l4, k5, l5)
            if estimate_flops(a, shape).total > budget:
                break
            count += 1
            z = score_architecture(a, A1, mc=mc).value
            if best is None or z > best[0]:
                best = (z, k4, l4, k5, l5)
print(f"{count} feasible points, optimum Z = {best[0]:.2f} at {best[1:]}")

cfg = SearchConfig(seed_arch=seed, flops_budget=budget, population=16, iterations=2000,
                   weights=A1, mc=mc, mutable_stages=(3, 4), mutable_params=("kernel", "layers"))
result = evolve(cfg)
a = result.best
print(f"search found Z = {result.best_fitness.value:.2f} at "
      f"{(a[3].kernel, a[3].layers, a[4].kernel, a[4].layers)}")

# best fitness every 250 iterations; it never goes down
print([round(r.best_fitness, 1) for r in result.history.records[::250]])
