"""
Scoring the two reference backbones
===================================

Load the bundled A1 and A2 descriptions, count their FLOPs and compute the
entropy fitness both in closed form and by sampling a random forward pass.
"""

from entronas.arch import InputShape, estimate_flops, fixture
from entronas.entropy import McConfig, analytic_stage_stats, mc_stage_stats
from entronas.fitness import A1, A2, fitness, stage_score

shape = InputShape(320, 320)

for name, weights in (("a1", A1), ("a2", A2)):
    arch = fixture(name)
    flops = estimate_flops(arch, shape)
    stats = analytic_stage_stats(arch, shape)
    print(f"{arch.name}: {flops.total / 1e9:.2f} GFLOPs, "
          f"Z = {fitness(stats, weights).value:.2f} under {weights.label()}")
    for s in stats:
        print(f"  C{s.stage_index}  ln var {s.log_effective_variance:9.2f}  Z' {stage_score(s):9.2f}")

# The sampled estimate runs the network on Gaussian noise with Gaussian
# weights. A smaller input keeps it quick; the conv stages do not care.
small = InputShape(64, 64)
arch = fixture("a1")
mc = mc_stage_stats(arch, McConfig(repeats=2, seed=0, shape=small))
an = analytic_stage_stats(arch, small)
print("\nstage   analytic   sampled")
for m, a in zip(mc, an):
    print(f"  C{m.stage_index}  {a.log_effective_variance:9.2f}  {m.log_effective_variance:9.2f}")
# The Transformer row sits a little below the closed form: softmax
# attention averages tokens instead of summing them.
