"""Greedy balancing of a chain whose layer costs differ by more than 30x.

Prints per-stage cost before and after balancing, and the bottleneck reached
by the exact partition-aware cost model against the naive entries/S model.
"""

from layerpipe import flow
from layerpipe.graph import OpKind
from layerpipe.netgen import skewed_chain
from layerpipe.planner import balance, naive_vs_exact

g, _ = flow.prepare(skewed_chain(seed=0))
target = 8 * flow.s1_dsps(g)
plans = balance(g, target)

print(f"{'stage':<8} {'kernel':>7} {'S':>4} {'before':>9} {'after':>9}")
for n in g:
    if n.kind is OpKind.CONV2D:
        p = plans[n.id]
        print(f"{n.id:<8} {n.kernel.kh}x{n.kernel.kw:<5} {p.S:>4} {plans.unbalanced_cycles[n.id]:>9} {p.cycles_per_image:>9}")

worst = max(plans.unbalanced_cycles.values())
print(f"\nDSPs {plans.total_dsps}/{target}; bottleneck {worst} -> {plans.bottleneck_cycles} cycles/image "
      f"({worst / plans.bottleneck_cycles:.1f}x)")
exact, naive = naive_vs_exact(g, target)
print(f"exact model bottleneck {exact}, naive model bottleneck {naive} ({naive / exact - 1:+.1%} for naive)")
