"""Why Add input buffers must cover the skip path.

Simulates a two-block residual network with the planner's buffer depths, then
again with the identity-skip input of the second Add one line short.
"""

from dataclasses import replace

from layerpipe import flow
from layerpipe.netgen import NetSpec, generate
from layerpipe.pipesim import simulate

c = flow.compile_graph(generate(NetSpec("resnet-like", depth=2, channels=4, input_shape=(8, 8, 3))))
images = flow.random_images(c.graph, 4)
add = c.plans["add02"]
skip = c.graph["add02"].inputs.index("relu04")
print(f"add02 inputs {c.graph['add02'].inputs}, depths {add.depths}, required {add.required_depths}")

rep = simulate(c.graph, c.plans, c.layers, images)
print(f"planned depths: deadlock={rep.deadlock}, {len(rep.outputs)} images in {rep.cycles} cycles")

depths = list(add.depths)
depths[skip] = add.required_depths[skip] - 1
short = replace(c.plans, plans={**c.plans.plans, "add02": replace(add, depths=tuple(depths))})
rep = simulate(c.graph, short, c.layers, images)
print(f"skip depth {depths[skip]}: deadlock={rep.deadlock} at cycle {rep.cycles}")
for nid, s in rep.deadlock_snapshot.items():
    if s["state"] != "idle":
        print(f"  {nid:<12} {s['state']:<14} ports {s.get('ports', '-')}")
