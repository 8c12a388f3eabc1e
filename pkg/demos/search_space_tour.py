"""A walk through the search space: block ids, genome text, parameter windows.

Run with ``python3 demos/search_space_tour.py``; takes a few seconds.
"""

import numpy as np

from tamnas.network import build_network
from tamnas.space import FULL, MINI, build_param_table, cardinality, count_params, decode, random_genome
from tamnas.supernet import (
    BLOCK_ONLY,
    JOINT,
    enter_joint_phase,
    initial_sampler_state,
    phase_window,
    sample_architecture,
    widen_channel_space,
)
from tamnas.blocks import BLOCK_SPECS

print("block ids")
for bid, spec in enumerate(BLOCK_SPECS):
    print(f"  {bid:2d}  {spec.label:10s} stride-2 ok: {not spec.pure_robust}")

print(f"\nfull space holds {cardinality(FULL):.3e} genomes, mini {cardinality(MINI):.3e}")

table = build_param_table(FULL)
lo, hi = table.bounds(range(10))
print(f"full subnets range from {lo:,} to {hi:,} parameters (fixed part {table.fixed:,})")

rng = np.random.default_rng(0)
g = random_genome(FULL, rng)
print(f"\na random genome: {g.text()}")
print(f"  table count {count_params(g, table):,}, built network {build_network(FULL, g, rng).param_count():,}")
assert decode(g.text(), FULL) == g

# the sampler only hands out subnets inside the phase window
state = initial_sampler_state(FULL, 0)
for phase in (BLOCK_ONLY, JOINT):
    if phase == JOINT:
        state = widen_channel_space(enter_joint_phase(state, FULL), 999)
    sizes = [count_params(sample_architecture(state, table, rng), table) for _ in range(200)]
    w = phase_window(FULL, phase)
    print(f"{phase:5s} window {w[0]:,}..{w[1]:,}: 200 samples span {min(sizes):,}..{max(sizes):,}")

mini = build_param_table(MINI)
print(f"\nmini windows scale with the fixed part: {phase_window(MINI, BLOCK_ONLY)} and {phase_window(MINI, JOINT)}")
print(f"mini subnets range {mini.bounds(range(10))}")
