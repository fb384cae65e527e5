"""From an instruction to a plan, and how the pointer walks it.

Run: python demos/01_plan_and_pointer.py
"""
import numpy as np

from nsgrid import classifier
from nsgrid.plan import N_OPS, parse_instruction, plan_from_json, plan_to_json

instruction = "open the microwave and put the alphabet soup in the microwave"
plan = parse_instruction(instruction)
print(instruction)
for m in range(1, plan.M + 1):
    print(f"  u{m} = {plan[m]}")

text = plan_to_json(plan)
print("\nplan JSON:", text)
assert plan_from_json(text) == plan

# A noisy classifier: the pointer may stay or step forward by one, never more.
rng = np.random.default_rng(0)
m = 1
trace = [m]
for t in range(12):
    dist = rng.dirichlet(np.ones(N_OPS) * 0.3)
    pi = classifier.masked_index_policy(dist, plan, m)
    m, prim = classifier.constrained_inference(dist, plan, m)
    trace.append(m)
    print(f"t={t:2d}  admissible mass {np.round(pi, 2)}  -> m={m} {prim}")
print("\npointer trace:", trace)
