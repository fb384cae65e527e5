"""Which grid cells does the sparsifier read for a given primitive?

An untrained agent already attends to the referenced object thanks to the
entity-direction prior in the key map.
Run: python demos/02_token_selection.py
"""
import numpy as np

from nsgrid.agent import Agent, ModelConfig
from nsgrid.env import ManipGrid, Task

agent = Agent(ModelConfig(), seed=0)
task = Task.from_instruction("put the butter in the basket", seed=3)
env = ManipGrid(8)
obs = env.reset(task)
tokens = agent.featurizer.encode_tokens(obs, task.instruction)[None]

for m in range(1, env.plan.M + 1):
    prim = env.plan[m]
    _, info = agent.decision_tokens(tokens, [prim], obs.proprio[None], "hard")
    idx, w = info["index"][0], info["weights"][0]
    top = np.argsort(-w)[:3]
    cells = [(int(idx[j]) // 8, int(idx[j]) % 8) if idx[j] < 64 else "proprio" for j in top]
    print(f"{str(prim):28s} top cells {cells}  weights {np.round(w[top], 3)}")

s = env.state
where = {k: v.position for group in (s.objects, s.containers, s.devices) for k, v in group.items()}
print("\nentity cells (x, y):", where)
