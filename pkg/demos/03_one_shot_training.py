"""One demo per task, Stage-I warm start, then a few GRPO iterations.

A short version of the full pipeline (the ns-grid CLI runs the long one).
Run: python demos/03_one_shot_training.py
"""
from nsgrid import bc, grpo
from nsgrid import evaluate as ev
from nsgrid.agent import Agent, ModelConfig
from nsgrid.env import ManipGrid

tasks = ["put the butter in the basket", "open the microwave and put the alphabet soup in the microwave"]
demos = bc.generate_demos(tasks, 1, seed=0)
print("demo lengths:", [len(d) for d in demos])

agent = Agent(ModelConfig(), seed=0)
reference, report, losses = bc.stage_one(agent, demos, bc.BCConfig(cls_epochs=100, solver_epochs=100))
print(f"classifier val acc {report.best_val_accuracy:.2f}, solver loss {losses[0]:.3f} -> {losses[-1]:.4f}")

layouts = [d.task for d in demos]
before = ev.evaluate(agent, layouts, episodes=1)
print("stage-I success per task:", [r.rate for r in before])


def show(it, row):
    if it % 5 == 4:
        print(f"iter {it:3d}  group success {row['success_rate']:.2f}  "
              f"return {row['mean_return']:.2f}  KL {row['mean_kl']:.3f}")


grpo.train(agent, reference, layouts, grpo.RLConfig(iterations=20), lambda: ManipGrid(8), callback=show)
after = ev.evaluate(agent, layouts, episodes=1)
print("after GRPO success per task:", [r.rate for r in after])
