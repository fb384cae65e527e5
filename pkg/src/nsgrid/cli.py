"""``ns-grid``: demo generation, Stage-I pretraining, GRPO training and evaluation.

Every command reads the same JSON config. Outputs go to a run directory
``<out_dir>/<config hash>-<timestamp>`` created by ``gen-demos``; later commands
reuse the newest run directory for the config's hash unless ``--run-dir`` is
given. Inside it each seed has its own ``seed<k>/`` folder.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bc, checkpoint, evaluate, grpo
from . import config as cfgmod
from .agent import Agent
from .env import ManipGrid, read_demo

log = logging.getLogger("nsgrid")

STAGE1 = "stage1"


class UsageError(RuntimeError):
    """A missing prerequisite or bad argument, reported without a traceback."""


# run directory ------------------------------------------------------------------

def _new_run_dir(cfg: cfgmod.Config) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.out_dir) / f"{cfg.digest()}-{stamp}"
    path, k = base, 0
    while path.exists():
        k += 1
        path = base.with_name(f"{base.name}-{k}")
    path.mkdir(parents=True)
    return path


def _find_run_dir(cfg: cfgmod.Config, explicit: str | None, config_path: str) -> Path:
    if explicit:
        path = Path(explicit)
        if not path.is_dir():
            raise UsageError(f"run directory {path} does not exist")
        return path
    runs = sorted(Path(cfg.out_dir).glob(f"{cfg.digest()}-*")) if Path(cfg.out_dir).is_dir() else []
    if not runs:
        raise UsageError(f"no run directory for config {cfg.digest()} under {cfg.out_dir}/; "
                         f"run `ns-grid gen-demos --config {config_path}` first")
    return runs[-1]


def _seed_dir(run: Path, seed: int) -> Path:
    return run / f"seed{seed}"


def _demo_files(run: Path, seed: int) -> list[Path]:
    return sorted((_seed_dir(run, seed) / "demos").glob("task*_demo*.jsonl"))


# commands ------------------------------------------------------------------------

def cmd_gen_demos(cfg: cfgmod.Config, args) -> Path:
    run = _new_run_dir(cfg)
    cfgmod.dump(cfg, run / "config.json")
    for seed in cfg.seeds:
        out = _seed_dir(run, seed) / "demos"
        demos = bc.generate_demos(cfg.tasks, cfg.n_demos, seed, cfg.model.grid, out)
        manifest = {"config_hash": cfg.digest(), "seed": seed,
                    "files": [p.name for p in sorted(out.glob("*.jsonl"))]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        log.info("seed %d: %d demos in %s", seed, len(demos), out)
    print(run)
    return run


def cmd_pretrain(cfg: cfgmod.Config, args) -> None:
    run = _find_run_dir(cfg, args.run_dir, args.config)
    for seed in cfg.seeds:
        files = _demo_files(run, seed)
        if not files:
            raise UsageError(f"no demos for seed {seed} in {run}; run `ns-grid gen-demos --config "
                             f"{args.config}` first")
        demos = [read_demo(p) for p in files]
        bc_cfg, _ = cfg.for_seed(seed)
        agent = Agent(cfg.model, seed)
        _, report, losses = bc.stage_one(agent, demos, bc_cfg)
        extra = {"seed": seed, "classifier_best_epoch": report.best_epoch,
                 "classifier_best_val_accuracy": report.best_val_accuracy,
                 "solver_final_loss": losses[-1] if losses else None}
        path = checkpoint.save(_seed_dir(run, seed) / STAGE1, agent, cfg.digest(), "stage1", extra=extra)
        log.info("seed %d: stage-I checkpoint %s (val acc %.3f, solver loss %.4f)",
                 seed, path, report.best_val_accuracy, extra["solver_final_loss"] or float("nan"))


def cmd_train(cfg: cfgmod.Config, args) -> None:
    run = _find_run_dir(cfg, args.run_dir, args.config)
    flags = [a for a in cfgmod.ABLATIONS if getattr(args, a)]
    eff = cfgmod.with_ablations(cfg, flags)
    tag = cfgmod.ablation_tag(flags)
    for seed in cfg.seeds:
        stage1 = _seed_dir(run, seed) / STAGE1
        if not checkpoint.exists(stage1):
            raise UsageError(f"no stage-I checkpoint for seed {seed} in {run}; run "
                             f"`ns-grid pretrain --config {args.config}` first")
        agent, _ = checkpoint.load(stage1)
        reference, _ = checkpoint.load(stage1)
        if not eff.model.sparsify:
            agent.cfg = reference.cfg = replace(agent.cfg, sparsify=False)
        tasks = [read_demo(p).task for p in _demo_files(run, seed)]
        _, rl_cfg = eff.for_seed(seed)
        result = grpo.train(agent, reference, tasks, rl_cfg, lambda: ManipGrid(eff.model.grid))
        out = _seed_dir(run, seed) / f"train-{tag}"
        checkpoint.save(out, agent, cfg.digest(), "grpo", bank=result.bank,
                        extra={"seed": seed, "ablations": flags, "effective_config_hash": eff.digest()})
        (out / "metrics.csv").write_text(result.metrics_csv(cfg.digest()))
        (out / "timing.csv").write_text(result.timing_csv(cfg.digest()))
        last = result.rows[-1] if result.rows else {}
        log.info("seed %d: %s done (%d iterations, last success %.3f, aborted %d)", seed, tag,
                 len(result.rows), last.get("success_rate", float("nan")), len(result.aborted))


EVAL_FIELDS = ["seed", "task_index", "instruction", "successes", "episodes", "success_rate",
               "solver_calls_ok", "config_hash"]


def _resolve_checkpoints(run: Path, cfg: cfgmod.Config, name: str) -> list[tuple[int, Path]]:
    direct = Path(name)
    if checkpoint.exists(direct):
        _, meta = checkpoint.load(direct)
        return [(int(meta.get("seed", 0)), direct)]
    found = []
    for seed in cfg.seeds:
        path = _seed_dir(run, seed) / name
        if not checkpoint.exists(path):
            hint = "pretrain" if name == STAGE1 else "train"
            raise UsageError(f"no checkpoint {name!r} for seed {seed} in {run}; run "
                             f"`ns-grid {hint} --config <file>` first")
        found.append((seed, path))
    return found


def cmd_eval(cfg: cfgmod.Config, args) -> None:
    run = _find_run_dir(cfg, args.run_dir, args.config)
    rows = []
    per_task: dict[int, list[float]] = {}
    for seed, path in _resolve_checkpoints(run, cfg, args.checkpoint):
        agent, meta = checkpoint.load(path)
        tasks = [read_demo(p).task for p in _demo_files(run, seed)]
        # a checkpoint trained without the plan constraint is also decoded without it
        constrained = "no_plan_constraint" not in meta.get("ablations", [])
        results = evaluate.evaluate(agent, tasks, cfg.eval.episodes, seed, perturbed=args.perturbed,
                                    distractors=cfg.eval.distractors, constrained=constrained)
        for i, r in enumerate(results):
            rows.append([seed, i, r.instruction, r.successes, r.episodes, repr(r.rate),
                         int(r.solver_calls_ok), cfg.digest()])
            per_task.setdefault(i, []).append(r.rate)
    label = Path(args.checkpoint).name + ("-perturbed" if args.perturbed else "")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    w.writerows(rows)
    out = run / f"eval-{label}.csv"
    out.write_text(buf.getvalue())

    seed_means = {}
    for row in rows:
        seed_means.setdefault(row[0], []).append(float(row[5]))
    means = [float(np.mean(v)) for v in seed_means.values()]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_index", "mean_success", "std_success", "n_seeds", "config_hash"])
    for i, rates in sorted(per_task.items()):
        w.writerow([i, repr(float(np.mean(rates))), repr(float(np.std(rates))), len(rates), cfg.digest()])
    w.writerow(["all", repr(float(np.mean(means))), repr(float(np.std(means))), len(means), cfg.digest()])
    (run / f"eval-{label}-summary.csv").write_text(buf.getvalue())
    print(f"{label}: success {np.mean(means):.3f} ± {np.std(means):.3f} over {len(means)} seed(s) -> {out}")


# entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ns-grid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--run-dir", help="run directory (default: newest for the config hash)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen-demos", help="generate scripted-expert demonstrations"))
    common(sub.add_parser("pretrain", help="Stage I: classifier and solver warm start"))
    tr = sub.add_parser("train", help="GRPO fine-tuning from the Stage-I checkpoint")
    common(tr)
    for a in cfgmod.ABLATIONS:
        tr.add_argument("--" + a.replace("_", "-"), dest=a, action="store_true")
    ev = sub.add_parser("eval", help="argmax evaluation of a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", required=True,
                    help="checkpoint directory, or a name inside each seed folder "
                         "(e.g. stage1, train-full)")
    ev.add_argument("--perturbed", action="store_true",
                    help="re-seed layouts and add distractors")
    return p


COMMANDS = {"gen-demos": cmd_gen_demos, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config)
        if args.command == "gen-demos" and args.run_dir:
            raise UsageError("gen-demos always creates a new run directory; drop --run-dir")
        COMMANDS[args.command](cfg, args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"ns-grid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
