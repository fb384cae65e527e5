"""ManipGrid: a deterministic instruction-conditioned grid manipulation world.

The gripper moves continuously (at most one cell per axis per step) above a
``size x size`` board. Closing the gripper at low lift over a cell picks up the
top item there, or otherwise toggles an openable container or a device.
Opening it while holding deposits the item into/onto whatever is under it.

Each plan primitive has one goal predicate. The environment latches predicates
the first time they hold and pays ``+1`` for each newly latched one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .plan import M_MAX, Plan, PrimitiveOp, parse_instruction, plan_to_json
from .vocab import (COLORS, CONTAINERS, ENTITIES, ENTITY_INDEX, FLAG_CHANNELS, ITEMS,
                    N_CELL_CODES, OPENABLE, RELATIONS, split_support)

HOME = (0, 0)
LOW_LIFT = 0.5
DEADBAND = 0.25
T_PER_PRIMITIVE = 40
A_DIM = 4
PROPRIO_DIM = 5

_CH = {name: len(ENTITIES) + i for i, name in enumerate(FLAG_CHANNELS)}


class ExpertFailure(RuntimeError):
    pass


@dataclass
class ObjectState:
    id: str
    kind: str                       # "item" or "support"
    color: str
    position: tuple[int, int]
    held: bool = False
    on: str | None = None           # support id the item rests on
    inside: str | None = None       # container id holding the item


@dataclass
class ContainerState:
    id: str
    position: tuple[int, int]
    open: bool
    contents: list[str] = field(default_factory=list)


@dataclass
class DeviceState:
    id: str
    position: tuple[int, int]
    on: bool


@dataclass
class GripperState:
    x: float
    y: float
    lift: float = 0.0
    closed: bool = False
    held_object: str | None = None

    @property
    def cell(self) -> tuple[int, int]:
        return (int(math.floor(self.x + 0.5)), int(math.floor(self.y + 0.5)))


@dataclass
class WorldState:
    size: int
    objects: dict[str, ObjectState]
    containers: dict[str, ContainerState]
    devices: dict[str, DeviceState]
    gripper: GripperState
    step_count: int = 0

    def position_of(self, eid: str) -> tuple[int, int]:
        for table in (self.objects, self.containers, self.devices):
            if eid in table:
                return table[eid].position
        raise KeyError(eid)

    def has(self, eid: str) -> bool:
        return eid in self.objects or eid in self.containers or eid in self.devices


@dataclass(frozen=True)
class Observation:
    image_features: np.ndarray      # (size, size, N_CELL_CODES) multi-hot cell codes
    proprio: np.ndarray             # (x, y, lift, closed, held), all in [0, 1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Observation)
                and np.array_equal(self.image_features, other.image_features)
                and np.array_equal(self.proprio, other.proprio))

    def to_json(self) -> dict:
        cells = [[int(x), int(y), np.flatnonzero(self.image_features[x, y]).tolist()]
                 for x, y in zip(*np.nonzero(self.image_features.any(axis=-1)))]
        return {"cells": cells, "proprio": self.proprio.tolist()}

    @classmethod
    def from_json(cls, data: dict, size: int) -> "Observation":
        img = np.zeros((size, size, N_CELL_CODES))
        for x, y, codes in data["cells"]:
            img[x, y, codes] = 1.0
        return cls(img, np.array(data["proprio"], dtype=np.float64))


Goal = tuple


def goals_for(plan: Plan) -> list[Goal]:
    goals: list[Goal] = []
    for p in plan.primitives:
        if p.op is PrimitiveOp.PICK:
            goals.append(("held", p.object))
        elif p.op is PrimitiveOp.PLACE_ON:
            goals.append(("on", p.object, p.support))
        elif p.op is PrimitiveOp.PLACE_IN:
            goals.append(("in", p.object, p.support))
        elif p.op is PrimitiveOp.PLACE_REL:
            goals.append(("at", p.object, p.support))
        elif p.op is PrimitiveOp.OPEN:
            goals.append(("open", p.object))
        elif p.op is PrimitiveOp.CLOSE:
            goals.append(("closed", p.object))
        elif p.op is PrimitiveOp.TURN_ON:
            goals.append(("device_on", p.object))
        elif p.op is PrimitiveOp.TURN_OFF:
            goals.append(("device_off", p.object))
        else:
            raise ValueError(f"primitive {p} has no goal")
    return goals


@dataclass(frozen=True)
class Task:
    instruction: str
    goals: tuple[Goal, ...]
    seed: int = 0

    @classmethod
    def from_instruction(cls, instruction: str, seed: int = 0) -> "Task":
        plan = parse_instruction(instruction)
        return cls(instruction, tuple(goals_for(plan)), seed)

    def with_seed(self, seed: int) -> "Task":
        return Task(self.instruction, self.goals, seed)

    def to_json(self) -> dict:
        return {"instruction": self.instruction, "goals": [list(g) for g in self.goals],
                "seed": self.seed}

    @classmethod
    def from_json(cls, data: dict) -> "Task":
        return cls(data["instruction"], tuple(tuple(g) for g in data["goals"]), int(data["seed"]))


def rel_target(state: WorldState, support: str) -> tuple[int, int]:
    rel, ref = split_support(support)
    x, y = state.position_of(ref)
    dx, dy = RELATIONS[rel]
    return (x + dx, y + dy)


def goal_check(state: WorldState, task: Task) -> list[bool]:
    """Current truth value of every goal predicate (pure)."""
    out = []
    for g in task.goals:
        kind = g[0]
        if kind == "held":
            out.append(state.gripper.held_object == g[1])
        elif kind == "on":
            o = state.objects.get(g[1])
            out.append(o is not None and not o.held and o.on == g[2])
        elif kind == "in":
            o = state.objects.get(g[1])
            out.append(o is not None and not o.held and o.inside == g[2])
        elif kind == "at":
            o = state.objects.get(g[1])
            out.append(o is not None and not o.held and o.on is None and o.inside is None
                       and o.position == rel_target(state, g[2]))
        elif kind == "open":
            out.append(state.containers[g[1]].open)
        elif kind == "closed":
            out.append(not state.containers[g[1]].open)
        elif kind == "device_on":
            out.append(state.devices[g[1]].on)
        elif kind == "device_off":
            out.append(not state.devices[g[1]].on)
        else:
            raise ValueError(f"unknown goal {g!r}")
    return out


def _stable_rng(*parts) -> np.random.Generator:
    h = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(h, "little"))


def scene_entities(plan: Plan, distractors: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Objects, containers and devices present for a plan (independent of the layout seed)."""
    referenced: list[str] = []
    for p in plan.primitives:
        for arg in (p.object, p.support):
            if arg is None:
                continue
            _, ent = split_support(arg)
            if ent not in referenced:
                referenced.append(ent)
    rng = _stable_rng("scene", plan_to_json(plan))
    objects = [e for e in referenced if ENTITIES[e] in ("item", "support")]
    containers = [e for e in referenced if ENTITIES[e] == "container"]
    n_obj = max(3, min(6, len(objects) + 2))
    spare = [e for e in ITEMS if e not in objects]
    extra = [spare[i] for i in rng.permutation(len(spare))]
    k = max(0, n_obj - len(objects))
    objects += extra[:k] + extra[k:k + distractors]
    if not containers:
        containers.append(CONTAINERS[int(rng.integers(len(CONTAINERS)))])
    return objects, containers, ["stove"]


class ManipGrid:
    def __init__(self, size: int = 8, distractors: int = 0,
                 t_per_primitive: int = T_PER_PRIMITIVE):
        self.size = size
        self.distractors = distractors
        self.t_per_primitive = t_per_primitive
        self.state: WorldState | None = None
        self.task: Task | None = None
        self.plan: Plan | None = None
        self.latched: list[bool] = []
        self.done = False

    @property
    def t_max(self) -> int:
        return self.t_per_primitive * self.plan.M

    @property
    def success(self) -> bool:
        return bool(self.latched) and all(self.latched)

    # ------------------------------------------------------------------
    def reset(self, task: Task) -> Observation:
        plan = parse_instruction(task.instruction)
        self.task, self.plan = task, plan
        self.state = self._layout(plan, task.seed)
        self.latched = [False] * len(task.goals)
        self.done = False
        return self.observe()

    def _layout(self, plan: Plan, seed: int) -> WorldState:
        objects, containers, devices = scene_entities(plan, self.distractors)
        rng = np.random.default_rng(seed)
        W = self.size
        cells = [(x, y) for x in range(W) for y in range(W) if (x, y) != HOME]
        rel_refs = [split_support(p.support) for p in plan.primitives
                    if p.op is PrimitiveOp.PLACE_REL]
        names = objects + containers + devices
        for _ in range(1000):
            order = rng.permutation(len(cells))[: len(names)]
            pos = {n: cells[i] for n, i in zip(names, order)}
            taken = set(pos.values())
            ok = True
            for rel, ref in rel_refs:
                dx, dy = RELATIONS[rel]
                t = (pos[ref][0] + dx, pos[ref][1] + dy)
                if not (0 <= t[0] < W and 0 <= t[1] < W) or t in taken or t == HOME:
                    ok = False
                    break
            if ok:
                break
        else:
            raise RuntimeError("could not place scene")

        first: dict[str, PrimitiveOp] = {}
        for p in plan.primitives:
            _, ent = split_support(p.support) if p.support else (None, None)
            for e in (p.object, ent):
                if e is not None and e not in first:
                    first[e] = p.op
        cont_states = {}
        for c in containers:
            if c not in OPENABLE:
                is_open = True
            elif first.get(c) is PrimitiveOp.OPEN:
                is_open = False
            elif first.get(c) in (PrimitiveOp.CLOSE, PrimitiveOp.PLACE_IN):
                is_open = True
            else:
                is_open = bool(rng.integers(2))
            cont_states[c] = ContainerState(c, pos[c], is_open)
        dev_states = {}
        for d in devices:
            if first.get(d) is PrimitiveOp.TURN_ON:
                on = False
            elif first.get(d) is PrimitiveOp.TURN_OFF:
                on = True
            else:
                on = bool(rng.integers(2))
            dev_states[d] = DeviceState(d, pos[d], on)
        objs = {o: ObjectState(o, ENTITIES[o], COLORS.get(o, "gray"), pos[o]) for o in objects}
        return WorldState(W, objs, cont_states, dev_states, GripperState(*map(float, HOME)))

    def observe(self) -> Observation:
        s, W = self.state, self.size
        img = np.zeros((W, W, N_CELL_CODES))
        for o in s.objects.values():
            if not o.held:
                img[o.position[0], o.position[1], ENTITY_INDEX[o.id]] = 1.0
        for c in s.containers.values():
            img[c.position[0], c.position[1], ENTITY_INDEX[c.id]] = 1.0
            if c.open:
                img[c.position[0], c.position[1], _CH["container_open"]] = 1.0
        for d in s.devices.values():
            img[d.position[0], d.position[1], ENTITY_INDEX[d.id]] = 1.0
            if d.on:
                img[d.position[0], d.position[1], _CH["device_on"]] = 1.0
        g = s.gripper
        gx, gy = g.cell
        img[gx, gy, _CH["gripper"]] = 1.0
        if g.closed:
            img[gx, gy, _CH["gripper_closed"]] = 1.0
        proprio = np.array([g.x / (W - 1), g.y / (W - 1), g.lift, float(g.closed),
                            float(g.held_object is not None)])
        return Observation(img, proprio)

    # ------------------------------------------------------------------
    def step(self, action) -> tuple[Observation, float, bool]:
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        s, g = self.state, self.state.gripper
        g.x = float(np.clip(g.x + a[0], 0.0, self.size - 1))
        g.y = float(np.clip(g.y + a[1], 0.0, self.size - 1))
        g.lift = float(np.clip(g.lift + 0.5 * a[2], 0.0, 1.0))
        cell, low = g.cell, g.lift <= LOW_LIFT
        if a[3] > 0.5 and not g.closed:
            g.closed = True
            if low:
                self._close_over(cell)
        elif a[3] < -0.5 and g.closed:
            if g.held_object is None:
                g.closed = False
            elif low and self._release(cell):
                g.closed = False
        if g.held_object is not None:
            s.objects[g.held_object].position = cell
        s.step_count += 1

        now = goal_check(s, self.task)
        reward = 0.0
        for i, flag in enumerate(now):
            if flag and not self.latched[i]:
                self.latched[i] = True
                reward += 1.0
        self.done = all(self.latched) or s.step_count >= self.t_max
        return self.observe(), reward, self.done

    def _items_at(self, cell) -> list[ObjectState]:
        return [o for o in self.state.objects.values()
                if o.kind == "item" and not o.held and o.inside is None and o.position == cell]

    def _close_over(self, cell) -> None:
        s = self.state
        items = self._items_at(cell)
        if items:
            o = items[-1]
            o.held, o.on = True, None
            s.gripper.held_object = o.id
            s.objects[o.id] = s.objects.pop(o.id)      # keep stacking order: last = top
            return
        for c in s.containers.values():
            if c.position == cell and c.id in OPENABLE:
                c.open = not c.open
                return
        for d in s.devices.values():
            if d.position == cell:
                d.on = not d.on
                return

    def _release(self, cell) -> bool:
        s = self.state
        o = s.objects[s.gripper.held_object]
        for c in s.containers.values():
            if c.position == cell:
                if not c.open:
                    return False
                c.contents.append(o.id)
                o.inside = c.id
                break
        else:
            if any(d.position == cell for d in s.devices.values()):
                return False
            supports = [x for x in s.objects.values() if x.kind == "support" and x.position == cell]
            if supports:
                o.on = supports[0].id
            elif self._items_at(cell):
                return False
        o.held, o.position = False, cell
        s.gripper.held_object = None
        return True


# scripted expert -------------------------------------------------------------

def expert_target(state: WorldState, plan: Plan, m: int) -> tuple[int, int]:
    p = plan[m]
    if p.op is PrimitiveOp.PAD:
        raise ExpertFailure("pad primitive cannot be executed")
    if p.op is PrimitiveOp.PICK:
        ent = p.object
    elif p.op is PrimitiveOp.PLACE_REL:
        _, ref = split_support(p.support)
        if not state.has(ref):
            raise ExpertFailure(f"target {ref!r} missing")
        return rel_target(state, p.support)
    elif p.op in (PrimitiveOp.PLACE_ON, PrimitiveOp.PLACE_IN):
        ent = p.support
    else:
        ent = p.object
    if not state.has(ent):
        raise ExpertFailure(f"target {ent!r} missing")
    return state.position_of(ent)


def scripted_expert(state: WorldState, plan: Plan, m: int) -> tuple[np.ndarray, int]:
    """Proportional controller toward the active primitive's target.

    Returns the action and the (1-based) index of the primitive it serves.
    """
    g = state.gripper
    tx, ty = expert_target(state, plan, m)
    dx, dy = tx - g.x, ty - g.y
    at = max(abs(dx), abs(dy)) < DEADBAND
    move = (0.0, 0.0) if at else (float(np.clip(dx, -1, 1)), float(np.clip(dy, -1, 1)))
    op = plan[m].op
    if op in (PrimitiveOp.PLACE_ON, PrimitiveOp.PLACE_IN, PrimitiveOp.PLACE_REL):
        if g.held_object is None:
            raise ExpertFailure(f"{plan[m]} with empty gripper")
        lift, grip = (-1.0, -1.0) if at else (1.0, 1.0)
    else:
        lift = -1.0
        if at and not g.closed:
            grip = 1.0
        else:
            grip = -1.0
    return np.array([move[0], move[1], lift, grip]), m


def run_expert(env: ManipGrid, task: Task) -> list[dict]:
    """Roll the expert out; returns one record per environment step."""
    obs = env.reset(task)
    plan, m = env.plan, 1
    steps = []
    while not env.done:
        action, idx = scripted_expert(env.state, plan, m)
        nxt, r, done = env.step(action)
        steps.append({"observation": obs, "action": action, "true_primitive_index": idx,
                      "r_task": r, "done": done})
        while m < plan.M and env.latched[m - 1]:
            m += 1
        obs = nxt
    if not env.success:
        raise ExpertFailure(f"expert timed out on {task.instruction!r} (seed {task.seed})")
    return steps


# demo files ------------------------------------------------------------------

DEMO_FORMAT = "nsgrid-demo/1"


def write_demo(path: Path, task: Task, steps: list[dict], size: int) -> None:
    plan = parse_instruction(task.instruction)
    lines = [json.dumps({"format": DEMO_FORMAT, "grid": size, "task": task.to_json(),
                         "plan": json.loads(plan_to_json(plan))}, sort_keys=True)]
    for s in steps:
        lines.append(json.dumps({
            "observation": s["observation"].to_json(),
            "action": [float(v) for v in s["action"]],
            "true_primitive_index": int(s["true_primitive_index"]),
            "r_task": float(s["r_task"]),
            "done": bool(s["done"]),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Demo:
    task: Task
    size: int
    observations: list[Observation]
    actions: np.ndarray             # (T, A_DIM)
    labels: np.ndarray              # (T,) 1-based primitive indices
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def plan(self) -> Plan:
        return parse_instruction(self.task.instruction)


def read_demo(path: Path) -> Demo:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DEMO_FORMAT:
            raise ValueError(f"{path}: not a {DEMO_FORMAT} file")
        size = int(header["grid"])
        recs = [json.loads(line) for line in fh if line.strip()]
    return Demo(
        task=Task.from_json(header["task"]),
        size=size,
        observations=[Observation.from_json(r["observation"], size) for r in recs],
        actions=np.array([r["action"] for r in recs], dtype=np.float64).reshape(-1, A_DIM),
        labels=np.array([r["true_primitive_index"] for r in recs], dtype=int),
        rewards=np.array([r["r_task"] for r in recs], dtype=np.float64),
        dones=np.array([r["done"] for r in recs], dtype=bool),
    )


def demo_from_steps(task: Task, steps: list[dict], size: int) -> Demo:
    return Demo(task, size, [s["observation"] for s in steps],
                np.array([s["action"] for s in steps]),
                np.array([s["true_primitive_index"] for s in steps], dtype=int),
                np.array([s["r_task"] for s in steps]),
                np.array([s["done"] for s in steps], dtype=bool))


def iter_grammar_tasks() -> Iterator[str]:
    """Every single-clause instruction over the grammar's templates; join with "and" for longer tasks."""
    from .vocab import DEVICES, SUPPORTS
    singles = []
    for item in ITEMS:
        for s in SUPPORTS:
            singles.append(f"place the {item.replace('_', ' ')} on the {s.replace('_', ' ')}")
        for c in CONTAINERS:
            singles.append(f"put the {item.replace('_', ' ')} in the {c}")
        for rel in RELATIONS:
            singles.append(f"place the {item.replace('_', ' ')} {rel.replace('_', ' ')} the plate")
    for c in sorted(OPENABLE):
        singles += [f"open the {c}", f"close the {c}"]
    for d in DEVICES:
        singles += [f"turn on the {d}", f"turn off the {d}"]
    yield from singles


def is_coherent(instruction: str) -> bool:
    """Whether the clauses of a composed instruction can all hold at once.

    Rejected: an item moved by two clauses, two items sent to the same relative
    cell, a container closed before something is put into it, and a repeated
    open/close or switch clause.
    """
    plan = parse_instruction(instruction)
    moved, rel_cells, toggles = set(), set(), set()
    closed: set[str] = set()
    for p in plan.primitives:
        if p.op is PrimitiveOp.PICK:
            if p.object in moved:
                return False
            moved.add(p.object)
        elif p.op is PrimitiveOp.PLACE_REL:
            if p.support in rel_cells:
                return False
            rel_cells.add(p.support)
        elif p.op is PrimitiveOp.PLACE_IN and p.support in closed:
            return False
        elif p.op in (PrimitiveOp.OPEN, PrimitiveOp.CLOSE, PrimitiveOp.TURN_ON, PrimitiveOp.TURN_OFF):
            key = (p.op, p.object)
            if key in toggles:
                return False
            toggles.add(key)
            if p.op is PrimitiveOp.CLOSE:
                closed.add(p.object)
            elif p.op is PrimitiveOp.OPEN:
                closed.discard(p.object)
    return True


def sample_tasks(rng: np.random.Generator, n: int, clauses: int = 2) -> list[str]:
    """``n`` coherent instructions of ``clauses`` grammar clauses joined by "and"."""
    singles = list(iter_grammar_tasks())
    out = []
    while len(out) < n:
        picks = rng.choice(len(singles), clauses, replace=False)
        text = " and ".join(singles[i] for i in picks)
        if parse_instruction(text).M <= M_MAX and is_coherent(text):
            out.append(text)
    return out

