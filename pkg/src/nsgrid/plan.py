"""Symbolic layer: primitives, instruction parsing, strict-JSON plans, pointer rules."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass

import jsonschema

from .vocab import ENTITIES, OPENABLE, RELATIONS, entity_id, split_support

M_MAX = 6


class PrimitiveOp(str, enum.Enum):
    PICK = "pick"
    PLACE_ON = "place_on"
    PLACE_IN = "place_in"
    PLACE_REL = "place_rel"
    OPEN = "open"
    CLOSE = "close"
    TURN_ON = "turn_on"
    TURN_OFF = "turn_off"
    PAD = "pad"


OPS: list[PrimitiveOp] = list(PrimitiveOp)
OP_INDEX: dict[PrimitiveOp, int] = {op: i for i, op in enumerate(OPS)}
N_OPS = len(OPS)
PLACE_OPS = {PrimitiveOp.PLACE_ON, PrimitiveOp.PLACE_IN, PrimitiveOp.PLACE_REL}
UNARY_OPS = {PrimitiveOp.PICK, PrimitiveOp.OPEN, PrimitiveOp.CLOSE,
             PrimitiveOp.TURN_ON, PrimitiveOp.TURN_OFF}


class PlanError(ValueError):
    """Instruction cannot be turned into a plan."""


class PlanTooLongError(PlanError):
    pass


class PlanSchemaError(ValueError):
    """JSON text violates the plan schema."""


@dataclass(frozen=True)
class Primitive:
    op: PrimitiveOp
    object: str | None = None
    support: str | None = None

    def __post_init__(self):
        op = PrimitiveOp(self.op)
        object.__setattr__(self, "op", op)
        if op is PrimitiveOp.PAD:
            if self.object is not None or self.support is not None:
                raise PlanError("pad takes no arguments")
        elif op in UNARY_OPS:
            if self.object is None or self.support is not None:
                raise PlanError(f"{op.value} requires an object and no support")
        elif self.object is None or self.support is None:
            raise PlanError(f"{op.value} requires an object and a support")

    @property
    def op_index(self) -> int:
        return OP_INDEX[self.op]

    def __str__(self) -> str:
        args = ", ".join(a for a in (self.object, self.support) if a)
        return f"{self.op.value}({args})"


PAD = Primitive(PrimitiveOp.PAD)


@dataclass(frozen=True)
class Plan:
    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        prims = tuple(self.primitives)
        object.__setattr__(self, "primitives", prims)
        if not 1 <= len(prims) <= M_MAX:
            raise PlanTooLongError(f"plan length {len(prims)} outside [1, {M_MAX}]")

    def __len__(self) -> int:
        return len(self.primitives)

    def __getitem__(self, m: int) -> Primitive:
        """1-based access, matching pointer values."""
        if not 1 <= m <= len(self.primitives):
            raise IndexError(f"plan index {m} outside [1, {len(self.primitives)}]")
        return self.primitives[m - 1]

    @property
    def M(self) -> int:
        return len(self.primitives)

    def op_indices(self) -> list[int]:
        return [p.op_index for p in self.primitives]

    def padded(self, length: int = M_MAX) -> list[Primitive]:
        return list(self.primitives) + [PAD] * (length - len(self.primitives))


# instruction parsing -------------------------------------------------------

_CLAUSE_SPLIT = re.compile(r"\s+and\s+(?=(?:put|place|open|close|turn)\b)")
_ART = r"(?:the\s+)?"
_REL = re.compile(rf"^(?:put|place)\s+{_ART}(.+?)\s+(?:to\s+the\s+)?"
                  rf"(left of|right of|in front of|behind)\s+{_ART}(.+)$")
_PUT = re.compile(rf"^(?:put|place)\s+{_ART}(.+?)\s+(in|into|inside|on|onto)\s+{_ART}(.+)$")
_OPEN = re.compile(rf"^(open|close)\s+{_ART}(.+)$")
_TURN = re.compile(rf"^turn\s+(on|off)\s+{_ART}(.+)$")


def _entity(phrase: str, kinds: tuple[str, ...]) -> str:
    eid = entity_id(phrase)
    if eid not in ENTITIES:
        raise PlanError(f"unknown entity {phrase!r}")
    if ENTITIES[eid] not in kinds:
        raise PlanError(f"{phrase!r} is a {ENTITIES[eid]}, expected {' or '.join(kinds)}")
    return eid


def _clause(text: str) -> list[Primitive]:
    if m := _REL.match(text):
        obj = _entity(m.group(1), ("item",))
        rel = m.group(2).replace(" ", "_")
        ref = _entity(m.group(3), ("support", "container", "device", "item"))
        return [Primitive(PrimitiveOp.PICK, obj),
                Primitive(PrimitiveOp.PLACE_REL, obj, f"{rel}:{ref}")]
    if m := _PUT.match(text):
        obj = _entity(m.group(1), ("item",))
        if m.group(2) in ("in", "into", "inside"):
            return [Primitive(PrimitiveOp.PICK, obj),
                    Primitive(PrimitiveOp.PLACE_IN, obj, _entity(m.group(3), ("container",)))]
        return [Primitive(PrimitiveOp.PICK, obj),
                Primitive(PrimitiveOp.PLACE_ON, obj, _entity(m.group(3), ("support",)))]
    if m := _OPEN.match(text):
        target = _entity(m.group(2), ("container",))
        if target not in OPENABLE:
            raise PlanError(f"{m.group(2)!r} cannot be opened or closed")
        return [Primitive(PrimitiveOp(m.group(1)), target)]
    if m := _TURN.match(text):
        return [Primitive(PrimitiveOp(f"turn_{m.group(1)}"), _entity(m.group(2), ("device",)))]
    head = text.split()[0] if text.split() else text
    raise PlanError(f"unrecognized clause starting at {head!r}: {text!r}")


def parse_instruction(instruction: str) -> Plan:
    """Deterministic grammar parser standing in for the plan generator.

    >>> [str(p) for p in parse_instruction("put yellow-white mug in microwave").primitives]
    ['pick(yellow_white_mug)', 'place_in(yellow_white_mug, microwave)']
    """
    text = " ".join(instruction.lower().strip().rstrip(".").split())
    if not text:
        raise PlanError("empty instruction")
    prims: list[Primitive] = []
    for clause in _CLAUSE_SPLIT.split(text):
        prims.extend(_clause(clause))
    if len(prims) > M_MAX:
        raise PlanTooLongError(f"instruction expands to {len(prims)} primitives (max {M_MAX})")
    return Plan(tuple(prims))


# strict JSON ------------------------------------------------------------

PLAN_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "maxItems": M_MAX,
    "items": {
        "type": "object",
        "required": ["op", "args"],
        "additionalProperties": False,
        "properties": {
            "op": {"enum": [op.value for op in OPS]},
            "args": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "object": {"type": "string"},
                    "support": {"type": "string"},
                },
            },
        },
    },
}


def plan_to_json(plan: Plan) -> str:
    steps = []
    for p in plan.primitives:
        args = {}
        if p.object is not None:
            args["object"] = p.object
        if p.support is not None:
            args["support"] = p.support
        steps.append({"op": p.op.value, "args": args})
    return json.dumps(steps, separators=(",", ":"))


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    dup = {k for k in keys if keys.count(k) > 1}
    if dup:
        raise PlanSchemaError(f"duplicate key(s) {sorted(dup)}")
    return dict(pairs)


def _reject_constant(name):
    raise PlanSchemaError(f"non-standard JSON constant {name}")


def plan_from_json(text: str) -> Plan:
    try:
        data = json.loads(text, object_pairs_hook=_no_duplicates,
                          parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise PlanSchemaError(f"invalid JSON: {exc}") from None
    try:
        jsonschema.validate(data, PLAN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise PlanSchemaError(f"schema violation at {where}: {exc.message}") from None
    prims = []
    for i, step in enumerate(data):
        args = step["args"]
        try:
            prims.append(Primitive(PrimitiveOp(step["op"]), args.get("object"), args.get("support")))
        except PlanError as exc:
            raise PlanSchemaError(f"step {i}: {exc}") from None
        for key in ("object",):
            if key in args and args[key] not in ENTITIES:
                raise PlanSchemaError(f"step {i}: unknown entity {args[key]!r}")
        if "support" in args:
            rel, ent = split_support(args["support"])
            if ent not in ENTITIES or (rel is not None and rel not in RELATIONS):
                raise PlanSchemaError(f"step {i}: unknown support {args['support']!r}")
    return Plan(tuple(prims))


# pointer -------------------------------------------------------------------

def admissible_set(m_prev: int, M: int) -> tuple[int, ...]:
    """Indices the pointer may take next: stay, or advance by one (capped at M)."""
    if not 1 <= m_prev <= M:
        raise ValueError(f"pointer {m_prev} outside [1, {M}]")
    nxt = min(m_prev + 1, M)
    return (m_prev,) if nxt == m_prev else (m_prev, nxt)
