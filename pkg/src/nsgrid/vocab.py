"""Closed vocabularies shared by the planner, the environment and the featurizer."""
from __future__ import annotations

# entity id -> kind. Order fixes the one-hot layout of the cell render.
ENTITIES: dict[str, str] = {
    "alphabet_soup": "item",
    "cream_cheese": "item",
    "tomato_sauce": "item",
    "butter": "item",
    "white_mug": "item",
    "yellow_white_mug": "item",
    "chocolate_pudding": "item",
    "book": "item",
    "plate": "support",
    "left_plate": "support",
    "right_plate": "support",
    "basket": "container",
    "microwave": "container",
    "drawer": "container",
    "stove": "device",
}
ENTITY_IDS: list[str] = list(ENTITIES)
ENTITY_INDEX: dict[str, int] = {e: i for i, e in enumerate(ENTITY_IDS)}

ITEMS = [e for e, k in ENTITIES.items() if k == "item"]
SUPPORTS = [e for e, k in ENTITIES.items() if k == "support"]
CONTAINERS = [e for e, k in ENTITIES.items() if k == "container"]
DEVICES = [e for e, k in ENTITIES.items() if k == "device"]
OPENABLE = {"microwave", "drawer"}

COLORS: dict[str, str] = {
    "alphabet_soup": "red", "cream_cheese": "blue", "tomato_sauce": "red",
    "butter": "yellow", "white_mug": "white", "yellow_white_mug": "yellow",
    "chocolate_pudding": "brown", "book": "black", "plate": "white",
    "left_plate": "white", "right_plate": "white",
}

# surface phrases that do not follow the plain lower_snake_case rule
ALIASES: dict[str, str] = {
    "yellow and white mug": "yellow_white_mug",
    "yellow-white mug": "yellow_white_mug",
}

# relation name -> (dx, dy) cell offset from the reference entity
RELATIONS: dict[str, tuple[int, int]] = {
    "left_of": (-1, 0),
    "right_of": (1, 0),
    "in_front_of": (0, 1),
    "behind": (0, -1),
}
RELATION_IDS: list[str] = list(RELATIONS)

# per-cell render channels after the entity one-hot block
FLAG_CHANNELS = ["gripper", "gripper_closed", "container_open", "device_on"]
N_CELL_CODES = len(ENTITY_IDS) + len(FLAG_CHANNELS)


def entity_id(phrase: str) -> str:
    """Map a surface phrase to an entity id (lower_snake_case)."""
    p = " ".join(phrase.lower().split())
    if p in ALIASES:
        return ALIASES[p]
    return p.replace("-", "_").replace(" ", "_")


def split_support(support: str) -> tuple[str | None, str]:
    """``"right_of:plate"`` -> ``("right_of", "plate")``; plain ids have no relation."""
    if ":" in support:
        rel, ent = support.split(":", 1)
        return rel, ent
    return None, support
