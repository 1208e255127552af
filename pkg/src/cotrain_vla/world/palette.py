"""Object, colour and receptacle tables for the grid homes."""

from __future__ import annotations

import numpy as np

DISHES = ("plate", "bowl", "cup", "mug", "spoon", "fork", "board", "pan")
ITEMS = ("tongs", "scissors", "opener", "ladle", "whisk", "mustard")
CLOTHING = ("shirt", "sock", "towel", "pants", "hat")
BEDDING = ("pillow",)
# each home brings one of these along; see env_category()
ENV_POOL = (
    "vase", "lamp", "book", "toy", "candle", "clock", "remote", "phone", "bottle", "jar",
    "brush", "comb", "wallet", "keys", "glasses", "plant", "soap", "sponge", "kettle", "teapot",
)
LAB = ("block", "cube", "ring", "cone")
# only ever shown in web-style data
OOD = ("funnel", "pills", "lighter", "goggles", "torch")

CATEGORIES = DISHES + ITEMS + CLOTHING + BEDDING + ENV_POOL + LAB + OOD
CATEGORY_ID = {name: i for i, name in enumerate(CATEGORIES)}

DEMO_CATEGORIES = frozenset(DISHES + ITEMS + CLOTHING + BEDDING + ENV_POOL + LAB)
OOD_CATEGORIES = frozenset(OOD)

COLORS = ("red", "green", "blue", "yellow", "purple", "pink")
COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.55, 0.15, 0.75),
    "pink": (1.0, 0.55, 0.75),
}

# two "shape" pixels per object; 7 x 7 = 49 distinct signatures
_HUES = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.0, 1.0),
    (1.0, 0.5, 0.0),
)
assert len(CATEGORIES) <= len(_HUES) ** 2


def category_signature(category: str) -> tuple[np.ndarray, np.ndarray]:
    i = CATEGORY_ID[category]
    return np.array(_HUES[i // len(_HUES)]), np.array(_HUES[i % len(_HUES)])


def env_category(env_id: int) -> str:
    return ENV_POOL[env_id % len(ENV_POOL)]


RECEPTACLES = ("sink", "drawer", "basket", "bed")

SINK_RGB = (0.55, 0.75, 0.95)
DRAWER_CLOSED_RGB = (0.45, 0.28, 0.12)
DRAWER_OPEN_RGB = (0.85, 0.6, 0.35)
BASKET_RGB = (0.85, 0.75, 0.45)
BED_HEAD_RGB = (0.55, 0.35, 0.65)
BLANKET_RGB = (0.75, 0.55, 0.85)
BLANKET_MESSY_RGB = (0.35, 0.2, 0.4)
WALL_RGB = (0.4, 0.4, 0.4)
AGENT_RGB = {"mobile": (1.0, 1.0, 1.0), "fixed_a": (0.8, 0.8, 0.8), "fixed_b": (0.65, 0.65, 0.65)}
