"""Grid simulator: a pure transition function over SimState."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .embodiment import EMBODIMENTS
from .scene import SimState

MOVE_THRESHOLD = 0.5
ARM_THRESHOLD = 0.5


class InvalidAction(ValueError):
    pass


def _axis(v: float) -> int:
    if v > MOVE_THRESHOLD:
        return 1
    if v < -MOVE_THRESHOLD:
        return -1
    return 0


def _channel(action: np.ndarray, emb, name: str, default: float = 0.0) -> float:
    i = emb.index(name)
    return float(action[i]) if i is not None else default


def step(state: SimState, action) -> SimState:
    """Apply one native action vector and return the successor state."""
    emb = EMBODIMENTS[state.embodiment]
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.size != emb.dim:
        raise InvalidAction(f"{emb.name} expects {emb.dim} action dims, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise InvalidAction("non-finite action")
    lay = state.layout
    objects = list(state.objects)

    # planar motion, blocked by walls and bounds
    dr, dc = _axis(a[emb.index("v_row")]), _axis(a[emb.index("v_col")])
    agent = state.agent
    target = (agent[0] + dr, agent[1] + dc)
    if (dr or dc) and lay.free(target):
        agent = target
    heading = state.heading
    if emb.index("yaw") is not None:
        heading = float(np.clip(_channel(a, emb, "yaw"), -1.0, 1.0))
    held = state.held
    if held is not None:
        objects[held] = replace(objects[held], cell=agent, container=None, inside=False)

    # arm: drawer and blanket interaction
    arm = float(np.clip(_channel(a, emb, "arm"), -1.0, 1.0))
    kind = lay.kind(agent)
    drawer_open, opened_ever, swept = state.drawer_open, state.drawer_opened_ever, state.swept
    if arm > ARM_THRESHOLD:
        if kind == "drawer":
            drawer_open, opened_ever = True, True
        elif kind == "bed_foot":
            swept = swept | {agent}
    elif arm < -ARM_THRESHOLD and kind == "drawer":
        drawer_open = False

    lift = float(np.clip(_channel(a, emb, "lift"), -1.0, 1.0))

    # gripper transitions
    closed = _channel(a, emb, "grip") > 0.0
    picked = state.picked
    z = state.z_counter
    if closed and not state.gripper_closed:
        hidden = kind == "drawer" and not drawer_open
        candidates = [i for i, o in enumerate(objects)
                      if o.cell == agent and i != held and not (hidden and o.inside)]
        if candidates:
            held = max(candidates, key=lambda i: objects[i].z)
            objects[held] = replace(objects[held], container=None, inside=False)
            picked = picked | {held}
    elif not closed and state.gripper_closed and held is not None:
        container, inside = None, False
        if kind in ("sink", "basket"):
            container = kind
            inside = kind == "sink" or lift < -0.5
        elif kind == "drawer" and drawer_open:
            container, inside = "drawer", True
        elif kind == "bed_head":
            container, inside = "bed_head", True
        objects[held] = replace(objects[held], cell=agent, container=container, inside=inside, z=z)
        z += 1
        held = None

    return replace(
        state,
        objects=tuple(objects),
        agent=agent,
        heading=heading,
        gripper_closed=closed,
        lift=lift,
        arm=arm,
        held=held,
        drawer_open=drawer_open,
        drawer_opened_ever=opened_ever,
        swept=swept,
        picked=picked,
        z_counter=z,
        steps=state.steps + 1,
    )


def run(state: SimState, actions) -> SimState:
    for a in actions:
        state = step(state, a)
    return state
