"""Point rubrics for the four household tasks, scored from simulator ground truth."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from .scene import SimState


@lru_cache(maxsize=None)
def rubric_tables() -> dict:
    text = resources.files(__package__).joinpath("data/rubrics.json").read_text()
    return json.loads(text)


def _objs(state: SimState):
    return [(i, state.objects[i]) for i in state.task_objects]


def _at_rest(state: SimState, i: int) -> bool:
    return i != state.held


def _points(state: SimState, check: str) -> int:
    lay = state.layout
    objs = _objs(state)
    if check == "each_task_object_picked":
        return sum(i in state.picked for i, _ in objs)
    if check == "each_task_object_in_sink":
        return sum(_at_rest(state, i) and o.container == "sink" for i, o in objs)
    i, o = objs[0]
    if check == "item_picked":
        return int(i in state.picked)
    if check == "drawer_opened":
        return int(state.drawer_opened_ever)
    if check == "item_in_drawer":
        return int(_at_rest(state, i) and o.container == "drawer" and o.inside)
    if check == "drawer_closed_with_item":
        return int(_at_rest(state, i) and o.container == "drawer" and o.inside and not state.drawer_open)
    if check == "item_at_basket":
        return int(_at_rest(state, i) and o.container == "basket")
    if check == "item_inside_basket":
        return int(_at_rest(state, i) and o.container == "basket" and o.inside)
    on_head = [o.cell for i, o in objs if _at_rest(state, i) and o.container == "bed_head"]
    if check == "blanket_straightened":
        return int(bool(state.swept & set(lay.bed_foot)))
    if check == "blanket_neat":
        return int(set(lay.bed_foot) <= state.swept)
    if check == "first_pillow_at_head":
        return int(len(on_head) >= 1)
    if check == "second_pillow_at_head":
        return int(len(on_head) >= 2)
    if check == "pillows_neat":
        return int(len(set(on_head)) >= 2)
    raise KeyError(check)


def rubric_points(state: SimState, task: str) -> tuple[int, int]:
    tables = rubric_tables()
    if task not in tables:
        raise KeyError(f"no rubric for task {task!r}")
    table = tables[task]
    got = 0
    for line in table["lines"]:
        got += line["points"] * _points(state, line["check"])
    n_items = len(state.task_objects) if "items" in table else 1
    max_points = sum(line["points"] for line in table["lines"]) * n_items
    return got, max_points


def score_rubric(episode_or_state, task: str | None = None) -> float:
    """Fraction of rubric points achieved at the end of an episode."""
    state = getattr(episode_or_state, "final", episode_or_state)
    task = task or getattr(episode_or_state, "task", None)
    got, total = rubric_points(state, task)
    return got / total
