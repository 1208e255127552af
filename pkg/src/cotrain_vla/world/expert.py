"""Scripted planner (subtasks) and scripted low-level expert (actions)."""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .embodiment import EMBODIMENTS
from .scene import Cell, Observation, Scene, SimState, observe
from .sim import step

TASK_PROMPTS = {
    "dishes_in_sink": "put the dishes in the sink",
    "items_in_drawer": "put the items in the drawer",
    "laundry_basket": "put the laundry in the basket",
    "make_bed": "make the bed",
}
_FETCH = re.compile(r"^fetch_to_(sink|drawer|basket):(\w+)$")


def task_prompt(task: str) -> str:
    if task in TASK_PROMPTS:
        return TASK_PROMPTS[task]
    if task == "block_in_basket":
        return "put the block in the basket"
    m = _FETCH.match(task)
    if m:
        return f"put the {m.group(2)} in the {m.group(1)}"
    raise ValueError(f"unknown task {task!r}")


def task_kind(task: str) -> str:
    m = _FETCH.match(task)
    return "fetch_to_" + m.group(1) if m else task


# ---------------------------------------------------------------------------
# high level


def _cheb(a: Cell, b: Cell) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _nearest(state: SimState, idx: list[int]) -> int:
    return min(idx, key=lambda i: (_cheb(state.agent, state.objects[i].cell), i))


def _in(state: SimState, i: int, container: str) -> bool:
    o = state.objects[i]
    return i != state.held and o.container == container and o.inside


def _put_down_other(state: SimState, allowed: set[int]) -> str | None:
    if state.held is not None and state.held not in allowed:
        return f"put down the {state.objects[state.held].category}"
    return None


def next_subtask(state: SimState, task: str) -> str | None:
    """The subtask an expert would issue now, or None once the task is done."""
    kind = task_kind(task)
    targets = list(state.task_objects)
    if kind == "dishes_in_sink":
        other = _put_down_other(state, set(targets))
        if other:
            return other
        if state.held is not None:
            return f"put the {state.objects[state.held].category} in the sink"
        left = [i for i in targets if not _in(state, i, "sink")]
        if not left:
            return None
        return f"pick up the {state.objects[_nearest(state, left)].category}"
    if kind in ("items_in_drawer", "fetch_to_drawer"):
        item = targets[0]
        cat = state.objects[item].category
        if _in(state, item, "drawer"):
            if kind == "items_in_drawer" and state.drawer_open:
                return "close the drawer"
            return None
        other = _put_down_other(state, {item})
        if other:
            return other
        if state.held == item:
            return f"put the {cat} in the drawer" if state.drawer_open else "open the drawer"
        return f"pick up the {cat}"
    if kind in ("laundry_basket", "block_in_basket", "fetch_to_basket", "fetch_to_sink"):
        rec = "sink" if kind == "fetch_to_sink" else "basket"
        item = targets[0]
        cat = state.objects[item].category
        if _in(state, item, rec):
            return None
        other = _put_down_other(state, {item})
        if other:
            return other
        if state.held == item:
            return f"put the {cat} in the {rec}"
        return f"pick up the {cat}"
    if kind == "make_bed":
        lay = state.layout
        if len(state.swept & set(lay.bed_foot)) < 2:
            return "straighten the blanket"
        other = _put_down_other(state, set(targets))
        if other:
            return other
        on_head = {side: [i for i in targets if _in(state, i, "bed_head") and state.objects[i].cell == cell]
                   for side, cell in zip(("left", "right"), lay.bed_head)}
        if state.held is not None:
            side = "left" if not on_head["left"] else "right"
            return f"put the pillow on the {side} of the bed"
        if on_head["left"] and on_head["right"]:
            return None
        return "pick up the pillow"
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# low level

_PICK = re.compile(r"^pick up the (\w+)$")
_PUT = re.compile(r"^put the (\w+) in the (sink|drawer|basket)$")
_PILLOW = re.compile(r"^put the pillow on the (left|right) of the bed$")
_DOWN = re.compile(r"^put down the (\w+)$")


def parse_subtask(subtask: str) -> tuple[str, dict]:
    for name, pat in (("pick", _PICK), ("put", _PUT), ("pillow", _PILLOW), ("down", _DOWN)):
        m = pat.match(subtask)
        if m:
            return name, {"groups": m.groups()}
    if subtask in ("open the drawer", "close the drawer", "straighten the blanket"):
        return subtask.split()[0], {}
    raise ValueError(f"unknown subtask {subtask!r}")


def _pick_target(state: SimState, cat: str) -> int | None:
    lay = state.layout
    cand = [i for i, o in enumerate(state.objects) if o.category == cat and i != state.held
            and not (lay.kind(o.cell) == "drawer" and o.inside and not state.drawer_open)]
    if not cand:
        return None
    if cat == "pillow":
        loose = [i for i in cand if state.objects[i].container != "bed_head"]
        if loose:
            cand = loose
        else:
            # a pillow stacked on a head cell: take the top one of the crowded cell
            cells = [state.objects[i].cell for i in cand]
            crowded = [i for i in cand if cells.count(state.objects[i].cell) > 1]
            cand = crowded or cand
    else:
        # prefer objects not already delivered somewhere
        loose = [i for i in cand if state.objects[i].container is None]
        if loose:
            cand = loose
    return _nearest(state, cand)


def is_complete(state: SimState, subtask: str) -> bool:
    kind, info = parse_subtask(subtask)
    held_cat = state.objects[state.held].category if state.held is not None else None
    if kind == "pick":
        return held_cat == info["groups"][0]
    if kind == "put":
        cat, rec = info["groups"]
        return held_cat != cat and any(
            o.category == cat and o.container == rec and o.inside for i, o in enumerate(state.objects))
    if kind == "pillow":
        cell = state.layout.bed_head[0 if info["groups"][0] == "left" else 1]
        return held_cat != "pillow" and any(
            o.category == "pillow" and o.cell == cell and o.container == "bed_head" for o in state.objects)
    if kind == "down":
        return held_cat != info["groups"][0]
    if kind == "open":
        return state.drawer_open
    if kind == "close":
        return not state.drawer_open
    if kind == "straighten":
        return set(state.layout.bed_foot) <= state.swept
    raise AssertionError(kind)


_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]


def _distance_field(state: SimState, goal: Cell) -> dict[Cell, int]:
    lay = state.layout
    dist = {goal: 0}
    q = deque([goal])
    while q:
        cur = q.popleft()
        for dr, dc in _NEIGHBOURS:
            nxt = (cur[0] + dr, cur[1] + dc)
            if nxt not in dist and lay.free(nxt):
                dist[nxt] = dist[cur] + 1
                q.append(nxt)
    return dist


def _move_toward(state: SimState, goal: Cell) -> tuple[int, int] | None:
    dist = _distance_field(state, goal)
    here = state.agent
    if here not in dist:
        return None
    direct = (int(np.sign(goal[0] - here[0])), int(np.sign(goal[1] - here[1])))
    options = [direct] + [n for n in _NEIGHBOURS if n != direct]
    best = None
    for dr, dc in options:
        nxt = (here[0] + dr, here[1] + dc)
        if nxt in dist and dist[nxt] == dist[here] - 1:
            best = (dr, dc)
            break
    return best


def _compose(state: SimState, v=(0, 0), grip=None, lift=None, arm=0.0, yaw=None) -> np.ndarray:
    emb = EMBODIMENTS[state.embodiment]
    vals = {
        "v_row": float(v[0]),
        "v_col": float(v[1]),
        "grip": (1.0 if state.gripper_closed else -1.0) if grip is None else float(grip),
        "lift": state.lift if lift is None else float(lift),
        "arm": float(arm),
        "yaw": state.heading if yaw is None else float(yaw),
        "torso": 0.0,
    }
    return np.array([vals[c] for c in emb.channels])


def hold_action(state: SimState) -> np.ndarray:
    # keeps the arm where it is so drawer and blanket motions persist through the chunk
    return _compose(state, arm=state.arm)


def _go(state: SimState, goal: Cell) -> np.ndarray | None:
    mv = _move_toward(state, goal)
    if mv is None:
        return None
    yaw = math.atan2(mv[0], mv[1]) / math.pi
    return _compose(state, v=mv, yaw=yaw)


def expert_action(state: SimState, subtask: str) -> np.ndarray | None:
    """Next native action for ``subtask``; None when it cannot be carried out."""
    kind, info = parse_subtask(subtask)
    emb = EMBODIMENTS[state.embodiment]
    lay = state.layout
    if kind == "pick":
        tgt = _pick_target(state, info["groups"][0])
        if tgt is None:
            return None
        cell = state.objects[tgt].cell
        if state.agent != cell:
            return _go(state, cell)
        if state.gripper_closed:
            return _compose(state, grip=-1.0)
        return _compose(state, grip=1.0, lift=1.0)
    if kind in ("put", "pillow", "down"):
        if kind == "put":
            cat, rec = info["groups"]
            goal = getattr(lay, rec)
        elif kind == "pillow":
            cat = "pillow"
            goal = lay.bed_head[0 if info["groups"][0] == "left" else 1]
        else:
            cat = info["groups"][0]
            goal = state.agent
        if state.held is None or state.objects[state.held].category != cat:
            return None
        if kind == "put" and rec == "drawer" and not state.drawer_open:
            return None
        if state.agent != goal:
            return _go(state, goal)
        if state.lift > -0.5:
            return _compose(state, grip=1.0, lift=-1.0)
        return _compose(state, grip=-1.0, lift=-1.0)
    if kind in ("open", "close"):
        if emb.index("arm") is None:
            return None
        if state.agent != lay.drawer:
            return _go(state, lay.drawer)
        return _compose(state, arm=1.0 if kind == "open" else -1.0)
    if kind == "straighten":
        if emb.index("arm") is None:
            return None
        todo = [c for c in lay.bed_foot if c not in state.swept]
        if state.agent != todo[0]:
            return _go(state, todo[0])
        return _compose(state, arm=1.0)
    raise AssertionError(kind)


def expert_chunk(state: SimState, subtask: str, horizon: int) -> tuple[np.ndarray, SimState, bool]:
    """Expert actions for up to ``horizon`` steps, padded with holds once the subtask completes.

    Returns (actions, state after executing them, feasible).
    """
    actions = []
    feasible = True
    for _ in range(horizon):
        if is_complete(state, subtask):
            a = hold_action(state)
        else:
            a = expert_action(state, subtask)
            if a is None:
                feasible = False
                a = hold_action(state)
        actions.append(a)
        state = step(state, a)
    return np.array(actions), state, feasible


def perturb_chunk(actions: np.ndarray, embodiment: str, rng: np.random.Generator,
                  drop_prob: float = 0.0) -> np.ndarray:
    """Execution noise for data collection: truncated or jittered motion, occasional drops."""
    emb = EMBODIMENTS[embodiment]
    out = actions.copy()
    H = len(out)
    mode = rng.integers(0, 3)
    iv, ic, ig = emb.index("v_row"), emb.index("v_col"), emb.index("grip")
    if mode == 0:
        cut = int(rng.integers(0, H))
        out[cut:, iv] = 0.0
        out[cut:, ic] = 0.0
        if emb.index("arm") is not None:
            out[cut:, emb.index("arm")] = 0.0
        out[cut:, ig] = out[max(cut - 1, 0), ig] if cut > 0 else out[0, ig]
    elif mode == 1:
        t = int(rng.integers(0, H))
        out[t, iv], out[t, ic] = rng.integers(-1, 2), rng.integers(-1, 2)
    else:
        t = int(rng.integers(0, H))
        out = np.concatenate([out[:t], out[t:t + 1], out[t:-1]])
        out[t, iv], out[t, ic] = rng.integers(-1, 2), rng.integers(-1, 2)
    if drop_prob and rng.random() < drop_prob:
        t = int(rng.integers(0, H))
        out[t:, ig] = -1.0
    return out


# ---------------------------------------------------------------------------
# episodes


@dataclass
class StepRecord:
    obs: Observation
    subtask: str
    actions: np.ndarray  # expert label chunk, native units (H, d)
    executed: np.ndarray  # what was actually run
    state: SimState


@dataclass
class Episode:
    task: str
    prompt: str
    env_id: int
    embodiment: str
    category: str
    steps: list[StepRecord] = field(default_factory=list)
    initial: SimState | None = None
    final: SimState | None = None
    success: bool = False
    score: float = 0.0
    subtask_log: list[str] = field(default_factory=list)
    first_pick: int | None = None  # index of the first object ever held

    def note(self, state: SimState):
        if self.first_pick is None and state.held is not None:
            self.first_pick = state.held

    @property
    def length(self) -> int:
        return sum(len(s.executed) for s in self.steps)

    def segments(self) -> list[tuple[str, int]]:
        """(subtask, first step index) for each contiguous subtask segment."""
        out = []
        for i, s in enumerate(self.steps):
            if not out or out[-1][0] != s.subtask:
                out.append((s.subtask, i))
        return out


def max_chunks_for(task: str, n_task_objects: int = 1) -> int:
    kind = task_kind(task)
    base = {"dishes_in_sink": 6 * max(n_task_objects, 1), "items_in_drawer": 12, "laundry_basket": 8,
            "make_bed": 16, "block_in_basket": 8}
    return base.get(kind, 10)


def expert_rollout(scene: Scene, task: str | None = None, noise: float = 0.0,
                   rng: np.random.Generator | None = None, drop_prob: float = 0.0,
                   max_chunks: int | None = None, category: str = "MM",
                   horizon: int | None = None) -> Episode:
    """Roll the scripted planner + expert through the simulator, one chunk at a time."""
    from .rubric import score_rubric

    task = task or scene.task
    emb = EMBODIMENTS[scene.embodiment]
    H = horizon or emb.horizon
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    state = SimState.from_scene(scene)
    prompt = task_prompt(task)
    ep = Episode(task=task, prompt=prompt, env_id=scene.env_id, embodiment=scene.embodiment,
                 category=category, initial=state)
    limit = max_chunks if max_chunks is not None else max_chunks_for(task, len(scene.task_objects))
    for _ in range(limit):
        sub = next_subtask(state, task)
        if sub is None:
            break
        labels, _, feasible = expert_chunk(state, sub, H)
        if not feasible and np.allclose(labels, labels[0]) and not _progress(state, sub):
            break
        executed = labels
        if noise and rng.random() < noise:
            executed = perturb_chunk(labels, scene.embodiment, rng, drop_prob)
        ep.steps.append(StepRecord(observe(state, prompt), sub, labels, executed, state))
        ep.subtask_log.append(sub)
        for a in executed:
            state = step(state, a)
            ep.note(state)
    ep.final = state
    ep.success = next_subtask(state, task) is None
    ep.score = score_rubric(state, task) if task_kind(task) in TASK_PROMPTS else float(ep.success)
    return ep


def _progress(state: SimState, subtask: str) -> bool:
    return expert_action(state, subtask) is not None


def replay(initial: SimState, episode: Episode) -> SimState:
    state = initial
    for s in episode.steps:
        for a in s.executed:
            state = step(state, a)
    return state
