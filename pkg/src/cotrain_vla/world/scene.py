"""Procedural grid homes, their dynamic state and rendering."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import palette as P
from .embodiment import EMBODIMENTS, PROPRIO_DIM

Cell = tuple[int, int]

TASKS = ("dishes_in_sink", "items_in_drawer", "laundry_basket", "make_bed")
LAB_TASKS = ("dishes_in_sink", "laundry_basket", "block_in_basket")

_ENV_SALT = 7919
_SCENE_SALT = 104729


@dataclass(frozen=True)
class SceneConfig:
    width: int = 12
    min_objects: int = 2
    max_objects: int = 7
    wall_prob: float = 0.25
    # chance that the drawer task uses the home's own object category
    env_item_prob: float = 0.3
    image_size: int = 16
    ego_window: int = 7
    # draw out-of-window objects and receptacles on the ego window edge
    ego_periphery: bool = True


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    cell: Cell
    container: str | None = None  # sink | drawer | basket | bed_head | None
    inside: bool = False
    z: int = 0


@dataclass(frozen=True)
class Layout:
    env_id: int
    width: int
    walls: frozenset
    floor_rgb: tuple[float, float, float]
    sink: Cell
    drawer: Cell
    basket: Cell
    bed_head: tuple[Cell, Cell]  # left, right
    bed_foot: tuple[Cell, Cell]
    lab: bool = False

    def kind(self, cell: Cell) -> str | None:
        if cell == self.sink:
            return "sink"
        if cell == self.drawer:
            return "drawer"
        if cell == self.basket:
            return "basket"
        if cell in self.bed_head:
            return "bed_head"
        if cell in self.bed_foot:
            return "bed_foot"
        return None

    def receptacle_cells(self) -> set[Cell]:
        return {self.sink, self.drawer, self.basket, *self.bed_head, *self.bed_foot}

    def free(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.width and 0 <= c < self.width and cell not in self.walls


@dataclass(frozen=True)
class Scene:
    """Initial state of one episode: layout, objects, agent and the task objects."""

    env_id: int
    layout: Layout
    objects: tuple[SceneObject, ...]
    agent: Cell
    heading: float
    embodiment: str
    task: str | None = None
    task_objects: tuple[int, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class SimState:
    layout: Layout
    objects: tuple[SceneObject, ...]
    agent: Cell
    heading: float
    embodiment: str
    task_objects: tuple[int, ...] = ()
    gripper_closed: bool = False
    lift: float = 0.0
    arm: float = 0.0
    held: int | None = None
    drawer_open: bool = False
    drawer_opened_ever: bool = False
    swept: frozenset = field(default_factory=frozenset)
    picked: frozenset = field(default_factory=frozenset)
    z_counter: int = 0
    steps: int = 0

    @classmethod
    def from_scene(cls, scene: Scene) -> "SimState":
        return cls(
            layout=scene.layout,
            objects=scene.objects,
            agent=scene.agent,
            heading=scene.heading,
            embodiment=scene.embodiment,
            task_objects=scene.task_objects,
            z_counter=len(scene.objects),
        )

    def objects_at(self, cell: Cell) -> list[int]:
        idx = [i for i, o in enumerate(self.objects) if o.cell == cell and i != self.held]
        return sorted(idx, key=lambda i: self.objects[i].z)

    def visible_objects_at(self, cell: Cell) -> list[int]:
        hidden = self.layout.kind(cell) == "drawer" and not self.drawer_open
        return [i for i in self.objects_at(cell) if not (hidden and self.objects[i].inside)]

    def key(self) -> str:
        """Stable digest of the full state (used by replay checks)."""
        h = hashlib.sha256(repr(self).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# generation


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) & 0xFFFFFFFF for p in parts])


def make_layout(env_id: int, config: SceneConfig = SceneConfig(), lab: bool = False) -> Layout:
    """Layout is a pure function of env_id: one fixed home per id."""
    W = config.width
    rng = _rng(_ENV_SALT, env_id, W, int(lab))
    walls = set()
    if not lab:
        for r in range(W):
            for c in range(W):
                border = r in (0, W - 1) or c in (0, W - 1)
                if border and rng.random() < config.wall_prob:
                    walls.add((r, c))
        floor = tuple(float(x) for x in rng.uniform(0.05, 0.28, size=3))
    else:
        floor = (0.2, 0.2, 0.2)
    # bed: 2x2 block, head row on top
    while True:
        br, bc = int(rng.integers(0, W - 1)), int(rng.integers(0, W - 1))
        block = [(br, bc), (br, bc + 1), (br + 1, bc), (br + 1, bc + 1)]
        if not any(b in walls for b in block):
            break
    taken = set(block) | walls
    cells = []
    while len(cells) < 3:
        cell = (int(rng.integers(0, W)), int(rng.integers(0, W)))
        if cell not in taken:
            taken.add(cell)
            cells.append(cell)
    return Layout(
        env_id=env_id,
        width=W,
        walls=frozenset(walls),
        floor_rgb=floor,
        sink=cells[0],
        drawer=cells[1],
        basket=cells[2],
        bed_head=(block[0], block[1]),
        bed_foot=(block[2], block[3]),
        lab=lab,
    )


def _task_categories(task: str, env_id: int, rng: np.random.Generator, config: SceneConfig,
                     eval_mode: bool) -> tuple[list[str], set[str]]:
    """Task object categories and the groups distractors must avoid."""
    if task == "dishes_in_sink":
        n = 4
        cats = [str(c) for c in rng.choice(P.DISHES, size=n, replace=False)]
        return cats, set(P.DISHES)
    if task == "items_in_drawer":
        if not eval_mode and rng.random() < config.env_item_prob:
            cat = P.env_category(env_id)
        else:
            cat = str(rng.choice(P.ITEMS))
        return [cat], set(P.ITEMS) | {P.env_category(env_id)}
    if task == "laundry_basket":
        return [str(rng.choice(P.CLOTHING))], set(P.CLOTHING)
    if task == "make_bed":
        return ["pillow", "pillow"], {"pillow"}
    if task == "block_in_basket":
        return [str(rng.choice(P.LAB))], set(P.LAB)
    raise ValueError(f"unknown task {task!r}")


def generate_scene(seed: int, env_id: int, embodiment: str = "mobile", task: str | None = None,
                   config: SceneConfig = SceneConfig(), lab: bool = False,
                   eval_mode: bool = False, objects: list[tuple[str, str]] | None = None,
                   n_task_objects: int | None = None) -> Scene:
    """Deterministic in (seed, env_id, embodiment, task).

    ``objects`` overrides the sampled object list with explicit
    ``(category, color)`` pairs; the first ``n_task_objects`` are task objects.
    """
    if embodiment not in EMBODIMENTS:
        raise ValueError(f"unknown embodiment {embodiment!r}")
    layout = make_layout(env_id, config, lab=lab)
    task_idx = (TASKS + LAB_TASKS).index(task) if task else 99
    rng = _rng(_SCENE_SALT, seed, env_id, list(EMBODIMENTS).index(embodiment), task_idx, int(lab))
    if task is None:
        task = str(rng.choice(LAB_TASKS if lab else TASKS))

    if objects is None:
        cats, avoid = _task_categories(task, env_id, rng, config, eval_mode)
        if task == "dishes_in_sink" and lab:
            cats = cats[:2]
        n_task = len(cats)
        lo = max(config.min_objects, n_task + (0 if lab else 1))
        hi = max(config.max_objects, lo)
        n_total = int(rng.integers(lo, hi + 1))
        specs = [(c, str(rng.choice(P.COLORS))) for c in cats]
        if not lab and n_total > n_task and P.env_category(env_id) not in cats:
            specs.append((P.env_category(env_id), str(rng.choice(P.COLORS))))
        source = P.LAB + P.DISHES + P.CLOTHING if lab else P.DISHES + P.ITEMS + P.CLOTHING
        used = {s[0] for s in specs}
        pool = [c for c in source if c not in avoid and c not in used]
        n_extra = min(max(n_total - len(specs), 0), len(pool))
        for c in rng.choice(pool, size=n_extra, replace=False) if n_extra else ():
            specs.append((str(c), str(rng.choice(P.COLORS))))
    else:
        specs = list(objects)
        n_task = len(specs) if n_task_objects is None else n_task_objects

    free = [(r, c) for r in range(layout.width) for c in range(layout.width)
            if layout.free((r, c)) and (r, c) not in layout.receptacle_cells()]
    order = rng.permutation(len(free))
    if len(free) < len(specs) + 1:
        raise ValueError("scene too small for the requested objects")
    cells = [free[i] for i in order[: len(specs) + 1]]
    agent = cells[-1]
    objs = tuple(SceneObject(cat, col, cells[i], z=i) for i, (cat, col) in enumerate(specs))
    return Scene(
        env_id=env_id,
        layout=layout,
        objects=objs,
        agent=agent,
        heading=0.0,
        embodiment=embodiment,
        task=task,
        task_objects=tuple(range(n_task)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# rendering


def cell_to_pixels(cell_index: int, width: int, image_size: int = 16) -> tuple[int, int]:
    """Inclusive pixel span covered by one grid cell along one axis."""
    start = (cell_index * image_size) // width
    stop = ((cell_index + 1) * image_size) // width - 1
    return start, max(start, stop)


def cell_box(cell: Cell, width: int, image_size: int = 16) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) inclusive pixel rectangle of a cell in the top view."""
    y0, y1 = cell_to_pixels(cell[0], width, image_size)
    x0, x1 = cell_to_pixels(cell[1], width, image_size)
    return y0, x0, y1, x1


def _base_rgb(state: SimState, cell: Cell) -> np.ndarray:
    lay = state.layout
    patch = np.empty((2, 2, 3))
    if cell in lay.walls:
        patch[:] = np.array(P.WALL_RGB) * 0.7 + np.array(lay.floor_rgb) * 0.3
        return patch
    kind = lay.kind(cell)
    if kind == "sink":
        patch[:] = P.SINK_RGB
    elif kind == "drawer":
        patch[:] = P.DRAWER_OPEN_RGB if state.drawer_open else P.DRAWER_CLOSED_RGB
    elif kind == "basket":
        patch[:] = P.BASKET_RGB
    elif kind == "bed_head":
        patch[:] = P.BED_HEAD_RGB
    elif kind == "bed_foot":
        patch[:] = P.BLANKET_RGB
        if cell not in state.swept:
            patch[0, 1] = patch[1, 0] = P.BLANKET_MESSY_RGB
    else:
        patch[:] = lay.floor_rgb
    return patch


def cell_pattern(state: SimState, cell: Cell) -> np.ndarray:
    """2x2 RGB pattern: diagonal carries colour or agent, off-diagonal the category."""
    patch = _base_rgb(state, cell)
    if cell in state.layout.walls:
        return patch
    vis = state.visible_objects_at(cell)
    if vis:
        obj = state.objects[vis[-1]]
        a, b = P.category_signature(obj.category)
        patch[0, 1], patch[1, 0] = a, b
        if state.layout.kind(cell) is None:
            patch[0, 0] = patch[1, 1] = P.COLOR_RGB[obj.color]
    if cell == state.agent:
        patch[0, 0] = patch[1, 1] = P.AGENT_RGB[state.embodiment]
    return patch


def render_top(state: SimState, image_size: int = 16) -> np.ndarray:
    W = state.layout.width
    img = np.zeros((image_size, image_size, 3))
    for r in range(W):
        y0, y1 = cell_to_pixels(r, W, image_size)
        for c in range(W):
            x0, x1 = cell_to_pixels(c, W, image_size)
            pat = cell_pattern(state, (r, c))
            h, w = y1 - y0 + 1, x1 - x0 + 1
            ys = (np.arange(h) * 2) // h
            xs = (np.arange(w) * 2) // w
            img[y0 : y1 + 1, x0 : x1 + 1] = pat[ys][:, xs]
    return img


def _salient(state: SimState, cell: Cell) -> bool:
    return bool(state.visible_objects_at(cell)) or state.layout.kind(cell) is not None


def render_ego(state: SimState, window: int = 7, image_size: int = 16, periphery: bool = True) -> np.ndarray:
    """Agent-centred window at 2 px per cell plus a 2 px strip showing the held object.

    With ``periphery`` every object or receptacle beyond the window is drawn on the window edge at
    its clamped offset, so its quadrant matches its true direction. Real content wins an edge slot,
    then the nearest projected cell.
    """
    img = np.zeros((image_size, image_size, 3))
    half = window // 2
    ar, ac = state.agent
    W = state.layout.width
    taken = set()
    for i in range(window):
        for j in range(window):
            cell = (ar - half + i, ac - half + j)
            if not (0 <= cell[0] < W and 0 <= cell[1] < W):
                continue
            img[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = cell_pattern(state, cell)
            if cell == state.agent or cell in state.layout.walls or _salient(state, cell):
                taken.add((i, j))
    if periphery:
        far = [(r, c) for r in range(W) for c in range(W)
               if max(abs(r - ar), abs(c - ac)) > half and _salient(state, (r, c))]
        # farthest first so nearer cells overwrite a shared slot
        far.sort(key=lambda rc: (-max(abs(rc[0] - ar), abs(rc[1] - ac)), rc))
        for r, c in far:
            i = half + int(np.clip(r - ar, -half, half))
            j = half + int(np.clip(c - ac, -half, half))
            if (i, j) not in taken:
                img[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = cell_pattern(state, (r, c))
    strip = slice(2 * window, image_size)
    if state.held is not None:
        obj = state.objects[state.held]
        a, b = P.category_signature(obj.category)
        cols = [a, b, np.array(P.COLOR_RGB[obj.color])]
        for x in range(image_size):
            img[strip, x] = cols[x % 3]
    elif state.gripper_closed:
        img[strip] = 0.3
    return img


@dataclass(frozen=True)
class Observation:
    images: np.ndarray  # (n_cam, S, S, 3) in [0, 1]
    proprio: np.ndarray  # (PROPRIO_DIM,) in [-1, 1]
    prompt: str
    step: int = 0


def proprio_vector(state: SimState) -> np.ndarray:
    W = state.layout.width
    r, c = state.agent
    q = np.array([
        2.0 * r / (W - 1) - 1.0,
        2.0 * c / (W - 1) - 1.0,
        1.0 if state.gripper_closed else -1.0,
        state.lift,
        state.arm,
        1.0 if state.held is not None else -1.0,
        state.heading,
    ])
    assert q.size == PROPRIO_DIM
    return q


def observe(state: SimState, prompt: str = "", config: SceneConfig | None = None) -> Observation:
    config = config or SceneConfig()
    images = np.stack([render_top(state, config.image_size),
                       render_ego(state, config.ego_window, config.image_size, config.ego_periphery)])
    return Observation(images=np.clip(images, 0.0, 1.0), proprio=proprio_vector(state),
                       prompt=prompt, step=state.steps)


def with_objects(state: SimState, objects) -> SimState:
    return replace(state, objects=tuple(objects))
