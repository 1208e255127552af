"""Training records for every data category, plus JSON-lines persistence.

Categories:
    MM  mobile robot in the training homes
    ME  fixed_a robot across many other homes
    CE  fixed_b robot in lab scenes
    HL  subtask prediction (boundary examples with boxes, and per-step joint examples)
    WD  caption / QA / localization over rendered scenes, including held-out categories
    VI  subtask labels along perturbed rollouts in the training homes
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import palette as P
from .expert import Episode, _pick_target, expert_rollout, parse_subtask
from .scene import LAB_TASKS, TASKS, Cell, SceneConfig, SimState, cell_box, generate_scene, observe

CATEGORIES = ("MM", "ME", "CE", "HL", "WD", "VI")


@dataclass
class Record:
    category: str
    prompt: str
    images: np.ndarray
    embodiment: str | None = None
    subtask: str | None = None
    proprio: np.ndarray | None = None
    actions: np.ndarray | None = None  # native units (H, d)
    boxes: list[tuple[int, int, int, int]] | None = None
    answer: str | None = None
    kind: str = "act"  # act | boxes | joint | subtask | web
    task: str | None = None
    env_id: int = -1
    episode: int = -1
    success: bool = True
    length: int = 0


@dataclass
class DataConfig:
    seed: int = 0
    world: SceneConfig = field(default_factory=lambda: SceneConfig(width=8))
    tasks: tuple[str, ...] = TASKS
    train_envs: tuple[int, ...] = tuple(range(16))
    episodes_per_env: int = 16  # per task
    me_envs: tuple[int, ...] = tuple(range(100, 164))
    me_episodes_per_env: int = 2
    ce_envs: tuple[int, ...] = tuple(range(900, 908))
    ce_episodes_per_env: int = 12
    wd_count: int = 4000
    wd_env_base: int = 500
    vi_episodes_per_env: int = 4
    vi_noise: float = 0.6
    vi_drop: float = 0.3
    categories: tuple[str, ...] = CATEGORIES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = asdict(self.world)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        world = SceneConfig(**d.pop("world", {}))
        for k, v in list(d.items()):
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(world=world, **d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# per-episode records


def episode_records(ep: Episode, category: str, episode: int) -> list[Record]:
    """One low-level record per executed chunk, labelled with the expert chunk."""
    out = []
    for s in ep.steps:
        out.append(Record(
            category=category, prompt=ep.prompt, subtask=s.subtask, images=s.obs.images.astype(np.float32),
            proprio=s.obs.proprio.astype(np.float32), actions=s.actions.astype(np.float32),
            embodiment=ep.embodiment, kind="act", task=ep.task, env_id=ep.env_id, episode=episode,
            success=ep.success, length=ep.length,
        ))
    return out


def subtask_boxes(state: SimState, subtask: str, image_size: int = 16) -> list[tuple[int, int, int, int]]:
    """Top-camera box of the object the subtask acts on, if any."""
    kind, info = parse_subtask(subtask)
    cell: Cell | None = None
    if kind == "pick":
        i = _pick_target(state, info["groups"][0])
        cell = state.objects[i].cell if i is not None else None
    elif kind in ("put", "pillow", "down") and state.held is not None:
        cell = state.agent
    if cell is None:
        return []
    return [cell_box(cell, state.layout.width, image_size)]


def make_hl_examples(ep: Episode, episode: int = -1, with_boxes: bool = True) -> list[Record]:
    """One example per subtask boundary; target is the subtask that starts there."""
    out = []
    for sub, i in ep.segments():
        s = ep.steps[i]
        boxes = subtask_boxes(s.state, sub, s.obs.images.shape[1]) if with_boxes else None
        out.append(Record(
            category="HL", prompt=ep.prompt, subtask=sub, images=s.obs.images.astype(np.float32),
            proprio=s.obs.proprio.astype(np.float32), embodiment=ep.embodiment, boxes=boxes,
            kind="boxes", task=ep.task, env_id=ep.env_id, episode=episode, success=ep.success,
            length=ep.length,
        ))
    return out


def joint_examples(records: list[Record]) -> list[Record]:
    """Per-step examples that predict the subtask and then the action tokens."""
    out = []
    for r in records:
        j = Record(**{f.name: getattr(r, f.name) for f in fields(Record)})
        j.category, j.kind = "HL", "joint"
        out.append(j)
    return out


# ---------------------------------------------------------------------------
# web-style data

_RECEPTACLE_WORD = {"sink": "sink", "drawer": "drawer", "basket": "basket", "bed_head": "bed", "bed_foot": "bed"}


def _nearest_receptacle(state: SimState, cell: Cell) -> str:
    lay = state.layout
    spots = [("sink", lay.sink), ("drawer", lay.drawer), ("basket", lay.basket)]
    spots += [("bed_head", c) for c in lay.bed_head] + [("bed_foot", c) for c in lay.bed_foot]
    name, _ = min(spots, key=lambda s: (max(abs(s[1][0] - cell[0]), abs(s[1][1] - cell[1])), s[0]))
    return _RECEPTACLE_WORD[name]


def web_example(state: SimState, index: int, family: str, image_size: int = 16) -> Record:
    obj = state.objects[index]
    box = cell_box(obj.cell, state.layout.width, image_size)
    if family == "caption":
        q, a = f"describe the {obj.category}", f"a {obj.color} {obj.category} near the {_nearest_receptacle(state, obj.cell)}"
    elif family == "qa":
        q, a = f"what color is the {obj.category} ?", obj.color
    elif family == "loc":
        q, a = f"where is the {obj.category} ?", None
    else:
        raise ValueError(family)
    images = observe(state).images.astype(np.float32)
    return Record(category="WD", prompt=q, images=images, answer=a, kind="web",
                  boxes=[box] if family == "loc" else None, subtask=obj.category)


WEB_FAMILIES = ("caption", "qa", "loc")


def make_web_examples(seed: int, count: int, config: SceneConfig = SceneConfig(width=8),
                      env_base: int = 500, n_envs: int = 50) -> list[Record]:
    """Caption, QA and localization examples; subjects are drawn uniformly over every category."""
    rng = np.random.default_rng([seed, 77])
    out = []
    while len(out) < count:
        env = env_base + int(rng.integers(0, n_envs))
        n = int(rng.integers(2, 6))
        cats = [str(c) for c in rng.choice(P.CATEGORIES, size=n, replace=False)]
        objs = [(c, str(rng.choice(P.COLORS))) for c in cats]
        scene = generate_scene(int(rng.integers(0, 2**31)), env, "mobile", "laundry_basket", config,
                               objects=objs, n_task_objects=1)
        state = SimState.from_scene(scene)
        for _ in range(min(3, count - len(out))):
            i = int(rng.integers(0, n))
            fam = WEB_FAMILIES[int(rng.integers(0, 3))]
            r = web_example(state, i, fam, config.image_size)
            r.env_id = env
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# dataset assembly


def _rollouts(cfg: DataConfig, category: str, embodiment: str, envs, per_env: int, tasks,
              lab: bool = False, noise: float = 0.0, drop: float = 0.0) -> list[Episode]:
    eps = []
    salt = CATEGORIES.index(category)
    for env in envs:
        for task in tasks:
            for k in range(per_env):
                seed = int(np.random.SeedSequence([cfg.seed, salt, env, k]).generate_state(1)[0])
                scene = generate_scene(seed, env, embodiment, task, cfg.world, lab=lab)
                rng = np.random.default_rng([cfg.seed, salt, env, k, 1])
                eps.append(expert_rollout(scene, noise=noise, rng=rng, drop_prob=drop, category=category))
    return eps


def _flatten(eps: list[Episode], category: str) -> list[Record]:
    out = []
    for i, ep in enumerate(eps):
        out += episode_records(ep, category, i)
    return out


def build_datasets(cfg: DataConfig) -> dict[str, list[Record]]:
    """Generate every requested category. Pure function of the config."""
    data: dict[str, list[Record]] = {c: [] for c in CATEGORIES}
    mm_eps, me_eps = [], []
    if {"MM", "HL"} & set(cfg.categories):
        mm_eps = _rollouts(cfg, "MM", "mobile", cfg.train_envs, cfg.episodes_per_env, cfg.tasks)
        data["MM"] = _flatten(mm_eps, "MM")
    if {"ME", "HL"} & set(cfg.categories):
        me_eps = _rollouts(cfg, "ME", "fixed_a", cfg.me_envs, cfg.me_episodes_per_env, cfg.tasks)
        data["ME"] = _flatten(me_eps, "ME")
    if "CE" in cfg.categories:
        data["CE"] = _flatten(_rollouts(cfg, "CE", "fixed_b", cfg.ce_envs, cfg.ce_episodes_per_env,
                                        LAB_TASKS, lab=True), "CE")
    if "HL" in cfg.categories:
        hl = []
        for i, ep in enumerate(mm_eps + me_eps):
            hl += make_hl_examples(ep, i)
        data["HL"] = hl + joint_examples(data["MM"] + data["ME"])
    if "VI" in cfg.categories:
        vi_eps = _rollouts(cfg, "VI", "mobile", cfg.train_envs, cfg.vi_episodes_per_env, cfg.tasks,
                           noise=cfg.vi_noise, drop=cfg.vi_drop)
        vi = _flatten(vi_eps, "VI")
        for r in vi:
            r.kind = "subtask"
        data["VI"] = vi
    if "WD" in cfg.categories:
        data["WD"] = make_web_examples(cfg.seed, cfg.wd_count, cfg.world, cfg.wd_env_base)
    return {c: data[c] for c in cfg.categories}


def length_threshold(records: list[Record], percentile: float = 95.0) -> float:
    """Episode-length cut-off over successful episodes (one vote per episode)."""
    lengths = {}
    for r in records:
        if r.success and r.episode >= 0:
            lengths[(r.category, r.episode)] = r.length
    if not lengths:
        return float("inf")
    return float(np.percentile(list(lengths.values()), percentile))


def filter_records(records: list[Record], threshold: float) -> list[Record]:
    return [r for r in records if r.success and r.length <= threshold]


def manifest(cfg: DataConfig, data: dict[str, list[Record]]) -> dict:
    envs = sorted({r.env_id for rs in data.values() for r in rs})
    return {
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "env_ids": envs,
        "counts": {c: len(rs) for c, rs in data.items()},
    }


# ---------------------------------------------------------------------------
# persistence


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode()


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float32)


def record_to_json(r: Record) -> dict:
    return {
        "category": r.category,
        "embodiment": r.embodiment,
        "prompt": r.prompt,
        "subtask": r.subtask,
        "images": _b64(r.images),
        "image_shape": list(r.images.shape),
        "proprio": None if r.proprio is None else [float(x) for x in r.proprio],
        "actions": None if r.actions is None else r.actions.astype(float).tolist(),
        "boxes": None if r.boxes is None else [list(b) for b in r.boxes],
        "answer": r.answer,
        "kind": r.kind,
        "task": r.task,
        "env_id": r.env_id,
        "episode": r.episode,
        "success": r.success,
        "length": r.length,
    }


def record_from_json(d: dict) -> Record:
    return Record(
        category=d["category"], prompt=d["prompt"], images=_unb64(d["images"], d["image_shape"]),
        embodiment=d["embodiment"], subtask=d["subtask"],
        proprio=None if d["proprio"] is None else np.asarray(d["proprio"], dtype=np.float32),
        actions=None if d["actions"] is None else np.asarray(d["actions"], dtype=np.float32),
        boxes=None if d["boxes"] is None else [tuple(b) for b in d["boxes"]],
        answer=d["answer"], kind=d["kind"], task=d["task"], env_id=d["env_id"], episode=d["episode"],
        success=d["success"], length=d["length"],
    )


def write_datasets(out_dir, cfg: DataConfig, data: dict[str, list[Record]]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cat, recs in data.items():
        with open(out / f"{cat}.jsonl", "w") as f:
            for r in recs:
                f.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest(cfg, data), f, indent=1, sort_keys=True)
    return out


def read_datasets(in_dir) -> tuple[DataConfig, dict[str, list[Record]]]:
    d = Path(in_dir)
    man = json.loads((d / "manifest.json").read_text())
    cfg = DataConfig.from_dict(man["config"])
    data = {}
    for cat in man["counts"]:
        with open(d / f"{cat}.jsonl") as f:
            data[cat] = [record_from_json(json.loads(line)) for line in f]
    return cfg, data
