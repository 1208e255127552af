"""Study designs at desk scale: env-count scaling, mixture ablations, HL ablations, language following."""

from __future__ import annotations

import logging
import zlib
from dataclasses import replace

import numpy as np

from ..train.mixture import posttrain_config, pretrain_config
from ..world import palette as P
from ..world.datasets import DataConfig
from ..world.expert import _cheb, _in, expert_rollout
from ..world.scene import SceneConfig, generate_scene
from ..policy import RolloutConfig, act_loop
from .pipeline import EvalConfig, Workspace, data_key, evaluate, strategy_for
from .plan import ExperimentPlan
from .report import Cell, Report, episode_row

log = logging.getLogger(__name__)

# which categories each mixture ablation removes, per stage
ABLATIONS = {
    "full": (),
    "no_WD": ("WD",),
    "no_ME": ("ME",),
    "no_CE": ("CE",),
    "no_ME_CE": ("ME", "CE"),
    "no_VI": ("VI",),
    "no_HL": ("HL", "VI"),
}
# post-training never uses CE and pre-training never uses VI
_POST_ONLY = {"no_VI"}


class Lab:
    """Trains (or reuses) the checkpoints a plan needs, for one seed."""

    def __init__(self, plan: ExperimentPlan, seed: int):
        self.plan, self.seed = plan, seed
        self.ws = Workspace(plan.cache, merges=plan.merges)
        self.base = self.data_config()
        self.data = self.ws.datasets(self.base)
        self.tok = self.ws.tokenizer(self.base)
        self.key = data_key(self.base, plan.merges)

    def data_config(self, envs=None) -> DataConfig:
        envs = tuple(range(self.plan.train_envs)) if envs is None else tuple(envs)
        per = self.plan.episodes_total // len(envs)
        vi_per = max(1, (4 * self.plan.train_envs) // len(envs))
        return DataConfig(seed=self.seed, train_envs=envs, episodes_per_env=per, vi_episodes_per_env=vi_per)

    def eval_config(self) -> EvalConfig:
        p = self.plan
        return EvalConfig(trials=p.trials, held_out=p.held_out, seed=p.eval_seed + 1000 * self.seed)

    def pretrain(self, drop=()):
        mix = pretrain_config(seed=self.seed).with_(steps=self.plan.pretrain_steps)
        return self.ws.stage(mix.zeroed(*[c for c in drop if c != "VI"]), self.data, self.key, self.tok)

    def stages(self, name: str):
        """(pre-training, post-training) stage results for a named mixture variant."""
        drop = ABLATIONS[name]
        pre = self.pretrain(() if name in _POST_ONLY else drop)
        mix = posttrain_config(seed=self.seed, steps=self.plan.posttrain_steps)
        post = self.ws.stage(mix.zeroed(*[c for c in drop if c != "CE"]), self.data, self.key, self.tok,
                             init=pre.checkpoint)
        return pre, post

    def variant(self, name: str):
        """Post-trained model for a named mixture variant."""
        return self.stages(name)[1].model


def _score_cell(name, eps, seed, metric="rubric") -> Cell:
    per_task = {}
    for e in eps:
        per_task.setdefault(e.task, []).append(e.score)
    return Cell(name, metric, [e.score for e in eps], seed, [episode_row(e) for e in eps],
                {t: float(np.mean(v)) for t, v in per_task.items()})


# ---------------------------------------------------------------------------
# env scaling


def equalize(cells: dict, seed: int, categories=("MM", "HL", "VI")) -> dict:
    """Subsample each category to the smallest count across cells, so every cell sees as many examples."""
    out = {k: dict(v) for k, v in cells.items()}
    for cat in categories:
        n = min(len(v[cat]) for v in cells.values())
        for k, v in out.items():
            rng = np.random.default_rng([seed, 31, zlib.crc32(k.encode())])
            idx = np.sort(rng.choice(len(v[cat]), size=n, replace=False))
            v[cat] = [v[cat][i] for i in idx]
    return out


def run_env_scaling(plan: ExperimentPlan) -> Report:
    report = Report("env_scaling", plan.config_hash, list(plan.seeds), reference=f"envs_{max(plan.grid)}")
    for seed in plan.seeds:
        if plan.trials == 0:
            continue
        lab = Lab(plan, seed)
        ecfg = lab.eval_config()
        pre = lab.pretrain(drop=("MM",))
        control_envs = tuple(plan.held_out) + tuple(range(plan.train_envs))
        control_envs = control_envs[: max(plan.grid)]
        cfgs = {f"envs_{n}": lab.data_config(range(n)) for n in plan.grid}
        cfgs["control"] = lab.data_config(control_envs)
        cells = equalize({k: lab.ws.datasets(c) for k, c in cfgs.items()}, seed)
        counts = {k: {c: len(v[c]) for c in ("MM", "HL", "VI")} for k, v in cells.items()}
        assert len({tuple(sorted(c.items())) for c in counts.values()}) == 1, counts
        report.notes.setdefault("counts", {})[seed] = counts
        mix = posttrain_config(seed=seed, steps=plan.posttrain_steps)
        runs = [(k, k, mix, pre.checkpoint, False) for k in cfgs]
        big = f"envs_{max(plan.grid)}"
        only_mm = mix.with_(weights={"MM": 1.0, "ME": 0.0, "CE": 0.0, "HL": 0.0, "WD": 0.0, "VI": 0.0})
        runs += [("scratch_mm_only", big, only_mm, None, True), ("scratch_full_mix", big, mix, None, True)]
        for name, cell, m, init, scratch in runs:
            key = data_key(cfgs[cell], plan.merges, lab.base) + f"-eq{counts[cell]['MM']}"
            res = lab.ws.stage(m, cells[cell], key, lab.tok, init=init, from_scratch=scratch)
            eps = evaluate(res.model, lab.tok, strategy_for("model", res.model, lab.tok), ecfg)
            report.cells.append(_score_cell(name, eps, seed))
    return report


# ---------------------------------------------------------------------------
# mixture and HL ablations


def run_mixture_ablation(plan: ExperimentPlan) -> Report:
    report = Report("mixture_ablation", plan.config_hash, list(plan.seeds), reference="full")
    for seed in plan.seeds:
        if plan.trials == 0:
            continue
        lab = Lab(plan, seed)
        for name in plan.grid:
            model = lab.variant(name)
            eps = evaluate(model, lab.tok, strategy_for("model", model, lab.tok), lab.eval_config())
            report.cells.append(_score_cell(name, eps, seed))
            for cell in language_following_cells(lab, model, name, seed):
                report.cells.append(cell)
    return report


HL_STRATEGIES = {
    # cell: (mixture variant, provider kind)
    "model": ("full", "model"),
    "no_WD": ("no_WD", "model"),
    "no_VI": ("no_VI", "model"),
    "implicit": ("full", "implicit"),
    "no_HL": ("no_HL", "none"),
    "external": ("full", "external"),
    "oracle": ("full", "oracle"),
}


def run_hl_ablation(plan: ExperimentPlan) -> Report:
    report = Report("hl_ablation", plan.config_hash, list(plan.seeds), reference="model")
    for seed in plan.seeds:
        if plan.trials == 0:
            continue
        lab = Lab(plan, seed)
        for name in plan.grid:
            variant, kind = HL_STRATEGIES[name]
            model = lab.variant(variant)
            strat = strategy_for(kind, model, lab.tok, lab.data["HL"])
            report.cells.append(_score_cell(name, evaluate(model, lab.tok, strat, lab.eval_config()), seed))
    return report


# ---------------------------------------------------------------------------
# language following

_RECEPTACLE = {**{c: "sink" for c in P.DISHES}, **{c: "drawer" for c in P.ITEMS},
               **{c: "basket" for c in P.CLOTHING}}
_ID_TARGETS = tuple(P.ITEMS + P.CLOTHING + P.DISHES)


def follow_scene(seed: int, env_id: int, ood: bool, width: int = 8, n_objects: int = 5):
    """Five objects; the commanded one sits strictly farther from the robot than all four distractors."""
    rng = np.random.default_rng([seed, env_id, int(ood), 3])
    world = SceneConfig(width=width)
    for attempt in range(100):
        target = str(rng.choice(P.OOD if ood else _ID_TARGETS))
        rec = str(rng.choice(("sink", "drawer", "basket"))) if ood else _RECEPTACLE[target]
        pool = [c for c in _ID_TARGETS if c != target]
        cats = [target] + [str(c) for c in rng.choice(pool, size=n_objects - 1, replace=False)]
        objs = [(c, str(rng.choice(P.COLORS))) for c in cats]
        scene = generate_scene(int(rng.integers(0, 2**31)), env_id, "mobile", "laundry_basket", world,
                               objects=objs, n_task_objects=1)
        d = [_cheb(scene.agent, o.cell) for o in scene.objects]
        far = int(np.argmax(d))
        if sorted(d)[-1] == sorted(d)[-2]:
            continue  # no unique farthest object
        cells = [o.cell for o in scene.objects]
        cells[0], cells[far] = cells[far], cells[0]
        objects = tuple(replace(o, cell=c) for o, c in zip(scene.objects, cells))
        return replace(scene, objects=objects, task=f"fetch_to_{rec}:{target}", task_objects=(0,)), rec
    raise RuntimeError("could not place a farthest target")


def follow_outcome(ep, rec: str) -> tuple[bool, bool]:
    """(followed, success); success requires having selected the commanded object."""
    followed = ep.first_pick == 0
    return followed, bool(followed and _in(ep.final, 0, rec))


def follow_scenes(plan: ExperimentPlan, seed: int, ood: bool, n: int | None = None):
    n = plan.lf_trials if n is None else n
    envs = plan.held_out
    return [follow_scene(plan.eval_seed + 1000 * seed + j, envs[j % len(envs)], ood) for j in range(n)]


def language_following_cells(lab: Lab, model, name: str, seed: int, strategy: str = "model") -> list[Cell]:
    out = []
    strat = strategy_for(strategy, model, lab.tok, lab.data["HL"])
    for split, ood in (("id", False), ("ood", True)):
        pairs = follow_scenes(lab.plan, seed, ood)
        if not pairs:
            continue
        scenes = [s for s, _ in pairs]
        eps = act_loop(model, lab.tok, scenes, [s.task for s in scenes], strat,
                       RolloutConfig(seed=lab.plan.eval_seed + seed))
        res = [follow_outcome(e, rec) for e, (_, rec) in zip(eps, pairs)]
        rows = [episode_row(e) for e in eps]
        out.append(Cell(name, f"follow_{split}", [float(f) for f, _ in res], seed, rows))
        out.append(Cell(name, f"success_{split}", [float(s) for _, s in res], seed))
    return out


def random_following(plan: ExperimentPlan, seed: int) -> list[Cell]:
    """Uniformly random object choice, carried out by the scripted expert."""
    rng = np.random.default_rng([seed, 404])
    follow, success = [], []
    for j, (scene, rec) in enumerate(follow_scenes(plan, seed, ood=False, n=plan.random_trials)):
        pick = int(rng.integers(0, len(scene.objects)))
        cat = scene.objects[pick].category
        sub = replace(scene, task=f"fetch_to_{rec}:{cat}", task_objects=(pick,))
        ep = expert_rollout(sub, rng=np.random.default_rng([seed, j]))
        ok, done = follow_outcome(ep, rec)
        follow.append(float(ok))
        success.append(float(done))
    return [Cell("random", "follow_id", follow, seed), Cell("random", "success_id", success, seed)]


def run_language_following(plan: ExperimentPlan) -> Report:
    report = Report("language_following", plan.config_hash, list(plan.seeds), reference="full")
    for seed in plan.seeds:
        report.cells += random_following(plan, seed)
        if plan.trials == 0 or plan.lf_trials == 0:
            continue
        lab = Lab(plan, seed)
        for name in plan.grid:
            report.cells += language_following_cells(lab, lab.variant(name), name, seed)
    for c in report.cells:
        if c.metric.startswith("success"):
            f = report.get(c.name, c.metric.replace("success", "follow"))
            assert c.mean <= f.mean, (c.name, c.metric)
    return report


RUNNERS = {
    "env_scaling": run_env_scaling,
    "mixture_ablation": run_mixture_ablation,
    "hl_ablation": run_hl_ablation,
    "language_following": run_language_following,
}


def run_plan(plan: ExperimentPlan) -> Report:
    if plan.kind not in RUNNERS:
        raise ValueError(f"no runner for {plan.kind!r}")
    return RUNNERS[plan.kind](plan)
