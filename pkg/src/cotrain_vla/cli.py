"""Command line entry point: codec, world, train, policy and bench subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("cotrain_vla")


# ---------------------------------------------------------------------------
# codec


def _action_chunks(data_dir, categories=("MM", "ME", "CE")):
    from .world.datasets import read_datasets

    _, data = read_datasets(data_dir)
    return {c: data[c] for c in categories if c in data}


def cmd_codec_fit(args):
    from .codec import save_codec
    from .train.examples import fit_tokenizer

    tok = fit_tokenizer(_action_chunks(args.data), merges=0, levels=args.levels)
    save_codec(args.out, tok.norm)
    print(json.dumps({k: {"q_low": v.q_low.tolist(), "q_high": v.q_high.tolist()} for k, v in tok.norm.items()}))


def cmd_codec_train_vocab(args):
    from .codec import save_codec
    from .train.examples import fit_tokenizer

    tok = fit_tokenizer(_action_chunks(args.data), merges=args.merges, levels=args.levels)
    save_codec(args.out, tok.norm, tok.fast)
    print(json.dumps({"levels": tok.fast.levels, "merges": len(tok.fast.merges), "size": tok.fast.size}))


def cmd_codec_roundtrip(args):
    from .codec import ActionChunk, decode_fast, encode_fast, load_codec, normalize, pad_actions
    from .world.embodiment import D_MAX

    stats, vocab = load_codec(args.codec)
    if vocab is None:
        sys.exit("codec file has no FAST vocabulary; run `codec train-vocab` first")
    lengths, errors = [], []
    for recs in _action_chunks(args.data).values():
        for r in recs:
            if r.embodiment not in stats:
                continue
            c = pad_actions(normalize(ActionChunk(r.actions), stats[r.embodiment]), D_MAX)
            toks = encode_fast(c, vocab)
            back = decode_fast(toks, vocab)
            lengths.append(len(toks))
            errors.append(float(np.abs(back.values - np.clip(c.values, -4, 4)).max()))
    report = {"chunks": len(lengths), "mean_tokens": float(np.mean(lengths)), "max_tokens": int(np.max(lengths)),
              "max_abs_error": float(np.max(errors)), "half_step_bound": vocab.half_step_bound()}
    print(json.dumps(report, indent=1))


# ---------------------------------------------------------------------------
# world


def cmd_world_gen(args):
    from .world.datasets import DataConfig, manifest, write_datasets, build_datasets

    cfg = DataConfig(seed=args.seed, train_envs=tuple(range(args.envs)), episodes_per_env=args.episodes_per_env,
                     categories=tuple(args.categories))
    data = build_datasets(cfg)
    write_datasets(args.out, cfg, data)
    print(json.dumps(manifest(cfg, data)["counts"]))


# ---------------------------------------------------------------------------
# train


def _train_setup(doc: dict, cache: str | None):
    from .bench.pipeline import Workspace, data_key
    from .bench.plan import default_cache
    from .world.datasets import DataConfig

    dcfg = DataConfig.from_dict(doc.get("data", {}))
    ws = Workspace(cache or doc.get("cache") or default_cache(), merges=doc.get("merges", 512))
    data = ws.datasets(dcfg)
    tok = ws.tokenizer(dcfg)
    return ws, dcfg, data, tok, data_key(dcfg, ws.merges)


def _run_doc(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_train(args):
    from .model.checkpoint import load_meta
    from .train.mixture import posttrain_config, pretrain_config
    from .train.stage import run_stage

    doc = _run_doc(args.config)
    if args.stage == "posttrain" and not args.config:
        init_dir = Path(args.init).parent
        if (init_dir / "run.json").exists():
            doc = {k: v for k, v in _run_doc(init_dir / "run.json").items() if k != "mixture"}
    ws, dcfg, data, tok, key = _train_setup(doc, args.cache)
    make = pretrain_config if args.stage == "pretrain" else posttrain_config
    mix = make().with_(**doc.get("mixture", {}))
    if args.steps is not None:
        mix = mix.with_(steps=args.steps)
    if args.stage == "posttrain":
        load_meta(args.init)  # fail early on a missing checkpoint
    out = Path(args.out)
    res = run_stage(mix, data, tok, ws.model_config(tok), out=out, init=args.init, data_hash=key)
    (out / "run.json").write_text(json.dumps({"data": dcfg.to_dict(), "merges": ws.merges, "cache": str(ws.root),
                                              "mixture": mix.to_dict()}, indent=1, sort_keys=True))
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), **last}))


# ---------------------------------------------------------------------------
# policy


def cmd_policy_run(args):
    from .bench.pipeline import EvalConfig, evaluate, strategy_for
    from .bench.report import episode_row
    from .model.checkpoint import load_checkpoint
    from .train.stage import load_tokenizer
    from .world.datasets import read_datasets

    ckpt = Path(args.ckpt)
    model, _ = load_checkpoint(ckpt)
    tok = load_tokenizer(ckpt.parent / "tokenizer.json")
    hl = []
    if args.hl == "external":
        if not args.data:
            sys.exit("--hl external needs --data with HL records")
        hl = read_datasets(args.data)[1].get("HL", [])
    held = tuple(range(args.env_base, args.env_base + args.episodes))
    ecfg = EvalConfig(tasks=(args.task,), trials=args.episodes, held_out=held, seed=args.seed,
                      denoise_steps=args.denoise_steps, refresh_period=args.refresh)
    eps = evaluate(model, tok, strategy_for(args.hl, model, tok, hl), ecfg)
    if args.log:
        with open(args.log, "w") as f:
            for e in eps:
                f.write(json.dumps(episode_row(e), sort_keys=True) + "\n")
    scores = [e.score for e in eps]
    print(json.dumps({"task": args.task, "hl": args.hl, "episodes": len(eps),
                      "rubric_mean": float(np.mean(scores)) if scores else None,
                      "success_rate": float(np.mean([e.success for e in eps])) if eps else None}))


# ---------------------------------------------------------------------------
# bench

BENCH_KINDS = {"env-scaling": "env_scaling", "ablate-mixture": "mixture_ablation", "ablate-hl": "hl_ablation",
               "lang-follow": "language_following"}


def cmd_bench(args):
    from .bench.plan import ExperimentPlan
    from .bench.report import emit_report
    from .bench.runners import run_plan

    kind = BENCH_KINDS[args.kind]
    doc = _run_doc(args.plan)
    if doc.get("kind", kind) != kind:
        sys.exit(f"plan kind {doc['kind']!r} does not match `bench {args.kind}`")
    doc["kind"] = kind
    if args.cache:
        doc["cache"] = args.cache
    plan = ExperimentPlan.from_dict(doc)
    report = run_plan(plan)
    emit_report(report, args.out)
    print(json.dumps({c.name + "/" + c.metric: round(c.mean, 4) for c in report.cells}))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotrain-vla")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="group", required=True)

    codec = sub.add_parser("codec").add_subparsers(dest="cmd", required=True)
    c = codec.add_parser("fit", help="fit per-robot quantile normalizers")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--levels", type=int, default=129)
    c.set_defaults(fn=cmd_codec_fit)
    c = codec.add_parser("train-vocab", help="fit normalizers and learn the discrete action vocabulary")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--merges", type=int, default=512)
    c.add_argument("--levels", type=int, default=129)
    c.set_defaults(fn=cmd_codec_train_vocab)
    c = codec.add_parser("roundtrip-report")
    c.add_argument("--data", required=True)
    c.add_argument("--codec", required=True)
    c.set_defaults(fn=cmd_codec_roundtrip)

    world = sub.add_parser("world").add_subparsers(dest="cmd", required=True)
    w = world.add_parser("gen", help="generate the dataset categories")
    w.add_argument("--envs", type=int, default=16)
    w.add_argument("--episodes-per-env", type=int, default=16)
    w.add_argument("--categories", nargs="+", default=["MM", "ME", "CE", "HL", "WD", "VI"])
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", required=True)
    w.set_defaults(fn=cmd_world_gen)

    train = sub.add_parser("train").add_subparsers(dest="stage", required=True)
    for stage in ("pretrain", "posttrain"):
        t = train.add_parser(stage)
        t.add_argument("--config", required=stage == "pretrain", help="JSON with data, mixture and merges keys")
        if stage == "posttrain":
            t.add_argument("--init", required=True, help="pre-training checkpoint (model.bin)")
        else:
            t.set_defaults(init=None)
        t.add_argument("--out", required=True)
        t.add_argument("--steps", type=int)
        t.add_argument("--cache")
        t.set_defaults(fn=cmd_train)

    pol = sub.add_parser("policy").add_subparsers(dest="cmd", required=True)
    r = pol.add_parser("run")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True)
    r.add_argument("--hl", choices=["model", "implicit", "none", "oracle", "external"], default="model")
    r.add_argument("--episodes", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--env-base", type=int, default=200)
    r.add_argument("--denoise-steps", type=int, default=10)
    r.add_argument("--refresh", type=int, default=1)
    r.add_argument("--data", help="dataset directory (for --hl external)")
    r.add_argument("--log", help="write one JSON line per episode here")
    r.set_defaults(fn=cmd_policy_run)

    b = sub.add_parser("bench")
    b.add_argument("kind", choices=sorted(BENCH_KINDS))
    b.add_argument("--plan", help="JSON plan file; defaults apply when omitted")
    b.add_argument("--out", required=True)
    b.add_argument("--cache")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    import torch

    torch.set_num_threads(1)
    args.fn(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
