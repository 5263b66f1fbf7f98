"""Command-line entry point: data generation, training, finetuning,
benchmarking, ablations, evaluation, and parameter accounting.

Every stochastic command requires an explicit ``--seed``; outputs that already
exist are left untouched unless ``--force`` is given. The fully resolved
configuration is written next to every output tree for provenance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_delta,
    save_checkpoint,
    save_delta,
)
from .config import ConfigError, PRESETS, RunConfig, load_config
from .continual import build_cl_plan, derive_seed, plan_param_count, run_finetune
from .ctc import Vocabulary
from .datagen import generate_corpus, read_corpus, write_corpus
from .disconformer import CORE_ONLY, DEFAULT_K, DisConformer, ModelConfig, count_params
from .evalbench import BenchConfig, evaluate, run_ablations, run_benchmark, speaker_model
from .training import TrainData, model_from_checkpoint, train

__all__ = ["main"]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named configuration preset")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (applied last)")


def _load(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "preset", None),
                       getattr(args, "overrides", []))


def _outputs_exist(out: Path, marker: str, force: bool) -> bool:
    target = out / marker
    if target.exists() and not force:
        print(f"{target} already exists; skipping (use --force to overwrite)")
        return True
    return False


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg.as_dict(), sort_keys=True, indent=2) + "\n"
    )


def _cmd_datagen(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    if _outputs_exist(out, "meta.json", args.force):
        return 0
    bundle = generate_corpus(cfg.data, args.seed)
    write_corpus(bundle, out, materialize_features=args.materialize)
    _write_resolved(cfg, out)
    n_utts = sum(len(v) for v in bundle.original.values())
    print(f"wrote corpus with {len(bundle.speakers)} speakers and "
          f"{n_utts} original utterances to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    if _outputs_exist(out, "final.ckpt", args.force):
        return 0
    bundle = read_corpus(args.data)
    model = DisConformer.build(cfg.model, args.seed)
    data = TrainData(train=bundle.original["train"], dev=bundle.original["dev"],
                     root=args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    _write_resolved(cfg, out)
    result = train(model, data, cfg.training, args.seed, out_dir=out, resume=resume)
    last = result.metrics[-1] if result.metrics else {}
    best = f", best dev WER {result.final.extra['best_wer']:.4f}" \
        if result.final.extra.get("best_step", -1) >= 0 else ""
    print(f"trained to step {result.final.step} (loss {last.get('loss', float('nan')):.4f}{best}); "
          f"checkpoints in {out}")
    return 0


def _split_records(bundle, spec: str):
    """Resolve 'original:test' or '<speaker>:<split>' into utterance records."""
    who, _, part = spec.partition(":")
    if not part:
        raise ValueError(f"split must look like original:test or spk00:val, got {spec!r}")
    if who == "original":
        if part not in bundle.original:
            raise ValueError(f"unknown original split {part!r}")
        return bundle.original[part]
    sc = bundle.speaker_by_id(who)
    if part == "val":
        return sc.val
    if part == "test":
        return sc.test
    if part.startswith("train-"):
        return sc.train_splits[int(part.split("-")[1])]
    raise ValueError(f"unknown speaker split {part!r}")


def _cmd_finetune(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    marker = f"{args.algorithm}.{args.speaker}.delta"
    if _outputs_exist(out, marker, args.force):
        return 0
    base = load_checkpoint(args.base)
    bundle = read_corpus(args.data)
    sc = bundle.speaker_by_id(args.speaker)
    records = sc.train_splits[args.split]
    model_cfg = ModelConfig(**base.config["model"])
    steps = None
    if cfg.cl.steps_per_split:
        steps = cfg.cl.steps_per_split[args.split]
    sp_seed = derive_seed(args.seed, args.algorithm, args.split, args.speaker)
    rng = np.random.default_rng(np.random.SeedSequence([sp_seed, 0xB10C]))
    plan = build_cl_plan(model_cfg, args.algorithm, cfg.cl.cl_options(model_cfg), rng,
                         base_digest=base.digest)
    result = run_finetune(base, plan, records, cfg.cl.cl_config(steps), sp_seed,
                          root=args.data)
    _write_resolved(cfg, out)
    save_delta(out / marker, result.delta)
    print(f"finetuned {args.speaker} with {args.algorithm} "
          f"({plan_param_count(plan, model_cfg):,d} trainable params); delta in {out / marker}")
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    if _outputs_exist(out, "report.json", args.force):
        return 0
    base = load_checkpoint(args.base)
    bundle = read_corpus(args.data)
    model_cfg = ModelConfig(**base.config["model"])
    algorithms = tuple(args.algorithms.split(",")) if args.algorithms else cfg.eval.algorithms
    splits = tuple(int(s) for s in args.splits.split(",")) if args.splits else cfg.eval.split_indices
    steps_per_split = None
    if cfg.cl.steps_per_split:
        by_index = dict(zip(cfg.eval.split_indices, cfg.cl.steps_per_split))
        steps_per_split = tuple(by_index.get(s, cfg.cl.steps) for s in splits)
    bench = BenchConfig(
        algorithms=algorithms,
        split_indices=splits,
        cl=cfg.cl.cl_config(),
        steps_per_split=steps_per_split,
        options=cfg.cl.cl_options(model_cfg),
        decode=cfg.eval.decode,
        median=cfg.eval.median,
        model_name=cfg.preset or "model",
    )
    _write_resolved(cfg, out)
    report = run_benchmark(base, bundle, bench, args.seed, out_dir=out, root=args.data)
    print(report.to_text())
    print(f"report written to {out / 'report.json'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    if _outputs_exist(out, f"ablation.{args.kind}.json", args.force):
        return 0
    bundle = read_corpus(args.data)
    checkpoints = {}
    if args.base:
        checkpoints["base"] = load_checkpoint(args.base)
    if args.disco:
        checkpoints["disco"] = load_checkpoint(args.disco)
    if args.wide_base:
        checkpoints["wide_base"] = load_checkpoint(args.wide_base)
    needed = {"kd_lambda": ("base",), "recombination": ("base", "disco")}[args.kind]
    for key in needed:
        if key not in checkpoints:
            raise ValueError(f"ablation {args.kind} requires --{key.replace('_', '-')}")
    ref = checkpoints.get("disco") or checkpoints["base"]
    model_cfg = ModelConfig(**ref.config["model"])
    grid = tuple(float(x) for x in args.grid.split(",")) if args.grid else (0, 1, 2, 4, 8, 16, 32)
    _write_resolved(cfg, out)
    report = run_ablations(
        args.kind, checkpoints, bundle, cfg.cl.cl_config(), args.seed,
        grid=grid, split_idx=args.split, options=cfg.cl.cl_options(model_cfg),
        decode=cfg.eval.decode, root=args.data, out_dir=out,
    )
    for cell in report["cells"]:
        print(json.dumps(cell, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    base = load_checkpoint(args.ckpt)
    bundle = read_corpus(args.data)
    records = _split_records(bundle, args.split)
    vocab = Vocabulary.from_list(base.vocab)
    if args.delta:
        delta = load_delta(args.delta)
        model, plan = speaker_model(base, delta)
        selection = plan.selection() if args.mode == "plan" else CORE_ONLY
    else:
        model = model_from_checkpoint(base)
        selection = CORE_ONLY
    result = evaluate(model, records, args.decode, selection, root=args.data, vocab=vocab)
    print(f"WER {result.wer:.4f} ({result.edits} edits / {result.ref_words} ref words, "
          f"{len(result.per_utterance)} utterances, decode={args.decode})")
    if args.details:
        Path(args.details).write_text(
            json.dumps(result.per_utterance, sort_keys=True, indent=2) + "\n"
        )
    return 0


def _cmd_count_params(args) -> int:
    cfg = _load(args)
    k = args.k if args.k is not None else None
    total = count_params(cfg.model, args.mode, k)
    millions = total / 1e6
    print(f"{total:,d} parameters ({millions:.2f}M) [mode={args.mode}]")
    return 0


def _cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        ckpt = load_checkpoint(path)
    except CheckpointError:
        delta = load_delta(path)
        n = sum(a.size for a in delta.arrays.values())
        print(f"delta checkpoint: base digest {delta.base_digest}")
        print(f"algorithm {delta.plan['algorithm']}, {len(delta.arrays)} arrays, "
              f"{n:,d} parameters")
        return 0
    n = sum(a.size for a in ckpt.params.values())
    print(f"full checkpoint: step {ckpt.step}, {len(ckpt.params)} arrays, {n:,d} parameters")
    print(f"config digest {ckpt.digest}")
    print(f"vocab size {len(ckpt.vocab)}")
    if ckpt.extra:
        print(f"extra: {json.dumps(ckpt.extra, sort_keys=True)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discoasr",
        description="Disentangled Conformer CTC training and speaker continual learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic multi-speaker corpus")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--materialize", action="store_true",
                   help="write feature files instead of generator references")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", help="general ASR training on the original corpus")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", required=True, help="datagen output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="continual-learning finetune for one speaker")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--base", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--split", type=int, default=0, help="train split index")
    p.add_argument("--algorithm", default="disentangled_cl",
                   choices=("disentangled_cl", "full_ft", "kd",
                            "full_ft_efficient", "kd_efficient"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("benchmark", help="full finetune+evaluate grid over speakers")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithms", help="comma-separated override of eval.algorithms")
    p.add_argument("--splits", help="comma-separated split indices")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("ablate", help="KL-weight sweep or recombination grid")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--kind", required=True, choices=("kd_lambda", "recombination"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="plain pretrained checkpoint")
    p.add_argument("--disco", help="disentangled pretrained checkpoint")
    p.add_argument("--wide-base", dest="wide_base", help="wide plain donor checkpoint")
    p.add_argument("--grid", help="comma-separated lambda grid")
    p.add_argument("--split", type=int, default=-1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--delta", help="speaker delta checkpoint to overlay")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, help="original:test or <speaker>:<val|test|train-N>")
    p.add_argument("--decode", default="greedy", help="greedy or beam:<n>")
    p.add_argument("--mode", default="plan", choices=("plan", "core"),
                   help="use the delta's augment groups or core-only inference")
    p.add_argument("--details", help="write per-utterance results to this JSON file")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("count-params", help="exact parameter counts for a configuration")
    _add_config_args(p)
    p.add_argument("--mode", default="full", choices=("core_only", "deployed", "full"))
    p.add_argument("--k", type=int, help="augment groups per module kind when deployed")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint provenance")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: diagnostic, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
