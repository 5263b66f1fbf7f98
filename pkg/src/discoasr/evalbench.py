"""Speaker continual-learning benchmark: finetune-per-speaker evaluation loop,
speaker/original aggregate WERs, trainable-parameter accounting, and the
recombination / KL-weight ablation grids.

A benchmark row is one (algorithm, train split) pair: the base checkpoint is
finetuned once per speaker, each speaker model is scored on its own test set
and on the original-domain test set, and the row aggregates the per-speaker
WERs by median. Speaker inference uses the plan's augment groups on top of
the core; original-domain inference for the disentangled algorithm uses the
core alone, which is what makes its original-domain score immutable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, DeltaCheckpoint, apply_delta, save_delta
from .ctc import (
    DEFAULT_VOCAB,
    Vocabulary,
    ctc_beam_decode,
    ctc_greedy_decode,
    ctc_loss,
    edit_distance,
)
from .continual import (
    CLConfig,
    CLOptions,
    CLPlan,
    build_cl_plan,
    derive_seed,
    plan_param_count,
    recombine,
    run_finetune,
)
from .datagen import CorpusBundle, UtteranceRecord, materialize
from .disconformer import CORE_ONLY, DisConformer, ModelConfig, Selection
from .training import model_from_checkpoint

__all__ = [
    "EvalResult",
    "evaluate",
    "speaker_aggregate",
    "BenchmarkRow",
    "BenchmarkReport",
    "BenchConfig",
    "run_benchmark",
    "run_ablations",
    "speaker_model",
    "mean_frame_loss",
]


# ---------------------------------------------------------------------------
# evaluation primitives


@dataclass
class EvalResult:
    wer: float
    edits: int
    ref_words: int
    per_utterance: list[dict]


def _decode(lp: np.ndarray, decode: str, vocab: Vocabulary) -> list[int]:
    if decode == "greedy":
        return ctc_greedy_decode(lp, blank=vocab.blank)
    if decode.startswith("beam:"):
        width = int(decode.split(":", 1)[1])
        return ctc_beam_decode(lp, width, blank=vocab.blank)
    raise ValueError(f"unknown decode mode {decode!r} (use 'greedy' or 'beam:<n>')")


def evaluate(
    model: DisConformer,
    records: Sequence[UtteranceRecord],
    decode: str = "greedy",
    selection: Selection = CORE_ONLY,
    root=None,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> EvalResult:
    """Split-level WER: pooled edit distance over pooled reference words."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    edits = 0
    ref_words = 0
    details = []
    for rec in records:
        lp = model.log_probs(materialize(rec, root=root, vocab=vocab), selection)
        labels = _decode(lp, decode, vocab)
        hyp = [w for w in vocab.decode(labels).split(" ") if w]
        ref = rec.text.split(" ")
        e = edit_distance(hyp, ref)
        edits += e
        ref_words += len(ref)
        details.append({"utt_id": rec.utt_id, "hyp": " ".join(hyp), "ref": rec.text,
                        "edits": e, "ref_words": len(ref)})
    return EvalResult(wer=edits / ref_words, edits=edits, ref_words=ref_words,
                      per_utterance=details)


def mean_frame_loss(
    model: DisConformer,
    records: Sequence[UtteranceRecord],
    selection: Selection = CORE_ONLY,
    root=None,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> float:
    """Average per-frame CTC loss over a split (decode-free fit measure)."""
    total = 0.0
    frames = 0
    for rec in records:
        lp = ad.Tensor(model.log_probs(materialize(rec, root=root, vocab=vocab), selection))
        total += ctc_loss(lp, vocab.encode(rec.text)).item()
        frames += lp.shape[0]
    return total / frames


def speaker_aggregate(wers: Sequence[float], method: str = "interpolated") -> float:
    """Median across speakers; even counts interpolate the middle pair by default."""
    if len(wers) == 0:
        raise ValueError("cannot aggregate an empty WER list")
    ordered = sorted(wers)
    n = len(ordered)
    if method == "interpolated":
        mid = n // 2
        if n % 2 == 1:
            return float(ordered[mid])
        return float((ordered[mid - 1] + ordered[mid]) / 2.0)
    if method == "lower":
        return float(ordered[(n - 1) // 2])
    raise ValueError(f"unknown median method {method!r}")


def speaker_model(base: Checkpoint, delta: DeltaCheckpoint) -> tuple[DisConformer, CLPlan]:
    """Rebuild a speaker-specific model from its base checkpoint plus delta."""
    params = apply_delta(base, delta)
    merged = Checkpoint(config=base.config, step=base.step, vocab=base.vocab, params=params)
    return model_from_checkpoint(merged), CLPlan.from_dict(delta.plan)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchConfig:
    algorithms: tuple[str, ...] = ("disentangled_cl",)
    split_indices: tuple[int, ...] = (0, 1, 2)
    cl: CLConfig = field(default_factory=CLConfig)
    steps_per_split: tuple[int, ...] | None = None
    options: CLOptions = field(default_factory=CLOptions)
    decode: str = "greedy"
    median: str = "interpolated"
    model_name: str = "model"
    save_deltas: bool = True


@dataclass
class BenchmarkRow:
    model: str
    algorithm: str
    split: str
    cl_params: int
    speaker_wers: dict[str, float]
    wer_lc: float
    orig_wers: dict[str, float]
    wer_orig: float
    decode: str
    config_digest: str
    seed: int


@dataclass
class BenchmarkReport:
    rows: list[BenchmarkRow]
    unadapted: dict
    base_digest: str
    seed: int
    median: str

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "unadapted": self.unadapted,
            "base_digest": self.base_digest,
            "seed": self.seed,
            "median": self.median,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        splits = sorted({r.split for r in self.rows})
        head = f"{'model':<12s} {'cl-algo':<20s} {'#cl-params':>11s}"
        for s in splits:
            head += f" | {s + ' lc':>12s} {s + ' orig':>12s}"
        lines = [head, "-" * len(head)]
        keys = []
        for r in self.rows:
            k = (r.model, r.algorithm)
            if k not in keys:
                keys.append(k)
        for model, algo in keys:
            by_split = {r.split: r for r in self.rows if (r.model, r.algorithm) == (model, algo)}
            any_row = next(iter(by_split.values()))
            line = f"{model:<12s} {algo:<20s} {any_row.cl_params:>11,d}"
            for s in splits:
                if s in by_split:
                    line += f" | {by_split[s].wer_lc:>12.4f} {by_split[s].wer_orig:>12.4f}"
                else:
                    line += f" | {'-':>12s} {'-':>12s}"
            lines.append(line)
        lines.append("")
        lines.append(f"unadapted core-only: orig {self.unadapted['orig_wer']:.4f}, "
                     f"speaker median {self.unadapted['speaker_wer_median']:.4f}")
        return "\n".join(lines) + "\n"


def _finetune_one_speaker(
    base: Checkpoint,
    model_cfg: ModelConfig,
    algorithm: str,
    options: CLOptions,
    records: list[UtteranceRecord],
    cl_cfg: CLConfig,
    sp_seed: int,
    root,
    vocab: Vocabulary,
):
    plan_rng = np.random.default_rng(np.random.SeedSequence([sp_seed, 0xB10C]))
    plan = build_cl_plan(model_cfg, algorithm, options, plan_rng, base_digest=base.digest)
    result = run_finetune(base, plan, records, cl_cfg, seed=sp_seed, root=root, vocab=vocab)
    return plan, result


def run_benchmark(
    base: Checkpoint,
    bundle: CorpusBundle,
    cfg: BenchConfig,
    seed: int,
    out_dir: str | Path | None = None,
    root=None,
) -> BenchmarkReport:
    """Finetune-and-evaluate every (algorithm, split, speaker) cell.

    Deterministic given (base, bundle, cfg, seed): per-speaker seeds derive
    from stable ids, and speakers are processed in ascending id order so the
    report is independent of input ordering.
    """
    vocab = Vocabulary.from_list(base.vocab) if base.vocab else DEFAULT_VOCAB
    model_cfg = ModelConfig(**base.config["model"])
    speakers = sorted(bundle.speakers, key=lambda sc: sc.speaker)
    base_model = model_from_checkpoint(base)
    orig_test = bundle.original["test"]
    unadapted_orig = evaluate(base_model, orig_test, cfg.decode, CORE_ONLY, root, vocab)
    unadapted_speaker = {
        sc.speaker: evaluate(base_model, sc.test, cfg.decode, CORE_ONLY, root, vocab).wer
        for sc in speakers
    }
    unadapted = {
        "orig_wer": unadapted_orig.wer,
        "speaker_wers": unadapted_speaker,
        "speaker_wer_median": speaker_aggregate(list(unadapted_speaker.values()), cfg.median),
    }

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rows: list[BenchmarkRow] = []
    for algorithm in cfg.algorithms:
        for pos, split_idx in enumerate(cfg.split_indices):
            cl_cfg = cfg.cl
            if cfg.steps_per_split is not None:
                import dataclasses

                cl_cfg = dataclasses.replace(cfg.cl, steps=cfg.steps_per_split[pos])
            split_name = f"train-{split_idx}"
            speaker_wers: dict[str, float] = {}
            orig_wers: dict[str, float] = {}
            cl_params: int | None = None
            for sc in speakers:
                sp_seed = derive_seed(seed, algorithm, split_idx, sc.speaker)
                try:
                    plan, result = _finetune_one_speaker(
                        base, model_cfg, algorithm, cfg.options,
                        sc.train_splits[split_idx], cl_cfg, sp_seed, root, vocab,
                    )
                except Exception as exc:
                    raise RuntimeError(
                        f"benchmark row ({algorithm}, {split_name}) failed on "
                        f"speaker {sc.speaker}: {exc}"
                    ) from exc
                count = plan_param_count(plan, model_cfg)
                if cl_params is None:
                    cl_params = count
                elif cl_params != count:
                    raise RuntimeError(
                        f"inconsistent trainable counts within row ({algorithm}, {split_name})"
                    )
                speaker_sel = plan.selection() if algorithm == "disentangled_cl" else CORE_ONLY
                speaker_wers[sc.speaker] = evaluate(
                    result.model, sc.test, cfg.decode, speaker_sel, root, vocab
                ).wer
                orig_wers[sc.speaker] = evaluate(
                    result.model, orig_test, cfg.decode, CORE_ONLY, root, vocab
                ).wer
                if out_path is not None and cfg.save_deltas:
                    save_delta(
                        out_path / f"{algorithm}.{split_name}.{sc.speaker}.delta",
                        result.delta,
                    )
            rows.append(BenchmarkRow(
                model=cfg.model_name,
                algorithm=algorithm,
                split=split_name,
                cl_params=cl_params,
                speaker_wers=speaker_wers,
                wer_lc=speaker_aggregate(list(speaker_wers.values()), cfg.median),
                orig_wers=orig_wers,
                wer_orig=speaker_aggregate(list(orig_wers.values()), cfg.median),
                decode=cfg.decode,
                config_digest=base.digest,
                seed=seed,
            ))
    report = BenchmarkReport(rows=rows, unadapted=unadapted, base_digest=base.digest,
                             seed=seed, median=cfg.median)
    if out_path is not None:
        (out_path / "report.json").write_text(report.to_json())
        (out_path / "report.txt").write_text(report.to_text())
    return report


# ---------------------------------------------------------------------------
# ablations


def run_ablations(
    kind: str,
    base_checkpoints: dict[str, Checkpoint],
    bundle: CorpusBundle,
    cl_cfg: CLConfig,
    seed: int,
    grid: Sequence[float] = (0, 1, 2, 4, 8, 16, 32),
    split_idx: int = -1,
    options: CLOptions | None = None,
    decode: str = "greedy",
    root=None,
    out_dir: str | Path | None = None,
) -> dict:
    """Run the KL-weight sweep or the core/augment recombination grid.

    kind "kd_lambda" needs base_checkpoints["base"]; kind "recombination"
    needs "base", "wide_base" and "disco" checkpoints plus a disentangled
    target config (taken from the disco checkpoint).
    """
    options = options or CLOptions()
    speakers = sorted(bundle.speakers, key=lambda sc: sc.speaker)
    orig_test = bundle.original["test"]

    if kind == "kd_lambda":
        if not grid:
            raise ValueError("empty lambda grid")
        base = base_checkpoints["base"]
        vocab = Vocabulary.from_list(base.vocab) if base.vocab else DEFAULT_VOCAB
        model_cfg = ModelConfig(**base.config["model"])
        cells = []
        for lam in grid:
            import dataclasses

            opt = dataclasses.replace(options, kd_lambda=float(lam))
            algorithm = "full_ft" if lam == 0 else "kd"
            sp_losses, sp_wers, orig_losses, orig_wers_ = [], [], [], []
            for sc in speakers:
                sp_seed = derive_seed(seed, "kd_lambda", split_idx, sc.speaker)
                plan = build_cl_plan(model_cfg, "kd", opt, base_digest=base.digest)
                result = run_finetune(base, plan, sc.train_splits[split_idx], cl_cfg,
                                      seed=sp_seed, root=root, vocab=vocab)
                sp_wers.append(evaluate(result.model, sc.test, decode, CORE_ONLY,
                                        root, vocab).wer)
                sp_losses.append(mean_frame_loss(result.model, sc.test, CORE_ONLY, root, vocab))
                orig_wers_.append(evaluate(result.model, orig_test, decode, CORE_ONLY,
                                           root, vocab).wer)
                orig_losses.append(mean_frame_loss(result.model, orig_test, CORE_ONLY,
                                                   root, vocab))
            cells.append({
                "lambda": float(lam),
                "algorithm": algorithm,
                "orig_loss": float(np.mean(orig_losses)),
                "orig_wer": speaker_aggregate(orig_wers_),
                "speaker_loss": float(np.mean(sp_losses)),
                "speaker_wer": speaker_aggregate(sp_wers),
            })
        report = {"kind": kind, "seed": seed, "split": split_idx, "cells": cells}
    elif kind == "recombination":
        report = _recombination_ablation(base_checkpoints, bundle, cl_cfg, seed,
                                         split_idx, options, decode, root)
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation.{kind}.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
    return report


def _recombination_ablation(checkpoints, bundle, cl_cfg, seed, split_idx, options,
                            decode, root) -> dict:
    disco = checkpoints["disco"]
    base = checkpoints["base"]
    wide = checkpoints.get("wide_base")
    vocab = Vocabulary.from_list(disco.vocab) if disco.vocab else DEFAULT_VOCAB
    target_cfg = ModelConfig(**disco.config["model"])
    speakers = sorted(bundle.speakers, key=lambda sc: sc.speaker)
    orig_test = bundle.original["test"]

    def make_cell(name: str, core_source, augment_source):
        init_seed = derive_seed(seed, "recombine", name)
        model = recombine(target_cfg, core_source, augment_source, seed=init_seed)
        ckpt = Checkpoint(config=disco.config, step=0, vocab=disco.vocab,
                          params={n: t.data.copy() for n, t in model.params.items()})
        sp_wers, orig_wers_ = [], []
        for sc in speakers:
            sp_seed = derive_seed(seed, "recombine", name, split_idx, sc.speaker)
            plan_rng = np.random.default_rng(np.random.SeedSequence([sp_seed, 0xB10C]))
            plan = build_cl_plan(target_cfg, "disentangled_cl", options, plan_rng,
                                 base_digest=ckpt.digest)
            result = run_finetune(ckpt, plan, sc.train_splits[split_idx], cl_cfg,
                                  seed=sp_seed, root=root, vocab=vocab)
            sp_wers.append(evaluate(result.model, sc.test, decode, plan.selection(),
                                    root, vocab).wer)
            orig_wers_.append(evaluate(result.model, orig_test, decode, CORE_ONLY,
                                       root, vocab).wer)
        return {
            "cell": name,
            "speaker_wer": speaker_aggregate(sp_wers),
            "orig_wer": speaker_aggregate(orig_wers_),
            "speaker_wers": sp_wers,
        }

    cells = [make_cell("base+random", ("checkpoint", base), ("random",))]
    if wide is not None:
        cells.append(make_cell("base+base", ("base_slice", wide), ("base_slice", wide)))
    cells.append(make_cell("disco_core+random", ("checkpoint", disco), ("random",)))
    cells.append(make_cell("disco+disco", ("checkpoint", disco), ("checkpoint", disco)))
    return {"kind": "recombination", "seed": seed, "split": split_idx, "cells": cells}
