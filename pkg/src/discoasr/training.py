"""General ASR training: the two-term core+subset loss, Adam, LR schedules,
SpecAugment, and a deterministic, resumable train loop.

All stochasticity is derived from named per-step substreams of the master
seed (data order, feature masking, dropout, subset selection), so resuming
from a checkpoint reproduces the uninterrupted run bit-exactly and no mutable
RNG state needs to be carried beyond the step counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .ctc import DEFAULT_VOCAB, Vocabulary, ctc_loss, ctc_greedy_decode, edit_distance
from .datagen import UtteranceRecord, materialize
from .disconformer import (
    CORE_ONLY,
    DisConformer,
    ModelConfig,
    Selection,
    sample_selection,
)

__all__ = [
    "AdamState",
    "adam_step",
    "Stage",
    "ScheduleSpec",
    "pretrain_schedule",
    "cl_schedule",
    "make_schedule",
    "lr_at",
    "spec_augment",
    "netaug_loss",
    "TrainConfig",
    "TrainData",
    "TrainResult",
    "TrainingDivergedError",
    "train",
    "model_from_checkpoint",
    "pack_batches",
    "pooled_greedy_wer",
    "step_rng",
]

# Substream tags for per-step derived RNG.
_STREAM_ORDER = 11
_STREAM_AUGMENT = 12
_STREAM_DROPOUT = 13
_STREAM_SELECT = 14


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training aborted with a diagnostic."""


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Independent generator for one (purpose, step) pair of a training run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(step)]))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    trainable: Sequence[str],
    lr: float,
) -> None:
    """One bias-corrected Adam update restricted to ``trainable`` parameters.

    Masked-out parameters are untouched, including their moments; parameters
    with no gradient this step are treated as zero-gradient.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in trainable:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class Stage:
    kind: str  # warmup_linear | const | decay_linear
    fraction: float
    start: float  # lr multiplier at stage start
    end: float    # lr multiplier at stage end


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if abs(sum(s.fraction for s in self.stages) - 1.0) > 1e-9:
            raise ValueError("schedule stage fractions must sum to 1.0")
        for a, b in zip(self.stages, self.stages[1:]):
            if abs(a.end - b.start) > 1e-9:
                raise ValueError("schedule must be piecewise-continuous across stages")


# Decay stages end at 1/20 of peak so the final constant stage is meaningful.
LR_FLOOR = 0.05


def pretrain_schedule(total_steps: int) -> ScheduleSpec:
    """4-stage preset: linear warmup 8%, const 32%, linear decay 40%, const 20%."""
    return ScheduleSpec(
        total_steps=total_steps,
        stages=(
            Stage("warmup_linear", 0.08, 0.0, 1.0),
            Stage("const", 0.32, 1.0, 1.0),
            Stage("decay_linear", 0.40, 1.0, LR_FLOOR),
            Stage("const", 0.20, LR_FLOOR, LR_FLOOR),
        ),
    )


def cl_schedule(total_steps: int) -> ScheduleSpec:
    """3-stage finetuning preset: const 40%, linear decay 40%, const 20%."""
    return ScheduleSpec(
        total_steps=total_steps,
        stages=(
            Stage("const", 0.40, 1.0, 1.0),
            Stage("decay_linear", 0.40, 1.0, LR_FLOOR),
            Stage("const", 0.20, LR_FLOOR, LR_FLOOR),
        ),
    )


SCHEDULES = {"pretrain": pretrain_schedule, "cl": cl_schedule}


def make_schedule(name: str, total_steps: int) -> ScheduleSpec:
    if name not in SCHEDULES:
        raise ValueError(f"unknown schedule {name!r}; options: {sorted(SCHEDULES)}")
    return SCHEDULES[name](total_steps)


def lr_at(schedule: ScheduleSpec, step: int, peak_lr: float) -> float:
    """Piecewise-linear learning rate at ``step`` in [0, total_steps]."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside schedule range [0, {total}]")
    bounds = []
    acc = 0.0
    for stage in schedule.stages:
        acc += stage.fraction
        bounds.append(int(round(acc * total)))
    lo = 0
    for stage, hi in zip(schedule.stages, bounds):
        if step < hi or hi == total:
            span = max(hi - lo, 1)
            frac = (step - lo) / span
            return peak_lr * (stage.start + (stage.end - stage.start) * frac)
        lo = hi
    return peak_lr * schedule.stages[-1].end


# ---------------------------------------------------------------------------
# feature masking


def spec_augment(
    features: np.ndarray,
    n_freq_masks: int,
    freq_width: int,
    n_time_masks: int,
    time_width: int,
    rng: np.random.Generator,
    fixed_width: bool = False,
) -> np.ndarray:
    """Zero out uniformly placed frequency bands and time spans (copy-on-write).

    Each mask width is drawn uniformly from [0, max_width] unless
    ``fixed_width`` pins it to the maximum.
    """
    t_len, n_feats = features.shape
    out = features.copy()
    for dim, n_masks, width in ((1, n_freq_masks, freq_width), (0, n_time_masks, time_width)):
        size = n_feats if dim == 1 else t_len
        for _ in range(n_masks):
            if width <= 0:
                continue
            w = width if fixed_width else int(rng.integers(0, width + 1))
            w = min(w, size)
            if w == 0:
                continue
            start = int(rng.integers(0, size - w + 1))
            if dim == 1:
                out[:, start : start + w] = 0.0
            else:
                out[start : start + w, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# losses


def netaug_loss(
    model: DisConformer,
    feats,
    targets: Sequence[int],
    alpha: float,
    selection: Selection,
    training: bool = True,
    rng: np.random.Generator | None = None,
):
    """Core-only CTC loss plus alpha times the CTC loss of core + selected subset.

    Returns (loss tensor, parts dict). With alpha 0 the second forward is
    skipped and the result equals the plain core-only loss.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    lp_core = ad.log_softmax(model.forward(feats, CORE_ONLY, training=training, rng=rng))
    loss = ctc_loss(lp_core, targets)
    parts = {"core": loss.item(), "aug": 0.0}
    if alpha > 0 and not selection.is_core_only():
        lp_aug = ad.log_softmax(model.forward(feats, selection, training=training, rng=rng))
        aug = ctc_loss(lp_aug, targets)
        parts["aug"] = aug.item()
        loss = ad.add(loss, ad.scale(aug, alpha))
    return loss, parts


# ---------------------------------------------------------------------------
# batching


def pack_batches(
    order: Sequence[int],
    frames: Sequence[int],
    max_utts: int,
    max_frames: int,
) -> list[list[int]]:
    """Greedy packing of utterance indices under count and frame caps."""
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_frames = 0
    for idx in order:
        n = frames[idx]
        if cur and (len(cur) >= max_utts or cur_frames + n > max_frames):
            batches.append(cur)
            cur, cur_frames = [], 0
        cur.append(idx)
        cur_frames += n
    if cur:
        batches.append(cur)
    return batches


# ---------------------------------------------------------------------------
# train loop


@dataclass
class TrainConfig:
    steps: int = 200_000
    peak_lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    schedule: str = "pretrain"
    batch_utts: int = 8
    batch_frames: int = 2000
    alpha: float = 1.0
    mode: str = "auto"  # auto -> netaug when the model has augment groups
    per_layer_selection: bool = False
    eval_every: int = 500
    keep_best: bool = True
    augment: bool = True
    n_freq_masks: int = 2
    freq_mask_width: int = 27
    n_time_masks: int = 2
    time_mask_width: int = 100
    fixed_mask_width: bool = False


@dataclass
class TrainData:
    train: list[UtteranceRecord]
    dev: list[UtteranceRecord]
    root: str | Path | None = None
    vocab: Vocabulary = DEFAULT_VOCAB


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    metrics: list[dict]


def _resolve_mode(cfg: TrainConfig, model: DisConformer) -> str:
    has_aug = any(n > 0 for n in model.config.aug_counts().values())
    if cfg.mode == "auto":
        return "netaug" if has_aug else "ctc"
    if cfg.mode == "netaug" and not has_aug:
        raise ValueError("netaug training requires a model with augment groups")
    return cfg.mode


def pooled_greedy_wer(
    model: DisConformer,
    records: Sequence[UtteranceRecord],
    selection: Selection = CORE_ONLY,
    root=None,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> float:
    """Split-level WER: total word edit distance over total reference words."""
    edits = 0
    ref_words = 0
    for rec in records:
        lp = model.log_probs(materialize(rec, root=root, vocab=vocab), selection)
        hyp = vocab.decode(ctc_greedy_decode(lp, blank=vocab.blank)).split(" ")
        hyp = [w for w in hyp if w]
        ref = rec.text.split(" ")
        edits += edit_distance(hyp, ref)
        ref_words += len(ref)
    return edits / ref_words if ref_words else 0.0


def _run_config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int) -> dict:
    return {"model": asdict(model_cfg), "training": asdict(train_cfg), "seed": int(seed)}


def _snapshot(params) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def train(
    model: DisConformer,
    data: TrainData,
    cfg: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or resume) a training job; returns final/best checkpoints and metrics.

    The final checkpoint carries optimizer moments and the step counter so a
    resumed job continues bit-exactly where the original stopped.
    ``stop_after`` simulates an interruption at that absolute step.
    """
    mode = _resolve_mode(cfg, model)
    vocab = data.vocab
    run_config = _run_config_dict(model.config, cfg, seed)
    schedule = make_schedule(cfg.schedule, cfg.steps)
    opt = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    trainable = sorted(model.params.keys())
    start_step = 0
    best_wer = math.inf
    best_step = -1
    best_params: dict[str, np.ndarray] | None = None
    if resume is not None:
        from .checkpoint import config_digest

        if resume.digest != config_digest(run_config):
            raise ValueError("resume checkpoint config digest does not match this run")
        for name, arr in resume.params.items():
            model.params[name].data = arr.copy()
        if resume.optimizer is not None:
            opt.step = resume.optimizer["step"]
            opt.m = {k: v.copy() for k, v in resume.optimizer["m"].items()}
            opt.v = {k: v.copy() for k, v in resume.optimizer["v"].items()}
        start_step = resume.step
        best_wer = resume.extra.get("best_wer", math.inf)
        best_step = resume.extra.get("best_step", -1)

    frames = [rec.frames for rec in data.train]
    n = len(data.train)
    if n == 0:
        raise ValueError("empty training corpus")

    def batch_for_step(step: int) -> list[int]:
        # Stateless step -> batch mapping: regenerate per-epoch packing and
        # walk to the right position. Desk-scale corpora keep this cheap.
        epoch = 0
        consumed = 0
        while True:
            order = step_rng(seed, _STREAM_ORDER, epoch).permutation(n)
            batches = pack_batches(list(order), frames, cfg.batch_utts, cfg.batch_frames)
            if step - 1 < consumed + len(batches):
                return batches[step - 1 - consumed]
            consumed += len(batches)
            epoch += 1

    metrics: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    metrics_fh = (out_path / "metrics.jsonl").open("a") if out_path is not None else None

    def make_checkpoint(step: int, params: dict[str, np.ndarray], with_opt: bool) -> Checkpoint:
        optimizer = None
        if with_opt:
            optimizer = {
                "step": opt.step,
                "m": {k: v.copy() for k, v in opt.m.items()},
                "v": {k: v.copy() for k, v in opt.v.items()},
            }
        return Checkpoint(
            config=run_config,
            step=step,
            vocab=vocab.to_list(),
            params=params,
            optimizer=optimizer,
            rng={"scheme": "per-step-derived", "master_seed": int(seed)},
            extra={"best_wer": best_wer, "best_step": best_step, "mode": mode},
        )

    stop = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    try:
        for step in range(start_step + 1, stop + 1):
            lr = lr_at(schedule, step, cfg.peak_lr)
            batch = batch_for_step(step)
            aug_rng = step_rng(seed, _STREAM_AUGMENT, step)
            drop_rng = step_rng(seed, _STREAM_DROPOUT, step)
            sel_rng = step_rng(seed, _STREAM_SELECT, step)
            total = 0.0
            total_core = 0.0
            total_aug = 0.0
            grads: dict[str, np.ndarray] = {}
            for idx in batch:
                rec = data.train[idx]
                feats = materialize(rec, root=data.root, vocab=vocab)
                if cfg.augment:
                    feats = spec_augment(
                        feats, cfg.n_freq_masks, cfg.freq_mask_width,
                        cfg.n_time_masks, cfg.time_mask_width, aug_rng,
                        fixed_width=cfg.fixed_mask_width,
                    )
                targets = vocab.encode(rec.text)
                with ad.Tape() as tape:
                    if mode == "netaug":
                        selection = sample_selection(model.config, sel_rng,
                                                     per_layer=cfg.per_layer_selection)
                        loss, parts = netaug_loss(model, feats, targets, cfg.alpha,
                                                  selection, training=True, rng=drop_rng)
                    else:
                        lp = ad.log_softmax(model.forward(feats, CORE_ONLY,
                                                          training=True, rng=drop_rng))
                        loss = ctc_loss(lp, targets)
                        parts = {"core": loss.item(), "aug": 0.0}
                tape.backward(loss)
                total += loss.item()
                total_core += parts["core"]
                total_aug += parts["aug"]
            if not math.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss {total} at step {step}; aborting"
                )
            for name in trainable:
                t = model.params[name]
                if t.grad is not None:
                    grads[name] = t.grad
                    t.grad = None
            adam_step(opt, model.params, grads, [k for k in trainable if k in grads], lr)
            record = {
                "step": step,
                "lr": lr,
                "loss": total / len(batch),
                "loss_core": total_core / len(batch),
                "loss_aug": total_aug / len(batch),
            }
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps) and data.dev:
                dev_wer = pooled_greedy_wer(model, data.dev, CORE_ONLY, data.root, vocab)
                record["dev_wer"] = dev_wer
                if cfg.keep_best and dev_wer < best_wer:
                    best_wer = dev_wer
                    best_step = step
                    best_params = _snapshot(model.params)
                    if out_path is not None:
                        save_checkpoint(out_path / "best.ckpt",
                                        make_checkpoint(step, best_params, with_opt=False))
            metrics.append(record)
            if metrics_fh is not None:
                import json

                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = make_checkpoint(stop, _snapshot(model.params), with_opt=True)
    best = None
    if best_params is not None:
        best = make_checkpoint(best_step, best_params, with_opt=False)
    if out_path is not None:
        save_checkpoint(out_path / "final.ckpt", final)
    return TrainResult(final=final, best=best, metrics=metrics)


def model_from_checkpoint(ckpt: Checkpoint) -> DisConformer:
    """Rebuild a model object from a full checkpoint's config and parameters."""
    model_cfg = ModelConfig(**ckpt.config["model"])
    from .disconformer import ParamStore

    params_store = ParamStore()
    dt = model_cfg.dtype
    for name, arr in ckpt.params.items():
        params_store[name] = Tensor(arr.astype(dt, copy=True), requires_grad=True)
    model = DisConformer(model_cfg, params_store)
    expected = set(model.registry.all_names())
    got = set(ckpt.params.keys())
    if expected != got:
        missing = sorted(expected - got)[:3]
        surplus = sorted(got - expected)[:3]
        raise ValueError(f"checkpoint parameters do not match config (missing {missing}, surplus {surplus})")
    return model
