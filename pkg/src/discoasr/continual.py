"""Continual-learning algorithms over a pretrained checkpoint.

Five algorithms share one plan abstraction: the plan names the exact trainable
parameter set, so the trainable-parameter count is always computed from the
plan rather than entered by hand.

* disentangled_cl: freeze the core, finetune k randomly chosen augment groups
  per disentangled module kind; speaker inference uses core + those groups,
  original-domain inference uses the core alone.
* full_ft / kd: finetune everything, the latter with an added KL term pulling
  per-frame posteriors toward the frozen starting model.
* full_ft_efficient / kd_efficient: same losses restricted to the top encoder
  blocks (for attention-flavored models, plus one extra attention module from
  the block below, which lands the budget near the disentangled one).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, DeltaCheckpoint
from .ctc import DEFAULT_VOCAB, Vocabulary, ctc_loss
from .datagen import UtteranceRecord, materialize
from .disconformer import (
    CORE_ONLY,
    DEFAULT_K,
    DisConformer,
    ModelConfig,
    Selection,
    build_registry,
    init_params,
    param_shapes,
)
from .training import (
    AdamState,
    adam_step,
    cl_schedule,
    lr_at,
    make_schedule,
    pack_batches,
    spec_augment,
    step_rng,
    TrainingDivergedError,
    _STREAM_ORDER,
    _STREAM_AUGMENT,
    _STREAM_DROPOUT,
)

__all__ = [
    "ALGORITHMS",
    "CLOptions",
    "CLPlan",
    "CLConfig",
    "FinetuneResult",
    "build_cl_plan",
    "plan_param_count",
    "freeze",
    "kd_loss",
    "run_finetune",
    "recombine",
    "param_drift",
    "derive_seed",
]

ALGORITHMS = ("disentangled_cl", "full_ft", "kd", "full_ft_efficient", "kd_efficient")


def derive_seed(master: int, *tags) -> int:
    """Stable sub-seed for a named unit of work (e.g. one speaker's finetune)."""
    blob = "|".join([str(int(master))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:4], "big")


@dataclass
class CLOptions:
    k_ff: int | None = None
    k_att: int | None = None
    k_conv: int | None = None
    top_blocks: int = 1
    extra_att_blocks: int = 0
    kd_lambda: float = 8.0
    kd_temperature: float = 1.0


@dataclass
class CLPlan:
    algorithm: str
    trainable: tuple[str, ...]
    selected: dict[str, tuple[int, ...]] = field(default_factory=dict)
    kd_lambda: float | None = None
    kd_temperature: float | None = None
    base_digest: str | None = None

    def selection(self) -> Selection:
        return Selection(**{k: tuple(v) for k, v in self.selected.items()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        d["selected"] = {k: list(v) for k, v in self.selected.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CLPlan":
        return cls(
            algorithm=d["algorithm"],
            trainable=tuple(d["trainable"]),
            selected={k: tuple(v) for k, v in d["selected"].items()},
            kd_lambda=d.get("kd_lambda"),
            kd_temperature=d.get("kd_temperature"),
            base_digest=d.get("base_digest"),
        )


def plan_param_count(plan: CLPlan, cfg: ModelConfig) -> int:
    """#CL-Params: size of the plan's trainable set, computed from shapes."""
    shapes = param_shapes(cfg)
    return sum(int(np.prod(shapes[name])) for name in plan.trainable)


def build_cl_plan(
    model: "DisConformer | ModelConfig",
    algorithm: str,
    options: CLOptions | None = None,
    rng: np.random.Generator | None = None,
    base_digest: str | None = None,
) -> CLPlan:
    """Materialize an algorithm into an explicit trainable parameter set."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown CL algorithm {algorithm!r}; options: {ALGORITHMS}")
    options = options or CLOptions()
    if isinstance(model, ModelConfig):
        cfg = model
        registry = build_registry(cfg)
    else:
        cfg = model.config
        registry = model.registry
    kd_lambda = options.kd_lambda if algorithm in ("kd", "kd_efficient") else None
    kd_temperature = options.kd_temperature if algorithm in ("kd", "kd_efficient") else None

    if algorithm == "disentangled_cl":
        aug_counts = cfg.aug_counts()
        if all(n == 0 for n in aug_counts.values()):
            raise ValueError(
                "disentangled_cl requires a model with augment groups; this model has none"
            )
        if rng is None:
            raise ValueError("disentangled_cl needs an RNG to draw the augment subset")
        requested = {"ff": options.k_ff, "att": options.k_att, "conv": options.k_conv}
        selected: dict[str, tuple[int, ...]] = {}
        for kind, n_a in aug_counts.items():
            if n_a == 0:
                continue
            k = requested[kind] if requested[kind] is not None else min(DEFAULT_K[kind], n_a)
            if not 1 <= k <= n_a:
                raise ValueError(f"k for {kind} must satisfy 1 <= k <= {n_a}, got {k}")
            picked = rng.choice(n_a, size=k, replace=False)
            selected[kind] = tuple(sorted(int(i) for i in picked))
        trainable: list[str] = []
        for layer in registry.layers:
            for key, group in layer.items():
                kind = {"ff1": "ff", "ff2": "ff", "att": "att", "conv": "conv"}.get(key)
                if kind is None or kind not in selected:
                    continue
                for j in selected[kind]:
                    trainable.extend(group.experts[j])
        return CLPlan(algorithm=algorithm, trainable=tuple(sorted(trainable)),
                      selected=selected, base_digest=base_digest)

    if algorithm in ("full_ft", "kd"):
        trainable = tuple(sorted(registry.all_names()))
        return CLPlan(algorithm=algorithm, trainable=trainable,
                      kd_lambda=kd_lambda, kd_temperature=kd_temperature,
                      base_digest=base_digest)

    # efficient variants: top blocks, optionally plus attention modules below
    top = options.top_blocks
    if not 1 <= top <= cfg.num_layers:
        raise ValueError(f"top_blocks must be in [1, {cfg.num_layers}], got {top}")
    names: list[str] = []
    for layer_idx in range(cfg.num_layers - top, cfg.num_layers):
        names.extend(registry.layer_names(layer_idx))
    for extra in range(options.extra_att_blocks):
        layer_idx = cfg.num_layers - top - 1 - extra
        if layer_idx < 0:
            raise ValueError("extra_att_blocks reaches below the first layer")
        group = registry.layers[layer_idx]["att"]
        names.extend(group.core)
        for grp in group.experts:
            names.extend(grp)
    return CLPlan(algorithm=algorithm, trainable=tuple(sorted(names)),
                  kd_lambda=kd_lambda, kd_temperature=kd_temperature,
                  base_digest=base_digest)


# ---------------------------------------------------------------------------
# losses


def freeze(model: DisConformer) -> DisConformer:
    """Mark every parameter as a constant so forwards record nothing."""
    for t in model.params.values():
        t.requires_grad = False
        t._on_grad_path = False
    return model


def kd_loss(
    model: DisConformer,
    original_model: DisConformer,
    feats,
    targets: Sequence[int],
    lam: float,
    temperature: float,
    selection: Selection = CORE_ONLY,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """CTC loss plus lam times the per-frame KL from the frozen original model.

    The reference posteriors are temperature-scaled and evaluated without
    gradient; the KL is summed over frames. lam 0 degenerates to plain CTC.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = model.forward(feats, selection, training=training, rng=rng)
    loss = ctc_loss(ad.log_softmax(logits), targets)
    parts = {"ctc": loss.item(), "kl": 0.0}
    if lam != 0.0:
        with ad.stop_recording():
            ref_logits = original_model.forward(feats, selection)
        if ref_logits.shape != logits.shape:
            raise ad.ShapeError(
                f"logit shapes differ between model {logits.shape} and original {ref_logits.shape}"
            )
        lp = ad.log_softmax(ad.scale(logits, 1.0 / temperature))
        ref_lp = ad.log_softmax(ad.scale(ref_logits, 1.0 / temperature))
        kl = ad.tensor_sum(ad.mul(ad.exp(lp), ad.sub(lp, ad.Tensor(ref_lp.data))))
        parts["kl"] = kl.item()
        loss = ad.add(loss, ad.scale(kl, lam))
    return loss, parts


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class CLConfig:
    steps: int = 100
    peak_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    schedule: str = "cl"
    batch_utts: int = 8
    batch_frames: int = 2000
    augment: bool = True
    n_freq_masks: int = 2
    freq_mask_width: int = 27
    n_time_masks: int = 2
    time_mask_width: int = 100
    dropout_enabled: bool = True


@dataclass
class FinetuneResult:
    delta: DeltaCheckpoint
    plan: CLPlan
    model: DisConformer
    metrics: list[dict]


def run_finetune(
    base: Checkpoint,
    plan: CLPlan,
    records: list[UtteranceRecord],
    cfg: CLConfig,
    seed: int,
    root=None,
    vocab: Vocabulary | None = None,
) -> FinetuneResult:
    """Finetune the plan's trainable set on one speaker's train split.

    Returns a delta checkpoint holding only the finetuned parameters plus the
    plan, keyed to the base checkpoint's digest.
    """
    from .training import model_from_checkpoint

    if plan.base_digest is not None and plan.base_digest != base.digest:
        raise CheckpointError(
            f"plan was built for base {plan.base_digest[:12]}..., got {base.digest[:12]}..."
        )
    if not records:
        raise ValueError("empty finetuning split")
    vocab = vocab or Vocabulary.from_list(base.vocab)
    model = model_from_checkpoint(base)
    missing = [n for n in plan.trainable if n not in model.params]
    if missing:
        raise CheckpointError(f"plan names unknown parameters, e.g. {missing[:3]}")
    original = None
    if plan.algorithm in ("kd", "kd_efficient"):
        original = freeze(model_from_checkpoint(base))
    selection = plan.selection() if plan.algorithm == "disentangled_cl" else CORE_ONLY

    schedule = make_schedule(cfg.schedule, cfg.steps)
    opt = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    frames = [r.frames for r in records]
    n = len(records)
    metrics: list[dict] = []
    for step in range(1, cfg.steps + 1):
        lr = lr_at(schedule, step, cfg.peak_lr)
        epoch = 0
        consumed = 0
        batch = None
        while batch is None:
            order = step_rng(seed, _STREAM_ORDER, epoch).permutation(n)
            batches = pack_batches(list(order), frames, cfg.batch_utts, cfg.batch_frames)
            if step - 1 < consumed + len(batches):
                batch = batches[step - 1 - consumed]
            consumed += len(batches)
            epoch += 1
        aug_rng = step_rng(seed, _STREAM_AUGMENT, step)
        drop_rng = step_rng(seed, _STREAM_DROPOUT, step)
        total = 0.0
        total_kl = 0.0
        for idx in batch:
            rec = records[idx]
            feats = materialize(rec, root=root, vocab=vocab)
            if cfg.augment:
                feats = spec_augment(feats, cfg.n_freq_masks, cfg.freq_mask_width,
                                     cfg.n_time_masks, cfg.time_mask_width, aug_rng)
            targets = vocab.encode(rec.text)
            training = cfg.dropout_enabled
            with ad.Tape() as tape:
                if plan.algorithm in ("kd", "kd_efficient"):
                    loss, parts = kd_loss(model, original, feats, targets,
                                          plan.kd_lambda, plan.kd_temperature,
                                          selection, training=training, rng=drop_rng)
                    total_kl += parts["kl"]
                else:
                    lp = ad.log_softmax(model.forward(feats, selection,
                                                      training=training, rng=drop_rng))
                    loss = ctc_loss(lp, targets)
            tape.backward(loss)
            total += loss.item()
        if not math.isfinite(total):
            raise TrainingDivergedError(f"non-finite finetune loss at step {step}")
        grads = {}
        for name in plan.trainable:
            t = model.params[name]
            if t.grad is not None:
                grads[name] = t.grad
        for t in model.params.values():
            t.grad = None
        adam_step(opt, model.params, grads, sorted(grads.keys()), lr)
        metrics.append({"step": step, "lr": lr, "loss": total / len(batch),
                        "kl": total_kl / len(batch)})
    delta = DeltaCheckpoint(
        base_digest=base.digest,
        plan=plan.to_dict(),
        arrays={name: model.params[name].data.copy() for name in plan.trainable},
        extra={"seed": int(seed), "steps": cfg.steps},
    )
    return FinetuneResult(delta=delta, plan=plan, model=model, metrics=metrics)


def param_drift(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    """L2 norm of the parameter difference over the intersection of names."""
    total = 0.0
    for name in a:
        if name in b:
            d = a[name].astype(np.float64) - b[name].astype(np.float64)
            total += float((d * d).sum())
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# core/augment recombination


def _slice_cols(arr: np.ndarray, start: int, stop: int) -> np.ndarray:
    return np.ascontiguousarray(arr[:, start:stop])


def _slice_rows(arr: np.ndarray, start: int, stop: int) -> np.ndarray:
    return np.ascontiguousarray(arr[start:stop])


def recombine(
    config: ModelConfig,
    core_source: tuple,
    augment_source: tuple,
    seed: int = 0,
) -> DisConformer:
    """Assemble a disentangled model from independent core and augment sources.

    Sources are ("random", seed), ("checkpoint", Checkpoint), or
    ("base_slice", Checkpoint) where the donor is a plain model whose width
    equals the target's core+augment width; its leading slice becomes the
    core and the remainder is cut into augment groups.
    """
    params = init_params(config, seed)
    model = DisConformer(config, params)
    reg = model.registry

    def copy_names(names, donor: dict[str, np.ndarray]):
        for name in names:
            if name not in donor:
                raise CheckpointError(f"source is missing parameter {name!r}")
            if donor[name].shape != params[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: source {donor[name].shape} "
                    f"vs target {params[name].shape}"
                )
            params[name].data = donor[name].astype(params[name].dtype, copy=True)

    kind, payload = core_source[0], core_source[1] if len(core_source) > 1 else None
    if kind == "random":
        pass  # fresh init already in place
    elif kind == "checkpoint":
        copy_names(reg.core_names(), payload.params)
    elif kind == "base_slice":
        _apply_base_slice(config, params, payload, core=True, augment=False)
    else:
        raise ValueError(f"unknown core source {kind!r}")

    kind, payload = augment_source[0], augment_source[1] if len(augment_source) > 1 else None
    if kind == "random":
        pass
    elif kind == "checkpoint":
        copy_names(reg.expert_names(), payload.params)
    elif kind == "base_slice":
        _apply_base_slice(config, params, payload, core=False, augment=True)
    else:
        raise ValueError(f"unknown augment source {kind!r}")
    return model


def _apply_base_slice(config: ModelConfig, params, donor_ckpt: Checkpoint,
                      core: bool, augment: bool) -> None:
    """Cut a wide plain donor into this config's core and/or augment groups."""
    donor_cfg = ModelConfig(**donor_ckpt.config["model"])
    donor = donor_ckpt.params
    if donor_cfg.num_layers != config.num_layers or donor_cfg.model_dim != config.model_dim:
        raise CheckpointError("donor and target disagree on depth or model dim")
    if any(donor_cfg.aug_counts().values()):
        raise CheckpointError("base_slice donor must be a plain model without augment groups")
    if donor_cfg.ff_core_experts != config.ff_core_experts + config.ff_aug_experts:
        raise CheckpointError("donor feed-forward width does not cover core + augment experts")
    if donor_cfg.att_core_heads != config.att_core_heads + config.att_aug_heads:
        raise CheckpointError("donor head count does not cover core + augment heads")
    if donor_cfg.conv_core_experts != config.conv_core_experts + config.conv_aug_experts:
        raise CheckpointError("donor conv width does not cover core + augment experts")
    if donor_cfg.head_dim != config.head_dim or donor_cfg.conv_channels_per_expert != config.conv_channels_per_expert:
        raise CheckpointError("donor per-head or per-expert widths differ from the target")

    def put(name: str, arr: np.ndarray) -> None:
        if params[name].shape != arr.shape:
            raise CheckpointError(f"sliced shape {arr.shape} does not fit {name} {params[name].shape}")
        params[name].data = np.ascontiguousarray(arr).astype(params[name].dtype, copy=True)

    f_c = config.ff_core_dim
    f_a = config.ff_expert_dim
    c_c = config.conv_core_channels
    c_e = config.conv_channels_per_expert
    if core:
        for name in ("frontend/w", "frontend/b", "head/w", "head/b"):
            put(name, donor[name])
    for i in range(config.num_layers):
        pre = f"layer{i:02d}"
        ff_modules = ["ff1", "ff2"] if config.macaron_ff else ["ff1"]
        for which in ff_modules:
            b = f"{pre}/{which}"
            if core:
                for suffix in ("ln_g", "ln_b"):
                    put(f"{b}/{suffix}", donor[f"{b}/{suffix}"])
                put(f"{b}/core/w1", _slice_cols(donor[f"{b}/core/w1"], 0, f_c))
                put(f"{b}/core/b1", donor[f"{b}/core/b1"][:f_c])
                put(f"{b}/core/w2", _slice_rows(donor[f"{b}/core/w2"], 0, f_c))
                put(f"{b}/b2", donor[f"{b}/b2"])
            if augment:
                for j in range(config.ff_aug_experts):
                    lo, hi = f_c + j * f_a, f_c + (j + 1) * f_a
                    put(f"{b}/aug{j:02d}/w1", _slice_cols(donor[f"{b}/core/w1"], lo, hi))
                    put(f"{b}/aug{j:02d}/b1", donor[f"{b}/core/b1"][lo:hi])
                    put(f"{b}/aug{j:02d}/w2", _slice_rows(donor[f"{b}/core/w2"], lo, hi))
        b = f"{pre}/att"
        head_params = ["wq", "wk", "wv", "wo"] + (["rel"] if config.relative_position_bias else [])
        if core:
            for suffix in ("ln_g", "ln_b", "out_b"):
                put(f"{b}/{suffix}", donor[f"{b}/{suffix}"])
            for j in range(config.att_core_heads):
                for wp in head_params:
                    put(f"{b}/core{j:02d}/{wp}", donor[f"{b}/core{j:02d}/{wp}"])
        if augment:
            for j in range(config.att_aug_heads):
                src = config.att_core_heads + j
                for wp in head_params:
                    put(f"{b}/aug{j:02d}/{wp}", donor[f"{b}/core{src:02d}/{wp}"])
        b = f"{pre}/conv"
        conv_parts = ["pc1v_w", "pc1v_b", "dcv_w", "dcv_b", "mid_g", "mid_b", "pc2_w"]
        if config.glu_on_first_pointwise_conv:
            conv_parts += ["pc1g_w", "pc1g_b", "dcg_w", "dcg_b"]

        def conv_slice(part: str, lo: int, hi: int) -> np.ndarray:
            arr = donor[f"{b}/core/{part}"]
            return _slice_cols(arr, lo, hi) if part.endswith("1v_w") or part.endswith("1g_w") else _slice_rows(arr, lo, hi)

        if core:
            for suffix in ("ln_g", "ln_b", "pc2_b"):
                put(f"{b}/{suffix}", donor[f"{b}/{suffix}"])
            for part in conv_parts:
                put(f"{b}/core/{part}", conv_slice(part, 0, c_c))
        if augment:
            for j in range(config.conv_aug_experts):
                lo, hi = c_c + j * c_e, c_c + (j + 1) * c_e
                for part in conv_parts:
                    put(f"{b}/aug{j:02d}/{part}", conv_slice(part, lo, hi))
        if core:
            for suffix in ("ln_g", "ln_b"):
                put(f"{pre}/final/{suffix}", donor[f"{pre}/final/{suffix}"])
