"""Conformer encoder with disentangled core/augment parameter groups.

Three module families can be split into an always-active core plus indexed
augment experts: feed-forward blocks (expert slices of the hidden dimension),
self-attention (extra heads), and the convolution module (channel groups).
A forward pass activates the core plus an explicit subset of augment groups;
which subset is chosen by a two-stage random selector during training and by
a fixed plan during speaker finetuning.

Parameter bookkeeping is name-based: every parameter has a path-style name
(``layer03/ff1/aug02/w1``) and the registry partitions all names into core
sets and ordered augment groups, which is what parameter counting, optimizer
masking, and delta checkpoints are built on.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "ARCH_PRESETS",
    "DEFAULT_K",
    "ParamStore",
    "ModuleGroup",
    "ParamRegistry",
    "Selection",
    "CORE_ONLY",
    "selector_size_ladder",
    "sample_selector",
    "sample_selection",
    "full_selection",
    "dis_ff_forward",
    "dis_ff_terms",
    "dis_att_forward",
    "dis_conv_forward",
    "param_shapes",
    "build_registry",
    "init_params",
    "count_params",
    "DisConformer",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; a model and its exact parameter count follow from it."""

    model_dim: int = 256
    num_layers: int = 16
    output_dim: int = 30
    feature_dim: int = 80
    time_reduction_factor: int = 4
    ff_expert_dim: int = 64
    ff_core_experts: int = 8
    ff_aug_experts: int = 0
    att_core_heads: int = 4
    att_aug_heads: int = 0
    att_head_dim: int | None = None
    conv_channels_per_expert: int = 16
    conv_core_experts: int = 16
    conv_aug_experts: int = 0
    conv_kernel: int = 31
    dropout: float = 0.1
    macaron_ff: bool = True
    glu_on_first_pointwise_conv: bool = True
    relative_position_bias: bool = True
    max_relative_distance: int = 64
    precision: str = "float32"

    def __post_init__(self):
        if self.model_dim < 1 or self.num_layers < 0 or self.output_dim < 1:
            raise ValueError("model_dim/output_dim must be >= 1 and num_layers >= 0")
        if self.feature_dim < 1 or self.time_reduction_factor < 1:
            raise ValueError("feature_dim and time_reduction_factor must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.att_core_heads < 1:
            raise ValueError("at least one core attention head is required")
        if self.att_head_dim is None and self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by total heads {self.num_heads}"
            )
        if self.ff_core_experts < 1 or self.conv_core_experts < 1:
            raise ValueError("core expert counts must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def num_heads(self) -> int:
        return self.att_core_heads + self.att_aug_heads

    @property
    def head_dim(self) -> int:
        if self.att_head_dim is not None:
            return self.att_head_dim
        return self.model_dim // self.num_heads

    @property
    def ff_core_dim(self) -> int:
        return self.ff_core_experts * self.ff_expert_dim

    @property
    def ff_full_dim(self) -> int:
        return (self.ff_core_experts + self.ff_aug_experts) * self.ff_expert_dim

    @property
    def conv_core_channels(self) -> int:
        return self.conv_core_experts * self.conv_channels_per_expert

    @property
    def conv_full_channels(self) -> int:
        return (self.conv_core_experts + self.conv_aug_experts) * self.conv_channels_per_expert

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def aug_counts(self) -> dict[str, int]:
        return {"ff": self.ff_aug_experts, "att": self.att_aug_heads, "conv": self.conv_aug_experts}

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


# Published architecture presets. The base variants are the disentangled
# models with all augment groups removed; base-att pins the per-head dim so
# its two heads match the disco-att core heads exactly.
ARCH_PRESETS: dict[str, dict] = {
    "disco-ff": dict(ff_core_experts=8, ff_aug_experts=12, att_core_heads=4,
                     conv_channels_per_expert=16, conv_core_experts=16),
    "base-ff": dict(ff_core_experts=8, att_core_heads=4,
                    conv_channels_per_expert=16, conv_core_experts=16),
    "disco-att": dict(ff_core_experts=20, att_core_heads=2, att_aug_heads=2,
                      conv_channels_per_expert=16, conv_core_experts=16),
    "base-att": dict(ff_core_experts=20, att_core_heads=2, att_head_dim=64,
                     conv_channels_per_expert=16, conv_core_experts=16),
    "disco-conv": dict(ff_core_experts=20, att_core_heads=4,
                       conv_channels_per_expert=8, conv_core_experts=16, conv_aug_experts=16),
    "base-conv": dict(ff_core_experts=20, att_core_heads=4,
                      conv_channels_per_expert=8, conv_core_experts=16),
}

# Default number of augment groups activated per module kind at deployment /
# continual-learning time.
DEFAULT_K = {"ff": 2, "att": 2, "conv": 12}


def arch_preset(name: str, **overrides) -> ModelConfig:
    if name not in ARCH_PRESETS:
        raise KeyError(f"unknown architecture preset {name!r}; options: {sorted(ARCH_PRESETS)}")
    kwargs = dict(ARCH_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


class ParamStore(dict):
    """name -> Tensor mapping with optional read tracing for access audits."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._trace: set | None = None

    def __getitem__(self, key):
        if self._trace is not None:
            self._trace.add(key)
        return super().__getitem__(key)

    @contextmanager
    def trace_access(self):
        """Record every parameter name read inside the context."""
        seen: set[str] = set()
        prev = self._trace
        self._trace = seen
        try:
            yield seen
        finally:
            self._trace = prev


@dataclass
class ModuleGroup:
    core: list[str]
    experts: list[list[str]]


@dataclass
class ParamRegistry:
    """Partition of all parameter names into core sets and ordered augment groups."""

    global_core: list[str]
    layers: list[dict[str, ModuleGroup]]

    def core_names(self) -> list[str]:
        names = list(self.global_core)
        for layer in self.layers:
            for group in layer.values():
                names.extend(group.core)
        return names

    def expert_names(self, kind: str | None = None) -> list[str]:
        names = []
        for layer in self.layers:
            for key, group in layer.items():
                if kind is not None and _selection_kind(key) != kind:
                    continue
                for grp in group.experts:
                    names.extend(grp)
        return names

    def all_names(self) -> list[str]:
        return self.core_names() + self.expert_names()

    def layer_names(self, layer: int) -> list[str]:
        names = []
        for group in self.layers[layer].values():
            names.extend(group.core)
            for grp in group.experts:
                names.extend(grp)
        return names


def _selection_kind(module_key: str) -> str | None:
    if module_key in ("ff1", "ff2"):
        return "ff"
    if module_key in ("att", "conv"):
        return module_key
    return None


# ---------------------------------------------------------------------------
# parameter layout


def _layout(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str, tuple]]:
    """Yield (name, shape, init_kind, scope) for every parameter.

    scope is ("global",), (layer, module_key, "core") or (layer, module_key, expert_idx).
    This single generator backs shape queries, initialization, and the registry.
    """
    d = cfg.model_dim
    yield "frontend/w", (cfg.feature_dim * cfg.time_reduction_factor, d), "linear", ("global",)
    yield "frontend/b", (d,), "zeros", ("global",)
    dh = cfg.head_dim
    rel_size = 2 * cfg.max_relative_distance + 1
    for i in range(cfg.num_layers):
        pre = f"layer{i:02d}"
        ff_modules = ["ff1", "ff2"] if cfg.macaron_ff else ["ff1"]
        for which in ff_modules:
            base = f"{pre}/{which}"
            yield f"{base}/ln_g", (d,), "ones", (i, which, "core")
            yield f"{base}/ln_b", (d,), "zeros", (i, which, "core")
            yield f"{base}/core/w1", (d, cfg.ff_core_dim), "linear", (i, which, "core")
            yield f"{base}/core/b1", (cfg.ff_core_dim,), "zeros", (i, which, "core")
            yield f"{base}/core/w2", (cfg.ff_core_dim, d), "linear", (i, which, "core")
            yield f"{base}/b2", (d,), "zeros", (i, which, "core")
            for j in range(cfg.ff_aug_experts):
                g = f"{base}/aug{j:02d}"
                yield f"{g}/w1", (d, cfg.ff_expert_dim), "linear", (i, which, j)
                yield f"{g}/b1", (cfg.ff_expert_dim,), "zeros", (i, which, j)
                yield f"{g}/w2", (cfg.ff_expert_dim, d), "linear", (i, which, j)
        base = f"{pre}/att"
        yield f"{base}/ln_g", (d,), "ones", (i, "att", "core")
        yield f"{base}/ln_b", (d,), "zeros", (i, "att", "core")
        for role, count in (("core", cfg.att_core_heads), ("aug", cfg.att_aug_heads)):
            for j in range(count):
                g = f"{base}/{role}{j:02d}"
                scope = (i, "att", "core") if role == "core" else (i, "att", j)
                yield f"{g}/wq", (d, dh), "linear", scope
                yield f"{g}/wk", (d, dh), "linear", scope
                yield f"{g}/wv", (d, dh), "linear", scope
                yield f"{g}/wo", (dh, d), "linear", scope
                if cfg.relative_position_bias:
                    yield f"{g}/rel", (rel_size,), "zeros", scope
        yield f"{base}/out_b", (d,), "zeros", (i, "att", "core")
        base = f"{pre}/conv"
        yield f"{base}/ln_g", (d,), "ones", (i, "conv", "core")
        yield f"{base}/ln_b", (d,), "zeros", (i, "conv", "core")
        conv_groups = [("core", cfg.conv_core_channels, "core")]
        conv_groups += [
            (f"aug{j:02d}", cfg.conv_channels_per_expert, j) for j in range(cfg.conv_aug_experts)
        ]
        for tag, channels, scope_id in conv_groups:
            g = f"{base}/{tag}"
            scope = (i, "conv", scope_id)
            yield f"{g}/pc1v_w", (d, channels), "linear", scope
            yield f"{g}/pc1v_b", (channels,), "zeros", scope
            yield f"{g}/dcv_w", (channels, cfg.conv_kernel), "kernel", scope
            yield f"{g}/dcv_b", (channels,), "zeros", scope
            if cfg.glu_on_first_pointwise_conv:
                yield f"{g}/pc1g_w", (d, channels), "linear", scope
                yield f"{g}/pc1g_b", (channels,), "zeros", scope
                yield f"{g}/dcg_w", (channels, cfg.conv_kernel), "kernel", scope
                yield f"{g}/dcg_b", (channels,), "zeros", scope
            yield f"{g}/mid_g", (channels,), "ones", scope
            yield f"{g}/mid_b", (channels,), "zeros", scope
            yield f"{g}/pc2_w", (channels, d), "linear", scope
        yield f"{base}/pc2_b", (d,), "zeros", (i, "conv", "core")
        yield f"{pre}/final/ln_g", (d,), "ones", (i, "final", "core")
        yield f"{pre}/final/ln_b", (d,), "zeros", (i, "final", "core")
    yield "head/w", (d, cfg.output_dim), "linear", ("global",)
    yield "head/b", (cfg.output_dim,), "zeros", ("global",)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _, _ in _layout(cfg)}


def build_registry(cfg: ModelConfig) -> ParamRegistry:
    global_core: list[str] = []
    layers: list[dict[str, ModuleGroup]] = [dict() for _ in range(cfg.num_layers)]
    for name, _, _, scope in _layout(cfg):
        if scope[0] == "global":
            global_core.append(name)
            continue
        layer, key, member = scope
        group = layers[layer].setdefault(key, ModuleGroup(core=[], experts=[]))
        if member == "core":
            group.core.append(name)
        else:
            while len(group.experts) <= member:
                group.experts.append([])
            group.experts[member].append(name)
    return ParamRegistry(global_core=global_core, layers=layers)


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Deterministic initialization: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit gains."""
    rng = np.random.default_rng(np.random.SeedSequence([0x12AB, int(seed)]))
    store = ParamStore()
    dt = cfg.dtype
    for name, shape, kind, _ in _layout(cfg):
        if kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        else:
            fan_in = shape[-1] if kind == "kernel" else shape[0]
            lim = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-lim, lim, size=shape)
        store[name] = Tensor(arr.astype(dt), requires_grad=True)
    return store


# ---------------------------------------------------------------------------
# selector


def selector_size_ladder(n_a: int) -> tuple[int, ...]:
    """Subset sizes eligible for sampling: powers of two up to n_a, plus n_a itself."""
    if n_a < 1:
        raise ValueError("selector requires at least one augment group")
    sizes = []
    p = 1
    while p <= n_a:
        sizes.append(p)
        p *= 2
    if sizes[-1] != n_a:
        sizes.append(n_a)
    return tuple(sizes)


def sample_selector(n_a: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Two-stage draw: a size uniform over the ladder, then a uniform n-subset."""
    ladder = selector_size_ladder(n_a)
    n = ladder[int(rng.integers(len(ladder)))]
    picked = rng.choice(n_a, size=n, replace=False)
    return tuple(sorted(int(i) for i in picked))


@dataclass(frozen=True)
class Selection:
    """Active augment groups per module kind.

    Each field is either one index tuple shared by every layer, or a tuple of
    per-layer index tuples (length num_layers). Empty means core-only.
    """

    ff: tuple = ()
    att: tuple = ()
    conv: tuple = ()

    def for_layer(self, kind: str, layer: int) -> tuple[int, ...]:
        sel = getattr(self, kind)
        if sel and isinstance(sel[0], tuple):
            return sel[layer]
        return sel

    def is_core_only(self) -> bool:
        return not (self.ff or self.att or self.conv)


CORE_ONLY = Selection()


def full_selection(cfg: ModelConfig) -> Selection:
    return Selection(
        ff=tuple(range(cfg.ff_aug_experts)),
        att=tuple(range(cfg.att_aug_heads)),
        conv=tuple(range(cfg.conv_aug_experts)),
    )


def sample_selection(cfg: ModelConfig, rng: np.random.Generator, per_layer: bool = False) -> Selection:
    """Draw one selector sample per disentangled module kind (optionally per layer)."""
    out = {}
    for kind, n_a in cfg.aug_counts().items():
        if n_a == 0:
            out[kind] = ()
        elif per_layer:
            out[kind] = tuple(sample_selector(n_a, rng) for _ in range(cfg.num_layers))
        else:
            out[kind] = sample_selector(n_a, rng)
    return Selection(**out)


def _check_active(active: Sequence[int], n_a: int, what: str) -> tuple[int, ...]:
    active = tuple(int(i) for i in active)
    if len(set(active)) != len(active):
        raise ValueError(f"duplicate augment indices for {what}: {active}")
    for i in active:
        if not 0 <= i < n_a:
            raise IndexError(f"augment index {i} out of range [0, {n_a}) for {what}")
    return tuple(sorted(active))


# ---------------------------------------------------------------------------
# module parameter views


@dataclass
class FFParams:
    """Feed-forward weights; experts are fetched lazily so inactive ones are never read."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    out_b: Tensor
    n_experts: int
    fetch_expert: "callable"

    def expert(self, j: int) -> tuple[Tensor, Tensor, Tensor]:
        return self.fetch_expert(j)


@dataclass
class AttHead:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    rel: Tensor | None


@dataclass
class AttParams:
    core: list[AttHead]
    n_aug: int
    fetch_aug: "callable"
    out_b: Tensor
    head_dim: int

    def aug_head(self, j: int) -> AttHead:
        return self.fetch_aug(j)


@dataclass
class ConvGroup:
    pc1v_w: Tensor
    pc1v_b: Tensor
    dcv_w: Tensor
    dcv_b: Tensor
    pc1g_w: Tensor | None
    pc1g_b: Tensor | None
    dcg_w: Tensor | None
    dcg_b: Tensor | None
    mid_g: Tensor
    mid_b: Tensor
    pc2_w: Tensor


@dataclass
class ConvParams:
    core: ConvGroup
    n_aug: int
    fetch_aug: "callable"
    out_b: Tensor
    gated: bool

    def aug_group(self, j: int) -> ConvGroup:
        return self.fetch_aug(j)


# ---------------------------------------------------------------------------
# disentangled module forwards (pre-norm and residual belong to the caller)


def dis_ff_terms(x: Tensor, p: FFParams, active: Sequence[int]):
    """Core contribution and per-expert contributions of the split feed-forward."""
    active = _check_active(active, p.n_experts, "feed-forward experts")
    core = ad.matmul(ad.swish(ad.add(ad.matmul(x, p.w1), p.b1)), p.w2)
    terms = {}
    for i in active:
        w1, b1, w2 = p.expert(i)
        terms[i] = ad.matmul(ad.swish(ad.add(ad.matmul(x, w1), b1)), w2)
    return core, terms


def dis_ff_forward(x: Tensor, p: FFParams, active: Sequence[int]) -> Tensor:
    """Split feed-forward: core path plus the selected experts, summed in index order."""
    core, terms = dis_ff_terms(x, p, active)
    y = core
    for i in sorted(terms):
        y = ad.add(y, terms[i])
    return ad.add(y, p.out_b)


def _head_output(x: Tensor, head: AttHead, head_dim: int) -> Tensor:
    q = ad.matmul(x, head.wq)
    k = ad.matmul(x, head.wk)
    v = ad.matmul(x, head.wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(head_dim))
    if head.rel is not None:
        scores = ad.add(scores, ad.relative_position_bias(head.rel, x.shape[0]))
    return ad.matmul(ad.matmul(ad.softmax(scores), v), head.wo)


def dis_att_forward(x: Tensor, p: AttParams, active: Sequence[int]) -> Tensor:
    """Self-attention over the core heads plus the selected augment heads.

    Inactive augment heads are skipped entirely; their projections are never
    computed. Head outputs are summed through their per-head output maps,
    which equals concatenation followed by a stacked output projection.
    """
    active = _check_active(active, p.n_aug, "attention heads")
    heads = list(p.core) + [p.aug_head(i) for i in active]
    y = _head_output(x, heads[0], p.head_dim)
    for head in heads[1:]:
        y = ad.add(y, _head_output(x, head, p.head_dim))
    return ad.add(y, p.out_b)


def dis_conv_forward(x: Tensor, p: ConvParams, active: Sequence[int]) -> Tensor:
    """Convolution module on the core channels plus selected channel experts.

    Kernels of the active groups are concatenated in ascending index order,
    producing the same computation as a dense module of that width: pointwise
    conv in, depthwise conv, gate, layer norm, swish, pointwise conv out.
    """
    active = _check_active(active, p.n_aug, "conv channel experts")
    groups = [p.core] + [p.aug_group(i) for i in active]

    def cat(attr, axis):
        parts = [getattr(g, attr) for g in groups]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=axis)

    u = ad.add(ad.matmul(x, cat("pc1v_w", 1)), cat("pc1v_b", 0))
    u = ad.add(ad.depthwise_conv1d(u, cat("dcv_w", 0)), cat("dcv_b", 0))
    if p.gated:
        g = ad.add(ad.matmul(x, cat("pc1g_w", 1)), cat("pc1g_b", 0))
        g = ad.add(ad.depthwise_conv1d(g, cat("dcg_w", 0)), cat("dcg_b", 0))
        u = ad.mul(u, ad.sigmoid(g))
    u = ad.layer_norm(u, cat("mid_g", 0), cat("mid_b", 0))
    u = ad.swish(u)
    return ad.add(ad.matmul(u, cat("pc2_w", 0)), p.out_b)


# ---------------------------------------------------------------------------
# full model


class DisConformer:
    """A configured encoder bound to a parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.registry = build_registry(config)

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "DisConformer":
        return cls(config, init_params(config, seed))

    # --- parameter views -------------------------------------------------

    def ff_view(self, layer: int, which: str) -> FFParams:
        p = self.params
        base = f"layer{layer:02d}/{which}"

        def fetch(j: int):
            g = f"{base}/aug{j:02d}"
            return p[f"{g}/w1"], p[f"{g}/b1"], p[f"{g}/w2"]

        return FFParams(
            w1=p[f"{base}/core/w1"],
            b1=p[f"{base}/core/b1"],
            w2=p[f"{base}/core/w2"],
            out_b=p[f"{base}/b2"],
            n_experts=self.config.ff_aug_experts,
            fetch_expert=fetch,
        )

    def _att_head(self, base: str, role: str, j: int) -> AttHead:
        p = self.params
        g = f"{base}/{role}{j:02d}"
        rel = p[f"{g}/rel"] if self.config.relative_position_bias else None
        return AttHead(wq=p[f"{g}/wq"], wk=p[f"{g}/wk"], wv=p[f"{g}/wv"], wo=p[f"{g}/wo"], rel=rel)

    def att_view(self, layer: int) -> AttParams:
        base = f"layer{layer:02d}/att"
        core = [self._att_head(base, "core", j) for j in range(self.config.att_core_heads)]
        return AttParams(
            core=core,
            n_aug=self.config.att_aug_heads,
            fetch_aug=lambda j: self._att_head(base, "aug", j),
            out_b=self.params[f"{base}/out_b"],
            head_dim=self.config.head_dim,
        )

    def _conv_group(self, base: str, tag: str) -> ConvGroup:
        p = self.params
        g = f"{base}/{tag}"
        gated = self.config.glu_on_first_pointwise_conv
        return ConvGroup(
            pc1v_w=p[f"{g}/pc1v_w"],
            pc1v_b=p[f"{g}/pc1v_b"],
            dcv_w=p[f"{g}/dcv_w"],
            dcv_b=p[f"{g}/dcv_b"],
            pc1g_w=p[f"{g}/pc1g_w"] if gated else None,
            pc1g_b=p[f"{g}/pc1g_b"] if gated else None,
            dcg_w=p[f"{g}/dcg_w"] if gated else None,
            dcg_b=p[f"{g}/dcg_b"] if gated else None,
            mid_g=p[f"{g}/mid_g"],
            mid_b=p[f"{g}/mid_b"],
            pc2_w=p[f"{g}/pc2_w"],
        )

    def conv_view(self, layer: int) -> ConvParams:
        base = f"layer{layer:02d}/conv"
        return ConvParams(
            core=self._conv_group(base, "core"),
            n_aug=self.config.conv_aug_experts,
            fetch_aug=lambda j: self._conv_group(base, f"aug{j:02d}"),
            out_b=self.params[f"{base}/pc2_b"],
            gated=self.config.glu_on_first_pointwise_conv,
        )

    # --- forward ----------------------------------------------------------

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}/ln_g"], self.params[f"{prefix}/ln_b"])

    def _frontend(self, feats: Tensor) -> Tensor:
        cfg = self.config
        t_len = feats.shape[0]
        if t_len < cfg.time_reduction_factor:
            raise ad.ShapeError(
                f"input of {t_len} frames is shorter than the reduction factor {cfg.time_reduction_factor}"
            )
        rem = (-t_len) % cfg.time_reduction_factor
        x = ad.pad_rows(feats, rem)
        t_red = (t_len + rem) // cfg.time_reduction_factor
        x = ad.reshape(x, (t_red, cfg.feature_dim * cfg.time_reduction_factor))
        return ad.add(ad.matmul(x, self.params["frontend/w"]), self.params["frontend/b"])

    def forward(
        self,
        feats,
        selection: Selection = CORE_ONLY,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Features (T, feature_dim) to logits (ceil(T / reduction), output_dim)."""
        cfg = self.config
        if training and cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an RNG stream")
        if not isinstance(feats, Tensor):
            feats = Tensor(np.asarray(feats, dtype=cfg.dtype))
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ad.ShapeError(f"expected non-empty (T, {cfg.feature_dim}) features, got {feats.shape}")

        def drop(t: Tensor) -> Tensor:
            return ad.dropout(t, cfg.dropout, rng, training) if training and cfg.dropout > 0 else t

        x = self._frontend(feats)
        ff_scale = 0.5 if cfg.macaron_ff else 1.0
        for i in range(cfg.num_layers):
            pre = f"layer{i:02d}"
            h = dis_ff_forward(self._norm(x, f"{pre}/ff1"), self.ff_view(i, "ff1"),
                               selection.for_layer("ff", i))
            x = ad.add(x, ad.scale(drop(h), ff_scale))
            h = dis_att_forward(self._norm(x, f"{pre}/att"), self.att_view(i),
                                selection.for_layer("att", i))
            x = ad.add(x, drop(h))
            h = dis_conv_forward(self._norm(x, f"{pre}/conv"), self.conv_view(i),
                                 selection.for_layer("conv", i))
            x = ad.add(x, drop(h))
            if cfg.macaron_ff:
                h = dis_ff_forward(self._norm(x, f"{pre}/ff2"), self.ff_view(i, "ff2"),
                                   selection.for_layer("ff", i))
                x = ad.add(x, ad.scale(drop(h), 0.5))
            x = self._norm(x, f"{pre}/final")
        return ad.add(ad.matmul(x, self.params["head/w"]), self.params["head/b"])

    def log_probs(self, feats, selection: Selection = CORE_ONLY) -> np.ndarray:
        """Inference helper: normalized log-distributions without recording a tape."""
        return ad.log_softmax(self.forward(feats, selection)).data

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())


# ---------------------------------------------------------------------------
# parameter counting


def count_params(
    cfg: ModelConfig,
    mode: str = "full",
    k: int | dict[str, int] | None = None,
) -> int:
    """Exact parameter count by construction from the layout.

    mode "core_only" counts the always-active set, "full" everything, and
    "deployed" the core plus k augment groups per disentangled module per
    layer (defaults: ff 2, att 2, conv 12, capped by availability).
    """
    if mode not in ("core_only", "deployed", "full"):
        raise ValueError(f"unknown count mode {mode!r}")
    shapes = param_shapes(cfg)
    size = {name: int(np.prod(shape)) if shape else 1 for name, shape in shapes.items()}
    registry = build_registry(cfg)
    total = sum(size[n] for n in registry.core_names())
    if mode == "core_only":
        return total
    if mode == "full":
        return total + sum(size[n] for n in registry.expert_names())
    if isinstance(k, int):
        k_by_kind = {kind: k for kind in ("ff", "att", "conv")}
    else:
        k_by_kind = dict(DEFAULT_K)
        if k:
            k_by_kind.update(k)
    for layer in registry.layers:
        for key, group in layer.items():
            if not group.experts:
                continue
            kind = _selection_kind(key)
            take = min(k_by_kind.get(kind, 0), len(group.experts))
            for grp in group.experts[:take]:
                total += sum(size[n] for n in grp)
    return total
