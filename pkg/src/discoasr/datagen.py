"""Deterministic synthetic multi-speaker corpus generation and manifest I/O.

Features are synthetic frame sequences, not audio: every vocabulary symbol has
a prototype feature vector, an utterance is the concatenation of per-symbol
prototype runs plus noise, and a speaker is an affine feature transform plus
per-symbol duration offsets. Shift strength 0 makes every speaker identical to
the canonical (original-domain) renderer.

Everything is derived from integer seeds through named substreams, so the same
(spec, seed) pair always produces byte-identical manifests and features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .ctc import DEFAULT_VOCAB, Vocabulary

__all__ = [
    "DatasetSpec",
    "UtteranceRecord",
    "SpeakerCorpus",
    "CorpusBundle",
    "ManifestError",
    "generate_corpus",
    "materialize",
    "render_features",
    "synth_frames",
    "corpus_stats",
    "stats_table",
    "write_manifest",
    "read_manifest",
    "write_features",
    "read_features",
    "write_corpus",
    "read_corpus",
]

DEFAULT_WORDS = (
    "go", "stop", "left", "right", "up", "down", "on", "off",
    "one", "two", "nine", "yes", "no", "hello",
)

# Substream tags so every random decision has its own independent stream.
_STREAM_PROTOS = 101
_STREAM_SPEAKER = 202
_STREAM_TEXT = 303
_STREAM_NOISE = 404

FEATURE_MAGIC = b"DAFE0001"
MANIFEST_FIELDS = ("utt_id", "speaker", "split", "frames", "text", "source")


class ManifestError(ValueError):
    """A manifest line is malformed or violates a record invariant."""


@dataclass(frozen=True)
class DatasetSpec:
    """Shape of the generated benchmark: speaker count, split sizes, feature space."""

    n_speakers: int = 4
    train_split_utts: tuple[int, ...] = (8, 16, 32)
    val_utts: int = 6
    test_utts: int = 8
    n_original_speakers: int = 6
    original_train_utts: int = 160
    original_dev_utts: int = 24
    original_test_utts: int = 32
    feature_dim: int = 16
    shift_strength: float = 2.5
    base_duration: int = 3
    noise_scale: float = 0.08
    min_words: int = 1
    max_words: int = 3
    frame_seconds: float = 0.01
    words: tuple[str, ...] = DEFAULT_WORDS

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.train_split_utts, self.train_split_utts[1:])):
            raise ValueError("train_split_utts must be strictly ascending (nested splits)")
        if self.base_duration < 2:
            raise ValueError("base_duration must be >= 2 frames")
        if self.min_words < 1 or self.max_words < self.min_words:
            raise ValueError("need 1 <= min_words <= max_words")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_split_utts"] = list(self.train_split_utts)
        d["words"] = list(self.words)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["train_split_utts"] = tuple(d["train_split_utts"])
        d["words"] = tuple(d["words"])
        return cls(**d)


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    split: str
    frames: int
    text: str
    source: dict
    extra: dict = field(default_factory=dict)

    def to_line_dict(self) -> dict:
        d = {f: getattr(self, f) for f in MANIFEST_FIELDS}
        d.update(self.extra)
        return d


@dataclass
class SpeakerCorpus:
    """One target speaker: nested train splits (each a superset of the previous), val, test."""

    speaker: str
    train_splits: list[list[UtteranceRecord]]
    val: list[UtteranceRecord]
    test: list[UtteranceRecord]


@dataclass
class CorpusBundle:
    spec: DatasetSpec
    seed: int
    original: dict[str, list[UtteranceRecord]]
    speakers: list[SpeakerCorpus]

    def speaker_by_id(self, speaker_id: str) -> SpeakerCorpus:
        for sc in self.speakers:
            if sc.speaker == speaker_id:
                return sc
        raise KeyError(f"unknown speaker {speaker_id!r}")


# ---------------------------------------------------------------------------
# synthesis


def _protos(corpus_seed: int, feature_dim: int, vocab: Vocabulary) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([_STREAM_PROTOS, corpus_seed]))
    return rng.normal(0.0, 1.0, size=(vocab.size, feature_dim))


def _speaker_params(corpus_seed: int, speaker_index: int, strength: float,
                    feature_dim: int, vocab: Vocabulary):
    """Affine feature transform and per-symbol duration offsets for one speaker."""
    rng = np.random.default_rng(np.random.SeedSequence([_STREAM_SPEAKER, corpus_seed, speaker_index]))
    g = rng.normal(0.0, 1.0, size=(feature_dim, feature_dim)) / math.sqrt(feature_dim)
    transform = np.eye(feature_dim) + strength * 0.35 * g
    offset = strength * 0.35 * rng.normal(0.0, 1.0, size=feature_dim)
    dur_bias = rng.uniform(-0.9, 1.6, size=vocab.size)
    return transform, offset, dur_bias


def _durations(text: str, base: int, strength: float, dur_bias: np.ndarray,
               vocab: Vocabulary) -> list[int]:
    durs = []
    for ch in text:
        idx = vocab.symbols.index(ch)
        durs.append(max(2, base + int(round(strength * dur_bias[idx]))))
    return durs


def synth_frames(source: dict, text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> int:
    """Frame count implied by a synth source, without rendering features."""
    _, _, dur_bias = _speaker_params(
        source["corpus_seed"], source["speaker_index"], source["strength"],
        source["feature_dim"], vocab,
    )
    return sum(_durations(text, source["base_duration"], source["strength"], dur_bias, vocab))


def render_features(source: dict, text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """Materialize the feature matrix for a synth-sourced utterance."""
    feature_dim = source["feature_dim"]
    protos = _protos(source["corpus_seed"], feature_dim, vocab)
    transform, offset, dur_bias = _speaker_params(
        source["corpus_seed"], source["speaker_index"], source["strength"], feature_dim, vocab
    )
    durs = _durations(text, source["base_duration"], source["strength"], dur_bias, vocab)
    rng = np.random.default_rng(
        np.random.SeedSequence([_STREAM_NOISE, source["corpus_seed"], source["utt_index"]])
    )
    rows = []
    for ch, dur in zip(text, durs):
        idx = vocab.symbols.index(ch)
        block = np.tile(protos[idx], (dur, 1))
        rows.append(block)
    feats = np.concatenate(rows, axis=0)
    feats = feats + source["noise_scale"] * rng.normal(0.0, 1.0, size=feats.shape)
    return feats @ transform.T + offset


def materialize(record: UtteranceRecord, root: str | Path | None = None,
                vocab: Vocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """Resolve a record's feature source (synth, inline, or file) to an array."""
    kind = record.source.get("kind")
    if kind == "synth":
        feats = render_features(record.source, record.text, vocab)
    elif kind == "inline":
        feats = np.asarray(record.source["data"], dtype=np.float64)
    elif kind == "file":
        path = Path(record.source["path"])
        if not path.is_absolute() and root is not None:
            path = Path(root) / path
        feats = read_features(path)
    else:
        raise ManifestError(f"unknown feature source kind {kind!r} for {record.utt_id}")
    if feats.shape[0] != record.frames:
        raise ManifestError(
            f"{record.utt_id}: manifest says {record.frames} frames but features have {feats.shape[0]}"
        )
    return feats


# ---------------------------------------------------------------------------
# corpus generation


def generate_corpus(spec: DatasetSpec, seed: int, vocab: Vocabulary = DEFAULT_VOCAB) -> CorpusBundle:
    """Original-domain corpus plus per-speaker nested-split corpora, fully seeded."""
    text_rng = np.random.default_rng(np.random.SeedSequence([_STREAM_TEXT, seed]))
    counter = 0

    def make_record(speaker: str, speaker_index: int, strength: float, split: str,
                    prefix: str) -> UtteranceRecord:
        nonlocal counter
        n_words = int(text_rng.integers(spec.min_words, spec.max_words + 1))
        words = [spec.words[int(text_rng.integers(len(spec.words)))] for _ in range(n_words)]
        text = " ".join(words)
        source = {
            "kind": "synth",
            "corpus_seed": seed,
            "speaker_index": speaker_index,
            "strength": strength,
            "utt_index": counter,
            "feature_dim": spec.feature_dim,
            "base_duration": spec.base_duration,
            "noise_scale": spec.noise_scale,
        }
        rec = UtteranceRecord(
            utt_id=f"{prefix}-{counter:05d}",
            speaker=speaker,
            split=split,
            frames=synth_frames(source, text, vocab),
            text=text,
            source=source,
        )
        counter += 1
        return rec

    original: dict[str, list[UtteranceRecord]] = {"train": [], "dev": [], "test": []}
    for split, count in (("train", spec.original_train_utts),
                         ("dev", spec.original_dev_utts),
                         ("test", spec.original_test_utts)):
        for i in range(count):
            orig_idx = i % spec.n_original_speakers
            # Original-domain speakers render at strength 0; their index only
            # has to be distinct from target speakers for seeding purposes.
            original[split].append(
                make_record(f"orig{orig_idx:02d}", 10_000 + orig_idx, 0.0, split, "orig")
            )

    speakers: list[SpeakerCorpus] = []
    for s in range(spec.n_speakers):
        sid = f"spk{s:02d}"
        pool: list[UtteranceRecord] = []
        prev = 0
        for split_idx, size in enumerate(spec.train_split_utts):
            for _ in range(size - prev):
                pool.append(make_record(sid, s, spec.shift_strength, f"train-{split_idx}", sid))
            prev = size
        train_splits = [pool[:size] for size in spec.train_split_utts]
        val = [make_record(sid, s, spec.shift_strength, "val", sid) for _ in range(spec.val_utts)]
        test = [make_record(sid, s, spec.shift_strength, "test", sid) for _ in range(spec.test_utts)]
        speakers.append(SpeakerCorpus(speaker=sid, train_splits=train_splits, val=val, test=test))
    return CorpusBundle(spec=spec, seed=seed, original=original, speakers=speakers)


def corpus_stats(bundle: CorpusBundle) -> dict:
    """Per-split mean/std across speakers of hours-equivalent and utterance counts."""
    spec = bundle.spec
    splits: dict[str, list[tuple[float, int]]] = {}
    for sc in bundle.speakers:
        parts = {f"train-{i}": recs for i, recs in enumerate(sc.train_splits)}
        parts["val"] = sc.val
        parts["test"] = sc.test
        for name, recs in parts.items():
            hours = sum(r.frames for r in recs) * spec.frame_seconds / 3600.0
            splits.setdefault(name, []).append((hours, len(recs)))

    def agg(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    out = {}
    for name, pairs in splits.items():
        h_mean, h_std = agg([p[0] for p in pairs])
        u_mean, u_std = agg([float(p[1]) for p in pairs])
        out[name] = {
            "hours_mean": h_mean, "hours_std": h_std,
            "utts_mean": u_mean, "utts_std": u_std,
            "speakers": len(pairs),
        }
    return out


def stats_table(stats: dict) -> str:
    lines = [f"{'subset':<10s} {'hrs/spkr':>16s} {'utts/spkr':>16s}"]
    for name in sorted(stats):
        s = stats[name]
        lines.append(
            f"{name:<10s} {s['hours_mean']:>8.4f} ±{s['hours_std']:<6.4f} "
            f"{s['utts_mean']:>8.1f} ±{s['utts_std']:<6.1f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# manifest and feature files


def write_manifest(records: list[UtteranceRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_line_dict(), sort_keys=False) + "\n")


def read_manifest(path: str | Path, vocab: Vocabulary = DEFAULT_VOCAB,
                  validate_frames: bool = True) -> list[UtteranceRecord]:
    """Parse a manifest, enforcing record invariants; errors carry line numbers."""
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path.name}:{lineno}: malformed record: {e}") from None
            missing = [f for f in MANIFEST_FIELDS if f not in d]
            if missing:
                raise ManifestError(f"{path.name}:{lineno}: missing fields {missing}")
            known = {f: d[f] for f in MANIFEST_FIELDS}
            extra = {k: v for k, v in d.items() if k not in MANIFEST_FIELDS}
            rec = UtteranceRecord(**known, extra=extra)
            for ch in rec.text:
                if ch not in vocab.symbols or vocab.symbols.index(ch) == vocab.blank:
                    raise ManifestError(
                        f"{path.name}:{lineno}: transcript symbol {ch!r} outside vocabulary"
                    )
            if validate_frames:
                kind = rec.source.get("kind")
                if kind == "inline":
                    n = len(rec.source["data"])
                    if n != rec.frames:
                        raise ManifestError(
                            f"{path.name}:{lineno}: frame count {rec.frames} does not match "
                            f"inline features ({n} rows)"
                        )
                elif kind == "synth":
                    n = synth_frames(rec.source, rec.text, vocab)
                    if n != rec.frames:
                        raise ManifestError(
                            f"{path.name}:{lineno}: frame count {rec.frames} does not match "
                            f"generator output ({n} frames)"
                        )
            records.append(rec)
    return records


def write_features(path: str | Path, arr: np.ndarray) -> None:
    """Raw little-endian float array with a shape header."""
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(np.uint32(arr.dtype.itemsize).tobytes())
        fh.write(np.uint32(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_features(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise ManifestError(f"{path}: not a feature file (bad magic {magic!r})")
        itemsize = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        ndim = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        shape = tuple(int(x) for x in np.frombuffer(fh.read(8 * ndim), dtype="<u8"))
        dtype = "<f4" if itemsize == 4 else "<f8"
        data = np.frombuffer(fh.read(), dtype=dtype)
        return data.reshape(shape).astype(np.float64 if itemsize == 8 else np.float32)


# ---------------------------------------------------------------------------
# directory layout


def write_corpus(bundle: CorpusBundle, out_dir: str | Path, materialize_features: bool = False,
                 vocab: Vocabulary = DEFAULT_VOCAB) -> None:
    """Write meta + manifests (+ optional feature files) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "speakers").mkdir(exist_ok=True)
    all_records = list(_iter_records(bundle))
    if materialize_features:
        feat_dir = out / "features"
        feat_dir.mkdir(exist_ok=True)
        for rec in all_records:
            feats = materialize(rec, vocab=vocab)
            rel = f"features/{rec.utt_id}.fea"
            write_features(out / rel, feats)
            rec.source = {"kind": "file", "path": rel}
    meta = {
        "format_version": 1,
        "seed": bundle.seed,
        "spec": bundle.spec.to_dict(),
        "speakers": [sc.speaker for sc in bundle.speakers],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_manifest([r for split in bundle.original.values() for r in split], out / "original.jsonl")
    for sc in bundle.speakers:
        recs = sc.train_splits[-1] + sc.val + sc.test
        write_manifest(recs, out / "speakers" / f"{sc.speaker}.jsonl")
    stats = corpus_stats(bundle)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    (out / "stats.txt").write_text(stats_table(stats) + "\n")


def read_corpus(in_dir: str | Path, vocab: Vocabulary = DEFAULT_VOCAB) -> CorpusBundle:
    root = Path(in_dir)
    meta = json.loads((root / "meta.json").read_text())
    spec = DatasetSpec.from_dict(meta["spec"])
    original: dict[str, list[UtteranceRecord]] = {"train": [], "dev": [], "test": []}
    for rec in read_manifest(root / "original.jsonl", vocab):
        original[rec.split].append(rec)
    speakers = []
    for sid in meta["speakers"]:
        recs = read_manifest(root / "speakers" / f"{sid}.jsonl", vocab)
        pool = [r for r in recs if r.split.startswith("train-")]
        val = [r for r in recs if r.split == "val"]
        test = [r for r in recs if r.split == "test"]
        train_splits = []
        for i in range(len(spec.train_split_utts)):
            train_splits.append([r for r in pool if int(r.split.split("-")[1]) <= i])
        speakers.append(SpeakerCorpus(speaker=sid, train_splits=train_splits, val=val, test=test))
    return CorpusBundle(spec=spec, seed=meta["seed"], original=original, speakers=speakers)


def _iter_records(bundle: CorpusBundle):
    for split in bundle.original.values():
        yield from split
    for sc in bundle.speakers:
        yield from sc.train_splits[-1]
        yield from sc.val
        yield from sc.test
