"""CTC loss via log-space forward-backward, greedy/beam decoding, and WER.

The loss is a single differentiable op on per-frame log-probabilities: the
forward pass runs the usual alpha recursion over the blank-extended label
sequence, and the backward pass uses state occupancies from the alpha/beta
recursions, so no per-cell graph nodes are recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "Vocabulary",
    "DEFAULT_VOCAB",
    "CtcLengthError",
    "ctc_loss",
    "ctc_greedy_decode",
    "ctc_beam_decode",
    "edit_distance",
    "wer",
]

NEG_INF = -np.inf


class CtcLengthError(ValueError):
    """The target cannot be aligned: too few frames for the labels plus required blanks."""


@dataclass(frozen=True)
class Vocabulary:
    """Output symbol table. Index 0 is the CTC blank; trailing symbols may be unused padding."""

    symbols: tuple[str, ...]
    blank: int = 0

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        labels = []
        for ch in text:
            try:
                idx = self.symbols.index(ch)
            except ValueError:
                raise ValueError(f"symbol {ch!r} is not in the vocabulary") from None
            if idx == self.blank:
                raise ValueError(f"symbol {ch!r} maps to the blank index")
            labels.append(idx)
        return labels

    def decode(self, labels: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in labels)

    def to_list(self) -> list[str]:
        return list(self.symbols)

    @classmethod
    def from_list(cls, symbols: Sequence[str], blank: int = 0) -> "Vocabulary":
        return cls(symbols=tuple(symbols), blank=blank)


def _default_vocab() -> Vocabulary:
    # blank, a-z, space, apostrophe, one pad symbol to reach 30 outputs
    symbols = ["∅"] + [chr(c) for c in range(ord("a"), ord("z") + 1)] + [" ", "'", "¤"]
    return Vocabulary(symbols=tuple(symbols), blank=0)


DEFAULT_VOCAB = _default_vocab()


def _extend_with_blanks(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def min_frames_for(target: Sequence[int]) -> int:
    """Shortest frame count that admits any alignment: labels plus blanks between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _validate_target(target: Sequence[int], num_classes: int, blank: int) -> None:
    for lab in target:
        if not (0 <= lab < num_classes):
            raise ValueError(f"target label {lab} outside [0, {num_classes})")
        if lab == blank:
            raise ValueError("target labels must not contain the blank index")


def _alpha_beta(log_probs: np.ndarray, ext: np.ndarray):
    t_len = log_probs.shape[0]
    s_len = ext.shape[0]
    # alpha[t, s] includes the emission at t; beta[t, s] excludes it.
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    # A skip transition (s-2 -> s) is legal only into a label position whose
    # label differs from the one two slots back.
    can_skip = np.zeros(s_len, dtype=bool)
    for s in range(2, s_len):
        can_skip[s] = s % 2 == 1 and ext[s] != ext[s - 2]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        step = np.full(s_len, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(prev, step)
        if s_len > 2:
            skip = np.full(s_len, NEG_INF)
            skip[2:] = prev[:-2]
            acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + log_probs[t, ext]
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, ext]
        step = np.full(s_len, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, step)
        if s_len > 2:
            skip = np.full(s_len, NEG_INF)
            skip[:-2] = nxt[2:]
            skip_ok = np.zeros(s_len, dtype=bool)
            skip_ok[:-2] = can_skip[2:]
            acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        beta[t] = acc
    return alpha, beta


def ctc_loss(log_probs: ad.Tensor, target: Sequence[int], blank: int = 0) -> ad.Tensor:
    """Negative log probability of ``target`` under per-frame log-distributions.

    ``log_probs`` is (T, V) with normalized rows. Raises CtcLengthError when no
    alignment exists instead of returning an infinite loss.
    """
    lp = log_probs.data
    if lp.ndim != 2:
        raise ad.ShapeError(f"ctc_loss expects (T, V) log-probs, got {log_probs.shape}")
    t_len, num_classes = lp.shape
    target = list(target)
    _validate_target(target, num_classes, blank)
    needed = min_frames_for(target)
    if t_len < needed:
        raise CtcLengthError(
            f"target of length {len(target)} needs at least {needed} frames, got {t_len}"
        )
    ext = _extend_with_blanks(target, blank)
    with np.errstate(invalid="ignore"):
        alpha, beta = _alpha_beta(lp, ext)
        s_len = ext.shape[0]
        if s_len > 1:
            log_p = np.logaddexp(alpha[t_len - 1, s_len - 1], alpha[t_len - 1, s_len - 2])
        else:
            log_p = alpha[t_len - 1, 0]
        occupancy = alpha + beta - log_p  # log gamma[t, s]

    def backward(g):
        d_lp = np.zeros_like(lp)
        with np.errstate(invalid="ignore"):
            gamma = np.exp(occupancy)
        gamma[~np.isfinite(gamma)] = 0.0
        for s in range(s_len):
            d_lp[:, ext[s]] -= gamma[:, s]
        return (d_lp * g,)

    return ad.custom_op(np.asarray(-log_p), (log_probs,), backward, "ctc_loss")


def ctc_greedy_decode(log_probs, blank: int = 0) -> list[int]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, ad.Tensor) else np.asarray(log_probs)
    path = lp.argmax(axis=-1)
    out: list[int] = []
    prev = -1
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def ctc_beam_decode(log_probs, beam_size: int, blank: int = 0) -> list[int]:
    """Lexicon-free prefix beam search returning the most probable label prefix.

    Each live prefix tracks separate log-masses for paths ending in blank vs.
    non-blank so repeat merging is exact. Width 1 degenerates to best-path
    (greedy) decoding with the same merge rules; ties break lexicographically
    on the prefix.
    """
    if beam_size < 1:
        raise ValueError(f"beam size must be >= 1, got {beam_size}")
    if beam_size == 1:
        return ctc_greedy_decode(log_probs, blank=blank)
    lp = log_probs.data if isinstance(log_probs, ad.Tensor) else np.asarray(log_probs)
    t_len, num_classes = lp.shape
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        row = lp[t]
        new: dict[tuple[int, ...], list[float]] = {}

        def bump(prefix, p_blank, p_nonblank):
            cell = new.setdefault(prefix, [NEG_INF, NEG_INF])
            cell[0] = np.logaddexp(cell[0], p_blank)
            cell[1] = np.logaddexp(cell[1], p_nonblank)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            bump(prefix, total + row[blank], NEG_INF)
            if prefix:
                bump(prefix, NEG_INF, pnb + row[prefix[-1]])
            for c in range(num_classes):
                if c == blank:
                    continue
                base = pb if (prefix and c == prefix[-1]) else total
                bump(prefix + (c,), NEG_INF, base + row[c])
        ranked = sorted(
            new.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = {prefix: (cell[0], cell[1]) for prefix, cell in ranked[:beam_size]}
    best = min(beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
    return list(best[0])


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(hyp_words: Sequence[str], ref_words: Sequence[str]) -> float:
    """Word error rate: word-level Levenshtein distance over reference length."""
    if len(ref_words) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(list(hyp_words), list(ref_words)) / len(ref_words)
