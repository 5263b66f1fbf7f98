import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discoasr import autodiff as ad
from discoasr import ctc


def uniform_lp(t_len, v):
    return ad.log_softmax(ad.Tensor(np.zeros((t_len, v))))


def brute_force_loss(lp: np.ndarray, target, blank=0) -> float:
    """Oracle: enumerate every frame-label path and sum the ones that collapse to target."""
    t_len, v = lp.shape
    total = -np.inf
    for path in itertools.product(range(v), repeat=t_len):
        out, prev = [], -1
        for p in path:
            if p != prev and p != blank:
                out.append(p)
            prev = p
        if out == list(target):
            total = np.logaddexp(total, sum(lp[i, path[i]] for i in range(t_len)))
    return -total


class TestCtcLoss:
    def test_single_frame_uniform(self):
        loss = ctc.ctc_loss(uniform_lp(1, 3), [1])
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_two_frames_three_alignments(self):
        # paths {aa, -a, a-} out of 9 equally likely paths
        loss = ctc.ctc_loss(uniform_lp(2, 3), [1])
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_exhaustive_path_oracle(self):
        rng = np.random.default_rng(10)
        checked = 0
        while checked < 40:
            t_len = int(rng.integers(1, 7))
            v = int(rng.integers(2, 5))
            target = [int(rng.integers(1, v)) for _ in range(int(rng.integers(0, 4)))]
            if t_len < ctc.min_frames_for(target):
                continue
            lp = ad.log_softmax(ad.Tensor(rng.standard_normal((t_len, v))))
            got = ctc.ctc_loss(lp, target).item()
            want = brute_force_loss(lp.data, target)
            assert abs(got - want) <= 1e-10
            checked += 1

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for target in ([1, 2, 1], [3], []):
            x = ad.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
            ad.check_gradients(lambda: ctc.ctc_loss(ad.log_softmax(x), target), [x])

    def test_target_too_long_is_an_error(self):
        with pytest.raises(ctc.CtcLengthError, match="at least"):
            ctc.ctc_loss(uniform_lp(2, 3), [1, 1])  # repeat needs a separating blank

    def test_blank_in_target_rejected(self):
        with pytest.raises(ValueError, match="blank"):
            ctc.ctc_loss(uniform_lp(3, 3), [0])

    def test_probability_mass_bounded(self):
        # sum of exp(-loss) over all targets short enough to align stays <= 1
        rng = np.random.default_rng(12)
        lp = ad.log_softmax(ad.Tensor(rng.standard_normal((4, 3))))
        mass = 0.0
        for length in range(0, 5):
            for target in itertools.product([1, 2], repeat=length):
                if 4 < ctc.min_frames_for(list(target)):
                    continue
                mass += math.exp(-ctc.ctc_loss(lp, list(target)).item())
        assert mass <= 1.0 + 1e-9


class TestGreedyDecode:
    def test_collapse_rule(self):
        lp = np.log(np.asarray([
            [0.1, 0.8, 0.1],  # a
            [0.1, 0.8, 0.1],  # a
            [0.8, 0.1, 0.1],  # blank
            [0.1, 0.1, 0.8],  # b
        ]))
        assert ctc.ctc_greedy_decode(lp) == [1, 2]

    def test_all_blank_empty(self):
        lp = np.log(np.asarray([[0.9, 0.05, 0.05]] * 4))
        assert ctc.ctc_greedy_decode(lp) == []

    def test_blank_separates_repeats(self):
        lp = np.log(np.asarray([
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
        ]))
        assert ctc.ctc_greedy_decode(lp) == [1, 1]


def brute_best_prefix(lp: np.ndarray, blank=0):
    t_len, v = lp.shape
    best, best_prefix = -np.inf, None
    candidates = [()]
    for length in range(1, t_len + 1):
        candidates += list(itertools.product([c for c in range(v) if c != blank], repeat=length))
    for prefix in sorted(candidates):
        try:
            score = -ctc.ctc_loss(ad.Tensor(lp), list(prefix)).item()
        except ctc.CtcLengthError:
            continue
        if best_prefix is None or score > best + 1e-12:
            best, best_prefix = score, prefix
    return list(best_prefix)


class TestBeamDecode:
    def test_beam_one_equals_greedy(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            lp = np.log(rng.dirichlet(np.ones(4), size=6))
            assert ctc.ctc_beam_decode(lp, 1) == ctc.ctc_greedy_decode(lp)

    def test_exhaustive_prefix_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(8):
            t_len = int(rng.integers(2, 6))
            v = int(rng.integers(2, 5))
            lp = np.log(rng.dirichlet(np.ones(v), size=t_len))
            exhaustive = ctc.ctc_beam_decode(lp, beam_size=v ** t_len * 10)
            assert exhaustive == brute_best_prefix(lp)

    def test_lexicographic_tie_break(self):
        # two symbols with identical mass everywhere: prefix (1,) ties (2,)
        lp = np.log(np.asarray([[0.2, 0.4, 0.4]] * 2))
        out = ctc.ctc_beam_decode(lp, beam_size=16)
        assert out == [1]

    def test_beam_zero_rejected(self):
        with pytest.raises(ValueError):
            ctc.ctc_beam_decode(np.zeros((2, 2)), 0)


class TestWer:
    def test_single_substitution(self):
        assert ctc.wer("the cat".split(), "the bat".split()) == 0.5

    def test_identical(self):
        assert ctc.wer(["a", "b"], ["a", "b"]) == 0.0

    def test_empty_hypothesis_all_deletions(self):
        assert ctc.wer([], ["w", "x", "y", "z"]) == 1.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            ctc.wer(["a"], [])

    words = st.lists(st.sampled_from(["go", "stop", "up", "down", "one"]), max_size=6)

    @given(a=words, b=words)
    @settings(max_examples=60, deadline=None)
    def test_edit_distance_symmetric(self, a, b):
        assert ctc.edit_distance(a, b) == ctc.edit_distance(b, a)

    @given(a=words, b=words, c=words)
    @settings(max_examples=60, deadline=None)
    def test_edit_distance_triangle(self, a, b, c):
        assert ctc.edit_distance(a, c) <= ctc.edit_distance(a, b) + ctc.edit_distance(b, c)


class TestVocabulary:
    def test_default_has_thirty_symbols(self):
        assert ctc.DEFAULT_VOCAB.size == 30
        assert ctc.DEFAULT_VOCAB.blank == 0

    def test_round_trip(self):
        labels = ctc.DEFAULT_VOCAB.encode("hello world")
        assert ctc.DEFAULT_VOCAB.decode(labels) == "hello world"

    def test_unknown_symbol_named_in_error(self):
        with pytest.raises(ValueError, match="Q"):
            ctc.DEFAULT_VOCAB.encode("Q")
