import numpy as np
import pytest

from conftest import exhaustive_best, random_model
from mmichat import model as M
from mmichat.decoder import (
    DecodeConfig, anti_lm_penalty, attach_lm_scores, beam_search, decode_corpus,
    greedy_decode, rescore, score,
)
from mmichat.errors import InputError
from mmichat.nbest import Hypothesis

EOS = M.EOS


class TestAntiLmPenalty:
    h = Hypothesis((3, 4, 5, EOS), (-0.1, -0.2, -0.3, -0.4), (-1.0, -2.0, -0.5, -0.7))

    def test_hand_sum(self):
        assert anti_lm_penalty(self.h, 2) == -3.0

    def test_zero_gamma(self):
        assert anti_lm_penalty(self.h, 0) == 0.0

    def test_full_length_excludes_eos(self):
        assert anti_lm_penalty(self.h, 3) == anti_lm_penalty(self.h, 10) == -3.5

    def test_missing_lm_rejected(self):
        with pytest.raises(InputError):
            anti_lm_penalty(Hypothesis((3, EOS), (-1.0, -1.0)), 1)


class TestScore:
    def test_hand_arithmetic(self):
        h = Hypothesis((3, 4, 5, EOS), (-1.0, -1.0, -1.0, -1.0), (-1.0, -1.5, -0.5, -2.0))
        cfg = DecodeConfig(mode="anti_lm", lam=0.5, gamma_len=0.1, gamma_g=3)
        assert score(h, cfg) == pytest.approx(-2.2, abs=1e-12)

    def test_lambda_zero_is_forward(self):
        h = Hypothesis((3, EOS), (-0.7, -0.2), (-3.0, -1.0))
        assert score(h, DecodeConfig(mode="anti_lm", lam=0.0)) == h.fwd_logprob

    def test_monotone_in_lambda(self):
        h = Hypothesis((3, 4, EOS), (-0.7, -0.2, -0.1), (-3.0, -1.0, -0.5))
        vals = [score(h, DecodeConfig(mode="anti_lm", lam=l, gamma_g=2)) for l in (0, 0.3, 0.9)]
        assert vals == sorted(vals)


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("mode", ["baseline", "greedy", "anti_lm"])
    def test_matches_brute_force(self, seed, mode):
        fwd = random_model(4, 3, 2, seed=seed, scale=1.0)
        lm = random_model(4, 3, 2, "lm", seed=100 + seed, scale=1.0)
        cfg = DecodeConfig(beam_size=4 ** 3, max_len=3, mode=mode, lam=0.4, gamma_g=2,
                           gamma_len=0.3)
        nb = beam_search(fwd, lm, [2, 3], cfg)
        best_score, best_tokens = exhaustive_best(fwd, lm, [2, 3], cfg)
        assert nb.top.tokens == best_tokens
        assert nb.top.score == pytest.approx(best_score, abs=1e-9)

    def test_structure(self, tiny_fwd):
        cfg = DecodeConfig(beam_size=5, max_len=6)
        nb = beam_search(tiny_fwd, None, [3, 4], cfg)
        assert nb.entries
        for h in nb.entries:
            assert h.tokens[-1] == EOS and EOS not in h.tokens[:-1]
            assert len(h.tokens) <= cfg.max_len + 1
        scores = [h.score for h in nb.entries]
        assert scores == sorted(scores, reverse=True)

    @pytest.mark.parametrize("seed", range(5))
    def test_width_one_is_greedy(self, seed):
        fwd = random_model(7, 4, 2, seed=seed, scale=1.0)
        g = greedy_decode(fwd, [3, 4, 5], max_len=6)
        nb = beam_search(fwd, None, [3, 4, 5], DecodeConfig(beam_size=1, max_len=6))
        if g.complete:
            assert nb.top.tokens == g.tokens
            assert nb.top.fwd == g.fwd
        else:
            assert not nb.entries

    @pytest.mark.parametrize("seed", range(4))
    def test_antilm_lambda_zero_identity(self, seed):
        fwd = random_model(6, 4, 2, seed=seed, scale=1.0)
        lm = random_model(6, 4, 2, "lm", seed=50 + seed, scale=1.0)
        base = beam_search(fwd, lm, [3, 4], DecodeConfig(beam_size=4, max_len=5))
        anti = beam_search(fwd, lm, [3, 4], DecodeConfig(beam_size=4, max_len=5, mode="anti_lm",
                                                          lam=0.0, gamma_len=0.0, gamma_g=3))
        assert [(h.tokens, h.score) for h in base.entries] == [(h.tokens, h.score) for h in anti.entries]

    @pytest.mark.parametrize("seed", range(4))
    def test_wider_beam_never_worse(self, seed):
        fwd = random_model(6, 4, 2, seed=seed, scale=1.5)
        tops = []
        for b in (1, 2, 3, 4, 6, 8, 12, 6 ** 3):
            nb = beam_search(fwd, None, [3], DecodeConfig(beam_size=b, max_len=3))
            tops.append(nb.top.score if nb.top else -np.inf)
        assert tops == sorted(tops)

    def test_rejects_bad_input(self, tiny_fwd, tiny_lm):
        with pytest.raises(InputError):
            beam_search(tiny_fwd, None, [9], DecodeConfig())
        with pytest.raises(InputError):
            beam_search(tiny_fwd, None, [3], DecodeConfig(mode="anti_lm"))
        with pytest.raises(InputError):
            beam_search(tiny_fwd, tiny_lm, [3], DecodeConfig(beam_size=0))

    def test_deterministic_and_threads(self, tiny_fwd, tiny_lm):
        cfg = DecodeConfig(beam_size=3, max_len=4, mode="anti_lm", lam=0.3)
        sources = [[3], [4, 3], [0, 2, 4], [3, 3]]
        one = decode_corpus(tiny_fwd, tiny_lm, sources, cfg, threads=1)
        many = decode_corpus(tiny_fwd, tiny_lm, sources, cfg, threads=3)
        assert [[h.tokens for h in nb] for nb in one] == [[h.tokens for h in nb] for nb in many]
        assert [nb.source_id for nb in many] == [0, 1, 2, 3]


def test_greedy_deterministic(tiny_fwd):
    assert greedy_decode(tiny_fwd, [3, 4]) == greedy_decode(tiny_fwd, [3, 4])


def test_attach_and_rescore_match_in_search_scores(tiny_fwd, tiny_lm):
    cfg = DecodeConfig(beam_size=4, max_len=4, mode="anti_lm", lam=0.5, gamma_g=2, gamma_len=0.2)
    nb = beam_search(tiny_fwd, tiny_lm, [3, 4], cfg)
    bare = nb.__class__(nb.source, [Hypothesis(h.tokens, h.fwd) for h in nb.entries])
    (with_lm,) = attach_lm_scores([bare], tiny_lm)
    again = rescore(with_lm, cfg)
    assert [h.tokens for h in again.entries] == [h.tokens for h in nb.entries]
    np.testing.assert_allclose([h.score for h in again.entries], [h.score for h in nb.entries],
                               atol=1e-12)
