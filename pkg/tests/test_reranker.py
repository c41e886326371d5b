import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_model
from mmichat import model as M
from mmichat.corpus import ConversationPair
from mmichat.errors import InputError
from mmichat.nbest import Hypothesis, NBestList
from mmichat.reranker import (
    RerankWeights, attach_backward_scores, backward_score, bidi_score, list_distinct2, rerank,
)
from mmichat.trainer import TrainConfig, train

EOS = M.EOS


def hyp(tokens, fwd, bwd):
    n = len(tokens) + 1
    return Hypothesis(tuple(tokens) + (EOS,), (fwd / n,) * n, bwd=bwd)


def test_hand_example():
    nb = NBestList((3,), [hyp([4, 5], -1.0, -5.0), hyp([6, 7], -1.2, -2.0)])
    out = rerank(nb, RerankWeights(lam=0.5))
    assert [h.score for h in out.entries] == pytest.approx([-1.6, -3.0])
    assert out.entries[0].tokens == (6, 7, EOS)


def test_lambda_zero_is_identity():
    nb = NBestList((3,), [hyp([4], -1.0, -9.0), hyp([5], -2.0, -0.1), hyp([6], -2.0, -0.5)])
    out = rerank(nb, RerankWeights(lam=0.0))
    assert [h.tokens for h in out.entries] == [h.tokens for h in nb.entries]


def test_lambda_one_sorts_by_backward():
    nb = NBestList((3,), [hyp([4], -1.0, -9.0), hyp([5], -2.0, -0.1), hyp([6], -3.0, -0.5)])
    out = rerank(nb, RerankWeights(lam=1.0))
    assert [h.bwd for h in out.entries] == [-0.1, -0.5, -9.0]


def test_unit_forward_form():
    h = hyp([4, 5], -1.0, -2.0)
    assert bidi_score(h, RerankWeights(lam=0.5, unit_forward=True)) == pytest.approx(-2.0)
    assert bidi_score(h, RerankWeights(lam=0.5, gamma_len=1.0)) == pytest.approx(0.5)


@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-20, 0)), min_size=1, max_size=12),
       st.floats(0, 1), st.floats(0, 2))
def test_permutation(raw, lam, gl):
    nb = NBestList((3,), [hyp([4 + k % 3] * (1 + k % 4), f, b) for k, (f, b) in enumerate(raw)])
    out = rerank(nb, RerankWeights(lam=lam, gamma_len=gl))
    assert len(out.entries) == len(nb.entries)
    key = lambda h: (h.tokens, h.fwd, h.bwd)
    assert sorted(map(key, out.entries)) == sorted(map(key, nb.entries))
    scores = [h.score for h in out.entries]
    assert scores == sorted(scores, reverse=True)


def test_ties_keep_incoming_order():
    nb = NBestList((3,), [hyp([4], -1.0, -1.0), hyp([5], -1.0, -1.0), hyp([6], -1.0, -1.0)])
    out = rerank(nb, RerankWeights(lam=0.3))
    assert [h.tokens for h in out.entries] == [h.tokens for h in nb.entries]


def test_empty_list(caplog):
    out = rerank(NBestList((3,), []), RerankWeights())
    assert out.entries == [] and out.status == "empty"
    assert "empty" in caplog.text


def test_invalid_inputs():
    with pytest.raises(InputError):
        rerank(NBestList((3,), [hyp([4], -1, -1)]), RerankWeights(lam=1.5))
    with pytest.raises(InputError):
        rerank(NBestList((3,), [Hypothesis((4, 5), (-1.0, -1.0), bwd=-1.0)]), RerankWeights())
    with pytest.raises(InputError):
        rerank(NBestList((3,), [Hypothesis((4, EOS), (-1.0, -1.0))]), RerankWeights())


def test_backward_scores_batched_match_single():
    bwd = random_model(8, 4, 2, "backward", seed=3)
    lists = [NBestList((3, 4), [Hypothesis((5, EOS), (-1.0, -1.0)),
                                Hypothesis((6, 7, EOS), (-1.0, -1.0, -1.0))]),
             NBestList((7,), [Hypothesis((3, 3, 3, EOS), (-1.0,) * 4)])]
    scored = attach_backward_scores(lists, bwd, chunk=2)
    for nb, out in zip(lists, scored):
        for h, s in zip(nb.entries, out.entries):
            assert s.bwd == pytest.approx(backward_score(bwd, nb.source, h), abs=1e-12)
            assert s.bwd <= 0


def test_backward_memorisation():
    s_star, t_star = (3, 4, 5), (6, 7)
    pairs = [ConversationPair(s_star, t_star + (EOS,))]
    bwd, _ = train(pairs, "backward", TrainConfig(learning_rate=1.0, epochs=200, batch_size=1),
                   vocab_size=8, dim=8, depth=1)
    val = backward_score(bwd, s_star, Hypothesis(t_star + (EOS,), (0.0, 0.0, 0.0)))
    assert -0.05 < val <= 0


def test_rerank_scores_with_model():
    bwd = random_model(8, 4, 1, "backward", seed=4)
    nb = NBestList((3,), [Hypothesis((5, EOS), (-1.0, -1.0)), Hypothesis((6, EOS), (-1.5, -0.1))])
    out = rerank(nb, RerankWeights(lam=0.5), bwd)
    assert all(h.bwd is not None for h in out.entries)


def test_list_distinct2():
    nb = NBestList((3,), [hyp([4, 5], -1, -1), hyp([4, 5], -1, -1)])
    assert list_distinct2(nb) == 0.5
    assert list_distinct2(NBestList((3,), [])) == 0.0
