"""Bidirectional N-best reranking with a backward model p(S|T)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

from . import model as M
from .errors import InputError
from .metrics import distinct_n
from .nbest import Hypothesis, NBestList

log = logging.getLogger(__name__)


@dataclass
class RerankWeights:
    lam: float = 0.5
    gamma_len: float = 0.0
    # False: (1 - lam) * fwd + lam * bwd.  True: fwd + lam * bwd.
    unit_forward: bool = False

    def validate(self) -> list[str]:
        if not self.unit_forward and not 0.0 <= self.lam <= 1.0:
            return ["rerank lambda must lie in [0, 1]"]
        return []


def _backward_pair(source, hyp: Hypothesis):
    if not hyp.complete:
        raise InputError("backward scoring needs a complete (EOS-terminated) hypothesis")
    return list(hyp.tokens[:-1]), list(source) + [M.EOS]


def backward_score(bwd: M.ModelParameters, source, hyp: Hypothesis) -> float:
    """log p(S|T): the hypothesis is the backward model's input, S+EOS its target."""
    src, tgt = _backward_pair(source, hyp)
    return M.sequence_logprob(bwd, src, tgt)[0]


def attach_backward_scores(lists: Sequence[NBestList], bwd: M.ModelParameters,
                           chunk: int = 512) -> list[NBestList]:
    """Batched :func:`backward_score` over every entry of every list."""
    flat = []
    for k, nb in enumerate(lists):
        for h in nb.entries:
            flat.append((k, h, *_backward_pair(nb.source, h)))
    for _, _, src, tgt in flat:
        for t in src + tgt:
            if not 0 <= t < bwd.vocab_size:
                raise InputError(f"token id {t} outside the backward model's vocabulary")
    scores = []
    for i in range(0, len(flat), chunk):
        part = flat[i:i + chunk]
        scores.extend(float(lp.sum()) for lp in
                      M.score_batch(bwd, [p[2] for p in part], [p[3] for p in part]))
    out = [NBestList(nb.source, [], nb.source_id, nb.status) for nb in lists]
    for (k, h, _, _), s in zip(flat, scores):
        out[k].entries.append(replace(h, bwd=s))
    return out


def bidi_score(h: Hypothesis, w: RerankWeights) -> float:
    fwd_weight = 1.0 if w.unit_forward else 1.0 - w.lam
    return fwd_weight * h.fwd_logprob + w.lam * h.bwd + w.gamma_len * h.length


def rerank(nbest: NBestList, w: RerankWeights, bwd: M.ModelParameters | None = None) -> NBestList:
    """Re-sort a list by the bidirectional score.

    Entries lacking a backward score are scored with ``bwd``.  Ties keep
    their incoming order.  An empty list comes back empty with status
    ``"empty"``.
    """
    problems = w.validate()
    if problems:
        raise InputError("; ".join(problems))
    if not nbest.entries:
        log.warning("source %d: empty N-best list, nothing to rerank", nbest.source_id)
        return NBestList(nbest.source, [], nbest.source_id, "empty")
    for h in nbest.entries:
        if not h.complete:
            raise InputError("rerank expects complete hypotheses")
    if any(h.bwd is None for h in nbest.entries):
        if bwd is None:
            raise InputError("entries lack backward scores and no backward model was given")
        nbest = attach_backward_scores([nbest], bwd)[0]
    scored = [replace(h, score=bidi_score(h, w)) for h in nbest.entries]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].score, i))
    return NBestList(nbest.source, [scored[i] for i in order], nbest.source_id, nbest.status)


def list_distinct2(nbest: NBestList) -> float:
    """distinct-2 of a list's own entries; flags degenerate N-best lists."""
    if not nbest.entries:
        return 0.0
    return distinct_n([[str(t) for t in h.tokens[:-1]] for h in nbest.entries], 2)
