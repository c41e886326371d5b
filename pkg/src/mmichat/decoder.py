"""Greedy and beam-search decoding with baseline and anti-LM scoring.

Anti-LM scoring ranks a response by::

    log p(T|S) - lam * log U(T) + gamma_len * N_t

where ``log U(T)`` sums the language model's log-probabilities of the
first ``gamma_g`` response tokens only, and ``N_t`` excludes EOS.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as M
from .errors import InputError
from .nbest import Hypothesis, NBestList, sort_key

log = logging.getLogger(__name__)

MODES = ("baseline", "greedy", "anti_lm")


@dataclass
class DecodeConfig:
    beam_size: int = 20
    max_len: int = 20
    lam: float = 0.0
    gamma_g: int = 1
    gamma_len: float = 0.0
    mode: str = "baseline"
    # apply the length bonus while pruning, not only when ranking the final list
    length_in_search: bool = True
    # apply the LM penalty while pruning; off = prune by forward score alone
    antilm_in_search: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.beam_size < 1:
            problems.append("beam_size must be >= 1")
        if self.max_len < 1:
            problems.append("max_len must be >= 1")
        if self.lam < 0:
            problems.append("lambda must be >= 0")
        if not 0 <= self.gamma_g <= self.max_len:
            problems.append("gamma_g must lie in [0, max_len]")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {', '.join(MODES)}")
        return problems


def anti_lm_penalty(h: Hypothesis, gamma_g: int) -> float:
    """log U(T): LM log-probability of the first ``gamma_g`` response tokens."""
    if gamma_g <= 0:
        return 0.0
    if h.lm is None:
        raise InputError("anti-LM penalty needs LM log-probabilities on the hypothesis")
    return sum(h.lm[:min(gamma_g, h.length)])


def score(h: Hypothesis, cfg: DecodeConfig) -> float:
    fwd = h.fwd_logprob
    if cfg.mode != "anti_lm":
        return fwd
    return fwd - cfg.lam * anti_lm_penalty(h, cfg.gamma_g) + cfg.gamma_len * h.length


def _check_source(fwd: M.ModelParameters, source):
    source = tuple(int(t) for t in source)
    for t in source:
        if not 0 <= t < fwd.vocab_size:
            raise InputError(f"source token id {t} outside vocabulary")
    return source


def greedy_decode(fwd: M.ModelParameters, source, max_len: int = 20) -> Hypothesis:
    """Argmax token each step until EOS or ``max_len`` response tokens.

    The result is incomplete (no EOS) if the limit is hit first.
    """
    source = _check_source(fwd, source)
    state = M.initial_state(fwd, source)
    tokens, lps = [], []
    for _ in range(max_len + 1):
        logp = M.next_logprobs(fwd, state)[0]
        tok = int(np.argmax(logp))
        tokens.append(tok)
        lps.append(float(logp[tok]))
        if tok == M.EOS:
            break
        state = M.advance(fwd, state, [tok])
    h = Hypothesis(tuple(tokens), tuple(lps))
    return h.with_score(h.fwd_logprob)


def beam_search(fwd: M.ModelParameters, lm: M.ModelParameters | None, source,
                cfg: DecodeConfig, source_id: int = 0) -> NBestList:
    """Beam search with EOS harvesting.

    Each live hypothesis proposes its top ``beam_size`` next tokens.  Every
    proposal ending in EOS joins the N-best list; the best ``beam_size``
    unfinished proposals form the next beam, so the beam stays full while
    candidates last.  The finished list is rescored with :func:`score` and
    sorted.  ``greedy`` mode scores like ``baseline`` here; use
    :func:`greedy_decode` for width-one argmax decoding.
    """
    problems = cfg.validate()
    if problems:
        raise InputError("; ".join(problems))
    source = _check_source(fwd, source)
    anti = cfg.mode == "anti_lm"
    if anti and lm is None:
        raise InputError("anti_lm mode needs a language model")
    if anti and lm.vocab_size != fwd.vocab_size:
        raise InputError("language model vocabulary does not match the forward model")
    lam = cfg.lam if (anti and cfg.antilm_in_search) else 0.0
    bonus = cfg.gamma_len if (anti and cfg.length_in_search) else 0.0
    width = cfg.beam_size
    vocab = fwd.vocab_size
    not_eos = np.ones(vocab, dtype=bool)
    not_eos[M.EOS] = False

    state = M.initial_state(fwd, source)
    lm_state = M.zero_state(lm) if anti else None
    # live entries: (search score, tokens, fwd per-token, lm per-token)
    live = [(0.0, (), (), ())]
    finished: list[Hypothesis] = []
    for step in range(cfg.max_len + 1):
        logp = M.next_logprobs(fwd, state)
        lm_logp = M.next_logprobs(lm, lm_state) if anti else None
        pool = []
        for r, (base, toks, fl, ll) in enumerate(live):
            cand = base + logp[r]
            if lam and step < cfg.gamma_g:
                cand = cand - np.where(not_eos, lam * lm_logp[r], 0.0)
            if bonus:
                cand = cand + np.where(not_eos, bonus, 0.0)
            for tok in np.argsort(-cand, kind="stable")[:width]:
                tok = int(tok)
                pool.append((float(cand[tok]), toks + (tok,), r,
                             fl + (float(logp[r, tok]),),
                             ll + (float(lm_logp[r, tok]),) if anti else None))
        survivors = []
        for entry in pool:
            s, toks, r, fl, ll = entry
            if toks[-1] == M.EOS:
                finished.append(Hypothesis(toks, fl, ll if anti else None))
            else:
                survivors.append(entry)
        if step == cfg.max_len or not survivors:
            break
        survivors.sort(key=lambda e: (-e[0], e[1]))
        survivors = survivors[:width]
        rows = [e[2] for e in survivors]
        next_toks = [e[1][-1] for e in survivors]
        state = M.advance(fwd, state.select(rows), next_toks)
        if anti:
            lm_state = M.advance(lm, lm_state.select(rows), next_toks)
        live = [(e[0], e[1], e[3], e[4] if anti else ()) for e in survivors]

    entries = sorted((h.with_score(score(h, cfg)) for h in finished), key=sort_key)
    return NBestList(source, entries, source_id)


def decode_corpus(fwd: M.ModelParameters, lm: M.ModelParameters | None,
                  sources: Sequence, cfg: DecodeConfig, threads: int = 1) -> list[NBestList]:
    """Beam-search every source; output order matches input order."""
    fwd.fused_eager()
    if lm is not None:
        lm.fused_eager()
    jobs = list(enumerate(sources))
    if threads <= 1:
        return [beam_search(fwd, lm, s, cfg, i) for i, s in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: beam_search(fwd, lm, job[1], cfg, job[0]), jobs))


def attach_lm_scores(lists: Sequence[NBestList], lm: M.ModelParameters) -> list[NBestList]:
    """Fill per-token LM log-probs on every entry (needed for anti-LM rescoring)."""
    flat = [(k, h) for k, nb in enumerate(lists) for h in nb.entries]
    scored = []
    chunk = 512
    for i in range(0, len(flat), chunk):
        part = flat[i:i + chunk]
        scored.extend(M.score_batch(lm, [[]] * len(part), [h.tokens for _, h in part]))
    out = [NBestList(nb.source, [], nb.source_id, nb.status) for nb in lists]
    for (k, h), lp in zip(flat, scored):
        out[k].entries.append(Hypothesis(h.tokens, h.fwd, tuple(float(v) for v in lp),
                                         h.bwd, h.score))
    return out


def rescore(nb: NBestList, cfg: DecodeConfig) -> NBestList:
    """Re-rank a finished list under ``cfg``'s Score(T)."""
    entries = sorted((h.with_score(score(h, cfg)) for h in nb.entries), key=sort_key)
    return NBestList(nb.source, entries, nb.source_id, nb.status)
