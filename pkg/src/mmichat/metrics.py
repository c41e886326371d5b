"""Corpus BLEU (single or multi-reference) and distinct-n diversity."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError

EXCLUDED = frozenset({"<pad>", "</s>"})


def _clean(tokens):
    if isinstance(tokens, str):
        tokens = tokens.split()
    return [t for t in tokens if t not in EXCLUDED]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def segment_stats(hyp, refs, max_n: int = 4) -> np.ndarray:
    """Sufficient statistics of one segment.

    Layout: ``[match_1, total_1, ..., match_N, total_N, hyp_len, ref_len]``
    with ``ref_len`` the reference length closest to the hypothesis (the
    shorter one on ties).  Summing rows gives the corpus statistics.
    """
    hyp = _clean(hyp)
    refs = [_clean(r) for r in refs]
    if not refs:
        raise InputError("each hypothesis needs at least one reference")
    out = np.zeros(2 * max_n + 2)
    for n in range(1, max_n + 1):
        counts = ngrams(hyp, n)
        best: Counter = Counter()
        for ref in refs:
            for gram, c in ngrams(ref, n).items():
                if c > best[gram]:
                    best[gram] = c
        out[2 * n - 2] = sum(min(c, best[g]) for g, c in counts.items())
        out[2 * n - 1] = max(len(hyp) - n + 1, 0)
    c = len(hyp)
    out[-2] = c
    out[-1] = min((len(r) for r in refs), key=lambda r: (abs(r - c), r))
    return out


@dataclass
class BleuScore:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)


def bleu_from_stats(stats: np.ndarray, max_n: int = 4, smooth: bool = False) -> BleuScore:
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim == 2:
        stats = stats.sum(axis=0)
    matches = stats[0:2 * max_n:2]
    totals = stats[1:2 * max_n:2]
    c, r = stats[-2], stats[-1]
    precisions = []
    for m, t in zip(matches, totals):
        if smooth:
            precisions.append((m + 1.0) / (t + 1.0))
        else:
            precisions.append(m / t if t > 0 else 0.0)
    if c == 0:
        bp = 0.0
    else:
        bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if min(precisions) <= 0.0:
        value = 0.0
    else:
        value = bp * math.exp(math.fsum(math.log(p) for p in precisions) / max_n)
    return BleuScore(value, precisions, bp, int(c), int(r),
                     [int(m) for m in matches], [int(t) for t in totals])


def bleu(hypotheses: Sequence, references: Sequence[Sequence], max_n: int = 4,
         smooth: bool = False) -> BleuScore:
    """Corpus BLEU.

    ``references[i]`` lists the references of hypothesis ``i`` (strings or
    token lists).  Unsmoothed by default; ``smooth=True`` adds one to every
    n-gram match and total count.
    """
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    if not hypotheses:
        raise InputError("BLEU of an empty corpus")
    stats = np.array([segment_stats(h, refs, max_n) for h, refs in zip(hypotheses, references)])
    return bleu_from_stats(stats, max_n, smooth)


def distinct_counts(responses: Sequence, n: int, denominator: str = "ngrams") -> tuple[int, int]:
    if n not in (1, 2):
        raise InputError("distinct-n is defined for n = 1 or 2")
    if denominator not in ("ngrams", "tokens"):
        raise InputError("denominator must be 'ngrams' or 'tokens'")
    if len(responses) == 0:
        raise InputError("distinct-n of an empty response set")
    unique: set = set()
    total = 0
    for resp in responses:
        toks = _clean(resp)
        grams = [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]
        unique.update(grams)
        total += len(grams) if denominator == "ngrams" else len(toks)
    return len(unique), total


def distinct_n(responses: Sequence, n: int, denominator: str = "ngrams") -> float:
    """Unique n-grams across all responses over the total n-gram count.

    ``denominator="tokens"`` divides by the unigram token count instead
    (the two coincide for n = 1).
    """
    uniq, total = distinct_counts(responses, n, denominator)
    return uniq / total if total else 0.0


@dataclass
class EvalReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    distinct_1: float
    distinct_2: float
    hyp_tokens: int
    ref_tokens: int
    distinct_1_counts: tuple[int, int]
    distinct_2_counts: tuple[int, int]
    segments: int
    smooth: bool = False
    extra: dict = field(default_factory=dict)

    def as_pairs(self) -> list[tuple[str, str]]:
        rows = [("bleu", f"{self.bleu:.6f}")]
        rows += [(f"p{n}", f"{p:.6f}") for n, p in enumerate(self.precisions, 1)]
        rows += [
            ("brevity_penalty", f"{self.brevity_penalty:.6f}"),
            ("distinct_1", f"{self.distinct_1:.6f}"),
            ("distinct_2", f"{self.distinct_2:.6f}"),
            ("distinct_1_counts", "%d/%d" % self.distinct_1_counts),
            ("distinct_2_counts", "%d/%d" % self.distinct_2_counts),
            ("hyp_tokens", str(self.hyp_tokens)),
            ("ref_tokens", str(self.ref_tokens)),
            ("segments", str(self.segments)),
            ("smoothed", "yes" if self.smooth else "no"),
        ]
        rows += [(k, v if isinstance(v, str) else f"{v:.6f}") for k, v in sorted(self.extra.items())]
        return rows

    def to_keyvalue(self) -> str:
        return "".join(f"{k}:{v}\n" for k, v in self.as_pairs())

    def to_text(self) -> str:
        ps = " / ".join(f"{100 * p:.1f}" for p in self.precisions)
        lines = [
            f"BLEU       {100 * self.bleu:.2f}  ({ps}, BP={self.brevity_penalty:.3f}, "
            f"hyp_len={self.hyp_tokens}, ref_len={self.ref_tokens})",
            f"distinct-1 {self.distinct_1:.4f}  ({self.distinct_1_counts[0]}/{self.distinct_1_counts[1]})",
            f"distinct-2 {self.distinct_2:.4f}  ({self.distinct_2_counts[0]}/{self.distinct_2_counts[1]})",
        ]
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k:<10} {v if isinstance(v, str) else f'{v:.4f}'}")
        return "\n".join(lines) + "\n"


def evaluate(hypotheses: Sequence, references: Sequence[Sequence], smooth: bool = False,
             distinct_denominator: str = "ngrams") -> EvalReport:
    b = bleu(hypotheses, references, smooth=smooth)
    d1 = distinct_counts(hypotheses, 1, distinct_denominator)
    d2 = distinct_counts(hypotheses, 2, distinct_denominator)
    return EvalReport(
        bleu=b.bleu, precisions=b.precisions, brevity_penalty=b.brevity_penalty,
        distinct_1=d1[0] / d1[1] if d1[1] else 0.0,
        distinct_2=d2[0] / d2[1] if d2[1] else 0.0,
        hyp_tokens=b.hyp_len, ref_tokens=b.ref_len,
        distinct_1_counts=d1, distinct_2_counts=d2,
        segments=len(hypotheses), smooth=smooth,
    )
