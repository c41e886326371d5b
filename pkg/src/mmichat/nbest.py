"""Hypotheses, N-best lists and their tab-separated file format.

File layout: a ``#``-prefixed header naming the columns, then one row per
hypothesis::

    source_id rank hypothesis fwd_logprob lm_logprob length score [bwd_logprob]
    fwd_tokens lm_tokens

``lm_logprob`` is ``NA`` when no language model scored the entry.  The two
trailing columns hold comma-separated per-token values so a list survives a
round trip exactly (floats are written with ``repr``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .errors import InputError
from .model import EOS

NA = "NA"
BASE_COLUMNS = ["source_id", "rank", "hypothesis", "fwd_logprob", "lm_logprob", "length", "score"]
TAIL_COLUMNS = ["fwd_tokens", "lm_tokens"]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    fwd: tuple[float, ...]
    lm: tuple[float, ...] | None = None
    bwd: float | None = None
    score: float = 0.0

    def __post_init__(self):
        if len(self.fwd) != len(self.tokens):
            raise InputError("forward log-probs must align with tokens")
        if self.lm is not None and len(self.lm) != len(self.tokens):
            raise InputError("LM log-probs must align with tokens")

    @property
    def complete(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    @property
    def length(self) -> int:
        """Response length N_t, not counting the terminating EOS."""
        return len(self.tokens) - (1 if self.complete else 0)

    @property
    def fwd_logprob(self) -> float:
        return sum(self.fwd)

    @property
    def lm_logprob(self) -> float | None:
        return None if self.lm is None else sum(self.lm)

    def with_score(self, score: float) -> "Hypothesis":
        return replace(self, score=score)


@dataclass
class NBestList:
    source: tuple[int, ...]
    entries: list[Hypothesis] = field(default_factory=list)
    source_id: int = 0
    status: str = "ok"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def top(self) -> Hypothesis | None:
        return self.entries[0] if self.entries else None


def sort_key(h: Hypothesis):
    """Descending score; ties go to the lexicographically smaller token ids."""
    return (-h.score, h.tokens)


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_nbest(path, lists: Iterable[NBestList], vocab) -> None:
    lists = list(lists)
    with_bwd = any(h.bwd is not None for nb in lists for h in nb)
    cols = BASE_COLUMNS + (["bwd_logprob"] if with_bwd else []) + TAIL_COLUMNS
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("#" + "\t".join(cols) + "\n")
        for nb in lists:
            for rank, h in enumerate(nb.entries, 1):
                row = [
                    str(nb.source_id), str(rank), vocab.detokenize(h.tokens),
                    repr(h.fwd_logprob),
                    NA if h.lm is None else repr(h.lm_logprob),
                    str(h.length), repr(h.score),
                ]
                if with_bwd:
                    row.append(NA if h.bwd is None else repr(h.bwd))
                row.append(_floats(h.fwd))
                row.append(NA if h.lm is None else _floats(h.lm))
                fh.write("\t".join(row) + "\n")


def read_nbest(path, vocab, sources: list | None = None) -> list[NBestList]:
    """Read lists back; ``sources`` (token ids per source id) fills ``NBestList.source``.

    Source ids with no rows at all (nothing terminated) come back as empty
    lists when ``sources`` is given.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("#"):
        raise InputError(f"{path}: missing N-best header")
    cols = lines[0][1:].split("\t")
    missing = [c for c in BASE_COLUMNS if c not in cols]
    if missing:
        raise InputError(f"{path}: N-best header lacks {missing}")
    at = {c: i for i, c in enumerate(cols)}
    by_id: dict[int, list[Hypothesis]] = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        f = line.split("\t")
        if len(f) != len(cols):
            raise InputError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(f)}")
        words = f[at["hypothesis"]].split()
        tokens = tuple(vocab.encode(words)) + (EOS,)
        if "fwd_tokens" in at:
            fwd = tuple(float(x) for x in f[at["fwd_tokens"]].split(","))
        else:
            raise InputError(f"{path}: per-token forward scores are required")
        lm = None
        if "lm_tokens" in at and f[at["lm_tokens"]] != NA:
            lm = tuple(float(x) for x in f[at["lm_tokens"]].split(","))
        bwd = None
        if "bwd_logprob" in at and f[at["bwd_logprob"]] != NA:
            bwd = float(f[at["bwd_logprob"]])
        h = Hypothesis(tokens, fwd, lm, bwd, float(f[at["score"]]))
        by_id.setdefault(int(f[at["source_id"]]), []).append(h)
    ids = range(len(sources)) if sources is not None else sorted(by_id)
    out = []
    for sid in ids:
        src = tuple(sources[sid]) if sources is not None else ()
        out.append(NBestList(src, by_id.get(sid, []), sid))
    return out
