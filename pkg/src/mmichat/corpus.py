"""Vocabulary, pair files, direction swapping and the generic-trap generator."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import CorpusError, InputError
from .model import EOS, UNK

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "</s>", "<unk>")


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    if lowercase:
        text = text.lower()
    return text.split()


class Vocabulary:
    """Token <-> id map.  Ids 0-2 are PAD, EOS and UNK."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise InputError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_eos and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:3]) != RESERVED:
            raise CorpusError(f"{path}: first three lines must be {' '.join(RESERVED)}")
        return cls(lines[3:])


def build_vocab(lines: Iterable[str], min_count: int = 2, max_size: int | None = None,
                lowercase: bool = True) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``lines`` may be raw sentences or tab-separated pair lines (both sides
    are counted).  ``max_size`` caps the total including reserved ids.
    """
    counts: Counter[str] = Counter()
    seen = False
    for line in lines:
        seen = True
        counts.update(tokenize(line.replace("\t", " "), lowercase))
    if not seen or not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max(0, max_size - len(RESERVED))]
    return Vocabulary(ranked)


@dataclass(frozen=True)
class ConversationPair:
    """``source`` is context+message; ``target`` ends with EOS."""

    source: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class LoadStats:
    lines: int = 0
    malformed: int = 0
    filtered: int = 0
    warnings: list[str] = field(default_factory=list)


def parse_pair_line(line: str, vocab: Vocabulary, lowercase: bool = True):
    """Parse ``source<TAB>target``; returns None for malformed lines."""
    line = line.rstrip("\n").rstrip("\r")
    parts = line.split("\t")
    if len(parts) != 2:
        return None
    src, tgt = (tokenize(p, lowercase) for p in parts)
    if not src or not tgt:
        return None
    return ConversationPair(tuple(vocab.encode(src)), tuple(vocab.encode(tgt)) + (EOS,))


def iter_pairs(path, vocab: Vocabulary, stats: LoadStats | None = None,
               lowercase: bool = True, length_range: tuple[int, int] | None = None
               ) -> Iterator[ConversationPair]:
    """Stream pairs from a TSV file, skipping (and counting) malformed lines."""
    stats = stats if stats is not None else LoadStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            stats.lines += 1
            pair = parse_pair_line(line, vocab, lowercase)
            if pair is None:
                stats.malformed += 1
                msg = f"{path}:{lineno}: malformed pair line skipped"
                stats.warnings.append(msg)
                log.warning(msg)
                continue
            if length_range is not None:
                lo, hi = length_range
                if not (lo <= len(pair.source) <= hi and lo <= len(pair.target) - 1 <= hi):
                    stats.filtered += 1
                    continue
            yield pair


def load_pairs(path, vocab: Vocabulary, lowercase: bool = True,
               length_range: tuple[int, int] | None = None,
               stats: LoadStats | None = None) -> list[ConversationPair]:
    stats = stats if stats is not None else LoadStats()
    pairs = list(iter_pairs(path, vocab, stats, lowercase, length_range))
    if stats.lines and stats.malformed * 2 > stats.lines:
        raise CorpusError(f"{path}: {stats.malformed} of {stats.lines} lines malformed")
    return pairs


def swap_direction(pairs: Iterable[ConversationPair]) -> list[ConversationPair]:
    """(S, T+EOS) -> (T, S+EOS), preserving order."""
    out = []
    for p in pairs:
        tgt = p.target[:-1] if p.target and p.target[-1] == EOS else p.target
        out.append(ConversationPair(tuple(tgt), tuple(p.source) + (EOS,)))
    return out


def lm_view(pairs: Iterable[ConversationPair]) -> list[ConversationPair]:
    """Drop sources; the LM sees targets only."""
    return [ConversationPair((), p.target) for p in pairs]


def write_pairs(path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in rows:
            fh.write(f"{src}\t{tgt}\n")


def write_encoded(path, pairs: Iterable[ConversationPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(" ".join(map(str, p.source)) + "\t" + " ".join(map(str, p.target)) + "\n")


def read_encoded(path) -> list[ConversationPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            src, tgt = line.rstrip("\n").split("\t")
            pairs.append(ConversationPair(tuple(int(t) for t in src.split()),
                                          tuple(int(t) for t in tgt.split())))
    return pairs


# -- synthetic generic-trap corpus --------------------------------------------

GENERIC_RESPONSE = ("i", "do", "n't", "know", ".")


@dataclass
class TrapExample:
    source: str
    reference: str
    topic: int


@dataclass
class GenericTrap:
    """A generated corpus where one bland reply is the likeliest answer.

    Every topic owns a few source words and a few contentful reply
    variants.  The generic reply follows sources of every topic at
    ``generic_rate``; each contentful variant gets a smaller share, so
    maximum-likelihood decoding prefers the bland reply.
    """

    train: list[tuple[str, str]]
    valid: list[tuple[str, str]]
    dev: list[TrapExample]
    test: list[TrapExample]
    topic_sources: list[list[str]]
    topic_responses: list[list[tuple[str, ...]]]
    generic: tuple[str, ...] = GENERIC_RESPONSE

    def specific_tokens(self, topic: int) -> set[str]:
        return {tok for resp in self.topic_responses[topic] for tok in resp}

    @property
    def specificity_map(self) -> dict[str, set[str]]:
        """Held-out source text -> tokens of its topic's contentful replies."""
        out = {}
        for ex in self.dev + self.test:
            out[ex.source] = self.specific_tokens(ex.topic)
        return out

    def specificity(self, topic: int, response: str) -> float:
        """Fraction of response tokens drawn from the topic's own replies."""
        toks = response.split()
        if not toks:
            return 0.0
        own = self.specific_tokens(topic)
        return sum(t in own for t in toks) / len(toks)

    def is_generic(self, response: str) -> bool:
        return tuple(response.split()) == self.generic


def generate_generic_trap(seed: int, n_topics: int = 20, n_pairs: int = 5000,
                          generic_rate: float = 0.4, n_variants: int = 3,
                          source_words: int = 6, response_words: int = 6,
                          source_len: tuple[int, int] = (3, 5),
                          response_len: tuple[int, int] = (4, 6),
                          n_valid: int = 0, n_dev: int = 100, n_test: int = 200) -> GenericTrap:
    if n_topics < 2:
        raise InputError("generic trap needs at least two topics")
    if not 0.0 <= generic_rate < 1.0:
        raise InputError("generic_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    topic_sources = [[f"s{t}_{k}" for k in range(source_words)] for t in range(n_topics)]
    topic_responses = []
    for t in range(n_topics):
        words = [f"r{t}_{k}" for k in range(response_words)]
        variants: list[tuple[str, ...]] = []
        while len(variants) < n_variants:
            length = int(rng.integers(response_len[0], response_len[1] + 1))
            cand = tuple(words[int(i)] for i in rng.choice(len(words), size=length, replace=False))
            if cand not in variants:
                variants.append(cand)
        topic_responses.append(variants)

    def make_source(t):
        length = int(rng.integers(source_len[0], source_len[1] + 1))
        return " ".join(topic_sources[t][int(i)] for i in rng.integers(0, source_words, size=length))

    def sample_pairs(n):
        out = []
        for _ in range(n):
            t = int(rng.integers(n_topics))
            src = make_source(t)
            if rng.random() < generic_rate:
                tgt = GENERIC_RESPONSE
            else:
                tgt = topic_responses[t][int(rng.integers(n_variants))]
            out.append((src, " ".join(tgt)))
        return out

    train = sample_pairs(n_pairs)
    valid = sample_pairs(n_valid)

    def heldout(n):
        out = []
        for _ in range(n):
            t = int(rng.integers(n_topics))
            ref = topic_responses[t][int(rng.integers(n_variants))]
            out.append(TrapExample(make_source(t), " ".join(ref), t))
        return out

    dev = heldout(n_dev)
    test = heldout(n_test)
    return GenericTrap(train, valid, dev, test, topic_sources, topic_responses)
