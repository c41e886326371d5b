"""Dev-set BLEU tuning of the MMI weights over fixed N-best lists.

Every candidate's score is linear in the feature weights, so a weight
vector is evaluated by taking each list's argmax and summing BLEU
sufficient statistics.  Two searches are offered: an exhaustive grid and
coordinate-wise exact line search (MERT).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import decoder as D
from .errors import InputError
from .metrics import bleu_from_stats, segment_stats
from .nbest import NBestList

log = logging.getLogger(__name__)

MAX_N = 4


@dataclass
class TuneSpec:
    mode: str = "bidi"                                   # "bidi" | "anti_lm"
    lam: tuple[float, float, int] = (0.0, 1.0, 11)       # (min, max, steps)
    gamma_len: tuple[float, float, int] = (0.0, 1.0, 5)
    gamma_g: tuple[int, ...] = (0, 1, 2, 3)
    method: str = "grid"                                 # "grid" | "mert"
    unit_forward: bool = False
    smooth: bool = False
    mert_rounds: int = 5

    def validate(self) -> list[str]:
        problems = []
        if self.mode not in ("bidi", "anti_lm"):
            problems.append("tune mode must be 'bidi' or 'anti_lm'")
        if self.method not in ("grid", "mert"):
            problems.append("tune method must be 'grid' or 'mert'")
        for name, (lo, hi, steps) in (("lambda", self.lam), ("gamma_len", self.gamma_len)):
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                problems.append(f"{name} range must be finite with min <= max")
            if steps < 2:
                problems.append(f"{name} range needs at least 2 steps")
        if self.mode == "bidi" and not self.unit_forward and not (0 <= self.lam[0] and self.lam[1] <= 1):
            problems.append("bidi lambda range must stay within [0, 1]")
        if self.mode == "anti_lm":
            if not self.gamma_g:
                problems.append("gamma_g grid is empty")
            if any(g < 0 for g in self.gamma_g):
                problems.append("gamma_g values must be >= 0")
        return problems


def grid_values(lo: float, hi: float, steps: int) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, steps)]


@dataclass
class TuneResult:
    weights: dict
    bleu: float
    trace: list[tuple[dict, float]] = field(default_factory=list)


# -- vectorised argmax-and-score ---------------------------------------------

class _Lists:
    """N-best lists flattened into parallel arrays."""

    def __init__(self, stats_per_list: Sequence[np.ndarray], empty_stats: np.ndarray):
        sizes = [len(s) for s in stats_per_list]
        self.nonempty = np.array([k for k, n in enumerate(sizes) if n > 0], dtype=np.intp)
        sizes = [n for n in sizes if n > 0]
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp) if sizes else np.zeros(0, np.intp)
        self.seg = np.repeat(np.arange(len(sizes)), sizes)
        self.n = int(sum(sizes))
        self.stats = (np.concatenate([s for s in stats_per_list if len(s)])
                      if self.n else np.zeros((0, 2 * MAX_N + 2)))
        self.empty_stats = empty_stats

    def argmax(self, scores: np.ndarray) -> np.ndarray:
        """Index of the first maximum in each list (earlier entries win ties)."""
        if self.n == 0:
            return np.zeros(0, dtype=np.intp)
        maxes = np.maximum.reduceat(scores, self.starts)
        pos = np.where(scores == maxes[self.seg], np.arange(self.n), self.n)
        return np.minimum.reduceat(pos, self.starts)

    def corpus_stats(self, scores: np.ndarray) -> np.ndarray:
        return self.stats[self.argmax(scores)].sum(axis=0) + self.empty_stats

    def bleu(self, scores: np.ndarray, smooth: bool) -> float:
        return bleu_from_stats(self.corpus_stats(scores), MAX_N, smooth).bleu


def _entry_stats(lists: Sequence[NBestList], references, vocab):
    if len(lists) != len(references):
        raise InputError(f"{len(lists)} N-best lists but {len(references)} reference sets")
    per_list = []
    empty = np.zeros(2 * MAX_N + 2)
    for nb, refs in zip(lists, references):
        refs = [r.split() if isinstance(r, str) else list(r) for r in refs]
        if not refs:
            raise InputError("each dev source needs at least one reference")
        rows = [segment_stats(vocab.decode(h.tokens), refs, MAX_N) for h in nb.entries]
        if rows:
            per_list.append(np.array(rows))
        else:
            per_list.append(np.zeros((0, 2 * MAX_N + 2)))
            empty += segment_stats([], refs, MAX_N)
    return per_list, empty


def _feature_arrays(lists: Sequence[NBestList], mode: str, max_g: int):
    entries = [h for nb in lists for h in nb.entries]
    fwd = np.array([h.fwd_logprob for h in entries])
    length = np.array([h.length for h in entries], dtype=np.float64)
    if mode == "bidi":
        if any(h.bwd is None for h in entries):
            raise InputError("bidi tuning needs backward scores on every entry")
        return fwd, np.array([h.bwd for h in entries]), length
    if any(h.lm is None for h in entries):
        raise InputError("anti-LM tuning needs LM scores on every entry")
    # prefix[:, g] = sum of LM log-probs over the first min(g, N_t) tokens
    prefix = np.zeros((len(entries), max_g + 1))
    for r, h in enumerate(entries):
        acc = 0.0
        for g in range(1, max_g + 1):
            if g <= h.length:
                acc += h.lm[g - 1]
            prefix[r, g] = acc
    return fwd, prefix, length


def _weights_dict(mode, lam, gamma_len, gamma_g=None):
    w = {"lambda": float(lam), "gamma_len": float(gamma_len)}
    if mode == "anti_lm":
        w["gamma_g"] = int(gamma_g)
    return w


def _select(trace):
    """Best BLEU; ties to smaller lambda, then gamma_len, then gamma_g."""
    return min(trace, key=lambda item: (-item[1], item[0]["lambda"], item[0]["gamma_len"],
                                        item[0].get("gamma_g", 0)))


def tune(lists: Sequence[NBestList], references: Sequence[Sequence], spec: TuneSpec,
         vocab) -> TuneResult:
    """Pick weights maximising dev BLEU of each list's top entry.

    ``references[i]`` holds the reference strings (or token lists) for
    ``lists[i]``.  The full (weights, BLEU) trace is returned in
    evaluation order.
    """
    problems = spec.validate()
    if problems:
        raise InputError("; ".join(problems))
    if not lists:
        raise InputError("cannot tune on an empty dev set")
    per_list, empty = _entry_stats(lists, references, vocab)
    flat = _Lists(per_list, empty)
    gammas_g = sorted(set(spec.gamma_g)) if spec.mode == "anti_lm" else [None]
    fwd, second, length = _feature_arrays(lists, spec.mode, max(g or 0 for g in gammas_g))

    def scores(lam, gl, g):
        if spec.mode == "bidi":
            fw = 1.0 if spec.unit_forward else 1.0 - lam
            return fw * fwd + lam * second + gl * length
        return fwd - lam * second[:, g] + gl * length

    trace = []
    for g in gammas_g:
        for lam in grid_values(*spec.lam):
            for gl in grid_values(*spec.gamma_len):
                b = flat.bleu(scores(lam, gl, g), spec.smooth)
                trace.append((_weights_dict(spec.mode, lam, gl, g), b))
    best_w, best_b = _select(trace)

    if spec.method == "mert":
        feats = _stack_features(spec.mode, fwd, second, length)
        for g in gammas_g:
            start = min((t for t in trace if t[0].get("gamma_g") == g),
                        key=lambda t: (-t[1], t[0]["lambda"], t[0]["gamma_len"]))
            lam, gl = start[0]["lambda"], start[0]["gamma_len"]
            cur = start[1]
            for _ in range(spec.mert_rounds):
                improved = False
                for axis in ("lambda", "gamma_len"):
                    w = _feature_weights(spec, lam, gl)
                    direction = _direction(spec, axis)
                    lo, hi = spec.lam[:2] if axis == "lambda" else spec.gamma_len[:2]
                    at = lam if axis == "lambda" else gl
                    f = feats if spec.mode == "bidi" else feats[g]
                    t, b = _line_search_flat(flat, f, w, direction, (lo - at, hi - at), spec.smooth)
                    if b > cur:
                        cur, improved = b, True
                        if axis == "lambda":
                            lam = at + t
                        else:
                            gl = at + t
                    trace.append((_weights_dict(spec.mode, lam, gl, g), cur))
                if not improved:
                    break
        best_w, best_b = _select(trace)

    log.info("tuned %s weights %s -> BLEU %.4f", spec.mode, best_w, best_b)
    return TuneResult(best_w, best_b, trace)


def _stack_features(mode, fwd, second, length):
    if mode == "bidi":
        return np.stack([fwd, second, length], axis=1)
    return {g: np.stack([fwd, second[:, g], length], axis=1) for g in range(second.shape[1])}


def _feature_weights(spec, lam, gl):
    if spec.mode == "bidi":
        fw = 1.0 if spec.unit_forward else 1.0 - lam
        return np.array([fw, lam, gl])
    return np.array([1.0, -lam, gl])


def _direction(spec, axis):
    if axis == "gamma_len":
        return np.array([0.0, 0.0, 1.0])
    if spec.mode == "bidi":
        return np.array([0.0 if spec.unit_forward else -1.0, 1.0, 0.0])
    return np.array([0.0, -1.0, 0.0])


# -- exact line search ---------------------------------------------------------

def upper_envelope(a: np.ndarray, b: np.ndarray, lo: float, hi: float) -> list[float]:
    """Points in (lo, hi) where the argmax of ``a + t*b`` changes."""
    t = lo
    vals = a + t * b
    cur = int(np.flatnonzero(vals == vals.max())[np.argmax(b[vals == vals.max()])])
    points = []
    while True:
        steeper = np.flatnonzero(b > b[cur])
        if steeper.size == 0:
            break
        cross = (a[cur] - a[steeper]) / (b[steeper] - b[cur])
        ahead = cross > t
        # lines already tied at t with a larger slope take over immediately
        if not ahead.any():
            break
        nxt_t = cross[ahead].min()
        if nxt_t >= hi:
            break
        cands = steeper[ahead][cross[ahead] == nxt_t]
        cur = int(cands[np.argmax(b[cands])])
        t = float(nxt_t)
        points.append(t)
    return points


def _line_search_flat(flat: _Lists, feats: np.ndarray, weights: np.ndarray,
                      direction: np.ndarray, bounds: tuple[float, float], smooth: bool):
    a = feats @ weights
    b = feats @ direction
    lo, hi = bounds
    points = set()
    for k, start in enumerate(flat.starts):
        stop = flat.starts[k + 1] if k + 1 < len(flat.starts) else flat.n
        for p in upper_envelope(a[start:stop], b[start:stop], lo, hi):
            points.add(p)
    edges = [lo] + sorted(points) + [hi]
    best_t, best_b = 0.0, flat.bleu(a, smooth) if lo <= 0.0 <= hi else -1.0
    for left, right in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (left + right)
        bl = flat.bleu(a + mid * b, smooth)
        if bl > best_b:
            best_t, best_b = mid, bl
    return best_t, best_b


def mert_line_search(features: Sequence[np.ndarray], stats: Sequence[np.ndarray],
                     weights, direction, bounds: tuple[float, float],
                     smooth: bool = False) -> tuple[float, float]:
    """Exact line search along ``weights + t * direction`` for t in ``bounds``.

    ``features[i]`` is the (n_i x k) feature matrix of list ``i`` and
    ``stats[i]`` its (n_i x 10) BLEU statistics.  Returns the midpoint of
    the best interval between argmax breakpoints and its BLEU; t = 0 is
    kept when nothing beats the current weights.
    """
    flat = _Lists([np.asarray(s) for s in stats], np.zeros(2 * MAX_N + 2))
    feats = np.concatenate([np.asarray(f, dtype=np.float64) for f in features if len(f)])
    return _line_search_flat(flat, feats, np.asarray(weights, float),
                             np.asarray(direction, float), bounds, smooth)


def tune_exact(fwd, lm, sources, references, spec: TuneSpec, vocab,
               base: D.DecodeConfig) -> TuneResult:
    """Anti-LM grid search that re-runs beam search at every grid point.

    Slow; meant for validating the fixed-list approximation on tiny sets.
    """
    if spec.mode != "anti_lm":
        raise InputError("exact re-decoding applies to anti_lm tuning only")
    if not sources:
        raise InputError("cannot tune on an empty dev set")
    trace = []
    for g, lam, gl in itertools.product(sorted(set(spec.gamma_g)), grid_values(*spec.lam),
                                        grid_values(*spec.gamma_len)):
        cfg = D.DecodeConfig(beam_size=base.beam_size, max_len=base.max_len, lam=lam,
                             gamma_g=g, gamma_len=gl, mode="anti_lm",
                             length_in_search=base.length_in_search,
                             antilm_in_search=base.antilm_in_search)
        tops = [D.beam_search(fwd, lm, s, cfg).top for s in sources]
        hyps = [vocab.decode(t.tokens) if t else [] for t in tops]
        stats = np.array([segment_stats(h, [r.split() if isinstance(r, str) else r for r in refs])
                          for h, refs in zip(hyps, references)])
        trace.append((_weights_dict("anti_lm", lam, gl, g),
                      bleu_from_stats(stats, MAX_N, spec.smooth).bleu))
    best_w, best_b = _select(trace)
    return TuneResult(best_w, best_b, trace)


def write_trace(path, result: TuneResult) -> None:
    keys = list(result.trace[0][0]) if result.trace else ["lambda", "gamma_len"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys + ["bleu"]) + "\n")
        for w, b in result.trace:
            fh.write("\t".join(repr(w[k]) for k in keys) + f"\t{b!r}\n")
        fh.write("# selected\t" + "\t".join(f"{k}={result.weights[k]!r}" for k in keys)
                 + f"\tbleu={result.bleu!r}\n")
