import itertools

import numpy as np
import pytest

from mmichat import model as M
from mmichat.trainer import TrainConfig, init_params


def random_model(vocab, dim, depth, role="forward", seed=0, scale=0.5):
    """Random parameters; a wide init range gives peaked, tie-free distributions."""
    rng = np.random.default_rng(seed)
    return init_params(vocab, dim, depth, role, TrainConfig(init_range=scale), rng)


def all_targets(vocab, max_len):
    """Every EOS-terminated target with at most ``max_len`` content tokens."""
    content = [t for t in range(vocab) if t != M.EOS]
    for n in range(max_len + 1):
        for body in itertools.product(content, repeat=n):
            yield tuple(body) + (M.EOS,)


@pytest.fixture
def tiny_fwd():
    return random_model(5, 4, 2, "forward", seed=1, scale=1.0)


@pytest.fixture
def tiny_lm():
    return random_model(5, 4, 2, "lm", seed=2, scale=1.0)


def nll(params, sources, targets):
    return -sum(float(lp.sum()) for lp in M.score_batch(params, sources, targets))


def gradient_check(params, sources, targets, eps=1e-5):
    """Compare tape gradients with central differences for every parameter matrix.

    Returns ``(matrix_err, element_err)``.  ``matrix_err`` is the worst
    ||g - n|| / max(||g||, ||n||) over parameter matrices.  ``element_err``
    is the worst |g - n| / max(|g|, |n|) over single entries larger than
    1e-7, which near-zero entries can inflate through rounding in the
    difference quotient itself.
    """
    from mmichat.tensor import Tape

    tape = Tape()
    loss, _, _ = M.batch_nll(tape, params, sources, targets)
    grads = tape.backward(loss)
    matrix_err = element_err = 0.0
    arrays = [a.copy() for _, a in params.named_arrays()]
    for k, grad in enumerate(grads):
        num = np.zeros_like(grad)
        for idx in np.ndindex(grad.shape):
            vals = []
            for sign in (1.0, -1.0):
                trial = [a.copy() for a in arrays]
                trial[k][idx] += sign * eps
                vals.append(nll(params.replace_arrays(trial), sources, targets))
            num[idx] = (vals[0] - vals[1]) / (2 * eps)
        norm = max(np.linalg.norm(grad), np.linalg.norm(num))
        if norm > 0:
            matrix_err = max(matrix_err, float(np.linalg.norm(grad - num) / norm))
        scale = np.maximum(np.abs(grad), np.abs(num))
        live = scale > 1e-7
        if live.any():
            element_err = max(element_err, float((np.abs(grad - num)[live] / scale[live]).max()))
    return matrix_err, element_err


def enumerated_mass(params, source, max_len):
    """Probability of every terminated target of total length <= max_len, plus
    the mass of unterminated prefixes of length max_len (exhaustive)."""
    total = 0.0
    for tgt in all_targets(params.vocab_size, max_len - 1):
        total += np.exp(M.sequence_logprob(params, source, tgt)[0])
    residual = 0.0
    content = [t for t in range(params.vocab_size) if t != M.EOS]
    for body in itertools.product(content, repeat=max_len):
        state = M.initial_state(params, source)
        lp = 0.0
        for tok in body:
            lp += M.next_logprobs(params, state)[0, tok]
            state = M.advance(params, state, [tok])
        residual += np.exp(lp)
    return total + residual


def exhaustive_best(fwd, lm, source, cfg):
    """Argmax of Score(T) over every terminated target within ``cfg.max_len``."""
    from mmichat.decoder import score
    from mmichat.nbest import Hypothesis

    best = None
    for tgt in all_targets(fwd.vocab_size, cfg.max_len):
        per = M.sequence_logprob(fwd, source, tgt)[1]
        lm_per = tuple(float(v) for v in M.lm_logprob(lm, tgt)) if lm is not None else None
        h = Hypothesis(tgt, tuple(float(v) for v in per), lm_per)
        s = score(h, cfg)
        if best is None or s > best[0]:
            best = (s, tgt)
    return best


def mert_fixture(seed, n_lists=20):
    """Random N-best lists: 3 features per entry plus BLEU statistics."""
    from mmichat.metrics import segment_stats

    rng = np.random.default_rng(seed)
    words = ["a", "b", "c"]
    feats, stats = [], []
    for _ in range(n_lists):
        n = int(rng.integers(2, 9))
        ref = [words[i] for i in rng.integers(0, 3, size=int(rng.integers(4, 8)))]
        rows = []
        for _ in range(n):
            hyp = [words[i] for i in rng.integers(0, 3, size=int(rng.integers(4, 10)))]
            rows.append(segment_stats(hyp, [ref]))
        feats.append(rng.normal(size=(n, 3)))
        stats.append(np.array(rows))
    return feats, stats


def bleu_along(feats, stats, weights, direction, t):
    """BLEU of the per-list argmax at weights + t * direction (plain loop)."""
    from mmichat.metrics import bleu_from_stats

    w = np.asarray(weights) + t * np.asarray(direction)
    total = np.zeros(stats[0].shape[1])
    for f, s in zip(feats, stats):
        scores = f @ w
        total += s[int(np.argmax(scores))]
    return bleu_from_stats(total).bleu


def mert_vs_grid(seed, points=10 ** 4, bounds=(-2.0, 2.0)):
    """Run the exact line search and a dense grid on one random fixture.

    Returns (mert_t, mert_bleu, grid_best_bleu, near_ok): ``near_ok`` says a
    grid point within one cell of ``mert_t`` scores ``mert_bleu``, or the
    winning interval is narrower than a cell so the grid cannot sample it.
    """
    from mmichat.tuner import mert_line_search

    feats, stats = mert_fixture(seed)
    weights = np.array([1.0, 0.0, 0.0])
    direction = np.array([0.0, 1.0, 0.0])
    t, b = mert_line_search(feats, stats, weights, direction, bounds)
    grid = np.linspace(*bounds, points)
    cell = grid[1] - grid[0]
    vals = np.array([bleu_along(feats, stats, weights, direction, g) for g in grid])
    near = np.abs(grid - t) <= cell
    near_ok = bool(np.any(np.abs(vals[near] - b) < 1e-12)) or b > vals.max() + 1e-12
    return t, b, float(vals.max()), near_ok
