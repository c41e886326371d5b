"""Maximum-likelihood training with plain mini-batch SGD and norm clipping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .corpus import ConversationPair, lm_view, swap_direction
from .errors import InputError, TrainingDiverged
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    init_range: float = 0.08
    learning_rate: float = 0.1
    batch_size: int = 16
    clip_norm: float = 1.0
    epochs: int = 10
    seed: int = 0
    patience: int = 3
    # "sequence": summed token NLL averaged over sequences in the batch;
    # "token": averaged over tokens.  The reported NLL is always per token.
    loss_scale: str = "sequence"

    def validate(self) -> list[str]:
        problems = []
        if not self.init_range > 0:
            problems.append("init_range must be > 0")
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if not self.clip_norm > 0:
            problems.append("clip_norm must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.loss_scale not in ("sequence", "token"):
            problems.append("loss_scale must be 'sequence' or 'token'")
        return problems


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    dev_nll: float | None
    tokens_per_sec: float


@dataclass
class TrainReport:
    role: str
    initial_nll: float
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    @property
    def final_nll(self) -> float:
        return self.epochs[-1].train_nll if self.epochs else self.initial_nll


def init_params(vocab_size: int, dim: int, depth: int, role: str,
                config: TrainConfig, rng: np.random.Generator) -> M.ModelParameters:
    """Every weight and bias i.i.d. uniform on [-init_range, init_range]."""
    r = config.init_range

    def u(*shape):
        return rng.uniform(-r, r, size=shape)

    def layer():
        ws = {f"w_{g}": u(dim, 2 * dim) for g in M.GATES}
        bs = {f"b_{g}": u(1, dim) for g in M.GATES}
        return M.LstmLayer(**ws, **bs)

    n_enc = 0 if role == "lm" else depth
    embedding = u(vocab_size, dim)
    encoder = [layer() for _ in range(n_enc)]
    decoder = [layer() for _ in range(depth)]
    return M.ModelParameters(vocab_size, dim, depth, role, embedding, encoder, decoder,
                             u(dim, vocab_size), u(1, vocab_size))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    """Rescale all gradients together when their joint L2 norm exceeds ``clip_norm``."""
    if not clip_norm > 0:
        raise InputError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return [g * scale for g in grads]
    return list(grads)


def role_pairs(pairs: Sequence[ConversationPair], role: str) -> list[ConversationPair]:
    if role == "forward":
        return list(pairs)
    if role == "backward":
        return swap_direction(pairs)
    if role == "lm":
        return lm_view(pairs)
    raise InputError(f"unknown role {role!r}")


def batch_schedule(pairs: Sequence[ConversationPair], batch_size: int,
                   rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed batches in shuffled order.

    Bucketing uses len(S) + len(T), which swapping directions leaves
    unchanged, so forward and backward runs see the same pair order.
    """
    n = len(pairs)
    jitter = rng.permutation(n)
    keys = [len(p.source) + len(p.target) - (p.target[-1:] == (M.EOS,)) for p in pairs]
    order = sorted(range(n), key=lambda i: (keys[i], jitter[i]))
    batches = [order[k:k + batch_size] for k in range(0, n, batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def corpus_nll(params: M.ModelParameters, pairs: Sequence[ConversationPair],
               chunk: int = 256) -> float:
    """Mean per-token negative log-likelihood (EOS predictions included)."""
    total, count = 0.0, 0
    for k in range(0, len(pairs), chunk):
        part = pairs[k:k + chunk]
        for lp in M.score_batch(params, [p.source for p in part], [p.target for p in part]):
            total -= float(lp.sum())
            count += len(lp)
    return total / max(count, 1)


def sgd_step(params: M.ModelParameters, batch: Sequence[ConversationPair],
             config: TrainConfig) -> tuple[float, int]:
    """One clipped SGD update in place; returns (summed NLL, token count)."""
    tape = Tape()
    nll, leaves, n_tokens = M.batch_nll(tape, params, [p.source for p in batch],
                                        [p.target for p in batch])
    denom = len(batch) if config.loss_scale == "sequence" else n_tokens
    loss = tape.scale(nll, 1.0 / denom)
    grads = clip_gradients(tape.backward(loss), config.clip_norm)
    if config.learning_rate:
        for (_, arr), g in zip(params.named_arrays(), grads):
            arr -= config.learning_rate * g
    params._fused = None
    return float(nll.value[0, 0]), n_tokens


def _check_vocab(pairs, vocab_size):
    for p in pairs:
        for t in p.source + p.target:
            if not 0 <= t < vocab_size:
                raise InputError(f"token id {t} outside vocabulary of size {vocab_size}")


def train(pairs: Sequence[ConversationPair], role: str, config: TrainConfig, *,
          vocab_size: int, dim: int = 32, depth: int = 2,
          dev: Sequence[ConversationPair] | None = None,
          checkpoint_dir=None, log_path=None,
          on_epoch: Callable[[EpochStats], None] | None = None,
          ) -> tuple[M.ModelParameters, TrainReport]:
    """Train one model role on (forward-oriented) pairs.

    ``role="backward"`` swaps every pair first and ``role="lm"`` drops the
    sources; ``dev`` is given in the same forward orientation.  With a dev
    set the best-on-dev parameters are returned and training stops after
    ``patience`` epochs without improvement.
    """
    problems = config.validate()
    if problems:
        raise InputError("; ".join(problems))
    if not pairs:
        raise InputError("cannot train on an empty corpus")
    data = role_pairs(pairs, role)
    _check_vocab(data, vocab_size)
    dev_data = role_pairs(dev, role) if dev else None

    rng = np.random.default_rng(config.seed)
    params = init_params(vocab_size, dim, depth, role, config, rng)
    report = TrainReport(role=role, initial_nll=corpus_nll(params, data))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write("epoch\ttrain_nll\tdev_nll\ttokens_per_sec\n")

    best_params, best_dev, stale = params.copy(), math.inf, 0
    started = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            tick = time.perf_counter()
            total, tokens = 0.0, 0
            for idx in batch_schedule(data, config.batch_size, rng):
                nll, n = sgd_step(params, [data[i] for i in idx], config)
                if not math.isfinite(nll):
                    raise TrainingDiverged(f"{role}: non-finite loss in epoch {epoch}")
                total += nll
                tokens += n
            elapsed = max(time.perf_counter() - tick, 1e-9)
            dev_nll = corpus_nll(params, dev_data) if dev_data else None
            stats = EpochStats(epoch, total / tokens, dev_nll, tokens / elapsed)
            report.epochs.append(stats)
            log.info("%s epoch %d train %.4f dev %s", role, epoch, stats.train_nll,
                     "-" if dev_nll is None else f"{dev_nll:.4f}")
            if log_fh:
                dev_txt = "-" if dev_nll is None else f"{dev_nll:.6f}"
                log_fh.write(f"{epoch}\t{stats.train_nll:.6f}\t{dev_txt}\t{stats.tokens_per_sec:.1f}\n")
                log_fh.flush()
            if ckpt_dir:
                M.save_checkpoint(ckpt_dir / f"{role}.epoch{epoch}.ckpt", params)
            if on_epoch:
                on_epoch(stats)
            score = dev_nll if dev_nll is not None else stats.train_nll
            if score < best_dev:
                best_dev, best_params, stale = score, params.copy(), 0
                report.best_epoch = epoch
            else:
                stale += 1
                if dev_data and stale >= config.patience:
                    log.info("%s: early stop after epoch %d", role, epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()
    report.wall_time = time.perf_counter() - started
    if not report.epochs:
        best_params = params
    if ckpt_dir:
        M.save_checkpoint(ckpt_dir / f"{role}.best.ckpt", best_params)
    return best_params, report
