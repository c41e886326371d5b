"""Experiment stages over a fixed output-directory layout.

Each stage reads what earlier stages wrote under ``out_dir`` and fails with
:class:`MissingArtifactError` (naming the producing command) when an input
is absent.  Stages never modify their inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from . import corpus as C
from . import decoder as D
from . import model as M
from . import reranker as R
from . import trainer as T
from . import tuner as TU
from .config import ExperimentConfig, stage_seed
from .errors import InputError, MissingArtifactError, MMIError
from .metrics import evaluate
from .nbest import NBestList, read_nbest, write_nbest

log = logging.getLogger(__name__)

ROLES = ("forward", "backward", "lm")
SYSTEMS = ("baseline", "anti_lm", "bidi")


class Layout:
    def __init__(self, out_dir):
        self.root = Path(out_dir)

    def _p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def vocab(self):
        return self._p("vocab.txt")

    def data(self, split):
        return self._p("data", f"{split}.tsv")

    def ids(self, split):
        return self._p("data", f"{split}.ids")

    @property
    def topics(self):
        return self._p("data", "topics.json")

    def ckpt(self, role):
        return self._p("checkpoints", f"{role}.best.ckpt")

    @property
    def epoch_dir(self):
        return self._p("checkpoints", "epochs")

    def train_log(self, role):
        return self._p("logs", f"train.{role}.log")

    def nbest(self, split, system):
        return self._p("decode", f"{split}.{system}.nbest")

    def trace(self, mode):
        return self._p("tune", f"{mode}.trace.tsv")

    def weights(self, mode):
        return self._p("tune", f"{mode}.weights")

    def hyp(self, split, system):
        return self._p("eval", f"{split}.{system}.hyp.txt")

    def report(self, split, system, ext):
        return self._p("eval", f"{split}.{system}.report.{ext}")

    def comparison(self, ext):
        return self._p("reports", f"comparison.{ext}")

    def manifest(self, command):
        return self._p("manifests", f"{command}.json")


def require(path: Path, producer: str) -> Path:
    if not Path(path).is_file():
        raise MissingArtifactError(path, f"run `mmichat {producer}` first")
    return Path(path)


@contextmanager
def locked(out_dir):
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise MMIError(f"{root} is locked by another command") from None
    try:
        yield
    finally:
        lock.release()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(cfg: ExperimentConfig, layout: Layout, command: str, artifacts) -> Path:
    entries = {}
    for path in sorted({Path(p) for p in artifacts}):
        try:
            key = str(path.relative_to(layout.root))
        except ValueError:
            key = str(path)
        entries[key] = _sha256(path)
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": {"mmichat": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "artifacts": entries,
    }
    path = layout.manifest(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- prepare ------------------------------------------------------------------

def _read_heldout(path: Path):
    """(source, reference) rows from a dev/test TSV."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise InputError(f"{path}:{lineno}: expected source<TAB>reference")
            rows.append((parts[0], parts[1]))
    return rows


def prepare(cfg: ExperimentConfig, layout: Layout) -> list[Path]:
    (layout.root / "data").mkdir(parents=True, exist_ok=True)
    written = []
    if cfg.generate.enabled:
        g = cfg.generate
        trap = C.generate_generic_trap(stage_seed(cfg.seed, "generate"), n_topics=g.n_topics,
                                       n_pairs=g.n_pairs, generic_rate=g.generic_rate,
                                       n_variants=g.n_variants, n_valid=g.n_valid,
                                       n_dev=g.n_dev, n_test=g.n_test)
        C.write_pairs(layout.data("train"), trap.train)
        C.write_pairs(layout.data("valid"), trap.valid)
        C.write_pairs(layout.data("dev"), [(e.source, e.reference) for e in trap.dev])
        C.write_pairs(layout.data("test"), [(e.source, e.reference) for e in trap.test])
        topics = {
            "generic": " ".join(trap.generic),
            "topic_responses": [[" ".join(v) for v in vs] for vs in trap.topic_responses],
            "dev_topics": [e.topic for e in trap.dev],
            "test_topics": [e.topic for e in trap.test],
        }
        layout.topics.write_text(json.dumps(topics, indent=1) + "\n", encoding="utf-8")
        written.append(layout.topics)
    else:
        for split in ("train", "valid", "dev", "test"):
            src = getattr(cfg.data, split)
            if not src:
                if split == "valid":
                    continue
                raise MissingArtifactError(f"data.{split}", "set it in the config")
            if not Path(src).is_file():
                raise MissingArtifactError(src, f"data.{split} points at a missing file")
            if Path(src).resolve() != layout.data(split).resolve():
                shutil.copyfile(src, layout.data(split))
    with open(layout.data("train"), encoding="utf-8") as fh:
        vocab = C.build_vocab(fh, min_count=cfg.data.min_count,
                              max_size=cfg.data.max_vocab or None, lowercase=cfg.data.lowercase)
    vocab.save(layout.vocab)
    written.append(layout.vocab)
    length_range = (cfg.data.length_min, cfg.data.length_max) if cfg.data.length_filter else None
    for split in ("train", "valid", "dev", "test"):
        if not layout.data(split).is_file():
            continue
        stats = C.LoadStats()
        pairs = C.load_pairs(layout.data(split), vocab, cfg.data.lowercase,
                             length_range if split == "train" else None, stats)
        C.write_encoded(layout.ids(split), pairs)
        written += [layout.data(split), layout.ids(split)]
        log.info("prepare %s: %d pairs (%d malformed, %d filtered)", split, len(pairs),
                 stats.malformed, stats.filtered)
    return written


def load_vocab(layout: Layout) -> C.Vocabulary:
    return C.Vocabulary.load(require(layout.vocab, "prepare"))


# -- train --------------------------------------------------------------------

def train(cfg: ExperimentConfig, layout: Layout, roles=ROLES) -> list[Path]:
    vocab = load_vocab(layout)
    pairs = C.read_encoded(require(layout.ids("train"), "prepare"))
    valid = C.read_encoded(layout.ids("valid")) if layout.ids("valid").is_file() else None
    layout.train_log(roles[0]).parent.mkdir(parents=True, exist_ok=True)
    written = []
    tcfg = T.TrainConfig(**{**cfg.train.__dict__, "seed": stage_seed(cfg.seed, "train")})
    for role in roles:
        params, report = T.train(pairs, role, tcfg, vocab_size=len(vocab), dim=cfg.model.dim,
                                 depth=cfg.model.depth, dev=valid,
                                 checkpoint_dir=layout.epoch_dir, log_path=layout.train_log(role))
        layout.ckpt(role).parent.mkdir(parents=True, exist_ok=True)
        M.save_checkpoint(layout.ckpt(role), params)
        written.append(layout.ckpt(role))
        written += sorted(layout.epoch_dir.glob(f"{role}.*.ckpt"))
        log.info("train %s: best epoch %d, final NLL %.4f, %.1fs", role, report.best_epoch,
                 report.final_nll, report.wall_time)
    return written


def load_model(layout: Layout, role: str) -> M.ModelParameters:
    return M.load_checkpoint(require(layout.ckpt(role), f"train --role {role}"))


# -- decode / rerank / tune -----------------------------------------------------

def heldout(layout: Layout, split: str):
    """Encoded sources and raw reference strings for a dev/test split."""
    vocab = load_vocab(layout)
    rows = _read_heldout(require(layout.data(split), "prepare"))
    sources = [vocab.encode(C.tokenize(s)) for s, _ in rows]
    refs = [[r] for _, r in rows]
    return sources, refs


def read_weights(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v) if k.strip() != "gamma_g" else int(v)
    return out


def write_weights(path: Path, weights: dict, bleu: float) -> None:
    lines = [f"{k} = {v!r}" for k, v in weights.items()] + [f"dev_bleu = {bleu!r}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def decode_config(cfg: ExperimentConfig, mode: str, weights: dict | None = None) -> D.DecodeConfig:
    dc = D.DecodeConfig(**{**cfg.decode.__dict__, "mode": mode})
    if weights:
        dc.lam = weights.get("lambda", dc.lam)
        dc.gamma_len = weights.get("gamma_len", dc.gamma_len)
        dc.gamma_g = int(weights.get("gamma_g", dc.gamma_g))
    return dc


def decode(cfg: ExperimentConfig, layout: Layout, split: str, mode: str,
           weights: dict | None = None, sources=None, output: Path | None = None) -> Path:
    vocab = load_vocab(layout)
    if sources is None:
        sources, _ = heldout(layout, split)
    fwd = load_model(layout, "forward")
    dc = decode_config(cfg, mode, weights)
    if mode == "greedy":
        lists = []
        for k, src in enumerate(sources):
            h = D.greedy_decode(fwd, src, dc.max_len)
            lists.append(NBestList(tuple(src), [h] if h.complete else [], k,
                                   "ok" if h.complete else "incomplete"))
    else:
        lm = load_model(layout, "lm") if mode == "anti_lm" else None
        threads = 1 if cfg.deterministic else cfg.threads
        lists = D.decode_corpus(fwd, lm, sources, dc, threads=threads)
    out = Path(output) if output else layout.nbest(split, mode)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nbest(out, lists, vocab)
    return out


def read_lists(layout: Layout, path: Path, split: str) -> list[NBestList]:
    vocab = load_vocab(layout)
    sources, _ = heldout(layout, split)
    return read_nbest(require(path, f"decode --split {split}"), vocab, sources)


def tune(cfg: ExperimentConfig, layout: Layout, mode: str, split: str = "dev",
         nbest_path: Path | None = None) -> tuple[TU.TuneResult, list[Path]]:
    vocab = load_vocab(layout)
    path = Path(nbest_path) if nbest_path else layout.nbest(split, "baseline")
    lists = read_lists(layout, path, split)
    _, refs = heldout(layout, split)
    if mode == "anti_lm":
        lists = D.attach_lm_scores(lists, load_model(layout, "lm"))
    else:
        lists = R.attach_backward_scores(lists, load_model(layout, "backward"))
    spec = TU.TuneSpec(**{**cfg.tune.__dict__, "mode": mode,
                          "unit_forward": cfg.rerank.unit_forward})
    result = TU.tune(lists, refs, spec, vocab)
    layout.trace(mode).parent.mkdir(parents=True, exist_ok=True)
    TU.write_trace(layout.trace(mode), result)
    write_weights(layout.weights(mode), result.weights, result.bleu)
    return result, [layout.trace(mode), layout.weights(mode)]


def rerank(cfg: ExperimentConfig, layout: Layout, split: str, weights: dict | None = None,
           nbest_path: Path | None = None, output: Path | None = None) -> Path:
    vocab = load_vocab(layout)
    path = Path(nbest_path) if nbest_path else layout.nbest(split, "baseline")
    lists = read_lists(layout, path, split)
    w = R.RerankWeights(cfg.rerank.lam, cfg.rerank.gamma_len, cfg.rerank.unit_forward)
    if weights:
        w.lam = weights.get("lambda", w.lam)
        w.gamma_len = weights.get("gamma_len", w.gamma_len)
    lists = R.attach_backward_scores(lists, load_model(layout, "backward"))
    for nb in lists:
        if nb.entries:
            log.debug("source %d: N-best distinct-2 %.4f", nb.source_id, R.list_distinct2(nb))
    out_lists = [R.rerank(nb, w) for nb in lists]
    out = Path(output) if output else layout.nbest(split, "bidi")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nbest(out, out_lists, vocab)
    return out


# -- eval -----------------------------------------------------------------------

@dataclass
class SystemResult:
    system: str
    bleu: float
    distinct_1: float
    distinct_2: float
    extra: dict


def top1(lists: list[NBestList], vocab) -> list[str]:
    return [vocab.detokenize(nb.top.tokens) if nb.top else "" for nb in lists]


def trap_statistics(layout: Layout, split: str, lists: list[NBestList], hyps: list[str],
                    max_len: int) -> dict:
    extra = {
        "eos_rate": float(np.mean([nb.top is not None and nb.top.length < max_len
                                   for nb in lists])) if lists else 0.0,
    }
    if layout.topics.is_file():
        topics = json.loads(layout.topics.read_text(encoding="utf-8"))
        generic = topics["generic"]
        extra["generic_rate"] = float(np.mean([h == generic for h in hyps]))
        own = [{tok for v in topics["topic_responses"][t] for tok in v.split()}
               for t in topics[f"{split}_topics"]]
        spec = [sum(tok in o for tok in h.split()) / len(h.split()) if h.split() else 0.0
                for h, o in zip(hyps, own)]
        extra["specificity"] = float(np.mean(spec))
    return extra


def evaluate_system(cfg: ExperimentConfig, layout: Layout, split: str, system: str) -> tuple[SystemResult, list[Path]]:
    vocab = load_vocab(layout)
    lists = read_lists(layout, require(layout.nbest(split, system), f"decode/rerank for {system}"), split)
    _, refs = heldout(layout, split)
    hyps = top1(lists, vocab)
    report = evaluate(hyps, refs, smooth=cfg.eval.smooth,
                      distinct_denominator=cfg.eval.distinct_denominator)
    report.extra = trap_statistics(layout, split, lists, hyps, cfg.decode.max_len)
    paths = [layout.hyp(split, system), layout.report(split, system, "txt"),
             layout.report(split, system, "kv")]
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    paths[0].write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    paths[1].write_text(report.to_text(), encoding="utf-8")
    paths[2].write_text(report.to_keyvalue(), encoding="utf-8")
    return SystemResult(system, report.bleu, report.distinct_1, report.distinct_2, report.extra), paths


def write_comparison(layout: Layout, results: list[SystemResult]) -> list[Path]:
    extra_keys = sorted({k for r in results for k in r.extra})
    header = ["system", "bleu", "distinct_1", "distinct_2"] + extra_keys
    tsv = ["\t".join(header)]
    for r in results:
        tsv.append("\t".join([r.system, f"{r.bleu:.6f}", f"{r.distinct_1:.6f}",
                              f"{r.distinct_2:.6f}"] +
                             [f"{r.extra[k]:.6f}" if k in r.extra else "NA" for k in extra_keys]))
    widths = [max(12, len(h) + 2) for h in header]
    text = ["".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in results:
        cells = [r.system, f"{100 * r.bleu:.2f}", f"{r.distinct_1:.3f}", f"{r.distinct_2:.3f}"]
        cells += [f"{r.extra[k]:.3f}" if k in r.extra else "NA" for k in extra_keys]
        text.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
    paths = [layout.comparison("tsv"), layout.comparison("txt")]
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    paths[0].write_text("\n".join(tsv) + "\n", encoding="utf-8")
    paths[1].write_text("\n".join(text) + "\n", encoding="utf-8")
    return paths


def run_pipeline(cfg: ExperimentConfig, layout: Layout) -> list[SystemResult]:
    """prepare -> train (3 roles) -> dev N-best -> tune -> test decode/rerank -> eval."""
    artifacts = prepare(cfg, layout)
    artifacts += train(cfg, layout)
    artifacts.append(decode(cfg, layout, "dev", "baseline"))
    anti, paths = tune(cfg, layout, "anti_lm")
    artifacts += paths
    bidi, paths = tune(cfg, layout, "bidi")
    artifacts += paths
    artifacts.append(decode(cfg, layout, "test", "baseline"))
    artifacts.append(decode(cfg, layout, "test", "anti_lm", anti.weights))
    artifacts.append(rerank(cfg, layout, "test", bidi.weights))
    results = []
    for system in SYSTEMS:
        res, paths = evaluate_system(cfg, layout, "test", system)
        results.append(res)
        artifacts += paths
    artifacts += write_comparison(layout, results)
    write_manifest(cfg, layout, "pipeline", artifacts)
    return results
