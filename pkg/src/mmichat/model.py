"""Stacked LSTM encoder-decoder.

One parameter layout serves three roles: ``forward`` models p(T|S),
``backward`` models p(S|T) (same network, trained on swapped pairs) and
``lm`` is a decoder-only language model p(T) with no encoder layers.

The decoder predicts token k from the top-layer hidden state *before*
consuming it: the first token is predicted straight from the encoder's
final state (zero state for the LM), then each emitted token is fed back
in.  No start symbol is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .errors import CheckpointError, InputError
from .tensor import eager

PAD, EOS, UNK = 0, 1, 2
ROLES = ("forward", "backward", "lm")
GATES = ("i", "f", "o", "l")


@dataclass
class LstmLayer:
    """Gate weights over the concatenated ``[h_prev, x]`` input.

    Each weight is D x 2D; biases are 1 x D rows.  Zero biases give the
    bias-free gate equations exactly.
    """

    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_l: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_l: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_i.shape[0]

    def arrays(self):
        for g in GATES:
            yield f"w_{g}", getattr(self, f"w_{g}")
        for g in GATES:
            yield f"b_{g}", getattr(self, f"b_{g}")

    @classmethod
    def zeros(cls, dim: int) -> "LstmLayer":
        kw = {f"w_{g}": np.zeros((dim, 2 * dim)) for g in GATES}
        kw.update({f"b_{g}": np.zeros((1, dim)) for g in GATES})
        return cls(**kw)


@dataclass
class ModelParameters:
    vocab_size: int
    dim: int
    depth: int
    role: str
    embedding: np.ndarray           # V x D
    encoder: list[LstmLayer]
    decoder: list[LstmLayer]
    proj: np.ndarray                # D x V
    proj_bias: np.ndarray           # 1 x V
    _fused: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"unknown model role {self.role!r}")
        problems = []
        if self.embedding.shape != (self.vocab_size, self.dim):
            problems.append(f"embedding shape {self.embedding.shape}")
        if self.proj.shape != (self.dim, self.vocab_size):
            problems.append(f"projection shape {self.proj.shape}")
        if self.proj_bias.shape != (1, self.vocab_size):
            problems.append(f"projection bias shape {self.proj_bias.shape}")
        want_enc = 0 if self.role == "lm" else self.depth
        if len(self.encoder) != want_enc or len(self.decoder) != self.depth:
            problems.append("layer count does not match depth/role")
        for layer in self.encoder + self.decoder:
            for name, arr in layer.arrays():
                want = (self.dim, 2 * self.dim) if name.startswith("w_") else (1, self.dim)
                if arr.shape != want:
                    problems.append(f"{name} shape {arr.shape}, expected {want}")
        if problems:
            raise InputError("inconsistent model parameters: " + "; ".join(problems))

    @property
    def conditioned(self) -> bool:
        return self.role != "lm"

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("embedding", self.embedding)]
        for side, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for k, layer in enumerate(layers):
                out.extend((f"{side}.{k}.{name}", arr) for name, arr in layer.arrays())
        out.append(("proj", self.proj))
        out.append(("proj_bias", self.proj_bias))
        return out

    def replace_arrays(self, arrays) -> "ModelParameters":
        """New parameters with the same layout, arrays in ``named_arrays`` order."""
        arrays = list(arrays)
        it = iter(arrays)
        embedding = next(it)

        def take_layers(n):
            layers = []
            for _ in range(n):
                ws = {f"w_{g}": next(it) for g in GATES}
                bs = {f"b_{g}": next(it) for g in GATES}
                layers.append(LstmLayer(**ws, **bs))
            return layers

        encoder = take_layers(len(self.encoder))
        decoder = take_layers(len(self.decoder))
        proj, proj_bias = next(it), next(it)
        return ModelParameters(self.vocab_size, self.dim, self.depth, self.role,
                               embedding, encoder, decoder, proj, proj_bias)

    def copy(self) -> "ModelParameters":
        return self.replace_arrays(a.copy() for _, a in self.named_arrays())

    def astype(self, dtype) -> "ModelParameters":
        return self.replace_arrays(a.astype(dtype) for _, a in self.named_arrays())

    def fused_eager(self):
        # decode-time cache; parameters are treated as immutable once decoding starts
        if self._fused is None:
            self._fused = (fuse_layers(eager, self.encoder), fuse_layers(eager, self.decoder))
        return self._fused


# -- LSTM cell ---------------------------------------------------------------

def fuse_layers(ops, layers):
    """Stack each layer's four gate matrices into one 2D x 4D matrix.

    With a tape as ``ops`` the stacking is recorded, so gradients reach the
    individual gate matrices.
    """
    fused = []
    for layer in layers:
        w = ops.concat([layer.w_i, layer.w_f, layer.w_o, layer.w_l], axis=0)
        b = ops.concat([layer.b_i, layer.b_f, layer.b_o, layer.b_l], axis=1)
        fused.append((ops.transpose(w), b, _layer_dim(layer)))
    return fused


def _fused_step(ops, fused, h, c, x):
    w_t, b, d = fused
    z = ops.add(ops.matmul(ops.concat([h, x], axis=1), w_t), b)
    ifo = ops.sigmoid(ops.cols(z, 0, 3 * d))
    cand = ops.tanh(ops.cols(z, 3 * d, 4 * d))
    i = ops.cols(ifo, 0, d)
    f = ops.cols(ifo, d, 2 * d)
    o = ops.cols(ifo, 2 * d, 3 * d)
    c_new = ops.add(ops.mul(f, c), ops.mul(i, cand))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def lstm_step(layer: LstmLayer, h, c, x, ops=eager):
    """One LSTM time step for a batch of rows.

    ``h``, ``c`` and ``x`` are B x D (a single example is a 1 x D row; 1-D
    vectors are accepted and promoted).  Returns ``(h_new, c_new)``.
    """
    d = layer.dim
    if ops is eager:
        h, c, x = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (h, c, x))
        for name, a in (("h", h), ("c", c), ("x", x)):
            if a.shape[1] != d:
                raise InputError(f"lstm_step: {name} has width {a.shape[1]}, expected {d}")
    return _fused_step(ops, fuse_layers(ops, [layer])[0], h, c, x)


# -- state -------------------------------------------------------------------

@dataclass
class State:
    """Per-layer hidden and cell states for a batch: arrays of depth x B x D."""

    h: np.ndarray
    c: np.ndarray

    def select(self, rows) -> "State":
        rows = np.asarray(rows, dtype=np.intp)
        return State(self.h[:, rows], self.c[:, rows])

    @property
    def batch(self) -> int:
        return self.h.shape[1]


def zero_state(params: ModelParameters, batch: int = 1) -> State:
    shape = (params.depth, batch, params.dim)
    return State(np.zeros(shape), np.zeros(shape))


def _check_ids(params: ModelParameters, seq, what):
    for t in seq:
        if not 0 <= int(t) < params.vocab_size:
            raise InputError(f"{what} token id {t} outside vocabulary of size {params.vocab_size}")


def encode(params: ModelParameters, source) -> State:
    """Run the encoder stack over ``source``; returns the final state.

    An empty source (or an ``lm`` model) yields the zero state.
    """
    source = [int(t) for t in source]
    _check_ids(params, source, "source")
    return encode_batch(params, [source])


def encode_batch(params: ModelParameters, sources) -> State:
    """Encode several sources at once (right-padded, masked)."""
    batch = len(sources)
    if params.conditioned:
        src, mask = pad_batch(sources)
    else:
        src, mask = np.zeros((batch, 0), dtype=np.intp), np.zeros((batch, 0), dtype=bool)
    hs, cs = _run_encoder(eager, params, params.embedding, params.fused_eager()[0],
                          src, mask, batch)
    return State(np.stack(hs), np.stack(cs))


def pad_batch(seqs, pad=PAD):
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad, dtype=np.intp)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
        mask[r, :len(s)] = True
    return ids, mask


# -- decoding primitives ------------------------------------------------------

def initial_state(params: ModelParameters, source=()) -> State:
    """Decoder start state: encoder final state copied layer by layer."""
    return encode(params, source)


def next_logprobs(params: ModelParameters, state: State) -> np.ndarray:
    """B x V log-distribution over the next token."""
    logits = state.h[-1] @ params.proj + params.proj_bias
    return eager.log_softmax(logits)


def advance(params: ModelParameters, state: State, tokens) -> State:
    """Feed one token per batch row through the decoder stack."""
    _, dec = params.fused_eager()
    x = params.embedding[np.asarray(tokens, dtype=np.intp)]
    hs, cs = [], []
    for k, fused in enumerate(dec):
        h, c = _fused_step(eager, fused, state.h[k], state.c[k], x)
        hs.append(h)
        cs.append(c)
        x = h
    return State(np.stack(hs), np.stack(cs))


# -- teacher-forced scoring (shared by training and rescoring) ----------------

def _tape_view(tape, params: ModelParameters):
    """Register every parameter array as a tape leaf.

    Returns the leaves (in ``named_arrays`` order) and a namespace mirroring
    the model layout with leaves in place of arrays.
    """
    leaves = [tape.param(a, name) for name, a in params.named_arrays()]
    it = iter(leaves)
    embedding = next(it)

    def take(n):
        out = []
        for _ in range(n):
            fields = {f"w_{g}": next(it) for g in GATES}
            fields.update({f"b_{g}": next(it) for g in GATES})
            out.append(SimpleNamespace(**fields))
        return out

    encoder = take(len(params.encoder))
    decoder = take(len(params.decoder))
    view = SimpleNamespace(embedding=embedding, encoder=encoder, decoder=decoder,
                           proj=next(it), proj_bias=next(it))
    return leaves, view


def _layer_dim(layer):
    w = layer.w_i
    return (w.value if hasattr(w, "value") else w).shape[0]


def forward_logprobs(ops, params, sources, targets, tape_model=None):
    """Teacher-forced next-token log-distributions for a batch.

    Returns ``(logp, tgt_ids, tgt_mask)`` where ``logp`` is (T*B) x V with
    rows ordered time-major, and ids/mask are T x B.
    """
    model = tape_model if tape_model is not None else params
    batch = len(targets)
    if params.conditioned:
        src, src_mask = pad_batch(sources)
    else:
        src, src_mask = np.zeros((batch, 0), dtype=np.intp), np.zeros((batch, 0), dtype=bool)
    tgt, tgt_mask = pad_batch(targets)
    if ops is eager:
        enc_fused, dec_fused = params.fused_eager()
        table = params.embedding
    else:
        enc_fused = fuse_layers(ops, model.encoder)
        dec_fused = fuse_layers(ops, model.decoder)
        table = model.embedding
    hs, cs = _run_encoder(ops, params, table, enc_fused, src, src_mask, batch)
    tops = [hs[-1]]
    for k in range(tgt.shape[1] - 1):
        x = ops.take_rows(table, tgt[:, k])
        for layer, fused in enumerate(dec_fused):
            hs[layer], cs[layer] = _fused_step(ops, fused, hs[layer], cs[layer], x)
            x = hs[layer]
        tops.append(hs[-1])
    stacked = ops.concat(tops, axis=0) if len(tops) > 1 else tops[0]
    logits = ops.add(ops.matmul(stacked, model.proj), model.proj_bias)
    return ops.log_softmax(logits), tgt.T, tgt_mask.T


def _run_encoder(ops, params, table, enc_fused, src, src_mask, batch):
    zeros = np.zeros((batch, params.dim))
    hs = [zeros] * params.depth
    cs = [zeros] * params.depth
    for k in range(src.shape[1]):
        x = ops.take_rows(table, src[:, k])
        live = src_mask[:, k:k + 1]
        full = bool(live.all())
        for layer, fused in enumerate(enc_fused):
            h_new, c_new = _fused_step(ops, fused, hs[layer], cs[layer], x)
            if full:
                hs[layer], cs[layer] = h_new, c_new
            else:
                hs[layer] = ops.where(live, h_new, hs[layer])
                cs[layer] = ops.where(live, c_new, cs[layer])
            x = hs[layer]
    return hs, cs


def score_batch(params: ModelParameters, sources, targets) -> list[np.ndarray]:
    """Per-token log p(t_k | S, t_<k) for each (source, target) pair."""
    if not targets:
        return []
    logp, ids, mask = forward_logprobs(eager, params, sources, targets)
    steps, batch = ids.shape
    picked = logp[np.arange(steps * batch), ids.reshape(-1)].reshape(steps, batch)
    return [picked[:len(t), r].copy() for r, t in enumerate(targets)]


def batch_nll(tape, params: ModelParameters, sources, targets):
    """Summed token NLL of a batch as a 1x1 tape node, plus the tape leaves."""
    leaves, view = _tape_view(tape, params)
    logp, ids, mask = forward_logprobs(tape, params, sources, targets, tape_model=view)
    nll = tape.pick_sum(logp, ids.reshape(-1), -mask.reshape(-1).astype(np.float64))
    return nll, leaves, int(mask.sum())


def _validate_target(params, target, what="target"):
    target = [int(t) for t in target]
    if not target or target[-1] != EOS:
        raise InputError(f"{what} must end with EOS")
    if EOS in target[:-1]:
        raise InputError(f"{what} has EOS before its last position")
    _check_ids(params, target, what)
    return target


def sequence_logprob(params: ModelParameters, source, target):
    """``(log p(T|S), per-token log-probabilities)``; target must end in EOS."""
    source = [int(t) for t in source]
    _check_ids(params, source, "source")
    target = _validate_target(params, target)
    per_token = score_batch(params, [source], [target])[0]
    return float(per_token.sum()), per_token


def lm_logprob(params: ModelParameters, target) -> np.ndarray:
    """Per-token log p(t_k | t_<k) under an unconditioned model."""
    target = _validate_target(params, target)
    return score_batch(params, [[]], [target])[0]


# -- checkpoints -------------------------------------------------------------

MAGIC = b"MMISEQ2SEQ\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ModelParameters) -> None:
    """Versioned little-endian binary; matrices stored as float32."""
    path = Path(path)
    arrays = params.named_arrays()
    role = params.role.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIH", FORMAT_VERSION, params.vocab_size, params.dim,
                             params.depth, len(role)))
        fh.write(role)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            rows, cols = arr.shape
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> ModelParameters:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def unpack(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, vocab, dim, depth, role_len = unpack("<IIIIH")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    role = data[pos:pos + role_len].decode("ascii")
    pos += role_len
    (count,) = unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = unpack("<H")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = unpack("<II")
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated matrix {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=rows * cols,
                                     offset=pos).reshape(rows, cols).astype(dtype)
        pos += nbytes
    if role not in ROLES:
        raise CheckpointError(f"{path}: unknown role {role!r}")
    template = ModelParameters(
        vocab, dim, depth, role,
        np.zeros((vocab, dim)),
        [LstmLayer.zeros(dim) for _ in range(0 if role == "lm" else depth)],
        [LstmLayer.zeros(dim) for _ in range(depth)],
        np.zeros((dim, vocab)), np.zeros((1, vocab)),
    )
    names = [n for n, _ in template.named_arrays()]
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing matrices {missing[:3]}")
    return template.replace_arrays(arrays[n] for n in names)
