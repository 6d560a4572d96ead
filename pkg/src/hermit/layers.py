"""Embedding providers, BiLSTM encoder, self-attention and linear-chain CRF.

Every layer accepts either a single sequence (``[T, ...]`` with mask ``[T]``)
or a padded batch (``[B, T, ...]`` with mask ``[B, T]``).
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError, Tensor

UNK = "<unk>"


# ---------------------------------------------------------------- embeddings

class EmbeddingError(LookupError):
    pass


class EmbeddingProvider:
    """Maps a tokenized sentence to a ``[T, dim]`` matrix."""

    mode: str
    dim: int

    def parameters(self) -> list[Parameter]:
        return []

    def vectors(self, tokens: Sequence[str], sentence_id: str | None = None) -> Tensor:
        raise NotImplementedError

    def embed(self, tokens: Sequence[str], sentence_id: str | None = None) -> Tensor:
        if not tokens:
            raise EmbeddingError("cannot embed an empty sentence")
        return self.vectors(list(tokens), sentence_id)

    def embed_batch(self, sentences: Sequence[tuple[Sequence[str], str | None]]):
        """Right-padded ``[B, Tmax, dim]`` tensor and its ``[B, Tmax]`` mask."""
        lengths = [len(toks) for toks, _ in sentences]
        if not sentences or min(lengths) == 0:
            raise EmbeddingError("cannot embed an empty batch or sentence")
        tmax = max(lengths)
        mask = np.arange(tmax)[None, :] < np.asarray(lengths)[:, None]
        return self._batch(sentences, tmax), mask

    def _batch(self, sentences, tmax: int) -> Tensor:
        out = np.zeros((len(sentences), tmax, self.dim))
        for b, (toks, sid) in enumerate(sentences):
            out[b, :len(toks)] = self.embed(toks, sid).data
        return Tensor(out)

    def config(self) -> dict:
        return {"mode": self.mode, "dim": self.dim}


class FixedRandomEmbedding(EmbeddingProvider):
    """Each token's vector is a pure function of (token, seed)."""

    mode = "fixed-random"

    def __init__(self, dim: int, seed: int = 0):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = self._cache[token] = rng.standard_normal(self.dim)
        return vec

    def vectors(self, tokens, sentence_id=None) -> Tensor:
        return Tensor(np.stack([self._vector(t) for t in tokens]))

    def config(self) -> dict:
        return {**super().config(), "seed": self.seed}


class LookupEmbedding(EmbeddingProvider):
    """Trainable table; row 0 is the unknown-token row."""

    mode = "trainable-lookup"

    def __init__(self, vocabulary: Sequence[str], dim: int,
                 rng: np.random.Generator | None = None, lowercase: bool = False):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        words = [w for w in dict.fromkeys(vocabulary) if w != UNK]
        self.words = [UNK, *words]
        self.lowercase = lowercase
        self._index = {w: i for i, w in enumerate(self.words)}
        self.dim = dim
        rng = rng or np.random.default_rng(0)
        self.table = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), (len(self.words), dim)),
                               "embedding.table")

    def parameters(self) -> list[Parameter]:
        return [self.table]

    def ids(self, tokens: Sequence[str]) -> list[int]:
        norm = (lambda t: t.lower()) if self.lowercase else (lambda t: t)
        return [self._index.get(norm(t), 0) for t in tokens]

    def vectors(self, tokens, sentence_id=None) -> Tensor:
        return nx.take(self.table, np.asarray(self.ids(tokens)))

    def _batch(self, sentences, tmax: int) -> Tensor:
        ids = np.zeros((len(sentences), tmax), dtype=np.int64)
        for b, (toks, _) in enumerate(sentences):
            ids[b, :len(toks)] = self.ids(toks)
        return nx.take(self.table, ids)

    def config(self) -> dict:
        return {**super().config(), "words": self.words, "lowercase": self.lowercase}


class PrecomputedEmbedding(EmbeddingProvider):
    """Externally computed contextual vectors keyed by sentence id."""

    mode = "precomputed-contextual"

    def __init__(self, store: Mapping[str, np.ndarray], dim: int | None = None,
                 source: str | None = None):
        self.store = dict(store)
        dims = {np.asarray(m).shape[1] for m in self.store.values()}
        if dim is None:
            if len(dims) != 1:
                raise EmbeddingError(f"cannot infer a single dimension from {sorted(dims)}")
            dim = dims.pop()
        elif dims and dims != {dim}:
            raise EmbeddingError(f"stored dimensions {sorted(dims)} do not match {dim}")
        self.dim = dim
        self.source = source

    def vectors(self, tokens, sentence_id=None) -> Tensor:
        if sentence_id is None or sentence_id not in self.store:
            raise EmbeddingError(f"no precomputed embeddings for sentence {sentence_id!r}")
        mat = np.asarray(self.store[sentence_id], dtype=np.float64)
        if mat.shape != (len(tokens), self.dim):
            raise EmbeddingError(
                f"sentence {sentence_id!r}: stored shape {mat.shape}, "
                f"expected ({len(tokens)}, {self.dim})")
        return Tensor(mat)

    def config(self) -> dict:
        return {**super().config(), "source": self.source}


EMB_MAGIC = b"HEMB"
EMB_VERSION = 1


def write_embedding_file(path, store: Mapping[str, np.ndarray]) -> None:
    dims = {np.asarray(m).shape[1] for m in store.values()}
    if len(dims) > 1:
        raise EmbeddingError("all matrices must share one dimension")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", EMB_VERSION, dim))
        for sid, mat in store.items():
            raw = sid.encode("utf-8")
            mat = np.asarray(mat, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", mat.shape[0]))
            fh.write(mat.tobytes(order="C"))


def read_embedding_file(path) -> dict[str, np.ndarray]:
    """Load the binary HEMB container or its plain-text fixture variant."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == EMB_MAGIC:
        return _read_binary(blob)
    return _read_text(blob.decode("utf-8"))


def _read_binary(blob: bytes) -> dict[str, np.ndarray]:
    version, dim = struct.unpack_from("<II", blob, 4)
    if version != EMB_VERSION:
        raise EmbeddingError(f"unsupported embedding file version {version}")
    pos = 12
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        sid = blob[pos:pos + n].decode("utf-8")
        pos += n
        (t,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        size = t * dim * 4
        if pos + size > len(blob):
            raise EmbeddingError(f"truncated record for sentence {sid!r}")
        out[sid] = np.frombuffer(blob, dtype="<f4", count=t * dim, offset=pos) \
            .reshape(t, dim).astype(np.float64)
        pos += size
    return out


def _read_text(text: str) -> dict[str, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    out = {}
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 3:
            raise EmbeddingError(f"bad header line: {lines[i]!r}")
        sid, t, d = head[0], int(head[1]), int(head[2])
        rows = [np.array(lines[i + 1 + j].split(), dtype=np.float64) for j in range(t)]
        if any(r.shape != (d,) for r in rows):
            raise EmbeddingError(f"sentence {sid!r}: row width differs from {d}")
        out[sid] = np.stack(rows) if rows else np.zeros((0, d))
        i += 1 + t
    return out


def make_provider(cfg: dict, rng: np.random.Generator | None = None,
                  vocabulary: Sequence[str] = ()) -> EmbeddingProvider:
    mode = cfg["mode"]
    if mode == FixedRandomEmbedding.mode:
        return FixedRandomEmbedding(cfg["dim"], cfg.get("seed", 0))
    if mode == LookupEmbedding.mode:
        words = cfg.get("words") or list(vocabulary)
        return LookupEmbedding(words, cfg["dim"], rng, cfg.get("lowercase", False))
    if mode == PrecomputedEmbedding.mode:
        store = read_embedding_file(cfg["source"]) if cfg.get("source") else {}
        return PrecomputedEmbedding(store, cfg["dim"], cfg.get("source"))
    raise ValueError(f"unknown embedding mode {mode!r}")


# ------------------------------------------------------------------- helpers

def _batched(x: Tensor, mask) -> tuple[Tensor, np.ndarray, bool]:
    mask = np.asarray(mask, dtype=bool) if mask is not None else None
    if x.ndim == 2:
        if mask is None:
            mask = np.ones(x.shape[0], dtype=bool)
        if mask.shape != (x.shape[0],):
            raise ShapeError(f"mask shape {mask.shape} does not fit input {x.shape}")
        return nx.reshape(x, (1, *x.shape)), mask[None, :], True
    if x.ndim != 3:
        raise ShapeError(f"expected [T, d] or [B, T, d], got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not fit input {x.shape}")
    return x, mask, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return nx.reshape(x, x.shape[1:]) if single else x


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, shape)


# ---------------------------------------------------------------------- LSTM

@dataclass
class LstmParams:
    W: Parameter  # [4H, D], gate blocks ordered input, forget, cell, output
    U: Parameter  # [4H, H]
    b: Parameter  # [4H]

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, h: int, prefix: str) -> LstmParams:
        bound = 1.0 / math.sqrt(h)
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        return cls(Parameter(_uniform(rng, bound, (4 * h, d)), f"{prefix}.W"),
                   Parameter(_uniform(rng, bound, (4 * h, h)), f"{prefix}.U"),
                   Parameter(bias, f"{prefix}.b"))

    def parameters(self) -> list[Parameter]:
        return [self.W, self.U, self.b]


@dataclass
class BiLstmParams:
    forward: LstmParams
    backward: LstmParams

    def __post_init__(self):
        f, b = self.forward, self.backward
        if (f.input_dim, f.hidden) != (b.input_dim, b.hidden):
            raise ShapeError("both directions must share input and hidden sizes")

    @classmethod
    def init(cls, rng, d: int, h: int, prefix: str) -> BiLstmParams:
        return cls(LstmParams.init(rng, d, h, f"{prefix}.fwd"),
                   LstmParams.init(rng, d, h, f"{prefix}.bwd"))

    @property
    def output_dim(self) -> int:
        return 2 * self.forward.hidden

    def parameters(self) -> list[Parameter]:
        return self.forward.parameters() + self.backward.parameters()


def _cell(gates: Tensor, c_prev: Tensor, h: int) -> tuple[Tensor, Tensor]:
    sig = nx.sigmoid(gates)
    i = sig[:, :h]
    f = sig[:, h:2 * h]
    o = sig[:, 3 * h:]
    g = nx.tanh(gates[:, 2 * h:3 * h])
    c = f * c_prev + i * g
    return o * nx.tanh(c), c


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    H = p.hidden
    if x.shape != (p.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError(f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
                         f"do not fit D={p.input_dim}, H={H}")
    x2 = nx.reshape(x, (1, -1))
    gates = nx.add_bias(x2 @ nx.transpose(p.W) + nx.reshape(h_prev, (1, H)) @ nx.transpose(p.U), p.b)
    h, c = _cell(gates, nx.reshape(c_prev, (1, H)), H)
    return nx.reshape(h, (H,)), nx.reshape(c, (H,))


def _direction(x: Tensor, mask: np.ndarray, p: LstmParams, reverse: bool) -> Tensor:
    B, T, D = x.shape
    H = p.hidden
    xw = nx.reshape(nx.add_bias(nx.reshape(x, (B * T, D)) @ nx.transpose(p.W), p.b), (B, T, 4 * H))
    ut = nx.transpose(p.U)
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        m = mask[:, t]
        if not m.any():
            outs[t] = Tensor(np.zeros((B, H)))
            continue
        h_new, c_new = _cell(xw[:, t, :] + h @ ut, c, H)
        if m.all():
            h, c = h_new, c_new
            outs[t] = h
        else:
            mm = np.broadcast_to(m[:, None], (B, H))
            h = nx.where(mm, h_new, h)
            c = nx.where(mm, c_new, c)
            outs[t] = nx.mul_const(h, mm.astype(np.float64))
    return nx.stack(outs, axis=1)


def bilstm_forward(x: Tensor, mask, p: BiLstmParams) -> Tensor:
    """Concatenated forward/backward hidden states; masked rows are zero."""
    xb, m, single = _batched(x, mask)
    if xb.shape[1] == 0:
        raise ShapeError("bilstm_forward on an empty sequence")
    if xb.shape[2] != p.forward.input_dim:
        raise ShapeError(f"bilstm_forward: input width {xb.shape[2]}, "
                         f"parameters expect {p.forward.input_dim}")
    out = nx.concat(_direction(xb, m, p.forward, False), _direction(xb, m, p.backward, True))
    return _unbatch(out, single)


# ------------------------------------------------------------ self-attention

@dataclass
class SelfAttentionParams:
    Wq: Parameter  # [H', A]
    Wk: Parameter  # [H', A]
    Wv: Parameter  # [H', H']

    def __post_init__(self):
        if self.Wq.shape != self.Wk.shape:
            raise ShapeError("query and key projections must share a shape")
        w = self.Wq.shape[0]
        if self.Wv.shape != (w, w):
            raise ShapeError("value projection must preserve the input width")

    @property
    def width(self) -> int:
        return self.Wq.shape[1]

    @classmethod
    def init(cls, rng, d: int, a: int, prefix: str) -> SelfAttentionParams:
        bound = 1.0 / math.sqrt(d)
        return cls(Parameter(_uniform(rng, bound, (d, a)), f"{prefix}.Wq"),
                   Parameter(_uniform(rng, bound, (d, a)), f"{prefix}.Wk"),
                   Parameter(_uniform(rng, bound, (d, d)), f"{prefix}.Wv"))

    def parameters(self) -> list[Parameter]:
        return [self.Wq, self.Wk, self.Wv]


def self_attention(s: Tensor, mask, p: SelfAttentionParams) -> Tensor:
    """Scaled dot-product attention of every position over the unmasked ones."""
    sb, m, single = _batched(s, mask)
    B, T, W = sb.shape
    if not m.any(axis=1).all():
        raise ValueError("self_attention: every position of a sequence is masked")
    flat = nx.reshape(sb, (B * T, W))
    q = nx.reshape(flat @ p.Wq, (B, T, p.width))
    k = nx.reshape(flat @ p.Wk, (B, T, p.width))
    v = nx.reshape(flat @ p.Wv, (B, T, W))
    scores = nx.scale(nx.bmm(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(p.width))
    alpha = nx.masked_softmax(scores, np.broadcast_to(m[:, None, :], (B, T, T)))
    out = nx.bmm(alpha, v)
    if not m.all():
        out = nx.mul_const(out, np.broadcast_to(m[:, :, None], out.shape).astype(np.float64))
    return _unbatch(out, single)


# ----------------------------------------------------------------------- CRF

@dataclass
class CrfParams:
    transitions: Parameter  # [K, K]; entry (i, j) scores label i followed by j
    start: Parameter  # [K]
    stop: Parameter  # [K]

    def __post_init__(self):
        k = self.start.shape[0]
        if self.transitions.shape != (k, k) or self.stop.shape != (k,):
            raise ShapeError("CRF parameters must be [K,K], [K], [K]")

    @property
    def num_labels(self) -> int:
        return self.start.shape[0]

    @classmethod
    def init(cls, k: int, prefix: str) -> CrfParams:
        return cls(Parameter(np.zeros((k, k)), f"{prefix}.transitions"),
                   Parameter(np.zeros(k), f"{prefix}.start"),
                   Parameter(np.zeros(k), f"{prefix}.stop"))

    def parameters(self) -> list[Parameter]:
        return [self.transitions, self.start, self.stop]


def _compact(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left-align the unmasked positions of each row.

    Returns gather indices ``[B, L]``, the validity of each compacted slot and
    the per-row counts. Masked steps are thereby skipped entirely.
    """
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("CRF needs at least one unmasked step per sequence")
    L = int(counts.max())
    idx = np.zeros((mask.shape[0], L), dtype=np.int64)
    for b, row in enumerate(mask):
        pos = np.flatnonzero(row)
        idx[b, :len(pos)] = pos
    valid = np.arange(L)[None, :] < counts[:, None]
    return idx, valid, counts


def _prepare(emissions: Tensor, mask, K: int):
    eb, m, single = _batched(emissions, mask)
    if eb.shape[2] != K:
        raise ShapeError(f"emissions have {eb.shape[2]} labels, CRF has {K}")
    idx, valid, counts = _compact(m)
    rows = np.arange(eb.shape[0])[:, None]
    return nx.take(eb, (rows, idx)), idx, valid, counts, single


def _scalar_or_vector(v: Tensor, single: bool) -> Tensor:
    return nx.reshape(v, ()) if single else v


def crf_sequence_score(emissions: Tensor, tags, p: CrfParams, mask=None) -> Tensor:
    """start + emissions along the path + transitions + stop, over unmasked steps."""
    K = p.num_labels
    em, idx, valid, counts, single = _prepare(emissions, mask, K)
    tags = np.asarray(tags, dtype=np.int64).reshape(em.shape[0], -1)
    if tags.size and (tags.min() < 0 or tags.max() >= K):
        raise IndexError(f"tag index out of range for {K} labels")
    B, L, _ = em.shape
    rows = np.arange(B)[:, None]
    y = np.where(valid, tags[rows, idx], 0)
    fvalid = valid.astype(np.float64)
    score = nx.sum(nx.mul_const(nx.take(em, (rows, np.arange(L)[None, :], y)), fvalid), axis=1)
    score = score + nx.take(p.start, y[:, 0])
    if L > 1:
        trans = nx.take(p.transitions, (y[:, :-1], y[:, 1:]))
        score = score + nx.sum(nx.mul_const(trans, fvalid[:, 1:]), axis=1)
    last = y[np.arange(B), counts - 1]
    score = score + nx.take(p.stop, last)
    return _scalar_or_vector(score, single)


def crf_log_partition(emissions: Tensor, mask, p: CrfParams) -> Tensor:
    """Forward algorithm: log of the summed exp-scores of all label sequences."""
    K = p.num_labels
    em, _, valid, _, single = _prepare(emissions, mask, K)
    B, L, _ = em.shape
    alpha = nx.add(nx.broadcast_to(p.start, (B, K)), em[:, 0, :])
    trans = nx.broadcast_to(nx.reshape(p.transitions, (1, K, K)), (B, K, K))
    for t in range(1, L):
        prev = nx.broadcast_to(nx.reshape(alpha, (B, K, 1)), (B, K, K))
        nxt = nx.logsumexp(prev + trans, axis=1) + em[:, t, :]
        if valid[:, t].all():
            alpha = nxt
        else:
            alpha = nx.where(np.broadcast_to(valid[:, t:t + 1], (B, K)), nxt, alpha)
    total = nx.logsumexp(alpha + nx.broadcast_to(p.stop, (B, K)), axis=1)
    return _scalar_or_vector(total, single)


def crf_nll(emissions: Tensor, mask, tags, p: CrfParams) -> Tensor:
    return crf_log_partition(emissions, mask, p) - crf_sequence_score(emissions, tags, p, mask)


def crf_viterbi(emissions, mask, p: CrfParams) -> tuple[list[int], float]:
    """Best path for one sequence; masked positions come back as -1.

    Ties go to the lowest label index.
    """
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
    if em.ndim != 2 or em.shape[1] != p.num_labels:
        raise ShapeError(f"crf_viterbi expects [T, {p.num_labels}] emissions, got {em.shape}")
    T = em.shape[0]
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pos = np.flatnonzero(mask)
    if len(pos) == 0:
        raise ValueError("crf_viterbi needs at least one unmasked step")
    path, score = _viterbi_dense(em[pos], p.transitions.data, p.start.data, p.stop.data)
    tags = [-1] * T
    for i, y in zip(pos, path):
        tags[i] = int(y)
    return tags, score


def _viterbi_dense(em, trans, start, stop) -> tuple[list[int], float]:
    L = em.shape[0]
    delta = start + em[0]
    back = np.zeros((L, em.shape[1]), dtype=np.int64)
    for t in range(1, L):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(em.shape[1])] + em[t]
    final = delta + stop
    y = int(np.argmax(final))
    score = float(final[y])
    path = [y]
    for t in range(L - 1, 0, -1):
        y = int(back[t, y])
        path.append(y)
    return path[::-1], score


# ------------------------------------------------------------------- taggers

@dataclass
class Tagger:
    """Linear emission projection, with a CRF on top unless ``crf`` is None."""

    W: Parameter  # [width, K]
    b: Parameter  # [K]
    crf: CrfParams | None

    @classmethod
    def init(cls, rng, width: int, k: int, prefix: str, use_crf: bool) -> Tagger:
        bound = 1.0 / math.sqrt(width)
        return cls(Parameter(_uniform(rng, bound, (width, k)), f"{prefix}.proj.W"),
                   Parameter(np.zeros(k), f"{prefix}.proj.b"),
                   CrfParams.init(k, f"{prefix}.crf") if use_crf else None)

    @property
    def num_labels(self) -> int:
        return self.b.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b] + (self.crf.parameters() if self.crf else [])

    def emissions(self, h: Tensor) -> Tensor:
        B, T, W = h.shape
        flat = nx.add_bias(nx.reshape(h, (B * T, W)) @ self.W, self.b)
        return nx.reshape(flat, (B, T, self.num_labels))

    def nll(self, emissions: Tensor, mask: np.ndarray, gold: np.ndarray) -> Tensor:
        """Summed negative log-likelihood over the batch."""
        if self.crf is not None:
            return nx.sum(crf_nll(emissions, mask, gold, self.crf))
        return token_cross_entropy(emissions, mask, gold)

    def decode(self, emissions: np.ndarray, mask: np.ndarray) -> list[list[int]]:
        out = []
        for em, m in zip(emissions, mask):
            if self.crf is not None:
                tags, _ = crf_viterbi(em, m, self.crf)
                out.append([t for t in tags if t >= 0])
            else:
                out.append([int(t) for t in np.argmax(em[m], axis=1)])
        return out


def token_cross_entropy(emissions: Tensor, mask, gold) -> Tensor:
    """Per-token softmax cross-entropy summed over unmasked steps."""
    eb, m, _ = _batched(emissions, mask)
    B, T, K = eb.shape
    gold = np.asarray(gold, dtype=np.int64).reshape(B, T)
    y = np.where(m, gold, 0)
    if (y < 0).any() or (y >= K).any():
        raise IndexError(f"tag index out of range for {K} labels")
    lse = nx.logsumexp(eb, axis=2)
    picked = nx.take(eb, (np.arange(B)[:, None], np.arange(T)[None, :], y))
    return nx.sum(nx.mul_const(lse - picked, m.astype(np.float64)))


def iter_parameters(*groups) -> Iterator[Parameter]:
    for g in groups:
        if g is not None:
            yield from g.parameters()
