"""The three-level tagging hierarchy and its ablated variants.

Dialogue acts are tagged first from the embeddings. Frames are tagged from the
embeddings concatenated with the (attended) dialogue-act states, and frame
arguments from the embeddings concatenated with the (attended) frame states.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .batching import PaddedBatch, pad_batch
from .corpus import TASKS, AnnotatedSentence, LabelVocabulary
from .layers import (
    BiLstmParams,
    EmbeddingProvider,
    SelfAttentionParams,
    Tagger,
    bilstm_forward,
    make_provider,
    self_attention,
)
from .numerics import Parameter, ShapeError, Tensor

# preset name -> (use_self_attention, use_shortcuts, use_crf)
ABLATIONS = {
    "full": (True, True, True),
    "-sa": (False, True, True),
    "-sa-cn": (False, False, True),
    "-sa-crf": (False, True, False),
    "-sa-cn-crf": (False, False, False),
}


@dataclass
class HermitConfig:
    da_labels: list[str] = field(default_factory=lambda: ["O"])
    fr_labels: list[str] = field(default_factory=lambda: ["O"])
    ar_labels: list[str] = field(default_factory=lambda: ["O"])
    embedding_mode: str = "fixed-random"
    embedding_dim: int = 1024
    embedding_seed: int = 0
    embedding_source: str | None = None
    embedding_words: list[str] = field(default_factory=list)
    lowercase: bool = False
    hidden_size: int = 200
    attention_width: int = 64
    use_self_attention: bool = True
    use_shortcuts: bool = True
    use_crf: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for task in TASKS:
            if not self.labels(task):
                raise ValueError(f"{task} label vocabulary is empty")
        for name in ("embedding_dim", "hidden_size", "attention_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def labels(self, task: str) -> list[str]:
        return getattr(self, f"{task}_labels")

    def vocabulary(self, task: str) -> LabelVocabulary:
        return LabelVocabulary(list(self.labels(task)))

    @property
    def ablation(self) -> str | None:
        flags = (self.use_self_attention, self.use_shortcuts, self.use_crf)
        return next((name for name, f in ABLATIONS.items() if f == flags), None)

    def with_ablation(self, preset: str) -> HermitConfig:
        try:
            sa, cn, crf = ABLATIONS[preset]
        except KeyError:
            raise ValueError(f"unknown ablation preset {preset!r}; "
                             f"choose from {', '.join(ABLATIONS)}") from None
        return replace(self, use_self_attention=sa, use_shortcuts=cn, use_crf=crf)

    def input_widths(self) -> dict[str, int]:
        """Input width of each level's BiLSTM."""
        out = 2 * self.hidden_size
        skip = self.embedding_dim if self.use_shortcuts else 0
        return {"da": self.embedding_dim, "fr": skip + out, "ar": skip + out}

    def embedding_config(self) -> dict:
        cfg = {"mode": self.embedding_mode, "dim": self.embedding_dim}
        if self.embedding_mode == "fixed-random":
            cfg["seed"] = self.embedding_seed
        elif self.embedding_mode == "trainable-lookup":
            cfg["words"] = list(self.embedding_words)
            cfg["lowercase"] = self.lowercase
        else:
            cfg["source"] = self.embedding_source
        return cfg

    @classmethod
    def for_corpus(cls, corpus: Sequence[AnnotatedSentence], **overrides) -> HermitConfig:
        vocabs = {t: LabelVocabulary.from_sequences(s.tags(t) for s in corpus).tags
                  for t in TASKS}
        if overrides.get("embedding_mode") == "trainable-lookup" \
                and not overrides.get("embedding_words"):
            lower = overrides.get("lowercase", False)
            words = (w.lower() if lower else w for s in corpus for w in s.tokens)
            overrides["embedding_words"] = sorted(set(words))
        return cls(da_labels=vocabs["da"], fr_labels=vocabs["fr"], ar_labels=vocabs["ar"],
                   **overrides)

    def to_dict(self, labels: bool = True) -> dict:
        d = asdict(self)
        if not labels:
            for task in TASKS:
                d.pop(f"{task}_labels")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HermitConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def count_parameters(config: HermitConfig) -> int:
    """Scalar parameter count implied by a config (no model needed)."""
    H, A = config.hidden_size, config.attention_width
    W = 2 * H
    total = 0
    if config.embedding_mode == "trainable-lookup":
        total += (len(set(config.embedding_words) - {"<unk>"}) + 1) * config.embedding_dim
    for task, d in config.input_widths().items():
        total += 2 * (4 * H * d + 4 * H * H + 4 * H)
        K = len(config.labels(task))
        total += W * K + K
        if config.use_crf:
            total += K * K + 2 * K
    if config.use_self_attention:
        total += 2 * (2 * W * A + W * W)
    return total


@dataclass(frozen=True)
class TriPrediction:
    da_tags: tuple[str, ...]
    fr_tags: tuple[str, ...]
    ar_tags: tuple[str, ...]

    def __post_init__(self):
        if not len(self.da_tags) == len(self.fr_tags) == len(self.ar_tags):
            raise ValueError("prediction rows differ in length")

    def tags(self, task: str) -> tuple[str, ...]:
        return getattr(self, f"{task}_tags")


class HermitModel:
    def __init__(self, config: HermitConfig, provider: EmbeddingProvider,
                 encoders: dict[str, BiLstmParams],
                 attention: dict[str, SelfAttentionParams],
                 taggers: dict[str, Tagger]):
        self.config = config
        self.provider = provider
        self.encoders = encoders
        self.attention = attention
        self.taggers = taggers
        self.vocabularies = {t: config.vocabulary(t) for t in TASKS}
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")
        if provider.dim != config.embedding_dim:
            raise ShapeError(f"embedding provider has dimension {provider.dim}, "
                             f"config says {config.embedding_dim}")

    def parameters(self) -> list[Parameter]:
        out = list(self.provider.parameters())
        for task in TASKS:
            out += self.encoders[task].parameters()
            if task in self.attention:
                out += self.attention[task].parameters()
            out += self.taggers[task].parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ---------------------------------------------------------------- forward

    def encode(self, e: Tensor, mask, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
        """All intermediate sequences of one pass, keyed by role.

        ``da``, ``fr`` and ``ar`` are what each tagger reads.
        """
        if e.ndim == 2:
            e = nx.reshape(e, (1, *e.shape))
            mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        if mask is None:
            mask = np.ones(e.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        cfg = self.config
        rate = cfg.dropout if rng is not None else 0.0

        def drop(t):
            return nx.dropout(t, rate, rng) if rate else t

        out = {"e": e}
        x = e
        for task in TASKS:
            s = bilstm_forward(drop(x), mask, self.encoders[task])
            out[f"s_{task}"] = s
            h = self_attention(s, mask, self.attention[task]) if task in self.attention else s
            out[task] = h
            if task != "ar":
                x = nx.concat(e, h) if cfg.use_shortcuts else h
                out[f"x_{TASKS[TASKS.index(task) + 1]}"] = x
        return out

    def forward(self, e: Tensor, mask, rng=None) -> dict[str, Tensor]:
        """Per-task emission scores ``[B, T, K]``."""
        enc = self.encode(e, mask, rng)
        return {task: self.taggers[task].emissions(enc[task]) for task in TASKS}

    def batch(self, sentences: Sequence[AnnotatedSentence]) -> PaddedBatch:
        return pad_batch(sentences, self.provider, self.vocabularies)

    def task_losses(self, batch: PaddedBatch | Sequence[AnnotatedSentence],
                    rng=None) -> dict[str, Tensor]:
        if not isinstance(batch, PaddedBatch):
            batch = self.batch(batch)
        em = self.forward(batch.embeddings, batch.mask, rng)
        return {task: self.taggers[task].nll(em[task], batch.mask, batch.gold[task])
                for task in TASKS}

    def loss(self, batch: PaddedBatch | Sequence[AnnotatedSentence], rng=None) -> Tensor:
        """Sum over the batch of the three task negative log-likelihoods."""
        parts = self.task_losses(batch, rng)
        return parts["da"] + parts["fr"] + parts["ar"]

    # ------------------------------------------------------------- decoding

    def predict_batch(self, sentences: Sequence[AnnotatedSentence | Sequence[str]],
                      ids: Sequence[str | None] | None = None) -> list[TriPrediction]:
        items = []
        for i, s in enumerate(sentences):
            if isinstance(s, AnnotatedSentence):
                items.append((s.tokens, s.id))
            else:
                items.append((tuple(s), ids[i] if ids else None))
        if not items:
            return []
        with nx.no_record():
            emb, mask = self.provider.embed_batch(items)
            em = self.forward(emb, mask)
        decoded = {task: self.taggers[task].decode(em[task].data, mask) for task in TASKS}
        preds = []
        for b in range(len(items)):
            rows = [tuple(self.vocabularies[t].decode(decoded[t][b])) for t in TASKS]
            preds.append(TriPrediction(*rows))
        return preds

    def predict(self, sentence: AnnotatedSentence | Sequence[str],
                sentence_id: str | None = None) -> TriPrediction:
        return self.predict_batch([sentence], [sentence_id])[0]

    # ---------------------------------------------------------- persistence

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if params[name].shape != arr.shape:
                raise ShapeError(f"{name}: stored {arr.shape}, model {params[name].shape}")
            params[name].data[...] = arr


def build(config: HermitConfig, seed: int = 0,
          provider: EmbeddingProvider | None = None) -> HermitModel:
    """Initialise every parameter deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    if provider is None:
        provider = make_provider(config.embedding_config(), rng)
    H = config.hidden_size
    widths = config.input_widths()
    encoders, attention, taggers = {}, {}, {}
    for task in TASKS:
        encoders[task] = BiLstmParams.init(rng, widths[task], H, f"{task}.bilstm")
        if config.use_self_attention and task != "ar":
            attention[task] = SelfAttentionParams.init(rng, 2 * H, config.attention_width,
                                                       f"{task}.attn")
        taggers[task] = Tagger.init(rng, 2 * H, len(config.labels(task)), f"{task}.tagger",
                                    config.use_crf)
    return HermitModel(config, provider, encoders, attention, taggers)


# --------------------------------------------------------------- checkpoints

MAGIC = b"HMT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)) + raw)


def _get(fh: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _get_str(fh: BinaryIO) -> str:
    (n,) = _get(fh, "<I")
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw.decode("utf-8")


def write_checkpoint(fh: BinaryIO, model: HermitModel, extra: dict | None = None) -> None:
    fh.write(MAGIC + struct.pack("<I", VERSION))
    meta = {"config": model.config.to_dict(labels=False), "extra": extra or {}}
    _put_str(fh, json.dumps(meta, sort_keys=True))
    for task in TASKS:
        tags = model.vocabularies[task].tags
        fh.write(struct.pack("<I", len(tags)))
        for t in tags:
            _put_str(fh, t)
    params = model.parameters()
    fh.write(struct.pack("<I", len(params)))
    for p in params:
        _put_str(fh, p.name)
        fh.write(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        fh.write(p.data.astype("<f8").tobytes(order="C"))


def read_checkpoint(fh: BinaryIO, provider: EmbeddingProvider | None = None
                    ) -> tuple[HermitModel, dict]:
    head = fh.read(4)
    if head != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = _get(fh, "<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    meta = json.loads(_get_str(fh))
    cfg = dict(meta["config"])
    for task in TASKS:
        (n,) = _get(fh, "<I")
        cfg[f"{task}_labels"] = [_get_str(fh) for _ in range(n)]
    config = HermitConfig.from_dict(cfg)
    state = {}
    (count,) = _get(fh, "<I")
    for _ in range(count):
        name = _get_str(fh)
        (ndim,) = _get(fh, "<I")
        shape = _get(fh, f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise CheckpointError("truncated checkpoint")
        state[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    model = build(config, 0, provider)
    try:
        model.load_state(state)
    except ValueError as err:
        raise CheckpointError(f"parameters do not fit the stored config: {err}") from None
    return model, meta.get("extra", {})


def save(path, model: HermitModel, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, model, extra)


def load(path, provider: EmbeddingProvider | None = None) -> tuple[HermitModel, dict]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh, provider)


def parameter_signature(model: HermitModel) -> frozenset[tuple[str, tuple[int, ...]]]:
    return frozenset((p.name, p.shape) for p in model.parameters())


def decode_all(model: HermitModel, sentences: Iterable[AnnotatedSentence],
               batch_size: int = 64) -> list[TriPrediction]:
    sentences = list(sentences)
    out = []
    for i in range(0, len(sentences), batch_size):
        out += model.predict_batch(sentences[i:i + batch_size])
    return out
