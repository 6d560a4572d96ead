"""Tri-layer IOB2 corpora: validation, chunking, file formats and fold splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

TASKS = ("da", "fr", "ar")
OUTSIDE = "O"
PUNCTUATION = frozenset("?!.,;:")


class CorpusError(ValueError):
    """Malformed corpus input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Chunk:
    start: int
    end: int  # exclusive
    label: str

    def overlaps(self, other: Chunk) -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class IobReport:
    valid: bool
    index: int | None = None
    reason: str = ""


@dataclass(frozen=True)
class AnnotatedSentence:
    id: str
    tokens: tuple[str, ...]
    da_tags: tuple[str, ...]
    fr_tags: tuple[str, ...]
    ar_tags: tuple[str, ...]

    def __post_init__(self):
        for name in ("tokens", "da_tags", "fr_tags", "ar_tags"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.tokens:
            raise CorpusError(f"sentence {self.id!r} has no tokens")
        n = len(self.tokens)
        for task in TASKS:
            tags = self.tags(task)
            if len(tags) != n:
                raise CorpusError(
                    f"sentence {self.id!r}: {task} row has {len(tags)} tags for {n} tokens")
            report = validate_iob2(tags)
            if not report.valid:
                raise CorpusError(
                    f"sentence {self.id!r}: {task} row invalid at token {report.index}: "
                    f"{report.reason}")

    def __len__(self) -> int:
        return len(self.tokens)

    def tags(self, task: str) -> tuple[str, ...]:
        return getattr(self, f"{task}_tags")


@dataclass
class LabelVocabulary:
    """Ordered tag strings; "O" always sits at index 0."""

    tags: list[str] = field(default_factory=lambda: [OUTSIDE])

    def __post_init__(self):
        if OUTSIDE not in self.tags:
            self.tags.insert(0, OUTSIDE)
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("duplicate tags in vocabulary")
        self._index = {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def from_sequences(cls, rows: Iterable[Sequence[str]]) -> LabelVocabulary:
        seen = {t for row in rows for t in row} - {OUTSIDE}
        # B-X then I-X, grouped by label, so indices are stable across runs
        ordered = sorted(seen, key=lambda t: (split_tag(t)[1], split_tag(t)[0]))
        return cls([OUTSIDE, *ordered])

    def __len__(self) -> int:
        return len(self.tags)

    def __contains__(self, tag: str) -> bool:
        return tag in self._index

    def index(self, tag: str) -> int:
        try:
            return self._index[tag]
        except KeyError:
            raise KeyError(f"tag {tag!r} is not in the vocabulary") from None

    def encode(self, tags: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tags]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.tags[i] for i in indices]


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == OUTSIDE:
        return OUTSIDE, None
    prefix, sep, label = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not label:
        raise ValueError(f"not an IOB2 tag: {tag!r}")
    return prefix, label


def validate_iob2(tags: Sequence[str]) -> IobReport:
    prev: str | None = None
    for i, tag in enumerate(tags):
        try:
            prefix, label = split_tag(tag)
        except ValueError as err:
            return IobReport(False, i, str(err))
        if prefix == "I" and prev != label:
            return IobReport(False, i, f"{tag} does not continue a {label} chunk")
        prev = label
    return IobReport(True)


def repair_iob2(tags: Sequence[str]) -> list[str]:
    """Turn every dangling I-X into B-X."""
    out = []
    prev = None
    for tag in tags:
        prefix, label = split_tag(tag)
        if prefix == "I" and prev != label:
            tag = f"B-{label}"
        out.append(tag)
        prev = label
    return out


def extract_chunks(tags: Sequence[str], repair: bool = False) -> list[Chunk]:
    if repair:
        tags = repair_iob2(tags)
    else:
        report = validate_iob2(tags)
        if not report.valid:
            raise CorpusError(f"invalid IOB2 at index {report.index}: {report.reason}")
    chunks = []
    start = label = None
    for i, tag in enumerate(tags):
        prefix, lab = split_tag(tag)
        if prefix != "I" and label is not None:
            chunks.append(Chunk(start, i, label))
            label = None
        if prefix == "B":
            start, label = i, lab
    if label is not None:
        chunks.append(Chunk(start, len(tags), label))
    return chunks


def chunks_to_tags(chunks: Iterable[Chunk], length: int) -> list[str]:
    tags = [OUTSIDE] * length
    for c in sorted(chunks, key=lambda c: c.start):
        if not 0 <= c.start < c.end <= length:
            raise ValueError(f"chunk {c} out of bounds for length {length}")
        if any(t != OUTSIDE for t in tags[c.start:c.end]):
            raise ValueError(f"chunk {c} overlaps another chunk")
        tags[c.start] = f"B-{c.label}"
        for i in range(c.start + 1, c.end):
            tags[i] = f"I-{c.label}"
    return tags


# ------------------------------------------------------------------ formats

def parse_conll(text: str) -> list[AnnotatedSentence]:
    """Read the 4-column (token DA FR AR) format; blank lines separate sentences."""
    return [s for s, _ in _read_blocks(text, columns=4)]


def parse_conll_predictions(text: str) -> list[tuple[AnnotatedSentence | None, dict]]:
    """Read 4- or 7-column files, returning gold (7-col only) and predicted rows."""
    return list(_read_blocks(text, columns=None))


def _read_blocks(text: str, columns: int | None) -> Iterator[tuple]:
    rows: list[list[str]] = []
    sid = None
    first_line = None
    count = 0

    def flush():
        nonlocal rows, sid, count
        count += 1
        name = sid if sid is not None else f"s{count}"
        block, start = rows, first_line
        rows, sid = [], None
        return _make_sentence(name, block, start, columns)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            if rows:
                yield flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("id:"):
                if rows:
                    yield flush()
                sid = body[3:].strip()
            continue
        cols = line.split()
        if columns is not None and len(cols) != columns:
            raise CorpusError(f"expected {columns} columns, found {len(cols)}", lineno)
        if columns is None and len(cols) not in (4, 7):
            raise CorpusError(f"expected 4 or 7 columns, found {len(cols)}", lineno)
        if rows and len(cols) != len(rows[0]):
            raise CorpusError("column count changes inside a sentence", lineno)
        if not rows:
            first_line = lineno
        rows.append(cols)
    if rows:
        yield flush()


def _make_sentence(sid: str, rows: list[list[str]], line: int, columns: int | None):
    tokens = [r[0] for r in rows]
    width = len(rows[0])
    try:
        if columns == 4:
            return AnnotatedSentence(sid, tokens, [r[1] for r in rows], [r[2] for r in rows],
                                     [r[3] for r in rows]), None
        pred_cols = (1, 2, 3) if width == 4 else (4, 5, 6)
        pred = {"id": sid, "tokens": tuple(tokens)}
        for task, c in zip(TASKS, pred_cols):
            pred[task] = tuple(r[c] for r in rows)
            for t in pred[task]:
                split_tag(t)
        gold = None
        if width == 7:
            gold = AnnotatedSentence(sid, tokens, [r[1] for r in rows], [r[2] for r in rows],
                                     [r[3] for r in rows])
        return gold, pred
    except (CorpusError, ValueError) as err:
        raise CorpusError(str(err), line) from None


def serialize_conll(corpus: Iterable[AnnotatedSentence], with_ids: bool = True) -> str:
    blocks = []
    for s in corpus:
        lines = [f"# id: {s.id}"] if with_ids else []
        lines += [" ".join(cols) for cols in zip(s.tokens, s.da_tags, s.fr_tags, s.ar_tags)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def read_corpus(path) -> list[AnnotatedSentence]:
    with open(path, encoding="utf-8") as fh:
        return parse_conll(fh.read())


# ---------------------------------------------------------------- NLU-BM

def convert_nlubm(record: dict, strip_final_punct: bool = False) -> AnnotatedSentence:
    """Scenario -> DA row, action -> FR row, entities -> AR row.

    ``record`` carries ``tokens`` (or whitespace-split ``text``), ``scenario``,
    ``action`` and ``entities`` as token spans with exclusive ends.
    """
    tokens = list(record.get("tokens") or record["text"].split())
    n = len(tokens)
    if n == 0:
        raise CorpusError(f"record {record.get('id')!r} has no tokens")
    end = n
    if strip_final_punct:
        while end > 1 and tokens[end - 1] in PUNCTUATION:
            end -= 1
    scenario, action = record["scenario"], record["action"]
    da = chunks_to_tags([Chunk(0, end, scenario)], n)
    fr = chunks_to_tags([Chunk(0, end, action)], n)
    ents = [Chunk(int(e["start"]), int(e["end"]), e["label"]) for e in record.get("entities", [])]
    ents.sort(key=lambda c: c.start)
    for c in ents:
        if not 0 <= c.start < c.end <= n:
            raise CorpusError(f"record {record.get('id')!r}: entity {c} out of bounds")
    for a, b in zip(ents, ents[1:]):
        if a.overlaps(b):
            raise CorpusError(f"record {record.get('id')!r}: entities {a} and {b} overlap")
    ar = chunks_to_tags(ents, n)
    return AnnotatedSentence(str(record.get("id", "")), tokens, da, fr, ar)


def intent_name(scenario: str, action: str) -> str:
    return f"{scenario}_{action}"


def read_nlubm(lines: Iterable[str], strip_final_punct: bool = False) -> list[AnnotatedSentence]:
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            record.setdefault("id", f"nlubm-{lineno}")
            out.append(convert_nlubm(record, strip_final_punct))
        except (json.JSONDecodeError, KeyError) as err:
            raise CorpusError(f"bad NLU-BM record: {err}", lineno) from None
        except CorpusError as err:
            raise CorpusError(str(err), lineno) from None
    return out


# ------------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_fold(self, r: int) -> tuple[str, ...]:
        return self.folds[r % self.k]

    def tuning_fold(self, r: int) -> tuple[str, ...]:
        return self.folds[(r + 1) % self.k]

    def train_ids(self, r: int) -> tuple[str, ...]:
        skip = {r % self.k, (r + 1) % self.k}
        return tuple(i for j, f in enumerate(self.folds) if j not in skip for i in f)


def kfold_split(corpus: Sequence[AnnotatedSentence], k: int, seed: int = 0) -> FoldSplit:
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(corpus) < k:
        raise ValueError(f"corpus of {len(corpus)} sentences is too small for {k} folds")
    ids = [s.id for s in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("sentence ids must be unique for fold splitting")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(tuple(tuple(ids[i] for i in part) for part in np.array_split(order, k)))


def select(corpus: Sequence[AnnotatedSentence], ids: Iterable[str]) -> list[AnnotatedSentence]:
    by_id = {s.id: s for s in corpus}
    return [by_id[i] for i in ids]
