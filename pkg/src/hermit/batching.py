from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import TASKS, AnnotatedSentence, LabelVocabulary
from .layers import EmbeddingProvider
from .numerics import Tensor


@dataclass
class PaddedBatch:
    embeddings: Tensor  # [B, Tmax, D]
    mask: np.ndarray  # [B, Tmax]; row b is true exactly on its first T_b slots
    gold: dict[str, np.ndarray]  # task -> [B, Tmax] label indices, 0 on padding
    sentences: tuple[AnnotatedSentence, ...] = ()

    @property
    def size(self) -> int:
        return self.mask.shape[0]


def pad_batch(sentences: Sequence[AnnotatedSentence], provider: EmbeddingProvider,
              vocabularies: Mapping[str, LabelVocabulary] | None = None) -> PaddedBatch:
    if not sentences:
        raise ValueError("pad_batch needs at least one sentence")
    emb, mask = provider.embed_batch([(s.tokens, s.id) for s in sentences])
    gold = {}
    if vocabularies is not None:
        for task in TASKS:
            vocab = vocabularies[task]
            idx = np.zeros(mask.shape, dtype=np.int64)
            for b, s in enumerate(sentences):
                try:
                    idx[b, :len(s)] = vocab.encode(s.tags(task))
                except KeyError as err:
                    raise KeyError(f"sentence {s.id!r}, {task} layer: {err.args[0]}") from None
            gold[task] = idx
    return PaddedBatch(emb, mask, gold, tuple(sentences))
