"""Immutable input records: proposal sets, queries, and the vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from kacnet.errors import FormatError, VocabularyError

PAD, BOS, UNK = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<unk>")

Box = tuple[float, float, float, float]


def check_box(box: Sequence[float], width: float, height: float, what: str = "box") -> None:
    if len(box) != 4:
        raise FormatError(f"{what} must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise FormatError(f"{what} {tuple(box)} violates 0 <= x1 < x2 <= {width}, 0 <= y1 < y2 <= {height}")


@dataclass(eq=False)
class ProposalSet:
    """One image: global feature plus N proposals stored as stacked arrays.

    ``boxes`` is [N, 4] in pixels, ``features`` is [N, d_v], and
    ``class_probs`` is [N, K].
    """

    image_id: str
    width: float
    height: float
    global_feature: np.ndarray
    boxes: np.ndarray
    features: np.ndarray
    class_probs: np.ndarray

    def __post_init__(self):
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.boxes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.global_feature.shape[0]

    def validate(self, num_classes: int | None = None) -> None:
        if self.width <= 0 or self.height <= 0:
            raise FormatError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")
        if self.n < 1:
            raise FormatError(f"image {self.image_id}: needs at least one proposal")
        if self.global_feature.ndim != 1:
            raise FormatError(f"image {self.image_id}: global feature must be a vector")
        if self.features.shape != (self.n, self.feature_dim):
            raise FormatError(
                f"image {self.image_id}: proposal features {self.features.shape} do not match "
                f"{self.n} proposals of dim {self.feature_dim}"
            )
        if self.class_probs.ndim != 2 or self.class_probs.shape[0] != self.n:
            raise FormatError(f"image {self.image_id}: class_probs must be [N, K], got {self.class_probs.shape}")
        if num_classes is not None and self.class_probs.shape[1] != num_classes:
            raise FormatError(
                f"image {self.image_id}: class distribution length {self.class_probs.shape[1]} != K={num_classes}"
            )
        for i, box in enumerate(self.boxes):
            check_box(box, self.width, self.height, what=f"image {self.image_id} proposal {i}")
        if np.any(self.class_probs < 0):
            raise FormatError(f"image {self.image_id}: class_probs has negative entries")
        sums = self.class_probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if bad.size:
            raise FormatError(
                f"image {self.image_id}: class_probs of proposal {int(bad[0])} sum to {sums[bad[0]]:.6g}, not 1"
            )
        arrays = (self.global_feature, self.features, self.class_probs)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FormatError(f"image {self.image_id}: non-finite feature values")


@dataclass(eq=False)
class Query:
    query_id: str
    image_id: str
    words: list[str]
    noun_positions: list[int] = field(default_factory=list)
    gt_box: Box | None = None
    tags: list[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.words)

    @property
    def nouns(self) -> list[str]:
        return [self.words[p] for p in self.noun_positions]

    def validate(self, max_len: int | None = None) -> None:
        if not self.words:
            raise FormatError(f"query {self.query_id}: empty token list")
        if max_len is not None and len(self.words) > max_len:
            raise FormatError(f"query {self.query_id}: {len(self.words)} tokens exceeds max_len={max_len}")
        for p in self.noun_positions:
            if not 0 <= p < len(self.words):
                raise FormatError(f"query {self.query_id}: noun position {p} outside [0, {len(self.words)})")


class Vocabulary:
    """Word/id bijection with reserved pad, bos, and unk ids."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def build(cls, queries: Iterable[Query]) -> "Vocabulary":
        return cls(sorted({w for q in queries for w in q.words}))

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            out.append(self.itos[i])
        return out
