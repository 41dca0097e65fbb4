"""Knowledge based pooling: class-name/noun similarity and proposal gating.

Each proposal's most probable detector class is compared with the query's
noun words through pretrained word embeddings; the averaged cosine is the
proposal's knowledge score.  Scores are turned into gates either softly
(sigmoid) or by thresholding.  Knowledge is external and constant, so
nothing here touches the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from kacnet.errors import ConfigError, ContractError, FormatError, NumericError
from kacnet.records import ProposalSet, Query

GateMode = Literal["hard", "soft", "none"]
Context = Literal["consistency", "reconstruction"]


class EmbeddingTable:
    """Word -> unit-normalized vector lookup."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None):
        self.dim = dim if dim is not None else (len(next(iter(vectors.values()))) if vectors else 0)
        self._vectors: dict[str, np.ndarray] = {}
        for word, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise FormatError(f"embedding for {word!r} has dim {vec.shape}, expected {self.dim}")
            norm = np.linalg.norm(vec)
            if norm == 0 or not np.isfinite(norm):
                raise NumericError(f"embedding for {word!r} has zero or non-finite norm")
            self._vectors[word] = vec / norm

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def get(self, word: str) -> np.ndarray | None:
        """Vector for ``word`` or None when absent."""
        return self._vectors.get(word)

    def words(self) -> list[str]:
        return list(self._vectors)

    def phrase_vector(self, phrase: str) -> np.ndarray | None:
        # Multi-word names use the mean of their in-vocabulary word vectors.
        vecs = [v for v in (self.get(w) for w in phrase.split()) if v is not None]
        if not vecs:
            return None
        return np.mean(vecs, axis=0)


def word_similarity(a: str, b: str, embeddings: EmbeddingTable) -> float:
    """Cosine similarity of two words or phrases; 0 when either is unknown."""
    va, vb = embeddings.phrase_vector(a), embeddings.phrase_vector(b)
    if va is None or vb is None:
        return 0.0
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise NumericError(f"zero-norm embedding while comparing {a!r} and {b!r}")
    return float(va @ vb / (na * nb))


@dataclass
class KnowledgeConfig:
    mode: GateMode
    class_names: list[str]
    embeddings: EmbeddingTable
    threshold: float = 0.3

    def __post_init__(self):
        if self.mode not in ("hard", "soft", "none"):
            raise ConfigError(f"gate mode must be hard, soft, or none; got {self.mode!r}")
        if self.mode == "hard" and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"hard gate threshold must lie in [0, 1], got {self.threshold}")
        if len(self.class_names) < 1:
            raise ConfigError("at least one class name is required")
        self._sim_cache: dict[tuple[int, str], float] = {}

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_similarity(self, class_index: int, word: str) -> float:
        key = (class_index, word)
        if key not in self._sim_cache:
            self._sim_cache[key] = word_similarity(self.class_names[class_index], word, self.embeddings)
        return self._sim_cache[key]


@dataclass
class KnowledgeScores:
    raw: np.ndarray
    gate: np.ndarray
    fallback_applied: bool = False


def top_classes(class_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximizer, i.e. the lowest class index on ties.
    return np.argmax(class_probs, axis=1)


def compute_knowledge(query: Query, proposals: ProposalSet, cfg: KnowledgeConfig) -> np.ndarray:
    """Average similarity between each proposal's top class and the query nouns."""
    if proposals.class_probs.shape[1] != cfg.num_classes:
        raise FormatError(
            f"image {proposals.image_id}: class distribution length "
            f"{proposals.class_probs.shape[1]} != {cfg.num_classes} class names"
        )
    nouns = query.nouns
    if not nouns:
        return np.zeros(proposals.n)
    best = top_classes(proposals.class_probs)
    return np.array([np.mean([cfg.class_similarity(int(c), w) for w in nouns]) for c in best])


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def apply_gate(raw: np.ndarray, cfg: KnowledgeConfig | GateMode, context: Context = "consistency",
               threshold: float | None = None) -> KnowledgeScores:
    """Turn raw knowledge into per-proposal multipliers.

    Hard gating compares the raw score itself against the threshold.  When
    every hard indicator is zero the reconstruction context falls back to
    all ones; the consistency context keeps the zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ContractError("apply_gate: knowledge scores must be finite")
    if isinstance(cfg, KnowledgeConfig):
        mode, t = cfg.mode, cfg.threshold if threshold is None else threshold
    else:
        mode, t = cfg, 0.3 if threshold is None else threshold
    if context not in ("consistency", "reconstruction"):
        raise ContractError(f"apply_gate: unknown context {context!r}")
    if mode == "none":
        return KnowledgeScores(raw, np.ones_like(raw))
    if mode == "soft":
        return KnowledgeScores(raw, sigmoid(raw))
    gate = (raw >= t).astype(np.float64)
    if context == "reconstruction" and not gate.any():
        return KnowledgeScores(raw, np.ones_like(raw), fallback_applied=True)
    return KnowledgeScores(raw, gate)


def extract_nouns(tokens: Sequence[str], lexicon) -> list[int]:
    """Positions of tokens found in the noun lexicon (repeats included)."""
    if not tokens:
        raise ContractError("extract_nouns: empty token list")
    return [i for i, tok in enumerate(tokens) if tok in lexicon]
