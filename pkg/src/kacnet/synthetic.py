"""Synthetic grounding benchmark with a known target proposal per query.

Each image gets one query naming a target class.  The target proposal's
feature is that class's prototype plus Gaussian noise; every distractor
carries a different class's prototype.  Detector class distributions are
peaked on the true class and can be corrupted at a controllable rate.
A class word matches its own class name with similarity 1.  Different
class names share part of their vectors (``name_overlap``), so unrelated
names have graded similarities around 0.2, roughly what pretrained word
vectors give for unrelated nouns.  Filler words are orthogonal to all names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kacnet.errors import ConfigError
from kacnet.evaluation import iou
from kacnet.records import ProposalSet, Query

CLASS_WORDS = [
    "dog", "man", "car", "tree", "horse", "woman", "ball", "boat", "bike", "chair",
    "cat", "bus", "bird", "shirt", "hat", "table", "sign", "child", "train", "cup",
    "plane", "cow", "sheep", "bottle", "bench", "kite", "clock", "bag", "umbrella", "truck",
]
FILLERS = ["on", "the", "left", "right", "near", "small", "big", "red", "blue", "running",
           "standing", "in", "front", "behind", "with", "white", "black", "old", "young", "green"]
SHARED_DIMS = 4


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    proposals: int = 8
    feature_dim: int = 32
    images: int = 500
    noise: float = 0.5
    overlap_prob: float = 0.3
    corrupt_prob: float = 0.1
    class_noise: float = 0.5
    embed_dim: int = 50
    name_overlap: float = 0.4
    seed: int = 0
    stream: int = 0
    id_prefix: str = ""

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"synthetic spec needs at least 2 classes, got {self.num_classes}")
        if self.proposals < 2:
            raise ConfigError(f"synthetic spec needs at least 2 proposals, got {self.proposals}")
        if self.num_classes > len(CLASS_WORDS):
            raise ConfigError(f"at most {len(CLASS_WORDS)} synthetic classes are available")
        if self.feature_dim < 1 or self.images < 1:
            raise ConfigError("feature_dim and images must be positive")
        need = self.num_classes + len(FILLERS) + 1 + SHARED_DIMS
        if self.embed_dim < need:
            raise ConfigError(f"embed_dim must be at least {need}")
        if not 0.0 <= self.name_overlap < 1.0:
            raise ConfigError("name_overlap must lie in [0, 1)")
        if self.noise < 0 or self.class_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        for key in ("overlap_prob", "corrupt_prob"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")


@dataclass
class SyntheticCorpus:
    images: list[ProposalSet]
    queries: list[Query]
    class_names: list[str]
    embeddings: dict[str, np.ndarray]
    lexicon: set[str]
    target_index: dict[str, int]


def _world(spec: SyntheticSpec):
    """Class names, prototypes, and embeddings; depends only on the seed and sizes."""
    rng = np.random.default_rng([spec.seed, 0])
    C = spec.num_classes
    names = CLASS_WORDS[:C]
    prototypes = rng.normal(size=(C, spec.feature_dim))
    basis, _ = np.linalg.qr(rng.normal(size=(spec.embed_dim, spec.embed_dim)))
    # Each name = private direction + a direction in a small subspace shared by all names.
    anchor = rng.normal(size=SHARED_DIMS)
    anchor /= np.linalg.norm(anchor)
    shared = anchor + 0.5 * rng.normal(size=(C, SHARED_DIMS))
    shared /= np.linalg.norm(shared, axis=1, keepdims=True)
    shared_basis = basis[:, -SHARED_DIMS:]
    rho = spec.name_overlap
    embeddings = {}
    for i, w in enumerate(names):
        embeddings[w] = np.sqrt(1.0 - rho) * basis[:, i] + np.sqrt(rho) * (shared_basis @ shared[i])
    for i, w in enumerate(FILLERS + ["a"]):
        embeddings[w] = basis[:, C + i].copy()
    return names, prototypes, embeddings


def _random_box(rng, w: float, h: float) -> np.ndarray:
    bw = rng.uniform(0.2, 0.5) * w
    bh = rng.uniform(0.2, 0.5) * h
    x1 = rng.uniform(0, w - bw)
    y1 = rng.uniform(0, h - bh)
    return np.array([x1, y1, x1 + bw, y1 + bh])


def _overlapping_box(rng, target: np.ndarray, w: float, h: float) -> np.ndarray:
    tw, th = target[2] - target[0], target[3] - target[1]
    bw = tw * rng.uniform(0.6, 1.2)
    bh = th * rng.uniform(0.6, 1.2)
    x1 = np.clip(target[0] + rng.uniform(-0.6, 0.6) * tw, 0, max(w - bw, 0))
    y1 = np.clip(target[1] + rng.uniform(-0.6, 0.6) * th, 0, max(h - bh, 0))
    return np.array([x1, y1, min(x1 + bw, w), min(y1 + bh, h)])


def _distractor_box(rng, target: np.ndarray, w: float, h: float, overlap: bool) -> np.ndarray:
    # Distractors must stay below the hit threshold so picking one is a miss.
    for _ in range(200):
        box = _overlapping_box(rng, target, w, h) if overlap else _random_box(rng, w, h)
        score = iou(box, target)
        if score < 0.4 and (not overlap or score > 0.05):
            return box
    for _ in range(1000):
        box = _random_box(rng, w, h)
        if iou(box, target) < 0.4:
            return box
    raise RuntimeError("could not place a distractor box")


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    spec.validate()
    names, prototypes, embeddings = _world(spec)
    rng = np.random.default_rng([spec.seed, 1, spec.stream])
    C, N = spec.num_classes, spec.proposals
    images: list[ProposalSet] = []
    queries: list[Query] = []
    targets: dict[str, int] = {}
    for k in range(spec.images):
        image_id = f"{spec.id_prefix}img{k:05d}"
        w = float(rng.integers(200, 501))
        h = float(rng.integers(200, 501))
        target_class = int(rng.integers(C))
        others = [c for c in range(C) if c != target_class]
        if N - 1 <= len(others):
            distractor_classes = list(rng.choice(others, size=N - 1, replace=False))
        else:
            distractor_classes = list(rng.choice(others, size=N - 1, replace=True))
        classes = np.array([target_class] + [int(c) for c in distractor_classes])
        target_box = _random_box(rng, w, h)
        boxes = [target_box] + [
            _distractor_box(rng, target_box, w, h, bool(rng.random() < spec.overlap_prob)) for _ in range(N - 1)
        ]
        order = rng.permutation(N)
        classes = classes[order]
        boxes = np.array(boxes)[order]
        target = int(np.flatnonzero(order == 0)[0])

        features = prototypes[classes] + spec.noise * rng.normal(size=(N, spec.feature_dim))
        logits = 4.0 * np.eye(C)[classes] + spec.class_noise * rng.normal(size=(N, C))
        corrupt = rng.random(N) < spec.corrupt_prob
        for i in np.flatnonzero(corrupt):
            wrong = int(rng.choice([c for c in range(C) if c != classes[i]]))
            logits[i] = spec.class_noise * rng.normal(size=C)
            logits[i, wrong] += 4.0
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)

        images.append(ProposalSet(image_id, w, h, features.mean(axis=0), boxes, features, probs))
        fillers = list(rng.choice(FILLERS, size=int(rng.integers(0, 3))))
        words = ["a", names[target_class]] + [str(f) for f in fillers]
        qid = f"{spec.id_prefix}q{k:05d}"
        queries.append(Query(qid, image_id, words, [1], tuple(float(v) for v in boxes[target]), [names[target_class]]))
        targets[qid] = target
    return SyntheticCorpus(images, queries, list(names), embeddings, set(names), targets)
