"""Reading and writing corpus, embedding, class-name, and lexicon files.

Every file starts with a versioned header line.  Corpus files are JSON
lines:

``images`` file
    header ``{"format": "kacnet-images", "version": 1, "feature_dim": D, "num_classes": K}``
    then one record per image::

        {"image_id": str, "width": float, "height": float,
         "global_feature": [D floats],
         "proposals": [{"box": [x1, y1, x2, y2], "feature": [D floats],
                        "class_probs": [K floats]}, ...]}

``queries`` file
    header ``{"format": "kacnet-queries", "version": 1}`` then::

        {"query_id": str, "image_id": str, "tokens": [words],
         "noun_positions": [ints] (optional), "gt_box": [4 floats] | null,
         "tags": [str] (optional)}

Plain-text files (embeddings, class names, lexicon) start with
``# kacnet-<kind> v1``; further ``#`` lines are comments.  Embeddings are
``word v1 ... vd`` per line, class names one per line with the n-th entry
being class n, and the lexicon one noun per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kacnet.errors import DanglingReferenceError, FormatError
from kacnet.kbp import EmbeddingTable, extract_nouns
from kacnet.records import ProposalSet, Query, check_box

FORMAT_VERSION = 1


@dataclass
class Corpus:
    images: dict[str, ProposalSet]
    queries: list[Query]
    feature_dim: int
    num_classes: int

    def proposals_for(self, query: Query) -> ProposalSet:
        return self.images[query.image_id]


def _read_jsonl(path: Path, expected_format: str) -> tuple[dict, list[tuple[int, dict]]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    if not lines:
        raise FormatError(f"{path}: empty file, expected a {expected_format} header")
    records = []
    header = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise FormatError(f"{path}:{lineno}: expected an object")
        if header is None:
            if obj.get("format") != expected_format:
                raise FormatError(f"{path}:{lineno}: expected header with format {expected_format!r}")
            if obj.get("version") != FORMAT_VERSION:
                raise FormatError(f"{path}:{lineno}: unsupported version {obj.get('version')!r}")
            header = obj
            continue
        records.append((lineno, obj))
    if header is None:
        raise FormatError(f"{path}: missing {expected_format} header")
    return header, records


def _field(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except KeyError:
        raise FormatError(f"{where}: missing field {key!r}") from None


def parse_image(obj: dict, where: str, feature_dim: int, num_classes: int) -> ProposalSet:
    proposals = _field(obj, "proposals", where)
    if not isinstance(proposals, list) or not proposals:
        raise FormatError(f"{where}: 'proposals' must be a non-empty list")
    try:
        ps = ProposalSet(
            image_id=str(_field(obj, "image_id", where)),
            width=float(_field(obj, "width", where)),
            height=float(_field(obj, "height", where)),
            global_feature=np.array(_field(obj, "global_feature", where), dtype=np.float64),
            boxes=np.array([_field(p, "box", where) for p in proposals], dtype=np.float64),
            features=np.array([_field(p, "feature", where) for p in proposals], dtype=np.float64),
            class_probs=np.array([_field(p, "class_probs", where) for p in proposals], dtype=np.float64),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None
    if ps.global_feature.shape != (feature_dim,):
        raise FormatError(f"{where}: global_feature has length {ps.global_feature.size}, header says {feature_dim}")
    try:
        ps.validate(num_classes)
    except FormatError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return ps


def parse_query(obj: dict, where: str, lexicon=None) -> Query:
    tokens = _field(obj, "tokens", where)
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise FormatError(f"{where}: 'tokens' must be a list of words")
    if not tokens:
        raise FormatError(f"{where}: empty token list")
    nouns = obj.get("noun_positions")
    if nouns is None:
        nouns = extract_nouns(tokens, lexicon) if lexicon is not None else []
    gt = obj.get("gt_box")
    q = Query(
        query_id=str(_field(obj, "query_id", where)),
        image_id=str(_field(obj, "image_id", where)),
        words=list(tokens),
        noun_positions=[int(p) for p in nouns],
        gt_box=tuple(float(v) for v in gt) if gt is not None else None,
        tags=[str(t) for t in obj.get("tags", [])],
    )
    try:
        q.validate()
    except FormatError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return q


def load_grounding_corpus(images_path, queries_path, lexicon=None) -> Corpus:
    """Load and cross-validate an images file and a queries file.

    Queries without ``noun_positions`` fall back to lexicon lookup when a
    lexicon is supplied, otherwise they carry no nouns.
    """
    header, records = _read_jsonl(Path(images_path), "kacnet-images")
    try:
        feature_dim = int(header["feature_dim"])
        num_classes = int(header["num_classes"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{images_path}:1: header needs integer feature_dim and num_classes") from None
    images: dict[str, ProposalSet] = {}
    for lineno, obj in records:
        where = f"{images_path}:{lineno}"
        ps = parse_image(obj, where, feature_dim, num_classes)
        if ps.image_id in images:
            raise FormatError(f"{where}: duplicate image_id {ps.image_id!r}")
        images[ps.image_id] = ps

    _, qrecords = _read_jsonl(Path(queries_path), "kacnet-queries")
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, obj in qrecords:
        where = f"{queries_path}:{lineno}"
        q = parse_query(obj, where, lexicon)
        if q.query_id in seen:
            raise FormatError(f"{where}: duplicate query_id {q.query_id!r}")
        seen.add(q.query_id)
        if q.image_id not in images:
            raise DanglingReferenceError(f"{where}: query {q.query_id!r} refers to unknown image_id {q.image_id!r}")
        if q.gt_box is not None:
            ps = images[q.image_id]
            try:
                check_box(q.gt_box, ps.width, ps.height, what=f"query {q.query_id} gt_box")
            except FormatError as exc:
                raise FormatError(f"{where}: {exc}") from None
        queries.append(q)
    return Corpus(images, queries, feature_dim, num_classes)


def without_ground_truth(queries: Iterable[Query]) -> list[Query]:
    """Copies of ``queries`` with ground-truth boxes removed, for training."""
    return [replace(q, gt_box=None) for q in queries]


def _floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values).reshape(-1)]


def write_images(path, images: Sequence[ProposalSet], num_classes: int | None = None) -> None:
    if not images:
        raise FormatError("cannot write an empty images file")
    k = num_classes if num_classes is not None else images[0].class_probs.shape[1]
    header = {"format": "kacnet-images", "version": FORMAT_VERSION,
              "feature_dim": images[0].feature_dim, "num_classes": k}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ps in images:
            rec = {
                "image_id": ps.image_id,
                "width": float(ps.width),
                "height": float(ps.height),
                "global_feature": _floats(ps.global_feature),
                "proposals": [
                    {"box": _floats(ps.boxes[i]), "feature": _floats(ps.features[i]),
                     "class_probs": _floats(ps.class_probs[i])}
                    for i in range(ps.n)
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def write_queries(path, queries: Sequence[Query]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "kacnet-queries", "version": FORMAT_VERSION}) + "\n")
        for q in queries:
            rec = {
                "query_id": q.query_id,
                "image_id": q.image_id,
                "tokens": list(q.words),
                "noun_positions": list(q.noun_positions),
                "gt_box": [float(v) for v in q.gt_box] if q.gt_box is not None else None,
            }
            if q.tags:
                rec["tags"] = list(q.tags)
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- plain-text files


def _text_lines(path, kind: str) -> list[tuple[int, str]]:
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from None
    out = []
    for lineno, line in enumerate(raw, start=1):
        if lineno == 1 and line.startswith("# kacnet-"):
            if line.split()[1:] != [f"kacnet-{kind}", f"v{FORMAT_VERSION}"]:
                raise FormatError(f"{path}:1: expected header '# kacnet-{kind} v{FORMAT_VERSION}'")
            continue
        if line.startswith("#") or not line.strip():
            continue
        out.append((lineno, line.strip()))
    return out


def load_embeddings(path) -> EmbeddingTable:
    """Read ``word v1 ... vd`` lines into a unit-normalized table.

    A word2vec-style ``count dim`` first line is accepted and skipped.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    lines = _text_lines(path, "embeddings")
    if lines:
        parts = lines[0][1].split()
        if len(parts) == 2 and all(p.isdigit() for p in parts):
            lines = lines[1:]
    for lineno, line in lines:
        parts = line.split()
        word, values = parts[0], parts[1:]
        try:
            vec = np.array([float(v) for v in values])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric vector entry for {word!r}") from None
        if dim is None:
            dim = vec.size
        if vec.size != dim or dim == 0:
            raise FormatError(f"{path}:{lineno}: {word!r} has {vec.size} values, expected {dim}")
        if word in vectors:
            raise FormatError(f"{path}:{lineno}: duplicate word {word!r}")
        vectors[word] = vec
    return EmbeddingTable(vectors, dim or 0)


def write_embeddings(path, vectors: dict[str, np.ndarray]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# kacnet-embeddings v{FORMAT_VERSION}\n")
        for word, vec in vectors.items():
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_class_names(path) -> list[str]:
    names = [line for _, line in _text_lines(path, "classes")]
    if not names:
        raise FormatError(f"{path}: no class names")
    return names


def write_class_names(path, names: Sequence[str]) -> None:
    Path(path).write_text(f"# kacnet-classes v{FORMAT_VERSION}\n" + "".join(n + "\n" for n in names))


def load_lexicon(path) -> set[str]:
    return {line for _, line in _text_lines(path, "lexicon")}


def write_lexicon(path, words: Iterable[str]) -> None:
    Path(path).write_text(f"# kacnet-lexicon v{FORMAT_VERSION}\n" + "".join(w + "\n" for w in sorted(set(words))))
