"""Grounding accuracy at an IoU threshold, with optional per-tag breakdown."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from kacnet.errors import ContractError


def box_area(box: Sequence[float]) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes, continuous convention."""
    area_a, area_b = box_area(a), box_area(b)
    if area_a <= 0 or area_b <= 0:
        raise ContractError(f"iou: degenerate box {tuple(a) if area_a <= 0 else tuple(b)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


@dataclass
class TagStats:
    count: int = 0
    hits: int = 0

    @property
    def accuracy(self) -> float:
        return self.hits / self.count if self.count else 0.0


@dataclass
class QueryOutcome:
    query_id: str
    chosen_box: tuple
    gt_box: tuple
    iou: float
    hit: bool


@dataclass
class EvalReport:
    total: int
    hits: int
    threshold: float = 0.5
    breakdown: dict[str, TagStats] = field(default_factory=dict)
    outcomes: list[QueryOutcome] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.hits / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        out = {"total": self.total, "hits": self.hits, "accuracy": self.accuracy, "iou_threshold": self.threshold}
        if self.breakdown:
            out["breakdown"] = {
                tag: {"count": s.count, "hits": s.hits, "accuracy": s.accuracy}
                for tag, s in sorted(self.breakdown.items())
            }
        if self.config:
            out["config"] = self.config
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'group':<20} {'count':>7} {'hits':>7} {'accuracy':>9}",
                 f"{'all':<20} {self.total:>7} {self.hits:>7} {100 * self.accuracy:>8.2f}%"]
        for tag, s in sorted(self.breakdown.items()):
            lines.append(f"{tag:<20} {s.count:>7} {s.hits:>7} {100 * s.accuracy:>8.2f}%")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id", "chosen_box", "gt_box", "iou", "hit"])
            for o in self.outcomes:
                writer.writerow([
                    o.query_id,
                    " ".join(repr(float(v)) for v in o.chosen_box),
                    " ".join(repr(float(v)) for v in o.gt_box),
                    repr(o.iou),
                    int(o.hit),
                ])


def accuracy_at_iou(results: Iterable, queries: Iterable, threshold: float = 0.5,
                    tags: dict[str, Sequence[str]] | None = None) -> EvalReport:
    """Share of queries whose chosen box overlaps the ground truth by more than ``threshold``.

    ``results`` are objects with ``query_id`` and ``chosen_box``.  Tags come
    from ``tags`` when given, else from each query's own ``tags`` field.
    """
    by_id = {q.query_id: q for q in queries}
    results = list(results)
    missing = [r.query_id for r in results if r.query_id not in by_id or by_id[r.query_id].gt_box is None]
    if missing:
        raise ContractError(f"queries without a ground-truth box: {', '.join(missing)}")
    report = EvalReport(total=0, hits=0, threshold=threshold)
    for r in results:
        q = by_id[r.query_id]
        score = iou(r.chosen_box, q.gt_box)
        hit = score > threshold
        report.total += 1
        report.hits += int(hit)
        report.outcomes.append(QueryOutcome(r.query_id, tuple(r.chosen_box), tuple(q.gt_box), score, hit))
        for tag in (tags.get(r.query_id, ()) if tags is not None else q.tags):
            stats = report.breakdown.setdefault(tag, TagStats())
            stats.count += 1
            stats.hits += int(hit)
    return report


def load_tags(path) -> dict[str, list[str]]:
    """Read ``query_id<TAB>tag[,tag...]`` lines."""
    tags: dict[str, list[str]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            qid, _, rest = line.partition("\t")
            tags[qid] = [t for t in rest.split(",") if t]
    return tags
