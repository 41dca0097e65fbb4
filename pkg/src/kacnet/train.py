"""Training loop and evaluation driver shared by the CLI and the tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from kacnet.config import RunConfig
from kacnet.corpus import Corpus, without_ground_truth
from kacnet.evaluation import EvalReport, accuracy_at_iou
from kacnet.kbp import EmbeddingTable, KnowledgeConfig
from kacnet.layers import AdamState
from kacnet.model import Branches, KacModel, LossBreakdown, ModelConfig, Sample, ground_batch, prepare_sample, train_step
from kacnet.records import ProposalSet, Query, Vocabulary

log = logging.getLogger(__name__)

METRICS_HEADER = "step\tlc\tvc\treg\ttotal"


def cap_proposals(ps: ProposalSet, n_cap: int) -> ProposalSet:
    if ps.n <= n_cap:
        return ps
    return replace(ps, boxes=ps.boxes[:n_cap], features=ps.features[:n_cap], class_probs=ps.class_probs[:n_cap])


def knowledge_config(cfg: RunConfig, class_names: list[str], embeddings: EmbeddingTable) -> KnowledgeConfig:
    return KnowledgeConfig(cfg.gate, class_names, embeddings, cfg.threshold)


def build_model(cfg: RunConfig, corpus: Corpus) -> KacModel:
    vocab = Vocabulary.build(corpus.queries)
    mcfg = ModelConfig(
        vocab_size=len(vocab), d_v=corpus.feature_dim, embed_dim=cfg.embed_dim,
        d_q=cfg.d_q, d_r=cfg.d_r, m=cfg.m, seed=cfg.seed,
    )
    return KacModel(mcfg, vocab)


def make_samples(model: KacModel, queries: Sequence[Query], images: dict[str, ProposalSet],
                 kcfg: KnowledgeConfig, n_cap: int) -> list[Sample]:
    return [prepare_sample(model, q, cap_proposals(images[q.image_id], n_cap), kcfg) for q in queries]


@dataclass
class TrainResult:
    steps: int = 0
    history: list[LossBreakdown] = field(default_factory=list)
    best_accuracy: float | None = None


def train(model: KacModel, corpus: Corpus, kcfg: KnowledgeConfig, cfg: RunConfig,
          metrics=None, on_epoch: Callable[[int, KacModel], None] | None = None,
          val: Corpus | None = None, on_best: Callable[[KacModel, EvalReport], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` passes of Adam over the corpus.

    ``metrics`` is a writable text stream receiving one row per optimizer
    step.  Ground-truth boxes are stripped before anything reaches the
    optimizer.
    """
    branches = Branches.parse(cfg.branches)
    samples = make_samples(model, without_ground_truth(corpus.queries), corpus.images, kcfg, cfg.n_cap)
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            loss = train_step(model, batch, adam, cfg.lam, cfg.mu, branches, cfg.clip)
            result.steps += 1
            result.history.append(loss)
            if metrics is not None:
                metrics.write(f"{result.steps}\t{loss.lc!r}\t{loss.vc!r}\t{loss.reg!r}\t{loss.total!r}\n")
        if metrics is not None:
            metrics.flush()
        last = result.history[-1] if result.history else None
        log.info("epoch %d/%d total=%s", epoch + 1, cfg.epochs, f"{last.total:.4f}" if last else "n/a")
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
        if val is not None:
            report = evaluate(model, val, kcfg, cfg.n_cap)
            if result.best_accuracy is None or report.accuracy > result.best_accuracy:
                result.best_accuracy = report.accuracy
                if on_best is not None:
                    on_best(model, report)
    return result


def evaluate(model: KacModel, corpus: Corpus, kcfg: KnowledgeConfig, n_cap: int = 100,
             tags: dict | None = None, threshold: float = 0.5) -> EvalReport:
    samples = make_samples(model, corpus.queries, corpus.images, kcfg, n_cap)
    results = ground_batch(model, samples, kcfg) if samples else []
    return accuracy_at_iou(results, corpus.queries, threshold, tags)
