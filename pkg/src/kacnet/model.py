"""The grounding network: query-conditioned attention over proposals trained
with language and visual consistency losses under a knowledge gate.

All batched functions work on a flat row layout.  A batch of B queries with
N_b proposals each becomes R = sum(N_b) rows, and ``segments[r]`` gives the
query index of row r.  Single-query helpers are thin wrappers over the
batched code with B = 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from kacnet import autodiff as ad
from kacnet.autodiff import Tensor
from kacnet.errors import ConfigError, ContractError, DimensionError, NumericError, VocabularyError
from kacnet.kbp import KnowledgeConfig, apply_gate, compute_knowledge
from kacnet.layers import (
    AdamState,
    BatchNorm,
    FcLayer,
    RecurrentCell,
    adam_step,
    clip_grad_norm,
    l2_regularizer,
)
from kacnet.records import BOS, PAD, ProposalSet, Query, Vocabulary


@dataclass
class ModelConfig:
    vocab_size: int
    d_v: int
    embed_dim: int = 300
    d_q: int = 512
    d_r: int = 512
    m: int = 128
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for key in ("vocab_size", "d_v", "embed_dim", "d_q", "d_r", "m"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")


class KacModel:
    """Every learnable parameter of the network plus normalization buffers."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        self.config = config
        self.vocab = vocab
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ConfigError(f"vocabulary has {len(vocab)} entries but vocab_size={config.vocab_size}")
        rng = np.random.default_rng(config.seed)
        c = config
        self.embedding = ad.parameter(rng.normal(0.0, 0.1, size=(c.vocab_size, c.embed_dim)), name="embedding")
        self.encoder = RecurrentCell(c.embed_dim, c.d_q, rng, name="encoder")
        self.proj = FcLayer(c.d_q + 2 * c.d_v, c.m, rng, name="proj")
        self.bn = BatchNorm(c.m, momentum=c.bn_momentum, eps=c.bn_eps, name="bn")
        self.score = FcLayer(c.m, 5, rng, name="score")
        self.recon = FcLayer(c.d_v, c.d_r, rng, name="recon")
        self.decoder = RecurrentCell(c.embed_dim, c.d_r, rng, name="decoder")
        self.output = FcLayer(c.d_r, c.vocab_size, rng, name="output")

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        for part in (self.encoder, self.proj, self.bn, self.score, self.recon, self.decoder, self.output):
            yield from part.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.parameters())

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.bn.buffers()

    def regularized_layers(self) -> list[FcLayer]:
        return [self.proj, self.score, self.recon]

    def train(self) -> "KacModel":
        self.bn.training = True
        return self

    def eval(self) -> "KacModel":
        self.bn.training = False
        return self

    def token_ids(self, query: Query) -> list[int]:
        if self.vocab is None:
            raise ContractError("model has no vocabulary attached; pass token ids directly")
        return self.vocab.encode(query.words)


@dataclass
class AttentionOutput:
    s_p: Tensor
    conf_softmax: Tensor
    segments: np.ndarray
    n_queries: int = 1


@dataclass
class LossBreakdown:
    lc: float
    vc: float
    reg: float
    total: float
    lam: float
    mu: float


@dataclass
class GroundingResult:
    query_id: str
    chosen_index: int
    scores: np.ndarray
    chosen_box: tuple
    conf_softmax: np.ndarray = field(default_factory=lambda: np.zeros(0))
    raw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gate: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class Branches:
    lc: bool = True
    vc: bool = True

    def __post_init__(self):
        if not (self.lc or self.vc):
            raise ConfigError("at least one of the language and visual consistency branches must be enabled")

    @classmethod
    def parse(cls, name: str) -> "Branches":
        table = {"lc": cls(True, False), "vc": cls(False, True), "kac": cls(True, True), "both": cls(True, True)}
        try:
            return table[name.lower()]
        except KeyError:
            raise ConfigError(f"branches must be one of lc, vc, kac; got {name!r}") from None


# ---------------------------------------------------------------- encoder


def _pad(sequences: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    if not sequences or any(len(s) == 0 for s in sequences):
        raise ContractError("every query needs at least one token")
    longest = max(len(s) for s in sequences)
    ids = np.full((len(sequences), longest), PAD, dtype=np.intp)
    mask = np.zeros((len(sequences), longest))
    for b, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.intp)
        if np.any(seq < 0) or np.any(seq >= vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {vocab_size}: {seq.tolist()}")
        ids[b, : len(seq)] = seq
        mask[b, : len(seq)] = 1.0
    return ids, mask


def encode_batch(model: KacModel, sequences: Sequence[Sequence[int]]) -> Tensor:
    """Final encoder hidden state for each token sequence, [B, d_q]."""
    ids, mask = _pad(sequences, model.config.vocab_size)
    batch = len(sequences)
    h = Tensor(np.zeros((batch, model.config.d_q)))
    c = Tensor(np.zeros((batch, model.config.d_q)))
    for t in range(ids.shape[1]):
        x = model.embedding[ids[:, t]]
        h_new, c_new = model.encoder(x, h, c)
        if mask[:, t].all():
            h, c = h_new, c_new
        else:
            keep = Tensor(mask[:, t : t + 1])
            h = keep * h_new + (1.0 - keep) * h
            c = keep * c_new + (1.0 - keep) * c
    return h


def encode_query(model: KacModel, query: Query | Sequence[int]) -> Tensor:
    ids = model.token_ids(query) if isinstance(query, Query) else list(query)
    return encode_batch(model, [ids])[0]


# ---------------------------------------------------------------- attention


def stack_proposals(sets: Sequence[ProposalSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row features, row global features, and segment ids for a batch."""
    segments = np.concatenate([np.full(ps.n, b, dtype=np.intp) for b, ps in enumerate(sets)])
    feats = np.concatenate([ps.features for ps in sets])
    glob = np.concatenate([np.broadcast_to(ps.global_feature, (ps.n, ps.feature_dim)) for ps in sets])
    return feats, glob, segments


def project_rows(model: KacModel, q: Tensor, sets: Sequence[ProposalSet]) -> tuple[Tensor, np.ndarray]:
    d_v = model.config.d_v
    if q.ndim != 2 or q.shape != (len(sets), model.config.d_q):
        raise DimensionError(f"multimodal_project: query embeddings {q.shape} for {len(sets)} images")
    for ps in sets:
        if ps.feature_dim != d_v or ps.features.shape[1] != d_v:
            raise DimensionError(f"multimodal_project: image {ps.image_id} has feature dim {ps.feature_dim}, model d_v={d_v}")
    feats, glob, segments = stack_proposals(sets)
    joined = ad.concat([q[segments], Tensor(glob), Tensor(feats)], axis=1)
    hidden = model.bn(model.proj(joined))
    return ad.relu(hidden), segments


def multimodal_project(model: KacModel, q: Tensor, proposals: ProposalSet) -> Tensor:
    """Rows ReLU(BN(W_m [q; v; v_i] + b_m)) for one image, [N, m]."""
    q = ad.as_tensor(q)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    rows, _ = project_rows(model, q, [proposals])
    return rows


def attention_predict(model: KacModel, v_q: Tensor, segments: np.ndarray | None = None,
                      n_queries: int | None = None) -> AttentionOutput:
    if v_q.ndim != 2 or v_q.shape[1] != model.config.m:
        raise DimensionError(f"attention_predict: expected [rows, {model.config.m}], got {v_q.shape}")
    if segments is None:
        segments = np.zeros(v_q.shape[0], dtype=np.intp)
    n_queries = int(segments.max()) + 1 if n_queries is None else n_queries
    s_p = model.score(v_q)
    conf = ad.segment_softmax(s_p[:, 0], segments, n_queries)
    return AttentionOutput(s_p, conf, segments, n_queries)


# ---------------------------------------------------------------- visual consistency


def box_to_location_params(box: Sequence[float], width: float, height: float) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ContractError(f"image size must be positive, got {width}x{height}")
    x1, y1, x2, y2 = box
    return np.array([x1 / width, y1 / height, x2 / width, y2 / height]) - 0.5


def location_params_to_box(params: Sequence[float], width: float, height: float) -> tuple[float, ...]:
    p = np.asarray(params, dtype=np.float64)
    scale = np.array([width, height, width, height], dtype=np.float64)
    box = p * scale + 0.5 * scale
    # Undo the rounding of the forward division for whole-pixel coordinates.
    snapped = np.round(box)
    box = np.where(np.abs(box - snapped) <= 1e-9 * np.maximum(1.0, scale), snapped, box)
    return tuple(float(v) for v in box)


def location_params(proposals: ProposalSet) -> np.ndarray:
    scale = np.array([proposals.width, proposals.height, proposals.width, proposals.height])
    return proposals.boxes / scale - 0.5


def smooth_l1(x: float) -> float:
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def visual_consistency_terms(att: AttentionOutput, gate: np.ndarray, params_t: np.ndarray) -> Tensor:
    """Per-query sum_i gate_i * softmax_i * d_i, shape [B]."""
    n = att.s_p.shape[0]
    gate = np.asarray(gate, dtype=np.float64)
    params_t = np.asarray(params_t, dtype=np.float64)
    if gate.shape != (n,) or params_t.shape != (n, 4):
        raise DimensionError(f"visual_consistency_loss: gate {gate.shape}, targets {params_t.shape} for {n} proposals")
    diff = ad.absolute(Tensor(params_t) - att.s_p[:, 1:5])
    d = ad.mean(ad.smooth_l1(diff), axis=1)
    return ad.segment_sum(Tensor(gate) * att.conf_softmax * d, att.segments, att.n_queries)


def visual_consistency_loss(att: AttentionOutput, gate: np.ndarray, params_t: np.ndarray) -> Tensor:
    return visual_consistency_terms(att, gate, params_t).sum()


# ---------------------------------------------------------------- language consistency


def reconstruction_features(model: KacModel, att: AttentionOutput, gate: np.ndarray, features: np.ndarray) -> Tensor:
    """W_a (sum_i gate_i softmax_i v_i) + b_a for every query, [B, d_r]."""
    gate = np.asarray(gate, dtype=np.float64)
    weights = Tensor(gate) * att.conf_softmax
    pooled = ad.segment_sum(weights.reshape(-1, 1) * Tensor(features), att.segments, att.n_queries)
    return model.recon(pooled)


def reconstruction_feature(model: KacModel, att: AttentionOutput, gate: np.ndarray, proposals: ProposalSet) -> Tensor:
    return reconstruction_features(model, att, gate, proposals.features)[0]


def language_consistency_terms(model: KacModel, v_att: Tensor, sequences: Sequence[Sequence[int]]) -> Tensor:
    """Per-query mean token cross-entropy under teacher forcing, [B]."""
    ids, mask = _pad(sequences, model.config.vocab_size)
    batch, steps = ids.shape
    if v_att.shape != (batch, model.config.d_r):
        raise DimensionError(f"language_consistency_loss: v_att {v_att.shape}, expected ({batch}, {model.config.d_r})")
    lengths = mask.sum(axis=1)
    h = v_att
    c = Tensor(np.zeros((batch, model.config.d_r)))
    total = None
    rows = np.arange(batch)
    for t in range(steps):
        prev = np.full(batch, BOS, dtype=np.intp) if t == 0 else ids[:, t - 1]
        h, c = model.decoder(model.embedding[prev], h, c)
        logp = ad.log_softmax(model.output(h), axis=1)
        picked = logp[rows, ids[:, t]] * (mask[:, t] / lengths)
        total = picked if total is None else total + picked
    return -total


def language_consistency_loss(model: KacModel, v_att: Tensor, query: Query | Sequence[int]) -> Tensor:
    ids = model.token_ids(query) if isinstance(query, Query) else list(query)
    v_att = ad.as_tensor(v_att)
    if v_att.ndim == 1:
        v_att = v_att.reshape(1, -1)
    return language_consistency_terms(model, v_att, [ids])[0]


# ---------------------------------------------------------------- objective


def total_objective(lc, vc, reg, lam: float, mu: float, branches: Branches) -> LossBreakdown:
    """lc + lam * vc + mu * reg with disabled branches contributing zero."""
    lc_v = float(lc.item() if isinstance(lc, Tensor) else lc) if branches.lc else 0.0
    vc_v = float(vc.item() if isinstance(vc, Tensor) else vc) if branches.vc else 0.0
    reg_v = float(reg.item() if isinstance(reg, Tensor) else reg)
    return LossBreakdown(lc_v, vc_v, reg_v, lc_v + lam * vc_v + mu * reg_v, lam, mu)


def _combine(lc, vc, reg, lam: float, mu: float, branches: Branches):
    total = mu * reg
    if branches.vc:
        total = lam * vc + total
    if branches.lc:
        total = lc + total
    return total


@dataclass(eq=False)
class Sample:
    """A (query, image) pair with its cached knowledge gates."""

    query: Query
    proposals: ProposalSet
    token_ids: list[int]
    raw: np.ndarray
    gate_vc: np.ndarray
    gate_lc: np.ndarray
    fallback_applied: bool = False


def prepare_sample(model: KacModel, query: Query, proposals: ProposalSet, kcfg: KnowledgeConfig) -> Sample:
    raw = compute_knowledge(query, proposals, kcfg)
    vc = apply_gate(raw, kcfg, "consistency")
    lc = apply_gate(raw, kcfg, "reconstruction")
    return Sample(query, proposals, model.token_ids(query), raw, vc.gate, lc.gate, lc.fallback_applied)


@dataclass
class Objective:
    total: Tensor
    lc: Tensor
    vc: Tensor
    reg: Tensor
    per_query: Tensor


def batch_objective(model: KacModel, batch: Sequence[Sample], lam: float, mu: float, branches: Branches) -> Objective:
    """Mean over the batch of lc + lam * vc, plus mu * reg."""
    if not batch:
        raise ContractError("train batch is empty")
    sets = [s.proposals for s in batch]
    q = encode_batch(model, [s.token_ids for s in batch])
    rows, segments = project_rows(model, q, sets)
    att = attention_predict(model, rows, segments, len(batch))
    zero = Tensor(np.zeros(len(batch)))
    if branches.vc:
        targets = np.concatenate([location_params(ps) for ps in sets])
        vc = visual_consistency_terms(att, np.concatenate([s.gate_vc for s in batch]), targets)
    else:
        vc = zero
    if branches.lc:
        v_att = reconstruction_features(
            model, att, np.concatenate([s.gate_lc for s in batch]), np.concatenate([ps.features for ps in sets])
        )
        lc = language_consistency_terms(model, v_att, [s.token_ids for s in batch])
    else:
        lc = zero
    reg = l2_regularizer(model.regularized_layers())
    per_query = _combine(lc, vc, 0.0, lam, 0.0, branches)
    total = per_query.mean() + mu * reg
    return Objective(total, lc.mean(), vc.mean(), reg, per_query)


def _finite_inputs(s: Sample) -> bool:
    ps = s.proposals
    return all(np.all(np.isfinite(a)) for a in (ps.features, ps.global_feature, ps.boxes))


def train_step(model: KacModel, batch: Sequence[Sample], adam: AdamState, lam: float = 10.0, mu: float = 0.005,
               branches: Branches | None = None, clip: float = 10.0) -> LossBreakdown:
    branches = branches or Branches()
    model.train()
    obj = batch_objective(model, batch, lam, mu, branches)
    if not np.isfinite(obj.total.item()):
        # Batch normalization spreads one bad input over the whole batch, so blame bad inputs first.
        bad = [s.query.query_id for s in batch if not _finite_inputs(s)]
        bad = bad or [s.query.query_id for s, v in zip(batch, obj.per_query.data) if not np.isfinite(v)]
        raise NumericError(f"non-finite loss for query {bad[0] if bad else '<regularizer>'}")
    params = model.named_parameters()
    ad.backward(obj.total, params.values())
    grads = {name: p.grad for name, p in params.items()}
    if clip > 0:
        clip_grad_norm(grads, clip)
    adam_step(adam, params, grads)
    return LossBreakdown(obj.lc.item(), obj.vc.item(), obj.reg.item(), obj.total.item(), lam, mu)


# ---------------------------------------------------------------- inference


def ground_batch(model: KacModel, samples: Sequence[Sample], kcfg: KnowledgeConfig | str) -> list[GroundingResult]:
    """Pick argmax_i softmax_i * gate_i for every sample; ties go to the lowest index."""
    model.eval()
    with ad.no_grad():
        sets = [s.proposals for s in samples]
        q = encode_batch(model, [s.token_ids for s in samples])
        rows, segments = project_rows(model, q, sets)
        att = attention_predict(model, rows, segments, len(samples))
    conf = att.conf_softmax.data
    out = []
    for b, s in enumerate(samples):
        c = conf[segments == b]
        gate = apply_gate(s.raw, kcfg, "reconstruction").gate
        scores = c * gate
        j = int(np.argmax(scores))
        out.append(GroundingResult(s.query.query_id, j, scores, tuple(s.proposals.boxes[j]), c, s.raw, gate))
    return out


def ground(model: KacModel, query: Query, proposals: ProposalSet, kcfg: KnowledgeConfig) -> GroundingResult:
    return ground_batch(model, [prepare_sample(model, query, proposals, kcfg)], kcfg)[0]


def config_dict(model: KacModel) -> dict:
    return asdict(model.config)
