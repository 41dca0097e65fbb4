import math

import numpy as np
import pytest

import reference as ref
from conftest import random_proposal_set, random_sample, small_model
from kacnet import autodiff as ad
from kacnet.autodiff import Tensor
from kacnet.errors import ConfigError, ContractError, DimensionError, NumericError, VocabularyError
from kacnet.kbp import EmbeddingTable, KnowledgeConfig, apply_gate
from kacnet.layers import AdamState, recurrent_step
from kacnet.model import (
    AttentionOutput,
    Branches,
    Sample,
    attention_predict,
    batch_objective,
    box_to_location_params,
    encode_batch,
    encode_query,
    ground,
    ground_batch,
    language_consistency_loss,
    location_params,
    location_params_to_box,
    multimodal_project,
    reconstruction_feature,
    smooth_l1,
    total_objective,
    train_step,
    visual_consistency_loss,
)
from kacnet.records import BOS, ProposalSet, Query, Vocabulary


def fd(f, *xs):
    return ad.finite_difference_check(f, list(xs), h=1e-5, oracle_dtype=np.longdouble)


def att_from_logits(logits, extra=None):
    logits = np.asarray(logits, dtype=np.float64)
    n = len(logits)
    s_p = np.zeros((n, 5))
    s_p[:, 0] = logits
    if extra is not None:
        s_p[:, 1:] = extra
    s_p = Tensor(s_p)
    return AttentionOutput(s_p, ad.segment_softmax(s_p[:, 0], np.zeros(n, dtype=np.intp), 1), np.zeros(n, dtype=np.intp))


# ---------------------------------------------------------------- query encoder


def test_zero_encoder_gives_zero_query():
    model = small_model()
    for _, p in model.encoder.parameters():
        p.data[...] = 0.0
    assert np.all(encode_query(model, [3, 4, 5]).data == 0.0)


def test_single_token_is_one_recurrent_step():
    model = small_model()
    x = model.embedding.data[[4]]
    h, _ = recurrent_step(model.encoder, Tensor(x), Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6))))
    assert np.array_equal(encode_query(model, [4]).data, h.data[0])


def test_encoder_is_order_sensitive():
    model = small_model(rescale=0.5)
    assert not np.allclose(encode_query(model, [3, 4, 5]).data, encode_query(model, [5, 3, 4]).data)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_matches_scalar_loop(seed):
    model = small_model(seed, rescale=0.5)
    tokens = [3, 6, 4, 5]
    e = model.encoder
    expected = ref.encode(model.embedding.data.tolist(), e.w_ih.data.tolist(), e.w_hh.data.tolist(),
                          e.bias.data.tolist(), tokens, 6)
    np.testing.assert_allclose(encode_query(model, tokens).data, expected, atol=1e-12, rtol=0)


def test_padded_batch_matches_individual_encodings():
    model = small_model(rescale=0.5)
    seqs = [[3], [4, 5, 6], [6, 5]]
    batch = encode_batch(model, seqs).data
    for b, s in enumerate(seqs):
        np.testing.assert_allclose(batch[b], encode_query(model, s).data, atol=1e-15)


def test_unknown_token_id_is_vocabulary_error():
    with pytest.raises(VocabularyError):
        encode_query(small_model(vocab_size=7), [3, 7])


# ---------------------------------------------------------------- multimodal projection


def test_zero_projection_gives_zero_rows(rng):
    model = small_model()
    model.proj.weight.data[...] = 0.0
    rows = multimodal_project(model, Tensor(rng.normal(size=6)), random_proposal_set(rng, 3))
    assert np.all(rows.data == 0.0)


def test_identical_proposals_give_identical_rows(rng):
    model = small_model(rescale=0.5)
    ps = random_proposal_set(rng, 3)
    ps.features[1] = ps.features[0]
    rows = multimodal_project(model, Tensor(rng.normal(size=6)), ps).data
    assert np.array_equal(rows[0], rows[1])


def _reference_rows(model, q, ps):
    n = ps.n
    return ref.multimodal_rows(model.proj.weight.data.tolist(), model.proj.bias.data.tolist(),
                               model.bn.scale.data.tolist(), model.bn.shift.data.tolist(), model.bn.eps,
                               [q.tolist()] * n, [ps.global_feature.tolist()] * n, ps.features.tolist())


@pytest.mark.parametrize("seed", range(10))
def test_projection_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed, rescale=0.5)
    ps = random_proposal_set(rng, int(rng.integers(2, 7)))
    q = rng.normal(size=6)
    np.testing.assert_allclose(multimodal_project(model, Tensor(q), ps).data, _reference_rows(model, q, ps),
                               atol=1e-10, rtol=0)


def test_projection_rejects_wrong_feature_width(rng):
    with pytest.raises(DimensionError):
        multimodal_project(small_model(d_v=5), Tensor(rng.normal(size=6)), random_proposal_set(rng, 3, d_v=4))


# ---------------------------------------------------------------- attention


def test_single_proposal_gets_all_attention(rng):
    model = small_model()
    model.eval()
    out = attention_predict(model, Tensor(rng.normal(size=(1, 5))))
    assert out.conf_softmax.data.tolist() == [1.0]


def test_equal_confidences_are_uniform(rng):
    model = small_model()
    model.score.weight.data[0] = 0.0
    out = attention_predict(model, Tensor(rng.normal(size=(4, 5))))
    np.testing.assert_allclose(out.conf_softmax.data, [0.25] * 4, atol=1e-15)


def test_confidence_softmax_fixture():
    model = small_model()
    model.score.weight.data[...] = 0.0
    model.score.weight.data[0, 0] = 1.0
    v_q = np.zeros((3, 5))
    v_q[:, 0] = [2.0, 1.0, 0.0]
    out = attention_predict(model, Tensor(v_q))
    np.testing.assert_allclose(out.conf_softmax.data, [0.66524096, 0.24472847, 0.09003057], atol=1e-8)
    assert out.s_p.shape == (3, 5)


# ---------------------------------------------------------------- location parameters and smooth L1


def test_full_image_box_params():
    assert box_to_location_params((0, 0, 40, 30), 40, 30).tolist() == [-0.5, -0.5, 0.5, 0.5]


def test_box_params_fixture():
    assert box_to_location_params((25, 50, 75, 150), 100, 200).tolist() == [-0.25, -0.25, 0.25, 0.25]


@pytest.mark.parametrize("box", [(0, 0, 1, 1), (3, 7, 64, 99), (25, 50, 75, 150), (10, 20, 100, 200)])
def test_box_params_round_trip(box):
    assert location_params_to_box(box_to_location_params(box, 100, 200), 100, 200) == tuple(float(v) for v in box)


def test_box_params_need_positive_size():
    with pytest.raises(ContractError):
        box_to_location_params((0, 0, 1, 1), 0, 10)


def test_location_params_stay_in_range(rng):
    ps = random_proposal_set(rng, 20)
    t = location_params(ps)
    assert np.all(t >= -0.5) and np.all(t <= 0.5)
    for i in range(ps.n):
        assert np.array_equal(t[i], box_to_location_params(ps.boxes[i], ps.width, ps.height))


def test_smooth_l1_fixtures():
    assert (smooth_l1(0.5), smooth_l1(1.0), smooth_l1(2.0)) == (0.125, 0.5, 1.5)
    assert 0.5 * 1.0**2 == abs(1.0) - 0.5 == smooth_l1(1.0)


def test_smooth_l1_derivative_branches():
    for x, slope in [(0.3, 0.3), (-0.7, -0.7), (1.5, 1.0), (-3.0, -1.0)]:
        t = ad.parameter([x])
        ad.backward(ad.smooth_l1(t).sum())
        assert abs(t.grad[0] - slope) < 1e-15


# ---------------------------------------------------------------- visual consistency


def test_vc_zero_when_prediction_exact():
    t = np.array([[0.1, -0.2, 0.3, 0.4]])
    assert visual_consistency_loss(att_from_logits([0.0], t), np.array([0.7]), t).item() == 0.0


def test_vc_single_proposal_fixture():
    t = np.zeros((1, 4))
    loss = visual_consistency_loss(att_from_logits([0.0], np.full((1, 4), 0.5)), np.array([1.0]), t)
    assert loss.item() == 0.125


@pytest.mark.parametrize("seed", range(10))
def test_vc_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    n = 4
    s_p = rng.normal(size=(n, 5))
    gate, targets = rng.random(n), rng.uniform(-0.5, 0.5, size=(n, 4))
    att = att_from_logits(s_p[:, 0], s_p[:, 1:])
    conf = ref.softmax(s_p[:, 0].tolist())
    expected = ref.visual_consistency(s_p.tolist(), conf, gate.tolist(), targets.tolist())
    assert abs(visual_consistency_loss(att, gate, targets).item() - expected) < 1e-12


def test_vc_gradient_through_confidence_and_locations():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 3
        s = Tensor(rng.normal(size=(n, 5)) * 1.5)
        gate, targets = rng.random(n), rng.uniform(-0.5, 0.5, size=(n, 4))

        def f(s):
            conf = ad.segment_softmax(s[:, 0], np.zeros(n, dtype=np.intp), 1)
            return visual_consistency_loss(AttentionOutput(s, conf, np.zeros(n, dtype=np.intp)), gate, targets)

        assert fd(f, s) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_soft_vc_vanishes_only_with_exact_predictions(seed):
    rng = np.random.default_rng(seed)
    targets = rng.uniform(-0.5, 0.5, size=(4, 4))
    gate = 1 / (1 + np.exp(-rng.uniform(-1, 1, 4)))
    logits = rng.normal(size=4)
    assert visual_consistency_loss(att_from_logits(logits, targets), gate, targets).item() == 0.0
    off = targets.copy()
    off[int(rng.integers(4)), int(rng.integers(4))] += 1e-3
    assert visual_consistency_loss(att_from_logits(logits, off), gate, targets).item() > 0.0


def test_vc_shape_mismatch():
    with pytest.raises(DimensionError):
        visual_consistency_loss(att_from_logits([0.0, 1.0]), np.ones(3), np.zeros((2, 4)))


# ---------------------------------------------------------------- reconstruction


def test_reconstruction_single_proposal(rng):
    model = small_model()
    ps = random_proposal_set(rng, 1)
    out = reconstruction_feature(model, att_from_logits([0.3]), np.ones(1), ps).data
    expected = model.recon.weight.data @ ps.features[0] + model.recon.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_reconstruction_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed, rescale=0.5)
    ps = random_proposal_set(rng, 3)
    logits, gate = rng.normal(size=3), rng.random(3)
    out = reconstruction_feature(model, att_from_logits(logits), gate, ps).data
    expected = ref.reconstruction_feature(model.recon.weight.data.tolist(), model.recon.bias.data.tolist(),
                                          ref.softmax(logits.tolist()), gate.tolist(), ps.features.tolist())
    np.testing.assert_allclose(out, expected, atol=1e-12, rtol=0)


def test_uniform_decoder_costs_log_vocab():
    model = small_model(vocab_size=4)
    model.output.weight.data[...] = 0.0
    for tokens in ([3], [3, 2, 3], [0, 1, 2, 3]):
        loss = language_consistency_loss(model, Tensor(np.ones(6)), tokens).item()
        assert abs(loss - math.log(4)) < 1e-12


def test_confident_decoder_costs_almost_nothing():
    model = small_model(vocab_size=5)
    model.output.weight.data[...] = 0.0
    model.output.bias.data[...] = 0.0
    # Correct token probability 1 - 1e-9 at every step.
    model.output.bias.data[3] = math.log((1 - 1e-9) / 1e-9 * 4)
    loss = language_consistency_loss(model, Tensor(np.zeros(6)), [3, 3, 3]).item()
    assert abs(loss - 1e-9) < 1e-15


@pytest.mark.parametrize("seed", range(10))
def test_language_loss_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed, rescale=0.5)
    v_att = rng.normal(size=6)
    tokens = [int(t) for t in rng.integers(0, 7, 3)]
    d, o = model.decoder, model.output
    expected = ref.language_consistency(model.embedding.data.tolist(), d.w_ih.data.tolist(), d.w_hh.data.tolist(),
                                        d.bias.data.tolist(), o.weight.data.tolist(), o.bias.data.tolist(),
                                        v_att.tolist(), tokens, BOS)
    assert abs(language_consistency_loss(model, Tensor(v_att), tokens).item() - expected) < 1e-10


def test_language_loss_gradient_wrt_reconstruction_feature():
    for seed in range(20):
        model = small_model(seed, rescale=0.5)
        v = Tensor(np.random.default_rng(seed).normal(size=6))
        assert fd(lambda v: language_consistency_loss(model, v, [3, 5, 4]), v) < 1e-4


def test_language_loss_rejects_bad_token():
    with pytest.raises(VocabularyError):
        language_consistency_loss(small_model(vocab_size=7), Tensor(np.zeros(6)), [3, 9])


# ---------------------------------------------------------------- objective


def test_total_objective_fixtures():
    both = total_objective(1.0, 0.2, 10.0, 10.0, 0.005, Branches())
    assert abs(both.total - 3.05) < 1e-12
    lc_only = total_objective(1.0, 0.2, 10.0, 10.0, 0.005, Branches.parse("lc"))
    assert abs(lc_only.total - (1.0 + 0.05)) < 1e-12 and lc_only.vc == 0.0
    vc_only = total_objective(1.0, 0.2, 10.0, 10.0, 0.005, Branches.parse("vc"))
    assert abs(vc_only.total - (2.0 + 0.05)) < 1e-12 and vc_only.lc == 0.0
    assert total_objective(1.3, 0.2, 10.0, 0.0, 0.0, Branches()).total == 1.3


def test_both_branches_off_is_config_error():
    with pytest.raises(ConfigError):
        Branches(False, False)
    with pytest.raises(ConfigError):
        Branches.parse("neither")


def _batch(seed, b=3, vocab=7):
    rng = np.random.default_rng(seed)
    return [random_sample(rng, int(rng.integers(2, 5)), int(rng.integers(1, 5)), vocab, name=f"q{i}") for i in range(b)]


@pytest.mark.parametrize("seed", range(5))
def test_breakdown_total_matches_terms(seed):
    model = small_model(seed)
    obj = batch_objective(model, _batch(seed), 10.0, 0.005, Branches())
    assert abs(obj.total.item() - (obj.lc.item() + 10.0 * obj.vc.item() + 0.005 * obj.reg.item())) < 1e-10
    assert obj.lc.item() >= 0 and obj.vc.item() >= 0 and obj.reg.item() >= 0


def test_batch_of_one_equals_single_sample_objective(rng):
    model = small_model(rescale=0.5)
    ps = random_proposal_set(rng, 3)
    sample = Sample(Query("q", ps.image_id, ["w"] * 3), ps, [3, 4, 5], np.zeros(3), rng.random(3), rng.random(3) + 0.1)
    obj = batch_objective(model, [sample], 10.0, 0.005, Branches())
    q = encode_query(model, sample.token_ids)
    att = attention_predict(model, multimodal_project(model, q, ps))
    vc = visual_consistency_loss(att, sample.gate_vc, location_params(ps))
    lc = language_consistency_loss(model, reconstruction_feature(model, att, sample.gate_lc, ps), sample.token_ids)
    reg = sum(float(np.sum(layer.weight.data**2)) for layer in model.regularized_layers())
    assert obj.total.item() == pytest.approx(lc.item() + 10.0 * vc.item() + 0.005 * reg, abs=1e-12)


def test_ungated_language_baseline_is_gate_of_ones():
    model = small_model(rescale=0.5)
    batch = _batch(3)
    ones = [Sample(s.query, s.proposals, s.token_ids, s.raw, np.ones_like(s.raw), np.ones_like(s.raw)) for s in batch]
    ungated = [Sample(s.query, s.proposals, s.token_ids, s.raw, apply_gate(s.raw, "none", "consistency").gate,
                      apply_gate(s.raw, "none", "reconstruction").gate) for s in batch]
    a = batch_objective(model, ones, 10.0, 0.005, Branches.parse("lc")).total.item()
    b = batch_objective(model, ungated, 10.0, 0.005, Branches.parse("lc")).total.item()
    assert a == b


@pytest.mark.parametrize("seed", range(10))
def test_losses_invariant_to_proposal_order(seed):
    model = small_model(seed, rescale=0.5)
    batch = _batch(seed)
    rng = np.random.default_rng(seed + 99)
    moved = []
    for s in batch:
        p = rng.permutation(s.proposals.n)
        ps = s.proposals
        ps2 = ProposalSet(ps.image_id, ps.width, ps.height, ps.global_feature, ps.boxes[p], ps.features[p], ps.class_probs[p])
        moved.append(Sample(s.query, ps2, s.token_ids, s.raw[p], s.gate_vc[p], s.gate_lc[p]))
    a = batch_objective(model, batch, 10.0, 0.005, Branches())
    b = batch_objective(small_model(seed, rescale=0.5), moved, 10.0, 0.005, Branches())
    for name in ("total", "lc", "vc", "reg"):
        assert abs(getattr(a, name).item() - getattr(b, name).item()) < 1e-12


# ---------------------------------------------------------------- training step


def test_zero_learning_rate_changes_nothing():
    model = small_model()
    before = {k: v.data.copy() for k, v in model.parameters()}
    loss = train_step(model, _batch(0), AdamState(lr=0.0))
    assert loss.total > 0
    for k, v in model.parameters():
        assert np.array_equal(v.data, before[k]), k


def test_repeated_step_descends():
    model = small_model(seed=4)
    batch = _batch(4, b=2)
    adam = AdamState(lr=1e-3)
    totals = [train_step(model, batch, adam).total for _ in range(11)]
    assert all(b < a for a, b in zip(totals, totals[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_query():
    model = small_model()
    batch = _batch(1)
    batch[2].proposals.features[0, 0] = np.inf
    with pytest.raises(NumericError, match=batch[2].query.query_id):
        train_step(model, batch, AdamState())


def test_empty_batch_is_contract_error():
    with pytest.raises(ContractError):
        batch_objective(small_model(), [], 10.0, 0.005, Branches())


# ---------------------------------------------------------------- inference


def _kcfg(mode, names=("dog", "cat", "car")):
    table = EmbeddingTable({"dog": [1.0, 0.0, 0.0], "cat": [0.0, 1.0, 0.0], "car": [0.0, 0.0, 1.0]})
    return KnowledgeConfig(mode, list(names), table, threshold=0.3)


def _sample_with(raw, n=3):
    rng = np.random.default_rng(0)
    ps = random_proposal_set(rng, n)
    raw = np.asarray(raw, dtype=np.float64)
    return Sample(Query("q", ps.image_id, ["w"]), ps, [3], raw, raw, raw)


def _flat_model():
    """Every proposal gets the same confidence."""
    model = small_model()
    model.proj.weight.data[...] = 0.0
    model.bn.scale.data[...] = 0.0
    model.bn.shift.data[...] = 1.0  # every row becomes ReLU(1) = all ones
    model.score.weight.data[...] = 0.0
    model.score.bias.data[...] = 0.0
    return model


def test_equal_gates_pick_highest_confidence():
    model = small_model(rescale=0.5)
    s = _sample_with([0.0, 0.0, 0.0])
    res = ground_batch(model, [s], _kcfg("soft"))[0]
    assert res.chosen_index == int(np.argmax(res.conf_softmax))


def test_equal_confidences_follow_soft_gate():
    model = _flat_model()
    res = ground_batch(model, [_sample_with([0.9, 0.1], n=2)], _kcfg("soft"))[0]
    assert res.chosen_index == 0
    np.testing.assert_allclose(res.conf_softmax, [0.5, 0.5])


def test_ties_go_to_lowest_index():
    model = _flat_model()
    res = ground_batch(model, [_sample_with([0.2, 0.5, 0.5])], _kcfg("soft"))[0]
    assert res.chosen_index == 1


def test_hard_gate_selects_only_open_proposal():
    model = _flat_model()
    res = ground_batch(model, [_sample_with([0.0, 0.1, 0.8])], _kcfg("hard"))[0]
    assert res.chosen_index == 2 and res.gate.tolist() == [0.0, 0.0, 1.0]


def test_hard_gate_inference_falls_back_to_ones():
    model = _flat_model()
    res = ground_batch(model, [_sample_with([0.0, 0.1, 0.2])], _kcfg("hard"))[0]
    assert res.gate.tolist() == [1.0, 1.0, 1.0] and res.chosen_index == 0


def test_grounding_returns_chosen_box():
    model = small_model(rescale=0.5)
    s = _sample_with([0.1, 0.9, 0.2])
    res = ground_batch(model, [s], _kcfg("soft"))[0]
    assert res.chosen_box == tuple(s.proposals.boxes[res.chosen_index])
    np.testing.assert_allclose(res.scores, res.conf_softmax * res.gate)


def test_batched_grounding_matches_single(rng):
    model = small_model(rescale=0.5)
    samples = _batch(7)
    together = ground_batch(model, samples, "soft")
    for s, r in zip(samples, together):
        alone = ground_batch(model, [s], "soft")[0]
        assert alone.chosen_index == r.chosen_index
        np.testing.assert_allclose(alone.scores, r.scores, atol=1e-15)


def test_ground_wrapper(rng):
    vocab = Vocabulary(["a", "dog"])
    model = small_model(vocab_size=len(vocab), rescale=0.5)
    model.vocab = vocab
    ps = random_proposal_set(rng, 3)
    res = ground(model, Query("q", ps.image_id, ["a", "dog"], [1]), ps, _kcfg("soft"))
    assert 0 <= res.chosen_index < 3
