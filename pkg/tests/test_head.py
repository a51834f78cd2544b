import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vltrack import numerics as nx
from vltrack.head import (CENTER_CLAMP, HeadContext, aggregate_prototypes, build_box_masks, decode_box,
                          encode_box, inbox_outbox_attention, init_head_params, predict_maps,
                          split_distractor_background, target_score_map)

NEG = nx.NEG_INF


# box masks


def test_whole_image_box_is_all_inbox():
    m_in, m_out = build_box_masks((0, 0, 32, 32), (4, 4), 8)
    assert np.all(m_in == 0) and np.all(m_out == NEG)


def test_tiny_box_falls_back_to_centre_patch():
    m_in, _ = build_box_masks((9, 17, 2, 2), (4, 4), 8)
    assert np.flatnonzero(m_in == 0).tolist() == [2 * 4 + 1]


def test_two_by_two_block():
    m_in, m_out = build_box_masks((8, 8, 16, 16), (4, 4), 8)
    inside = np.flatnonzero(m_in == 0)
    assert inside.tolist() == [5, 6, 9, 10]
    assert np.sum(m_out == 0) == 12
    assert np.all((m_in == 0) != (m_out == 0))


# attention over the template/context


def _ctx(emb, inside, on=None):
    emb = np.asarray(emb, float)[None]
    inside = np.asarray(inside, bool)
    on = np.ones_like(inside) if on is None else np.asarray(on, bool)
    return HeadContext(nx.Tensor(emb), np.where(inside & on, 0.0, NEG)[None],
                       np.where(~inside & on, 0.0, NEG)[None])


def test_single_inbox_token_is_copied():
    emb = np.random.default_rng(0).normal(size=(3, 4))
    a_in, _, t_t = inbox_outbox_attention(nx.Tensor(np.ones((1, 4))), _ctx(emb, [False, True, False]))
    assert a_in.data[0].tolist() == [0.0, 1.0, 0.0]
    np.testing.assert_array_equal(t_t.data[0], emb[1])


def test_orthogonal_token_spreads_uniformly():
    emb = np.array([[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]])
    a_in, _, _ = inbox_outbox_attention(nx.Tensor(np.array([[1.0, 0.0]])), _ctx(emb, [True, True, True]))
    np.testing.assert_allclose(a_in.data[0], [1 / 3] * 3, atol=1e-15)


def test_three_token_hand_softmax():
    c = 4
    token = np.array([[math.sqrt(c), 0, 0, 0]])
    emb = np.array([[2.0, 0, 0, 0], [1.0, 0, 0, 0], [0.0, 0, 0, 0]])  # scaled logits [2, 1, 0]
    a_in, a_out, _ = inbox_outbox_attention(nx.Tensor(token), _ctx(emb, [True, True, False]))
    np.testing.assert_allclose(a_in.data[0], [0.7311, 0.2689, 0.0], atol=5e-5)
    assert a_out[0].tolist() == [0.0, 0.0, 1.0]


def test_empty_support_gives_zero_rows():
    emb = np.ones((2, 3))
    a_in, a_out, t_t = inbox_outbox_attention(nx.Tensor(np.ones((1, 3))),
                                             _ctx(emb, [True, False], on=[False, False]))
    assert not a_in.data.any() and not a_out.any() and not t_t.data.any()


# distractor / background split


def test_split_hand_example():
    m_d, m_b = split_distractor_background([0.5, 0.3, 0.15, 0.05], 0.75)
    assert np.flatnonzero(m_d == 0).tolist() == [0, 1]
    assert np.flatnonzero(m_b == 0).tolist() == [2, 3]


def test_beta_zero_makes_everything_background():
    m_d, m_b = split_distractor_background([0.1, 0.6, 0.3, 0.0], 0.0)
    assert not np.any(m_d == 0)
    assert np.flatnonzero(m_b == 0).tolist() == [0, 1, 2]


def test_beta_one_makes_every_positive_patch_a_distractor():
    m_d, m_b = split_distractor_background([0.1, 0.6, 0.3, 0.0], 1.0)
    assert np.flatnonzero(m_d == 0).tolist() == [0, 1, 2]
    assert not np.any(m_b == 0)


def test_all_zero_distribution_gives_empty_sets():
    m_d, m_b = split_distractor_background(np.zeros(4), 0.75)
    assert np.all(m_d == NEG) and np.all(m_b == NEG)


def _split_oracle(p, beta):
    ranked = sorted((i for i in range(len(p)) if p[i] > 0), key=lambda i: (-p[i], i))
    dis, above = set(), 0.0
    for i in ranked:
        if above < beta:
            dis.add(i)
        above += p[i]
    return dis, set(ranked) - dis


@given(st.integers(0, 2 ** 31 - 1), st.floats(0, 1))
def test_split_partitions_like_the_oracle(seed, beta):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    p = rng.random(n) * (rng.random(n) > 0.3)
    if p.sum() > 0:
        p = p / p.sum()
    m_d, m_b = split_distractor_background(p, beta)
    dis, bg = _split_oracle(p, beta)
    assert set(np.flatnonzero(m_d == 0).tolist()) == dis
    assert set(np.flatnonzero(m_b == 0).tolist()) == bg


# prototypes


def _proto_case():
    c = 4
    token = np.array([[math.sqrt(c), 0, 0, 0]])
    emb = np.array([[9.0, 0, 0, 1], [1.5, 1, 0, 0], [1.0, 0, 1, 0], [0.2, 0, 0, 1], [-1.0, 1, 1, 1]])
    ctx = _ctx(emb, [True, False, False, False, False])
    return token, emb, ctx


def test_prototypes_by_hand():
    token, emb, ctx = _proto_case()
    zeros = np.zeros(4)
    ps = aggregate_prototypes(nx.Tensor(token), ctx, zeros, zeros, 0.75)
    logits = emb[1:, 0]
    a_out = np.exp(logits) / np.exp(logits).sum()
    dis, bg = _split_oracle(a_out, 0.75)
    dis_idx = sorted(i + 1 for i in dis)
    w = np.exp(emb[dis_idx, 0])
    np.testing.assert_allclose(ps.t_distractor.data[0], (w / w.sum()) @ emb[dis_idx], atol=1e-12)
    np.testing.assert_allclose(ps.t_target.data[0], emb[0], atol=1e-12)
    np.testing.assert_allclose(ps.target.data[0], token[0] + emb[0], atol=1e-12)


def test_empty_distractor_support_leaves_learned_prototype():
    token, _, ctx = _proto_case()
    proto_d = np.array([0.3, -0.2, 0.1, 0.4])
    ps = aggregate_prototypes(nx.Tensor(token), ctx, proto_d, np.zeros(4), 0.0)
    assert not ps.t_distractor.data.any()
    np.testing.assert_array_equal(ps.distractor.data[0], proto_d)


def test_single_distractor_token_is_copied():
    emb = np.array([[1.0, 0, 0, 0], [0.0, 3.0, 1, 0]])
    ps = aggregate_prototypes(nx.Tensor(np.ones((1, 4))), _ctx(emb, [True, False]), np.zeros(4), np.zeros(4), 0.75)
    np.testing.assert_array_equal(ps.t_distractor.data[0], emb[1])
    assert not ps.t_background.data.any()


def test_attention_rows_sum_to_one_on_support():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(9, 6))
    inside = rng.random(9) > 0.5
    inside[0], inside[1] = True, False
    ps = aggregate_prototypes(nx.Tensor(rng.normal(size=(1, 6))), _ctx(emb, inside), np.zeros(6), np.zeros(6), 0.75)
    assert abs(ps.a_in.data.sum() - 1) < 1e-12 and abs(ps.a_out.sum() - 1) < 1e-12


# target score map


def test_symmetric_scores_give_half():
    f = np.array([[[1.0, 0.0, 0.0]]])
    p = np.array([[0.0, 1.0, 0.0]])
    assert target_score_map(f, p, p, p, 0.1).data[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_zero_bound_active():
    f = np.array([[[1.0, 0.0]]])
    alpha = target_score_map(f, np.array([[2.0, 0.0]]), np.array([[-1.0, 0.0]]), np.array([[-3.0, 0.0]]), 1.0)
    assert alpha.data[0, 0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert alpha.data[0, 0] == pytest.approx(0.7311, abs=5e-5)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100))
def test_score_map_bounds_and_scale_invariance(seed, k):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(1, 7, 5))
    pt, pd, pb = (rng.normal(size=(1, 5)) for _ in range(3))
    alpha = target_score_map(f, pt, pd, pb, 0.1).data
    assert np.all((alpha > 0) & (alpha < 1))
    cos_t = (f[0] @ pt[0]) / np.linalg.norm(f[0], axis=1) / np.linalg.norm(pt[0])
    assert np.all(alpha[0][cos_t <= 0] <= 0.5)
    scaled = target_score_map(f * k, pt * k, pd * k, pb * k, 0.1).data
    assert np.max(np.abs(scaled - alpha)) <= 1e-12


# convolutional branches


@pytest.fixture(scope="module")
def head_params():
    return init_head_params(np.random.default_rng(7), 16)


def test_zero_weights_give_half_centre(head_params):
    zeroed = {k: nx.Parameter(np.zeros_like(v.data), k) for k, v in head_params.items()}
    ctr, off, size = predict_maps(nx.Tensor(np.random.default_rng(0).normal(size=(1, 16, 16))), zeroed, (4, 4))
    assert np.all(ctr.data == 0.5) and np.all(off.data == 0.5) and np.all(size.data == 0.5)


def test_output_ranges(head_params):
    x = np.random.default_rng(1).normal(scale=3.0, size=(1000, 4, 16))
    ctr, off, size = predict_maps(nx.Tensor(x), head_params, (2, 2))
    assert np.all((ctr.data >= CENTER_CLAMP) & (ctr.data <= 1 - CENTER_CLAMP))
    for m in (off.data, size.data):
        assert np.all((m > 0) & (m < 1))


def test_translation_equivariance(head_params):
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(1, 12, 12, 16))
    shifted = np.zeros_like(grid)
    shifted[:, :, 1:] = grid[:, :, :-1]
    a = predict_maps(nx.Tensor(grid.reshape(1, 144, 16)), head_params, (12, 12))
    b = predict_maps(nx.Tensor(shifted.reshape(1, 144, 16)), head_params, (12, 12))
    # four 3x3 stages see four cells on each side; compare cells whose receptive field avoids both borders
    for ma, mb in zip(a, b):
        np.testing.assert_allclose(mb.data[:, 4:8, 5:8], ma.data[:, 4:8, 4:7], atol=1e-12)


# decoding


def test_decode_hand_example():
    center = np.full((8, 8), 0.1)
    center[4, 3] = 0.9
    offset = np.full((8, 8, 2), 0.5)
    size = np.full((8, 8, 2), 0.25)
    pred = decode_box(center, np.ones((8, 8)), offset, size, 8, 64, 64)
    np.testing.assert_allclose(pred.box, [28, 36, 16, 16], atol=1e-12)
    assert pred.peak == (4, 3) and pred.confidence == pytest.approx(0.9)


def test_zero_offset_lands_on_lattice():
    rng = np.random.default_rng(3)
    pred = decode_box(rng.random((8, 8)), rng.random((8, 8)), np.zeros((8, 8, 2)), np.full((8, 8, 2), 0.1), 8, 64, 64)
    assert pred.box[0] % 8 == 0 and pred.box[1] % 8 == 0


def test_ties_pick_first_index():
    pred = decode_box(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4, 2)), np.full((4, 4, 2), 0.1), 8, 32, 32)
    assert pred.peak == (0, 0)


def test_box_is_clamped_to_the_image():
    center = np.zeros((4, 4))
    center[0, 0] = 1.0
    pred = decode_box(center, np.ones((4, 4)), np.zeros((4, 4, 2)), np.full((4, 4, 2), 0.5), 8, 32, 32)
    x, y, w, h = pred.xywh
    assert x >= 0 and y >= 0 and x + w <= 32 and y + h <= 32
    np.testing.assert_allclose(pred.xywh, [0, 0, 8, 8], atol=1e-12)


@given(st.floats(0, 40), st.floats(0, 40), st.floats(2, 24), st.floats(2, 24))
def test_encode_decode_round_trip(x, y, w, h):
    if x + w > 64 or y + h > 64:
        return
    center, offset, size = encode_box((x, y, w, h), (8, 8), 8, 64, 64)
    pred = decode_box(center, np.ones((8, 8)), offset, size, 8, 64, 64)
    assert abs(pred.box[0] - (x + w / 2)) <= 4 and abs(pred.box[1] - (y + h / 2)) <= 4
    assert pred.box[2] == w and pred.box[3] == h


@given(st.integers(0, 2 ** 31 - 1))
def test_argmax_survives_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    center, target = rng.random((5, 5)), rng.random((5, 5))
    off, size = rng.random((5, 5, 2)), rng.random((5, 5, 2)) * 0.2
    base = decode_box(center, target, off, size, 8, 40, 40)
    # sqrt of the product, applied through both factors
    again = decode_box(np.sqrt(center), np.sqrt(target), off, size, 8, 40, 40)
    assert base.peak == again.peak
