import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsclab.objective import (
    AllInvalid,
    BatchTooSmall,
    DegenerateP,
    EncodedBatch,
    LossConfig,
    NoValidTokens,
    Temperature,
    attention_weights,
    clip_loss,
    global_similarity,
    hn_distribution_global,
    hn_distribution_local,
    local_similarity,
    local_similarity_per_token,
    scr_hn_loss,
    smoothed_labels,
    textual_aligned_patches,
    total_loss,
)
from fsclab.tensor import Tensor, grad_check


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------- brute-force oracles


def oracle_clip(v, t, inv_tau):
    s = v @ t.T * inv_tau
    i2t = [-(s[i, i] - math.log(sum(math.exp(x) for x in s[i]))) for i in range(len(v))]
    t2i = [-(s[j, j] - math.log(sum(math.exp(x) for x in s[:, j]))) for j in range(len(v))]
    return 0.5 * (np.mean(i2t) + np.mean(t2i))


def oracle_local(V, T, mask, inv_tau, mode="minmax"):
    total = 0.0
    P = V.shape[0]
    for w in range(T.shape[0]):
        if not mask[w]:
            continue
        s = np.array([T[w] @ V[p] for p in range(P)])
        if mode == "softmax":
            a = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        elif s.max() - s.min() < 1e-12:
            a = np.full(P, 1.0 / P)
        else:
            a = (s - s.min()) / (s.max() - s.min())
            if mode == "minmax_sparse":
                a = np.where(a < 1.0 / P, 0.0, a)
        vhat = sum(a[p] * V[p] for p in range(P)) / a.sum()
        vhat = vhat / np.linalg.norm(vhat)
        total += math.exp(float(vhat @ T[w]) * inv_tau)
    return total


# ---------------------------------------------------------------- global similarity and CLIP


@pytest.mark.parametrize(
    "cos,tau,expected",
    [(1.0, 1.0, math.e), (0.0, 1.0, 1.0), (0.5, 0.07, math.exp(0.5 / 0.07))],
)
def test_global_similarity(cos, tau, expected):
    v = np.array([1.0, 0.0])
    t = np.array([cos, math.sqrt(1 - cos * cos)])
    out = global_similarity(Tensor(v), Tensor(t), 1.0 / tau).item()
    assert out == pytest.approx(expected, rel=1e-12)


def test_clip_loss_uniform_is_ln2():
    v = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert clip_loss(v, v, 1.0).item() == pytest.approx(math.log(2), abs=1e-12)


def test_clip_loss_saturates_to_zero():
    e = Tensor(np.eye(3))
    assert clip_loss(e, e, 100.0).item() < 1e-40


def test_clip_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    v, t = unit(rng, 3, 4), unit(rng, 3, 4)
    assert clip_loss(Tensor(v), Tensor(t), 1 / 0.07).item() == pytest.approx(oracle_clip(v, t, 1 / 0.07), rel=1e-12)


def test_clip_loss_needs_two():
    with pytest.raises(BatchTooSmall):
        clip_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 1.0)


def test_temperature_clamp():
    assert Temperature(0.07).inv_tau == pytest.approx(1 / 0.07, rel=1e-6)
    assert Temperature(0.001).inv_tau == 100.0
    assert Temperature(5.0).inv_tau == 1.0


# ---------------------------------------------------------------- hard-negative distributions


def test_hn_global_equal_candidates_uniform():
    v = Tensor(np.array([1.0, 0.0]))
    t = Tensor(np.tile([0.6, 0.8], (4, 1)))
    p = hn_distribution_global(v, t, [True, True, True], 1 / 0.07)
    npt.assert_allclose(p.data, [0.25] * 4, atol=1e-12)


def test_hn_global_masked_slot():
    v = Tensor(np.array([1.0, 0.0]))
    t = Tensor(np.tile([0.6, 0.8], (4, 1)))
    p = hn_distribution_global(v, t, [True, True, False], 1.0)
    npt.assert_allclose(p.data, [1 / 3, 1 / 3, 1 / 3, 0.0], atol=1e-12)


def test_hn_global_scalar_oracle():
    cos = np.array([0.9, 0.8, 0.1, 0.1])
    v = Tensor(np.array([1.0, 0.0]))
    t = Tensor(np.stack([cos, np.sqrt(1 - cos**2)], axis=1))
    p = hn_distribution_global(v, t, [True, True, True], 1 / 0.07)
    e = np.exp(cos / 0.07)
    npt.assert_allclose(p.data, e / e.sum(), rtol=1e-12)


def test_hn_all_invalid_raises():
    with pytest.raises(AllInvalid):
        hn_distribution_global(Tensor(np.ones(2)), Tensor(np.ones((4, 2))), [False] * 3, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.booleans(), min_size=3, max_size=3).filter(any))
def test_hn_distributions_sum_to_one(seed, valid):
    rng = np.random.default_rng(seed)
    V, T = unit(rng, 4, 6), unit(rng, 4, 3, 6)
    mask = np.ones((4, 3), dtype=bool)
    for p in (
        hn_distribution_global(Tensor(unit(rng, 6)), Tensor(unit(rng, 4, 6)), valid, 14.0),
        hn_distribution_local(Tensor(V), Tensor(T), mask, valid, 14.0),
    ):
        assert p.data.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(p.data[1:][~np.array(valid)] == 0)


# ---------------------------------------------------------------- attention and local similarity


@pytest.mark.parametrize("mode", ["minmax", "minmax_sparse"])
def test_minmax_row(mode):
    npt.assert_array_equal(attention_weights(Tensor(np.array([[1.0, 3.0, 2.0]])), mode).data, [[0.0, 1.0, 0.5]])


@pytest.mark.parametrize("mode", ["minmax", "minmax_sparse"])
def test_constant_row_uniform(mode):
    npt.assert_array_equal(attention_weights(Tensor(np.full((1, 4), 0.3)), mode).data, [[0.25] * 4])


def test_sparse_zeroes_below_one_over_p():
    s = Tensor(np.array([[0.0, 0.1, 0.5, 1.0]]))
    npt.assert_allclose(attention_weights(s, "minmax_sparse").data, [[0.0, 0.0, 0.5, 1.0]])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    a = attention_weights(Tensor(rng.normal(size=(3, 5))), "softmax").data
    npt.assert_allclose(a.sum(-1), 1.0)


def test_minmax_rows_hit_zero_and_one():
    rng = np.random.default_rng(5)
    a = attention_weights(Tensor(rng.normal(size=(6, 7))), "minmax").data
    npt.assert_array_equal(a.max(-1), 1.0)
    npt.assert_array_equal(a.min(-1), 0.0)


@pytest.mark.parametrize("mode", ["minmax", "minmax_sparse", "softmax"])
def test_single_patch_is_selected(mode):
    rng = np.random.default_rng(1)
    V, T = unit(rng, 1, 5), unit(rng, 3, 5)
    vhat = textual_aligned_patches(Tensor(V), Tensor(T), np.ones(3, bool), mode).data
    npt.assert_allclose(vhat, np.repeat(V, 3, axis=0))


def test_aligned_patches_weighted_mean_oracle():
    rng = np.random.default_rng(4)
    V, T = unit(rng, 3, 4), unit(rng, 2, 4)
    vhat = textual_aligned_patches(Tensor(V), Tensor(T), np.ones(2, bool)).data
    for w in range(2):
        s = V @ T[w]
        a = (s - s.min()) / (s.max() - s.min())
        npt.assert_allclose(vhat[w], (a[:, None] * V).sum(0) / a.sum(), rtol=1e-12)


def test_padded_rows_zeroed():
    rng = np.random.default_rng(4)
    V, T = unit(rng, 3, 4), unit(rng, 3, 4)
    vhat = textual_aligned_patches(Tensor(V), Tensor(T), np.array([True, True, False])).data
    npt.assert_array_equal(vhat[2], 0.0)


def test_local_similarity_single_token_single_patch():
    v = np.array([[0.6, 0.8]])
    assert local_similarity(Tensor(v), Tensor(v), np.array([True]), 1.0).item() == pytest.approx(math.e, rel=1e-12)


def test_local_similarity_sum_of_ones():
    # every token orthogonal to the only patch direction
    V = np.array([[1.0, 0.0, 0.0]])
    T = np.tile([0.0, 1.0, 0.0], (7, 1))
    mask = np.array([True] * 5 + [False] * 2)
    assert local_similarity(Tensor(V), Tensor(T), mask, 1.0).item() == pytest.approx(5.0, abs=1e-12)
    assert local_similarity_per_token(Tensor(V), Tensor(T), mask, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("mode", ["minmax", "minmax_sparse", "softmax"])
def test_local_similarity_brute_force(mode):
    rng = np.random.default_rng(11)
    V, T = unit(rng, 4, 6), unit(rng, 3, 6)
    mask = np.ones(3, bool)
    got = local_similarity(Tensor(V), Tensor(T), mask, 5.0, mode).item()
    assert got == pytest.approx(oracle_local(V, T, mask, 5.0, mode), rel=1e-12)


def test_local_similarity_no_tokens():
    with pytest.raises(NoValidTokens):
        local_similarity(Tensor(np.eye(2)), Tensor(np.eye(2)), np.zeros(2, bool), 1.0)


# ---------------------------------------------------------------- SCR


def test_smoothed_labels_k3():
    npt.assert_allclose(smoothed_labels([True] * 4, 0.02), [0.985, 0.005, 0.005, 0.005])


def test_smoothed_labels_beta0_onehot():
    assert smoothed_labels([True, True, False, True], 0.0).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_smoothed_labels_skip_invalid():
    y = smoothed_labels([True, False, True, True], 0.03)
    npt.assert_allclose(y, [0.98, 0.0, 0.01, 0.01])
    assert y.sum() == pytest.approx(1.0)


@pytest.mark.parametrize(
    "gamma,expected", [(0.0, math.log(4)), (2.0, 0.75**2 * math.log(4))]
)
def test_scr_uniform(gamma, expected):
    p = Tensor(np.full(4, 0.25))
    assert scr_hn_loss(p, gamma=gamma, beta=0.0).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=4, max_size=4))
def test_scr_reduces_to_cross_entropy(raw):
    p = np.array(raw) / sum(raw)
    got = scr_hn_loss(Tensor(p), gamma=0.0, beta=0.0).item()
    assert abs(got - (-math.log(p[0]))) < 1e-12


def test_scr_rejects_negative_p():
    with pytest.raises(DegenerateP):
        scr_hn_loss(Tensor(np.array([1.2, -0.2, 0.0, 0.0])))


def test_scr_grad_check():
    rng = np.random.default_rng(3)
    z = Tensor(rng.normal(size=(2, 4)))
    valid = np.array([[True, True, False], [True, True, True]])
    f = lambda t: scr_hn_loss(t.softmax(-1), valid, 2.0, 0.02).sum()
    assert grad_check(f, z).max_rel_error < 1e-6


# ---------------------------------------------------------------- total loss


def random_batch(rng, B=2, K=3, W=4, P=4, d=6, valid=None):
    mask = np.ones((B, 1 + K, W), bool)
    mask[:, :, -1] = False
    return EncodedBatch(
        V=Tensor(unit(rng, B, P, d)),
        v=Tensor(unit(rng, B, d)),
        T=Tensor(unit(rng, B, 1 + K, W, d)),
        t=Tensor(unit(rng, B, 1 + K, d)),
        pad_mask=mask,
        valid=np.ones((B, K), bool) if valid is None else np.asarray(valid),
    )


def test_total_weights_zero_is_clip():
    b = random_batch(np.random.default_rng(0))
    parts = total_loss(b, LossConfig(lambda_g=0, lambda_l=0), 14.0)
    assert parts.l_total.item() == parts.l_clip.item()


def test_total_all_invalid_is_clip():
    b = random_batch(np.random.default_rng(0), valid=np.zeros((2, 3), bool))
    parts = total_loss(b, LossConfig(), 14.0)
    assert parts.l_total.item() == parts.l_clip.item()
    assert parts.hn_items == 0


def test_total_composes_parts():
    rng = np.random.default_rng(7)
    b = random_batch(rng, valid=[[True, False, True], [False, False, False]])
    cfg = LossConfig()
    parts = total_loss(b, cfg, 14.0)
    # only item 0 has negatives, so both HN means are that item's loss
    pg = hn_distribution_global(b.v[0], b.t[0], b.valid[0], 14.0)
    pl = hn_distribution_local(b.V[0], b.T[0], b.pad_mask[0], b.valid[0], 14.0)
    lg = scr_hn_loss(pg, b.valid[0], cfg.gamma, cfg.beta).item()
    ll = scr_hn_loss(pl, b.valid[0], cfg.gamma, cfg.beta).item()
    assert parts.l_neg_g.item() == pytest.approx(lg, rel=1e-12)
    assert parts.l_neg_l.item() == pytest.approx(ll, rel=1e-12)
    expected = parts.l_clip.item() + 0.5 * lg + 0.2 * ll
    assert parts.l_total.item() == pytest.approx(expected, rel=1e-12)


def test_total_invariant_to_slot_permutation():
    rng = np.random.default_rng(8)
    b = random_batch(rng, valid=[[True, False, True], [True, True, False]])
    perm = [0, 3, 1, 2]
    shuffled = EncodedBatch(b.V, b.v, b.T[:, perm], b.t[:, perm], b.pad_mask[:, perm], b.valid[:, [2, 0, 1]])
    a = total_loss(b, LossConfig(), 14.0).l_total.item()
    c = total_loss(shuffled, LossConfig(), 14.0).l_total.item()
    assert a == pytest.approx(c, rel=1e-12)


@pytest.mark.parametrize("mode", ["minmax", "minmax_sparse", "softmax"])
def test_total_loss_grad_check(mode):
    rng = np.random.default_rng(9)
    b = random_batch(rng, B=2, K=3, W=3, P=3, d=4, valid=[[True, True, False], [True, True, True]])
    cfg = LossConfig(norm_mode=mode)

    def f(ts):
        V, v, T, t, log_inv_tau = ts
        batch = EncodedBatch(V.l2_normalize(-1), v.l2_normalize(-1), T.l2_normalize(-1), t.l2_normalize(-1), b.pad_mask, b.valid)
        return total_loss(batch, cfg, Temperature(log_inv_tau=log_inv_tau)).l_total

    leaves = [b.V, b.v, b.T, b.t, Tensor(np.array([math.log(5.0)]))]
    res = grad_check(f, leaves)
    assert res.max_rel_error < 1e-4
