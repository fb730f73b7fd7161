"""End-to-end acceptance checks, one group per criterion.

Criterion 6 trains 3 seeds x (pretrain + 3 fine-tunes) and takes roughly ten
minutes on a single core; everything else finishes in well under a minute.
"""

import math
import random
import time
from collections import Counter

import numpy as np
import pytest

from fsclab import checkpoint
from fsclab.encoders import EncoderConfig
from fsclab.evaluation import WISE_FT_ALPHAS, ModelScorer, evaluate, evaluate_checkpoint, wise_ft_trajectory
from fsclab.hardneg import bigram_shuffle, default_lexicon, generate_corpus, generate_set, lexicon_replace, negclip_swap, tag
from fsclab.objective import (
    EncodedBatch,
    LossConfig,
    Temperature,
    attention_weights,
    clip_loss,
    global_similarity,
    hn_distribution_global,
    local_similarity,
    masked_softmax,
    scr_hn_loss,
    smoothed_labels,
    total_loss,
)
from fsclab.synth import caption, make_dataset, make_eval_suites, sample_scene, suite_keys
from fsclab.tensor import Tensor, grad_check
from fsclab.trainer import TrainConfig, new_model, to_checkpoint, train

N_INSTANCES = 20
MODES = ("minmax", "minmax_sparse", "softmax")


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_valid(rng, B, K):
    valid = rng.random((B, K)) < 0.7
    valid[np.arange(B), rng.integers(0, K, B)] = True
    return valid


# ================================================================ criterion 1


def _clip_instance(rng):
    B, d = rng.integers(2, 5), rng.integers(3, 7)
    leaves = [Tensor(rng.normal(size=(B, d))), Tensor(rng.normal(size=(B, d))), Tensor(np.array([rng.uniform(0.5, 3.0)]))]

    def f(ts):
        v, t, lit = ts
        return clip_loss(v.l2_normalize(-1), t.l2_normalize(-1), Temperature(log_inv_tau=lit))

    return f, leaves


def _hn_global_instance(rng):
    B, K, d = rng.integers(1, 4), rng.integers(1, 4), rng.integers(3, 6)
    valid = random_valid(rng, B, K)
    leaves = [Tensor(rng.normal(size=(B, d))), Tensor(rng.normal(size=(B, 1 + K, d))), Tensor(np.array([rng.uniform(0.5, 3.0)]))]

    def f(ts):
        v, t, lit = ts
        p = hn_distribution_global(v.l2_normalize(-1), t.l2_normalize(-1), valid, Temperature(log_inv_tau=lit))
        return scr_hn_loss(p, valid, gamma=0.0, beta=0.0).mean()

    return f, leaves


def _local_instance(rng, mode):
    W, P, d = rng.integers(1, 5), rng.integers(2, 6), rng.integers(3, 6)
    mask = rng.random(W) < 0.7
    mask[0] = True
    leaves = [Tensor(rng.normal(size=(P, d))), Tensor(rng.normal(size=(W, d))), Tensor(np.array([rng.uniform(0.5, 2.0)]))]

    def f(ts):
        V, T, lit = ts
        return local_similarity(V.l2_normalize(-1), T.l2_normalize(-1), mask, Temperature(log_inv_tau=lit), mode)

    return f, leaves


def _scr_instance(rng):
    B, K = rng.integers(1, 4), rng.integers(1, 5)
    valid = random_valid(rng, B, K)
    gamma, beta = rng.uniform(0, 3), rng.uniform(0, 0.2)
    full = np.concatenate([np.ones((B, 1), bool), valid], axis=1)

    def f(z):
        return scr_hn_loss(masked_softmax(z, full), valid, gamma, beta).sum()

    return f, Tensor(rng.normal(size=(B, 1 + K)))


def _total_instance(rng, mode):
    B, K, W, P, d = 2 + rng.integers(0, 2), rng.integers(1, 4), rng.integers(2, 4), rng.integers(2, 4), 4
    mask = np.ones((B, 1 + K, W), bool)
    mask[..., -1] = rng.random((B, 1 + K)) < 0.5
    valid = rng.random((B, K)) < 0.6
    cfg = LossConfig(norm_mode=mode, gamma=rng.uniform(0, 3), beta=rng.uniform(0, 0.1))
    leaves = [
        Tensor(rng.normal(size=(B, P, d))),
        Tensor(rng.normal(size=(B, d))),
        Tensor(rng.normal(size=(B, 1 + K, W, d))),
        Tensor(rng.normal(size=(B, 1 + K, d))),
        Tensor(np.array([rng.uniform(0.5, 3.0)])),
    ]

    def f(ts):
        V, v, T, t, lit = ts
        batch = EncodedBatch(V.l2_normalize(-1), v.l2_normalize(-1), T.l2_normalize(-1), t.l2_normalize(-1), mask, valid)
        return total_loss(batch, cfg, Temperature(log_inv_tau=lit)).l_total

    return f, leaves


FAMILIES = {
    "clip_loss": lambda rng, i: _clip_instance(rng),
    "hn_loss_global": lambda rng, i: _hn_global_instance(rng),
    "local_similarity": lambda rng, i: _local_instance(rng, MODES[i % 3]),
    "scr_hn_loss": lambda rng, i: _scr_instance(rng),
    "total_loss": lambda rng, i: _total_instance(rng, MODES[i % 3]),
}


@pytest.fixture(scope="module")
def grad_suite():
    start = time.perf_counter()
    errors = {}
    for k, (name, make) in enumerate(FAMILIES.items()):
        errs = []
        for i in range(N_INSTANCES):
            f, x = make(np.random.default_rng([k, i]), i)
            errs.append(grad_check(f, x).max_rel_error)
        errors[name] = errs
    return errors, time.perf_counter() - start


@pytest.mark.criterion(1)
@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_c1_grad_check(grad_suite, family):
    errs = grad_suite[0][family]
    assert len(errs) >= 20
    assert max(errs) < 1e-4


@pytest.mark.criterion(1)
def test_c1_runtime(grad_suite, acceptance_notes):
    acceptance_notes.append(f"  grad suite: {5 * N_INSTANCES} instances in {grad_suite[1]:.1f} s")
    assert grad_suite[1] < 60


# ================================================================ criterion 2


@pytest.mark.criterion(2)
@pytest.mark.parametrize("seed", range(10))
def test_c2_scr_degenerates_to_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(rng.integers(2, 6)))
    assert abs(scr_hn_loss(Tensor(p), gamma=0.0, beta=0.0).item() + math.log(p[0])) < 1e-12


@pytest.mark.criterion(2)
def test_c2_smoothed_labels_one_hot():
    for valid in ([True] * 4, [True, False, True, True], [True, True]):
        y = smoothed_labels(valid, 0.0)
        assert y.tolist() == [1.0] + [0.0] * (len(valid) - 1)


@pytest.mark.criterion(2)
def test_c2_minmax_exact():
    assert attention_weights(Tensor(np.array([1.0, 3.0, 2.0])), "minmax").data.tolist() == [0.0, 1.0, 0.5]


@pytest.mark.criterion(2)
@pytest.mark.parametrize("P", [1, 3, 16])
def test_c2_constant_row_uniform(P):
    a = attention_weights(Tensor(np.full((2, P), 0.3)), "minmax").data
    assert np.all(a == 1.0 / P)


# ================================================================ criterion 3


@pytest.mark.criterion(3)
def test_c3_local_differs_from_global():
    rng = np.random.default_rng(3)
    V, T = unit(rng, 4, 8), unit(rng, 3, 8)
    mask = np.ones(3, bool)
    v = V.mean(0) / np.linalg.norm(V.mean(0))
    t = T[-1]
    s_l = local_similarity(Tensor(V), Tensor(T), mask, 1 / 0.07).item()
    s_g = global_similarity(Tensor(v), Tensor(t), 1 / 0.07).item()
    assert abs(s_l - s_g) > 1e-3


@pytest.mark.criterion(3)
@pytest.mark.parametrize("seed", range(5))
def test_c3_single_token_single_patch_matches(seed):
    rng = np.random.default_rng(seed)
    V, T = unit(rng, 1, 8), unit(rng, 1, 8)
    s_l = local_similarity(Tensor(V), Tensor(T), np.ones(1, bool), 1 / 0.07, "softmax").item()
    # identity pooling: the pooled image vector is the single patch, the text vector the single token
    s_g = global_similarity(Tensor(V[0]), Tensor(T[0]), 1 / 0.07).item()
    assert abs(s_l - s_g) < 1e-9


# ================================================================ criterion 4


@pytest.fixture(scope="module")
def small_pair():
    data = make_dataset(128, seed=5)
    cfg = TrainConfig(steps=20, batch_size=16, warmup_steps=2, seed=5)
    pre = train(data, cfg).checkpoint
    ft = train(data, TrainConfig(steps=20, batch_size=16, warmup_steps=2, seed=5, phase="finetune"), init=pre).checkpoint
    return pre, ft


@pytest.mark.criterion(4)
def test_c4_endpoints_bit_exact(small_pair):
    pre, ft = small_pair
    for alpha, ref in ((0.0, pre), (1.0, ft)):
        got = checkpoint.wise_ft_interpolate(pre, ft, alpha)
        assert all(got.tensors[k].tobytes() == ref.tensors[k].tobytes() for k in ref.tensors)


@pytest.mark.criterion(4)
def test_c4_midpoint_one_ulp(small_pair):
    pre, ft = small_pair
    mid = checkpoint.wise_ft_interpolate(pre, ft, 0.5)
    for k in pre.tensors:
        exact = 0.5 * (pre.tensors[k].astype(np.float64) + ft.tensors[k].astype(np.float64))
        ulp = np.spacing(np.abs(exact).astype(np.float32))
        assert np.all(np.abs(mid.tensors[k] - exact) <= ulp)


@pytest.mark.criterion(4)
def test_c4_trajectory_runtime(small_pair, acceptance_notes):
    pre, ft = small_pair
    suites = make_eval_suites(500, seed=77)
    start = time.perf_counter()
    rows = wise_ft_trajectory(pre, ft, suites)
    elapsed = time.perf_counter() - start
    acceptance_notes.append(f"  interpolation trajectory: {len(rows)} points in {elapsed:.1f} s")
    assert [r["alpha"] for r in rows] == list(WISE_FT_ALPHAS)
    assert all(0 <= r["Comp"] <= 1 and 0 <= r["ZS"] <= 1 for r in rows)
    assert elapsed < 120


# ================================================================ criterion 5

LEX = default_lexicon()


def _scene_captions(n, seed):
    rng = np.random.default_rng(seed)
    return [caption(sample_scene(rng)) for _ in range(n)]


@pytest.mark.criterion(5)
def test_c5_deterministic_under_seed():
    caps = _scene_captions(200, 1)
    a = generate_corpus(caps, seed=4, step=2)
    b = generate_corpus(caps, seed=4, step=2)
    assert a == b
    assert a != generate_corpus(caps, seed=5, step=2)


@pytest.mark.criterion(5)
def test_c5_rule_contracts():
    for i, text in enumerate(_scene_captions(500, 2)):
        tc = tag(text)
        rng = random.Random(i)
        for rule in (negclip_swap, bigram_shuffle):
            out = rule(tc, rng)
            if out is not None:
                assert Counter(out.split()) == Counter(tc.tokens)
        out = lexicon_replace(tc, LEX, rng)
        if out is not None:
            assert sum(a != b for a, b in zip(out.split(), tc.tokens)) == 1


@pytest.mark.criterion(5)
@pytest.mark.parametrize(
    "text,valid",
    [
        ("a red circle", (False, True, False)),
        ("a red circle left of a blue square", (True, True, True)),
        ("a red circle left of a red circle", (True, True, True)),
    ],
)
def test_c5_worked_validity(text, valid):
    assert generate_set(text, seed=0).valid == valid


@pytest.mark.criterion(5)
def test_c5_corpus_throughput(acceptance_notes):
    caps = _scene_captions(10_000, 3)
    start = time.perf_counter()
    out = generate_corpus(caps, seed=0)
    elapsed = time.perf_counter() - start
    acceptance_notes.append(f"  hard negatives: 10k captions in {elapsed:.2f} s")
    assert len(out) == 10_000
    assert elapsed < 10


# ================================================================ criterion 6

SEEDS = (0, 1, 2)
N_SCENES = 2000
PRETRAIN = dict(steps=2000, lr=3e-4)
FINETUNE = dict(steps=500, lr=1e-4, phase="finetune")
VARIANTS = {
    "clip": LossConfig(lambda_g=0.0, lambda_l=0.0),
    "hn": LossConfig(gamma=0.0, beta=0.0),
    "hn+scr": LossConfig(),
}


@pytest.fixture(scope="module")
def ablation():
    start = time.perf_counter()
    reports = {}
    for seed in SEEDS:
        suites = make_eval_suites(500, seed=1000 + seed)
        data = make_dataset(N_SCENES, seed, exclude=suite_keys(suites))
        zero = LossConfig(lambda_g=0.0, lambda_l=0.0)
        pre = train(data, TrainConfig(seed=seed, loss=zero, **PRETRAIN)).checkpoint
        reports[seed] = {"pre": evaluate_checkpoint(pre, suites)}
        for name, loss in VARIANTS.items():
            ft = train(data, TrainConfig(seed=seed, loss=loss, **FINETUNE), init=pre).checkpoint
            reports[seed][name] = evaluate_checkpoint(ft, suites)
    return reports, time.perf_counter() - start


def _votes(reports, check):
    return [check(reports[s]) for s in SEEDS]


@pytest.fixture(scope="module")
def ablation_notes(ablation, acceptance_notes):
    reports, elapsed = ablation
    acceptance_notes.append(f"  ablation ({len(SEEDS)} seeds, {elapsed:.0f} s):")
    for s in SEEDS:
        for name, r in reports[s].items():
            acceptance_notes.append(
                f"    seed {s} {name:7s} comp_i2t {r.comp_i2t_acc:.3f}  group {r.comp_group_acc:.3f}"
                f"  zs {r.zs_acc:.3f}  i2t_r1 {r.i2t_r1:.3f}  t2i_r1 {r.t2i_r1:.3f}"
            )
    return reports


@pytest.mark.criterion(6)
def test_c6a_hn_raises_comp(ablation_notes):
    votes = _votes(ablation_notes, lambda r: r["hn"].comp_i2t_acc - r["pre"].comp_i2t_acc >= 0.15)
    assert sum(votes) >= 2, votes


@pytest.mark.criterion(6)
def test_c6b_scr_keeps_retrieval(ablation_notes):
    votes = _votes(ablation_notes, lambda r: r["hn+scr"].i2t_r1 >= r["hn"].i2t_r1)
    assert sum(votes) >= 2, votes


@pytest.mark.criterion(6)
def test_c6c_hn_costs_retrieval(ablation_notes):
    votes = _votes(ablation_notes, lambda r: r["hn"].i2t_r1 < r["clip"].i2t_r1)
    assert sum(votes) >= 2, votes


@pytest.mark.criterion(6)
def test_c6_runtime(ablation):
    assert ablation[1] < 15 * 60


def test_pretraining_retrieval_above_chance(ablation):
    for seed in SEEDS:
        assert ablation[0][seed]["pre"].i2t_r1 > 1 / 500


# ================================================================ criterion 7


@pytest.fixture(scope="module")
def random_report():
    cfg = EncoderConfig()
    ckpt = to_checkpoint(new_model(cfg, seed=0), cfg, {}, 0, 0)
    suites = make_eval_suites(500, seed=2024)
    return ckpt, suites, evaluate(ModelScorer(ckpt), suites)


@pytest.mark.criterion(7)
def test_c7_comp_at_chance(random_report):
    assert abs(random_report[2].comp_i2t_acc - 0.5) <= 0.06


@pytest.mark.criterion(7)
def test_c7_zs_at_chance(random_report):
    assert abs(random_report[2].zs_acc - 1 / 12) <= 0.04


@pytest.mark.criterion(7)
@pytest.mark.parametrize("seed", range(3))
def test_c7_r5_at_least_r1(random_report, seed):
    cfg = EncoderConfig()
    ckpt = to_checkpoint(new_model(cfg, seed=seed), cfg, {}, 0, 0)
    suites = {k: v[:200] for k, v in random_report[1].items()}
    for mode in ("global", "local"):
        rep = evaluate(ModelScorer(ckpt, mode=mode), suites)
        assert rep.i2t_r5 >= rep.i2t_r1 and rep.t2i_r5 >= rep.t2i_r1


# ================================================================ criterion 8


@pytest.fixture
def saved(tmp_path):
    cfg = EncoderConfig()
    run = {"seed": 3, "lr": 3e-4}
    ck = to_checkpoint(new_model(cfg, seed=3), cfg, run, 0, 3)
    path = tmp_path / "m.fsck"
    checkpoint.save(ck, path)
    return ck, path


@pytest.mark.criterion(8)
def test_c8_round_trip(saved):
    ck, path = saved
    back = checkpoint.load(path)
    assert back.metadata == ck.metadata
    assert all(back.tensors[k].tobytes() == ck.tensors[k].tobytes() for k in ck.tensors)
    assert back.to_bytes() == ck.to_bytes()


@pytest.mark.criterion(8)
def test_c8_bad_magic(saved):
    _, path = saved
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.CorruptFile):
        checkpoint.load(path)


@pytest.mark.criterion(8)
@pytest.mark.parametrize("frac", [0.0, 0.3, 0.999])
def test_c8_truncation(saved, frac):
    _, path = saved
    blob = path.read_bytes()
    path.write_bytes(blob[: int(len(blob) * frac)])
    with pytest.raises(checkpoint.CorruptFile):
        checkpoint.load(path)


@pytest.mark.criterion(8)
def test_c8_config_digest(saved, tmp_path):
    ck, path = saved
    assert ck.metadata["config_digest"] == checkpoint.config_digest({"seed": 3, "lr": 3e-4})
    assert checkpoint.load(path, expected_digest=ck.metadata["config_digest"])
    with pytest.raises(checkpoint.DigestMismatch):
        checkpoint.load(path, expected_digest="0" * 16)
    tampered = checkpoint.Checkpoint(ck.tensors, dict(ck.metadata, config={"seed": 4, "lr": 3e-4}))
    checkpoint.save(tampered, tmp_path / "t.fsck")
    with pytest.raises(checkpoint.CorruptFile):
        checkpoint.load(tmp_path / "t.fsck")
