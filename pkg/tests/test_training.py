import numpy as np
import pytest

from dacad.data import LabeledDataset, UnlabeledDataset, gen_gaussian_shift
from dacad.model import Architecture, ModelParams, encode, init_params
from dacad.numerics import DivergenceError, finite_difference_check
from dacad.swd import SwdConfig, sample_unit_directions, swd_estimate
from dacad.training import (PseudoLabelSet, TrainConfig, build_pseudo_labels, class_batches,
                            conditional_swd_loss, dacad_train, evaluate, pretrain,
                            source_only_train)


def linear_model(W, b=None):
    """Identity encoder followed by a single dense layer."""
    W = np.asarray(W, float)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, float)
    return ModelParams([], [W, b])


@pytest.fixture(scope="module")
def shift_task():
    pair = gen_gaussian_shift(60, 3, 2, 30.0, seed=0)
    arch = Architecture(2, 3, hidden=(16,), embed_dim=8)
    cfg = TrainConfig(itr=3, alt=2, batch_per_class=16, ce_batch_size=32, pretrain_epochs=5,
                      swd=SwdConfig(num_projections=16))
    params = pretrain(pair.source, init_params(arch, 0), cfg)
    return pair, cfg, params


# -- pre-training -----------------------------------------------------------------

def test_pretrain_separable_source():
    pair = gen_gaussian_shift(200, 2, 2, 0.0, seed=1, std=0.5)
    p = pretrain(pair.source, init_params(Architecture(2, 2, embed_dim=8), 0),
                 TrainConfig(pretrain_epochs=10))
    assert evaluate(p, pair.source).accuracy >= 0.99


def test_pretrain_ignores_lambda_and_is_seeded():
    pair = gen_gaussian_shift(30, 2, 2, 0.0, seed=1)
    p0 = init_params(Architecture(2, 2, embed_dim=4), 0)
    a = pretrain(pair.source, p0, TrainConfig(lam=0.0, pretrain_epochs=2))
    b = pretrain(pair.source, p0, TrainConfig(lam=1.0, pretrain_epochs=2))
    assert a.equals(b)
    c = pretrain(pair.source, p0, TrainConfig(pretrain_epochs=2, seed=1))
    assert not a.equals(c)


def test_pretrain_callback_and_empty_source():
    pair = gen_gaussian_shift(10, 2, 2, 0.0, seed=0)
    seen = []
    pretrain(pair.source, init_params(Architecture(2, 2, embed_dim=4), 0),
             TrainConfig(pretrain_epochs=3), lambda e, loss, p: seen.append((e, loss)))
    assert [e for e, _ in seen] == [0, 1, 2]
    with pytest.raises(ValueError):
        pretrain(pair.source.subset(np.arange(0)), init_params(Architecture(2, 2), 0),
                 TrainConfig())


def test_pretrain_divergence_names_step():
    pair = gen_gaussian_shift(10, 2, 2, 0.0, seed=0)
    p = init_params(Architecture(2, 2, embed_dim=4), 0)
    p.v[0][0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 0 step 0"):
        pretrain(pair.source, p, TrainConfig(pretrain_epochs=1))


# -- pseudo-labels ----------------------------------------------------------------

def test_pseudo_label_threshold_strict():
    # logit gap g gives confidence 1 / (1 + e^-g) for two classes
    gaps = np.log(np.array([0.995, 0.99, 0.5, 0.999]) / (1 - np.array([0.995, 0.99, 0.5, 0.999])))
    x = np.stack([gaps, np.zeros(4)], axis=1)
    pl = build_pseudo_labels(linear_model(np.eye(2)), x, 0.99)
    np.testing.assert_array_equal(pl.indices, [0, 3])
    np.testing.assert_array_equal(pl.labels, [0, 0])
    assert np.all(pl.confidences > 0.99)


def test_pseudo_labels_tau_one_empty(rng):
    x = 30 * rng.standard_normal((50, 3))
    assert len(build_pseudo_labels(linear_model(np.eye(3)), x, 1.0)) == 0


def test_pseudo_labels_uniform_model_empty(rng):
    pl = build_pseudo_labels(linear_model(np.zeros((4, 10))), rng.standard_normal((20, 4)), 0.99)
    assert len(pl) == 0 and pl.counts(10).sum() == 0


def test_pseudo_labels_reject_bad_tau(rng):
    with pytest.raises(ValueError):
        build_pseudo_labels(linear_model(np.eye(2)), np.zeros((1, 2)), 0.0)


# -- conditional alignment loss ---------------------------------------------------

def small_encoder(seed=0, f=4):
    return init_params(Architecture(3, 3, hidden=(6,), embed_dim=f), seed).v


def test_conditional_loss_empty_pseudo_labels(rng):
    v = small_encoder()
    src = [rng.standard_normal((4, 3)) for _ in range(3)]
    tgt = [np.zeros((0, 3))] * 3
    res = conditional_swd_loss(v, src, tgt, SwdConfig())
    assert res.loss == 0.0 and res.active == []
    assert all(np.all(g == 0) for g in res.grads)


def test_conditional_loss_identical_embeddings(rng):
    v = small_encoder()
    batches = [rng.standard_normal((5, 3)) for _ in range(3)]
    res = conditional_swd_loss(v, batches, [b[::-1] for b in batches], SwdConfig())
    assert res.loss == pytest.approx(0.0, abs=1e-12)


def test_conditional_loss_decomposes(rng):
    v = small_encoder(1)
    src = [rng.standard_normal((n, 3)) for n in (4, 6, 3)]
    tgt = [rng.standard_normal((n, 3)) + 1 for n in (4, 6, 0)]
    cfg = SwdConfig(num_projections=10)
    P = sample_unit_directions(10, 4, seed=2)
    res = conditional_swd_loss(v, src, tgt, cfg, P)
    parts = [swd_estimate(encode(v, s)[0], encode(v, t)[0], cfg, P).value
             for s, t in zip(src[:2], tgt[:2])]
    assert res.active == [0, 1]
    assert res.per_class[2] == 0.0
    assert res.loss == pytest.approx(sum(parts), abs=1e-12)


@pytest.mark.parametrize("source_grad", [True, False])
def test_conditional_loss_gradient(rng, source_grad):
    v = small_encoder(2)
    src = [rng.standard_normal((5, 3)) for _ in range(3)]
    tgt = [rng.standard_normal((5, 3)) + 0.5 for _ in range(2)] + [np.zeros((0, 3))]
    cfg = SwdConfig(num_projections=8)
    P = sample_unit_directions(8, 4, seed=3)
    res = conditional_swd_loss(v, src, tgt, cfg, P, source_grad=source_grad)
    if source_grad:
        loss = lambda vs: conditional_swd_loss(vs, src, tgt, cfg, P).loss
        assert finite_difference_check(loss, v, res.grads, h=1e-6) < 1e-4
    else:
        # only the target side moves: compare with the loss against frozen source embeddings
        zs = [encode(v, s)[0] for s in src[:2]]

        def loss(vs):
            return sum(swd_estimate(z, encode(vs, t)[0], cfg, P).value for z, t in zip(zs, tgt))
        assert finite_difference_check(loss, v, res.grads, h=1e-6) < 1e-4


def test_conditional_loss_requires_equal_counts(rng):
    v = small_encoder()
    with pytest.raises(ValueError):
        conditional_swd_loss(v, [rng.standard_normal((3, 3))], [rng.standard_normal((2, 3))],
                             SwdConfig())


def test_class_batches_equal_counts(rng):
    source = LabeledDataset(rng.standard_normal((30, 2)), np.repeat([0, 1, 2], 10))
    tx = rng.standard_normal((20, 2))
    pl = PseudoLabelSet(np.arange(7), np.array([0, 0, 0, 1, 1, 1, 1]), np.ones(7))
    src, tgt = class_batches(source, tx, pl, 3, 2, rng)
    assert [len(s) for s in src] == [2, 2, 0]
    assert [len(t) for t in tgt] == [2, 2, 0]
    src, tgt = class_batches(source, tx, pl, 3, None, rng)
    assert [len(t) for t in tgt] == [3, 4, 0]
    assert set(map(tuple, tgt[1])) == set(map(tuple, tx[3:7]))


# -- training loop --------------------------------------------------------------

def test_lambda_zero_equals_source_only(shift_task):
    pair, cfg, p0 = shift_task
    z = TrainConfig(**{**cfg.__dict__, "lam": 0.0})
    a, _ = dacad_train(pair.source, pair.target.unlabeled(), p0, z)
    b, _ = source_only_train(pair.source, p0, z)
    assert a.equals(b)


def test_alignment_changes_model(shift_task):
    pair, cfg, p0 = shift_task
    a, log = dacad_train(pair.source, pair.target.unlabeled(), p0, cfg)
    b, _ = source_only_train(pair.source, p0, cfg)
    assert sum(r.swd_steps for r in log.records) > 0
    assert not a.equals(b)


def test_single_iteration_step_counts(shift_task):
    pair, cfg, p0 = shift_task
    one = TrainConfig(**{**cfg.__dict__, "itr": 1, "alt": 1})
    _, log = dacad_train(pair.source, pair.target.unlabeled(), p0, one)
    assert len(log) == 1
    assert (log.records[0].swd_steps, log.records[0].ce_steps) == (1, 1)
    with pytest.raises(ValueError):
        TrainConfig(itr=0)


def test_training_log_contents(shift_task):
    pair, cfg, p0 = shift_task
    calls = []
    params, log = dacad_train(pair.source, pair.target.unlabeled(), p0, cfg,
                              eval_target=pair.target,
                              callback=lambda rec, p, pl: calls.append((rec.iteration, len(pl))))
    assert [r.iteration for r in log.records] == [1, 2, 3]
    assert [c[0] for c in calls] == [1, 2, 3]
    assert log.pl_totals() == [c[1] for c in calls]
    for rec in log.records:
        assert np.all(rec.pl_counts >= 0)
        assert 0 <= rec.pl_correct <= rec.pl_counts.sum()
        assert 0 <= rec.target_acc <= 1
    assert log.records[-1].target_acc == evaluate(params, pair.target).accuracy


def test_alignment_step_leaves_classifier_alone(shift_task):
    pair, cfg, p0 = shift_task
    # a frozen-encoder run: the CE step cannot touch v, so any change to v is the
    # alignment step, and w is only moved by CE (same as source-only)
    frozen = TrainConfig(**{**cfg.__dict__, "cotrain_encoder": False})
    a, _ = dacad_train(pair.source, pair.target.unlabeled(), p0, frozen)
    b, _ = source_only_train(pair.source, p0, frozen)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(b.v, p0.v))
    assert not all(x.tobytes() == y.tobytes() for x, y in zip(a.v, p0.v))


def test_training_deterministic(shift_task):
    pair, cfg, p0 = shift_task
    a, _ = dacad_train(pair.source, pair.target.unlabeled(), p0, cfg)
    b, _ = dacad_train(pair.source, pair.target.unlabeled(), p0, cfg)
    assert a.equals(b)


def test_target_labels_are_stripped(shift_task):
    pair, cfg, p0 = shift_task
    one = TrainConfig(**{**cfg.__dict__, "itr": 1})
    a, _ = dacad_train(pair.source, pair.target, p0, one)
    b, _ = dacad_train(pair.source, pair.target.unlabeled(), p0, one)
    assert a.equals(b)


def test_divergence_reports_iteration(shift_task):
    pair, cfg, p0 = shift_task
    bad = p0.copy()
    bad.w[0][:] = np.nan
    with pytest.raises(DivergenceError) as exc:
        source_only_train(pair.source, bad, cfg)
    assert exc.value.iteration == 1


def test_dim_mismatch_rejected(shift_task):
    pair, cfg, p0 = shift_task
    with pytest.raises(ValueError):
        dacad_train(pair.source, UnlabeledDataset(np.zeros((3, 5))), p0, cfg)


# -- evaluation -----------------------------------------------------------------

def test_evaluate_perfect_model():
    y = np.array([0, 1, 2, 1])
    ds = LabeledDataset(1e6 * np.eye(3)[y], y)
    res = evaluate(linear_model(np.eye(3)), ds)
    assert res.accuracy == 1.0
    np.testing.assert_array_equal(res.per_class, [1, 1, 1])
    np.testing.assert_array_equal(res.support, [1, 2, 1])


def test_evaluate_adversarial_labels():
    y = np.array([0, 1] * 5)
    ds = LabeledDataset(np.eye(2)[y], 1 - y)
    assert evaluate(linear_model(np.eye(2)), ds).accuracy == 0.0


def test_evaluate_random_predictor(rng):
    y = np.repeat(np.arange(10), 100)
    ds = LabeledDataset(rng.standard_normal((1000, 10)), y)
    assert evaluate(linear_model(np.eye(10)), ds).accuracy == pytest.approx(0.1, abs=0.03)


def test_evaluate_absent_class_is_nan():
    ds = LabeledDataset(np.eye(3)[[0, 0]], [0, 0])
    res = evaluate(linear_model(np.eye(3)), ds)
    assert res.per_class[0] == 1.0 and np.isnan(res.per_class[1])


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(linear_model(np.eye(2)), LabeledDataset(np.zeros((0, 2)), np.zeros(0)))
