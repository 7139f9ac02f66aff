"""Triplet losses, mining, Adam, schedule, and the epoch loop."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from openreid.errors import ValidationError
from openreid.head import HeadConfig, HeadGrads, HeadParams, init_params
from openreid.training import (
    AdamState,
    TrainConfig,
    Triplet,
    adam_step,
    batch_loss_and_output_grads,
    lr_at,
    matryoshka_triplet_loss,
    mine_random,
    mine_semi_hard,
    train,
    triplet_loss,
)


# --- losses ------------------------------------------------------------------


def test_triplet_loss_satisfied_margin():
    a = np.array([0.0, 0.0])
    n = np.array([2.0, 0.0])
    assert triplet_loss(a, a, n, alpha=1.0) == 0.0


def test_triplet_loss_identity_case():
    v = np.array([0.3, -0.4])
    assert triplet_loss(v, v, v, alpha=1.0) == 1.0


def test_triplet_loss_direct_formula():
    a, p, n = np.array([0.0]), np.array([3.0]), np.array([1.0])
    assert triplet_loss(a, p, n, alpha=1.0) == 3.0


def test_triplet_loss_translation_invariant():
    rng = np.random.Generator(np.random.PCG64(0))
    a, p, n = rng.normal(size=(3, 8))
    shift = rng.normal(size=8)
    assert triplet_loss(a, p, n, 1.0) == pytest.approx(
        triplet_loss(a + shift, p + shift, n + shift, 1.0), abs=1e-12
    )


def test_matryoshka_single_granularity_equals_plain():
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(100):
        a, p, n = rng.normal(size=(3, 16))
        a, p, n = (v / np.linalg.norm(v) for v in (a, p, n))
        plain = triplet_loss(a, p, n, 1.0)
        nested = matryoshka_triplet_loss(a, p, n, 1.0, dims=[16])
        assert abs(plain - nested) < 1e-12


def test_matryoshka_identical_vectors():
    v = np.random.default_rng(2).normal(size=8)
    assert matryoshka_triplet_loss(v, v, v, 1.0, dims=[4, 8]) == 2.0


def test_matryoshka_matches_per_prefix_oracle():
    rng = np.random.Generator(np.random.PCG64(3))
    a, p, n = rng.normal(size=(3, 16))
    dims = [4, 8, 16]
    got = matryoshka_triplet_loss(a, p, n, 1.0, dims)
    expected = 0.0
    for m in dims:
        wa, wp, wn = (v[:m] / np.linalg.norm(v[:m]) for v in (a, p, n))
        d_ap = np.linalg.norm(wa - wp)
        d_an = np.linalg.norm(wa - wn)
        expected += max(d_ap - d_an + 1.0, 0.0)
    assert got == pytest.approx(expected, abs=1e-12)


def test_inactive_triplet_zero_gradients():
    outputs = np.array([[0.0, 0.0], [0.0, 0.1], [5.0, 0.0]])
    config = TrainConfig(margin=1.0)
    loss, grad = batch_loss_and_output_grads(outputs, [Triplet(0, 1, 2)], config)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_duplicated_triplets_leave_mean_gradient_unchanged():
    rng = np.random.Generator(np.random.PCG64(4))
    outputs = rng.normal(size=(6, 8))
    triplets = [Triplet(0, 1, 2), Triplet(3, 4, 5)]
    config = TrainConfig()
    loss1, grad1 = batch_loss_and_output_grads(outputs, triplets, config)
    loss2, grad2 = batch_loss_and_output_grads(outputs, triplets * 2, config)
    assert loss1 == pytest.approx(loss2, abs=1e-9)
    assert np.allclose(grad1, grad2, atol=1e-9)


# --- mining ------------------------------------------------------------------


def valid_triplets(labels):
    n = len(labels)
    return {
        (a, p, x)
        for a, p, x in itertools.product(range(n), repeat=3)
        if a != p and labels[a] == labels[p] and labels[a] != labels[x]
    }


def test_mine_random_single_label_empty():
    rng = np.random.Generator(np.random.PCG64(5))
    assert mine_random(None, ["a", "a", "a"], rng, 10) == []


def test_mine_random_enumeration_membership():
    rng = np.random.Generator(np.random.PCG64(6))
    labels = ["a", "a", "b"]
    allowed = valid_triplets(labels)
    mined = mine_random(None, labels, rng, 50)
    assert mined
    for t in mined:
        assert (t.anchor, t.positive, t.negative) in allowed
    # both anchor/positive orderings should appear across enough draws
    seen = {(t.anchor, t.positive) for t in mined}
    assert seen == {(0, 1), (1, 0)}


def test_mine_random_deterministic():
    labels = ["a", "a", "b", "b", "c"]
    a = mine_random(None, labels, np.random.Generator(np.random.PCG64(7)), 20)
    b = mine_random(None, labels, np.random.Generator(np.random.PCG64(7)), 20)
    assert a == b


def test_mine_semi_hard_easy_clusters_empty():
    x = np.array([[0.0], [0.1], [100.0], [100.1]])
    labels = ["a", "a", "b", "b"]
    assert mine_semi_hard(x, labels, alpha=1.0) == []


def test_mine_semi_hard_worked_example():
    x = np.array([[0.0], [0.4], [0.7]])
    labels = ["a", "a", "b"]
    mined = mine_semi_hard(x, labels, alpha=1.0)
    # anchor 0 / positive 1: d(a,p)=0.4 < d(a,n)=0.7 < 1.4 -> included
    assert Triplet(0, 1, 2) in mined
    # anchor 1 / positive 0: d(a,p)=0.4, d(a,n)=0.3 -> negative nearer, excluded
    assert Triplet(1, 0, 2) not in mined


def test_mine_semi_hard_matches_exhaustive_filter():
    rng = np.random.Generator(np.random.PCG64(8))
    x = rng.normal(size=(12, 4))
    labels = [f"c{i % 3}" for i in range(12)]
    mined = {(t.anchor, t.positive, t.negative) for t in mine_semi_hard(x, labels, 1.0)}
    expected = set()
    for a, p, n in valid_triplets(labels):
        d_ap = np.linalg.norm(x[a] - x[p])
        d_an = np.linalg.norm(x[a] - x[n])
        if d_ap < d_an < d_ap + 1.0:
            expected.add((a, p, n))
    assert mined == expected


# --- optimizer and schedule ---------------------------------------------------


def single_param(value):
    params = HeadParams(w1=None, b1=None, w2=np.array([[value]]), b2=np.zeros(1))
    return params


def test_adam_first_step_magnitude():
    params = single_param(1.0)
    state = AdamState.for_params(params)
    grads = HeadGrads(w1=None, b1=None, w2=np.array([[0.5]]), b2=np.zeros(1))
    adam_step(params, grads, state, lr=0.01)
    assert params.w2[0, 0] == pytest.approx(1.0 - 0.01, abs=1e-6)


def test_adam_zero_gradient_no_move():
    params = single_param(2.0)
    state = AdamState.for_params(params)
    grads = HeadGrads(w1=None, b1=None, w2=np.zeros((1, 1)), b2=np.zeros(1))
    for _ in range(10):
        adam_step(params, grads, state, lr=0.1)
    assert params.w2[0, 0] == 2.0


def test_adam_matches_scalar_reference():
    # hand-stepped scalar Adam on the quadratic bowl f(w) = w^2 / 2
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    w_ref, m, v = 1.0, 0.0, 0.0
    params = single_param(1.0)
    state = AdamState.for_params(params)
    for t in range(1, 11):
        g = w_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)

        g_arr = HeadGrads(w1=None, b1=None, w2=params.w2.copy(), b2=np.zeros(1))
        adam_step(params, g_arr, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
    assert params.w2[0, 0] == pytest.approx(w_ref, abs=1e-12)


def test_adam_rejects_nan_gradient():
    params = single_param(1.0)
    state = AdamState.for_params(params)
    grads = HeadGrads(w1=None, b1=None, w2=np.array([[np.nan]]), b2=np.zeros(1))
    with pytest.raises(ValidationError):
        adam_step(params, grads, state, lr=0.1)


def test_lr_peak_at_warmup_end():
    config = TrainConfig(epochs=100, warmup_epochs=10, learning_rate=5e-4)
    assert lr_at(config, 10) == pytest.approx(5e-4, abs=1e-15)


def test_lr_cosine_midpoint():
    config = TrainConfig(epochs=100, warmup_epochs=10, learning_rate=5e-4)
    assert lr_at(config, 55) == pytest.approx(2.5e-4, abs=1e-12)


def test_lr_nonincreasing_after_warmup():
    config = TrainConfig(epochs=60, warmup_epochs=5)
    values = [lr_at(config, e) for e in range(5, 60)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_warmup_is_increasing_and_continuous():
    config = TrainConfig(epochs=40, warmup_epochs=8, learning_rate=1e-3)
    ramp = [lr_at(config, e) for e in range(9)]
    assert ramp[0] == pytest.approx(1e-3 / 8)
    assert all(a < b for a, b in zip(ramp, ramp[1:]))
    assert ramp[-1] == pytest.approx(1e-3)


# --- epoch loop ---------------------------------------------------------------


def clustered_batch(seed=0, n_ind=8, per=6, dim=12, scale=4.0, sigma=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(size=(n_ind, dim)) * scale
    xs, labels = [], []
    for c in range(n_ind):
        for _ in range(per):
            xs.append(centers[c] + sigma * rng.normal(size=dim))
            labels.append(f"ind{c}")
    return np.array(xs), labels


def small_train_configs():
    head = HeadConfig(input_dim=12, output_dim=8, dropout_rate=0.1)
    cfg = TrainConfig(
        epochs=6, warmup_epochs=2, batch_size=24, images_per_individual=3,
        mining="semi_hard", seed=42,
    )
    return head, cfg


def test_train_history_shape_and_determinism():
    xs, labels = clustered_batch(seed=1)
    vxs, vlabels = clustered_batch(seed=2, n_ind=4)
    vlabels = [f"val_{l}" for l in vlabels]
    head, cfg = small_train_configs()
    p1, h1 = train(xs, labels, vxs, vlabels, head, cfg)
    p2, h2 = train(xs, labels, vxs, vlabels, head, cfg)
    assert len(h1.records) == cfg.epochs
    assert h1.records == h2.records
    for a, b in zip(p1.arrays(), p2.arrays()):
        assert np.array_equal(a, b)


def test_train_rejects_overlapping_individuals():
    xs, labels = clustered_batch(seed=3)
    head, cfg = small_train_configs()
    with pytest.raises(ValidationError):
        train(xs, labels, xs, labels, head, cfg)


def test_train_returns_min_val_loss_epoch():
    xs, labels = clustered_batch(seed=4)
    vxs, vlabels = clustered_batch(seed=5, n_ind=4)
    vlabels = [f"v_{l}" for l in vlabels]
    head, cfg = small_train_configs()
    best, history = train(xs, labels, vxs, vlabels, head, cfg)

    # recompute: the returned params must score the minimum recorded val loss
    from openreid.training import _make_val_triplets, _val_loss

    triplets = _make_val_triplets(vlabels, cfg, seed=cfg.seed + 1)
    best_loss = _val_loss(best, head, vxs, triplets, cfg)
    recorded = min(r.val_loss for r in history.records)
    assert best_loss == pytest.approx(recorded, abs=1e-12)


def test_history_csv(tmp_path):
    xs, labels = clustered_batch(seed=6, n_ind=4)
    vxs, vlabels = clustered_batch(seed=7, n_ind=3)
    vlabels = [f"v_{l}" for l in vlabels]
    head, cfg = small_train_configs()
    _, history = train(xs, labels, vxs, vlabels, head, cfg)
    path = tmp_path / "history.csv"
    history.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,mined_triplets,learning_rate"
    assert len(lines) == cfg.epochs + 1


def test_random_mining_trains_too():
    xs, labels = clustered_batch(seed=8, n_ind=5)
    vxs, vlabels = clustered_batch(seed=9, n_ind=3)
    vlabels = [f"v_{l}" for l in vlabels]
    head, _ = small_train_configs()
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=15, mining="random", seed=0)
    _, history = train(xs, labels, vxs, vlabels, head, cfg)
    assert all(r.mined_triplets > 0 for r in history.records)


def test_matryoshka_dim_validation():
    with pytest.raises(ValidationError):
        TrainConfig(loss="matryoshka", matryoshka_dims=(8, 4)).validate(output_dim=8)
    with pytest.raises(ValidationError):
        TrainConfig(loss="matryoshka", matryoshka_dims=(4, 16)).validate(output_dim=8)
    TrainConfig(loss="matryoshka", matryoshka_dims=(4, 8)).validate(output_dim=8)
