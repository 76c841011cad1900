import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustft.attacks import AttackSpec
from robustft.data_io import ImageDataset, SynthSpec, synth_clusters
from robustft.diagnostics import (
    DiagnosticsError,
    detect_overfit,
    evaluate,
    median_seconds,
    similarity,
    similarity_sweep,
    time_attack,
    time_passes,
)
from robustft.models import ModelSpec, build_model, reinit_head
from robustft.trainer import TrainPlan
from helpers import LinearSoftmax


@pytest.fixture(scope="module")
def data():
    return synth_clusters(SynthSpec(n_per_class=20, dims=(1, 4, 4), num_classes=4, noise_sigma=0.2, seed=3))


def small_model(seed=0):
    return build_model(ModelSpec("mlp", (1, 4, 4), hidden=(12,), num_classes=4), seed)


def test_zero_budget_robust_equals_natural(data):
    rep = evaluate(small_model(), data, AttackSpec.pgd(0, steps=10))
    assert rep.robust_acc == rep.nat_acc and rep.robust_loss == rep.nat_loss
    assert rep.n_examples == len(data)


def test_constant_output_model_is_at_chance(data):
    model = reinit_head(small_model(), 4, init="zero")
    rep = evaluate(model, data, AttackSpec.fgsm(8))
    # all logits tie, argmax picks class 0, which holds a quarter of the labels
    assert rep.nat_acc == rep.robust_acc == pytest.approx(0.25)
    assert rep.nat_loss == pytest.approx(np.log(4), abs=1e-12)


def test_more_pgd_steps_never_help_on_linear_model():
    rng = np.random.default_rng(0)
    model = LinearSoftmax(rng.standard_normal((16, 2)), rng.standard_normal(2))
    ds = ImageDataset(rng.random((64, 1, 4, 4)), rng.integers(0, 2, 64), 2)
    r1 = evaluate(model, ds, AttackSpec.pgd(8, steps=1))
    r10 = evaluate(model, ds, AttackSpec.pgd(8, steps=10))
    assert r10.robust_acc <= r1.robust_acc and r10.robust_loss >= r1.robust_loss - 1e-12
    assert r1.robust_acc <= r1.nat_acc


def test_evaluate_rejects_empty():
    with pytest.raises(DiagnosticsError):
        evaluate(small_model(), None, AttackSpec.fgsm(8))


def test_self_similarity(data):
    rep = similarity(small_model(1), data, AttackSpec.fgsm(8), AttackSpec.fgsm(8))
    assert rep.mean_cos == pytest.approx(1.0, abs=1e-12)
    assert rep.loss_ratio == 1.0 and rep.racc_ratio in (1.0, None)
    assert rep.n_examples == len(data)


def test_saturated_single_pixel_similarity():
    # one pixel, gradient sign fixed: FGSM and PGD both hit the same corner
    model = LinearSoftmax(np.array([[-1.0, 1.0]]), np.zeros(2))
    ds = ImageDataset(np.full((5, 1, 1, 1), 0.5), np.zeros(5, int), 2)
    rep = similarity(model, ds, AttackSpec.fgsm(8), AttackSpec.pgd(8, steps=7))
    assert rep.mean_cos == pytest.approx(1.0, abs=1e-12) and rep.n_excluded == 0
    assert rep.loss_ratio == pytest.approx(1.0, abs=1e-12)


def test_zero_perturbations_are_excluded():
    model = LinearSoftmax(np.array([[-1.0, 1.0]]), np.zeros(2))
    # label 0 pushes the pixel up, so examples already at 1.0 cannot move
    x = np.array([1.0, 1.0, 0.5]).reshape(3, 1, 1, 1)
    ds = ImageDataset(x, np.zeros(3, int), 2)
    rep = similarity(model, ds, AttackSpec.fgsm(8), AttackSpec.pgd(8, steps=7))
    assert rep.n_excluded == 2 and rep.mean_cos == pytest.approx(1.0)


def test_similarity_sweep_orders_eps(data):
    models = {16: small_model(2), 4: small_model(3)}
    reps = similarity_sweep(models, data)
    assert [r.eps_255 for r in reps] == [4, 16]
    for r in reps:
        assert -1.0 <= r.mean_cos <= 1.0 and r.loss_ratio > 0


def test_detect_overfit_examples():
    v = detect_overfit([0.50, 0.52, 0.51, 0.10, 0.08, 0.07])
    assert v.detected and v.onset_epoch == 3
    assert v.peak_racc == 0.52 and v.final_racc == 0.07
    assert not detect_overfit([0.1, 0.2, 0.3, 0.3, 0.3]).detected
    # a two-epoch dip is noise, not a collapse
    assert not detect_overfit([0.5, 0.1, 0.1, 0.5, 0.5]).detected
    with pytest.raises(DiagnosticsError):
        detect_overfit([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=30))
def test_nondecreasing_curve_never_fires(values):
    assert not detect_overfit(sorted(values)).detected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20), st.integers(3, 6))
def test_drop_to_zero_always_fires(values, tail):
    v = detect_overfit(values + [0.0] * tail)
    assert v.detected and v.onset_epoch <= len(values)


def test_time_passes_counts_and_median():
    ticks = iter(range(100))
    rep = time_passes(lambda: next(ticks), repeats=3, n_batches=1)
    assert len(rep.seconds) == 3 and rep.median == median_seconds(rep.seconds)
    with pytest.raises(DiagnosticsError):
        time_passes(lambda: None, repeats=2, n_batches=1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=9), st.randoms())
def test_median_is_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert median_seconds(values) == median_seconds(shuffled)


def test_time_attack_gradient_ratio(data):
    model = small_model()
    pgd = time_attack(model, data, AttackSpec.pgd(8, steps=7), repeats=3, batch_size=20)
    fgsm = time_attack(model, data, AttackSpec.fgsm(8), repeats=3, batch_size=20)
    assert pgd.grad_calls_per_batch == {"input": 7.0}
    assert fgsm.grad_calls_per_batch == {"input": 1.0}
    plan = TrainPlan(epochs=1)
    tr = time_attack(model, data, AttackSpec.fgsm(8), repeats=3, batch_size=20, train_plan=plan)
    assert tr.grad_calls_per_batch == {"input": 1.0, "param": 1.0}
    assert all(s > 0 for s in tr.seconds)
