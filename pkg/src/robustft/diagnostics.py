"""Evaluation and analysis: robust accuracy, FGSM-vs-PGD similarity,
catastrophic-overfitting detection and attack timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, delta, generate
from .data_io import ImageDataset, batches

ZERO_DELTA = 1e-12
EVAL_BATCH = 256


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class RobustnessReport:
    nat_acc: float
    robust_acc: float
    attack: AttackSpec
    n_examples: int
    nat_loss: float = float("nan")
    robust_loss: float = float("nan")


@dataclass(frozen=True)
class SimilarityReport:
    eps_255: float
    mean_cos: float
    loss_ratio: float
    racc_ratio: float | None  # None when the first attack's robust accuracy is 0
    n_examples: int
    n_excluded: int


@dataclass(frozen=True)
class OverfitVerdict:
    detected: bool
    onset_epoch: int | None
    peak_racc: float
    final_racc: float


def _per_example_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def attacked(model, data: ImageDataset, attack: AttackSpec, batch_size: int = EVAL_BATCH):
    """Clean and adversarial inputs for every example, batch by batch in order."""
    for b, (x, y) in enumerate(batches(data, batch_size)):
        yield x, y, generate(model, x, y, attack, batch_index=b)


def evaluate(model, data: ImageDataset, attack: AttackSpec, batch_size: int = EVAL_BATCH) -> RobustnessReport:
    """Clean and adversarial accuracy over ``data`` (deterministic in the attack seed)."""
    if data is None or len(data) == 0:
        raise DiagnosticsError("evaluation set is empty")
    nat = rob = 0
    nat_loss = rob_loss = 0.0
    for x, y, x_adv in attacked(model, data, attack, batch_size):
        clean = model.logits(x)
        adv = model.logits(x_adv)
        nat += int((clean.argmax(1) == y).sum())
        rob += int((adv.argmax(1) == y).sum())
        nat_loss += float(_per_example_loss(clean, y).sum())
        rob_loss += float(_per_example_loss(adv, y).sum())
    n = len(data)
    return RobustnessReport(nat / n, rob / n, attack, n, nat_loss / n, rob_loss / n)


def similarity(model, data: ImageDataset, attack_a: AttackSpec, attack_b: AttackSpec,
               batch_size: int = EVAL_BATCH) -> SimilarityReport:
    """Compare perturbations and strength of two attacks on the same examples.

    ``mean_cos`` averages cos(delta_a, delta_b) per example, skipping examples
    where either perturbation vanishes (counted in ``n_excluded``).
    ``loss_ratio`` = mean loss_a / mean loss_b and ``racc_ratio`` = RAcc_b / RAcc_a.
    """
    cos_sum, used, excluded = 0.0, 0, 0
    loss_a = loss_b = 0.0
    correct_a = correct_b = 0
    for b, (x, y) in enumerate(batches(data, batch_size)):
        xa = generate(model, x, y, attack_a, batch_index=b)
        xb = generate(model, x, y, attack_b, batch_index=b)
        da = delta(xa, x).reshape(len(x), -1)
        db = delta(xb, x).reshape(len(x), -1)
        na, nb = np.linalg.norm(da, axis=1), np.linalg.norm(db, axis=1)
        keep = (na >= ZERO_DELTA) & (nb >= ZERO_DELTA)
        excluded += int((~keep).sum())
        if keep.any():
            with ad.no_grad():
                cos = ad.cos_sim_rows(da[keep], db[keep]).value
            cos_sum += float(np.clip(cos, -1.0, 1.0).sum())
            used += int(keep.sum())
        la, lb = model.logits(xa), model.logits(xb)
        loss_a += float(_per_example_loss(la, y).sum())
        loss_b += float(_per_example_loss(lb, y).sum())
        correct_a += int((la.argmax(1) == y).sum())
        correct_b += int((lb.argmax(1) == y).sum())
    n = len(data)
    mean_cos = cos_sum / used if used else float("nan")
    loss_ratio = loss_a / loss_b if loss_b > 0 else float("nan")
    racc_ratio = correct_b / correct_a if correct_a else None
    return SimilarityReport(attack_a.eps_255, mean_cos, loss_ratio, racc_ratio, n, excluded)


def similarity_sweep(
    model_per_eps: Mapping[float, object],
    data: ImageDataset,
    pgd_spec: AttackSpec | None = None,
    fgsm_spec: Callable[[float], AttackSpec] = AttackSpec.fgsm,
) -> list[SimilarityReport]:
    """FGSM vs PGD similarity for each (eps, model) pair, in ascending eps order.

    ``pgd_spec`` is rescaled to each eps (default PGD-7, step eps/4, no random start).
    """
    pgd_spec = pgd_spec or AttackSpec.pgd(8, steps=7)
    reports = []
    for eps in sorted(model_per_eps):
        model = model_per_eps[eps]
        reports.append(similarity(model, data, fgsm_spec(eps), pgd_spec.with_eps(eps)))
    return reports


def _robust_curve(history) -> list[float]:
    records = getattr(history, "records", history)
    out = []
    for r in records:
        v = getattr(r, "robust_acc_pgd10", r)
        if v is None:
            raise DiagnosticsError("history has epochs without robust accuracy")
        out.append(float(v))
    return out


def detect_overfit(history, drop_fraction: float = 0.5, window: int = 3) -> OverfitVerdict:
    """Flag a robustness collapse: ``window`` consecutive epochs below
    ``drop_fraction`` times the running peak. The onset is the first of them.

    ``history`` is a RunHistory, a list of epoch records, or a list of floats.
    """
    curve = _robust_curve(history)
    if not curve:
        raise DiagnosticsError("history is empty")
    peak = -np.inf
    run = 0
    onset = None
    for epoch, v in enumerate(curve):
        if v > peak:
            peak = v
        if v < drop_fraction * peak:
            run += 1
            if run == window:
                onset = epoch - window + 1
                break
        else:
            run = 0
    return OverfitVerdict(onset is not None, onset, float(max(curve)), float(curve[-1]))


@dataclass
class TimingReport:
    seconds: list[float]
    grad_calls_per_batch: dict[str, float] = field(default_factory=dict)

    @property
    def median(self) -> float:
        return float(np.median(self.seconds))


def time_passes(run_pass: Callable[[], object], repeats: int, n_batches: int) -> TimingReport:
    """Median wall time of ``run_pass`` over ``repeats`` timed calls after one warm-up."""
    if repeats < 3:
        raise DiagnosticsError("repeats must be >= 3")
    run_pass()
    times = []
    with ad.grad_calls() as calls:
        for _ in range(repeats):
            t0 = time.perf_counter()
            run_pass()
            times.append(time.perf_counter() - t0)
    per_batch = {k: v / (repeats * n_batches) for k, v in calls.items()}
    return TimingReport(times, per_batch)


def time_attack(model, data: ImageDataset, spec: AttackSpec, repeats: int = 3,
                batch_size: int = 128, train_plan=None) -> TimingReport:
    """Seconds per pass over ``data``.

    Without ``train_plan`` only attack generation is timed; with one, a full
    adversarial training epoch (attack + parameter update) on a scratch copy
    of the model is timed.
    """
    n_batches = len(batches(data, batch_size))
    if train_plan is None:
        def run_pass():
            for _ in attacked(model, data, spec, batch_size):
                pass
    else:
        from .trainer import OptimizerState, adv_train_epoch

        plan = train_plan.replace(attack=spec, batch_size=batch_size)

        def run_pass():
            scratch = model.copy()
            adv_train_epoch(scratch, data, plan, 0, OptimizerState.for_model(scratch, plan.peft))
    return time_passes(run_pass, repeats, n_batches)


def median_seconds(times: Sequence[float]) -> float:
    return float(np.median(np.asarray(times, dtype=np.float64)))
