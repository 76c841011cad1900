"""Adversarial training / fine-tuning with PEFT masks, GradAlign and RoLI."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, clamp_domain, generate, uniform_init
from .data_io import ImageDataset, batches
from .diagnostics import evaluate
from .models import Model, PeftMode, trainable_set

ROLI_FULL_LR = 0.005
GRADALIGN_LAMBDA = 0.2
# stream tag that keeps GradAlign's uniform draw independent of FGSM+RI's
GRADALIGN_STREAM = 0x6A


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    peft: PeftMode = PeftMode.FULL
    attack: AttackSpec = field(default_factory=lambda: AttackSpec.fgsm(8))
    gradalign_lambda: float = 0.0
    eval_attack: AttackSpec | None = None  # None: PGD-10, step eps/4, no random start
    seed: int = 0
    eval_subset: int | None = None
    milestones: tuple[float, float] = (0.25, 0.75)
    lr_drop: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "peft", PeftMode(self.peft))
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise TrainError("need lr > 0, momentum in [0, 1), weight_decay >= 0")
        if self.gradalign_lambda < 0:
            raise TrainError("gradalign_lambda must be non-negative")

    @property
    def resolved_eval_attack(self) -> AttackSpec:
        if self.eval_attack is not None:
            return self.eval_attack
        return AttackSpec.pgd(self.attack.eps_255, steps=10)

    def replace(self, **changes) -> "TrainPlan":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        d["peft"] = self.peft.value
        d["attack"] = self.attack.to_json()
        d["eval_attack"] = self.resolved_eval_attack.to_json()
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def for_model(cls, model: Model, peft) -> "OptimizerState":
        names = trainable_set(model, peft)
        return cls({n: np.zeros_like(model.params[n]) for n in model.params if n in names})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_attack_acc: float
    nat_acc: float | None
    robust_acc_pgd10: float | None
    wall_time_sec: float
    lr_used: float

    def metrics(self) -> tuple:
        """Everything except wall time (the deterministic part of the record)."""
        return (self.epoch, self.train_loss, self.train_attack_acc, self.nat_acc,
                self.robust_acc_pgd10, self.lr_used)


@dataclass
class RunHistory:
    records: list[EpochRecord]
    best_epoch: int | None
    best_checkpoint: Model
    final_model: Model
    plan: TrainPlan | None = None

    @property
    def peak_robust_acc(self) -> float:
        return self.records[self.best_epoch].robust_acc_pgd10 if self.records else float("nan")

    @property
    def peak_nat_acc(self) -> float:
        return self.records[self.best_epoch].nat_acc if self.records else float("nan")

    @property
    def total_time(self) -> float:
        return float(sum(r.wall_time_sec for r in self.records))

    def same_metrics(self, other: "RunHistory") -> bool:
        return (
            [r.metrics() for r in self.records] == [r.metrics() for r in other.records]
            and self.best_epoch == other.best_epoch
            and self.best_checkpoint.equal(other.best_checkpoint)
        )


def lr_at_epoch(plan: TrainPlan, epoch: int) -> float:
    """Base lr times ``lr_drop`` per passed milestone (floor(epochs/4), floor(3 epochs/4)).

    A milestone that floors to epoch 0 is skipped, so epoch 0 always runs at the base lr.
    """
    if not 0 <= epoch < max(plan.epochs, 1):
        raise TrainError(f"epoch {epoch} outside [0, {plan.epochs})")
    marks = (math.floor(f * plan.epochs) for f in plan.milestones)
    passed = sum(0 < m <= epoch for m in marks)
    return plan.lr * plan.lr_drop**passed


def sgd_momentum_step(model: Model, grads, state: OptimizerState, lr: float,
                      momentum: float, wd: float) -> tuple[Model, OptimizerState]:
    """v <- m v + (g + wd theta); theta <- theta - lr v, for keys of ``state`` only."""
    missing = set(state.velocity) - set(grads)
    if missing:
        raise TrainError(f"missing gradients for {sorted(missing)}")
    for name, v in state.velocity.items():
        theta = model.params[name]
        v = momentum * v + (grads[name] + wd * theta)
        state.velocity[name] = v
        model.params[name] = theta - lr * v
    return model, state


def gradalign_penalty(model: Model, x: np.ndarray, y: np.ndarray, eps_255: float, seed: int = 0,
                      batch_index: int = 0, params=None, noise: np.ndarray | None = None) -> ad.Node:
    """Mean over the batch of 1 - cos(grad_x L(x), grad_x L(x + delta)), delta ~ U(-eps, eps).

    Both input gradients are built with ``create_graph`` so the result can be
    differentiated with respect to the nodes in ``params``. ``noise`` overrides
    the random delta.
    """
    x = np.asarray(x, dtype=np.float64)
    if noise is None:
        noise = uniform_init(x.shape, eps_255, seed, batch_index, stream=GRADALIGN_STREAM)
    grads = []
    for point in (x, clamp_domain(x + noise)):
        xn = ad.leaf(point, requires_grad=True)
        loss = ad.cross_entropy(model.forward(xn, params), y)
        (g,) = ad.backward(loss, [xn], create_graph=True, tag="gradalign")
        grads.append(ad.reshape(g, (len(x), -1)))
    cos = ad.cos_sim_rows(grads[0], grads[1])
    return ad.mean(ad.sub(1.0, cos))


def _batch_key(epoch: int, b: int) -> int:
    return epoch * 1_000_003 + b


def adv_train_epoch(model: Model, data: ImageDataset, plan: TrainPlan, epoch: int,
                    state: OptimizerState, eval_data: ImageDataset | None = None) -> EpochRecord:
    """One pass of min-max training; updates ``model`` and ``state`` in place.

    Each batch: attack with ``plan.attack``, then one SGD-momentum step on the
    adversarial cross-entropy (+ lambda * GradAlign on the clean batch).
    """
    lr = lr_at_epoch(plan, epoch)
    names = [n for n in model.params if n in state.velocity]
    attack = replace(plan.attack, seed=plan.seed)
    total_loss = 0.0
    correct = 0
    t0 = time.perf_counter()
    for b, (x, y) in enumerate(batches(data, plan.batch_size, shuffle_seed=(plan.seed, epoch))):
        key = _batch_key(epoch, b)
        x_adv = generate(model, x, y, attack, batch_index=key)
        params = {n: ad.leaf(model.params[n], requires_grad=True) for n in names}
        logits = model.forward(x_adv, params)
        loss = ad.cross_entropy(logits, y)
        if plan.gradalign_lambda > 0:
            reg = gradalign_penalty(model, x, y, plan.attack.eps_255, plan.seed, key, params)
            loss = ad.add(loss, ad.scale(reg, plan.gradalign_lambda))
        gs = ad.backward(loss, [params[n] for n in names], tag="param")
        sgd_momentum_step(model, dict(zip(names, gs)), state, lr, plan.momentum, plan.weight_decay)
        total_loss += float(loss.value) * len(y)
        correct += int((logits.value.argmax(1) == y).sum())
    wall = time.perf_counter() - t0
    nat = rob = None
    if eval_data is not None:
        report = evaluate(model, eval_data.head(plan.eval_subset), plan.resolved_eval_attack)
        nat, rob = report.nat_acc, report.robust_acc
    n = len(data)
    return EpochRecord(epoch, total_loss / n, correct / n, nat, rob, wall, lr)


def _check_classes(model: Model, data: ImageDataset):
    if model.spec.num_classes != data.num_classes:
        raise TrainError(
            f"model head has {model.spec.num_classes} classes but the data has {data.num_classes}"
        )


def train(model: Model, train_data: ImageDataset, test_data: ImageDataset, plan: TrainPlan,
          on_epoch=None) -> RunHistory:
    """Run ``plan.epochs`` epochs on a copy of ``model``, evaluating after each.

    The best checkpoint is the epoch with the highest robust accuracy under
    ``plan.resolved_eval_attack`` (earliest on ties).
    """
    _check_classes(model, train_data)
    _check_classes(model, test_data)
    work = model.copy()
    state = OptimizerState.for_model(work, plan.peft)
    records: list[EpochRecord] = []
    best_epoch, best = None, work.copy()
    for epoch in range(plan.epochs):
        rec = adv_train_epoch(work, train_data, plan, epoch, state, eval_data=test_data)
        records.append(rec)
        if best_epoch is None or rec.robust_acc_pgd10 > records[best_epoch].robust_acc_pgd10:
            best_epoch, best = epoch, work.copy()
        if on_epoch is not None:
            on_epoch(rec)
    return RunHistory(records, best_epoch, best, work, plan)


def roli_plans(plan_lp: TrainPlan, ft_peft=PeftMode.FULL, ft_epochs: int | None = None,
               ft_attack: AttackSpec | None = None, ft_lr: float | None = None) -> tuple[TrainPlan, TrainPlan]:
    """Stage plans for RoLI: linear probing first, then ``ft_peft``.

    Stage 2 of full fine-tuning defaults to lr 0.005.
    """
    ft_peft = PeftMode(ft_peft)
    lp = plan_lp.replace(peft=PeftMode.LINEAR_PROBE)
    if ft_lr is None:
        ft_lr = ROLI_FULL_LR if ft_peft is PeftMode.FULL else plan_lp.lr
    ft = plan_lp.replace(
        peft=ft_peft,
        epochs=plan_lp.epochs if ft_epochs is None else ft_epochs,
        attack=ft_attack or plan_lp.attack,
        lr=ft_lr,
    )
    return lp, ft


def roli(model: Model, train_data: ImageDataset, test_data: ImageDataset, plan_lp: TrainPlan,
         plan_ft: TrainPlan | None = None) -> tuple[RunHistory, RunHistory]:
    """Robust linear initialization: adversarial linear probing, then fine-tuning
    from the stage-1 best checkpoint."""
    if plan_lp.peft is not PeftMode.LINEAR_PROBE:
        raise TrainError("RoLI stage 1 must use linear_probe")
    if plan_ft is None:
        _, plan_ft = roli_plans(plan_lp)
    stage1 = train(model, train_data, test_data, plan_lp)
    start = stage1.best_checkpoint
    if start.spec.num_classes != train_data.num_classes:
        raise TrainError("class count changed between RoLI stages")
    stage2 = train(start, train_data, test_data, plan_ft)
    return stage1, stage2
