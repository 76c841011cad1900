"""l-inf adversarial examples: FGSM, FGSM with random init, and PGD-k.

Budgets and step sizes are given in 1/255 pixel units and converted to the
[0, 1] image domain exactly once, inside each attack.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

DOMAIN = (0.0, 1.0)
KINDS = ("fgsm", "fgsm_ri", "pgd")
RI_STEP = 1.25


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    eps_255: float
    steps: int = 1
    step_size_255: float | None = None  # defaults: eps (fgsm), 1.25 eps (fgsm_ri), eps/4 (pgd)
    rand_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.eps_255 < 0:
            raise AttackError("eps must be non-negative")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        default = {"fgsm": 1.0, "fgsm_ri": RI_STEP, "pgd": 0.25}[self.kind] * self.eps_255
        if self.step_size_255 is None:
            object.__setattr__(self, "step_size_255", default)
        if self.kind != "pgd":
            if self.steps != 1:
                raise AttackError(f"{self.kind} is a single-step attack")
            if self.step_size_255 != default:
                raise AttackError(f"{self.kind} step size is fixed at {default}")
            if self.rand_init != (self.kind == "fgsm_ri"):
                raise AttackError(f"{self.kind} has rand_init={self.kind == 'fgsm_ri'}")
        if self.step_size_255 < 0:
            raise AttackError("step size must be non-negative")

    @classmethod
    def fgsm(cls, eps_255: float) -> "AttackSpec":
        return cls("fgsm", eps_255)

    @classmethod
    def fgsm_ri(cls, eps_255: float, seed: int = 0) -> "AttackSpec":
        return cls("fgsm_ri", eps_255, rand_init=True, seed=seed)

    @classmethod
    def pgd(cls, eps_255: float, steps: int = 7, step_size_255: float | None = None,
            rand_init: bool = False, seed: int = 0) -> "AttackSpec":
        return cls("pgd", eps_255, steps, step_size_255, rand_init, seed)

    @property
    def eps(self) -> float:
        return self.eps_255 / 255.0

    @property
    def gradient_evals(self) -> int:
        """Input-gradient evaluations per batch."""
        return self.steps

    def with_eps(self, eps_255: float) -> "AttackSpec":
        """Same attack at another budget; a PGD step size keeps its ratio to eps."""
        step = None
        if self.kind == "pgd" and self.eps_255 > 0:
            step = self.step_size_255 * eps_255 / self.eps_255
        return AttackSpec(self.kind, eps_255, self.steps, step, self.rand_init, self.seed)

    def label(self) -> str:
        return f"{self.kind}-{self.steps}" if self.kind == "pgd" else self.kind

    def to_json(self) -> dict:
        return asdict(self)


def _rng(seed: int, batch_index: int, stream: int = 0) -> np.random.Generator:
    key = [int(seed), int(batch_index)] + ([int(stream)] if stream else [])
    return np.random.default_rng(key)


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    xn = ad.leaf(x, requires_grad=True)
    loss = ad.cross_entropy(model.forward(xn), y)
    (g,) = ad.backward(loss, [xn], tag="input")
    return g


def clamp_domain(x: np.ndarray) -> np.ndarray:
    return np.clip(x, *DOMAIN)


def project_linf(x_adv: np.ndarray, x: np.ndarray, eps_255: float) -> np.ndarray:
    """Clip ``x_adv`` into the l-inf ball of radius eps/255 around ``x``, then into [0, 1]."""
    x_adv, x = np.asarray(x_adv), np.asarray(x)
    if x_adv.shape != x.shape:
        raise AttackError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    eps = eps_255 / 255.0
    return clamp_domain(np.clip(x_adv, x - eps, x + eps))


def delta(x_adv: np.ndarray, x: np.ndarray) -> np.ndarray:
    x_adv, x = np.asarray(x_adv), np.asarray(x)
    if x_adv.shape != x.shape:
        raise AttackError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    return x_adv - x


def uniform_init(shape, eps_255: float, seed: int, batch_index: int = 0, stream: int = 0) -> np.ndarray:
    """U(-eps, eps) noise keyed by (seed, batch_index[, stream])."""
    eps = eps_255 / 255.0
    return _rng(seed, batch_index, stream).uniform(-eps, eps, size=shape)


def fgsm(model, x, y, eps_255: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, y)
    return clamp_domain(x + (eps_255 / 255.0) * np.sign(g))


def fgsm_ri(model, x, y, eps_255: float, seed: int = 0, batch_index: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eps = eps_255 / 255.0
    d0 = uniform_init(x.shape, eps_255, seed, batch_index)
    g = input_gradient(model, x + d0, y)
    d = np.clip(d0 + RI_STEP * eps * np.sign(g), -eps, eps)
    return clamp_domain(x + d)


def pgd(model, x, y, spec: AttackSpec, batch_index: int = 0) -> np.ndarray:
    """``spec.steps`` signed-gradient ascent steps, each followed by projection."""
    if spec.kind != "pgd":
        raise AttackError(f"pgd() needs a pgd spec, got {spec.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    alpha = spec.step_size_255 / 255.0
    x_adv = x
    if spec.rand_init:
        x_adv = clamp_domain(x + uniform_init(x.shape, spec.eps_255, spec.seed, batch_index))
    for _ in range(spec.steps):
        g = input_gradient(model, x_adv, y)
        x_adv = project_linf(x_adv + alpha * np.sign(g), x, spec.eps_255)
    return project_linf(x_adv, x, spec.eps_255)


def generate(model, x, y, spec: AttackSpec, batch_index: int = 0) -> np.ndarray:
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.eps_255)
    if spec.kind == "fgsm_ri":
        return fgsm_ri(model, x, y, spec.eps_255, spec.seed, batch_index)
    return pgd(model, x, y, spec, batch_index)
