"""Run configuration: a flat ``section.key = value`` text format mapped onto
frozen dataclasses, plus the rule that splits one global seed per stage.

Example::

    seed = 3
    data.source = digits
    model.architecture = cnn
    model.conv_channels = 16, 32
    model.kernel_sizes = 3, 3
    finetune.peft = linear_probe
    finetune.attack = fgsm
    finetune.eps = 8
    sweep.eps = 2, 4, 8, 16

Lines starting with ``#`` are comments. Lists are comma separated, ``none``
clears an optional value, booleans are ``true``/``false``.
"""

import dataclasses
import types
import typing
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import AttackSpec
from .data_io import SynthSpec
from .models import ModelSpec, PeftMode
from .trainer import TrainPlan

# attack names accepted in configs; fgsm_gradalign is FGSM plus the GradAlign penalty
ATTACKS = ("fgsm", "fgsm_ri", "pgd", "fgsm_gradalign")


class ConfigError(ValueError):
    pass


def stage_seed(global_seed: int, stage: str) -> int:
    """Seed for one stage: the first word of SeedSequence([global_seed, crc32(stage)]).

    Stages used by the CLI: ``split``, ``source-split``, ``model``, ``adapters``,
    ``head``, ``pretrain``, ``finetune``, ``time``.
    """
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class DataConfig:
    source: str = "digits"  # digits | idx | synth
    images: Optional[str] = None
    labels: Optional[str] = None
    num_classes: Optional[int] = None
    source_classes: tuple[int, ...] = (0, 1, 2, 3, 4)
    target_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    test_fraction: float = 0.25
    source_test_fraction: float = 0.25

    def validate(self):
        if self.source not in ("digits", "idx", "synth"):
            raise ConfigError(f"data.source must be digits, idx or synth, got {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("data.source=idx needs data.images and data.labels")


@dataclass(frozen=True)
class ModelConfig:
    """ModelSpec minus the fields taken from the data (input shape, class count)."""

    architecture: str = "cnn"
    hidden: tuple[int, ...] = (64,)
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_sizes: tuple[int, ...] = (3, 3)
    activation: str = "relu"
    adapters_enabled: bool = False
    adapter_reduction: int = 8

    def spec(self, input_shape, num_classes: int) -> ModelSpec:
        conv = self.conv_channels if self.architecture == "cnn" else ()
        ks = self.kernel_sizes if self.architecture == "cnn" else ()
        return ModelSpec(self.architecture, tuple(input_shape), self.hidden, conv, ks,
                         self.activation, num_classes, self.adapters_enabled, self.adapter_reduction)


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    peft: str = "full"
    attack: str = "fgsm"
    eps: float = 8.0
    steps: int = 7  # pgd only
    step_size: Optional[float] = None  # pgd only; None means eps/4
    rand_init: bool = False  # pgd only
    gradalign_lambda: float = 0.2  # used by fgsm_gradalign
    eval_steps: int = 10
    milestones: tuple[float, ...] = (0.25, 0.75)
    lr_drop: float = 0.1

    def attack_spec(self, attack: str | None = None, eps: float | None = None, seed: int = 0) -> AttackSpec:
        attack = attack or self.attack
        eps = self.eps if eps is None else eps
        if attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {attack!r}")
        if attack in ("fgsm", "fgsm_gradalign"):
            return AttackSpec.fgsm(eps)
        if attack == "fgsm_ri":
            return AttackSpec.fgsm_ri(eps, seed)
        return AttackSpec.pgd(eps, self.steps, self.step_size, self.rand_init, seed)

    def plan(self, seed: int, eval_subset: int | None = None, attack: str | None = None,
             eps: float | None = None, peft: str | None = None) -> TrainPlan:
        attack = attack or self.attack
        eps = self.eps if eps is None else eps
        if len(self.milestones) != 2:
            raise ConfigError("milestones takes exactly two fractions")
        return TrainPlan(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            peft=PeftMode(peft or self.peft),
            attack=self.attack_spec(attack, eps, seed),
            gradalign_lambda=self.gradalign_lambda if attack == "fgsm_gradalign" else 0.0,
            eval_attack=AttackSpec.pgd(eps, steps=self.eval_steps),
            seed=seed,
            eval_subset=eval_subset,
            milestones=tuple(self.milestones),
            lr_drop=self.lr_drop,
        )


@dataclass(frozen=True)
class PretrainConfig(StageConfig):
    attack: str = "pgd"


@dataclass(frozen=True)
class FinetuneConfig(StageConfig):
    checkpoint: Optional[str] = None
    reinit_head: bool = False
    head_init: str = "zero"  # zero | seeded
    roli: bool = False
    roli_peft: str = "full"
    roli_lr: Optional[float] = None  # None: 0.005 for full fine-tuning, else finetune.lr
    roli_epochs: Optional[int] = None


@dataclass(frozen=True)
class SweepConfig:
    eps: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 24.0, 32.0)
    attacks: tuple[str, ...] = ("fgsm", "pgd")
    pefts: tuple[str, ...] = ("linear_probe",)
    drop_fraction: float = 0.5
    window: int = 3


@dataclass(frozen=True)
class DiagnoseConfig:
    sweep_dir: Optional[str] = None
    attack: str = "fgsm"  # which sweep runs supply the checkpoints
    peft: str = "linear_probe"
    compare: tuple[str, ...] = ("fgsm", "pgd")
    pgd_steps: int = 7


@dataclass(frozen=True)
class TimeConfig:
    attacks: tuple[str, ...] = ("fgsm", "pgd")
    pefts: tuple[str, ...] = ("full", "linear_probe")
    repeats: int = 3


@dataclass(frozen=True)
class ReportConfig:
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    eval_subset: Optional[int] = None
    jobs: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def validate(self) -> "RunConfig":
        self.data.validate()
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.eval_subset is not None and self.eval_subset < 1:
            raise ConfigError("eval_subset must be >= 1")
        for name in ("pretrain", "finetune"):
            stage = getattr(self, name)
            if stage.attack not in ATTACKS:
                raise ConfigError(f"{name}.attack must be one of {ATTACKS}, got {stage.attack!r}")
            _peft(stage.peft, f"{name}.peft")
        _peft(self.finetune.roli_peft, "finetune.roli_peft")
        for a in self.sweep.attacks + self.time.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack {a!r}; expected one of {ATTACKS}")
        for p in self.sweep.pefts + self.time.pefts:
            _peft(p, "peft list")
        if not self.sweep.eps:
            raise ConfigError("sweep.eps is empty")
        if self.time.repeats < 3:
            raise ConfigError("time.repeats must be >= 3")
        if len(self.diagnose.compare) != 2:
            raise ConfigError("diagnose.compare takes exactly two attacks")
        return self


def _peft(value: str, where: str) -> PeftMode:
    try:
        return PeftMode(value)
    except ValueError:
        raise ConfigError(f"{where} must be one of {[m.value for m in PeftMode]}, got {value!r}") from None


# ------------------------------------------------------------------ text format

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _parse_scalar(text: str, kind, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def _parse_value(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):  # Optional[X]
        if text.lower() == "none":
            return None
        (hint,) = [a for a in args if a is not type(None)]
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        if not text:
            return ()
        return tuple(_parse_scalar(part.strip(), args[0], key) for part in text.split(","))
    return _parse_scalar(text, hint, key)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _sections() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig) if dataclasses.is_dataclass(hints[f.name])}


def from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply flat ``key -> text`` assignments to ``base`` (default: all defaults)."""
    config = base or RunConfig()
    top = typing.get_type_hints(RunConfig)
    sections = _sections()
    updates: dict[str, dict] = {}
    flat = {}
    for key, text in pairs.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            hints = typing.get_type_hints(sections[section])
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            updates.setdefault(section, {})[name] = _parse_value(text, hints[name], key)
        else:
            if key not in top or key in sections:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _parse_value(text, top[key], key)
    for section, changes in updates.items():
        try:
            flat[section] = replace(getattr(config, section), **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return replace(config, **flat)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return from_pairs(pairs, base)


def to_pairs(config: RunConfig) -> dict[str, str]:
    """Every field of ``config`` as flat text, defaults included."""
    out = {}
    sections = _sections()
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in sections:
            for g in fields(value):
                out[f"{f.name}.{g.name}"] = _format_value(getattr(value, g.name))
        else:
            out[f.name] = _format_value(value)
    return out


def to_text(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_pairs(config).items())


def load(path) -> RunConfig:
    """Read a config file, or the resolved config stored in a run manifest."""
    import json

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if path.suffix == ".json":
        try:
            pairs = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path} is not a run manifest") from None
        return from_pairs(pairs)
    return parse_text(text)
