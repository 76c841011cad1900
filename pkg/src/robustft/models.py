"""Small MLP/CNN classifiers with role-tagged parameters for PEFT masking."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "robustft-checkpoint/1"

ROLES = ("weight", "bias", "adapter_down", "adapter_up", "head_weight", "head_bias")


class ModelError(ValueError):
    pass


class PeftMode(str, enum.Enum):
    FULL = "full"
    LINEAR_PROBE = "linear_probe"
    BITFIT = "bitfit"
    ADAPTER = "adapter"


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp"  # mlp | cnn
    input_shape: tuple[int, int, int] = (1, 8, 8)
    hidden: tuple[int, ...] = (64, 64)  # dense hidden widths
    conv_channels: tuple[int, ...] = ()  # cnn only
    kernel_sizes: tuple[int, ...] = ()  # cnn only, one per conv layer
    activation: str = "relu"
    num_classes: int = 10
    adapters_enabled: bool = False
    adapter_reduction: int = 8

    def __post_init__(self):
        for name in ("input_shape", "hidden", "conv_channels", "kernel_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.architecture not in ("mlp", "cnn"):
            raise ModelError(f"architecture must be mlp or cnn, got {self.architecture!r}")
        if self.activation not in ("relu", "softplus"):
            raise ModelError(f"activation must be relu or softplus, got {self.activation!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelError("input_shape must be (C, H, W)")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if any(w < 1 for w in self.hidden + self.conv_channels):
            raise ModelError("layer widths must be positive")
        if self.architecture == "mlp":
            if self.conv_channels or self.kernel_sizes:
                raise ModelError("mlp takes no conv layers")
            if not self.hidden:
                raise ModelError("need at least one hidden layer")
        else:
            if not self.conv_channels or len(self.conv_channels) != len(self.kernel_sizes):
                raise ModelError("cnn needs one kernel size per conv layer")
            _, h, w = self.input_shape
            for k in self.kernel_sizes:
                h, w = h - k + 1, w - k + 1
                if h < 1 or w < 1:
                    raise ModelError("kernels shrink the feature map below 1x1")
        if self.adapter_reduction < 1:
            raise ModelError("adapter_reduction must be positive")
        if self.adapters_enabled:
            if not self.hidden:
                raise ModelError("adapters need dense hidden layers")
            for width in self.hidden:
                if width % self.adapter_reduction:
                    raise ModelError(
                        f"adapter_reduction {self.adapter_reduction} does not divide hidden width {width}"
                    )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _he(rng, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass(eq=False)
class Model:
    """A classifier: spec plus an ordered name -> array parameter store."""

    spec: ModelSpec
    params: dict[str, np.ndarray]
    roles: dict[str, str] = field(default_factory=dict)

    # ------------------------------------------------------------ forward

    def forward(self, x, params: Mapping[str, ad.Node] | None = None) -> ad.Node:
        """Logits for a batch ``x`` of shape [N, C, H, W].

        ``params`` maps names to graph nodes (e.g. trainable leaves); anything
        missing is used as a constant.
        """
        params = params or {}

        def p(name):
            node = params.get(name)
            return node if node is not None else ad.constant(self.params[name])

        spec = self.spec
        h = x if isinstance(x, ad.Node) else ad.constant(x)
        if spec.architecture == "cnn":
            for i in range(len(spec.conv_channels)):
                h = ad.bias_add(ad.conv2d(h, p(f"conv{i}.weight")), p(f"conv{i}.bias"))
                h = ad.activation(h, spec.activation)
        h = ad.reshape(h, (h.shape[0], -1))
        for i in range(len(spec.hidden)):
            h = ad.bias_add(ad.matmul(h, p(f"layer{i}.weight")), p(f"layer{i}.bias"))
            h = ad.activation(h, spec.activation)
            if f"adapter{i}.down_weight" in self.params:
                z = ad.bias_add(ad.matmul(h, p(f"adapter{i}.down_weight")), p(f"adapter{i}.down_bias"))
                z = ad.activation(z, spec.activation)
                z = ad.bias_add(ad.matmul(z, p(f"adapter{i}.up_weight")), p(f"adapter{i}.up_bias"))
                h = ad.add(h, z)
        return ad.bias_add(ad.matmul(h, p("head.weight")), p("head.bias"))

    def logits(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x).value

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    # ------------------------------------------------------------ bookkeeping

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.roles))

    def num_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].size for n in names))

    @property
    def has_adapters(self) -> bool:
        return any(r in ("adapter_down", "adapter_up") for r in self.roles.values())

    @property
    def feature_width(self) -> int:
        return self.params["head.weight"].shape[0]

    def equal(self, other: "Model") -> bool:
        """Bitwise equality of spec and every parameter."""
        return (
            self.spec == other.spec
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def _conv_out(spec: ModelSpec) -> int:
    c, h, w = spec.input_shape
    if spec.architecture == "mlp":
        return c * h * w
    for k in spec.kernel_sizes:
        h, w = h - k + 1, w - k + 1
    return spec.conv_channels[-1] * h * w


def _adapter_params(rng, width: int, reduction: int, i: int):
    r = width // reduction
    return [
        (f"adapter{i}.down_weight", "adapter_down", _he(rng, width, (width, r))),
        (f"adapter{i}.down_bias", "adapter_down", np.zeros(r)),
        (f"adapter{i}.up_weight", "adapter_up", np.zeros((r, width))),
        (f"adapter{i}.up_bias", "adapter_up", np.zeros(width)),
    ]


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """He fan-in initialization for weights, zero biases; deterministic in ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    entries = []
    if spec.architecture == "cnn":
        c = spec.input_shape[0]
        for i, (f, k) in enumerate(zip(spec.conv_channels, spec.kernel_sizes)):
            entries.append((f"conv{i}.weight", "weight", _he(rng, c * k * k, (f, c, k, k))))
            entries.append((f"conv{i}.bias", "bias", np.zeros(f)))
            c = f
    width = _conv_out(spec)
    for i, out in enumerate(spec.hidden):
        entries.append((f"layer{i}.weight", "weight", _he(rng, width, (width, out))))
        entries.append((f"layer{i}.bias", "bias", np.zeros(out)))
        width = out
    entries.append(("head.weight", "head_weight", _he(rng, width, (width, spec.num_classes))))
    entries.append(("head.bias", "head_bias", np.zeros(spec.num_classes)))
    model = Model(spec, {n: v for n, _, v in entries}, {n: r for n, r, _ in entries})
    if spec.adapters_enabled:
        model = insert_adapters(replace_spec(model, adapters_enabled=False), spec.adapter_reduction, seed=seed + 1)
    return model


def replace_spec(model: Model, **changes) -> Model:
    return Model(replace(model.spec, **changes), model.params, model.roles)


def insert_adapters(model: Model, reduction: int = 8, seed: int = 0) -> Model:
    """Add a residual bottleneck ``h + U act(D h)`` after every dense hidden activation.

    The up-projection starts at zero, so the returned model computes exactly
    the same logits as ``model``.
    """
    if model.has_adapters:
        raise ModelError("model already has adapters")
    spec = replace(model.spec, adapters_enabled=True, adapter_reduction=reduction)  # validates widths
    rng = np.random.default_rng(seed)
    params, roles = {}, {}
    for name, value in model.params.items():
        params[name] = value.copy()
        roles[name] = model.roles[name]
        if name.startswith("layer") and name.endswith(".bias"):
            i = int(name[len("layer"):-len(".bias")])
            for n, r, v in _adapter_params(rng, value.size, reduction, i):
                params[n], roles[n] = v, r
    # keep the head last
    for n in ("head.weight", "head.bias"):
        params[n] = params.pop(n)
        roles[n] = roles.pop(n)
    return Model(spec, params, roles)


def trainable_set(model: Model, mode: PeftMode | str) -> set[str]:
    mode = PeftMode(mode)
    head = {n for n, r in model.roles.items() if r in ("head_weight", "head_bias")}
    if mode is PeftMode.FULL:
        return set(model.params)
    if mode is PeftMode.LINEAR_PROBE:
        return head
    if mode is PeftMode.BITFIT:
        return head | {n for n, r in model.roles.items() if r == "bias"}
    if not model.has_adapters:
        raise ModelError("peft mode 'adapter' requires a model with adapters")
    return head | {n for n, r in model.roles.items() if r in ("adapter_down", "adapter_up")}


def reinit_head(model: Model, num_classes: int, init: str = "zero", seed: int = 0) -> Model:
    """Replace the classification head; every other parameter is copied unchanged."""
    if num_classes < 2:
        raise ModelError("num_classes must be >= 2")
    width = model.feature_width
    if init == "zero":
        w = np.zeros((width, num_classes))
    elif init == "seeded":
        w = np.random.default_rng(seed).standard_normal((width, num_classes)) * np.sqrt(1.0 / width)
    else:
        raise ModelError(f"unknown head init {init!r}")
    out = model.copy()
    out.spec = replace(model.spec, num_classes=num_classes)
    out.params["head.weight"] = w
    out.params["head.bias"] = np.zeros(num_classes)
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Write an ``.npz`` holding little-endian float64 arrays plus JSON metadata."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_json(),
        "order": list(model.params),
        "roles": model.roles,
    }
    arrays = {f"p/{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> Model:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = {k: z[f"p/{k}"].astype(np.float64) for k in meta["order"]}
    return Model(ModelSpec.from_json(meta["spec"]), params, meta["roles"])
