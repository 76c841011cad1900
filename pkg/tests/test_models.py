import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustft import autodiff as ad
from robustft.models import (
    ModelError,
    ModelSpec,
    PeftMode,
    build_model,
    insert_adapters,
    load_checkpoint,
    reinit_head,
    save_checkpoint,
    trainable_set,
)

MNIST_MLP = ModelSpec("mlp", (1, 28, 28), hidden=(256,), num_classes=10)
CNN = ModelSpec("cnn", (1, 8, 8), hidden=(16,), conv_channels=(4, 8), kernel_sizes=(3, 3), num_classes=5)


def test_build_is_deterministic():
    a, b = build_model(CNN, 3), build_model(CNN, 3)
    assert a.equal(b)
    assert not a.equal(build_model(CNN, 4))


def test_mlp_parameter_count():
    assert build_model(MNIST_MLP, 0).num_params() == 784 * 256 + 256 + 256 * 10 + 10 == 203_530


def test_zero_image_with_zero_head_is_uniform():
    for act in ("relu", "softplus"):
        spec = ModelSpec("mlp", (1, 4, 4), hidden=(8,), activation=act, num_classes=7)
        model = reinit_head(build_model(spec, 0), 7, init="zero")
        logits = model.forward(ad.leaf(np.zeros((2, 1, 4, 4))))
        assert float(ad.cross_entropy(logits, [0, 6]).value) == pytest.approx(np.log(7), abs=1e-12)


def test_roles_match_ranks():
    model = insert_adapters(build_model(CNN, 0), 8)
    for name, role in model.roles.items():
        if role in ("weight", "head_weight"):
            assert model.params[name].ndim >= 2
        if role in ("bias", "head_bias"):
            assert model.params[name].ndim == 1


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(architecture="rnn"),
        dict(hidden=()),
        dict(activation="tanh"),
        dict(num_classes=1),
        dict(hidden=(12,), adapters_enabled=True, adapter_reduction=8),
        dict(architecture="cnn", conv_channels=(4,), kernel_sizes=(9,)),
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ModelError):
        ModelSpec(**kwargs)


def test_adapters_are_identity_at_insertion():
    rng = np.random.default_rng(0)
    for spec in (ModelSpec(hidden=(64, 32)), CNN):
        model = build_model(spec, 1)
        x = rng.random((5,) + spec.input_shape)
        adapted = insert_adapters(model, 8)
        assert np.array_equal(model.logits(x), adapted.logits(x))
        for name in model.params:
            assert np.array_equal(model.params[name], adapted.params[name])


def test_adapter_dimensions_and_count():
    model = build_model(ModelSpec(hidden=(256,), num_classes=10), 0)
    adapted = insert_adapters(model, 8)
    assert adapted.params["adapter0.down_weight"].shape == (256, 32)
    extra = adapted.num_params() - model.num_params()
    assert extra == 256 * 32 + 32 + 32 * 256 + 256 == 16_672
    assert list(adapted.params)[-2:] == ["head.weight", "head.bias"]
    with pytest.raises(ModelError):
        insert_adapters(adapted, 8)
    with pytest.raises(ModelError):
        insert_adapters(build_model(ModelSpec(hidden=(12,)), 0), 8)


def test_build_with_adapters_enabled():
    spec = ModelSpec(hidden=(16,), adapters_enabled=True, adapter_reduction=8)
    model = build_model(spec, 0)
    assert model.has_adapters and model.spec.adapters_enabled


def test_trainable_sets():
    model = build_model(MNIST_MLP, 0)
    lp = trainable_set(model, PeftMode.LINEAR_PROBE)
    assert lp == {"head.weight", "head.bias"}
    assert model.num_params(lp) == 2_570
    assert trainable_set(model, "bitfit") == {"layer0.bias", "head.weight", "head.bias"}
    assert trainable_set(model, "full") == set(model.params)
    with pytest.raises(ModelError):
        trainable_set(model, "adapter")
    adapted = insert_adapters(model, 8)
    ad_set = trainable_set(adapted, "adapter")
    assert ad_set == lp | {n for n in adapted.params if n.startswith("adapter0.")}


@settings(max_examples=20, deadline=None)
@given(
    hidden=st.lists(st.sampled_from([8, 16, 24, 32]), min_size=1, max_size=3),
    k=st.integers(2, 12),
    cnn=st.booleans(),
)
def test_parameter_count_monotonicity(hidden, k, cnn):
    if cnn:
        spec = ModelSpec("cnn", (1, 6, 6), hidden=tuple(hidden), conv_channels=(3,), kernel_sizes=(3,), num_classes=k)
    else:
        spec = ModelSpec("mlp", (1, 4, 4), hidden=tuple(hidden), num_classes=k)
    model = insert_adapters(build_model(spec, 0), 8)
    n = {m: model.num_params(trainable_set(model, m)) for m in PeftMode}
    assert n[PeftMode.LINEAR_PROBE] <= n[PeftMode.BITFIT] <= n[PeftMode.FULL]
    assert n[PeftMode.LINEAR_PROBE] <= n[PeftMode.ADAPTER] <= n[PeftMode.FULL]


def test_reinit_head():
    model = build_model(ModelSpec(hidden=(16,), num_classes=10), 0)
    new = reinit_head(model, 5)
    assert new.params["head.weight"].shape == (16, 5)
    assert new.spec.num_classes == 5
    for name in model.params:
        if not name.startswith("head."):
            assert np.array_equal(model.params[name], new.params[name])
    x = np.random.default_rng(0).random((3, 1, 8, 8))
    assert np.allclose(new.logits(x), 0.0)
    seeded = reinit_head(model, 5, init="seeded", seed=2)
    assert np.array_equal(seeded.params["head.weight"], reinit_head(model, 5, "seeded", 2).params["head.weight"])
    with pytest.raises(ModelError):
        reinit_head(model, 1)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = insert_adapters(build_model(CNN, 9), 8)
    model.params["head.bias"] = np.array([0.1, -0.2, 1e-300, np.pi, -0.0])
    save_checkpoint(model, tmp_path / "m.npz")
    again = load_checkpoint(tmp_path / "m.npz")
    assert again.equal(model)
    assert again.roles == model.roles
    assert all(again.params[k].tobytes() == model.params[k].tobytes() for k in model.params)


def test_cnn_forward_shapes():
    model = build_model(CNN, 0)
    assert model.logits(np.zeros((3, 1, 8, 8))).shape == (3, 5)
    assert model.params["layer0.weight"].shape == (8 * 4 * 4, 16)
