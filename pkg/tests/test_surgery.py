import numpy as np
import pytest

from acnorm.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from acnorm.errors import ConfigError, PolicyWarning, SurgeryError
from acnorm.model import ArchSpec, build_model
from acnorm.surgery import (
    apply_freeze_policy,
    mask_channels,
    permute_channels_consistently,
    shuffle_channels,
    swap_norm_layers,
)
from acnorm.training import TrainConfig, train
from acnorm.variants import NormKind


def trained_checkpoint(arch, seed=0):
    """A checkpoint whose norm layers carry distinct, non-trivial affines and stats."""
    model = build_model(arch, seed)
    rng = np.random.default_rng(seed + 100)
    for layer in model.norm_layers():
        layer.load_source(rng.uniform(0.5, 1.5, layer.K), rng.normal(0, 0.5, layer.K),
                          rng.normal(0, 0.2, layer.K), rng.uniform(0.5, 2.0, layer.K))
    return checkpoint_from_model(model, seed)


@pytest.fixture
def arch():
    return ArchSpec(widths=[4, 8, 8], head_hidden=8)


@pytest.fixture
def x():
    return np.random.default_rng(9).normal(size=(3, 16, 16, 1)).astype(np.float32)


def test_vanilla_swap_preserves_function(arch, x):
    ckpt = trained_checkpoint(arch)
    source = model_from_checkpoint(ckpt)
    fresh = build_model(arch, 5)
    for name, arr in source.parameters().items():  # keep the head so outputs are comparable
        if source.is_head(name):
            fresh.set_tensor(name, arr)
    swapped = swap_norm_layers(fresh, ckpt, NormKind.VANILLA_BN)
    assert np.max(np.abs(swapped.forward(x) - source.forward(x))) < 1e-6


def test_acnorm_swap_closed_form_per_layer(arch):
    ckpt = trained_checkpoint(arch)
    model = swap_norm_layers(build_model(arch), ckpt, NormKind.ACNORM)
    for layer in model.norm_layers():
        C = layer.current_calibration()
        assert np.count_nonzero(C - np.diag(np.diag(C))) == 0
        feats = np.random.default_rng(0).normal(size=(4, layer.K)).astype(np.float32)
        y = layer.forward(feats, training=False)
        st = layer.state
        bn = (feats - st.stats.moving_mean) / np.sqrt(st.stats.moving_var + st.config.eps) * st.target.gamma + st.target.beta
        np.testing.assert_allclose(y, (1 + np.diag(C)) * bn, atol=1e-5)


def test_swap_twice_is_structurally_idempotent(arch):
    ckpt = trained_checkpoint(arch)
    once = swap_norm_layers(build_model(arch), ckpt, NormKind.ACNORM)
    twice = swap_norm_layers(once, ckpt, NormKind.ACNORM)
    assert once.describe() == twice.describe()
    assert sorted(once.parameters()) == sorted(twice.parameters())


def test_swap_loads_sc_norm_source_stats(arch):
    ckpt = trained_checkpoint(arch)
    model = swap_norm_layers(build_model(arch), ckpt, NormKind.SC_NORM)
    layer = model.layer("encoder.1.norm")
    np.testing.assert_array_equal(layer.tensors()["source_mean"], ckpt.tensors["encoder.1.norm.moving_mean"])


def test_swap_shape_mismatch_lists_layers(arch):
    ckpt = trained_checkpoint(ArchSpec(widths=[4, 6, 8], head_hidden=8))
    with pytest.raises(SurgeryError, match="encoder.1"):
        swap_norm_layers(build_model(arch), ckpt, NormKind.ACNORM)


def test_identity_permutation_leaves_checkpoint_unchanged(arch):
    ckpt = trained_checkpoint(arch)
    out = shuffle_channels(ckpt, 0, permutation=lambda K, rng: np.arange(K))
    assert all(np.array_equal(out.tensors[k], v) for k, v in ckpt.tensors.items())


def test_single_channel_layers_unchanged():
    arch = ArchSpec(widths=[1, 1], head_hidden=4)
    ckpt = trained_checkpoint(arch)
    out = shuffle_channels(ckpt, 3)
    assert all(np.array_equal(out.tensors[k], v) for k, v in ckpt.tensors.items())


def test_consistent_permutation_is_noop_and_shuffle_is_not(arch, x):
    ckpt = trained_checkpoint(arch)
    base = model_from_checkpoint(ckpt).forward(x)
    same = model_from_checkpoint(permute_channels_consistently(ckpt, 1)).forward(x)
    broken = model_from_checkpoint(shuffle_channels(ckpt, 1)).forward(x)
    assert np.max(np.abs(same - base)) < 1e-5
    assert np.max(np.abs(broken - base)) > 1e-2


def test_shuffle_moves_norm_params_with_their_channel(arch):
    ckpt = trained_checkpoint(arch)
    out = shuffle_channels(ckpt, 2)
    w0, w1 = ckpt.tensors["encoder.0.conv.weight"], out.tensors["encoder.0.conv.weight"]
    perm = [int(np.flatnonzero([np.array_equal(w1[i], w0[j]) for j in range(len(w0))])[0]) for i in range(len(w1))]
    for key in ("gamma", "beta", "moving_mean", "moving_var"):
        np.testing.assert_array_equal(out.tensors[f"encoder.0.norm.{key}"],
                                      ckpt.tensors[f"encoder.0.norm.{key}"][perm])
    np.testing.assert_array_equal(out.tensors["encoder.0.conv.bias"], ckpt.tensors["encoder.0.conv.bias"][perm])
    # the consumer's rows are permuted as whole slices; its input axis is left alone
    c0, c1 = ckpt.tensors["encoder.1.conv.weight"], out.tensors["encoder.1.conv.weight"]
    assert all(any(np.array_equal(row, orig) for orig in c0) for row in c1)


def test_mask_examples(arch):
    ckpt = trained_checkpoint(arch)
    same = mask_channels(ckpt, 0.0, 1)
    assert all(np.array_equal(same.tensors[k], v) for k, v in ckpt.tensors.items())
    full = mask_channels(ckpt, 1.0, 1)
    for name in ("encoder.0.conv.weight", "encoder.2.conv.weight", "decoder.0.conv.weight"):
        w0, w1 = ckpt.tensors[name], full.tensors[name]
        assert all(not np.array_equal(w0[i], w1[i]) for i in range(len(w0)))
    half = mask_channels(ckpt, 0.5, 1)
    for name in ("encoder.1.conv.weight", "encoder.2.conv.weight"):  # K = 8
        w0, w1 = ckpt.tensors[name], half.tensors[name]
        assert sum(not np.array_equal(w0[i], w1[i]) for i in range(8)) == 4
    masked = [i for i in range(8) if not np.array_equal(ckpt.tensors["encoder.1.conv.weight"][i],
                                                        half.tensors["encoder.1.conv.weight"][i])]
    assert np.all(half.tensors["encoder.1.norm.gamma"][masked] == 1.0)
    assert np.all(half.tensors["encoder.1.norm.beta"][masked] == 0.0)
    with pytest.raises(ConfigError):
        mask_channels(ckpt, 1.5, 0)


def test_freeze_policies(arch, tiny_tasks):
    model = build_model(arch)
    apply_freeze_policy(model, "full_ft")
    assert model.trainable == set(model.default_trainable())
    apply_freeze_policy(model, "norm_only")
    assert all(".norm." in n or n.startswith("head.") for n in model.trainable)
    assert any(n.endswith("norm.gamma") for n in model.trainable)
    apply_freeze_policy(model, ["encoder.*"])
    assert not any(n.startswith("encoder.") for n in model.trainable)
    assert "decoder.0.conv.weight" in model.trainable
    with pytest.warns(PolicyWarning):
        apply_freeze_policy(model, ["nothing.*"])
    with pytest.raises(ConfigError):
        apply_freeze_policy(model, "most")


@pytest.mark.parametrize("kind", ["vanilla_bn", "acnorm"])
def test_norm_only_keeps_convs_bitwise(kind, tiny_tasks):
    _, target = tiny_tasks
    arch = ArchSpec(widths=[4, 8], head_hidden=8)
    model = swap_norm_layers(build_model(arch), trained_checkpoint(arch), kind)
    apply_freeze_policy(model, "norm_only")
    before = {n: a.copy() for n, a in model.parameters().items()}
    train(model, target["train"], TrainConfig(epochs=2, batch_size=4, seed=0))  # 8 steps
    after = model.parameters()
    for name in before:
        if ".conv." in name and not name.startswith("head."):
            assert np.array_equal(before[name], after[name]), name
    assert not np.array_equal(before["encoder.0.norm.gamma"], after["encoder.0.norm.gamma"])


# checkpoints


def test_checkpoint_round_trip_bitwise(arch, tmp_path):
    ckpt = trained_checkpoint(arch)
    p1 = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    assert loaded.equals(ckpt)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_float64_and_version(tmp_path):
    model = build_model(ArchSpec(widths=[2], dtype="float64"))
    ckpt = checkpoint_from_model(model)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt"))
    assert loaded.tensors["encoder.0.conv.weight"].dtype == np.dtype("<f8")
    bad = Checkpoint({**ckpt.manifest, "format_version": "99"}, ckpt.tensors)
    save_checkpoint(bad, tmp_path / "bad.ckpt")
    with pytest.raises(SurgeryError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_manifest_fields(arch):
    m = trained_checkpoint(arch).manifest
    assert m["arch_hash"] == arch.hash() and m["seed"] == "0" and m["format_version"] == "1"
