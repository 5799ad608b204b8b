import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acnorm.checkpoint import Checkpoint, checkpoint_from_model
from acnorm.core import AffineParams
from acnorm.errors import ProbeError
from acnorm.model import ArchSpec, build_model
from acnorm.probe import (
    layer_deltas,
    mean_of_layer_means,
    random_propagation_draws,
    verify_stat_propagation,
    write_deltas_csv,
)


@pytest.fixture
def ckpt():
    return checkpoint_from_model(build_model(ArchSpec(widths=[4, 8], head_hidden=8), 0))


def edited(ckpt, **changes):
    tensors = {k: v.copy() for k, v in ckpt.tensors.items()}
    for name, fn in changes.items():
        tensors[name.replace("__", ".")] = fn(tensors[name.replace("__", ".")])
    return Checkpoint(dict(ckpt.manifest), tensors)


def test_identical_checkpoints_give_zero(ckpt):
    deltas = layer_deltas(ckpt, ckpt)
    assert all(d.affine_delta == d.stats_delta == d.kernel_delta == 0.0 for d in deltas)


def test_beta_shift_example(ckpt):
    after = edited(ckpt, **{"encoder__1__norm__beta": lambda b: b + 1.0})
    deltas = {d.layer: d for d in layer_deltas(ckpt, after)}
    assert deltas["encoder.1.norm"].affine_delta == pytest.approx(0.99999, abs=1e-4)
    assert all(d.affine_delta == 0.0 for n, d in deltas.items() if n != "encoder.1.norm")
    assert all(d.kernel_delta == 0.0 for d in deltas.values())


def test_deltas_symmetric_and_kernel_mean(ckpt):
    rng = np.random.default_rng(0)
    after = edited(ckpt, encoder__0__conv__weight=lambda w: w + rng.normal(size=w.shape).astype(w.dtype),
                   encoder__0__norm__moving_mean=lambda m: m + 0.5)
    ab = layer_deltas(ckpt, after)
    ba = layer_deltas(after, ckpt)
    assert ab == ba
    d0 = next(d for d in ab if d.layer == "encoder.0.conv")
    w0, w1 = ckpt.tensors["encoder.0.conv.weight"], after.tensors["encoder.0.conv.weight"]
    expected = np.abs(w1.astype(np.float64) - w0).sum() / (w0.size + 4)  # bias unchanged
    assert d0.kernel_delta == pytest.approx(expected)
    assert next(d for d in ab if d.layer == "encoder.0.norm").stats_delta == pytest.approx(0.5, abs=1e-4)


def test_output_length_counts_layers(ckpt):
    model = build_model(ckpt.arch)
    deltas = layer_deltas(ckpt, ckpt)
    assert len([d for d in deltas if d.kind == "norm"]) == len(model.norm_layers())
    n_conv = sum(1 for layer in model.layers if layer.kind == "conv")
    assert len([d for d in deltas if d.kind == "conv"]) == n_conv
    assert all(d.layer.startswith("encoder") for d in layer_deltas(ckpt, ckpt, encoder_only=True))


def test_architecture_mismatch(ckpt):
    other = checkpoint_from_model(build_model(ArchSpec(widths=[4, 6], head_hidden=8)))
    with pytest.raises(ProbeError):
        layer_deltas(ckpt, other)


def test_mean_of_layer_means_and_csv(ckpt, tmp_path):
    after = edited(ckpt, **{"encoder__1__norm__beta": lambda b: b + 1.0})
    runs = [layer_deltas(ckpt, after), layer_deltas(ckpt, ckpt)]
    agg = mean_of_layer_means(runs)
    n_norm = sum(1 for d in runs[0] if d.kind == "norm")
    assert agg["affine"] == pytest.approx(0.99999 / n_norm / 2, abs=1e-5)
    assert agg["kernel"] == 0.0
    write_deltas_csv(runs[0], tmp_path / "d.csv")
    rows = list(csv.DictReader(open(tmp_path / "d.csv")))
    assert len(rows) == len(runs[0]) and set(rows[0]) == {"layer", "kind", "affine_delta", "stats_delta", "kernel_delta"}


# statistics propagation


def test_identity_pipeline_example():
    res = verify_stat_propagation(AffineParams([1.0], [0.0]), [1.0], 10**6)
    assert res.predicted_mean == 0.0 and res.predicted_var == 1.0
    se_mean, se_var = 1 / np.sqrt(10**6), np.sqrt(2 / 10**6)
    assert abs(res.empirical_mean) < 5 * se_mean
    assert abs(res.empirical_var - 1.0) < 5 * se_var


def test_two_channel_example():
    res = verify_stat_propagation(AffineParams([1.0, 1.0], [1.0, 2.0]), [1.0, 1.0], 10**5)
    assert (res.predicted_mean, res.predicted_var) == (3.0, 2.0)
    assert res.relative_errors()[0] < 0.01 and res.relative_errors()[1] < 0.02


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_prediction_is_homogeneous(c):
    aff = AffineParams([0.5, 1.5, 2.0], [0.3, -1.0, 0.7])
    w = np.array([1.0, -0.5, 0.25])
    base = verify_stat_propagation(aff, w, 8)
    scaled = verify_stat_propagation(aff, c * w, 8)
    assert scaled.predicted_mean == pytest.approx(c * base.predicted_mean)
    assert scaled.predicted_var == pytest.approx(c * c * base.predicted_var)


def test_relu_is_reported_not_asserted():
    res = verify_stat_propagation(AffineParams([1.0], [0.0]), [1.0], 10**4, activation="relu")
    assert res.empirical_mean > 0.3  # E[relu(N(0,1))] = 0.399; predicted with unit gains is 0
    with pytest.raises(ProbeError):
        verify_stat_propagation(AffineParams([1.0], [0.0]), [1.0], 10, activation="tanh")
    with pytest.raises(ProbeError):
        verify_stat_propagation(AffineParams([1.0], [0.0]), [1.0, 2.0], 10)


def test_random_draws_shape():
    rows = random_propagation_draws(draws=3, K=2, n_samples=1000)
    assert [r["draw"] for r in rows] == [0, 1, 2]
    assert {"rel_err_mean", "rel_err_var", "predicted_mean", "empirical_var"} <= set(rows[0])
    assert rows == random_propagation_draws(draws=3, K=2, n_samples=1000)
