import numpy as np
import pytest
from conftest import central_difference, rel_err

from acnorm.checkpoint import checkpoint_from_model
from acnorm.data import SyntheticTaskSpec, generate_split, generate_task
from acnorm.errors import ConfigError, DataError, DivergenceError
from acnorm.model import ArchSpec, build_model
from acnorm.training import (
    MetricsRecord,
    TrainConfig,
    assemble_target,
    binary_auc,
    bce_with_logits,
    dice_score,
    evaluate,
    finetune,
    pretrain,
    soft_dice_loss,
    softmax_cross_entropy,
    train,
)


# data


def test_generate_task_is_deterministic():
    spec = SyntheticTaskSpec(image_size=(16, 16), n_train=8, n_val=2, n_test=4, seed=3)
    a, b = generate_task(spec), generate_task(spec)
    for split in a:
        assert np.array_equal(a[split].images, b[split].images)
        assert np.array_equal(a[split].labels, b[split].labels)
        assert a[split].provenance == b[split].provenance


def test_splits_are_distinct():
    d = generate_task(SyntheticTaskSpec(image_size=(16, 16), n_train=4, n_val=4, n_test=4, seed=3))
    assert not np.array_equal(d["train"].images, d["test"].images)
    assert d["test"].split == "test" and d["test"].provenance.endswith(":test")


def test_no_shift_keeps_marginal_statistics():
    a = generate_split(SyntheticTaskSpec(image_size=(32, 32), n_train=200, seed=1), "train").images
    b = generate_split(SyntheticTaskSpec(image_size=(32, 32), n_train=200, seed=2, intensity_shift=0.0), "train").images
    assert abs(a.mean() - b.mean()) < 0.02
    assert abs(a.std() - b.std()) < 0.02
    c = generate_split(SyntheticTaskSpec(image_size=(32, 32), n_train=200, seed=2, intensity_shift=0.5), "train").images
    assert c.mean() - a.mean() == pytest.approx(0.5, abs=0.02)


def test_masks_nonempty_at_default_knobs():
    labels = generate_split(SyntheticTaskSpec(n_train=1000, seed=0), "train").labels
    nonempty = np.mean(labels.reshape(1000, -1).any(axis=1))
    assert nonempty >= 0.99


def test_classification_labels():
    d = generate_split(SyntheticTaskSpec(task="classification", image_size=(16, 16), n_train=64,
                                         label_kind="family", seed=0), "train")
    assert set(np.unique(d.labels)) == {0, 1}
    d = generate_split(SyntheticTaskSpec(task="classification", image_size=(16, 16), n_train=64,
                                         max_shapes=3, num_classes=3, seed=0), "train")
    assert set(np.unique(d.labels)) <= {0, 1, 2}


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(n_train=0)
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(shape_family="stars")


# losses and metrics


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 4, 4, 1))
    y = (rng.uniform(size=z.shape) > 0.5).astype(np.float64)
    assert rel_err(bce_with_logits(z, y)[1], central_difference(lambda: bce_with_logits(z, y)[0], z)) < 1e-6
    assert rel_err(soft_dice_loss(z, y)[1], central_difference(lambda: soft_dice_loss(z, y)[0], z)) < 1e-6
    zc, lab = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    g = softmax_cross_entropy(zc, lab)[1]
    assert rel_err(g, central_difference(lambda: softmax_cross_entropy(zc, lab)[0], zc)) < 1e-6


def test_dice_examples():
    m = np.zeros((2, 8, 8, 1), bool)
    m[:, 2:5, 2:5] = True
    assert dice_score(m, m) == 1.0
    other = np.zeros_like(m)
    other[:, 6:, 6:] = True
    assert dice_score(other, m) == 0.0
    half = m.copy()
    half[:, 2:5, 2:3] = False  # 6 of 9 pixels
    assert dice_score(half, m) == pytest.approx(2 * 6 / 15)


def test_auc_examples():
    assert binary_auc([0.1, 0.9], [0, 1]) == 1.0
    assert binary_auc([0.9, 0.1], [0, 1]) == 0.0
    assert binary_auc([0.5, 0.5], [0, 1]) == 0.5
    rng = np.random.default_rng(1)
    s, lab = rng.normal(size=50), rng.integers(0, 2, 50)
    brute = np.mean([float(a > b) + 0.5 * (a == b) for a in s[lab == 1] for b in s[lab == 0]])
    assert binary_auc(s, lab) == pytest.approx(brute)


def test_evaluate_bounds_and_errors(tiny_arch, tiny_tasks):
    _, target = tiny_tasks
    model = build_model(tiny_arch)
    rec = evaluate(model, target["test"])
    for v in rec.summary().values():
        assert 0.0 <= v <= 1.0
    with pytest.raises(DataError):
        evaluate(build_model(ArchSpec(task="classification", widths=[4])), target["test"])


# loops


def test_train_refuses_test_split(tiny_arch, tiny_tasks):
    _, target = tiny_tasks
    with pytest.raises(DataError):
        train(build_model(tiny_arch), target["test"], TrainConfig(epochs=1, batch_size=4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(tiny_arch, tiny_tasks):
    _, target = tiny_tasks
    with pytest.raises(DivergenceError):
        train(build_model(tiny_arch), target["train"], TrainConfig(epochs=3, batch_size=4, learning_rate=1e12))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(norm_kind="instance_norm")


def test_pretrain_zero_epochs_is_random_init(tiny_arch, tiny_tasks):
    source, _ = tiny_tasks
    ckpt, rec = pretrain(source, tiny_arch, TrainConfig(epochs=0, seed=4))
    init = checkpoint_from_model(build_model(tiny_arch, 4), 4)
    assert all(np.array_equal(ckpt.tensors[k], v) for k, v in init.tensors.items())
    assert rec.loss_curve == []


def test_pretrain_is_deterministic_and_learns(tiny_arch, tiny_tasks):
    source, _ = tiny_tasks
    cfg = TrainConfig(epochs=4, batch_size=4, seed=1)
    a, ra = pretrain(source, tiny_arch, cfg)
    b, rb = pretrain(source, tiny_arch, cfg)
    assert a.equals(b) and ra.loss_curve == rb.loss_curve
    assert ra.loss_curve[-1] < ra.loss_curve[0]


def test_finetune_zero_epochs_is_zero_shot(tiny_arch, tiny_tasks):
    source, target = tiny_tasks
    ckpt, _ = pretrain(source, tiny_arch, TrainConfig(epochs=1, batch_size=4))
    cfg = TrainConfig(epochs=0, norm_kind="acnorm", seed=2)
    _, rec = finetune(ckpt, target, tiny_arch, cfg)
    zero_shot = evaluate(assemble_target(ckpt, tiny_arch, cfg), target["test"])
    assert rec.summary() == zero_shot.summary()


def test_finetune_attaches_fresh_head(tiny_arch, tiny_tasks):
    source, _ = tiny_tasks
    ckpt, _ = pretrain(source, tiny_arch, TrainConfig(epochs=1, batch_size=4))
    model = assemble_target(ckpt, tiny_arch, TrainConfig(seed=0))
    assert not np.array_equal(model.parameters()["head.conv.weight"], ckpt.tensors["head.conv.weight"])
    np.testing.assert_array_equal(model.parameters()["encoder.1.conv.weight"], ckpt.tensors["encoder.1.conv.weight"])


def test_probe_snapshots_recorded(tiny_arch, tiny_tasks):
    source, target = tiny_tasks
    ckpt, _ = pretrain(source, tiny_arch, TrainConfig(epochs=1, batch_size=4))
    _, rec = finetune(ckpt, target, tiny_arch,
                      TrainConfig(epochs=2, batch_size=4, norm_kind="acnorm", probe_epochs=[0, 2]))
    assert sorted(rec.calibration_snapshots) == [0, 2]
    assert set(rec.calibration_snapshots[2]) == {"encoder.0.norm", "encoder.1.norm", "decoder.0.norm"}
    assert isinstance(rec, MetricsRecord)


def test_balanced_sampler_equalises_classes():
    from acnorm.training import _epoch_order

    spec = SyntheticTaskSpec(task="classification", image_size=(16, 16), n_train=40, max_shapes=3,
                             num_classes=3, seed=0)
    d = generate_split(spec, "train")
    order = _epoch_order(d, TrainConfig(balanced=True), 0)
    counts = np.bincount(d.labels[order])
    assert len(set(counts.tolist())) == 1
