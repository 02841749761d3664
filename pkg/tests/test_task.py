"""Procedural segmentation data, the linear probe, and the mIoU/pAcc metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetvit.errors import ConfigError, DataError, DimensionError
from jetvit.rng import Rng
from jetvit.task import (
    LabeledSample,
    ProbeConfig,
    TaskSpec,
    generate_sample,
    linear_probe_train,
    majority_patch_labels,
    make_stream,
    probe_predict,
    sample_at,
    seg_metrics,
    stack_images,
    stack_labels,
)

SPEC = TaskSpec(image_hw=(32, 32), patch=8, noise_std=0.05, shapes_range=(1, 3), min_side=4)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(image_hw=(30, 32), patch=8)
    with pytest.raises(ConfigError):
        TaskSpec(noise_std=-0.1)
    with pytest.raises(ConfigError):
        TaskSpec(shapes_range=(3, 1))
    with pytest.raises(ConfigError):
        TaskSpec(n_classes=3)  # default palette has 5 colors


def test_sample_shapes_and_ranges():
    s = sample_at(0, 0, SPEC)
    assert s.image.shape == (32, 32, 3) and s.image.dtype == np.float32
    assert s.patch_labels.shape == (4, 4)
    assert s.pixel_classes.shape == (32, 32)
    assert s.image.data.min() >= 0.0 and s.image.data.max() <= 1.0
    assert 0 <= s.patch_labels.min() and s.patch_labels.max() < SPEC.n_classes


def test_sample_at_is_random_access():
    a = sample_at(3, 17, SPEC)
    b = sample_at(3, 17, SPEC)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.patch_labels, b.patch_labels)
    c = sample_at(3, 18, SPEC)
    assert not np.array_equal(a.image.data, c.image.data)


def test_stream_matches_sample_at():
    stream = make_stream(5, 3, SPEC)
    batch = stream(2)
    assert len(batch) == 3
    for j, s in enumerate(batch):
        want = sample_at(5, 6 + j, SPEC)
        np.testing.assert_array_equal(s.image.data, want.image.data)


def test_labels_match_clean_composite():
    s = sample_at(1, 4, SPEC)
    np.testing.assert_array_equal(
        s.patch_labels, majority_patch_labels(s.pixel_classes, SPEC.patch, SPEC.n_classes)
    )


def test_majority_vote_counting_oracle():
    rng = Rng(2)
    px = rng.integers(5, size=(16, 16)).astype(np.int64).reshape(16, 16)
    got = majority_patch_labels(px, 4, 5)
    for i in range(4):
        for j in range(4):
            block = px[i * 4 : (i + 1) * 4, j * 4 : (j + 1) * 4]
            counts = np.bincount(block.reshape(-1), minlength=5)
            assert got[i, j] == counts.argmax()


def test_majority_tie_takes_lower_class():
    px = np.zeros((2, 2), dtype=np.int64)
    px[0] = 3  # two pixels class 3, two class 0
    assert majority_patch_labels(px, 2, 5)[0, 0] == 0


def test_zero_noise_image_is_palette_exact():
    spec = TaskSpec(image_hw=(32, 32), patch=8, noise_std=0.0, min_side=4)
    s = sample_at(9, 0, spec)
    palette = np.asarray(spec.palette, dtype=np.float32)
    np.testing.assert_allclose(s.image.data, palette[s.pixel_classes], atol=1e-7)


def test_stacking():
    batch = [sample_at(0, i, SPEC) for i in range(2)]
    imgs = stack_images(batch)
    labs = stack_labels(batch)
    assert imgs.shape == (2, 32, 32, 3) and labs.shape == (2, 4, 4)


# --- metrics -----------------------------------------------------------------


def test_seg_metrics_hand_case():
    gt = [0, 0, 1, 1, 1]
    pred = [0, 1, 0, 1, 1]
    miou, pacc = seg_metrics(pred, gt, 2)
    # class 0: tp 1, fp 1, fn 1 -> 1/3; class 1: tp 2, fp 1, fn 1 -> 1/2
    assert math.isclose(miou, (1 / 3 + 1 / 2) / 2)
    assert math.isclose(pacc, 3 / 5)


def test_seg_metrics_skips_absent_classes():
    gt = [0, 0, 1, 1, 1]
    pred = [0, 1, 0, 1, 1]
    five, _ = seg_metrics(pred, gt, 5)
    two, _ = seg_metrics(pred, gt, 2)
    assert math.isclose(five, two)


def test_seg_metrics_perfect_and_errors():
    assert seg_metrics([1, 2, 0], [1, 2, 0], 3) == (1.0, 1.0)
    with pytest.raises(DimensionError):
        seg_metrics([0, 1], [0], 2)
    with pytest.raises(DataError):
        seg_metrics([0, 5], [0, 1], 2)
    with pytest.raises(DataError):
        seg_metrics([], [], 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_seg_metrics_identity_property(labels):
    miou, pacc = seg_metrics(labels, labels, 4)
    assert miou == 1.0 and pacc == 1.0


# --- probe -------------------------------------------------------------------


def test_probe_step0_loss_is_log_classes():
    rng = Rng(4)
    feats = rng.normal((20, 8))
    labels = rng.integers(5, size=20)
    _, hist = linear_probe_train(feats, labels, ProbeConfig(n_classes=5, steps=3))
    assert math.isclose(hist[0], math.log(5), rel_tol=1e-6)
    assert len(hist) == 4


def test_probe_separates_separable_features():
    # One-hot-ish features: class is readable off a single coordinate.
    rng = Rng(5)
    labels = rng.integers(3, size=60)
    feats = np.eye(3)[labels] * 2.0 + rng.normal((60, 3), std=0.05)
    head, hist = linear_probe_train(feats, labels, ProbeConfig(n_classes=3, steps=200, lr=0.1))
    pred = probe_predict(feats, head)
    miou, pacc = seg_metrics(pred, labels, 3)
    assert pacc == 1.0
    assert hist[-1] < hist[0]


def test_probe_is_deterministic():
    rng = Rng(6)
    feats = rng.normal((30, 6))
    labels = rng.integers(4, size=30)
    h1, _ = linear_probe_train(feats, labels, ProbeConfig(n_classes=4, steps=50))
    h2, _ = linear_probe_train(feats, labels, ProbeConfig(n_classes=4, steps=50))
    np.testing.assert_array_equal(h1.data, h2.data)


def test_probe_input_guards():
    with pytest.raises(DataError):
        linear_probe_train(np.ones((4, 2)), np.array([0.5, 1, 0, 1]), ProbeConfig(n_classes=2))
    with pytest.raises(DataError):
        linear_probe_train(np.ones((2, 2)), np.array([0, 7]), ProbeConfig(n_classes=2))
    with pytest.raises(DimensionError):
        linear_probe_train(np.ones((3, 2)), np.array([0, 1]), ProbeConfig(n_classes=2))
