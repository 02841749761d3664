"""Weight-sharing supernet: construction, sampling, distillation training loop."""

import numpy as np
import pytest

from jetvit.errors import ConfigError, NumericError, StateError
from jetvit.rng import Rng
from jetvit.supernet import (
    DistillConfig,
    SuperNet,
    build_supernet,
    distill_loss,
    load_supernet,
    read_training_log,
    sample_subnet,
    save_supernet,
    stage1_choices,
    stage2_choices,
    train_supernet,
)
from jetvit.task import TaskSpec, make_stream
from jetvit.tensor import Tensor
from jetvit.vit import (
    ArchDescriptor,
    Kind,
    ViTConfig,
    arch_parse,
    embed_and_forward,
    init_minivit,
    named_parameters,
    save_checkpoint,
)

CFG = ViTConfig(
    image_hw=(16, 16), patch=4, depth=3, d_model=16, heads=2,
    mlp_ratio=2, window=2, conv_k=3,
)
SPEC = TaskSpec(image_hw=(16, 16), patch=4, noise_std=0.05, shapes_range=(1, 2), min_side=3)


def _teacher(seed=0):
    return init_minivit(CFG, Rng(seed), dtype=np.float64)


def _supernet(teacher, stage=1, choices=None, seed=50):
    choices = stage1_choices(CFG.depth) if choices is None else choices
    return build_supernet(teacher, choices, Rng(seed), stage=stage)


def _images(seed, b=2):
    return Tensor(Rng(seed, 0x1111).uniform((b, 16, 16, 3)))


def test_stage1_choices_shape():
    cs = stage1_choices(4)
    assert len(cs) == 4
    assert all(c == (Kind.LINEAR, Kind.WINDOW) for c in cs)


def test_stage2_choices_collapse():
    cs = stage2_choices(arch_parse("LWF"))
    assert cs == ((Kind.LINEAR, Kind.FULL), (Kind.WINDOW, Kind.FULL), (Kind.FULL,))


def test_build_gives_extras_where_linear_offered():
    sn = _supernet(_teacher())
    assert all(layer.squeeze is not None for layer in sn.model.layers)
    cs2 = stage2_choices(arch_parse("WWW"))
    sn2 = _supernet(_teacher(), stage=2, choices=cs2)
    assert all(layer.squeeze is None for layer in sn2.model.layers)


def test_full_path_is_bit_exact_teacher():
    teacher = _teacher(1)
    cs = stage2_choices(arch_parse("LWL"))
    sn = _supernet(teacher, stage=2, choices=cs)
    full = ArchDescriptor.uniform(Kind.FULL, CFG.depth)
    imgs = _images(2)
    t_out, _ = embed_and_forward(teacher, full, imgs)
    s_out, _ = embed_and_forward(sn.model, full, imgs)
    assert np.array_equal(t_out.data, s_out.data)


def test_supernet_validation():
    teacher = _teacher(3)
    with pytest.raises(ConfigError):
        SuperNet(teacher, stage1_choices(CFG.depth), stage=3)
    with pytest.raises(ConfigError):
        SuperNet(teacher, stage1_choices(2), stage=1)
    # Linear on offer without squeeze params must be rejected.
    with pytest.raises(StateError):
        SuperNet(teacher, stage1_choices(CFG.depth), stage=1)


def test_sample_subnet_is_uniform_per_layer():
    sn = _supernet(_teacher(4))
    rng = Rng(7, 0xA6C)
    draws = [sample_subnet(sn, rng) for _ in range(600)]
    for layer in range(CFG.depth):
        freq = sum(1 for a in draws if a.kinds[layer] is Kind.LINEAR) / len(draws)
        assert 0.44 < freq < 0.56
    assert rng.state()[2] == 600  # one rng call per draw


def test_sample_subnet_respects_collapsed_choice():
    cs = stage2_choices(arch_parse("FFW"))
    sn = _supernet(_teacher(5), stage=2, choices=cs)
    rng = Rng(8)
    for _ in range(20):
        arch = sample_subnet(sn, rng)
        assert arch.kinds[0] is Kind.FULL and arch.kinds[1] is Kind.FULL
        assert arch.kinds[2] in (Kind.WINDOW, Kind.FULL)


def test_distill_loss_hand_value():
    a = [Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))]
    b = [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))]
    # First tap: mean squared diff 1.0; second: 0.0 -> mean over taps 0.5.
    assert distill_loss(a, b).item() == 0.5


def test_distill_loss_guards():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(Exception):
        distill_loss([t], [])
    with pytest.raises(Exception):
        distill_loss([t], [Tensor(np.ones((3, 2)))])


def test_distill_config_guards():
    with pytest.raises(ConfigError):
        DistillConfig(steps=0)
    with pytest.raises(ConfigError):
        DistillConfig(loss="l1")
    with pytest.raises(ConfigError):
        DistillConfig(teacher_frozen=False)


def _run(seed=0, steps=12, lr=1e-3, teacher=None, checkpoint_dir=None, log_path=None):
    teacher = teacher or _teacher(10)
    sn = _supernet(teacher, seed=60)
    stream = make_stream(77, 2, SPEC)
    cfg = DistillConfig(steps=steps, batch_size=2, lr=lr, seed=seed)
    return train_supernet(teacher, sn, stream, cfg, checkpoint_dir=checkpoint_dir, log_path=log_path)


def test_training_reduces_loss_and_freezes_teacher():
    teacher = _teacher(10)
    before = [t.data.copy() for _, t in named_parameters(teacher)]
    _, log = _run(steps=40, lr=3e-3, teacher=teacher)
    for (name, t), b in zip(named_parameters(teacher), before):
        np.testing.assert_array_equal(t.data, b)
    first = np.mean([r["loss"] for r in log[:8]])
    last = np.mean([r["loss"] for r in log[-8:]])
    assert last < first


def test_training_is_reproducible_modulo_wall_time(tmp_path):
    _, log1 = _run(log_path=tmp_path / "a.jsonl")
    _, log2 = _run(log_path=tmp_path / "b.jsonl")
    for r1, r2 in zip(log1, log2):
        assert r1["step"] == r2["step"]
        assert r1["arch"] == r2["arch"]
        assert r1["loss"] == r2["loss"]
    back = read_training_log(tmp_path / "a.jsonl")
    assert [r["arch"] for r in back] == [r["arch"] for r in log1]


def test_training_zero_lr_is_noop():
    teacher = _teacher(11)
    sn = _supernet(teacher, seed=61)
    before = [t.data.copy() for _, t in named_parameters(sn.model)]
    stream = make_stream(78, 2, SPEC)
    train_supernet(teacher, sn, stream, DistillConfig(steps=4, batch_size=2, lr=0.0))
    for (_, t), b in zip(named_parameters(sn.model), before):
        np.testing.assert_array_equal(t.data, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_checkpoint(tmp_path):
    teacher = _teacher(12)
    sn = _supernet(teacher, seed=62)
    sn.model.patch_w.data[:] = 1e200  # forces overflow in the first forward
    stream = make_stream(79, 2, SPEC)
    with pytest.raises(NumericError):
        train_supernet(
            teacher, sn, stream, DistillConfig(steps=3, batch_size=2),
            checkpoint_dir=tmp_path / "last_good",
        )
    assert (tmp_path / "last_good" / "manifest.json").exists()


def test_tap_mismatch_rejected():
    teacher = _teacher(13)
    sn = _supernet(teacher, seed=63)
    sn.model.taps = (0,)
    with pytest.raises(ConfigError):
        train_supernet(teacher, sn, make_stream(1, 1, SPEC), DistillConfig(steps=1, batch_size=1))


def test_supernet_checkpoint_roundtrip(tmp_path):
    sn = _supernet(_teacher(14), seed=64)
    save_supernet(tmp_path / "sn", sn)
    back = load_supernet(tmp_path / "sn")
    assert back.stage == sn.stage and back.choices == sn.choices
    want, got = dict(named_parameters(sn.model)), dict(named_parameters(back.model))
    assert want.keys() == got.keys()
    for name in want:
        np.testing.assert_array_equal(want[name].data, got[name].data)


def test_load_supernet_rejects_plain_model(tmp_path):
    model = _teacher(15)
    save_checkpoint(tmp_path / "m", model, ArchDescriptor.uniform(Kind.FULL, CFG.depth))
    with pytest.raises(StateError):
        load_supernet(tmp_path / "m")
