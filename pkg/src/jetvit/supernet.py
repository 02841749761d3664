"""Weight-sharing supernet trained by feature distillation from a frozen teacher.

The supernet is one MiniViT whose trunk every per-layer attention choice
shares by object identity: extracting a subnet is just running `forward` with
an ArchDescriptor, and an in-place optimizer update through any sampled
subnet is visible to all of them.  Each training step draws a batch, samples
one subnet uniformly per layer, and regresses its tap features onto the
teacher's under MSE.

Stage 1 searches {Linear, Window} per layer; stage 2 re-trains with
{stage-1 winner, Full} per layer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, StateError
from .rng import Rng
from .serialize import read_json
from .tensor import AdamState, GradTape, Tensor, adam_step
from .task import stack_images
from .vit import (
    ArchDescriptor,
    Kind,
    MiniViT,
    arch_parse,
    embed_and_forward,
    inherit_weights,
    load_checkpoint,
    named_parameters,
    save_checkpoint,
)

# Stream salt for subnet-sampling draws (keeps them disjoint from data draws).
ARCH_STREAM = 0xA2C4


@dataclass
class SuperNet:
    model: MiniViT
    choices: tuple[tuple[Kind, ...], ...]
    stage: int

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if len(self.choices) != self.model.config.depth:
            raise ConfigError(
                f"{len(self.choices)} choice sets for depth {self.model.config.depth}"
            )
        for i, cs in enumerate(self.choices):
            if not cs:
                raise ConfigError(f"layer {i} has an empty choice set")
            if len(set(cs)) != len(cs):
                raise ConfigError(f"layer {i} lists a kind twice: {cs}")
            if Kind.LINEAR in cs and self.model.layers[i].squeeze is None:
                raise StateError(f"layer {i} offers Linear but has no squeeze-conv params")

    @property
    def depth(self) -> int:
        return self.model.config.depth


def stage1_choices(depth: int) -> tuple[tuple[Kind, ...], ...]:
    return tuple([(Kind.LINEAR, Kind.WINDOW)] * depth)


def stage2_choices(stage1_arch: ArchDescriptor) -> tuple[tuple[Kind, ...], ...]:
    """Per layer: the stage-1 winner plus Full (collapses if it already is)."""
    return tuple(
        (k, Kind.FULL) if k is not Kind.FULL else (Kind.FULL,) for k in stage1_arch.kinds
    )


def build_supernet(
    teacher: MiniViT,
    choices: tuple[tuple[Kind, ...], ...],
    rng: Rng,
    stage: int,
) -> SuperNet:
    """Inherit the teacher trunk bit-exact; squeeze extras go on every layer
    whose choice set offers Linear."""
    marker = ArchDescriptor(
        tuple(Kind.LINEAR if Kind.LINEAR in cs else Kind.FULL for cs in choices)
    )
    student = inherit_weights(teacher, marker, rng)
    return SuperNet(student, tuple(tuple(cs) for cs in choices), stage)


def sample_subnet(supernet: SuperNet, rng: Rng) -> ArchDescriptor:
    """Independent uniform draw per layer over its choice set (one rng call)."""
    sizes = np.array([len(cs) for cs in supernet.choices])
    picks = rng.integers(sizes)
    return ArchDescriptor(
        tuple(cs[int(j)] for cs, j in zip(supernet.choices, picks))
    )


def distill_loss(student_taps: list[Tensor], teacher_taps: list[Tensor]) -> Tensor:
    """Mean over tap layers of elementwise MSE."""
    if len(student_taps) != len(teacher_taps) or not student_taps:
        raise DimensionError(
            f"tap lists differ: {len(student_taps)} vs {len(teacher_taps)}"
        )
    total = None
    for s, t in zip(student_taps, teacher_taps):
        if s.shape != t.shape:
            raise DimensionError(f"tap shapes differ: {s.shape} vs {t.shape}")
        term = T.mse(s, t)
        total = term if total is None else T.add(total, term)
    return T.div(total, float(len(student_taps)))


@dataclass
class DistillConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    taps: tuple[int, ...] = ()  # empty = use the models' tap list
    seed: int = 0
    loss: str = "mse"
    teacher_frozen: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError(f"steps and batch_size must be positive, got {self.steps}, {self.batch_size}")
        if self.loss != "mse":
            raise ConfigError(f"unsupported distillation loss {self.loss!r}")
        if not self.teacher_frozen:
            raise ConfigError("the teacher is always frozen")


def train_supernet(
    teacher: MiniViT,
    supernet: SuperNet,
    stream,
    cfg: DistillConfig,
    checkpoint_dir=None,
    log_path=None,
) -> tuple[SuperNet, list[dict]]:
    """Distill the supernet against the teacher; returns it plus the log.

    stream: step -> list of LabeledSamples (see task.make_stream).  A NaN/Inf
    loss aborts with NumericError after writing the last-good (pre-update)
    checkpoint to checkpoint_dir, if given.  Log records are
    {step, arch, loss, wall_ms}; all fields except wall_ms are reproducible
    bit for bit for a fixed config.
    """
    if cfg.taps:
        taps = tuple(sorted(cfg.taps))
        teacher.taps = taps
        supernet.model.taps = taps
    elif teacher.taps != supernet.model.taps:
        raise ConfigError(f"tap mismatch: teacher {teacher.taps} vs supernet {supernet.model.taps}")

    teacher_arch = ArchDescriptor.uniform(Kind.FULL, teacher.config.depth)
    arch_rng = Rng(cfg.seed, ARCH_STREAM)
    params = named_parameters(supernet.model)
    slots: dict[str, AdamState] = {}
    log: list[dict] = []

    for step in range(cfg.steps):
        t0 = time.perf_counter()
        images = stack_images(stream(step))
        _, teacher_taps = embed_and_forward(teacher, teacher_arch, images)
        arch = sample_subnet(supernet, arch_rng)
        with GradTape() as tape:
            tape.watch(*(p for _, p in params))
            try:
                _, student_taps = embed_and_forward(supernet.model, arch, images)
                loss = distill_loss(student_taps, teacher_taps)
                loss_val = loss.item()
            except NumericError:
                loss_val = float("nan")  # kernel-level NaN check fired mid-forward
            if not np.isfinite(loss_val):
                if checkpoint_dir is not None:
                    save_supernet(checkpoint_dir, supernet)  # params are pre-update
                raise NumericError(
                    f"non-finite distillation loss at step {step}"
                    + (f"; last-good checkpoint at {checkpoint_dir}" if checkpoint_dir else "")
                )
            tape.backward(loss)
        for name, p in params:
            if p.grad is None:
                continue  # extras of layers the sampled arch did not run
            slot = slots.setdefault(name, AdamState.for_params([p]))
            adam_step([p], [p.grad], slot, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
            p.grad = None
        log.append(
            {
                "step": step,
                "arch": arch.serialize(),
                "loss": loss_val,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )

    if log_path is not None:
        write_training_log(log_path, log)
    return supernet, log


def write_training_log(path, log: list[dict]) -> None:
    import json

    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_training_log(path) -> list[dict]:
    import json

    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# checkpoints


def save_supernet(out_dir, supernet: SuperNet) -> None:
    marker = ArchDescriptor(
        tuple(Kind.LINEAR if Kind.LINEAR in cs else Kind.FULL for cs in supernet.choices)
    )
    save_checkpoint(
        out_dir,
        supernet.model,
        marker,
        extra={
            "kind": "supernet",
            "stage": supernet.stage,
            "choices": ["".join(k.value for k in cs) for cs in supernet.choices],
        },
    )


def load_supernet(ckpt_dir) -> SuperNet:
    path = Path(ckpt_dir)
    if not (path / "manifest.json").exists():
        raise StateError(f"no supernet checkpoint at {path} (missing manifest.json)")
    manifest = read_json(path / "manifest.json")
    if manifest.get("kind") != "supernet":
        raise StateError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not a supernet")
    model, _ = load_checkpoint(path)
    choices = tuple(tuple(arch_parse(cs).kinds) for cs in manifest["choices"])
    return SuperNet(model, choices, int(manifest["stage"]))
