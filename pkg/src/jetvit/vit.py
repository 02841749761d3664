"""A compact ViT whose per-layer token mixer is chosen by an ArchDescriptor.

Blocks are pre-norm (norm -> attention -> residual; norm -> MLP -> residual),
patch tokens only, a single learned additive positional table, and GELU in
the MLP.  Q/K/V/O projections carry no biases; the patch stem and MLP do.
Layers running the linear kind add the squeeze dynamic-conv branch and need
its generator params ("extras") initialized.

Weight inheritance copies the trunk bit for bit, so an inherited student with
arch = all-Full follows the identical op sequence as its teacher and
reproduces the forward exactly, not approximately.
"""

from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, StateError
from .kernels import (
    SqueezeConvParams,
    _full_attention_core,
    _jetvit_linear_block_core,
    _window_attention_core,
    default_conv_hidden,
    init_squeeze_params,
)
from .rng import Rng
from .serialize import load_tensor, read_json, save_tensor, write_json
from .tensor import Tensor

LA_EPS = 1e-6  # linear-attention normalization floor
INIT_STD = 0.02


class Kind(enum.Enum):
    LINEAR = "L"
    WINDOW = "W"
    FULL = "F"


@dataclass(frozen=True)
class ArchDescriptor:
    """Per-layer attention kind assignment; the object the search optimizes."""

    kinds: tuple[Kind, ...]

    def __post_init__(self):
        if not self.kinds or any(not isinstance(k, Kind) for k in self.kinds):
            raise ConfigError("kinds must be a non-empty tuple of Kind")

    @classmethod
    def uniform(cls, kind: Kind, depth: int) -> "ArchDescriptor":
        return cls(tuple([kind] * depth))

    @property
    def depth(self) -> int:
        return len(self.kinds)

    def count(self, kind: Kind) -> int:
        return sum(1 for k in self.kinds if k is kind)

    def with_kind(self, i: int, kind: Kind) -> "ArchDescriptor":
        if not 0 <= i < len(self.kinds):
            raise ConfigError(f"layer {i} out of range for depth {len(self.kinds)}")
        ks = list(self.kinds)
        ks[i] = kind
        return ArchDescriptor(tuple(ks))

    def serialize(self) -> str:
        return "".join(k.value for k in self.kinds)


def arch_serialize(arch: ArchDescriptor) -> str:
    return arch.serialize()


def arch_parse(code: str, depth: int | None = None) -> ArchDescriptor:
    if depth is not None and len(code) != depth:
        raise FormatError(f"arch code {code!r} has length {len(code)}, expected {depth}")
    try:
        kinds = tuple(Kind(ch) for ch in code)
    except ValueError:
        raise FormatError(f"arch code {code!r} contains characters outside L/W/F") from None
    if not kinds:
        raise FormatError("arch code is empty")
    return ArchDescriptor(kinds)


@dataclass(frozen=True)
class ViTConfig:
    image_hw: tuple[int, int] = (64, 64)
    patch: int = 8
    depth: int = 12
    d_model: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    window: int = 4
    conv_k: int = 3
    conv_hidden: int | None = None
    channels: int = 3

    def __post_init__(self):
        h, w = self.image_hw
        if min(h, w, self.patch, self.depth, self.d_model, self.heads,
               self.mlp_ratio, self.window, self.conv_k, self.channels) < 1:
            raise ConfigError("all ViTConfig dimensions must be positive")
        if h % self.patch or w % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image {self.image_hw}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        gh, gw = h // self.patch, w // self.patch
        if gh % self.window or gw % self.window:
            raise ConfigError(f"window {self.window} does not divide grid {(gh, gw)}")
        if self.conv_k % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {self.conv_k}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch, self.image_hw[1] // self.patch)

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def conv_hidden_width(self) -> int:
        return self.conv_hidden if self.conv_hidden is not None else default_conv_hidden(self.d_model)

    def to_dict(self) -> dict:
        return {
            "image_hw": list(self.image_hw),
            "patch": self.patch,
            "depth": self.depth,
            "d_model": self.d_model,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "window": self.window,
            "conv_k": self.conv_k,
            "conv_hidden": self.conv_hidden,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        d["image_hw"] = tuple(d["image_hw"])
        return cls(**d)


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    squeeze: SqueezeConvParams | None = None

    _TRUNK = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
              "ln2_g", "ln2_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    def trunk(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self._TRUNK]


@dataclass
class MiniViT:
    config: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    layers: list[LayerParams]
    taps: tuple[int, ...]


def default_taps(depth: int) -> tuple[int, ...]:
    return (depth - 1,)


def _validate_taps(taps, depth) -> tuple[int, ...]:
    taps = tuple(sorted(int(t) for t in taps))
    if len(set(taps)) != len(taps) or any(not 0 <= t < depth for t in taps):
        raise ConfigError(f"taps {taps} invalid for depth {depth}")
    return taps


def init_minivit(
    config: ViTConfig,
    rng: Rng,
    arch: ArchDescriptor | None = None,
    taps=None,
    dtype=np.float32,
) -> MiniViT:
    """Fresh model; squeeze extras only on layers the arch runs as Linear.

    arch = None means all-Full (the teacher construction).  Draw order is
    fixed (stem, positional table, then per layer: q, k, v, o, mlp, extras)
    so identical rng state gives identical weights.
    """
    if arch is None:
        arch = ArchDescriptor.uniform(Kind.FULL, config.depth)
    if arch.depth != config.depth:
        raise ConfigError(f"arch depth {arch.depth} != config depth {config.depth}")
    taps = default_taps(config.depth) if taps is None else _validate_taps(taps, config.depth)
    dm = config.d_model
    patch_dim = config.patch * config.patch * config.channels

    def w(shape):
        return Tensor(rng.normal(shape, std=INIT_STD), dtype=dtype)

    patch_w = w((patch_dim, dm))
    patch_b = Tensor.zeros((dm,), dtype=dtype)
    pos = w((config.n_tokens, dm))
    layers = []
    for i in range(config.depth):
        layers.append(
            LayerParams(
                ln1_g=Tensor.ones((dm,), dtype=dtype),
                ln1_b=Tensor.zeros((dm,), dtype=dtype),
                w_q=w((dm, dm)),
                w_k=w((dm, dm)),
                w_v=w((dm, dm)),
                w_o=w((dm, dm)),
                ln2_g=Tensor.ones((dm,), dtype=dtype),
                ln2_b=Tensor.zeros((dm,), dtype=dtype),
                mlp_w1=w((dm, config.mlp_ratio * dm)),
                mlp_b1=Tensor.zeros((config.mlp_ratio * dm,), dtype=dtype),
                mlp_w2=w((config.mlp_ratio * dm, dm)),
                mlp_b2=Tensor.zeros((dm,), dtype=dtype),
                squeeze=(
                    init_squeeze_params(rng, dm, config.conv_k, config.conv_hidden_width, dtype)
                    if arch.kinds[i] is Kind.LINEAR
                    else None
                ),
            )
        )
    return MiniViT(config, patch_w, patch_b, pos, layers, taps)


def named_parameters(model: MiniViT) -> list[tuple[str, Tensor]]:
    """Deterministic (dot-path, tensor) listing; checkpoint and optimizer keys."""
    out = [("patch_embed.w", model.patch_w), ("patch_embed.b", model.patch_b), ("pos", model.pos)]
    for i, layer in enumerate(model.layers):
        out.extend((f"layers.{i}.{n}", t) for n, t in layer.trunk())
        if layer.squeeze is not None:
            out.extend((f"layers.{i}.squeeze.{n}", t) for n, t in layer.squeeze.tensors())
    return out


# ---------------------------------------------------------------------------
# forward


@functools.lru_cache(maxsize=16)
def _unfold_index(h: int, w: int, c: int, patch: int) -> np.ndarray:
    """Bijection flattened-pixel index -> (token, in-patch) raster order."""
    return (
        np.arange(h * w * c)
        .reshape(h // patch, patch, w // patch, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(-1)
    )


def patch_embed(image: Tensor, proj_w: Tensor, proj_b: Tensor, patch: int) -> Tensor:
    """Non-overlapping P x P patches, flattened raster-order, then projected."""
    squeeze = image.ndim == 3
    if squeeze:
        image = T.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise DimensionError(f"image must be (H, W, C) or (B, H, W, C), got rank {image.ndim}")
    b, h, w, c = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch {patch} does not divide image {(h, w)}")
    patch_dim = patch * patch * c
    if proj_w.shape[0] != patch_dim:
        raise ConfigError(f"projection expects rows of {proj_w.shape[0]}, patches give {patch_dim}")
    n = (h // patch) * (w // patch)
    flat = T.reshape(image, (b, h * w * c))
    gathered = T.permute(flat, _unfold_index(h, w, c, patch), axis=-1)
    tokens = T.reshape(gathered, (b, n, patch_dim))
    out = T.add(T.matmul(tokens, proj_w), proj_b)
    return T.reshape(out, (n, proj_w.shape[1])) if squeeze else out


def _block(x: Tensor, layer: LayerParams, kind: Kind, config: ViTConfig, layer_idx: int) -> Tensor:
    xn = T.layer_norm(x, layer.ln1_g, layer.ln1_b)
    q = T.matmul(xn, layer.w_q)
    k = T.matmul(xn, layer.w_k)
    v = T.matmul(xn, layer.w_v)
    if kind is Kind.FULL:
        mixed = _full_attention_core(q, k, v, config.heads)
    elif kind is Kind.WINDOW:
        mixed = _window_attention_core(q, k, v, config.heads, config.grid, config.window)
    else:
        if layer.squeeze is None:
            raise StateError(f"layer {layer_idx} runs as Linear but has no squeeze-conv params")
        mixed = _jetvit_linear_block_core(q, k, v, config.heads, config.grid, layer.squeeze, LA_EPS)
    x = T.add(x, T.matmul(mixed, layer.w_o))
    xm = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
    hidden = T.gelu(T.add(T.matmul(xm, layer.mlp_w1), layer.mlp_b1))
    return T.add(x, T.add(T.matmul(hidden, layer.mlp_w2), layer.mlp_b2))


def forward(model: MiniViT, arch: ArchDescriptor, tokens: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run the block stack; returns (final features, tapped features).

    tokens: patch-embedded (N, d_model) or (B, N, d_model); the positional
    table is added here.  Taps are captured after each tap layer's final
    residual.
    """
    if arch.depth != model.config.depth:
        raise ConfigError(f"arch depth {arch.depth} != model depth {model.config.depth}")
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    if tokens.ndim != 3:
        raise DimensionError(f"tokens must be (N, d) or (B, N, d), got rank {tokens.ndim}")
    n = tokens.shape[-2]
    if n != model.config.n_tokens or tokens.shape[-1] != model.config.d_model:
        raise DimensionError(
            f"tokens {tokens.shape} do not match config "
            f"({model.config.n_tokens}, {model.config.d_model})"
        )
    x = T.add(tokens, model.pos)
    tapped = []
    for i, (layer, kind) in enumerate(zip(model.layers, arch.kinds)):
        x = _block(x, layer, kind, model.config, i)
        if i in model.taps:
            tapped.append(x)
    if squeeze:
        x = T.reshape(x, x.shape[1:])
        tapped = [T.reshape(t, t.shape[1:]) for t in tapped]
    return x, tapped


def embed_and_forward(model: MiniViT, arch: ArchDescriptor, images: Tensor):
    tokens = patch_embed(images, model.patch_w, model.patch_b, model.config.patch)
    return forward(model, arch, tokens)


# ---------------------------------------------------------------------------
# inheritance


def inherit_weights(
    teacher: MiniViT, arch: ArchDescriptor, rng: Rng, mode: str = "all"
) -> MiniViT:
    """Student with the teacher's trunk copied bit-exact; fresh extras.

    mode "all": every trunk tensor copied.  mode "mlp-only": W_Q/K/V/O are
    re-randomized instead (the ablation baseline); stem, norms, MLPs still
    copy.  Linear layers get squeeze params at the documented init; other
    layers carry no extras.
    """
    if mode not in ("all", "mlp-only"):
        raise ConfigError(f"unknown inheritance mode {mode!r}")
    if arch.depth != teacher.config.depth:
        raise ConfigError(f"arch depth {arch.depth} != teacher depth {teacher.config.depth}")
    cfg = teacher.config
    dtype = teacher.patch_w.dtype

    def cp(t: Tensor) -> Tensor:
        return Tensor._make(t.data.copy())

    layers = []
    for i, src in enumerate(teacher.layers):
        fields = {name: cp(t) for name, t in src.trunk()}
        if mode == "mlp-only":
            for name in ("w_q", "w_k", "w_v", "w_o"):
                fields[name] = Tensor(rng.normal((cfg.d_model, cfg.d_model), std=INIT_STD), dtype=dtype)
        squeeze = None
        if arch.kinds[i] is Kind.LINEAR:
            squeeze = init_squeeze_params(rng, cfg.d_model, cfg.conv_k, cfg.conv_hidden_width, dtype)
        layers.append(LayerParams(**fields, squeeze=squeeze))
    return MiniViT(cfg, cp(teacher.patch_w), cp(teacher.patch_b), cp(teacher.pos), layers, teacher.taps)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir, model: MiniViT, arch: ArchDescriptor, extra: dict | None = None) -> None:
    """Directory checkpoint: manifest.json plus one .jvt file per parameter."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    params = {}
    for name, t in named_parameters(model):
        rel = f"params/{name}.jvt"
        save_tensor(out / rel, t)
        params[name] = rel
    manifest = {
        "schema_version": 1,
        "kind": "minivit",
        "config": model.config.to_dict(),
        "arch": arch.serialize(),
        "taps": list(model.taps),
        "params": params,
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def load_checkpoint(ckpt_dir) -> tuple[MiniViT, ArchDescriptor]:
    ckpt = Path(ckpt_dir)
    if not (ckpt / "manifest.json").exists():
        raise StateError(f"no checkpoint at {ckpt} (missing manifest.json)")
    manifest = read_json(ckpt / "manifest.json")
    if manifest.get("kind") not in ("minivit", "supernet"):
        raise FormatError(f"{ckpt}: unknown checkpoint kind {manifest.get('kind')!r}")
    config = ViTConfig.from_dict(manifest["config"])
    arch = arch_parse(manifest["arch"], config.depth)
    # Structural init (zeros rng; values are overwritten below), extras where
    # the manifest has them rather than where the arch says: a supernet
    # manifest may carry extras on every searchable layer.
    extras_layers = sorted(
        {int(name.split(".")[1]) for name in manifest["params"] if ".squeeze." in name}
    )
    build_arch = ArchDescriptor(
        tuple(Kind.LINEAR if i in extras_layers else Kind.FULL for i in range(config.depth))
    )
    model = init_minivit(config, Rng(0), build_arch, taps=manifest["taps"])
    by_name = dict(named_parameters(model))
    if set(by_name) != set(manifest["params"]):
        missing = set(by_name) ^ set(manifest["params"])
        raise FormatError(f"{ckpt}: parameter set mismatch ({sorted(missing)[:4]}...)")
    for name, rel in manifest["params"].items():
        t = load_tensor(ckpt / rel)
        if t.shape != by_name[name].shape:
            raise FormatError(f"{ckpt}: {name} has shape {t.shape}, expected {by_name[name].shape}")
        by_name[name].data = t.data
    return model, arch


def all_archs(depth: int, kinds=tuple(Kind)) -> list[ArchDescriptor]:
    """Every arch over the given kinds; used by small exhaustive tests."""
    return [ArchDescriptor(ks) for ks in itertools.product(kinds, repeat=depth)]
