"""Desk-scale depthwise-separable architectures.

Two block families are provided:

* ``standard_ds`` -- depthwise 7x7 -> LayerNorm -> pointwise expand (4x) ->
  GELU -> pointwise project -> residual. A faithful miniature of the
  ConvNeXt block.
* ``gated_ds`` -- LayerNorm -> pointwise expand to 2C -> split into two
  halves -> depthwise 7x7 on one half -> elementwise gate with the other ->
  pointwise project -> residual. A single-order stand-in for recursive
  gated convolution blocks.

Both families have exactly one depthwise convolution per block. In the
gated block the depthwise conv acts on one of the two C-wide halves of the
2C expansion, so its channel count equals the stage width, same as the
standard block. Every block has two pointwise (1x1 channel-mixing)
layers: expand and project.

Canonical layer indexing is depth-first: stage order, then block order
within a stage. The patchify stem and the 2x2 downsampling convolutions
between stages are dense convolutions, not depthwise layers, and are never
enumerated or transferred.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import InvalidSpecError

BLOCK_KINDS = ("standard_ds", "gated_ds")


@dataclass(frozen=True)
class ArchSpec:
    """Declarative description of a desk-scale DS-CNN."""

    name: str
    block_kind: str
    stem: tuple[int, int]  # (patch_size, out_channels)
    stages: tuple[tuple[int, int, int], ...]  # (num_blocks, channels, dw_kernel)
    num_classes: int
    input_size: tuple[int, int, int] = (32, 32, 3)  # (H, W, C)

    def validate(self):
        if not self.name:
            raise InvalidSpecError("name: must be a nonempty identifier")
        if self.block_kind not in BLOCK_KINDS:
            raise InvalidSpecError(
                f"block_kind: {self.block_kind!r} not one of {BLOCK_KINDS}"
            )
        if len(self.stem) != 2 or self.stem[0] < 1 or self.stem[1] < 1:
            raise InvalidSpecError(f"stem: invalid (patch, channels) pair {self.stem}")
        if not self.stages:
            raise InvalidSpecError("stages: must be nonempty")
        for i, st in enumerate(self.stages):
            if len(st) != 3:
                raise InvalidSpecError(
                    f"stages[{i}]: expected (num_blocks, channels, dw_kernel), got {st}"
                )
            nb, ch, k = st
            if nb < 1:
                raise InvalidSpecError(f"stages[{i}].num_blocks: must be >= 1, got {nb}")
            if ch <= 0:
                raise InvalidSpecError(f"stages[{i}].channels: must be > 0, got {ch}")
            if k < 3 or k % 2 == 0:
                raise InvalidSpecError(
                    f"stages[{i}].dw_kernel: must be odd and >= 3, got {k}"
                )
        if self.stem[1] != self.stages[0][1]:
            raise InvalidSpecError(
                f"stem: out_channels {self.stem[1]} must equal first stage "
                f"channels {self.stages[0][1]}"
            )
        if self.num_classes < 2:
            raise InvalidSpecError(f"num_classes: must be >= 2, got {self.num_classes}")
        h, w, c = self.input_size
        if h < 1 or w < 1 or c < 1:
            raise InvalidSpecError(f"input_size: invalid {self.input_size}")
        if h % self.stem[0] != 0 or w % self.stem[0] != 0:
            raise InvalidSpecError(
                f"input_size: {h}x{w} not divisible by stem patch {self.stem[0]}"
            )
        # one 2x downsample between consecutive stages
        sh, sw = h // self.stem[0], w // self.stem[0]
        for i in range(1, len(self.stages)):
            sh, sw = sh // 2, sw // 2
            if sh < 1 or sw < 1:
                raise InvalidSpecError(
                    f"stages: spatial size collapses to zero entering stage {i}"
                )
        return self

    # -- derived quantities ------------------------------------------------

    @property
    def total_depthwise_layers(self) -> int:
        return sum(nb for nb, _, _ in self.stages)

    def stage_of_layer(self, layer_id: int) -> tuple[int, int]:
        """Map a canonical depthwise layer id to (stage_idx, block_idx)."""
        off = layer_id
        for si, (nb, _, _) in enumerate(self.stages):
            if off < nb:
                return si, off
            off -= nb
        raise IndexError(f"layer_id {layer_id} out of range")

    # -- config file round trip ---------------------------------------------

    def to_config(self) -> dict:
        kernels = {k for _, _, k in self.stages}
        cfg = {
            "name": self.name,
            "block_kind": self.block_kind,
            "stem": {"patch": self.stem[0], "channels": self.stem[1]},
            "stages": [[nb, ch] for nb, ch, _ in self.stages]
            if len(kernels) == 1
            else [list(st) for st in self.stages],
            "num_classes": self.num_classes,
            "input": list(self.input_size),
        }
        if len(kernels) == 1:
            cfg["dw_kernel"] = next(iter(kernels))
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "ArchSpec":
        default_k = cfg.get("dw_kernel")
        stages = []
        for st in cfg["stages"]:
            if len(st) == 2:
                if default_k is None:
                    raise InvalidSpecError(
                        "stages: two-element stage entries need a top-level dw_kernel"
                    )
                stages.append((int(st[0]), int(st[1]), int(default_k)))
            else:
                stages.append((int(st[0]), int(st[1]), int(st[2])))
        spec = cls(
            name=cfg["name"],
            block_kind=cfg["block_kind"],
            stem=(int(cfg["stem"]["patch"]), int(cfg["stem"]["channels"])),
            stages=tuple(stages),
            num_classes=int(cfg["num_classes"]),
            input_size=tuple(cfg.get("input", (32, 32, 3))),
        )
        return spec.validate()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_config(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ArchSpec":
        return cls.from_config(json.loads(Path(path).read_text()))

    def with_classes(self, num_classes: int) -> "ArchSpec":
        return dataclasses.replace(self, num_classes=num_classes)


def mini_convnext(num_classes: int = 10) -> ArchSpec:
    """Default standard-block spec: patchify 4x4 -> 48ch, 12 blocks."""
    return ArchSpec(
        name="mini_convnext",
        block_kind="standard_ds",
        stem=(4, 48),
        stages=((2, 48, 7), (2, 96, 7), (6, 192, 7), (2, 384, 7)),
        num_classes=num_classes,
    ).validate()


def mini_gated(num_classes: int = 10) -> ArchSpec:
    """Default gated-block spec, same stage table as mini_convnext."""
    return ArchSpec(
        name="mini_gated",
        block_kind="gated_ds",
        stem=(4, 48),
        stages=((2, 48, 7), (2, 96, 7), (6, 192, 7), (2, 384, 7)),
        num_classes=num_classes,
    ).validate()


def mini_convnext_wide(num_classes: int = 10) -> ArchSpec:
    """Doubled-width standard spec (4416 depthwise kernels), used as an
    oversupplying source for stack-mode transfers."""
    return ArchSpec(
        name="mini_convnext_w2",
        block_kind="standard_ds",
        stem=(4, 96),
        stages=((2, 96, 7), (2, 192, 7), (6, 384, 7), (2, 768, 7)),
        num_classes=num_classes,
    ).validate()


def mini_convnext_half(num_classes: int = 10) -> ArchSpec:
    """Half-width standard spec (1104 depthwise kernels), an undersupplying
    stack source."""
    return ArchSpec(
        name="mini_convnext_h2",
        block_kind="standard_ds",
        stem=(4, 24),
        stages=((2, 24, 7), (2, 48, 7), (6, 96, 7), (2, 192, 7)),
        num_classes=num_classes,
    ).validate()


ARCH_BUILTINS = {
    "mini_convnext": mini_convnext,
    "mini_gated": mini_gated,
    "mini_convnext_w2": mini_convnext_wide,
    "mini_convnext_h2": mini_convnext_half,
}


# -- torch modules -----------------------------------------------------------


class ChannelNorm(nn.Module):
    """LayerNorm over the channel dim of an (N, C, H, W) tensor."""

    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class StandardBlock(nn.Module):
    """dwconv -> LN -> pw expand -> GELU -> pw project -> residual."""

    EXPANSION = 4

    def __init__(self, dim, kernel):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw_expand = nn.Linear(dim, self.EXPANSION * dim)
        self.act = nn.GELU()
        self.pw_project = nn.Linear(self.EXPANSION * dim, dim)

    def forward(self, x):
        shortcut = x
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.norm(x)
        x = self.pw_expand(x)
        x = self.act(x)
        x = self.pw_project(x)
        x = x.permute(0, 3, 1, 2)
        return shortcut + x


class GatedBlock(nn.Module):
    """LN -> pw expand to 2C -> split halves -> dwconv one half -> gate ->
    pw project -> residual."""

    def __init__(self, dim, kernel):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw_expand = nn.Linear(dim, 2 * dim)
        self.dwconv = nn.Conv2d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pw_project = nn.Linear(dim, dim)

    def forward(self, x):
        shortcut = x
        x = x.permute(0, 2, 3, 1)
        x = self.pw_expand(self.norm(x))
        gate, spatial = x.chunk(2, dim=-1)
        spatial = spatial.permute(0, 3, 1, 2)
        spatial = self.dwconv(spatial)
        spatial = spatial.permute(0, 2, 3, 1)
        x = self.pw_project(gate * spatial)
        x = x.permute(0, 3, 1, 2)
        return shortcut + x


class DsNet(nn.Module):
    """Stem -> stages (with 2x2 downsampling between) -> pooled head."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        in_ch = spec.input_size[2]
        patch, stem_ch = spec.stem
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, stem_ch, patch, stride=patch),
            ChannelNorm(stem_ch),
        )
        block_cls = StandardBlock if spec.block_kind == "standard_ds" else GatedBlock
        self.downsamples = nn.ModuleList()
        self.stages = nn.ModuleList()
        prev = stem_ch
        for nb, ch, k in spec.stages:
            if len(self.stages) == 0:
                self.downsamples.append(nn.Identity())
            else:
                self.downsamples.append(
                    nn.Sequential(ChannelNorm(prev), nn.Conv2d(prev, ch, 2, stride=2))
                )
            self.stages.append(nn.Sequential(*[block_cls(ch, k) for _ in range(nb)]))
            prev = ch
        self.head_norm = nn.LayerNorm(prev, eps=1e-6)
        self.head = nn.Linear(prev, spec.num_classes)

    def forward(self, x):
        x = self.stem(x)
        for down, stage in zip(self.downsamples, self.stages):
            x = down(x)
            x = stage(x)
        x = x.mean((2, 3))
        return self.head(self.head_norm(x))


# -- handle and construction ---------------------------------------------------


@dataclass(frozen=True)
class LayerEntry:
    """One depthwise or pointwise layer in canonical order."""

    layer_id: int
    kind: str  # "depthwise" | "pointwise"
    stage: int
    block: int
    weight_name: str
    bias_name: str
    shape: tuple  # (C, kh, kw) for depthwise, (C_out, C_in) for pointwise


@dataclass
class ModelHandle:
    """A built model plus its canonical layer index.

    The handle owns the underlying module; treat it as confined to a single
    training run at a time.
    """

    spec: ArchSpec
    seed: int
    module: DsNet
    layer_index: list

    @property
    def parameters(self) -> dict:
        return dict(self.module.named_parameters())

    def param(self, name: str) -> torch.Tensor:
        return self.parameters[name]

    def depthwise_entries(self) -> list:
        return [e for e in self.layer_index if e.kind == "depthwise"]

    def pointwise_entries(self) -> list:
        return [e for e in self.layer_index if e.kind == "pointwise"]

    def checksum(self) -> str:
        """Order-stable digest of every parameter tensor."""
        h = hashlib.sha256()
        for name, p in sorted(self.parameters.items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _init_parameters(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, ChannelNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _build_layer_index(spec: ArchSpec) -> list:
    entries = []
    dw_id = 0
    pw_id = 0
    for si, (nb, ch, k) in enumerate(spec.stages):
        for bi in range(nb):
            prefix = f"stages.{si}.{bi}"
            entries.append(
                LayerEntry(
                    layer_id=dw_id,
                    kind="depthwise",
                    stage=si,
                    block=bi,
                    weight_name=f"{prefix}.dwconv.weight",
                    bias_name=f"{prefix}.dwconv.bias",
                    shape=(ch, k, k),
                )
            )
            dw_id += 1
            if spec.block_kind == "standard_ds":
                pw_shapes = [
                    (StandardBlock.EXPANSION * ch, ch),
                    (ch, StandardBlock.EXPANSION * ch),
                ]
            else:
                pw_shapes = [(2 * ch, ch), (ch, ch)]
            for pw_name, shape in zip(("pw_expand", "pw_project"), pw_shapes):
                entries.append(
                    LayerEntry(
                        layer_id=pw_id,
                        kind="pointwise",
                        stage=si,
                        block=bi,
                        weight_name=f"{prefix}.{pw_name}.weight",
                        bias_name=f"{prefix}.{pw_name}.bias",
                        shape=shape,
                    )
                )
                pw_id += 1
    return entries


def build_model(spec: ArchSpec, seed: int) -> ModelHandle:
    """Construct a model with deterministic, seed-reproducible parameters.

    Two calls with identical (spec, seed) yield bit-identical parameter
    maps.
    """
    spec.validate()
    module = DsNet(spec)
    _init_parameters(module, seed)
    index = _build_layer_index(spec)
    params = dict(module.named_parameters())
    for e in index:
        if e.weight_name not in params:
            raise InvalidSpecError(f"internal: layer index names missing param {e.weight_name}")
        want = tuple(params[e.weight_name].shape)
        have = e.shape if e.kind == "pointwise" else (e.shape[0], 1, e.shape[1], e.shape[2])
        if want != have:
            raise InvalidSpecError(
                f"internal: {e.weight_name} shape {want} != index shape {have}"
            )
    return ModelHandle(spec=spec, seed=seed, module=module, layer_index=index)


def depthwise_layers(model: ModelHandle) -> list:
    """Canonical (layer_id, channels, kernel_size) list."""
    return [(e.layer_id, e.shape[0], e.shape[1]) for e in model.depthwise_entries()]


def pointwise_layers(model: ModelHandle) -> list:
    """Canonical (layer_id, in_channels, out_channels) list."""
    return [(e.layer_id, e.shape[1], e.shape[0]) for e in model.pointwise_entries()]


def filter_inventory(spec: ArchSpec):
    """Total per-channel depthwise kernel count and the per-layer breakdown."""
    spec.validate()
    per_layer = []
    lid = 0
    for nb, ch, k in spec.stages:
        for _ in range(nb):
            per_layer.append((lid, ch, k))
            lid += 1
    return sum(ch for _, ch, _ in per_layer), per_layer


def rebuild_head(handle: ModelHandle, num_classes: int):
    """Replace the classifier head for a new class count, deterministically.

    The init generator is derived from (model seed, class count) so the
    operation is reproducible without disturbing other parameters.
    """
    if handle.spec.num_classes == num_classes:
        return handle
    in_features = handle.module.head.in_features
    head = nn.Linear(in_features, num_classes)
    gen = torch.Generator().manual_seed(
        (handle.seed * 1000003 + num_classes) & 0x7FFFFFFFFFFFFFFF
    )
    nn.init.trunc_normal_(head.weight, std=0.02, generator=gen)
    nn.init.zeros_(head.bias)
    handle.module.head = head
    handle.spec = handle.spec.with_classes(num_classes)
    handle.module.spec = handle.spec
    return handle
