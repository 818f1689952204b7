"""Filter extraction, transfer planning, transplant, and freeze verification.

A FilterBank is an immutable snapshot of a model's depthwise (or pointwise)
weights with provenance. Transplant copies bank values into a target model
according to a TransferPlan and returns a FreezeMask recording exactly which
parameters were filled and their byte-level digests.

Depthwise bias terms travel and freeze together with their kernels;
normalization parameters never travel.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .archzoo import ModelHandle
from .errors import (
    DigestMismatchError,
    HeterogeneousKernelSizeError,
    InsufficientStackError,
    KernelSizeMismatchError,
    ShapeMismatchError,
    UnknownParameterError,
)

BANK_SCHEMA_VERSION = 1
_META_KEY = "__meta__"

ALL = None  # depth_n sentinel: fill every target layer


def tensor_digest(arr) -> str:
    """sha256 of dtype, shape, and raw little-endian bytes."""
    a = np.ascontiguousarray(arr.detach().cpu().numpy() if torch.is_tensor(arr) else arr)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Provenance:
    arch_name: str
    dataset_name: str
    run_id: str
    extraction_time: str

    def key(self) -> str:
        return f"{self.arch_name}|{self.dataset_name}|{self.run_id}"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class BankEntry:
    layer_id: int
    kernels: np.ndarray  # depthwise: (C, kh, kw); pointwise: (C_out, C_in)
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class FilterBank:
    entries: tuple
    kind: str  # "depthwise" | "pointwise"
    provenance: Provenance

    def __post_init__(self):
        ids = [e.layer_id for e in self.entries]
        if ids != sorted(ids):
            raise ShapeMismatchError("bank entries must be ordered by layer_id")
        if not (
            self.provenance.arch_name
            and self.provenance.dataset_name
            and self.provenance.run_id
        ):
            raise ShapeMismatchError("bank provenance fields must be nonempty")

    def entry(self, layer_id: int) -> BankEntry:
        for e in self.entries:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)

    def total_kernels(self) -> int:
        return sum(e.kernels.shape[0] for e in self.entries)


@dataclass(frozen=True)
class FlatStack:
    kernels: np.ndarray  # (M, kh, kw)
    biases: np.ndarray | None  # (M,)
    boundaries: tuple  # ((layer_id, start, count), ...)

    def source_of(self, index: int) -> tuple[int, int]:
        """Map a flat index back to (layer_id, channel)."""
        for layer_id, start, count in self.boundaries:
            if start <= index < start + count:
                return layer_id, index - start
        raise IndexError(index)


@dataclass(frozen=True)
class TransferPlan:
    """Recipe for which filters go where and what gets frozen."""

    mode: str  # layerwise | stack | shuffle | repeat_first_k | pointwise_layerwise
    depth_n: int | None = ALL  # leading target layers to fill; None = all
    k: int = 3  # repeat_first_k only
    freeze: bool = True
    rng_seed: int | None = None  # shuffle only
    source_bank_ref: str = ""
    start_n: int = 0  # first target layer to fill (reverse protocols)
    resize: bool = False  # bilinear kernel resize on size mismatch; marks the run

    MODES = ("layerwise", "stack", "shuffle", "repeat_first_k", "pointwise_layerwise")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ShapeMismatchError(f"unknown transfer mode {self.mode!r}")
        if self.mode == "repeat_first_k" and self.k < 1:
            raise ShapeMismatchError(f"repeat_first_k needs k >= 1, got {self.k}")
        if (self.rng_seed is not None) != (self.mode == "shuffle"):
            raise ShapeMismatchError("rng_seed must be present iff mode is shuffle")
        if self.depth_n is not None and self.depth_n < 0:
            raise ShapeMismatchError(f"depth_n must be >= 0, got {self.depth_n}")
        if self.start_n < 0:
            raise ShapeMismatchError(f"start_n must be >= 0, got {self.start_n}")

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "depth_n": self.depth_n,
            "k": self.k if self.mode == "repeat_first_k" else None,
            "freeze": self.freeze,
            "rng_seed": self.rng_seed,
            "source": self.source_bank_ref,
            "start_n": self.start_n,
            "resize": self.resize,
        }


@dataclass
class FreezeMask:
    """Parameters excluded from all updates, with transplant-time digests.

    provenance_map records (target_layer, target_channel) ->
    (source_layer, source_channel) for every filled per-channel kernel,
    regardless of whether freezing was requested.
    """

    frozen_param_names: set = field(default_factory=set)
    checksum_before: dict = field(default_factory=dict)
    provenance_map: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.frozen_param_names


@dataclass
class FrozenReport:
    results: list  # (param_name, digest_equal)
    passed: bool

    def failures(self):
        return [name for name, ok in self.results if not ok]


# -- extraction ----------------------------------------------------------------


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def extract_depthwise(model: ModelHandle, dataset_name="untrained", run_id="local") -> FilterBank:
    """Snapshot every depthwise kernel (and bias) in canonical order."""
    entries = []
    for e in model.depthwise_entries():
        w = model.param(e.weight_name).detach().cpu().numpy()
        k = np.ascontiguousarray(w[:, 0, :, :]).copy()
        b = model.param(e.bias_name).detach().cpu().numpy().copy()
        entries.append(BankEntry(layer_id=e.layer_id, kernels=k, bias=b))
    return FilterBank(
        entries=tuple(entries),
        kind="depthwise",
        provenance=Provenance(model.spec.name, dataset_name, run_id, _now()),
    )


def extract_pointwise(model: ModelHandle, dataset_name="untrained", run_id="local") -> FilterBank:
    """Snapshot every pointwise channel-mixing matrix (and bias)."""
    entries = []
    for e in model.pointwise_entries():
        w = model.param(e.weight_name).detach().cpu().numpy().copy()
        b = model.param(e.bias_name).detach().cpu().numpy().copy()
        entries.append(BankEntry(layer_id=e.layer_id, kernels=w, bias=b))
    return FilterBank(
        entries=tuple(entries),
        kind="pointwise",
        provenance=Provenance(model.spec.name, dataset_name, run_id, _now()),
    )


def flatten_stack(bank: FilterBank) -> FlatStack:
    """Concatenate per-channel kernels in layer order, channel order within."""
    if bank.kind != "depthwise":
        raise ShapeMismatchError("only depthwise banks can be flattened into a stack")
    sizes = {e.kernels.shape[1:] for e in bank.entries}
    if len(sizes) > 1:
        raise HeterogeneousKernelSizeError(
            f"bank mixes kernel sizes {sorted(sizes)}; resize or reject"
        )
    kernels = np.concatenate([e.kernels for e in bank.entries], axis=0)
    biases = None
    if all(e.bias is not None for e in bank.entries):
        biases = np.concatenate([e.bias for e in bank.entries], axis=0)
    boundaries = []
    start = 0
    for e in bank.entries:
        boundaries.append((e.layer_id, start, e.kernels.shape[0]))
        start += e.kernels.shape[0]
    return FlatStack(kernels=kernels, biases=biases, boundaries=tuple(boundaries))


# -- transplant ------------------------------------------------------------------


def _resize_kernels(kernels: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(kernels).unsqueeze(1)
    out = torch.nn.functional.interpolate(
        t, size=(size, size), mode="bilinear", align_corners=True
    )
    return out.squeeze(1).numpy()


def _check_kernel_size(src_k: int, dst_k: int, plan: TransferPlan, where: str):
    if src_k == dst_k:
        return False
    if plan.resize:
        return True
    raise KernelSizeMismatchError(
        f"{where}: source kernel {src_k}x{src_k} != target {dst_k}x{dst_k} "
        "(resize disabled)"
    )


def _fill_range(model: ModelHandle, plan: TransferPlan):
    entries = model.depthwise_entries()
    if plan.mode == "pointwise_layerwise":
        entries = model.pointwise_entries()
    start = plan.start_n
    depth = len(entries) - start if plan.depth_n is None else plan.depth_n
    if start + depth > len(entries):
        raise ShapeMismatchError(
            f"plan fills layers [{start}, {start + depth}) but target has "
            f"only {len(entries)} {entries[0].kind if entries else ''} layers"
        )
    return entries[start : start + depth]


@torch.no_grad()
def transplant(target: ModelHandle, bank: FilterBank, plan: TransferPlan):
    """Copy bank values into the target model per the plan.

    Returns (target, mask). The target is mutated in place; mask records the
    frozen parameter set (empty when plan.freeze is false), transplant-time
    digests of every filled parameter, and the per-kernel provenance map.
    """
    if plan.mode == "pointwise_layerwise":
        if bank.kind != "pointwise":
            raise ShapeMismatchError("pointwise_layerwise plan needs a pointwise bank")
    elif bank.kind != "depthwise":
        raise ShapeMismatchError(f"mode {plan.mode} needs a depthwise bank")

    fill = _fill_range(target, plan)
    mask = FreezeMask()
    filled_names = []

    if plan.mode in ("layerwise", "pointwise_layerwise"):
        for e in fill:
            try:
                src = bank.entry(e.layer_id)
            except KeyError:
                raise ShapeMismatchError(
                    f"source bank has no entry for layer {e.layer_id}"
                ) from None
            _copy_layerwise(target, e, src, plan, mask)
            filled_names.append(e)
    elif plan.mode == "stack":
        flat = flatten_stack(bank)
        _fill_from_flat(target, fill, flat, order=None, plan=plan, mask=mask)
        filled_names.extend(fill)
    elif plan.mode == "shuffle":
        flat = flatten_stack(bank)
        order = np.random.default_rng(plan.rng_seed).permutation(flat.kernels.shape[0])
        _fill_from_flat(target, fill, flat, order=order, plan=plan, mask=mask)
        filled_names.extend(fill)
    elif plan.mode == "repeat_first_k":
        sub = FilterBank(
            entries=tuple(e for e in bank.entries if e.layer_id < plan.k),
            kind="depthwise",
            provenance=bank.provenance,
        )
        if not sub.entries:
            raise ShapeMismatchError(f"source bank has no layers below k={plan.k}")
        flat = flatten_stack(sub)
        _fill_from_flat(target, fill, flat, order=None, plan=plan, mask=mask, cycle=True)
        filled_names.extend(fill)

    if plan.freeze:
        for e in filled_names:
            mask.frozen_param_names.add(e.weight_name)
            mask.frozen_param_names.add(e.bias_name)
    for e in filled_names:
        mask.checksum_before[e.weight_name] = tensor_digest(target.param(e.weight_name))
        mask.checksum_before[e.bias_name] = tensor_digest(target.param(e.bias_name))
    return target, mask


def _copy_layerwise(target, entry, src: BankEntry, plan, mask):
    dst_w = target.param(entry.weight_name)
    if entry.kind == "depthwise":
        kernels = src.kernels
        if kernels.shape[0] != entry.shape[0]:
            raise ShapeMismatchError(
                f"layer {entry.layer_id}: source has {kernels.shape[0]} channels, "
                f"target has {entry.shape[0]}"
            )
        if _check_kernel_size(kernels.shape[1], entry.shape[1], plan,
                              f"layer {entry.layer_id}"):
            kernels = _resize_kernels(kernels, entry.shape[1])
        dst_w.copy_(torch.from_numpy(np.ascontiguousarray(kernels)).unsqueeze(1))
        for c in range(kernels.shape[0]):
            mask.provenance_map[(entry.layer_id, c)] = (src.layer_id, c)
    else:
        if tuple(src.kernels.shape) != tuple(entry.shape):
            raise ShapeMismatchError(
                f"pointwise layer {entry.layer_id}: source shape "
                f"{tuple(src.kernels.shape)} != target {tuple(entry.shape)}"
            )
        dst_w.copy_(torch.from_numpy(np.ascontiguousarray(src.kernels)))
        mask.provenance_map[(entry.layer_id, -1)] = (src.layer_id, -1)
    if src.bias is not None:
        dst_b = target.param(entry.bias_name)
        if tuple(src.bias.shape) != tuple(dst_b.shape):
            raise ShapeMismatchError(
                f"layer {entry.layer_id}: bias shape {src.bias.shape} != "
                f"{tuple(dst_b.shape)}"
            )
        dst_b.copy_(torch.from_numpy(np.ascontiguousarray(src.bias)))


def _fill_from_flat(target, fill, flat: FlatStack, order, plan, mask, cycle=False):
    demand = sum(e.shape[0] for e in fill)
    supply = flat.kernels.shape[0]
    if not cycle and supply < demand:
        raise InsufficientStackError(supply=supply, demand=demand)
    pos = 0
    for e in fill:
        c, ksize = e.shape[0], e.shape[1]
        idx = np.arange(pos, pos + c)
        if cycle:
            idx = idx % supply
        if order is not None:
            idx = order[idx]
        kernels = flat.kernels[idx]
        if _check_kernel_size(kernels.shape[1], ksize, plan, f"layer {e.layer_id}"):
            kernels = _resize_kernels(kernels, ksize)
        target.param(e.weight_name).copy_(
            torch.from_numpy(np.ascontiguousarray(kernels)).unsqueeze(1)
        )
        if flat.biases is not None:
            target.param(e.bias_name).copy_(
                torch.from_numpy(np.ascontiguousarray(flat.biases[idx]))
            )
        for ci, fi in enumerate(idx):
            mask.provenance_map[(e.layer_id, ci)] = flat.source_of(int(fi))
        pos += c


def verify_frozen(mask: FreezeMask, model: ModelHandle) -> FrozenReport:
    """Per-parameter digest comparison against the transplant-time snapshot."""
    params = model.parameters
    results = []
    for name in sorted(mask.frozen_param_names):
        if name not in params:
            raise UnknownParameterError(f"mask names unknown parameter {name!r}")
        ok = tensor_digest(params[name]) == mask.checksum_before[name]
        results.append((name, ok))
    return FrozenReport(results=results, passed=all(ok for _, ok in results))


# -- bank file format ------------------------------------------------------------


def save_bank(bank: FilterBank, path):
    """Single-file npz archive: one array per layer plus a JSON metadata blob."""
    arrays = {}
    meta = {
        "schema_version": BANK_SCHEMA_VERSION,
        "kind": bank.kind,
        "provenance": bank.provenance.to_dict(),
        "layers": [],
        "digests": {},
    }
    for e in bank.entries:
        key = f"{e.layer_id:04d}"
        arrays[key] = e.kernels
        meta["layers"].append(
            {"layer_id": e.layer_id, "shape": list(e.kernels.shape), "has_bias": e.bias is not None}
        )
        meta["digests"][key] = tensor_digest(e.kernels)
        if e.bias is not None:
            arrays[key + "__bias"] = e.bias
            meta["digests"][key + "__bias"] = tensor_digest(e.bias)
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_bank(path) -> FilterBank:
    with np.load(path) as z:
        if _META_KEY not in z:
            raise DigestMismatchError(f"{path}: not a filter bank archive (no metadata)")
        meta = json.loads(bytes(z[_META_KEY].tobytes()).decode("utf-8"))
        entries = []
        for layer in meta["layers"]:
            key = f"{layer['layer_id']:04d}"
            kernels = z[key]
            if tensor_digest(kernels) != meta["digests"][key]:
                raise DigestMismatchError(f"{path}: array {key} digest mismatch")
            bias = None
            if layer.get("has_bias"):
                bias = z[key + "__bias"]
                if tensor_digest(bias) != meta["digests"][key + "__bias"]:
                    raise DigestMismatchError(f"{path}: array {key}__bias digest mismatch")
            entries.append(BankEntry(layer_id=layer["layer_id"], kernels=kernels, bias=bias))
    return FilterBank(
        entries=tuple(entries),
        kind=meta["kind"],
        provenance=Provenance.from_dict(meta["provenance"]),
    )
