"""Training with frozen-parameter masks, evaluation, and run records.

Every run uses one uniform optimizer recipe (AdamW, cosine decay with
linear warmup, label smoothing) so transfer comparisons are never
confounded by tuning. Frozen parameters are excluded from gradient updates
AND from weight decay, and their byte digests are re-verified when the run
ends.

Runs are deterministic given (model seed, config seed, dataset identity)
on a fixed backend build; the run fingerprint digests all of that and keys
the resumability machinery.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import surgery
from .archzoo import ArchSpec, ModelHandle, build_model, rebuild_head
from .datahub import DatasetHandle, TestLoader, make_loaders
from .errors import MaskViolationError, ZeroBaselineError

log = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1

# incremented whenever an actual optimization loop starts; lets tests assert
# that resumed protocols perform zero new training
TRAIN_CALLS = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    optimizer: str = "adamw"  # adamw | sgd_momentum
    lr: float = 3e-3
    weight_decay: float = 0.05
    batch: int = 256
    warmup_epochs: int = 5
    seed: int = 0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.optimizer not in ("adamw", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# uniform recipes; "smoke" is the reduced 10-epoch CI profile
TRAIN_PROFILES = {
    "full": TrainConfig(epochs=50, warmup_epochs=5),
    "smoke": TrainConfig(epochs=10, warmup_epochs=2),
    "tiny": TrainConfig(epochs=1, warmup_epochs=0, batch=128),
}


def run_fingerprint(
    spec: ArchSpec,
    model_seed: int,
    dataset_name: str,
    config: TrainConfig,
    plan_summary: dict | None = None,
    replicate: int = 0,
) -> str:
    """Canonical digest of everything that determines a run's outcome."""
    payload = {
        "schema": RECORD_SCHEMA_VERSION,
        "arch": spec.to_config(),
        "model_seed": model_seed,
        "dataset": dataset_name,
        "train": config.to_dict(),
        "plan": plan_summary,
        "replicate": replicate,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunRecord:
    run_id: str
    arch: str
    dataset: str
    config_digest: str
    per_epoch: list  # [(epoch, train_loss or None, test_acc), ...]
    final_acc: float
    plan_summary: dict | None = None
    baseline_ref: str | None = None
    retention: float | None = None
    frozen_verified: bool = True
    status: str = "ok"  # ok | failed
    tag: str = ""
    arch_config: dict = field(default_factory=dict)
    model_seed: int = 0
    train_config: dict = field(default_factory=dict)
    replicate: int = 0
    duration_s: float = 0.0
    checkpoint: str | None = None
    created_at: str = ""
    schema_version: int = RECORD_SCHEMA_VERSION

    def __post_init__(self):
        if self.per_epoch and self.status == "ok":
            last = self.per_epoch[-1][2]
            if abs(last - self.final_acc) > 1e-12:
                raise ValueError("final_acc must equal the last per-epoch test accuracy")
        if not 0.0 <= self.final_acc <= 1.0:
            raise ValueError(f"final_acc out of range: {self.final_acc}")
        if (self.retention is None) != (self.baseline_ref is None):
            raise ValueError("retention present iff baseline_ref present")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        d["per_epoch"] = [tuple(e) for e in d["per_epoch"]]
        return cls(**d)


def retention(acc_transfer: float, acc_base: float) -> float:
    """Ratio of transferred accuracy to baseline accuracy (may exceed 1)."""
    if acc_base <= 0:
        raise ZeroBaselineError(f"baseline accuracy must be positive, got {acc_base}")
    return acc_transfer / acc_base


def _eval_indices(test_size: int, subset: int | None) -> np.ndarray | None:
    if subset is None or subset >= test_size:
        return None
    rng = np.random.default_rng([0xE7A1, subset])
    return np.sort(rng.choice(test_size, size=subset, replace=False))


@torch.no_grad()
def evaluate(model: ModelHandle, data: DatasetHandle, batch: int = 500, subset_idx=None) -> float:
    """Deterministic top-1 accuracy on the test split (no augmentation)."""
    module = model.module
    was_training = module.training
    module.eval()
    if subset_idx is not None:
        handle = dataclasses.replace(
            data, test_x=data.test_x[subset_idx], test_y=data.test_y[subset_idx]
        )
    else:
        handle = data
    correct = 0
    total = 0
    for x, y in TestLoader(handle, batch):
        pred = module(x).argmax(dim=1)
        correct += int((pred == y).sum())
        total += len(y)
    if was_training:
        module.train()
    return correct / total


def _optimizer_for(model: ModelHandle, config: TrainConfig, frozen: set):
    decay, no_decay = [], []
    for name, p in model.parameters.items():
        if name in frozen:
            p.requires_grad_(False)
            continue
        p.requires_grad_(True)
        (decay if p.ndim > 1 else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    if config.optimizer == "adamw":
        return torch.optim.AdamW(groups, lr=config.lr)
    return torch.optim.SGD(groups, lr=config.lr, momentum=0.9)


def _lr_at(step: int, total: int, warmup: int, lr: float) -> float:
    if warmup > 0 and step < warmup:
        return lr * (step + 1) / warmup
    if total <= warmup:
        return lr
    t = (step - warmup) / (total - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train(
    model: ModelHandle,
    data: DatasetHandle,
    config: TrainConfig,
    mask: surgery.FreezeMask | None = None,
    *,
    eval_subset: int | None = None,
    run_dir=None,
    tag: str = "",
    plan_summary: dict | None = None,
    baseline: RunRecord | None = None,
    replicate: int = 0,
) -> RunRecord:
    """Train (honoring the freeze mask) and return the run's record.

    Per-epoch test accuracy may be computed on a fixed seeded subset of the
    test split (eval_subset) to keep long suites cheap; the final epoch and
    final_acc always use the full test split. Divergent (non-finite loss)
    runs are recorded with status "failed" and never retried.
    """
    global TRAIN_CALLS
    TRAIN_CALLS += 1

    if model.spec.num_classes != data.num_classes:
        rebuild_head(model, data.num_classes)
    frozen = set(mask.frozen_param_names) if mask is not None else set()
    for name in frozen:
        if name not in model.parameters:
            raise MaskViolationError(f"mask names unknown parameter {name!r}")

    digest = run_fingerprint(model.spec, model.seed, data.name, config, plan_summary, replicate)
    run_id = "r" + digest[:16]
    torch.manual_seed(config.seed)
    module = model.module
    module.train()
    opt = _optimizer_for(model, config, frozen)
    loss_fn = nn.CrossEntropyLoss(label_smoothing=config.label_smoothing)
    train_loader, _ = make_loaders(data, config.batch, augment="standard", seed=config.seed)
    steps_per_epoch = len(train_loader)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs
    sub_idx = _eval_indices(data.test_size, eval_subset)

    t0 = time.time()
    per_epoch = []
    status = "ok"
    step = 0
    for epoch in range(config.epochs):
        losses = []
        diverged = False
        for x, y in train_loader.epoch_batches(epoch):
            lr = _lr_at(step, total_steps, warmup_steps, config.lr)
            for g in opt.param_groups:
                g["lr"] = lr
            logits = module(x)
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        if diverged:
            status = "failed"
            acc = evaluate(model, data)
            per_epoch.append((epoch, None, acc))
            log.warning("%s: non-finite loss at epoch %d, run recorded as failed", run_id, epoch)
            break
        last_epoch = epoch == config.epochs - 1
        acc = evaluate(model, data, subset_idx=None if last_epoch else sub_idx)
        per_epoch.append((epoch, float(np.mean(losses)) if losses else None, acc))
        log.info("%s epoch %d: loss %.4f acc %.4f", run_id or tag, epoch,
                 per_epoch[-1][1] or float("nan"), acc)

    final_acc = per_epoch[-1][2]
    frozen_verified = True
    if mask is not None and not mask.is_empty():
        report = surgery.verify_frozen(mask, model)
        frozen_verified = report.passed
        if not report.passed:
            raise MaskViolationError(
                f"frozen parameters changed during training: {report.failures()}"
            )

    checkpoint_rel = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, run_dir / "checkpoint.npz", run_id=run_id, dataset=data.name)
        checkpoint_rel = str(Path(run_dir.name) / "checkpoint.npz")

    ret = None
    if baseline is not None:
        ret = retention(final_acc, baseline.final_acc)

    return RunRecord(
        run_id=run_id,
        arch=model.spec.name,
        dataset=data.name,
        config_digest=digest,
        per_epoch=per_epoch,
        final_acc=final_acc,
        plan_summary=plan_summary,
        baseline_ref=baseline.run_id if baseline is not None else None,
        retention=ret,
        frozen_verified=frozen_verified,
        status=status,
        tag=tag,
        arch_config=model.spec.to_config(),
        model_seed=model.seed,
        train_config=config.to_dict(),
        replicate=replicate,
        duration_s=time.time() - t0,
        checkpoint=checkpoint_rel,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path, run_id: str = "", dataset: str = ""):
    """Parameter archive + spec + seed, as a single npz file."""
    arrays = {}
    for name, p in model.parameters.items():
        arrays[name] = p.detach().cpu().numpy()
    meta = {
        "arch_config": model.spec.to_config(),
        "model_seed": model.seed,
        "run_id": run_id,
        "dataset": dataset,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> ModelHandle:
    """Rebuild the model from its spec and seed, then restore parameters."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode("utf-8"))
        spec = ArchSpec.from_config(meta["arch_config"])
        handle = build_model(spec, meta["model_seed"])
        with torch.no_grad():
            for name, p in handle.parameters.items():
                p.copy_(torch.from_numpy(np.ascontiguousarray(z[name])))
    return handle
