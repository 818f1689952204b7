"""End-to-end experiment protocols: selffer baselines, depth curves,
transfer matrices, ablations, and cross-architecture transfers.

Every run is fingerprinted by its full configuration (architecture, model
seed, dataset identity, training config, transfer plan, source provenance,
replicate index). Before training, the orchestrator looks the fingerprint
up in the result store; completed runs are never re-trained, which makes
every protocol resumable and makes shared runs (e.g. one scratch baseline
feeding several protocols) train exactly once.

Profiles bundle the uniform training recipe with the desk-scale data
budget: "full" trains on complete datasets, "smoke" is the reduced CI
profile (10 epochs on a stratified 8k-image subsample), "tiny" is for
pipeline tests only.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import datahub, surgery, trainer
from .archzoo import ARCH_BUILTINS, ArchSpec, build_model
from .datahub import DatasetHandle
from .errors import DuplicateRunError, UnknownDatasetError
from .reportkit import ResultStore
from .surgery import FilterBank, TransferPlan
from .trainer import RunRecord, TrainConfig, run_fingerprint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Profile:
    name: str
    config: TrainConfig
    train_subsample: int | None = None
    eval_subset: int | None = None


PROFILES = {
    "full": Profile("full", trainer.TRAIN_PROFILES["full"]),
    "smoke": Profile("smoke", trainer.TRAIN_PROFILES["smoke"], train_subsample=8000, eval_subset=2500),
    "tiny": Profile("tiny", trainer.TRAIN_PROFILES["tiny"], train_subsample=512, eval_subset=256),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one protocol invocation."""

    kind: str  # selffer | anb | reverse_anb | matrix | ablation | cross_arch | cross_domain_arch
    target: tuple  # (arch, dataset)
    source: tuple | None = None  # (arch, dataset)
    depths: tuple = ()
    transfer_kind: str = "depthwise"
    datasets: tuple = ()  # matrix only
    replicates: int = 1
    profile: str = "smoke"

    KINDS = (
        "selffer", "anb", "reverse_anb", "matrix",
        "ablation", "cross_arch", "cross_domain_arch",
    )

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.kind in ("anb", "reverse_anb") and not self.depths:
            raise ValueError(f"{self.kind} needs a nonempty depths list")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.transfer_kind not in ("depthwise", "pointwise"):
            raise ValueError(f"unknown transfer kind {self.transfer_kind!r}")

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        d = json.loads(Path(path).read_text())
        return cls(
            kind=d["kind"],
            target=(d["target"]["arch"], d["target"]["dataset"]),
            source=(d["source"]["arch"], d["source"]["dataset"]) if d.get("source") else None,
            depths=tuple(d.get("depths", ())),
            transfer_kind=d.get("transfer_kind", "depthwise"),
            datasets=tuple(d.get("datasets", ())),
            replicates=int(d.get("replicates", 1)),
            profile=d.get("profile", "smoke"),
        )


def resolve_arch(name: str) -> ArchSpec:
    if name in ARCH_BUILTINS:
        return ARCH_BUILTINS[name]()
    path = Path("configs/arch") / f"{name}.json"
    if path.exists():
        return ArchSpec.load(path)
    raise UnknownDatasetError(f"unknown architecture {name!r}")


class Orchestrator:
    """Shared machinery: dataset resolution, run dedup, bank extraction."""

    def __init__(self, store: ResultStore, data_root="data", profile="smoke"):
        self.store = store
        self.data_root = data_root
        self.profile = PROFILES[profile] if isinstance(profile, str) else profile
        self._datasets: dict[str, DatasetHandle] = {}
        self._banks: dict[tuple, FilterBank] = {}

    # -- data ------------------------------------------------------------

    def dataset(self, name: str) -> DatasetHandle:
        """Resolve "cifar100/natural"-style names and apply the profile's
        training subsample."""
        if name in self._datasets:
            return self._datasets[name]
        if "/" in name:
            base, label = name.split("/", 1)
            a, b = datahub.semantic_split(base, self.data_root)
            handle = {h.name.split("/", 1)[1]: h for h in (a, b)}.get(label)
            if handle is None:
                raise UnknownDatasetError(
                    f"split of {base!r} has no partition {label!r}"
                )
        else:
            handle = datahub.load_dataset(name, self.data_root)
        if self.profile.train_subsample:
            handle = datahub.subsample(handle, self.profile.train_subsample, seed=0)
        self._datasets[name] = handle
        return handle

    # -- runs ------------------------------------------------------------

    def config_for(self, replicate: int) -> TrainConfig:
        cfg = self.profile.config
        if replicate == 0:
            return cfg
        return dataclasses.replace(cfg, seed=cfg.seed + replicate)

    def run_or_load(
        self,
        arch: ArchSpec,
        dataset_name: str,
        plan_summary: dict | None,
        tag: str,
        transplant_thunk=None,
        baseline: RunRecord | None = None,
        replicate: int = 0,
    ) -> RunRecord:
        """Return the stored record for this configuration, training it if
        (and only if) it is not in the store yet."""
        data = self.dataset(dataset_name)
        spec = arch.with_classes(data.num_classes)
        model_seed = replicate
        config = self.config_for(replicate)
        digest = run_fingerprint(spec, model_seed, data.name, config, plan_summary, replicate)
        record = self.store.find(digest)
        if record is not None:
            return record

        handle = build_model(spec, model_seed)
        mask = None
        if transplant_thunk is not None:
            handle, mask = transplant_thunk(handle)
        run_id = "r" + digest[:16]
        log.info("training %s (%s)", run_id, tag)
        record = trainer.train(
            handle,
            data,
            config,
            mask,
            eval_subset=self.profile.eval_subset,
            run_dir=self.store.run_dir(run_id),
            tag=tag,
            plan_summary=plan_summary,
            baseline=baseline,
            replicate=replicate,
        )
        assert record.config_digest == digest, "fingerprint drift between orchestrator and trainer"
        try:
            self.store.append_run(record)
        except DuplicateRunError:
            # a concurrent worker beat us to it; theirs is authoritative
            record = self.store.find(digest)
        return record

    def base_run(self, arch: ArchSpec, dataset_name: str, tag: str, replicate: int = 0) -> RunRecord:
        """Scratch training run (no transplant); plan_summary is None."""
        return self.run_or_load(arch, dataset_name, None, tag, replicate=replicate)

    def trained_model(self, record: RunRecord):
        """Materialize the model of a completed run, retraining only if the
        checkpoint file was pruned from the store."""
        ckpt = self.store.checkpoint_path(record)
        if ckpt is not None:
            return trainer.load_checkpoint(ckpt)
        log.warning("checkpoint for %s missing; retraining deterministically", record.run_id)
        data = self.dataset(record.dataset.split("#")[0])
        spec = ArchSpec.from_config(record.arch_config)
        handle = build_model(spec, record.model_seed)
        config = TrainConfig.from_dict(record.train_config)
        fresh = trainer.train(
            handle, data, config, None,
            eval_subset=self.profile.eval_subset,
            run_dir=self.store.run_dir(record.run_id),
            tag=record.tag, plan_summary=record.plan_summary,
            replicate=record.replicate,
        )
        assert fresh.config_digest == record.config_digest
        return handle

    def bank_for(self, arch: ArchSpec, dataset_name: str, tag: str, kind: str = "depthwise",
                 replicate: int = 0) -> tuple[FilterBank, RunRecord]:
        """Depthwise or pointwise bank extracted from the trained base model.

        Extraction happens only after the base run is complete.
        """
        key = (arch.name, dataset_name, kind, replicate)
        base = self.base_run(arch, dataset_name, tag, replicate=replicate)
        if key in self._banks:
            return self._banks[key], base
        model = self.trained_model(base)
        extract = surgery.extract_depthwise if kind == "depthwise" else surgery.extract_pointwise
        bank = extract(model, dataset_name=dataset_name, run_id=base.run_id)
        self._banks[key] = bank
        return bank, base


def _transplant_thunk(bank: FilterBank, plan: TransferPlan):
    def thunk(handle):
        return surgery.transplant(handle, bank, plan)

    return thunk


def _plan_summary(plan: TransferPlan, role: str, source_dataset: str, **extra) -> dict:
    d = plan.summary()
    d["role"] = role
    d["source_dataset"] = source_dataset
    d.update(extra)
    return d


# -- protocols ----------------------------------------------------------------------


def selffer_baseline(orch: Orchestrator, arch_name: str, dataset: str,
                     transfer_kind: str = "depthwise", replicate: int = 0):
    """Scratch baseline plus the self-transferred (frozen) control.

    transfer_kind picks which filters are self-transferred and frozen:
    depthwise (the usual control) or pointwise (the degradation probe).
    """
    arch = resolve_arch(arch_name)
    tag = f"selffer:{transfer_kind}:{arch_name}:{dataset}:{orch.profile.name}"
    bank, base = orch.bank_for(arch, dataset, tag, kind=transfer_kind, replicate=replicate)
    mode = "layerwise" if transfer_kind == "depthwise" else "pointwise_layerwise"
    plan = TransferPlan(mode=mode, source_bank_ref=bank.provenance.key())
    selffer = orch.run_or_load(
        arch,
        dataset,
        _plan_summary(plan, "selffer", dataset, transfer_kind=transfer_kind),
        tag,
        transplant_thunk=_transplant_thunk(bank, plan),
        baseline=base,
        replicate=replicate,
    )
    return base, selffer


def anb_curve(orch: Orchestrator, source: tuple, target_dataset: str, depths, replicate: int = 0):
    """Transfer the first n depthwise layers from the source model, freeze,
    train the rest on the target; paired with same-depth self-transfer
    controls and the target's scratch baseline."""
    src_arch_name, src_dataset = source
    arch = resolve_arch(src_arch_name)
    tag = f"anb:{src_arch_name}:{src_dataset}->{target_dataset}:{orch.profile.name}"
    src_bank, _ = orch.bank_for(arch, src_dataset, tag, replicate=replicate)
    tgt_bank, tgt_base = orch.bank_for(arch, target_dataset, tag, replicate=replicate)
    records = {"base": tgt_base, "transfer": [], "control": []}
    for n in depths:
        for role, bank in (("transfer", src_bank), ("control", tgt_bank)):
            plan = TransferPlan(
                mode="layerwise", depth_n=n, source_bank_ref=bank.provenance.key()
            )
            rec = orch.run_or_load(
                arch,
                target_dataset,
                _plan_summary(plan, role, src_dataset if role == "transfer" else target_dataset),
                tag,
                transplant_thunk=_transplant_thunk(bank, plan),
                baseline=tgt_base,
                replicate=replicate,
            )
            records[role].append(rec)
    return records


def reverse_anb_curve(orch: Orchestrator, source: tuple, target_dataset: str, depths,
                      replicate: int = 0):
    """Freeze transferred depthwise layers from index n to the end while the
    earlier layers train. Records are emitted for plotting; no monotonicity
    is asserted."""
    src_arch_name, src_dataset = source
    arch = resolve_arch(src_arch_name)
    total = arch.total_depthwise_layers
    tag = f"reverse:{src_arch_name}:{src_dataset}->{target_dataset}:{orch.profile.name}"
    src_bank, _ = orch.bank_for(arch, src_dataset, tag, replicate=replicate)
    tgt_bank, tgt_base = orch.bank_for(arch, target_dataset, tag, replicate=replicate)
    records = {"base": tgt_base, "transfer": [], "control": []}
    for n in depths:
        if not 0 <= n <= total:
            raise ValueError(f"reverse depth {n} outside [0, {total}]")
        for role, bank in (("transfer", src_bank), ("control", tgt_bank)):
            plan = TransferPlan(
                mode="layerwise",
                start_n=n,
                depth_n=total - n,
                source_bank_ref=bank.provenance.key(),
            )
            rec = orch.run_or_load(
                arch,
                target_dataset,
                _plan_summary(
                    plan, role, src_dataset if role == "transfer" else target_dataset,
                    depth_n=n, reverse=True,
                ),
                tag,
                transplant_thunk=_transplant_thunk(bank, plan),
                baseline=tgt_base,
                replicate=replicate,
            )
            records[role].append(rec)
    return records


def transfer_matrix(orch: Orchestrator, datasets, arch_name: str,
                    transfer_kind: str = "depthwise", replicate: int = 0):
    """Every ordered (source, target) pair with frozen transferred filters;
    diagonal cells are selffers. Completed cells are skipped by digest."""
    if len(datasets) < 2:
        raise ValueError("transfer matrix needs at least 2 datasets")
    arch = resolve_arch(arch_name)
    tag = f"matrix:{transfer_kind}:{arch_name}:{orch.profile.name}"
    bases = {}
    banks = {}
    for ds in datasets:
        banks[ds], bases[ds] = orch.bank_for(
            arch, ds, tag, kind=transfer_kind, replicate=replicate
        )
    mode = "layerwise" if transfer_kind == "depthwise" else "pointwise_layerwise"
    cells = {}
    # diagonal first: selffer cells baseline against the original run
    for ds in datasets:
        plan = TransferPlan(mode=mode, source_bank_ref=banks[ds].provenance.key())
        cells[(ds, ds)] = orch.run_or_load(
            arch,
            ds,
            _plan_summary(plan, "cell", ds, transfer_kind=transfer_kind),
            tag,
            transplant_thunk=_transplant_thunk(banks[ds], plan),
            baseline=bases[ds],
            replicate=replicate,
        )
    for src in datasets:
        for dst in datasets:
            if src == dst:
                continue
            plan = TransferPlan(mode=mode, source_bank_ref=banks[src].provenance.key())
            cells[(src, dst)] = orch.run_or_load(
                arch,
                dst,
                _plan_summary(plan, "cell", src, transfer_kind=transfer_kind),
                tag,
                transplant_thunk=_transplant_thunk(banks[src], plan),
                baseline=cells[(dst, dst)],
                replicate=replicate,
            )
    return {"bases": bases, "cells": cells, "tag": tag}


def cross_arch_transfer(orch: Orchestrator, source: tuple, target: tuple, replicate: int = 0):
    """Stack-mode transfer: flatten the source model's depthwise kernels and
    fill the target's layers from the front of the stack, then freeze and
    retrain. Also covers the cross-domain-and-architecture combination."""
    src_arch_name, src_dataset = source
    tgt_arch_name, tgt_dataset = target
    src_arch = resolve_arch(src_arch_name)
    tgt_arch = resolve_arch(tgt_arch_name)
    tag = f"crossarch:{src_arch_name}:{src_dataset}->{tgt_arch_name}:{tgt_dataset}:{orch.profile.name}"
    src_bank, src_base = orch.bank_for(src_arch, src_dataset, tag, replicate=replicate)
    _, tgt_selffer = selffer_baseline(orch, tgt_arch_name, tgt_dataset, replicate=replicate)
    plan = TransferPlan(mode="stack", source_bank_ref=src_bank.provenance.key())
    rec = orch.run_or_load(
        tgt_arch,
        tgt_dataset,
        _plan_summary(
            plan, "transfer", src_dataset,
            source_arch=src_arch_name, cross_arch=True,
        ),
        tag,
        transplant_thunk=_transplant_thunk(src_bank, plan),
        baseline=tgt_selffer,
        replicate=replicate,
    )
    return {"source_base": src_base, "target_selffer": tgt_selffer, "transfer": rec, "tag": tag}


ABLATION_CONDITIONS = ("transferred", "shuffle", "repeat_first_3")


def ablation_suite(orch: Orchestrator, source: tuple, target_dataset: str, replicate: int = 0):
    """Layerwise-all, globally shuffled, and repeat-first-3 transfers from
    the source model, all frozen, against the target's scratch baseline and
    selffer control."""
    src_arch_name, src_dataset = source
    arch = resolve_arch(src_arch_name)
    tag = f"ablation:{src_arch_name}:{src_dataset}->{target_dataset}:{orch.profile.name}"
    src_bank, _ = orch.bank_for(arch, src_dataset, tag, replicate=replicate)
    tgt_bank, tgt_base = orch.bank_for(arch, target_dataset, tag, replicate=replicate)

    selffer_plan = TransferPlan(mode="layerwise", source_bank_ref=tgt_bank.provenance.key())
    records = {
        "baseline": tgt_base,
        "selffer": orch.run_or_load(
            arch, target_dataset,
            _plan_summary(selffer_plan, "selffer", target_dataset, condition="selffer"),
            tag,
            transplant_thunk=_transplant_thunk(tgt_bank, selffer_plan),
            baseline=tgt_base,
            replicate=replicate,
        ),
    }
    plans = {
        "transferred": TransferPlan(mode="layerwise", source_bank_ref=src_bank.provenance.key()),
        "shuffle": TransferPlan(mode="shuffle", rng_seed=0, source_bank_ref=src_bank.provenance.key()),
        "repeat_first_3": TransferPlan(mode="repeat_first_k", k=3, source_bank_ref=src_bank.provenance.key()),
    }
    for condition, plan in plans.items():
        records[condition] = orch.run_or_load(
            arch,
            target_dataset,
            _plan_summary(plan, "transfer", src_dataset, condition=condition),
            tag,
            transplant_thunk=_transplant_thunk(src_bank, plan),
            baseline=tgt_base,
            replicate=replicate,
        )
    return records


def run_experiment(orch: Orchestrator, exp: ExperimentSpec) -> list:
    """Dispatch an experiment spec; returns every record it touched."""
    out = []
    for rep in range(exp.replicates):
        if exp.kind == "selffer":
            out.extend(selffer_baseline(orch, exp.target[0], exp.target[1], replicate=rep))
        elif exp.kind == "anb":
            recs = anb_curve(orch, exp.source, exp.target[1], exp.depths, replicate=rep)
            out.append(recs["base"])
            out.extend(recs["transfer"])
            out.extend(recs["control"])
        elif exp.kind == "reverse_anb":
            recs = reverse_anb_curve(orch, exp.source, exp.target[1], exp.depths, replicate=rep)
            out.append(recs["base"])
            out.extend(recs["transfer"])
            out.extend(recs["control"])
        elif exp.kind == "matrix":
            recs = transfer_matrix(orch, exp.datasets, exp.target[0], exp.transfer_kind, replicate=rep)
            out.extend(recs["bases"].values())
            out.extend(recs["cells"].values())
        elif exp.kind == "ablation":
            recs = ablation_suite(orch, exp.source, exp.target[1], replicate=rep)
            out.extend(recs.values())
        elif exp.kind in ("cross_arch", "cross_domain_arch"):
            recs = cross_arch_transfer(orch, exp.source, exp.target, replicate=rep)
            out.extend([recs["source_base"], recs["target_selffer"], recs["transfer"]])
    return out
