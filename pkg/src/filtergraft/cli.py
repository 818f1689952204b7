"""Command-line harness.

    filtergraft data fetch cifar10
    filtergraft data split cifar100
    filtergraft verify-backend --cases 100
    filtergraft extract --checkpoint runs/<id>/checkpoint.npz --kind depthwise --out bank.fgb
    filtergraft run anb --spec configs/experiments/anb_cifar100.json
    filtergraft report matrix --store runs --tag "matrix:depthwise:mini_convnext:smoke" --out out
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch


def _add_common(p):
    p.add_argument("--store", default="runs", help="result store directory")
    p.add_argument("--root", default="data", help="dataset cache root")


def build_parser():
    ap = argparse.ArgumentParser(prog="filtergraft")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset cache management")
    sub_data = p_data.add_subparsers(dest="data_command", required=True)
    p_fetch = sub_data.add_parser("fetch", help="download and cache a dataset")
    p_fetch.add_argument("name")
    p_fetch.add_argument("--root", default="data")
    p_split = sub_data.add_parser("split", help="show the semantic split of a dataset")
    p_split.add_argument("name")
    p_split.add_argument("--root", default="data")

    p_vb = sub.add_parser("verify-backend", help="backend vs reference convolution check")
    p_vb.add_argument("--cases", type=int, default=100)
    p_vb.add_argument("--seed", type=int, default=0)

    p_ex = sub.add_parser("extract", help="extract a filter bank from a checkpoint")
    p_ex.add_argument("--checkpoint", required=True)
    p_ex.add_argument("--kind", choices=["depthwise", "pointwise"], default="depthwise")
    p_ex.add_argument("--out", required=True)

    p_run = sub.add_parser("run", help="run an experiment protocol")
    p_run.add_argument(
        "kind",
        choices=["selffer", "anb", "reverse", "matrix", "ablation", "crossarch"],
    )
    p_run.add_argument("--spec", required=True, action="append",
                       help="experiment spec file (repeatable)")
    p_run.add_argument("--profile", default=None, help="override the spec's profile")
    p_run.add_argument("--replicates", type=int, default=None)
    p_run.add_argument("--workers", type=int, default=1,
                       help="run multiple spec files in parallel worker processes")
    _add_common(p_run)

    p_rep = sub.add_parser("report", help="render tables, curves, grids, clusters")
    p_rep.add_argument("what", choices=["matrix", "curve", "grid", "cluster"])
    p_rep.add_argument("--store", default="runs")
    p_rep.add_argument("--tag", default="")
    p_rep.add_argument("--out", default="out")
    p_rep.add_argument("--y", choices=["accuracy", "retention"], default="retention")
    p_rep.add_argument("--bank", action="append", default=[], help="filter bank file")
    p_rep.add_argument("--run", action="append", default=[], help="run id to extract a bank from")
    p_rep.add_argument("--layer", default="first", help="grid layer selector (first/middle/last or id)")
    p_rep.add_argument("--rows", type=int, default=4)
    p_rep.add_argument("--cols", type=int, default=8)
    p_rep.add_argument("--k", type=int, default=4)
    p_rep.add_argument("--seed", type=int, default=0)
    return ap


_KIND_ALIASES = {
    "reverse": "reverse_anb",
    "crossarch": ("cross_arch", "cross_domain_arch"),
}


def _cmd_data(args) -> int:
    from . import datahub

    if args.data_command == "fetch":
        h = datahub.load_dataset(args.name, args.root)
        print(f"{h.name}: {h.train_size} train / {h.test_size} test, "
              f"{h.num_classes} classes, {h.train_x.shape[1]}px")
        return 0
    a, b = datahub.semantic_split(args.name, args.root)
    for h in (a, b):
        print(f"{h.name}: {h.num_classes} classes, {h.train_size} train / {h.test_size} test")
    return 0


def _cmd_verify_backend(args) -> int:
    from .backendcheck import run_equivalence

    rep = run_equivalence(cases=args.cases, seed=args.seed)
    for key in ("max_abs_depthwise", "max_abs_pointwise", "max_abs_block"):
        print(f"{key}: {rep[key]:.3e}")
    ok = (
        rep["max_abs_depthwise"] <= 1e-5
        and rep["max_abs_pointwise"] <= 1e-5
        and rep["max_abs_block"] <= 1e-4
    )
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_extract(args) -> int:
    from . import surgery, trainer

    handle = trainer.load_checkpoint(args.checkpoint)
    meta_run = Path(args.checkpoint).parent.name
    if args.kind == "depthwise":
        bank = surgery.extract_depthwise(handle, run_id=meta_run)
    else:
        bank = surgery.extract_pointwise(handle, run_id=meta_run)
    surgery.save_bank(bank, args.out)
    print(f"wrote {args.out}: {len(bank.entries)} layers, {bank.total_kernels()} kernels")
    return 0


def _run_one_spec(spec_path: str, store_path: str, root: str, kind: str,
                  profile: str | None, replicates: int | None) -> int:
    import dataclasses

    from .protocols import ExperimentSpec, Orchestrator, run_experiment
    from .reportkit import ResultStore

    exp = ExperimentSpec.load(spec_path)
    wanted = _KIND_ALIASES.get(kind, kind)
    allowed = wanted if isinstance(wanted, tuple) else (wanted,)
    if exp.kind not in allowed:
        print(f"{spec_path}: spec kind {exp.kind!r} does not match command {kind!r}",
              file=sys.stderr)
        return 2
    if profile is not None:
        exp = dataclasses.replace(exp, profile=profile)
    if replicates is not None:
        exp = dataclasses.replace(exp, replicates=replicates)
    orch = Orchestrator(ResultStore(store_path), data_root=root, profile=exp.profile)
    records = run_experiment(orch, exp)
    failed = [r for r in records if r.status != "ok"]
    for r in records:
        print(f"{r.run_id} {r.status:>6} acc={r.final_acc:.4f} "
              f"ret={r.retention if r.retention is not None else '-'} {r.tag}")
    if failed:
        print(f"{len(failed)} run(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_run(args) -> int:
    if args.workers > 1 and len(args.spec) > 1:
        # parallelism across spec files: independent worker processes share
        # the store through its file lock and digest dedup
        import subprocess

        procs = []
        for spec in args.spec:
            cmd = [sys.executable, "-m", "filtergraft.cli", "run", args.kind,
                   "--spec", spec, "--store", args.store, "--root", args.root]
            if args.profile:
                cmd += ["--profile", args.profile]
            if args.replicates is not None:
                cmd += ["--replicates", str(args.replicates)]
            procs.append(subprocess.Popen(cmd))
            while len([p for p in procs if p.poll() is None]) >= args.workers:
                for p in procs:
                    if p.poll() is None:
                        p.wait()
                        break
        rcs = [p.wait() for p in procs]
        return max(rcs) if rcs else 0
    rc = 0
    for spec in args.spec:
        rc = max(rc, _run_one_spec(spec, args.store, args.root, args.kind,
                                   args.profile, args.replicates))
    return rc


def _load_banks(args):
    from . import surgery, trainer
    from .reportkit import ResultStore

    banks = [surgery.load_bank(p) for p in args.bank]
    if args.run:
        store = ResultStore(args.store)
        for run_id in args.run:
            rec = store.get(run_id)
            if rec is None:
                raise SystemExit(f"no run {run_id} in store {args.store}")
            ckpt = store.checkpoint_path(rec)
            if ckpt is None:
                raise SystemExit(f"run {run_id} has no checkpoint in the store")
            handle = trainer.load_checkpoint(ckpt)
            banks.append(surgery.extract_depthwise(handle, dataset_name=rec.dataset, run_id=run_id))
    return banks


def _cmd_report(args) -> int:
    from . import reportkit
    from .reportkit import ResultStore

    if args.what == "matrix":
        text, _ = reportkit.matrix_table(ResultStore(args.store), args.tag, out_dir=args.out)
        print(text)
        return 0
    if args.what == "curve":
        img, data = reportkit.curve_plot(ResultStore(args.store), args.tag, y=args.y, out_dir=args.out)
        print(f"wrote {img} and {data}")
        return 0
    banks = _load_banks(args)
    if not banks:
        raise SystemExit("grid/cluster need --bank files or --run ids")
    out = Path(args.out)
    if args.what == "grid":
        layer = args.layer if args.layer in ("first", "middle", "last") else int(args.layer)
        path = reportkit.filter_grid(
            banks[0], layer, rows=args.rows, cols=args.cols,
            seed=args.seed, out_path=out / f"grid_{args.layer}.png",
        )
        print(f"wrote {path}")
        return 0
    report = reportkit.cluster_filters(banks, k=args.k, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "k": report.k,
        "inertia": report.inertia,
        "per_layer_histogram": report.per_layer_histogram,
        "excluded": report.excluded,
        "assignments": report.assignments,
    }
    (out / "clusters.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote {out / 'clusters.json'} (inertia {report.inertia:.4f})")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(levelname)s %(name)s] %(message)s",
    )
    torch.set_num_threads(max(1, torch.get_num_threads()))
    if args.command == "data":
        return _cmd_data(args)
    if args.command == "verify-backend":
        return _cmd_verify_backend(args)
    if args.command == "extract":
        return _cmd_extract(args)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
