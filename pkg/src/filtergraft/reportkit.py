"""Append-only result store, table/curve rendering, filter grids, clustering.

The store is a line-delimited JSON file guarded by an exclusive file lock;
records are never mutated or deleted, and every rendered artifact is
accompanied by a machine-readable data file recomputable from the store.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock
from PIL import Image

from .datahub import REGISTRY
from .errors import (
    DuplicateRunError,
    EmptyLayerError,
    HeterogeneousKernelSizeError,
    IncompleteMatrixError,
    NoRecordsError,
)
from .surgery import FilterBank
from .trainer import RunRecord

log = logging.getLogger(__name__)

# matrix sign threshold: 0.1 percentage point
SIGN_EPS = 0.001


class ResultStore:
    """Durable append-only collection of run records under one directory."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.records_path = self.path / "records.jsonl"
        self._lock = FileLock(str(self.path / "records.lock"))

    def _read_all(self) -> list:
        if not self.records_path.exists():
            return []
        records = []
        for line in self.records_path.read_text().splitlines():
            if line.strip():
                records.append(RunRecord.from_json(line))
        return records

    def all(self) -> list:
        return self._read_all()

    def index(self) -> dict:
        """config_digest -> run_id, rebuilt from the records themselves."""
        return {r.config_digest: r.run_id for r in self._read_all()}

    def find(self, config_digest: str) -> RunRecord | None:
        for r in self._read_all():
            if r.config_digest == config_digest:
                return r
        return None

    def get(self, run_id: str) -> RunRecord | None:
        for r in self._read_all():
            if r.run_id == run_id:
                return r
        return None

    def by_tag(self, tag: str) -> list:
        return [r for r in self._read_all() if r.tag == tag]

    def run_dir(self, run_id: str) -> Path:
        return self.path / run_id

    def checkpoint_path(self, record: RunRecord) -> Path | None:
        if record.checkpoint is None:
            return None
        p = self.path / record.checkpoint
        return p if p.exists() else None

    def append_run(self, record: RunRecord) -> str:
        """Durable append; duplicate config digests are rejected."""
        with self._lock:
            existing = self.find(record.config_digest)
            if existing is not None:
                raise DuplicateRunError(existing.run_id, record.config_digest)
            with self.records_path.open("a") as f:
                f.write(record.to_json() + "\n")
                f.flush()
        return record.run_id


# -- matrix table --------------------------------------------------------------------


def _train_size(dataset_name: str) -> int:
    base = dataset_name.split("#")[0].split("/")[0]
    if base in REGISTRY:
        return REGISTRY[base].train_size
    return 0


def classify_delta(delta: float) -> str:
    if delta >= SIGN_EPS:
        return "increase"
    if delta <= -SIGN_EPS:
        return "decrease"
    return "no_change"


def matrix_table(store: ResultStore, experiment_tag: str, out_dir=None):
    """Render a source x target transfer matrix from stored records.

    Rows are target datasets in descending training-set size; columns are
    sources. Off-diagonal cells show the signed accuracy delta against the
    row's selffer; diagonal cells show the selffer accuracy and its delta
    against the original (scratch) model.
    """
    records = store.by_tag(experiment_tag)
    if not records:
        raise NoRecordsError(f"no records tagged {experiment_tag!r}")
    cells = {}
    originals = {}
    for r in records:
        meta = r.plan_summary or {}
        role = meta.get("role")
        if role == "base":
            originals[r.dataset] = r
        elif role == "cell":
            cells[(meta["source_dataset"], r.dataset)] = r
    targets = sorted({t for _, t in cells}, key=_train_size, reverse=True)
    sources = sorted({s for s, _ in cells}, key=_train_size, reverse=True)
    missing = [
        (s, t) for t in targets for s in sources if (s, t) not in cells
    ]
    if missing:
        raise IncompleteMatrixError(missing)

    table = {"tag": experiment_tag, "rows": [], "columns": sources}
    lines = []
    header = ["target\\source"] + list(sources)
    lines.append(" | ".join(f"{h:>18}" for h in header))
    for t in targets:
        selffer = cells[(t, t)]
        row = {"target": t, "cells": []}
        out_cells = []
        for s in sources:
            r = cells[(s, t)]
            if s == t:
                base = originals.get(t)
                delta = r.final_acc - base.final_acc if base else None
                cell = {
                    "kind": "selffer",
                    "accuracy": r.final_acc,
                    "delta_vs_original": delta,
                    "sign": classify_delta(delta) if delta is not None else "unknown",
                    "run_id": r.run_id,
                }
                out_cells.append(f"[{r.final_acc:.4f}]{_arrow(cell['sign'])}")
            else:
                delta = r.final_acc - selffer.final_acc
                cell = {
                    "kind": "transfer",
                    "accuracy": r.final_acc,
                    "delta_vs_selffer": delta,
                    "sign": classify_delta(delta),
                    "run_id": r.run_id,
                }
                out_cells.append(f"{delta:+.4f}{_arrow(cell['sign'])}")
            row["cells"].append(cell)
        table["rows"].append(row)
        lines.append(" | ".join(f"{c:>18}" for c in [t] + out_cells))
    text = "\n".join(lines)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"matrix_{_safe(experiment_tag)}.txt").write_text(text + "\n")
        (out_dir / f"matrix_{_safe(experiment_tag)}.json").write_text(
            json.dumps(table, indent=2) + "\n"
        )
    return text, table


def _arrow(sign: str) -> str:
    return {"increase": " (+)", "decrease": " (-)", "no_change": " (=)"}.get(sign, "")


def _safe(tag: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in tag)


# -- curves ---------------------------------------------------------------------------


def curve_plot(store: ResultStore, experiment_tag: str, y: str = "retention", out_dir="out"):
    """Accuracy-or-retention vs transfer depth, with the control series.

    Writes an SVG plot plus a JSON sidecar holding the exact plotted points.
    """
    if y not in ("accuracy", "retention"):
        raise ValueError(f"y must be accuracy or retention, got {y!r}")
    records = [r for r in store.by_tag(experiment_tag) if r.plan_summary]
    series = defaultdict(list)
    for r in records:
        meta = r.plan_summary
        if "depth_n" not in meta or meta.get("role") not in ("transfer", "control"):
            continue
        val = r.final_acc if y == "accuracy" else r.retention
        if val is None:
            continue
        series[meta["role"]].append((meta["depth_n"], val, r.run_id))
    if not series:
        raise NoRecordsError(f"no curve records tagged {experiment_tag!r}")
    for pts in series.values():
        pts.sort()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = {
        "tag": experiment_tag,
        "y": y,
        "series": {
            role: [{"depth": d, y: v, "run_id": rid} for d, v, rid in pts]
            for role, pts in series.items()
        },
    }
    data_path = out_dir / f"curve_{_safe(experiment_tag)}_{y}.json"
    data_path.write_text(json.dumps(data, indent=2) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = {"transfer": "transferred", "control": "control (self)"}
    for role, pts in sorted(series.items()):
        ax.plot(
            [d for d, _, _ in pts],
            [v for _, v, _ in pts],
            marker="o",
            label=labels.get(role, role),
        )
    ax.set_xlabel("transfer depth (depthwise layers)")
    ax.set_ylabel(y)
    ax.set_title(experiment_tag)
    ax.legend()
    fig.tight_layout()
    img_path = out_dir / f"curve_{_safe(experiment_tag)}_{y}.svg"
    fig.savefig(img_path, metadata={"Date": None})
    plt.close(fig)
    return img_path, data_path


# -- filter grids ----------------------------------------------------------------------


def filter_grid(
    bank: FilterBank,
    layer_selector,
    rows: int = 4,
    cols: int = 8,
    normalize: bool = True,
    seed: int = 0,
    out_path="grid.png",
    scale: int = 12,
):
    """Render a rows x cols grid of kernels from the selected layer(s) as PNG.

    layer_selector: layer id, "first", "middle", "last", or an iterable of
    layer ids. Sampling is deterministic given the seed; kernels are
    min-max normalized per tile unless normalize is false.
    """
    if bank.kind != "depthwise":
        raise EmptyLayerError("filter grids are rendered from depthwise banks")
    ids = [e.layer_id for e in bank.entries]
    if layer_selector == "first":
        chosen = [ids[0]]
    elif layer_selector == "last":
        chosen = [ids[-1]]
    elif layer_selector == "middle":
        chosen = [ids[len(ids) // 2]]
    elif isinstance(layer_selector, int):
        chosen = [layer_selector]
    else:
        chosen = list(layer_selector)
    pool = [e for e in bank.entries if e.layer_id in chosen]
    if not pool:
        raise EmptyLayerError(f"no bank entries match layer selector {layer_selector!r}")
    kernels = np.concatenate([e.kernels for e in pool], axis=0)
    if kernels.shape[0] == 0:
        raise EmptyLayerError("selected layers contain no kernels")

    rng = np.random.default_rng(seed)
    n = rows * cols
    idx = rng.choice(kernels.shape[0], size=min(n, kernels.shape[0]), replace=False)
    tiles = kernels[np.sort(idx)]
    kh, kw = tiles.shape[1], tiles.shape[2]
    gap = 1
    grid = np.zeros((rows * (kh + gap) + gap, cols * (kw + gap) + gap), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        if normalize:
            lo, hi = tile.min(), tile.max()
            tile = (tile - lo) / max(hi - lo, 1e-12)
        else:
            tile = np.clip(tile, 0.0, 1.0)
        block = (tile * 255.0).astype(np.uint8)
        y0 = gap + r * (kh + gap)
        x0 = gap + c * (kw + gap)
        grid[y0 : y0 + kh, x0 : x0 + kw] = block
    img = Image.fromarray(grid, mode="L")
    img = img.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.NEAREST)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path, format="PNG")
    return out_path


# -- clustering -------------------------------------------------------------------------


@dataclass
class ClusterReport:
    k: int
    assignments: dict  # kernel_ref "bank:layer:channel" -> cluster id
    centroids: np.ndarray  # (k, kh, kw)
    inertia: float
    per_layer_histogram: dict  # layer_id -> {cluster: count}
    excluded: list  # kernel refs dropped as all-zero


def _prep_kernel(kernel: np.ndarray):
    """Zero-mean, unit-norm, sign-aligned flattening; None for degenerate."""
    v = kernel.astype(np.float64).ravel()
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    v = v / norm
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v


def cluster_filters(banks, k: int, seed: int = 0) -> ClusterReport:
    """K-means over normalized, sign-aligned kernels from one or more banks.

    Scaling a kernel by a positive constant cannot change its assignment;
    a kernel and its negation land in the same cluster.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    sizes = set()
    refs, vecs = [], []
    excluded = []
    for bi, bank in enumerate(banks):
        for e in bank.entries:
            sizes.add(e.kernels.shape[1:])
            if len(sizes) > 1:
                raise HeterogeneousKernelSizeError(
                    f"banks mix kernel sizes {sorted(sizes)}"
                )
            for c in range(e.kernels.shape[0]):
                ref = f"{bi}:{e.layer_id}:{c}"
                v = _prep_kernel(e.kernels[c])
                if v is None:
                    excluded.append(ref)
                else:
                    refs.append(ref)
                    vecs.append(v)
    if len(vecs) < k:
        raise ValueError(f"only {len(vecs)} usable kernels for k={k}")

    from sklearn.cluster import KMeans

    x = np.stack(vecs)
    km = KMeans(n_clusters=k, random_state=seed, n_init=10)
    labels = km.fit_predict(x)
    kh, kw = next(iter(sizes))
    hist = defaultdict(lambda: defaultdict(int))
    assignments = {}
    for ref, lab in zip(refs, labels):
        assignments[ref] = int(lab)
        layer_id = int(ref.split(":")[1])
        hist[layer_id][int(lab)] += 1
    return ClusterReport(
        k=k,
        assignments=assignments,
        centroids=km.cluster_centers_.reshape(k, kh, kw),
        inertia=float(km.inertia_),
        per_layer_histogram={l: dict(d) for l, d in hist.items()},
        excluded=excluded,
    )
