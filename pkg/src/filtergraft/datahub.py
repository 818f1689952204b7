"""Dataset download, caching, semantic splits, and deterministic loaders.

Real datasets are fetched as parquet shards from the Hugging Face hub
(override the endpoint with the standard HF_ENDPOINT environment variable,
e.g. to point at a local mirror) and pinned to a specific repo revision.
Decoded images are cached as uint8 arrays under::

    <root>/<dataset>/raw/        downloaded parquet shards
    <root>/<dataset>/decoded/    train_x/train_y/test_x/test_y .npy
    <root>/<dataset>/digest.json sha256 of every cached file
    <root>/<dataset>/stats.json  per-channel mean/std of the training split

Two procedural datasets (synth10, synth4) are registered for fast tests;
they are generated deterministically and never touch the network.

Fashion-MNIST is zero-padded from 28x28 to 32x32 and its single channel is
replicated to 3 so every registered dataset presents 32x32x3 images.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock
from PIL import Image

from .errors import (
    DigestMismatchError,
    DownloadError,
    NoSplitTableError,
    UnknownDatasetError,
)

log = logging.getLogger(__name__)

HF_DEFAULT_ENDPOINT = "https://huggingface.co"

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

# fine labels in id order (alphabetical, the upstream convention)
CIFAR100_CLASSES = (
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle",
    "bicycle", "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel",
    "can", "castle", "caterpillar", "cattle", "chair", "chimpanzee", "clock",
    "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster",
    "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain",
    "mouse", "mushroom", "oak_tree", "orange", "orchid", "otter", "palm_tree",
    "pear", "pickup_truck", "pine_tree", "plain", "plate", "poppy",
    "porcupine", "possum", "rabbit", "raccoon", "ray", "road", "rocket",
    "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail",
    "snake", "spider", "squirrel", "streetcar", "sunflower", "sweet_pepper",
    "table", "tank", "telephone", "television", "tiger", "tractor", "train",
    "trout", "tulip", "turtle", "wardrobe", "whale", "willow_tree", "wolf",
    "woman", "worm",
)

FASHION_CLASSES = (
    "t-shirt_top", "trouser", "pullover", "dress", "coat",
    "sandal", "shirt", "sneaker", "bag", "ankle_boot",
)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    num_classes: int
    train_size: int
    test_size: int
    image_size: int
    source: str  # "hf:<repo>@<revision>:<subdir>" or "builtin:<generator>"
    class_names: tuple = ()
    image_column: str = "img"
    label_column: str = "label"


REGISTRY = {
    "cifar10": DatasetSpec(
        name="cifar10",
        num_classes=10,
        train_size=50000,
        test_size=10000,
        image_size=32,
        source="hf:uoft-cs/cifar10@0f09482a0a38c9285ac4a0cf676d3674a78330e1:plain_text",
        class_names=CIFAR10_CLASSES,
    ),
    "cifar100": DatasetSpec(
        name="cifar100",
        num_classes=100,
        train_size=50000,
        test_size=10000,
        image_size=32,
        source="hf:uoft-cs/cifar100@fed467e8332e7a6cf2c2691aed431d0cde18c483:cifar100",
        class_names=CIFAR100_CLASSES,
        label_column="fine_label",
    ),
    "fashion_mnist": DatasetSpec(
        name="fashion_mnist",
        num_classes=10,
        train_size=60000,
        test_size=10000,
        image_size=32,  # padded from 28
        source="hf:zalando-datasets/fashion_mnist@385ed3c4a7adb937ffe975ad169daa668dfaa66f:fashion_mnist",
        class_names=FASHION_CLASSES,
        image_column="image",
    ),
    "synth10": DatasetSpec(
        name="synth10",
        num_classes=10,
        train_size=2048,
        test_size=512,
        image_size=32,
        source="builtin:blobs",
        class_names=tuple(f"c{i}" for i in range(10)),
    ),
    "synth4": DatasetSpec(
        name="synth4",
        num_classes=4,
        train_size=640,
        test_size=256,
        image_size=32,
        source="builtin:blobs",
        class_names=tuple(f"c{i}" for i in range(4)),
    ),
}


@dataclass
class DatasetHandle:
    """In-memory dataset: uint8 images (N, H, W, 3) and int64 labels."""

    name: str
    num_classes: int
    class_names: tuple
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: np.ndarray  # per-channel, unit scale
    std: np.ndarray

    @property
    def train_size(self) -> int:
        return len(self.train_y)

    @property
    def test_size(self) -> int:
        return len(self.test_y)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _compute_stats(train_x: np.ndarray):
    x = train_x.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    std = np.maximum(std, 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def from_arrays(name, train_x, train_y, test_x, test_y, num_classes, class_names=None):
    """Build an in-memory handle (used for toy datasets in tests)."""
    if class_names is None:
        class_names = tuple(f"c{i}" for i in range(num_classes))
    mean, std = _compute_stats(np.asarray(train_x))
    return DatasetHandle(
        name=name,
        num_classes=num_classes,
        class_names=tuple(class_names),
        train_x=np.asarray(train_x, dtype=np.uint8),
        train_y=np.asarray(train_y, dtype=np.int64),
        test_x=np.asarray(test_x, dtype=np.uint8),
        test_y=np.asarray(test_y, dtype=np.int64),
        mean=mean,
        std=std,
    )


# -- builtin procedural data -----------------------------------------------------


def _generate_blobs(spec: DatasetSpec):
    """Smooth per-class template + noise. Deterministic for a given spec."""
    rng = np.random.default_rng([0xF117E, spec.num_classes, spec.image_size])
    size = spec.image_size
    templates = []
    for _ in range(spec.num_classes):
        field = rng.normal(size=(size, size, 3))
        for _ in range(3):  # cheap blur for spatial structure
            field = (
                field
                + np.roll(field, 1, 0) + np.roll(field, -1, 0)
                + np.roll(field, 1, 1) + np.roll(field, -1, 1)
            ) / 5.0
        field = (field - field.min()) / (field.max() - field.min() + 1e-9)
        templates.append(field)

    def make(n, seed_tag):
        rs = np.random.default_rng([0xF117E, seed_tag, spec.num_classes])
        ys = np.arange(n) % spec.num_classes
        rs.shuffle(ys)
        xs = np.empty((n, size, size, 3), dtype=np.uint8)
        for i, y in enumerate(ys):
            img = templates[y] * 200.0 + rs.normal(scale=25.0, size=(size, size, 3))
            xs[i] = np.clip(img, 0, 255).astype(np.uint8)
        return xs, ys.astype(np.int64)

    train_x, train_y = make(spec.train_size, 1)
    test_x, test_y = make(spec.test_size, 2)
    return train_x, train_y, test_x, test_y


# -- hub download and cache --------------------------------------------------------


def _hf_endpoint() -> str:
    return os.environ.get("HF_ENDPOINT", HF_DEFAULT_ENDPOINT).rstrip("/")


def _parse_hf_source(source: str):
    body = source[len("hf:"):]
    repo_rev, subdir = body.rsplit(":", 1)
    repo, rev = repo_rev.split("@", 1)
    return repo, rev, subdir


def _download(url: str, dest: Path):
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    try:
        with urllib.request.urlopen(url, timeout=120) as r, tmp.open("wb") as f:
            while True:
                chunk = r.read(1 << 20)
                if not chunk:
                    break
                f.write(chunk)
    except (urllib.error.URLError, OSError) as e:
        tmp.unlink(missing_ok=True)
        raise DownloadError(f"failed to fetch {dest.name}: {e}") from e
    tmp.rename(dest)


def _decode_parquet(path: Path, image_col: str, label_col: str, image_size: int):
    import polars as pl

    df = pl.read_parquet(path)
    labels = df[label_col].to_numpy().astype(np.int64)
    blobs = df[image_col].struct.field("bytes").to_list()
    n = len(blobs)
    xs = np.empty((n, image_size, image_size, 3), dtype=np.uint8)
    for i, blob in enumerate(blobs):
        img = Image.open(io.BytesIO(blob))
        arr = np.asarray(img)
        if arr.ndim == 2:  # grayscale: replicate channels
            arr = np.stack([arr] * 3, axis=-1)
        if arr.shape[0] != image_size:  # e.g. 28 -> 32 zero pad
            pad = (image_size - arr.shape[0]) // 2
            padded = np.zeros((image_size, image_size, 3), dtype=np.uint8)
            padded[pad : pad + arr.shape[0], pad : pad + arr.shape[1]] = arr
            arr = padded
        xs[i] = arr
    return xs, labels


_DECODED_FILES = ("train_x.npy", "train_y.npy", "test_x.npy", "test_y.npy")


def _cache_ok(ds_dir: Path) -> bool:
    digest_path = ds_dir / "digest.json"
    if not digest_path.exists():
        return False
    recorded = json.loads(digest_path.read_text())["files"]
    for rel in _DECODED_FILES:
        p = ds_dir / "decoded" / rel
        if not p.exists():
            return False
        if _sha256_file(p) != recorded.get(f"decoded/{rel}"):
            raise DigestMismatchError(f"{p}: cache digest mismatch; delete {ds_dir} to refetch")
    return True


def _build_cache(spec: DatasetSpec, ds_dir: Path):
    repo, rev, subdir = _parse_hf_source(spec.source)
    endpoint = _hf_endpoint()
    raw = ds_dir / "raw"
    files = {}
    for split in ("train", "test"):
        fname = f"{split}-00000-of-00001.parquet"
        dest = raw / fname
        if not dest.exists():
            url = f"{endpoint}/datasets/{repo}/resolve/{rev}/{subdir}/{fname}"
            log.info("downloading %s %s shard", spec.name, split)
            _download(url, dest)
        files[f"raw/{fname}"] = _sha256_file(dest)

    decoded = ds_dir / "decoded"
    decoded.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        xs, ys = _decode_parquet(
            raw / f"{split}-00000-of-00001.parquet",
            spec.image_column,
            spec.label_column,
            spec.image_size,
        )
        expected = spec.train_size if split == "train" else spec.test_size
        if len(ys) != expected:
            raise DigestMismatchError(
                f"{spec.name} {split} split has {len(ys)} records, expected {expected}"
            )
        if ys.max() != spec.num_classes - 1:
            raise DigestMismatchError(
                f"{spec.name} {split} labels run to {ys.max()}, expected {spec.num_classes - 1}"
            )
        np.save(decoded / f"{split}_x.npy", xs)
        np.save(decoded / f"{split}_y.npy", ys)
    for rel in _DECODED_FILES:
        files[f"decoded/{rel}"] = _sha256_file(decoded / rel)

    mean, std = _compute_stats(np.load(decoded / "train_x.npy"))
    (ds_dir / "stats.json").write_text(
        json.dumps({"mean": mean.tolist(), "std": std.tolist()}, indent=2) + "\n"
    )
    (ds_dir / "digest.json").write_text(
        json.dumps({"source": spec.source, "files": files}, indent=2) + "\n"
    )


def load_dataset(name: str, root) -> DatasetHandle:
    """Load a registered dataset, downloading and caching on first use."""
    if name not in REGISTRY:
        raise UnknownDatasetError(
            f"unknown dataset {name!r}; registered: {sorted(REGISTRY)}"
        )
    spec = REGISTRY[name]

    if spec.source.startswith("builtin:"):
        train_x, train_y, test_x, test_y = _generate_blobs(spec)
        mean, std = _compute_stats(train_x)
        return DatasetHandle(
            name=name,
            num_classes=spec.num_classes,
            class_names=spec.class_names,
            train_x=train_x,
            train_y=train_y,
            test_x=test_x,
            test_y=test_y,
            mean=mean,
            std=std,
        )

    root = Path(root)
    ds_dir = root / name
    ds_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(ds_dir) + ".lock"):
        if not _cache_ok(ds_dir):
            _build_cache(spec, ds_dir)
    decoded = ds_dir / "decoded"
    stats = json.loads((ds_dir / "stats.json").read_text())
    return DatasetHandle(
        name=name,
        num_classes=spec.num_classes,
        class_names=spec.class_names,
        train_x=np.load(decoded / "train_x.npy"),
        train_y=np.load(decoded / "train_y.npy"),
        test_x=np.load(decoded / "test_x.npy"),
        test_y=np.load(decoded / "test_y.npy"),
        mean=np.asarray(stats["mean"], dtype=np.float32),
        std=np.asarray(stats["std"], dtype=np.float32),
    )


# -- semantic splits ----------------------------------------------------------------


def _split_table_path(name: str):
    env_dir = os.environ.get("FILTERGRAFT_SPLITS")
    candidates = []
    if env_dir:
        candidates.append(Path(env_dir) / f"{name}.json")
    candidates.append(Path("configs/splits") / f"{name}.json")
    candidates.append(Path(__file__).parent / "splits" / f"{name}.json")
    for c in candidates:
        if c.exists():
            return c
    return None


def semantic_split(name: str, root=None, table_path=None):
    """Split a dataset into two full classification datasets by class lists.

    The split table is a JSON file {dataset, partitions: [{label, classes}]}
    resolved from $FILTERGRAFT_SPLITS, ./configs/splits/, or the packaged
    defaults. Labels are remapped to 0..n-1 by ascending original class id.
    """
    if table_path is None:
        table_path = _split_table_path(name)
    if table_path is None:
        raise NoSplitTableError(f"no split table registered for dataset {name!r}")
    table = json.loads(Path(table_path).read_text())
    if table.get("dataset") != name:
        raise NoSplitTableError(
            f"split table {table_path} is for {table.get('dataset')!r}, not {name!r}"
        )
    base = load_dataset(name, root)
    parts = table["partitions"]
    if len(parts) != 2:
        raise NoSplitTableError(f"split table must define exactly 2 partitions")
    name_to_id = {c: i for i, c in enumerate(base.class_names)}
    id_sets = []
    for part in parts:
        missing = [c for c in part["classes"] if c not in name_to_id]
        if missing:
            raise NoSplitTableError(f"split table names unknown classes {missing}")
        id_sets.append({name_to_id[c] for c in part["classes"]})
    if id_sets[0] & id_sets[1]:
        raise NoSplitTableError("split partitions overlap")
    if id_sets[0] | id_sets[1] != set(range(base.num_classes)):
        raise NoSplitTableError("split partitions do not cover all classes")

    handles = []
    for part, ids in zip(parts, id_sets):
        ordered = sorted(ids)
        remap = {orig: new for new, orig in enumerate(ordered)}
        tr_mask = np.isin(base.train_y, ordered)
        te_mask = np.isin(base.test_y, ordered)
        train_x = base.train_x[tr_mask]
        train_y = np.asarray([remap[y] for y in base.train_y[tr_mask]], dtype=np.int64)
        test_x = base.test_x[te_mask]
        test_y = np.asarray([remap[y] for y in base.test_y[te_mask]], dtype=np.int64)
        mean, std = _compute_stats(train_x)
        handles.append(
            DatasetHandle(
                name=f"{name}/{part['label']}",
                num_classes=len(ordered),
                class_names=tuple(base.class_names[i] for i in ordered),
                train_x=train_x,
                train_y=train_y,
                test_x=test_x,
                test_y=test_y,
                mean=mean,
                std=std,
            )
        )
    return handles[0], handles[1]


def subsample(handle: DatasetHandle, n: int, seed: int = 0) -> DatasetHandle:
    """Stratified training subset (test split and stats untouched).

    The derived handle's name records the subsampling so run fingerprints
    distinguish it from the full dataset.
    """
    if n >= handle.train_size:
        return handle
    rng = np.random.default_rng([seed, n])
    picked = []
    for c in range(handle.num_classes):
        idx = np.flatnonzero(handle.train_y == c)
        quota = int(round(n * len(idx) / handle.train_size))
        quota = min(quota, len(idx))
        picked.append(rng.choice(idx, size=quota, replace=False))
    idx = np.sort(np.concatenate(picked))
    return DatasetHandle(
        name=f"{handle.name}#sub{n}s{seed}",
        num_classes=handle.num_classes,
        class_names=handle.class_names,
        train_x=handle.train_x[idx],
        train_y=handle.train_y[idx],
        test_x=handle.test_x,
        test_y=handle.test_y,
        mean=handle.mean,
        std=handle.std,
    )


# -- loaders ------------------------------------------------------------------------


class TrainLoader:
    """Deterministic shuffling + augmentation, keyed by (seed, epoch)."""

    def __init__(self, handle: DatasetHandle, batch: int, augment: str, seed: int):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        if augment not in ("standard", "none"):
            raise ValueError(f"unknown augment policy {augment!r}")
        self.handle = handle
        self.batch = batch
        self.augment = augment
        self.seed = seed
        self._next_epoch = 0

    def __len__(self):
        return math.ceil(self.handle.train_size / self.batch)

    def epoch_batches(self, epoch: int):
        h = self.handle
        rng = np.random.default_rng([self.seed, epoch, 0x7A41])
        order = rng.permutation(h.train_size)
        pad = 4
        for start in range(0, h.train_size, self.batch):
            idx = order[start : start + self.batch]
            xs = h.train_x[idx]
            ys = h.train_y[idx]
            if self.augment == "standard":
                n, height, width, _ = xs.shape
                padded = np.zeros(
                    (n, height + 2 * pad, width + 2 * pad, 3), dtype=xs.dtype
                )
                padded[:, pad : pad + height, pad : pad + width] = xs
                offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
                flips = rng.random(n) < 0.5
                out = np.empty_like(xs)
                for i in range(n):
                    oy, ox = offs[i]
                    crop = padded[i, oy : oy + height, ox : ox + width]
                    out[i] = crop[:, ::-1] if flips[i] else crop
                xs = out
            yield _to_tensor(xs, h.mean, h.std), torch.from_numpy(ys)

    def __iter__(self):
        epoch = self._next_epoch
        self._next_epoch += 1
        return self.epoch_batches(epoch)


class TestLoader:
    """Fixed-order, augmentation-free iteration over the test split."""

    def __init__(self, handle: DatasetHandle, batch: int):
        self.handle = handle
        self.batch = batch

    def __len__(self):
        return math.ceil(self.handle.test_size / self.batch)

    def __iter__(self):
        h = self.handle
        for start in range(0, h.test_size, self.batch):
            xs = h.test_x[start : start + self.batch]
            ys = h.test_y[start : start + self.batch]
            yield _to_tensor(xs, h.mean, h.std), torch.from_numpy(ys)


def _to_tensor(xs: np.ndarray, mean, std) -> torch.Tensor:
    x = xs.astype(np.float32) / 255.0
    x = (x - mean) / std
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def make_loaders(handle: DatasetHandle, batch: int, augment: str = "standard", seed: int = 0):
    """Train loader (deterministic augmentation) and test loader (none)."""
    return TrainLoader(handle, batch, augment, seed), TestLoader(handle, batch)
