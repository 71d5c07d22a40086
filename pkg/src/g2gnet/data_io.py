"""Fashion-MNIST (IDX) and CIFAR-10/100 (binary) loading and batching."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import shutil
import tarfile
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32
STD_FLOOR = 1e-6

DATASETS = ("fashion_mnist", "cifar10", "cifar100")


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str
    normalized: bool = False
    stats: dict | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ParseError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ParseError(f"{self.name}: label outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return DatasetSplit(self.images[:n], self.labels[:n], self.class_count, self.name, self.normalized, self.stats)


def _open(path):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as f:
        buf = f.read()
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise ParseError(f"{path}: header truncated ({len(buf)} bytes)")
    got = int.from_bytes(buf[0:4], "big")
    if got != magic:
        raise ParseError(f"{path}: bad magic 0x{got:08x} at offset 0 (expected 0x{magic:08x})")
    dims = [int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    need = int(np.prod(dims))
    if len(buf) - head < need:
        raise ParseError(f"{path}: payload truncated at offset {len(buf)}; header promises {need} bytes")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=head)
    return data.reshape(dims)


def load_idx(images_path, labels_path, name="fashion_mnist", class_count=10) -> DatasetSplit:
    """Raw IDX pair (optionally gzipped) scaled to [0, 1]; standardize with :func:`normalize`."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return DatasetSplit(x, labels.astype(np.int64), class_count, name)


def load_cifar(paths, variant="cifar10") -> DatasetSplit:
    """Concatenate CIFAR binary batch files; CIFAR-100 uses the fine label."""
    if variant == "cifar10":
        label_bytes, classes = 1, 10
    elif variant == "cifar100":
        label_bytes, classes = 2, 100
    else:
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    rec = label_bytes + CIFAR_PIXELS
    xs, ys = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % rec:
            raise ParseError(f"{p}: size {raw.size} is not a multiple of the {rec}-byte record")
        raw = raw.reshape(-1, rec)
        ys.append(raw[:, label_bytes - 1].astype(np.int64))
        xs.append(raw[:, label_bytes:])
    labels = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    if labels.size and labels.max() >= classes:
        raise ParseError(f"label byte {labels.max()} >= class count {classes}")
    images = np.concatenate(xs).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return DatasetSplit(images, labels, classes, variant)


def channel_stats(split: DatasetSplit) -> dict:
    if len(split) == 0:
        raise ConfigurationError("cannot compute statistics of an empty split")
    x = split.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), STD_FLOOR)
    return {"mean": mean.tolist(), "std": std.tolist()}


def apply_stats(split: DatasetSplit, stats: dict) -> DatasetSplit:
    if split.normalized:
        raise ConfigurationError(f"{split.name} is already normalized")
    mean = np.asarray(stats["mean"], dtype=np.float64)[None, :, None, None]
    std = np.asarray(stats["std"], dtype=np.float64)[None, :, None, None]
    x = ((split.images - mean) / std).astype(np.float32)
    return DatasetSplit(x, split.labels, split.class_count, split.name, True, stats)


def normalize(train: DatasetSplit, *others: DatasetSplit):
    """Standardize every split per channel with statistics of ``train``."""
    stats = channel_stats(train)
    return (apply_stats(train, stats),) + tuple(apply_stats(o, stats) for o in others)


@dataclass
class BatchPlan:
    seed: int
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return rng.stream(self.seed, rng.SHUFFLE, epoch).permutation(n)

    def batches_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)


def batches(split: DatasetSplit, plan: BatchPlan, epoch: int = 0):
    """Yield ``(images, labels)``; the final short batch is kept."""
    n = len(split)
    if plan.batch_size > n:
        raise ConfigurationError(f"batch size {plan.batch_size} exceeds split size {n}")
    order = plan.permutation(n, epoch)
    for s in range(0, n, plan.batch_size):
        idx = order[s : s + plan.batch_size]
        yield split.images[idx], split.labels[idx]


# Locations and archive digests (MD5 as published alongside each archive).
SOURCES = {
    "fashion_mnist": {
        "base": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        "files": {
            "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
            "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
            "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
            "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
        },
    },
    "cifar10": {
        "base": "https://www.cs.toronto.edu/~kriz/",
        "files": {"cifar-10-binary.tar.gz": "c32a1d4ab5d03f1284b67883e8d87530"},
    },
    "cifar100": {
        "base": "https://www.cs.toronto.edu/~kriz/",
        "files": {"cifar-100-binary.tar.gz": "03b5dce01913d631647c71ecec9e9cb8"},
    },
}


def _digest(path, algo="md5"):
    h = hashlib.new(algo)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url, dest, retries=3, backoff=2.0):
    last = None
    for attempt in range(retries):
        try:
            tmp = str(dest) + ".part"
            with urllib.request.urlopen(url, timeout=60) as r, open(tmp, "wb") as f:
                shutil.copyfileobj(r, f)
            os.replace(tmp, dest)
            return
        except OSError as e:
            last = e
            log.warning("download of %s failed (attempt %d/%d): %s", url, attempt + 1, retries, e)
            if attempt + 1 < retries:
                time.sleep(backoff * 2**attempt)
    raise ConnectionError(f"could not download {url}: {last}")


def fetch(dataset, dest_dir, base_url=None, sources=None, retries=3, backoff=2.0) -> dict:
    """Download and verify a dataset into ``dest_dir``; returns the manifest.

    Files already present with the right digest are not downloaded again.
    CIFAR archives are unpacked next to the archive.
    """
    sources = sources or SOURCES
    if dataset not in sources:
        raise ConfigurationError(f"unknown dataset {dataset!r}; expected one of {tuple(sources)}")
    spec = sources[dataset]
    base = base_url or spec["base"]
    dest = Path(dest_dir) / dataset
    dest.mkdir(parents=True, exist_ok=True)
    manifest = {"dataset": dataset, "files": []}
    for name, md5 in spec["files"].items():
        target = dest / name
        if not (target.exists() and _digest(target) == md5):
            _download(base + name, target, retries, backoff)
            got = _digest(target)
            if got != md5:
                target.unlink()
                raise ValueError(f"digest mismatch for {name}: got {got}, expected {md5}")
        if name.endswith(".tar.gz"):
            with tarfile.open(target) as tar:
                members = [m for m in tar.getmembers() if m.isfile()]
                if not all((dest / m.name).exists() for m in members):
                    tar.extractall(dest, members=members)
        manifest["files"].append(
            {"file": name, "bytes": target.stat().st_size, "md5": md5, "sha256": _digest(target, "sha256")}
        )
    with open(dest / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def _find(root: Path, names):
    for n in names:
        hits = sorted(root.rglob(n))
        if hits:
            return hits[0]
    raise FileNotFoundError(f"none of {names} found under {root}")


def load_dataset(name, data_dir, limit_train=None, limit_test=None):
    """Locate, load and normalize the standard train/test splits under ``data_dir``."""
    root = Path(data_dir)
    if (root / name).is_dir():
        root = root / name
    if name == "fashion_mnist":
        def pair(prefix):
            img = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images-idx3-ubyte.gz"])
            lab = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels-idx1-ubyte.gz"])
            return load_idx(img, lab)
        train, test = pair("train"), pair("t10k")
    elif name == "cifar10":
        first = _find(root, ["data_batch_1.bin"])
        train = load_cifar([first.parent / f"data_batch_{i}.bin" for i in range(1, 6)], "cifar10")
        test = load_cifar([first.parent / "test_batch.bin"], "cifar10")
    elif name == "cifar100":
        train = load_cifar([_find(root, ["train.bin"])], "cifar100")
        test = load_cifar([_find(root, ["test.bin"])], "cifar100")
    else:
        raise ConfigurationError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if limit_train:
        train = train.subset(limit_train)
    if limit_test:
        test = test.subset(limit_test)
    return normalize(train, test)


def write_idx(path, array, magic):
    """Write a uint8 array as an IDX file (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(magic.to_bytes(4, "big"))
        for d in array.shape:
            f.write(int(d).to_bytes(4, "big"))
        f.write(array.tobytes())


def write_cifar(path, images, labels, variant="cifar10", coarse=None):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None], images]
    if variant == "cifar100":
        c = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, c[:, None])
    np.concatenate(cols, axis=1).tofile(path)
