"""Datasets with a two-way probe partition, label noise, and batching."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeDataset:
    """Training inputs with original and training labels plus a probe flag per example.

    The probe set is the label-corrupted subset when built by
    :func:`inject_label_noise`, or the atypical subset when built by
    :func:`partition_by_score`. Optional held-out test inputs use their
    original labels.
    """

    inputs: np.ndarray
    original_labels: np.ndarray
    training_labels: np.ndarray
    probe_flags: np.ndarray
    num_classes: int
    test_inputs: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.inputs)
        for name in ("original_labels", "training_labels", "probe_flags"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} inputs")
        for labels in (self.original_labels, self.training_labels, self.test_labels):
            if labels is not None and labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def clean_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.probe_flags)

    @property
    def probe_ids(self) -> np.ndarray:
        return np.flatnonzero(self.probe_flags)

    def subset_ids(self, subset: str) -> np.ndarray:
        if subset == "clean":
            return self.clean_ids
        if subset in ("probe", "noisy", "atypical"):
            return self.probe_ids
        if subset == "all":
            return np.arange(len(self))
        raise ValueError(f"unknown subset {subset!r}")

    def take(self, n: int, seed: int = 0) -> "ProbeDataset":
        """Class-stratified deterministic subsample of the training split."""
        if n >= len(self):
            return self
        rng = np.random.default_rng([seed, 0x7A])
        per = {c: rng.permutation(np.flatnonzero(self.original_labels == c)) for c in range(self.num_classes)}
        quota = n // self.num_classes
        idx = np.concatenate([per[c][:quota] for c in range(self.num_classes)])
        rest = np.setdiff1d(np.arange(len(self)), idx)
        idx = np.sort(np.concatenate([idx, rng.permutation(rest)[: n - idx.size]]))
        return replace(
            self,
            inputs=self.inputs[idx],
            original_labels=self.original_labels[idx],
            training_labels=self.training_labels[idx],
            probe_flags=self.probe_flags[idx],
        )


def holdout(dataset: ProbeDataset, n_test: int, seed: int = 0) -> ProbeDataset:
    """Move a class-stratified sample of ``n_test`` examples into the test split."""
    if n_test <= 0:
        return dataset
    rng = np.random.default_rng([seed, 0x7E57])
    k = dataset.num_classes
    test = []
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(dataset.original_labels == c))
        test.append(idx[: n_test // k + (1 if c < n_test % k else 0)])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return ProbeDataset(
        inputs=dataset.inputs[train],
        original_labels=dataset.original_labels[train],
        training_labels=dataset.training_labels[train],
        probe_flags=dataset.probe_flags[train],
        num_classes=k,
        test_inputs=dataset.inputs[test],
        test_labels=dataset.original_labels[test],
        meta=dict(dataset.meta),
    )


def from_arrays(inputs, labels, num_classes=None, test_inputs=None, test_labels=None) -> ProbeDataset:
    labels = np.asarray(labels, dtype=np.int64)
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    return ProbeDataset(
        inputs=np.asarray(inputs),
        original_labels=labels,
        training_labels=labels.copy(),
        probe_flags=np.zeros(len(labels), dtype=bool),
        num_classes=k,
        test_inputs=None if test_inputs is None else np.asarray(test_inputs),
        test_labels=None if test_labels is None else np.asarray(test_labels, dtype=np.int64),
    )


def inject_label_noise(dataset: ProbeDataset, rate: float, seed: int = 0) -> ProbeDataset:
    """Flag exactly ``round(rate * N)`` examples and give each a different, uniformly drawn class."""
    if not 0 <= rate < 1:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    n = len(dataset)
    k = int(round(rate * n))
    rng = np.random.default_rng([seed, 0x401])
    chosen = np.sort(rng.permutation(n)[:k])
    labels = dataset.original_labels.copy()
    # shift by 1..C-1 so the new class is uniform over the other classes
    shift = rng.integers(1, dataset.num_classes, size=k)
    labels[chosen] = (dataset.original_labels[chosen] + shift) % dataset.num_classes
    flags = np.zeros(n, dtype=bool)
    flags[chosen] = True
    return replace(dataset, training_labels=labels, probe_flags=flags,
                   meta={**dataset.meta, "noise_rate": rate, "noise_seed": seed})


def read_scores(path) -> dict[int, float]:
    """Read a ``id,score`` CSV (with header) of consistency scores."""
    scores: dict[int, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "score"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected header 'id,score'")
        for row in reader:
            s = float(row["score"])
            if not 0 <= s <= 1:
                raise FormatError(f"{path}: score {s} for id {row['id']} outside [0, 1]")
            scores[int(row["id"])] = s
    return scores


def partition_by_score(dataset: ProbeDataset, scores: dict[int, float], threshold: float = 0.5) -> ProbeDataset:
    """Flag examples whose consistency score falls below ``threshold`` (labels untouched)."""
    missing = [i for i in range(len(dataset)) if i not in scores]
    if missing:
        raise KeyError(f"no score for {len(missing)} example ids (first: {missing[0]})")
    flags = np.array([scores[i] < threshold for i in range(len(dataset))], dtype=bool)
    return replace(dataset, probe_flags=flags, meta={**dataset.meta, "score_threshold": threshold})


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expect_ndim: int | None = None) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()} at byte offset 0")
    if expect_ndim is not None and ndim != expect_ndim:
        raise FormatError(f"{path}: expected {expect_ndim} dimensions, magic says {ndim} (byte offset 3)")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension table at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = np.dtype(_IDX_TYPES[dtype_code])
    need = head + int(np.prod(dims)) * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data, expected {need} bytes, file ends at byte offset {len(raw)}")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    body = array.astype(_IDX_TYPES[code]).tobytes()
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    with (gzip.open if os.fspath(path).endswith(".gz") else open)(path, "wb") as fh:
        fh.write(header + body)


def load_idx(images_path, labels_path, num_classes: int = 10, standardize: bool = False,
             test_images=None, test_labels=None) -> ProbeDataset:
    """Images (magic 0x00000803) and labels (0x00000801) scaled to [0, 1] as ``(N, 1, H, W)``."""
    x = _load_images(images_path)
    y = read_idx(labels_path, expect_ndim=1).astype(np.int64)
    if len(x) != len(y):
        raise FormatError(f"{images_path} has {len(x)} images but {labels_path} has {len(y)} labels")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    tx = ty = None
    if test_images is not None:
        tx = _load_images(test_images)
        ty = read_idx(test_labels, expect_ndim=1).astype(np.int64)
    if standardize:
        mu, sd = x.mean(), x.std() or 1.0
        x = (x - mu) / sd
        if tx is not None:
            tx = (tx - mu) / sd
    return from_arrays(x, y, num_classes, tx, ty)


def _load_images(path) -> np.ndarray:
    raw = read_idx(path, expect_ndim=3)
    return (raw.astype(np.float32) / 255.0)[:, None, :, :]


# ---------------------------------------------------------------------------
# synthetic data


def synth_clusters(classes: int, per_class: int, dim: int, margin: float, seed: int = 0,
                   test_per_class: int = 0) -> ProbeDataset:
    """Isotropic unit-variance Gaussian blobs whose means are ``margin`` apart pairwise.

    Means sit at ``margin / sqrt(2)`` times orthonormal directions, so every
    pair of class means is exactly ``margin`` apart.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if classes > dim:
        raise ValueError("need dim >= classes for orthogonal class means")
    rng = np.random.default_rng([seed, 0xC1])
    q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
    means = (q.T * (margin / np.sqrt(2.0))).astype(np.float64)

    def draw(n):
        y = np.repeat(np.arange(classes), n)
        x = means[y] + rng.standard_normal((y.size, dim))
        return x.astype(np.float32), y

    x, y = draw(per_class)
    tx, ty = draw(test_per_class) if test_per_class else (None, None)
    return from_arrays(x, y, classes, tx, ty)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchPlan:
    seed: int = 0
    batch_size: int = 512

    def order(self, ids: np.ndarray, epoch: int) -> np.ndarray:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        rng = np.random.default_rng([self.seed, epoch, 0xBA7])
        return np.asarray(ids)[rng.permutation(len(ids))]


def batches(dataset: ProbeDataset, plan: BatchPlan, epoch: int, ids=None):
    """Yield ``(ids, inputs, training_labels)``; every id appears once per epoch."""
    pool = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    order = plan.order(pool, epoch)
    for s in range(0, len(order), plan.batch_size):
        b = order[s:s + plan.batch_size]
        yield b, dataset.inputs[b], dataset.training_labels[b]


# ---------------------------------------------------------------------------
# bundled MNIST subset


def mnist5k_to_idx(directory) -> tuple[Path, Path]:
    """Write the 5000-image MNIST subset shipped with ``mlxtend`` as IDX files.

    Returns the (images, labels) paths; existing files are reused.
    """
    d = Path(directory)
    img, lab = d / "mnist5k-images-idx3-ubyte", d / "mnist5k-labels-idx1-ubyte"
    if img.exists() and lab.exists():
        return img, lab
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise RuntimeError("the bundled MNIST subset needs `pip install mlxtend`") from exc
    x, y = mnist_data()
    d.mkdir(parents=True, exist_ok=True)
    tmp_i, tmp_l = img.with_suffix(".tmp"), lab.with_suffix(".tmp")
    write_idx(tmp_i, np.asarray(x, dtype=np.uint8).reshape(-1, 28, 28))
    write_idx(tmp_l, np.asarray(y, dtype=np.uint8))
    os.replace(tmp_i, img)
    os.replace(tmp_l, lab)
    return img, lab
