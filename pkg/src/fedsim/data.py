"""Datasets, IDX ingestion, synthetic data and non-IID partitioners."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Stream tags keep the seeded generators of different consumers apart.
_TAG_SYNTH = 11
_TAG_SORT = 12
_TAG_DIRICHLET = 13
_TAG_BATCH = 14
_TAG_SPLIT = 15


class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXTruncatedError(IDXFormatError):
    pass


class IDXCountMismatchError(IDXFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("dataset features must be a non-empty 2-D matrix")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Partition:
    client_indices: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.client_indices)

    def validate(self, n: int, full_cover: bool = True) -> None:
        """Raise if lists overlap, are empty, or (optionally) miss indices."""
        seen = np.zeros(n, dtype=bool)
        for i, idx in enumerate(self.client_indices):
            if len(idx) == 0:
                raise ValueError(f"client {i} has no examples")
            if np.any(seen[idx]) or len(np.unique(idx)) != len(idx):
                raise ValueError(f"client {i} shares examples with another client")
            seen[idx] = True
        if full_cover and not seen.all():
            raise ValueError("partition does not cover every example")


def _rng(seed, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, *map(int, extra)])


# --------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IDXTruncatedError(f"{path}: file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header < count:
        raise IDXTruncatedError(
            f"{path}: expected {count} data bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed)."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IDXCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(features, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray,
              compress: bool = False) -> None:
    """Write ``uint8`` images ``[n, rows, cols]`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    img = struct.pack(">I", IMAGE_MAGIC) + struct.pack(">" + "I" * images.ndim, *images.shape)
    lab = struct.pack(">I", LABEL_MAGIC) + struct.pack(">I", labels.shape[0])
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as fh:
        fh.write(img + images.tobytes())
    with opener(labels_path, "wb") as fh:
        fh.write(lab + labels.tobytes())


# --------------------------------------------------------------------------
# synthetic data


def _class_directions(num_classes: int, dim: int) -> np.ndarray:
    # Fixed unit vectors (independent of the run seed) so class geometry is
    # a pure function of (num_classes, dim).
    rng = np.random.default_rng([num_classes, dim, _TAG_SYNTH])
    u = rng.normal(size=(num_classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def synth_gaussian_mixture(num_classes: int, per_class: int, dim: int,
                           separation: float, seed: int) -> Dataset:
    """Isotropic unit-variance Gaussian blobs centred at ``separation * u_k``.

    Features are min-max scaled into [0, 1] with a common affine map, which
    preserves the class geometry up to a global scale.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must all be >= 1")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = _rng(seed, _TAG_SYNTH)
    centers = separation * _class_directions(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + rng.normal(size=(labels.shape[0], dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(x, labels, max(num_classes, 2))


def train_test_split(ds: Dataset, test_fraction: float, seed: int):
    """Stratified split; the test part is kept outside every partition."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = _rng(seed, _TAG_SPLIT)
    train, test = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        idx = idx[rng.permutation(idx.shape[0])]
        cut = int(round(test_fraction * idx.shape[0]))
        test.append(idx[:cut])
        train.append(idx[cut:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


# --------------------------------------------------------------------------
# partitioners


def _label_shards(ds: Dataset, num_shards: int):
    n = len(ds)
    if n % num_shards:
        raise ValueError(f"dataset size {n} is not divisible into {num_shards} shards")
    order = np.argsort(ds.labels, kind="stable")
    shards = order.reshape(num_shards, n // num_shards)
    # a shard's label is its most frequent label
    shard_labels = np.array([np.bincount(ds.labels[s]).argmax() for s in shards])
    return shards, shard_labels


def sort_and_partition(ds: Dataset, P: int, seed: int, paired: bool = False,
                       max_draws: int = 10_000) -> Partition:
    """Sort by label, cut ``2P`` equal shards, give each client two of them.

    The random assignment is redrawn until no client holds two shards with
    the same label. With ``paired=True`` clients ``2k`` and ``2k+1`` split
    the same two label blocks between them, so they share a label pair.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    shards, shard_labels = _label_shards(ds, 2 * P)
    if paired:
        if P % 2:
            raise ValueError("paired populations need an even number of clients")
        clients = []
        for k in range(P // 2):
            a, b, c, d = 4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3
            clients.append(np.sort(np.concatenate([shards[a], shards[c]])))
            clients.append(np.sort(np.concatenate([shards[b], shards[d]])))
        return Partition(clients)
    rng = _rng(seed, _TAG_SORT)
    for _ in range(max_draws):
        perm = rng.permutation(2 * P).reshape(P, 2)
        if np.all(shard_labels[perm[:, 0]] != shard_labels[perm[:, 1]]):
            return Partition([np.sort(np.concatenate(shards[p])) for p in perm])
    raise ValueError(
        f"no shard assignment with distinct labels per client after {max_draws} draws"
    )


def dirichlet_proportions(num_classes: int, P: int, rho: float, seed: int) -> np.ndarray:
    """``P`` draws from ``Dir(rho * q)`` with uniform ``q``, via normalised Gammas."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    rng = _rng(seed, _TAG_DIRICHLET)
    g = rng.gamma(rho / num_classes, 1.0, size=(P, num_classes))
    sums = g.sum(axis=1, keepdims=True)
    # tiny concentrations can underflow every Gamma draw of a row to zero
    for i in np.flatnonzero(sums[:, 0] == 0):
        g[i] = 0.0
        g[i, rng.integers(num_classes)] = 1.0
    return g / g.sum(axis=1, keepdims=True)


def _largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, P: int, rho: float, seed: int,
                        return_proportions: bool = False):
    """Class-skewed partition with ``len(ds) // P`` examples per client.

    Requested class counts come from the client's proportion vector by
    largest-remainder rounding. When a class pool runs dry the shortfall is
    taken from whichever class has the most examples left.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    n = len(ds)
    if P < 1 or P > n:
        raise ValueError(f"P must lie in [1, {n}], got {P}")
    K = ds.num_classes
    props = dirichlet_proportions(K, P, rho, seed)
    rng = _rng(seed, _TAG_DIRICHLET, 1)
    pools = []
    for k in range(K):
        idx = np.flatnonzero(ds.labels == k)
        pools.append(list(idx[rng.permutation(idx.shape[0])]))
    per_client = n // P
    clients = []
    for i in range(P):
        want = _largest_remainder(props[i], per_client)
        taken: list = []
        for k in range(K):
            take = min(int(want[k]), len(pools[k]))
            taken.extend(pools[k][:take])
            del pools[k][:take]
            want[k] -= take
        short = int(want.sum())
        while short > 0:
            k = max(range(K), key=lambda c: (len(pools[c]), -c))
            take = min(short, len(pools[k]))
            taken.extend(pools[k][:take])
            del pools[k][:take]
            short -= take
        clients.append(np.sort(np.asarray(taken, dtype=np.int64)))
    part = Partition(clients)
    return (part, props) if return_proportions else part


def class_histogram(ds: Dataset, indices) -> np.ndarray:
    return np.bincount(ds.labels[np.asarray(indices)], minlength=ds.num_classes)


# --------------------------------------------------------------------------
# local batch streams


def num_local_steps(n_i: int, B: int, E: int) -> int:
    return E * -(-n_i // B)


def epoch_batches(indices: Sequence[int], B: int, E: int,
                  seed: Union[int, Sequence[int]]) -> List[np.ndarray]:
    """Index batches for ``E`` shuffled passes over ``indices``.

    ``seed`` may be an int or a sequence of ints such as
    ``(run_seed, client_id, round)``; equal seeds give equal streams.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot batch an empty index list")
    if B < 1 or E < 1:
        raise ValueError("batch size and epochs must be >= 1")
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.default_rng([*entropy, _TAG_BATCH])
    batches = []
    for _ in range(E):
        perm = idx[rng.permutation(idx.shape[0])]
        batches.extend(perm[s:s + B] for s in range(0, perm.shape[0], B))
    return batches
