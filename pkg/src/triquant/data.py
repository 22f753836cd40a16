"""Datasets, the label-overlap similarity predicate, synthetic data, and file formats.

Feature files come in two flavors: a binary format with a 16-byte header
(4-byte magic, uint32 version, uint32 N, uint32 D, all little-endian) followed
by row-major little-endian float32 values, and a headerless comma-separated
text format. Labels live one line per item as whitespace-separated integer ids.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

FEATURES_MAGIC = b"TQFT"
FEATURES_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class LabeledDataset:
    """Raw feature vectors plus per-item label sets and stable string ids."""

    features: np.ndarray
    labels: list[frozenset[int]]
    ids: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n = self.features.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise DataError(
                f"row counts disagree: {n} features, {len(self.labels)} labels, "
                f"{len(self.ids)} ids"
            )
        if not np.all(np.isfinite(self.features)):
            bad = int(np.argwhere(~np.isfinite(self.features).all(axis=1))[0, 0])
            raise DataError(f"non-finite feature value at row {bad}")
        self.labels = [frozenset(int(v) for v in s) for s in self.labels]
        for i, s in enumerate(self.labels):
            if not s:
                raise DataError(f"item {i} has no labels")
            if any(v < 0 for v in s):
                raise DataError(f"item {i} has a negative label id")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class SimilarityPredicate:
    """Pairwise similarity s(i, j) = 1 iff the label sets of i and j intersect.

    Labels are packed into uint64 bit planes so whole similarity blocks can be
    computed with vectorized bitwise ands.
    """

    def __init__(self, labels: list[frozenset[int]]):
        if not labels:
            raise DataError("empty label list")
        distinct = sorted(set().union(*labels))
        bit_of = {lab: pos for pos, lab in enumerate(distinct)}
        planes = max(1, -(-len(distinct) // 64))
        masks = np.zeros((len(labels), planes), dtype=np.uint64)
        for i, s in enumerate(labels):
            for lab in s:
                pos = bit_of[lab]
                masks[i, pos // 64] |= np.uint64(1) << np.uint64(pos % 64)
        self._masks = masks
        self._n = len(labels)

    def __call__(self, i: int, j: int) -> int:
        if not (0 <= i < self._n and 0 <= j < self._n):
            raise IndexError(f"item index out of range: ({i}, {j}) for n={self._n}")
        return int(bool((self._masks[i] & self._masks[j]).any()))

    def pairwise(self, rows, cols) -> np.ndarray:
        """Boolean similarity block for index arrays `rows` x `cols`."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self._n):
            raise IndexError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= self._n):
            raise IndexError("column index out of range")
        hits = self._masks[rows][:, None, :] & self._masks[cols][None, :, :]
        return (hits != 0).any(axis=2)


@dataclass
class DatasetSplit:
    """Query / database / train index lists; train is sampled from database."""

    query_indices: np.ndarray
    database_indices: np.ndarray
    train_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    def __post_init__(self):
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        self.database_indices = np.asarray(self.database_indices, dtype=np.int64)
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        if np.intersect1d(self.query_indices, self.database_indices).size:
            raise DataError("query and database indices overlap")
        if self.train_indices.size and not np.isin(
            self.train_indices, self.database_indices
        ).all():
            raise DataError("train indices must be a subset of database indices")


def save_features(path, features: np.ndarray, format: str = "binary") -> None:
    """Write a feature matrix as features.bin or features.csv.

    Args:
        path: destination file.
        features: N x D real matrix; stored as float32 in the binary format.
        format: "binary" or "csv".
    """
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be 2-d")
    if format == "binary":
        n, d = features.shape
        payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(FEATURES_MAGIC, FEATURES_VERSION, n, d))
            fh.write(payload)
    elif format == "csv":
        with open(path, "w") as fh:
            for row in features:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown feature format: {format!r}")


def load_features(path, format: str = "binary") -> np.ndarray:
    """Read a feature matrix written by save_features; row order preserved.

    Raises:
        FormatError: malformed header, truncated payload, or unparsable text.
        DataError: a non-finite value (reported with its row index).
    """
    if format == "binary":
        with open(path, "rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                raise FormatError(f"{path}: truncated header")
            magic, version, n, d = _HEADER.unpack(header)
            if magic != FEATURES_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            if version != FEATURES_VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            payload = fh.read()
        expected = n * d * 4
        if len(payload) != expected:
            raise FormatError(
                f"{path}: payload is {len(payload)} bytes, expected {expected}"
            )
        mat = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    elif format == "csv":
        rows = []
        width = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = [float(tok) for tok in line.split(",")]
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise FormatError(
                        f"{path}:{lineno}: expected {width} columns, got {len(row)}"
                    )
                rows.append(row)
        mat = np.array(rows, dtype=np.float64) if rows else np.zeros((0, 0))
    else:
        raise ValueError(f"unknown feature format: {format!r}")
    finite = np.isfinite(mat).all(axis=1) if mat.size else np.ones(mat.shape[0], bool)
    if not finite.all():
        raise DataError(f"{path}: non-finite value at row {int(np.argmin(finite))}")
    return mat


def save_labels(path, labels: list[frozenset[int]]) -> None:
    with open(path, "w") as fh:
        for s in labels:
            fh.write(" ".join(str(v) for v in sorted(s)) + "\n")


def load_labels(path) -> list[frozenset[int]]:
    """Read labels.txt: one line per item, whitespace-separated integer ids."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                raise FormatError(f"{path}:{lineno}: item has no labels")
            try:
                labels.append(frozenset(int(t) for t in toks))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return labels


def save_split(path, split: DatasetSplit) -> None:
    doc = {
        "query": [int(v) for v in split.query_indices],
        "database": [int(v) for v in split.database_indices],
        "train": [int(v) for v in split.train_indices],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_split(path) -> DatasetSplit:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    for key in ("query", "database", "train"):
        if key not in doc:
            raise FormatError(f"{path}: missing key {key!r}")
    return DatasetSplit(
        np.asarray(doc["query"], dtype=np.int64),
        np.asarray(doc["database"], dtype=np.int64),
        np.asarray(doc["train"], dtype=np.int64),
    )


def make_synthetic(
    n_clusters: int, per_cluster: int, d: int, sigma: float, seed: int
) -> LabeledDataset:
    """Generate a separable Gaussian-cluster dataset with known labels.

    Cluster centers are uniform over the hypercube [0, 10]^d; each point is its
    center plus isotropic Gaussian noise with std sigma, labeled by cluster id.
    Deterministic for a fixed seed.
    """
    if n_clusters < 2:
        raise ValueError("need at least 2 clusters")
    if per_cluster < 1:
        raise ValueError("need at least 1 point per cluster")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 10.0, size=(n_clusters, d))
    noise = rng.normal(0.0, sigma, size=(n_clusters * per_cluster, d)) if sigma > 0 \
        else np.zeros((n_clusters * per_cluster, d))
    features = np.repeat(centers, per_cluster, axis=0) + noise
    labels = [frozenset([c]) for c in range(n_clusters) for _ in range(per_cluster)]
    ids = [f"item-{i:06d}" for i in range(n_clusters * per_cluster)]
    return LabeledDataset(features, labels, ids)


def split(dataset: LabeledDataset, n_query: int, n_train: int, seed: int) -> DatasetSplit:
    """Sample a query/database/train split without replacement.

    The database is everything outside the query sample; the train set is a
    uniform subsample of the database. Deterministic per seed.
    """
    n = len(dataset)
    if n_query < 0 or n_train < 0:
        raise ValueError("counts must be non-negative")
    if n_query + 1 > n:
        raise ValueError(f"n_query={n_query} leaves an empty database (N={n})")
    if n_train > n - n_query:
        raise ValueError(f"n_train={n_train} exceeds database size {n - n_query}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    query = perm[:n_query]
    database = perm[n_query:]
    train = database[rng.permutation(database.size)[:n_train]]
    return DatasetSplit(query, database, train)
