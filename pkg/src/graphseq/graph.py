"""Graph data model: CSR adjacency, node features, dataset IO, sparse kernels.

Graphs are undirected, stored in CSR with each edge in both rows, neighbor
ids sorted ascending per row, no self-loops, no duplicates. Features are
float32; loss/metric accumulation elsewhere is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError

FEATURES_MAGIC = b"GSPTFEAT"
FEATURES_VERSION = 1

SPLIT_NAMES = ("train", "valid", "test")


@dataclass(eq=False)
class Graph:
    """Immutable CSR adjacency over n nodes (undirected, symmetric)."""

    n: int
    row_ptr: np.ndarray  # int64, length n+1
    col_idx: np.ndarray  # int64, length m, sorted ascending per row
    _edge_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        """Directed edge-slot count (each undirected edge counted twice)."""
        return int(self.col_idx.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.col_idx[self.row_ptr[u] : self.row_ptr[u + 1]]

    @property
    def edge_keys(self) -> np.ndarray:
        """Sorted u*n+v keys for all edge slots; used for O(log m) membership."""
        if self._edge_keys is None:
            rows = np.repeat(np.arange(self.n, dtype=np.uint64), self.degrees)
            self._edge_keys = rows * np.uint64(self.n) + self.col_idx.astype(np.uint64)
        return self._edge_keys

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        i = np.searchsorted(row, v)
        return bool(i < row.shape[0] and row[i] == v)

    def undirected_edges(self) -> np.ndarray:
        """(m/2, 2) array of u < v pairs."""
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        keep = rows < self.col_idx
        return np.stack([rows[keep], self.col_idx[keep]], axis=1)

    def validate(self) -> None:
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n + 1,) or rp[0] != 0 or rp[-1] != ci.shape[0]:
            raise DataError("row_ptr shape/endpoints inconsistent")
        if np.any(np.diff(rp) < 0):
            raise DataError("row_ptr not nondecreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n):
            raise DataError("neighbor id out of range")
        for u in range(self.n):
            row = ci[rp[u] : rp[u + 1]]
            if np.any(np.diff(row) <= 0):
                raise DataError(f"row {u} not strictly sorted (duplicates?)")
            if np.any(row == u):
                raise DataError(f"self-loop at node {u}")
        # symmetry
        keys = self.edge_keys
        rows = np.repeat(np.arange(self.n, dtype=np.uint64), self.degrees)
        rev = ci.astype(np.uint64) * np.uint64(self.n) + rows
        pos = np.searchsorted(keys, rev)
        ok = (pos < keys.shape[0]) & (keys[np.minimum(pos, keys.shape[0] - 1)] == rev)
        if not np.all(ok):
            raise DataError("adjacency not symmetric")


def graph_from_edges(n: int, u: np.ndarray, v: np.ndarray) -> Graph:
    """Build a clean undirected Graph from raw endpoint arrays.

    Self-loops are dropped; duplicate edges (either direction) deduplicated.
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    if u.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
        raise DataError("edge endpoint id out of range")
    keep = u != v
    u, v = u[keep], v[keep]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    keys = src.astype(np.uint64) * np.uint64(n) + dst.astype(np.uint64)
    keys = np.unique(keys)
    src = (keys // np.uint64(n)).astype(np.int64)
    dst = (keys % np.uint64(n)).astype(np.int64)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_ptr, src + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)
    return Graph(n=n, row_ptr=row_ptr, col_idx=dst)


@dataclass(eq=False)
class NormAdjacency:
    """Symmetric degree-normalized adjacency with self-loops.

    weight(u, v) = 1 / sqrt((deg(u)+1) (deg(v)+1)); row set = neighbors + self.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    weights: np.ndarray  # float64, aligned with col_idx
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.weights, self.col_idx, self.row_ptr), shape=(self.n, self.n)
            )
        return self._csr


def build_norm_adjacency(g: Graph) -> NormAdjacency:
    deg = g.degrees.astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    new_deg = g.degrees + 1
    row_ptr = np.zeros(g.n + 1, dtype=np.int64)
    np.cumsum(new_deg, out=row_ptr[1:])
    m = int(row_ptr[-1])
    col_idx = np.empty(m, dtype=np.int64)
    weights = np.empty(m, dtype=np.float64)
    for u in range(g.n):
        nbrs = g.neighbors(u)
        i = np.searchsorted(nbrs, u)  # insertion point for the self entry
        lo = row_ptr[u]
        col_idx[lo : lo + i] = nbrs[:i]
        col_idx[lo + i] = u
        col_idx[lo + i + 1 : row_ptr[u + 1]] = nbrs[i:]
        row = col_idx[lo : row_ptr[u + 1]]
        weights[lo : row_ptr[u + 1]] = inv_sqrt[u] * inv_sqrt[row]
    return NormAdjacency(n=g.n, row_ptr=row_ptr, col_idx=col_idx, weights=weights)


def spmm(adj: NormAdjacency, x: np.ndarray) -> np.ndarray:
    """Sparse row-normalized multiply: out[u] = sum_v weight(u,v) * x[v]."""
    if x.shape[0] != adj.n:
        raise DataError(f"spmm dimension mismatch: adj n={adj.n}, x rows={x.shape[0]}")
    out = adj.csr @ x
    return np.asarray(out, dtype=x.dtype)


@dataclass(eq=False)
class Dataset:
    """A graph with node features and optional labels / splits / class texts."""

    graph: Graph
    features: np.ndarray  # float32 (n, d)
    labels: np.ndarray | None = None  # int64 (n,), -1 = unlabeled
    splits: dict[str, np.ndarray] | None = None  # name -> bool mask (n,)
    class_desc: np.ndarray | None = None  # float32 (C, d)
    name: str = "dataset"

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        labeled = self.labels[self.labels >= 0]
        return int(labeled.max()) + 1 if labeled.size else 0

    def split_nodes(self, split: str) -> np.ndarray:
        if self.splits is None or split not in self.splits:
            raise DataError(f"dataset has no '{split}' split")
        return np.flatnonzero(self.splits[split])


def write_features_bin(path: Path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<I", FEATURES_VERSION))
        f.write(struct.pack("<QQ", x.shape[0], x.shape[1]))
        f.write(x.astype("<f4").tobytes())


def read_features_bin(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURES_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FEATURES_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        n, d = struct.unpack("<QQ", f.read(16))
        raw = f.read(n * d * 4)
        if len(raw) != n * d * 4:
            raise DataError(f"{path}: truncated payload")
    x = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise DataError(f"{path}: non-finite feature value")
    return x


def _read_pairs_tsv(path: Path) -> tuple[np.ndarray, list[str]]:
    first, second = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two tab-separated fields")
            first.append(int(parts[0]))
            second.append(parts[1])
    return np.asarray(first, dtype=np.int64), second


def load_dataset(directory: str | Path) -> Dataset:
    """Load a dataset directory (features.bin + edges.tsv, optional extras)."""
    directory = Path(directory)
    feat_path = directory / "features.bin"
    edge_path = directory / "edges.tsv"
    for p in (feat_path, edge_path):
        if not p.exists():
            raise DataError(f"missing file: {p}")
    features = read_features_bin(feat_path)
    n = features.shape[0]

    us, vs = [], []
    with open(edge_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{edge_path}:{lineno}: expected 'u<TAB>v'")
            us.append(int(parts[0]))
            vs.append(int(parts[1]))
    u = np.asarray(us, dtype=np.int64)
    v = np.asarray(vs, dtype=np.int64)
    if u.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
        raise DataError(f"{edge_path}: node id out of range [0, {n})")
    graph = graph_from_edges(n, u, v)

    labels = None
    labels_path = directory / "labels.tsv"
    if labels_path.exists():
        nodes, classes = _read_pairs_tsv(labels_path)
        if nodes.size and nodes.max() >= n:
            raise DataError("label/node count mismatch")
        labels = np.full(n, -1, dtype=np.int64)
        labels[nodes] = [int(c) for c in classes]
        labeled = labels[labels >= 0]
        if labeled.size:
            ids = np.unique(labeled)
            if ids[0] < 0 or not np.array_equal(ids, np.arange(ids.shape[0])):
                raise DataError("label ids not dense in [0, C)")

    splits = None
    splits_path = directory / "splits.tsv"
    if splits_path.exists():
        nodes, names = _read_pairs_tsv(splits_path)
        if nodes.size and nodes.max() >= n:
            raise DataError("split/node count mismatch")
        splits = {s: np.zeros(n, dtype=bool) for s in SPLIT_NAMES}
        for node, name in zip(nodes, names):
            if name not in splits:
                raise DataError(f"unknown split name '{name}'")
            splits[name][node] = True
        overlap = splits["train"] & splits["valid"] | splits["train"] & splits["test"]
        overlap |= splits["valid"] & splits["test"]
        if np.any(overlap):
            raise DataError("split masks overlap")

    class_desc = None
    desc_path = directory / "class_desc.bin"
    if desc_path.exists():
        class_desc = read_features_bin(desc_path)
        if class_desc.shape[1] != features.shape[1]:
            raise DataError("class_desc dimension mismatch with features")

    return Dataset(
        graph=graph,
        features=features,
        labels=labels,
        splits=splits,
        class_desc=class_desc,
        name=directory.name,
    )


def save_dataset(directory: str | Path, ds: Dataset) -> None:
    """Write a dataset directory in the bit-exact on-disk layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features_bin(directory / "features.bin", ds.features)
    edges = ds.graph.undirected_edges()
    with open(directory / "edges.tsv", "w", encoding="utf-8") as f:
        for u, v in edges:
            f.write(f"{u}\t{v}\n")
    if ds.labels is not None:
        with open(directory / "labels.tsv", "w", encoding="utf-8") as f:
            for node in np.flatnonzero(ds.labels >= 0):
                f.write(f"{node}\t{ds.labels[node]}\n")
    if ds.splits is not None:
        with open(directory / "splits.tsv", "w", encoding="utf-8") as f:
            for name in SPLIT_NAMES:
                for node in np.flatnonzero(ds.splits[name]):
                    f.write(f"{node}\t{name}\n")
    if ds.class_desc is not None:
        write_features_bin(directory / "class_desc.bin", ds.class_desc)
