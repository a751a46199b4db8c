"""Partition a graph into ~fixed-size node blocks for partition-per-batch training.

Stand-in for a multilevel partitioner: seeded multi-source BFS region growing.
Linear time, deterministic, good-enough locality for batch containers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import Graph
from .rng import substream


@dataclass(eq=False)
class PartitionMap:
    assignment: np.ndarray  # int64 (n,), part id per node
    part_sizes: np.ndarray  # int64 (P,)

    @property
    def num_parts(self) -> int:
        return int(self.part_sizes.shape[0])

    def validate(self) -> None:
        if np.any(self.assignment < 0) or np.any(self.assignment >= self.num_parts):
            raise DataError("node with invalid part assignment")
        sizes = np.bincount(self.assignment, minlength=self.num_parts)
        if not np.array_equal(sizes, self.part_sizes):
            raise DataError("part_sizes inconsistent with assignment")
        if np.any(self.part_sizes == 0):
            raise DataError("empty part")


def partition(g: Graph, target_size: int, seed: int) -> PartitionMap:
    """Grow P = ceil(n/target_size) BFS regions from random seeds.

    Region sizes are capped at 2*target_size; nodes left unreached (other
    components, or blocked by caps) go to the smallest adjacent region below
    the cap, falling back to the smallest region overall.
    """
    if g.n == 0:
        raise DataError("cannot partition an empty graph")
    if target_size < 1:
        raise DataError("target_size must be >= 1")
    n = g.n
    num_parts = -(-n // target_size)
    cap = 2 * target_size
    rng = substream(seed, "partition")
    seeds = rng.choice(n, size=num_parts, replace=False)

    assignment = np.full(n, -1, dtype=np.int64)
    sizes = np.zeros(num_parts, dtype=np.int64)
    queues = []
    for p, s in enumerate(seeds):
        assignment[s] = p
        sizes[p] = 1
        queues.append(deque([int(s)]))

    # Round-robin growth: each live region claims one node per turn.
    live = True
    while live:
        live = False
        for p in range(num_parts):
            if sizes[p] >= cap:
                queues[p].clear()
                continue
            q = queues[p]
            while q:
                u = q[0]
                claimed = False
                for v in g.neighbors(u):
                    if assignment[v] == -1:
                        assignment[v] = p
                        sizes[p] += 1
                        q.append(int(v))
                        claimed = True
                        break
                if claimed:
                    live = True
                    break
                q.popleft()

    # Leftovers: smallest adjacent region under cap, else smallest overall.
    for u in np.flatnonzero(assignment == -1):
        neighbor_parts = {int(assignment[v]) for v in g.neighbors(u) if assignment[v] >= 0}
        candidates = [p for p in neighbor_parts if sizes[p] < cap]
        if not candidates:
            candidates = [p for p in range(num_parts) if sizes[p] < cap]
        best = min(candidates, key=lambda p: (sizes[p], p))
        assignment[u] = best
        sizes[best] += 1

    pm = PartitionMap(assignment=assignment, part_sizes=sizes)
    pm.validate()
    return pm


def induced_subgraph(g: Graph, pm: PartitionMap, part: int) -> tuple[Graph, np.ndarray]:
    """Subgraph over one part's nodes keeping only intra-part edges.

    Returns (local graph, node_map) where node_map[local] = global id.
    """
    if part < 0 or part >= pm.num_parts:
        raise DataError(f"invalid part id {part}")
    node_map = np.flatnonzero(pm.assignment == part)
    local_of = np.full(g.n, -1, dtype=np.int64)
    local_of[node_map] = np.arange(node_map.shape[0])
    k = node_map.shape[0]
    row_ptr = np.zeros(k + 1, dtype=np.int64)
    cols = []
    for i, u in enumerate(node_map):
        nbrs = g.neighbors(u)
        local = local_of[nbrs]
        local = local[local >= 0]
        cols.append(np.sort(local))
        row_ptr[i + 1] = row_ptr[i] + local.shape[0]
    col_idx = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    return Graph(n=k, row_ptr=row_ptr, col_idx=col_idx.astype(np.int64)), node_map


def edge_cut(g: Graph, assignment: np.ndarray) -> int:
    """Number of undirected edges crossing part boundaries."""
    edges = g.undirected_edges()
    if edges.size == 0:
        return 0
    return int(np.sum(assignment[edges[:, 0]] != assignment[edges[:, 1]]))


def save_partition(path: str | Path, pm: PartitionMap) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#P={pm.num_parts}\n")
        for node, part in enumerate(pm.assignment):
            f.write(f"{node}\t{part}\n")


def load_partition(path: str | Path, n: int) -> PartitionMap:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("#P="):
            raise DataError(f"{path}: missing '#P=' header")
        num_parts = int(header[3:])
        assignment = np.full(n, -1, dtype=np.int64)
        for lineno, line in enumerate(f, 2):
            line = line.strip()
            if not line:
                continue
            node_s, part_s = line.split("\t")
            node, part = int(node_s), int(part_s)
            if node >= n or part >= num_parts:
                raise DataError(f"{path}:{lineno}: id out of range")
            assignment[node] = part
    if np.any(assignment < 0):
        raise DataError(f"{path}: unassigned nodes")
    sizes = np.bincount(assignment, minlength=num_parts)
    pm = PartitionMap(assignment=assignment, part_sizes=sizes.astype(np.int64))
    pm.validate()
    return pm
