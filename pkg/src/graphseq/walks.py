"""Second-order (p, q) random walks over CSR graphs.

Transition weights follow the node2vec scheme: from `cur` with predecessor
`prev`, a candidate x gets unnormalized weight 1/p if x == prev, 1 if x is
adjacent to prev, else 1/q. The first step (prev == cur) is uniform.

Each walk draws its uniforms from a stateless counter stream keyed by
(seed, epoch, start node), so walks are reproducible independent of batching
and worker count. Dead ends self-stall: a node with no neighbors repeats.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Graph
from .rng import hash_key, mix64, stream_uniform


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 20
    p: float = 0.25
    q: float = 0.25

    def __post_init__(self):
        if self.walk_length < 2:
            raise ConfigError("walk_length must be >= 2")
        if not (self.p > 0 and np.isfinite(self.p)):
            raise ConfigError("p must be finite and positive")
        if not (self.q > 0 and np.isfinite(self.q)):
            raise ConfigError("q must be finite and positive")


def step_distribution(
    g: Graph, prev: int, cur: int, cfg: WalkConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Transition distribution over neighbors(cur) given the previous node.

    Returns (neighbor ids, probabilities). `prev == cur` marks the first step.
    """
    nbrs = g.neighbors(cur)
    if nbrs.shape[0] == 0:
        raise ValueError(f"node {cur} is isolated: no step distribution")
    w = np.full(nbrs.shape[0], 1.0 / cfg.q, dtype=np.float64)
    prev_nbrs = g.neighbors(prev)
    pos = np.searchsorted(prev_nbrs, nbrs)
    pos = np.minimum(pos, max(prev_nbrs.shape[0] - 1, 0))
    adj_to_prev = prev_nbrs.shape[0] > 0
    if adj_to_prev:
        w[prev_nbrs[pos] == nbrs] = 1.0
    w[nbrs == prev] = 1.0 / cfg.p
    return nbrs, w / np.sum(w)


def _walk_batch(g: Graph, starts: np.ndarray, cfg: WalkConfig, keys: np.ndarray) -> np.ndarray:
    """Step a batch of walks simultaneously.

    Per-walk arithmetic is padded and row-local, so the result for each walk
    is bit-identical no matter how starts are grouped into batches.
    """
    length = cfg.walk_length
    n_walks = starts.shape[0]
    inv_p, inv_q = 1.0 / cfg.p, 1.0 / cfg.q
    row_ptr, col_idx = g.row_ptr, g.col_idx
    ekeys = g.edge_keys
    n_u64 = np.uint64(g.n)

    walks = np.empty((n_walks, length), dtype=np.int64)
    walks[:, 0] = starts
    prev = starts.astype(np.int64)
    cur = starts.astype(np.int64)
    for t in range(1, length):
        deg = row_ptr[cur + 1] - row_ptr[cur]
        nxt = cur.copy()  # self-stall default
        active = np.flatnonzero(deg > 0)
        if active.shape[0]:
            acur, aprev, adeg = cur[active], prev[active], deg[active]
            maxdeg = int(adeg.max())
            col_of = np.arange(maxdeg, dtype=np.int64)[None, :]
            valid = col_of < adeg[:, None]
            offs = np.where(valid, row_ptr[acur][:, None] + col_of, 0)
            cand = col_idx[offs]
            probe = aprev.astype(np.uint64)[:, None] * n_u64 + cand.astype(np.uint64)
            pos = np.searchsorted(ekeys, probe.ravel()).reshape(probe.shape)
            hit = pos < ekeys.shape[0]
            adj = hit & (ekeys[np.minimum(pos, ekeys.shape[0] - 1)] == probe)
            w = np.full(cand.shape, inv_q, dtype=np.float64)
            w[adj] = 1.0
            w[cand == aprev[:, None]] = inv_p
            w[~valid] = 0.0
            cums = np.cumsum(w, axis=1)
            total = cums[:, -1]
            u = stream_uniform(keys[active], np.uint64(t))
            target = u * total
            idx = np.sum(cums <= target[:, None], axis=1)
            idx = np.minimum(idx, adeg - 1)
            nxt[active] = col_idx[row_ptr[acur] + idx]
        walks[:, t] = nxt
        prev, cur = cur, nxt
    return walks


def walk_stream_keys(seed: int, epoch: int, starts: np.ndarray) -> np.ndarray:
    """Vectorized hash_key(seed, epoch, start) for every start node."""
    prefix = np.uint64(hash_key(seed, epoch))
    return mix64(prefix ^ starts.astype(np.uint64))


def generate_walk(g: Graph, start: int, cfg: WalkConfig, seed: int, epoch: int) -> np.ndarray:
    """One walk of exactly walk_length nodes, keyed by (seed, epoch, start)."""
    starts = np.array([start], dtype=np.int64)
    return _walk_batch(g, starts, cfg, walk_stream_keys(seed, epoch, starts))[0]


def generate_epoch_walks(
    g: Graph, cfg: WalkConfig, seed: int, epoch: int, workers: int = 1
) -> np.ndarray:
    """One walk per node; row i starts at node i. Independent of worker count."""
    starts = np.arange(g.n, dtype=np.int64)
    keys = walk_stream_keys(seed, epoch, starts)
    if workers <= 1 or g.n < 2 * workers:
        return _walk_batch(g, starts, cfg, keys)
    out = np.empty((g.n, cfg.walk_length), dtype=np.int64)
    chunks = np.array_split(np.arange(g.n), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_walk_batch, g, starts[c], cfg, keys[c]) for c in chunks
        ]
        for c, fut in zip(chunks, futures):
            out[c] = fut.result()
    return out
