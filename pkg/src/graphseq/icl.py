"""In-context N-way K-shot node classification via augmented class nodes.

Each task appends one synthetic node per class, wired to its K support
examples. Walks over the augmented graph are encoded in eval mode; a node's
embedding is the mean of its pooled representation over every sequence that
contains it, and queries are classified by cosine against the class-node
embeddings. Also hosts the feature-propagation prototype baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import Dataset, Graph, build_norm_adjacency, graph_from_edges, spmm
from .model import ModelConfig, embed_ids, forward, pool_batch
from .rng import hash_key, substream
from .walks import WalkConfig, generate_epoch_walks


@dataclass(eq=False)
class ICLTask:
    classes: np.ndarray  # (N,) class ids, ascending
    support: dict[int, np.ndarray]  # class id -> (K,) node ids
    queries: np.ndarray  # test nodes of the selected classes
    template: int

    @property
    def n_way(self) -> int:
        return int(self.classes.shape[0])

    @property
    def k_shot(self) -> int:
        return int(next(iter(self.support.values())).shape[0])


def sample_task(ds: Dataset, n_way: int, k_shot: int, seed: int, template: int) -> ICLTask:
    """Deterministic task for one template index.

    Classes are drawn among those with at least k_shot train nodes; queries
    are the full test split filtered to the selected classes.
    """
    if ds.labels is None or ds.splits is None:
        raise DataError("ICL tasks need labels and splits")
    rng = substream(seed, "icl-task", template)
    train_nodes = ds.split_nodes("train")
    test_nodes = ds.split_nodes("test")
    eligible = []
    for c in range(ds.num_classes):
        pool = train_nodes[ds.labels[train_nodes] == c]
        if pool.shape[0] >= k_shot:
            eligible.append(c)
    if len(eligible) < n_way:
        raise DataError(
            f"need {n_way} classes with >= {k_shot} train nodes, have {len(eligible)}"
        )
    classes = np.sort(rng.choice(np.asarray(eligible), size=n_way, replace=False))
    support = {}
    for c in classes:
        pool = train_nodes[ds.labels[train_nodes] == c]
        support[int(c)] = np.sort(rng.choice(pool, size=k_shot, replace=False))
    queries = test_nodes[np.isin(ds.labels[test_nodes], classes)]
    return ICLTask(classes=classes, support=support, queries=queries, template=template)


def build_augmented_graph(
    ds: Dataset, task: ICLTask, mode: str
) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Append one class node per task class, connected to its support nodes.

    Returns (augmented graph, extended features, class node ids). Class-node
    features are zero rows ("void") or the class description rows ("desc").
    """
    if mode not in ("void", "desc"):
        raise DataError(f"unknown class-feature mode '{mode}'")
    if mode == "desc" and ds.class_desc is None:
        raise DataError("mode 'desc' requires class_desc.bin in the dataset")
    n = ds.graph.n
    class_nodes = n + np.arange(task.n_way, dtype=np.int64)
    base = ds.graph.undirected_edges()
    extra_u, extra_v = [], []
    for i, c in enumerate(task.classes):
        for s in task.support[int(c)]:
            extra_u.append(n + i)
            extra_v.append(int(s))
    u = np.concatenate([base[:, 0], np.asarray(extra_u, dtype=np.int64)])
    v = np.concatenate([base[:, 1], np.asarray(extra_v, dtype=np.int64)])
    g_aug = graph_from_edges(n + task.n_way, u, v)

    d = ds.features.shape[1]
    rows = np.zeros((task.n_way, d), dtype=np.float32)
    if mode == "desc":
        rows = ds.class_desc[task.classes].astype(np.float32)
    x_aug = np.concatenate([ds.features, rows], axis=0)
    return g_aug, x_aug, class_nodes


def embed_augmented(
    params: dict,
    cfg: ModelConfig,
    g_aug: Graph,
    x_aug: np.ndarray,
    walk_cfg: WalkConfig,
    repeats: int,
    seed: int,
    chunk: int = 4096,
) -> np.ndarray:
    """Eval-mode embeddings: mean pooled representation over all sequences
    containing each node, across `repeats` one-walk-per-node epochs."""
    n = g_aug.n
    d = cfg.hidden_dim
    acc = np.zeros((n, d), dtype=np.float64)
    cnt = np.zeros(n, dtype=np.int64)
    walks = np.concatenate(
        [generate_epoch_walks(g_aug, walk_cfg, seed, r) for r in range(repeats)]
    )
    for lo in range(0, walks.shape[0], chunk):
        batch = walks[lo : lo + chunk]
        h0 = embed_ids(params, batch, x_aug)
        y, _, _ = forward(params, cfg, h0, train=False)
        keys, _, _, pooled, stride = pool_batch(y, batch)
        nodes = (keys % stride).astype(np.int64)
        np.add.at(acc, nodes, pooled.astype(np.float64))
        np.add.at(cnt, nodes, 1)
    if np.any(cnt == 0):
        raise DataError("node never visited by any walk")
    return acc / cnt[:, None]


def _cosine_matrix(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Cosine of every query against every reference; zero-norm rows give -1."""
    qn = np.linalg.norm(queries, axis=1)
    rn = np.linalg.norm(refs, axis=1)
    sims = queries @ refs.T
    denom = np.outer(qn, rn)
    ok = denom > 0
    out = np.full(sims.shape, -1.0)
    out[ok] = sims[ok] / denom[ok]
    return out


def predict(embeddings: np.ndarray, task: ICLTask, class_nodes: np.ndarray) -> np.ndarray:
    """Class per query: argmax cosine vs class-node embeddings, ties to the
    lowest class index."""
    sims = _cosine_matrix(embeddings[task.queries], embeddings[class_nodes])
    return task.classes[np.argmax(sims, axis=1)]


@dataclass
class ICLResult:
    accuracies: np.ndarray  # per template
    mean: float
    std: float


def evaluate_icl(
    params: dict,
    cfg: ModelConfig,
    ds: Dataset,
    n_way: int,
    k_shot: int,
    templates: int,
    mode: str,
    walk_cfg: WalkConfig,
    repeats: int,
    seed: int,
) -> ICLResult:
    accs = np.empty(templates, dtype=np.float64)
    for t in range(templates):
        task = sample_task(ds, n_way, k_shot, seed, t)
        g_aug, x_aug, class_nodes = build_augmented_graph(ds, task, mode)
        emb = embed_augmented(
            params, cfg, g_aug, x_aug, walk_cfg, repeats,
            hash_key(seed, "icl-embed", t),
        )
        pred = predict(emb, task, class_nodes)
        accs[t] = float(np.mean(pred == ds.labels[task.queries]))
    return ICLResult(accuracies=accs, mean=float(accs.mean()), std=float(accs.std()))


# ---------------------------------------------------------------------------
# feature-propagation prototype baseline


def propagate_features(ds: Dataset, hops: int) -> np.ndarray:
    """X' = A_hat^k X with the degree-normalized self-loop adjacency."""
    if hops < 0:
        raise DataError("hops must be >= 0")
    x = ds.features
    if hops == 0:
        return x.copy()
    adj = build_norm_adjacency(ds.graph)
    for _ in range(hops):
        x = spmm(adj, x)
    return x


def prototype_classify(x_prop: np.ndarray, task: ICLTask) -> np.ndarray:
    """Nearest class-centroid by cosine, same tie rule as predict."""
    protos = np.stack([
        x_prop[task.support[int(c)]].astype(np.float64).mean(axis=0)
        for c in task.classes
    ])
    sims = _cosine_matrix(x_prop[task.queries].astype(np.float64), protos)
    return task.classes[np.argmax(sims, axis=1)]


def evaluate_prototype(
    ds: Dataset, n_way: int, k_shot: int, templates: int, hops: int, seed: int
) -> ICLResult:
    """Prototype baseline over the identical task templates as evaluate_icl."""
    x_prop = propagate_features(ds, hops)
    accs = np.empty(templates, dtype=np.float64)
    for t in range(templates):
        task = sample_task(ds, n_way, k_shot, seed, t)
        pred = prototype_classify(x_prop, task)
        accs[t] = float(np.mean(pred == ds.labels[task.queries]))
    return ICLResult(accuracies=accs, mean=float(accs.mean()), std=float(accs.std()))


# ---------------------------------------------------------------------------
# attention selectivity report


def attention_selectivity(
    params: dict,
    cfg: ModelConfig,
    ds: Dataset,
    task: ICLTask,
    mode: str,
    walk_cfg: WalkConfig,
    seed: int,
    repeats: int = 2,
    chunk: int = 4096,
) -> tuple[dict[tuple[int, int], float], float]:
    """Mean final-layer attention from class-node positions to context nodes,
    bucketed by (class of class node, label of context node).

    Returns (bucket means, same/different-class mass ratio).
    """
    g_aug, x_aug, class_nodes = build_augmented_graph(ds, task, mode)
    n_base = ds.graph.n
    class_of_node = {int(cn): int(c) for cn, c in zip(class_nodes, task.classes)}
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for r in range(repeats):
        walks = generate_epoch_walks(g_aug, walk_cfg, hash_key(seed, "attn", r), r)
        has_class = np.any(walks >= n_base, axis=1)
        walks = walks[has_class]
        for lo in range(0, walks.shape[0], chunk):
            batch = walks[lo : lo + chunk]
            h0 = embed_ids(params, batch, x_aug)
            _, _, attn = forward(params, cfg, h0, train=False, want_attention=True)
            for s in range(batch.shape[0]):
                ids = batch[s]
                q_pos = np.flatnonzero(ids >= n_base)
                ctx_pos = np.flatnonzero((ids < n_base) & (ds.labels[np.minimum(ids, n_base - 1)] >= 0))
                if q_pos.size == 0 or ctx_pos.size == 0:
                    continue
                for i in q_pos:
                    c = class_of_node[int(ids[i])]
                    for j in ctx_pos:
                        key = (c, int(ds.labels[ids[j]]))
                        sums[key] = sums.get(key, 0.0) + float(attn[s, i, j])
                        counts[key] = counts.get(key, 0) + 1
    means = {k: sums[k] / counts[k] for k in sums}
    same = [means[k] for k in means if k[0] == k[1]]
    diff = [means[k] for k in means if k[0] != k[1]]
    if not same or not diff:
        return means, float("nan")
    ratio = float(np.mean(same) / np.mean(diff))
    return means, ratio


def write_icl_results(
    path: str | Path,
    dataset: str,
    n_way: int,
    k_shot: int,
    rows: list[tuple[str, ICLResult]],
) -> None:
    """CSV: dataset,N,K,mode,template,accuracy plus mean/std summary rows."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "N", "K", "mode", "template", "accuracy"])
        for mode, result in rows:
            for t, acc in enumerate(result.accuracies):
                w.writerow([dataset, n_way, k_shot, mode, t, f"{acc:.6f}"])
            w.writerow([dataset, n_way, k_shot, mode, "mean", f"{result.mean:.6f}"])
            w.writerow([dataset, n_way, k_shot, mode, "std", f"{result.std:.6f}"])


def write_attention_report(path: str | Path, means: dict[tuple[int, int], float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class", "context_class", "mean_attention"])
        for (c, ctx), val in sorted(means.items()):
            w.writerow([c, ctx, f"{val:.8f}"])
