"""Link-prediction track: hop-aggregated contexts, masked pretraining with a
graph-convolution decoder, MLP edge scoring, and MRR evaluation.

Each node's context is the sequence [x, A_hat x, ..., A_hat^k x][node]; token
positions are masked (mask-only corruption) and the center feature is
reconstructed from the decoder output H_D = A_hat H_node W, where H_node
concatenates the center-token output with the mean of the hop tokens and
projects back to width d. Pretraining batches one whole partition graph per
step so the decoder's adjacency is complete.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graph import Dataset, Graph, NormAdjacency, build_norm_adjacency, graph_from_edges, spmm
from .model import (
    ModelConfig,
    backward,
    forward,
    init_params,
    param_names,
    save_checkpoint,
    _cosine_and_grad,
)
from .optim import OptimState, adamw_step, init_optim, lr_at_step
from .pretrain import PartitionData
from .rng import hash_key, substream


@dataclass(frozen=True)
class LinkTrainConfig:
    epochs: int = 100
    peak_lr: float = 1e-3
    end_lr: float = 1e-4
    warmup_updates: int = 100
    weight_decay: float = 0.0
    mask_rate: float = 0.5
    n_hops: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.end_lr <= self.peak_lr):
            raise ConfigError("need 0 < end_lr <= peak_lr")
        if not (0.0 < self.mask_rate < 1.0):
            raise ConfigError("mask_rate must be in (0, 1)")
        if self.n_hops < 1:
            raise ConfigError("n_hops must be >= 1")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    projector_layers: int = 3
    projector_dim: int = 256
    epochs: int = 1000
    patience: int = 20
    batch_size: int = 4096
    eval_negatives: int = 200
    seed: int = 0


@dataclass(eq=False)
class EdgeSplit:
    train_edges: np.ndarray  # (Et, 2)
    valid_edges: np.ndarray
    test_edges: np.ndarray
    valid_negs: np.ndarray  # (Ev, n_neg) destination ids per positive
    test_negs: np.ndarray
    n: int


def _sample_non_edge_destinations(
    g: Graph, sources: np.ndarray, n_neg: int, rng: np.random.Generator
) -> np.ndarray:
    """(len(sources), n_neg) destinations w with w != u and w not in N(u)."""
    ekeys = g.edge_keys
    n_u64 = np.uint64(g.n)
    out = rng.integers(0, g.n, size=(sources.shape[0], n_neg), dtype=np.int64)
    src = np.repeat(sources[:, None], n_neg, axis=1)
    for _ in range(1000):
        probe = src.astype(np.uint64) * n_u64 + out.astype(np.uint64)
        pos = np.searchsorted(ekeys, probe.ravel()).reshape(probe.shape)
        hit = pos < ekeys.shape[0]
        is_edge = hit & (ekeys[np.minimum(pos, ekeys.shape[0] - 1)] == probe)
        bad = is_edge | (out == src)
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out
        out[bad] = rng.integers(0, g.n, size=n_bad, dtype=np.int64)
    raise DataError("could not sample non-edges (graph too dense?)")


def split_edges(g: Graph, seed: int, n_neg: int = 200) -> tuple[Graph, EdgeSplit]:
    """Shuffle undirected edges 80/10/10 and fix per-positive negatives.

    The train graph keeps only train edges; negatives corrupt the destination
    and avoid all edges of the full graph.
    """
    edges = g.undirected_edges()
    n_edges = edges.shape[0]
    if n_edges < 10:
        raise DataError(f"graph too small for a split: {n_edges} edges")
    rng = substream(seed, "edge-split")
    perm = rng.permutation(n_edges)
    n_valid = n_edges // 10
    n_test = n_edges // 10
    valid = edges[perm[:n_valid]]
    test = edges[perm[n_valid : n_valid + n_test]]
    train = edges[perm[n_valid + n_test :]]
    train_graph = graph_from_edges(g.n, train[:, 0], train[:, 1])
    split = EdgeSplit(
        train_edges=train,
        valid_edges=valid,
        test_edges=test,
        valid_negs=_sample_non_edge_destinations(g, valid[:, 0], n_neg, substream(seed, "negs", "valid")),
        test_negs=_sample_non_edge_destinations(g, test[:, 0], n_neg, substream(seed, "negs", "test")),
        n=g.n,
    )
    return train_graph, split


def hop_features(adj: NormAdjacency, x: np.ndarray, n_hops: int) -> np.ndarray:
    """(n, n_hops+1, d) stack of [x, A_hat x, ..., A_hat^k x]."""
    tokens = [x.astype(np.float32)]
    cur = x.astype(np.float32)
    for _ in range(n_hops):
        cur = spmm(adj, cur)
        tokens.append(cur)
    return np.stack(tokens, axis=1)


def hop2token(train_g: Graph, x: np.ndarray, node: int, n_hops: int) -> np.ndarray:
    """Hop-token context for one node (row of hop_features)."""
    if n_hops < 1:
        raise ConfigError("n_hops must be >= 1")
    adj = build_norm_adjacency(train_g)
    return hop_features(adj, x, n_hops)[node]


def mask_hop_tokens(
    n_seqs: int, seq_len: int, mask_rate: float, rng: np.random.Generator
) -> np.ndarray:
    """Boolean (n_seqs, seq_len): exactly max(1, round(rate * len)) masked
    token positions per sequence (mask-only corruption; token 0 maskable)."""
    m = max(1, int(np.floor(mask_rate * seq_len + 0.5)))
    out = np.zeros((n_seqs, seq_len), dtype=bool)
    for i in range(n_seqs):
        out[i, rng.choice(seq_len, size=m, replace=False)] = True
    return out


def _link_embed_h0(params: dict, hop_feats: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    dtype = params["pos_emb"].dtype
    n, l, _ = hop_feats.shape
    h0 = hop_feats.astype(dtype).copy()
    if mask is not None:
        h0[mask] = params["mask_emb"]
    return h0 + params["pos_emb"][None, :l, :]


def link_node_representations(
    params: dict,
    cfg: ModelConfig,
    hop_feats: np.ndarray,
    mask: np.ndarray | None = None,
    want_cache: bool = False,
):
    """Encode hop contexts and pool to (n, d): concat(center, mean of hops)
    through the learned 2d -> d projection."""
    h0 = _link_embed_h0(params, hop_feats, mask)
    y, cache, _ = forward(params, cfg, h0, train=False, want_cache=want_cache)
    center = y[:, 0, :]
    hops = y[:, 1:, :].mean(axis=1)
    cat = np.concatenate([center, hops], axis=1)
    h_node = cat @ params["pool_proj.weight"] + params["pool_proj.bias"]
    aux = {"cache": cache, "cat": cat, "y_shape": y.shape, "mask": mask}
    return h_node, aux


def _link_pool_backward(params: dict, grads: dict, aux: dict, dh_node: np.ndarray, cfg: ModelConfig):
    """Backprop from d h_node through projection, pooling, encoder, embedding."""
    cat = aux["cat"]
    grads["pool_proj.weight"] += cat.T @ dh_node
    grads["pool_proj.bias"] += dh_node.sum(axis=0)
    dcat = dh_node @ params["pool_proj.weight"].T
    n, l, d = aux["y_shape"]
    dy = np.zeros((n, l, d), dtype=dh_node.dtype)
    dy[:, 0, :] = dcat[:, :d]
    dy[:, 1:, :] = dcat[:, None, d:] / (l - 1)
    enc_grads, dh0 = backward(params, cfg, aux["cache"], dy)
    for k, v in enc_grads.items():
        grads[k] += v
    grads["pos_emb"][:l] += dh0.sum(axis=0)
    if aux["mask"] is not None and aux["mask"].any():
        grads["mask_emb"] += dh0[aux["mask"]].sum(axis=0)


def link_loss_and_grads(
    params: dict,
    cfg: ModelConfig,
    adj: NormAdjacency,
    hop_feats: np.ndarray,
    mask: np.ndarray,
    x: np.ndarray,
):
    """Masked-center reconstruction loss through the decoder, with gradients.

    Loss = mean over centers whose token 0 is masked of 1 - cos(h_dec, x).
    """
    h_node, aux = link_node_representations(params, cfg, hop_feats, mask, want_cache=True)
    w_dec = params["decoder.weight"]
    mixed = np.asarray(adj.csr @ h_node, dtype=h_node.dtype)
    h_dec = mixed @ w_dec
    centers = np.flatnonzero(mask[:, 0])
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if centers.size == 0:
        return 0.0, grads, np.empty(0)
    cos, dcos, _ = _cosine_and_grad(h_dec[centers], x[centers])
    loss = float(np.mean(1.0 - cos))
    dh_dec = np.zeros(h_dec.shape, dtype=np.float64)
    dh_dec[centers] = -dcos / centers.size
    dh_dec = dh_dec.astype(h_node.dtype)
    grads["decoder.weight"] += mixed.T @ dh_dec
    dmixed = dh_dec @ w_dec.T
    dh_node = np.asarray(adj.csr.T @ dmixed, dtype=h_node.dtype)
    _link_pool_backward(params, grads, aux, dh_node, cfg)
    return loss, grads, cos


def link_pretrain(
    lcfg: LinkTrainConfig,
    mcfg: ModelConfig,
    corpus: list[PartitionData],
    features: np.ndarray,
    out_dir: str | Path | None = None,
    config_echo: dict | None = None,
) -> dict:
    """Masked-center pretraining, one whole partition graph per step."""
    if not mcfg.link_head:
        raise ConfigError("link pretraining needs a link_head model config")
    if not corpus:
        raise DataError("empty pretraining corpus")
    seed = lcfg.seed
    params = init_params(mcfg, substream(seed, "init"))
    opt = init_optim(params)
    per_part = []
    for pd in corpus:
        adj = build_norm_adjacency(pd.graph)
        x_local = features[pd.node_map]
        per_part.append((pd, adj, hop_features(adj, x_local, lcfg.n_hops), x_local))
    total = lcfg.epochs * len(corpus)
    lr_at_step(lcfg.peak_lr, lcfg.end_lr, lcfg.warmup_updates, 0, total)

    step = 0
    history = []
    for epoch in range(lcfg.epochs):
        order = substream(seed, "schedule", epoch).permutation(len(per_part))
        for pi in order:
            pd, adj, hops, x_local = per_part[pi]
            rng = substream(seed, "mask", epoch, pd.part_id)
            mask = mask_hop_tokens(pd.graph.n, lcfg.n_hops + 1, lcfg.mask_rate, rng)
            lr = lr_at_step(lcfg.peak_lr, lcfg.end_lr, lcfg.warmup_updates, step + 1, total)
            loss, grads, _ = link_loss_and_grads(params, mcfg, adj, hops, mask, x_local)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite link loss at step {step}")
            adamw_step(params, grads, opt, lr, lcfg.weight_decay)
            history.append({"step": step, "partition": pd.part_id, "loss": loss, "lr": lr,
                            "epoch": epoch})
            step += 1

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        from .pretrain import write_loss_curve

        write_loss_curve(out_dir / "loss_curve.csv", history)
        save_checkpoint(out_dir / "checkpoint.bin", params, mcfg, step=step,
                        config_echo=config_echo or {})
    return params


# ---------------------------------------------------------------------------
# MLP edge scorer


def init_scorer(d: int, layers: int, hidden: int, rng: np.random.Generator) -> dict:
    """MLP d -> hidden^(layers-1) -> 1 with ReLU between layers."""
    dims = [d] + [hidden] * (layers - 1) + [1]
    params = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"scorer.{i}.w"] = (rng.standard_normal((a, b)) * np.sqrt(2.0 / a)).astype(np.float32)
        params[f"scorer.{i}.b"] = np.zeros(b, dtype=np.float32)
    return params


def scorer_forward(sparams: dict, z: np.ndarray, want_cache: bool = False):
    n_layers = len(sparams) // 2
    acts = [z]
    cur = z
    for i in range(n_layers):
        cur = cur @ sparams[f"scorer.{i}.w"] + sparams[f"scorer.{i}.b"]
        if i < n_layers - 1:
            cur = np.maximum(cur, 0.0)
        acts.append(cur)
    logits = cur[:, 0]
    return (logits, acts) if want_cache else (logits, None)


def scorer_backward(sparams: dict, acts: list, dlogits: np.ndarray):
    n_layers = len(sparams) // 2
    grads = {k: np.zeros_like(v) for k, v in sparams.items()}
    dcur = dlogits[:, None].astype(np.float32)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            dcur = dcur * (acts[i + 1] > 0)
        pre = acts[i]
        grads[f"scorer.{i}.w"] += pre.T @ dcur
        grads[f"scorer.{i}.b"] += dcur.sum(axis=0)
        dcur = dcur @ sparams[f"scorer.{i}.w"].T
    return grads, dcur


def score_edges(h_node: np.ndarray, sparams: dict, edges: np.ndarray, want_cache=False):
    z = h_node[edges[:, 0]] * h_node[edges[:, 1]]
    logits, acts = scorer_forward(sparams, z, want_cache=want_cache)
    return logits, (z, acts)


# ---------------------------------------------------------------------------
# MRR


def evaluate_mrr(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mean reciprocal rank with pessimistic ties: rank = 1 + #greater + #tied."""
    greater = np.sum(neg_scores > pos_scores[:, None], axis=1)
    tied = np.sum(neg_scores == pos_scores[:, None], axis=1)
    ranks = 1 + greater + tied
    return float(np.mean(1.0 / ranks))


def simulate_random_mrr(n_neg: int, trials: int = 20000, seed: int = 0) -> float:
    """Expected MRR when all scores are i.i.d. random (the no-signal baseline)."""
    rng = substream(seed, "mrr-sim")
    scores = rng.random((trials, n_neg + 1))
    return evaluate_mrr(scores[:, 0], scores[:, 1:])


def model_mrr(
    h_node: np.ndarray, sparams: dict, positives: np.ndarray, negs: np.ndarray
) -> float:
    pos_logits, _ = score_edges(h_node, sparams, positives)
    sources = np.repeat(positives[:, 0], negs.shape[1])
    dests = negs.ravel()
    neg_edges = np.stack([sources, dests], axis=1)
    neg_logits, _ = score_edges(h_node, sparams, neg_edges)
    return evaluate_mrr(pos_logits, neg_logits.reshape(negs.shape))


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(eq=False)
class FinetuneResult:
    enc_params: dict
    scorer_params: dict
    valid_mrr: float
    epochs_run: int
    history: list = field(default_factory=list)


def _bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    # stable: log(1+exp(-|x|)) + max(x,0) - x*y
    loss = np.mean(np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits))))
    dlogits = (1.0 / (1.0 + np.exp(-logits)) - labels) / logits.shape[0]
    return float(loss), dlogits


def finetune(
    enc_init: dict | None,
    mcfg: ModelConfig,
    train_graph: Graph,
    features: np.ndarray,
    split: EdgeSplit,
    fcfg: FinetuneConfig,
    n_hops: int = 3,
) -> FinetuneResult:
    """Fine-tune encoder + fresh MLP scorer with BCE on edges; early-stops on
    validation MRR. enc_init=None trains from scratch (random init)."""
    seed = fcfg.seed
    if enc_init is None:
        enc_params = init_params(mcfg, substream(seed, "enc-init"))
    else:
        enc_params = {k: v.copy() for k, v in enc_init.items()}
    sparams = init_scorer(mcfg.hidden_dim, fcfg.projector_layers, fcfg.projector_dim,
                          substream(seed, "scorer-init"))
    adj = build_norm_adjacency(train_graph)
    hops = hop_features(adj, features, n_hops)
    all_params = {**enc_params, **sparams}
    opt = init_optim(all_params)

    pos = split.train_edges
    best = FinetuneResult(enc_params={}, scorer_params={}, valid_mrr=-1.0, epochs_run=0)
    since_best = 0
    for epoch in range(fcfg.epochs):
        neg_dst = _sample_non_edge_destinations(
            train_graph, pos[:, 0], 1, substream(seed, "train-negs", epoch)
        )[:, 0]
        negatives = np.stack([pos[:, 0], neg_dst], axis=1)
        edges = np.concatenate([pos, negatives])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(negatives))]).astype(np.float32)
        order = substream(seed, "batch-order", epoch).permutation(len(edges))

        for lo in range(0, len(edges), fcfg.batch_size):
            sel = order[lo : lo + fcfg.batch_size]
            batch_edges, batch_labels = edges[sel], labels[sel]
            h_node, aux = link_node_representations(
                enc_params, mcfg, hops, mask=None, want_cache=True
            )
            logits, (z, acts) = score_edges(h_node, sparams, batch_edges, want_cache=True)
            loss, dlogits = _bce_with_logits(logits, batch_labels)
            if not np.isfinite(loss):
                raise NumericError(f"fine-tuning diverged at epoch {epoch}")
            sgrads, dz = scorer_backward(sparams, acts, dlogits)
            dh_node = np.zeros_like(h_node)
            hu = h_node[batch_edges[:, 0]]
            hv = h_node[batch_edges[:, 1]]
            np.add.at(dh_node, batch_edges[:, 0], dz * hv)
            np.add.at(dh_node, batch_edges[:, 1], dz * hu)
            egrads = {k: np.zeros_like(v) for k, v in enc_params.items()}
            _link_pool_backward(enc_params, egrads, aux, dh_node, mcfg)
            adamw_step(all_params, {**egrads, **sgrads}, opt, fcfg.lr, weight_decay=0.0)

        h_node, _ = link_node_representations(enc_params, mcfg, hops, mask=None)
        valid_mrr = model_mrr(h_node, sparams, split.valid_edges, split.valid_negs)
        best.history.append({"epoch": epoch, "loss": loss, "valid_mrr": valid_mrr})
        if valid_mrr > best.valid_mrr:
            best.valid_mrr = valid_mrr
            best.enc_params = copy.deepcopy(enc_params)
            best.scorer_params = copy.deepcopy(sparams)
            since_best = 0
        else:
            since_best += 1
            if since_best >= fcfg.patience:
                break
        best.epochs_run = epoch + 1
    return best


def test_mrr_of(result: FinetuneResult, mcfg: ModelConfig, train_graph: Graph,
                features: np.ndarray, split: EdgeSplit, n_hops: int = 3) -> float:
    adj = build_norm_adjacency(train_graph)
    hops = hop_features(adj, features, n_hops)
    h_node, _ = link_node_representations(result.enc_params, mcfg, hops, mask=None)
    return model_mrr(h_node, result.scorer_params, split.test_edges, split.test_negs)


# ---------------------------------------------------------------------------
# split file IO


def save_split(directory: str | Path, split: EdgeSplit) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "split.tsv", "w", encoding="utf-8") as f:
        for name, edges in (("train", split.train_edges), ("valid", split.valid_edges),
                            ("test", split.test_edges)):
            for u, v in edges:
                f.write(f"{u}\t{v}\t{name}\n")
    with open(directory / "negatives.tsv", "w", encoding="utf-8") as f:
        for edges, negs in ((split.valid_edges, split.valid_negs),
                            (split.test_edges, split.test_negs)):
            for (u, v), row in zip(edges, negs):
                f.write(f"{u}\t{v}\t" + "\t".join(str(w) for w in row) + "\n")


def load_split(directory: str | Path, n: int) -> EdgeSplit:
    directory = Path(directory)
    buckets: dict[str, list] = {"train": [], "valid": [], "test": []}
    with open(directory / "split.tsv", "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            u, v, name = line.split("\t")
            if name not in buckets:
                raise DataError(f"unknown split name '{name}'")
            buckets[name].append((int(u), int(v)))
    negs: dict[tuple[int, int], list[int]] = {}
    with open(directory / "negatives.tsv", "r", encoding="utf-8") as f:
        for line in f:
            parts = line.strip().split("\t")
            if len(parts) < 3:
                continue
            negs[(int(parts[0]), int(parts[1]))] = [int(w) for w in parts[2:]]

    def as_edges(name):
        return np.asarray(buckets[name], dtype=np.int64).reshape(-1, 2)

    def as_negs(edges):
        return np.asarray([negs[(int(u), int(v))] for u, v in edges], dtype=np.int64)

    valid, test = as_edges("valid"), as_edges("test")
    return EdgeSplit(
        train_edges=as_edges("train"),
        valid_edges=valid,
        test_edges=test,
        valid_negs=as_negs(valid),
        test_negs=as_negs(test),
        n=n,
    )


def write_link_results(path: str | Path, rows: list[dict]) -> None:
    """CSV: dataset,init,seed,valid_mrr,test_mrr."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "init", "seed", "valid_mrr", "test_mrr"])
        for r in rows:
            w.writerow([r["dataset"], r["init"], r["seed"],
                        f"{r['valid_mrr']:.6f}", f"{r['test_mrr']:.6f}"])
