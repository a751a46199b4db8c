"""Transformer encoder with exact analytic gradients (pure numpy).

Post-norm encoder stack: bidirectional multi-head self-attention -> residual
-> layer norm -> GELU feed-forward -> residual -> layer norm, with a final
layer norm after the last block (an empty stack is the identity). The
reconstruction objective pools per-node means of the output rows and scores
them against the true node features by cosine similarity.

Gradients are hand-derived and checked against central finite differences in
the test suite; training runs in float32, checks in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf, ndtri  # erf only for truncated-normal init bounds

from .errors import ConfigError, DataError, NumericError
from .masking import MASK, MaskedSequence

CHECKPOINT_MAGIC = b"GSPTCKPT"
CHECKPOINT_VERSION = 1

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 768
    ffn_dim: int = 3072
    n_layers: int = 3
    n_heads: int = 12
    max_len: int = 20
    dropout: float = 0.3
    attention_dropout: float = 0.3
    emb_dropout: float = 0.3
    link_head: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        for name in ("dropout", "attention_dropout", "emb_dropout"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1)")


class LossStats:
    """Counts degenerate (zero-norm) cosine terms encountered in losses."""

    def __init__(self):
        self.degenerate = 0

    def reset(self):
        self.degenerate = 0


LOSS_STATS = LossStats()


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter declaration order (checkpoint tensor order)."""
    names = ["pos_emb", "mask_emb"]
    for i in range(cfg.n_layers):
        base = f"layers.{i}"
        for proj in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            names.append(f"{base}.attn.{proj}")
        names.extend(
            [f"{base}.ffn.w1", f"{base}.ffn.b1", f"{base}.ffn.w2", f"{base}.ffn.b2"]
        )
        names.extend(
            [f"{base}.norm1.gain", f"{base}.norm1.bias",
             f"{base}.norm2.gain", f"{base}.norm2.bias"]
        )
    names.extend(["final_norm.gain", "final_norm.bias"])
    if cfg.link_head:
        names.extend(["pool_proj.weight", "pool_proj.bias", "decoder.weight"])
    return names


def _param_shape(name: str, cfg: ModelConfig) -> tuple[int, ...]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    if name == "pos_emb":
        return (cfg.max_len, d)
    if name == "mask_emb":
        return (d,)
    if name == "pool_proj.weight":
        return (2 * d, d)
    if name == "pool_proj.bias":
        return (d,)
    if name == "decoder.weight":
        return (d, d)
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("gain", "bias"):
        return (d,)
    return {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "bq": (d,), "bk": (d,), "bv": (d,), "bo": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }[leaf]


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # inverse-CDF sampling restricted to +-2 std
    lo, hi = 0.5 * (1.0 + erf(-2.0 * _INV_SQRT2)), 0.5 * (1.0 + erf(2.0 * _INV_SQRT2))
    u = rng.uniform(lo, hi, size=shape)
    return (ndtri(u) * std).astype(dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Truncated-normal(0.02) weights, zero biases and mask embedding, unit norms."""
    params = {}
    for name in param_names(cfg):
        shape = _param_shape(name, cfg)
        leaf = name.rsplit(".", 1)[-1]
        if name == "mask_emb" or leaf in ("bias", "b1", "b2", "bq", "bk", "bv", "bo"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "gain":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = _trunc_normal(rng, shape, 0.02, dtype)
    return params


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# primitives


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU (the BERT variant)."""
    u = _GELU_C * (x + _GELU_A * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Exact derivative of the tanh-approximation above."""
    u = _GELU_C * (x + _GELU_A * (x * x * x))
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_backward(dy, gain, cache):
    xhat, rstd = cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd * (dxhat - mean1 - xhat * mean2)
    return dx, dgain, dbias


def _dropout_mask(rng, shape, rate, dtype):
    if rate <= 0.0:
        return None
    return (rng.random(shape) >= rate).astype(dtype) / dtype.type(1.0 - rate)


def _weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of y = x @ w summed over batch and position axes."""
    din = x.shape[-1]
    return x.reshape(-1, din).T @ dy.reshape(-1, dy.shape[-1])


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation in {where}")


# ---------------------------------------------------------------------------
# forward / backward


def forward(
    params: dict,
    cfg: ModelConfig,
    h0: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
    want_attention: bool = False,
):
    """Run the encoder stack. Returns (output, cache, final-layer attention).

    `cache` is None unless requested; attention is the final layer's softmax
    probabilities averaged over heads, (b, l, l), None unless requested.
    period: eval mode applies no dropout and is a pure function of (params, h0).
    """
    b, l, d = h0.shape
    if d != cfg.hidden_dim:
        raise DataError(f"width mismatch: input d={d}, model d={cfg.hidden_dim}")
    if l > cfg.max_len:
        raise DataError(f"sequence length {l} exceeds positional table {cfg.max_len}")
    if train and rng is None:
        raise ValueError("train-mode forward needs a dropout rng")
    dtype = h0.dtype
    heads, dh = cfg.n_heads, cfg.hidden_dim // cfg.n_heads
    scale = dtype.type(1.0 / np.sqrt(dh))

    if cfg.n_layers == 0:
        cache = {"layers": [], "emb_mask": None, "h0": h0, "identity": True} if want_cache else None
        return h0, cache, None

    emb_mask = _dropout_mask(rng, h0.shape, cfg.emb_dropout, dtype) if train else None
    x = h0 * emb_mask if emb_mask is not None else h0

    layer_caches = []
    attn_out = None
    for i in range(cfg.n_layers):
        base = f"layers.{i}"
        wq, bq = params[f"{base}.attn.wq"], params[f"{base}.attn.bq"]
        wk, bk = params[f"{base}.attn.wk"], params[f"{base}.attn.bk"]
        wv, bv = params[f"{base}.attn.wv"], params[f"{base}.attn.bv"]
        wo, bo = params[f"{base}.attn.wo"], params[f"{base}.attn.bo"]

        x_in = x
        q = (x @ wq + bq).reshape(b, l, heads, dh).transpose(0, 2, 1, 3)
        k = (x @ wk + bk).reshape(b, l, heads, dh).transpose(0, 2, 1, 3)
        v = (x @ wv + bv).reshape(b, l, heads, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        probs = expd / expd.sum(axis=-1, keepdims=True)
        if want_attention and i == cfg.n_layers - 1:
            attn_out = probs.mean(axis=1)
        attn_mask = _dropout_mask(rng, probs.shape, cfg.attention_dropout, dtype) if train else None
        probs_d = probs * attn_mask if attn_mask is not None else probs
        ctx = np.matmul(probs_d, v).transpose(0, 2, 1, 3).reshape(b, l, d)
        o = ctx @ wo + bo
        o_mask = _dropout_mask(rng, o.shape, cfg.dropout, dtype) if train else None
        o_d = o * o_mask if o_mask is not None else o
        r1 = x_in + o_d
        n1, ln1_cache = _layer_norm(r1, params[f"{base}.norm1.gain"], params[f"{base}.norm1.bias"])

        f1 = n1 @ params[f"{base}.ffn.w1"] + params[f"{base}.ffn.b1"]
        g = gelu(f1)
        f2 = g @ params[f"{base}.ffn.w2"] + params[f"{base}.ffn.b2"]
        f2_mask = _dropout_mask(rng, f2.shape, cfg.dropout, dtype) if train else None
        f2_d = f2 * f2_mask if f2_mask is not None else f2
        r2 = n1 + f2_d
        x, ln2_cache = _layer_norm(r2, params[f"{base}.norm2.gain"], params[f"{base}.norm2.bias"])
        _check_finite(x, f"layer {i}")

        if want_cache:
            layer_caches.append({
                "x_in": x_in, "q": q, "k": k, "v": v,
                "probs": probs, "attn_mask": attn_mask, "ctx": ctx,
                "o_mask": o_mask, "ln1": ln1_cache, "n1": n1,
                "f1": f1, "g": g, "f2_mask": f2_mask, "ln2": ln2_cache,
            })

    y, lnf_cache = _layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    _check_finite(y, "final norm")
    cache = None
    if want_cache:
        cache = {"layers": layer_caches, "emb_mask": emb_mask, "h0": h0,
                 "lnf": lnf_cache, "x_last": x, "identity": False}
    return y, cache, attn_out


def backward(params: dict, cfg: ModelConfig, cache: dict, dy: np.ndarray):
    """Gradients of a scalar loss w.r.t. every parameter and the input h0."""
    grads = zero_grads(params)
    if cache["identity"]:
        return grads, dy

    b, l, d = cache["h0"].shape
    heads, dh = cfg.n_heads, d // cfg.n_heads
    scale = dy.dtype.type(1.0 / np.sqrt(dh))

    dx, dgain, dbias = _layer_norm_backward(dy, params["final_norm.gain"], cache["lnf"])
    grads["final_norm.gain"] += dgain
    grads["final_norm.bias"] += dbias

    for i in reversed(range(cfg.n_layers)):
        base = f"layers.{i}"
        c = cache["layers"][i]

        # second sublayer (FFN) backward
        dr2, dgain, dbias = _layer_norm_backward(
            dx, params[f"{base}.norm2.gain"], c["ln2"])
        grads[f"{base}.norm2.gain"] += dgain
        grads[f"{base}.norm2.bias"] += dbias
        dn1 = dr2.copy()
        df2 = dr2 * c["f2_mask"] if c["f2_mask"] is not None else dr2
        grads[f"{base}.ffn.w2"] += _weight_grad(c["g"], df2)
        grads[f"{base}.ffn.b2"] += df2.sum(axis=(0, 1))
        dg = df2 @ params[f"{base}.ffn.w2"].T
        df1 = dg * gelu_grad(c["f1"])
        grads[f"{base}.ffn.w1"] += _weight_grad(c["n1"], df1)
        grads[f"{base}.ffn.b1"] += df1.sum(axis=(0, 1))
        dn1 += df1 @ params[f"{base}.ffn.w1"].T

        # first sublayer (attention) backward
        dr1, dgain, dbias = _layer_norm_backward(
            dn1, params[f"{base}.norm1.gain"], c["ln1"])
        grads[f"{base}.norm1.gain"] += dgain
        grads[f"{base}.norm1.bias"] += dbias
        dx_in = dr1.copy()
        do = dr1 * c["o_mask"] if c["o_mask"] is not None else dr1
        grads[f"{base}.attn.wo"] += _weight_grad(c["ctx"], do)
        grads[f"{base}.attn.bo"] += do.sum(axis=(0, 1))
        dctx = (do @ params[f"{base}.attn.wo"].T).reshape(b, l, heads, dh).transpose(0, 2, 1, 3)

        probs_d = c["probs"] * c["attn_mask"] if c["attn_mask"] is not None else c["probs"]
        dprobs_d = np.matmul(dctx, c["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(probs_d.transpose(0, 1, 3, 2), dctx)
        dprobs = dprobs_d * c["attn_mask"] if c["attn_mask"] is not None else dprobs_d
        inner = np.sum(dprobs * c["probs"], axis=-1, keepdims=True)
        dscores = c["probs"] * (dprobs - inner)
        dscores *= scale
        dq = np.matmul(dscores, c["k"])
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), c["q"])

        for mat, name in ((dq, "wq"), (dk, "wk"), (dv, "wv")):
            flat = mat.transpose(0, 2, 1, 3).reshape(b, l, d)
            grads[f"{base}.attn.{name}"] += _weight_grad(c["x_in"], flat)
            grads[f"{base}.attn.b{name[1]}"] += flat.sum(axis=(0, 1))
            dx_in += flat @ params[f"{base}.attn.{name}"].T
        dx = dx_in

    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    return grads, dx


# ---------------------------------------------------------------------------
# embedding, pooling, reconstruction loss


def embed_ids(params: dict, node_ids: np.ndarray, x_feat: np.ndarray) -> np.ndarray:
    """Plain feature + positional embedding for uncorrupted id sequences."""
    dtype = params["pos_emb"].dtype
    b, l = node_ids.shape
    return x_feat[node_ids].astype(dtype) + params["pos_emb"][None, :l, :]


def embed_batch(params: dict, seqs: list[MaskedSequence], x_feat: np.ndarray) -> np.ndarray:
    """H0 rows: feature+position, with masked positions using the mask vector."""
    dtype = params["pos_emb"].dtype
    input_ids = np.stack([s.input_ids for s in seqs])
    kinds = np.stack([s.kinds for s in seqs])
    base = x_feat[input_ids].astype(dtype)
    base[kinds == MASK] = params["mask_emb"]
    l = input_ids.shape[1]
    return base + params["pos_emb"][None, :l, :]


def embed_backward(grads: dict, dh0: np.ndarray, seqs: list[MaskedSequence]) -> None:
    l = dh0.shape[1]
    grads["pos_emb"][:l] += dh0.sum(axis=0)
    kinds = np.stack([s.kinds for s in seqs])
    masked = kinds == MASK
    if masked.any():
        grads["mask_emb"] += dh0[masked].sum(axis=0)


def pool_batch(h: np.ndarray, node_ids: np.ndarray):
    """Mean of output rows per (sequence, node id).

    Returns (keys, inv, counts, pooled, stride) where keys = seq_index *
    stride + node_id, inv maps each (b, l) cell to its pooled row, and
    pooled is (U, d) in h's dtype.
    """
    b, l, d = h.shape
    stride = int(node_ids.max()) + 1 if node_ids.size else 1
    comp = np.arange(b, dtype=np.int64)[:, None] * stride + node_ids
    keys, inv, counts = np.unique(comp.ravel(), return_inverse=True, return_counts=True)
    sums = np.zeros((keys.shape[0], d), dtype=h.dtype)
    np.add.at(sums, inv, h.reshape(b * l, d))
    pooled = sums / counts[:, None].astype(h.dtype)
    return keys, inv.reshape(b, l), counts, pooled, stride


def pool_nodes(h_seq: np.ndarray, seq) -> dict[int, np.ndarray]:
    """Map node id -> mean of the output rows at its positions (one sequence)."""
    node_ids = seq.node_ids if isinstance(seq, MaskedSequence) else np.asarray(seq)
    _, inv, _, pooled, _ = pool_batch(h_seq[None], node_ids[None].astype(np.int64))
    uniq = np.unique(node_ids)
    return {int(node): pooled[inv[0][np.argmax(node_ids == node)]] for node in uniq}


def _cosine_and_grad(h: np.ndarray, x: np.ndarray):
    """Row-wise cosine and d cos / d h, with zero-norm rows flagged."""
    h64 = h.astype(np.float64)
    x64 = x.astype(np.float64)
    hn = np.linalg.norm(h64, axis=1)
    xn = np.linalg.norm(x64, axis=1)
    ok = (hn > 0) & (xn > 0)
    denom = np.where(ok, hn * xn, 1.0)
    cos = np.where(ok, np.einsum("ij,ij->i", h64, x64) / denom, 0.0)
    safe_hn = np.where(ok, hn, 1.0)
    dcos = (x64 / denom[:, None] - cos[:, None] * h64 / (safe_hn**2)[:, None])
    dcos[~ok] = 0.0
    return cos, dcos, int(np.sum(~ok))


def recon_loss(pooled: dict[int, np.ndarray], seq: MaskedSequence, x_feat: np.ndarray):
    """Masked-feature reconstruction loss for one sequence.

    (1/m) sum over target positions of (1 - cos(pooled[node], x[node])),
    cosine against the true uncorrupted feature row. Zero-norm terms count
    as cos = 0 and bump LOSS_STATS.degenerate.
    """
    nodes = seq.target_nodes
    h = np.stack([pooled[int(v)] for v in nodes])
    cos, _, bad = _cosine_and_grad(h, x_feat[nodes])
    LOSS_STATS.degenerate += bad
    return float(np.mean(1.0 - cos)), cos


def recon_loss_batch(h: np.ndarray, seqs: list[MaskedSequence], x_feat: np.ndarray):
    """Batch loss (mean of per-sequence losses) and its gradient w.r.t. h."""
    b, l, d = h.shape
    node_ids = np.stack([s.node_ids for s in seqs])
    _, inv, counts, pooled, _ = pool_batch(h, node_ids)

    rows, tgt_nodes, weights = [], [], []
    for s_idx, s in enumerate(seqs):
        m = s.target_positions.shape[0]
        rows.append(inv[s_idx, s.target_positions])
        tgt_nodes.append(s.node_ids[s.target_positions])
        weights.append(np.full(m, 1.0 / (m * b)))
    rows = np.concatenate(rows)
    tgt_nodes = np.concatenate(tgt_nodes)
    weights = np.concatenate(weights)

    cos, dcos, bad = _cosine_and_grad(pooled[rows], x_feat[tgt_nodes])
    LOSS_STATS.degenerate += bad
    loss = float(np.sum(weights * (1.0 - cos)))

    dpooled = np.zeros((pooled.shape[0], d), dtype=np.float64)
    np.add.at(dpooled, rows, -weights[:, None] * dcos)
    dh = (dpooled[inv] / counts[inv][:, :, None]).astype(h.dtype)
    return loss, dh, cos


def node_loss_and_grads(
    params: dict,
    cfg: ModelConfig,
    seqs: list[MaskedSequence],
    x_feat: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Full node-track pass: embed -> encode -> pool -> cosine loss -> grads."""
    h0 = embed_batch(params, seqs, x_feat)
    y, cache, _ = forward(params, cfg, h0, train=train, rng=rng, want_cache=True)
    loss, dy, cos = recon_loss_batch(y, seqs, x_feat)
    grads, dh0 = backward(params, cfg, cache, dy)
    embed_backward(grads, dh0, seqs)
    return loss, grads, cos


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(
    path: str | Path,
    params: dict,
    cfg: ModelConfig,
    step: int = 0,
    config_echo: dict | None = None,
    extra: dict | None = None,
    names: list[str] | None = None,
) -> None:
    """Bit-exact checkpoint: magic, version, metadata JSON, f32 LE tensors.

    `names` defaults to the model's declaration order; pass an extended list
    to bundle auxiliary tensors (e.g. an edge scorer) with the encoder.
    """
    if names is None:
        names = param_names(cfg)
    meta = {
        "model": asdict(cfg),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "step": int(step),
        "config_echo": config_echo or {},
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path):
    """Returns (params, cfg, metadata)."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        cfg = ModelConfig(**meta["model"])
        params = {}
        for entry in meta["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise DataError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return params, cfg, meta
