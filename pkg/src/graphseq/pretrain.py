"""Masked-reconstruction pretraining with partition-per-batch sampling.

Each epoch regenerates one walk per node in every partition, shuffles the
resulting (partition, chunk) slots into a step schedule, and consumes each
partition's walks without replacement. Sequences carry global node ids so
corruption draws and reconstruction targets range over the full graph.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graph import Dataset, Graph
from .masking import MaskingConfig, build_sequence
from .model import ModelConfig, init_params, node_loss_and_grads, param_names, save_checkpoint
from .optim import OptimState, adamw_step, init_optim, lr_at_step
from .partition import PartitionMap, induced_subgraph
from .rng import hash_key, substream
from .walks import WalkConfig, generate_epoch_walks


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    peak_lr: float = 1e-4
    end_lr: float = 1e-5
    warmup_updates: int = 10000
    weight_decay: float = 0.01
    batch_size: int = 1024
    walk: WalkConfig = field(default_factory=WalkConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    seed: int = 0
    negative_mode: str = "ours"

    def __post_init__(self):
        if not (0 < self.end_lr <= self.peak_lr):
            raise ConfigError("need 0 < end_lr <= peak_lr")
        if self.warmup_updates < 0:
            raise ConfigError("warmup_updates must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass(eq=False)
class PartitionData:
    part_id: int
    graph: Graph  # induced subgraph, local ids
    node_map: np.ndarray  # local -> global


@dataclass(eq=False)
class TrainState:
    params: dict
    model_cfg: ModelConfig
    opt: OptimState
    step: int = 0
    loss_history: list = field(default_factory=list)


def build_corpus(ds: Dataset, pm: PartitionMap) -> list[PartitionData]:
    corpus = []
    for part in range(pm.num_parts):
        sub, node_map = induced_subgraph(ds.graph, pm, part)
        corpus.append(PartitionData(part_id=part, graph=sub, node_map=node_map))
    return corpus


def select_fraction(corpus: list[PartitionData], fraction: float, seed: int) -> list[PartitionData]:
    """Seeded subset of ceil(fraction * P) partitions, order preserved."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError("fraction must be in (0, 1]")
    count = max(1, int(np.ceil(fraction * len(corpus))))
    if count >= len(corpus):
        return list(corpus)
    picks = substream(seed, "fraction").choice(len(corpus), size=count, replace=False)
    return [corpus[i] for i in sorted(picks)]


def total_schedule_steps(corpus: list[PartitionData], cfg: TrainConfig) -> int:
    per_epoch = sum(-(-pd.graph.n // cfg.batch_size) for pd in corpus)
    return cfg.epochs * per_epoch


def train_step(
    state: TrainState,
    seqs: list,
    features: np.ndarray,
    lr: float,
    weight_decay: float,
    dropout_rng: np.random.Generator,
) -> float:
    loss, grads, _ = node_loss_and_grads(
        state.params, state.model_cfg, seqs, features, train=True, rng=dropout_rng
    )
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}: {loss}")
    for name in param_names(state.model_cfg):
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient in {name} at step {state.step}")
    adamw_step(state.params, grads, state.opt, lr, weight_decay)
    state.step += 1
    return loss


def pretrain(
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    corpus: list[PartitionData],
    features: np.ndarray,
    full_n: int,
    out_dir: str | Path | None = None,
    config_echo: dict | None = None,
    workers: int = 1,
) -> TrainState:
    """Run the full pretraining loop; returns the final state.

    If out_dir is given, writes checkpoint.bin and loss_curve.csv there.
    """
    if not corpus:
        raise DataError("empty pretraining corpus")
    if features.shape[1] != mcfg.hidden_dim:
        raise DataError(
            f"inconsistent width: features d={features.shape[1]}, model d={mcfg.hidden_dim}"
        )
    for pd in corpus:
        if pd.node_map.size and pd.node_map.max() >= features.shape[0]:
            raise DataError(f"partition {pd.part_id} references missing feature rows")

    total = total_schedule_steps(corpus, tcfg)
    lr_at_step(tcfg.peak_lr, tcfg.end_lr, tcfg.warmup_updates, 0, total)  # rejects total < warmup

    seed = tcfg.seed
    state = TrainState(
        params=init_params(mcfg, substream(seed, "init")),
        model_cfg=mcfg,
        opt=init_optim({}),
    )
    state.opt = init_optim(state.params)
    # the full graph only matters as the id range for corruption draws
    sampling_graph = Graph(
        n=full_n,
        row_ptr=np.zeros(full_n + 1, dtype=np.int64),
        col_idx=np.empty(0, dtype=np.int64),
    )

    for epoch in range(tcfg.epochs):
        slots = []
        for pd in corpus:
            walks = generate_epoch_walks(
                pd.graph, tcfg.walk, hash_key(seed, "walks", pd.part_id), epoch, workers
            )
            order = substream(seed, "order", epoch, pd.part_id).permutation(pd.graph.n)
            for chunk_no, lo in enumerate(range(0, pd.graph.n, tcfg.batch_size)):
                rows = order[lo : lo + tcfg.batch_size]
                slots.append((pd, walks, chunk_no, rows))
        substream(seed, "schedule", epoch).shuffle(slots)

        for pd, walks, chunk_no, rows in slots:
            mask_rng = substream(seed, "mask", epoch, pd.part_id, chunk_no)
            seqs = [
                build_sequence(
                    pd.node_map[walks[r]], sampling_graph, tcfg.masking, mask_rng,
                    mode=tcfg.negative_mode,
                )
                for r in rows
            ]
            lr = lr_at_step(
                tcfg.peak_lr, tcfg.end_lr, tcfg.warmup_updates, state.step + 1, total
            )
            loss = train_step(
                state, seqs, features, lr, tcfg.weight_decay,
                substream(seed, "dropout", state.step),
            )
            state.loss_history.append(
                {"step": state.step - 1, "partition": pd.part_id, "loss": loss,
                 "lr": lr, "epoch": epoch}
            )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out_dir / "loss_curve.csv", state.loss_history)
        save_checkpoint(
            out_dir / "checkpoint.bin", state.params, mcfg,
            step=state.step, config_echo=config_echo or {},
        )
    return state


def write_loss_curve(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "partition", "loss", "lr"])
        for row in history:
            w.writerow([row["step"], row["partition"], f"{row['loss']:.10f}", f"{row['lr']:.10g}"])


def epoch_mean_losses(history: list[dict]) -> list[float]:
    sums: dict[int, list[float]] = {}
    for row in history:
        sums.setdefault(row["epoch"], []).append(row["loss"])
    return [float(np.mean(sums[e])) for e in sorted(sums)]
