"""Command-line entry points.

Commands: partition, pretrain, icl-eval, link-pretrain, link-finetune,
link-eval, synth, ablation, scaling-report. Every run writes a manifest.json
(command, config echo, seed, git describe, outputs, wall time) atomically at
the end. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, DataError, NumericError
from .graph import build_norm_adjacency, graph_from_edges, load_dataset, save_dataset
from .icl import (
    attention_selectivity,
    evaluate_icl,
    evaluate_prototype,
    sample_task,
    write_attention_report,
    write_icl_results,
)
from .linkpred import (
    finetune,
    hop_features,
    link_node_representations,
    link_pretrain,
    load_split,
    model_mrr,
    save_split,
    split_edges,
    test_mrr_of,
    write_link_results,
)
from .model import load_checkpoint, param_names, save_checkpoint
from .partition import load_partition, partition, save_partition
from .pretrain import build_corpus, pretrain, select_fraction
from .synth import generate
from .walks import WalkConfig


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def write_manifest(out_dir: Path, command: str, config_echo: dict, seed: int,
                   outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config_echo,
        "seed": seed,
        "git_describe": _git_describe(),
        "outputs": outputs,
        "wall_time_s": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, out_dir / "manifest.json")


def _load_corpus(args, cfg_seed: int):
    ds = load_dataset(args.dataset)
    pm = load_partition(args.partitions, ds.graph.n)
    corpus = build_corpus(ds, pm)
    if args.fraction is not None:
        corpus = select_fraction(corpus, args.fraction, cfg_seed)
    return ds, corpus


def _effective_seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.SYNTH_SCHEMA)
    seed = args.seed if args.seed is not None else 0
    ds = generate(cfgmod.synth_spec(cfg), seed)
    out = Path(args.out)
    save_dataset(out, ds)
    write_manifest(out, "synth", cfg, seed, [str(out)], started)
    print(f"synth: n={ds.graph.n} edges={ds.graph.m // 2} -> {out}")
    return 0


def cmd_partition(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.PARTITION_SCHEMA)
    seed = args.seed if args.seed is not None else 0
    ds = load_dataset(args.dataset)
    pm = partition(ds.graph, cfg["target_size"], seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_partition(out / "partition.tsv", pm)
    write_manifest(out, "partition", cfg, seed, [str(out / "partition.tsv")], started)
    print(f"partition: {pm.num_parts} parts, sizes {pm.part_sizes.min()}..{pm.part_sizes.max()}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.PRETRAIN_SCHEMA)
    cfg["seed"] = _effective_seed(args, cfg)
    tcfg, mcfg = cfgmod.pretrain_configs(cfg)
    ds, corpus = _load_corpus(args, cfg["seed"])
    if ds.features.shape[1] != mcfg.hidden_dim:
        raise ConfigError(
            f"hidden_dim {mcfg.hidden_dim} must equal feature dim {ds.features.shape[1]}"
        )
    out = Path(args.out)
    state = pretrain(tcfg, mcfg, corpus, ds.features, ds.graph.n, out_dir=out,
                     config_echo=cfg, workers=args.threads)
    write_manifest(out, "pretrain", cfg, cfg["seed"],
                   [str(out / "checkpoint.bin"), str(out / "loss_curve.csv")], started)
    losses = [h["loss"] for h in state.loss_history]
    print(f"pretrain: {state.step} steps, first loss {losses[0]:.4f}, last {losses[-1]:.4f}")
    return 0


def cmd_icl_eval(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.ICL_SCHEMA)
    cfg["seed"] = _effective_seed(args, cfg)
    ds = load_dataset(args.dataset)
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    walk_cfg = WalkConfig(walk_length=cfg["walk_length"], p=cfg["p"], q=cfg["q"])
    result = evaluate_icl(params, mcfg, ds, cfg["n_way"], cfg["k_shot"],
                          cfg["templates"], args.mode, walk_cfg, cfg["repeats"],
                          cfg["seed"])
    proto = evaluate_prototype(ds, cfg["n_way"], cfg["k_shot"], cfg["templates"],
                               cfg["hops"], cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_icl_results(out / "results.csv", ds.name, cfg["n_way"], cfg["k_shot"],
                      [(args.mode, result), (f"proto-h{cfg['hops']}", proto)])
    task = sample_task(ds, cfg["n_way"], cfg["k_shot"], cfg["seed"], 0)
    means, ratio = attention_selectivity(params, mcfg, ds, task, args.mode,
                                         walk_cfg, cfg["seed"])
    write_attention_report(out / "attention_report.csv", means)
    write_manifest(out, "icl-eval", cfg, cfg["seed"],
                   [str(out / "results.csv"), str(out / "attention_report.csv")], started)
    print(f"icl-eval[{args.mode}]: acc {result.mean:.4f} +- {result.std:.4f} "
          f"(proto {proto.mean:.4f}); attention same/diff ratio {ratio:.3f}")
    return 0


def cmd_link_pretrain(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.LINK_PRETRAIN_SCHEMA)
    cfg["seed"] = _effective_seed(args, cfg)
    lcfg, mcfg = cfgmod.link_pretrain_configs(cfg)
    ds, corpus = _load_corpus(args, cfg["seed"])
    if ds.features.shape[1] != mcfg.hidden_dim:
        raise ConfigError(
            f"hidden_dim {mcfg.hidden_dim} must equal feature dim {ds.features.shape[1]}"
        )
    out = Path(args.out)
    link_pretrain(lcfg, mcfg, corpus, ds.features, out_dir=out, config_echo=cfg)
    write_manifest(out, "link-pretrain", cfg, cfg["seed"],
                   [str(out / "checkpoint.bin")], started)
    print(f"link-pretrain: checkpoint -> {out / 'checkpoint.bin'}")
    return 0


def cmd_link_finetune(args) -> int:
    started = time.time()
    cfg = cfgmod.load_config(args.config, cfgmod.FINETUNE_SCHEMA)
    cfg["seed"] = _effective_seed(args, cfg)
    fcfg = cfgmod.finetune_config(cfg)
    ds = load_dataset(args.dataset)
    if args.checkpoint:
        enc_params, mcfg, _ = load_checkpoint(args.checkpoint)
        init_name = "pretrained"
    else:
        link_cfg = cfgmod.resolve({}, cfgmod.LINK_PRETRAIN_SCHEMA)
        link_cfg["hidden_dim"] = ds.features.shape[1]
        link_cfg["n_heads"] = args.scratch_heads
        link_cfg["ffn_dim"] = args.scratch_ffn
        link_cfg["n_hops"] = cfg["n_hops"]
        _, mcfg = cfgmod.link_pretrain_configs(link_cfg)
        enc_params = None
        init_name = "scratch"
    if ds.features.shape[1] != mcfg.hidden_dim:
        raise ConfigError("checkpoint width does not match dataset features")

    train_graph, split = split_edges(ds.graph, cfg["seed"], n_neg=fcfg.eval_negatives)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_split(out, split)
    result = finetune(enc_params, mcfg, train_graph, ds.features, split, fcfg,
                      n_hops=cfg["n_hops"])
    test_mrr = test_mrr_of(result, mcfg, train_graph, ds.features, split,
                           n_hops=cfg["n_hops"])
    names = param_names(mcfg) + sorted(result.scorer_params.keys())
    save_checkpoint(out / "model.bin", {**result.enc_params, **result.scorer_params},
                    mcfg, step=result.epochs_run, config_echo=cfg,
                    extra={"init": init_name, "seed": cfg["seed"],
                           "valid_mrr": result.valid_mrr, "n_hops": cfg["n_hops"],
                           "dataset": ds.name},
                    names=names)
    write_link_results(out / "results.csv", [{
        "dataset": ds.name, "init": init_name, "seed": cfg["seed"],
        "valid_mrr": result.valid_mrr, "test_mrr": test_mrr,
    }])
    write_manifest(out, "link-finetune", cfg, cfg["seed"],
                   [str(out / "model.bin"), str(out / "results.csv")], started)
    print(f"link-finetune[{init_name}]: valid MRR {result.valid_mrr:.4f}, "
          f"test MRR {test_mrr:.4f} ({result.epochs_run} epochs)")
    return 0


def cmd_link_eval(args) -> int:
    started = time.time()
    ds = load_dataset(args.dataset)
    params, mcfg, meta = load_checkpoint(args.checkpoint)
    extra = meta.get("extra", {})
    n_hops = int(extra.get("n_hops", 3))
    split = load_split(args.split, ds.graph.n)
    train_graph = graph_from_edges(
        ds.graph.n, split.train_edges[:, 0], split.train_edges[:, 1]
    )
    enc = {k: v for k, v in params.items() if not k.startswith("scorer.")}
    scorer = {k: v for k, v in params.items() if k.startswith("scorer.")}
    adj = build_norm_adjacency(train_graph)
    hops = hop_features(adj, ds.features, n_hops)
    h_node, _ = link_node_representations(enc, mcfg, hops, mask=None)
    valid_mrr = model_mrr(h_node, scorer, split.valid_edges, split.valid_negs)
    test_mrr = model_mrr(h_node, scorer, split.test_edges, split.test_negs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_link_results(out / "results.csv", [{
        "dataset": ds.name, "init": extra.get("init", "unknown"),
        "seed": extra.get("seed", 0), "valid_mrr": valid_mrr, "test_mrr": test_mrr,
    }])
    write_manifest(out, "link-eval", {"checkpoint": str(args.checkpoint)},
                   int(extra.get("seed", 0)), [str(out / "results.csv")], started)
    print(f"link-eval: valid MRR {valid_mrr:.4f}, test MRR {test_mrr:.4f}")
    return 0


def cmd_ablation(args) -> int:
    started = time.time()
    pre_cfg = cfgmod.load_config(args.config, cfgmod.PRETRAIN_SCHEMA)
    icl_cfg = cfgmod.load_config(args.icl_config, cfgmod.ICL_SCHEMA)
    seed = args.seed if args.seed is not None else pre_cfg["seed"]
    pre_cfg["seed"] = icl_cfg["seed"] = seed
    ds, corpus = _load_corpus(args, seed)
    eval_ds = load_dataset(args.eval_dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    walk_cfg = WalkConfig(walk_length=icl_cfg["walk_length"], p=icl_cfg["p"], q=icl_cfg["q"])
    rows = []
    for mode in ("ours", "no-ns", "random-ns"):
        run_cfg = dict(pre_cfg)
        run_cfg["negative_mode"] = mode
        tcfg, mcfg = cfgmod.pretrain_configs(run_cfg)
        state = pretrain(tcfg, mcfg, corpus, ds.features, ds.graph.n,
                         out_dir=out / mode, config_echo=run_cfg, workers=args.threads)
        result = evaluate_icl(state.params, mcfg, eval_ds, icl_cfg["n_way"],
                              icl_cfg["k_shot"], icl_cfg["templates"], "void",
                              walk_cfg, icl_cfg["repeats"], seed)
        rows.append((mode, result))
        print(f"ablation[{mode}]: acc {result.mean:.4f} +- {result.std:.4f}")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["mode", "template", "accuracy"])
        for mode, result in rows:
            for t, acc in enumerate(result.accuracies):
                w.writerow([mode, t, f"{acc:.6f}"])
            w.writerow([mode, "mean", f"{result.mean:.6f}"])
            w.writerow([mode, "std", f"{result.std:.6f}"])
    write_manifest(out, "ablation", {"pretrain": pre_cfg, "icl": icl_cfg}, seed,
                   [str(out / "ablation.csv")], started)
    return 0


def cmd_scaling_report(args) -> int:
    started = time.time()
    pre_cfg = cfgmod.load_config(args.config, cfgmod.PRETRAIN_SCHEMA)
    icl_cfg = cfgmod.load_config(args.icl_config, cfgmod.ICL_SCHEMA)
    link_cfg = cfgmod.load_config(args.link_config, cfgmod.LINK_PRETRAIN_SCHEMA)
    ft_cfg_d = cfgmod.load_config(args.ft_config, cfgmod.FINETUNE_SCHEMA)
    seed = args.seed if args.seed is not None else pre_cfg["seed"]
    for c in (pre_cfg, icl_cfg, link_cfg, ft_cfg_d):
        c["seed"] = seed
    ds = load_dataset(args.dataset)
    pm = load_partition(args.partitions, ds.graph.n)
    full_corpus = build_corpus(ds, pm)
    eval_ds = load_dataset(args.eval_dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    walk_cfg = WalkConfig(walk_length=icl_cfg["walk_length"], p=icl_cfg["p"], q=icl_cfg["q"])
    fcfg = cfgmod.finetune_config(ft_cfg_d)
    train_graph, split = split_edges(eval_ds.graph, seed, n_neg=fcfg.eval_negatives)

    rows = []
    for fraction in (0.25, 0.5, 1.0):
        corpus = select_fraction(full_corpus, fraction, seed)
        tcfg, mcfg = cfgmod.pretrain_configs(pre_cfg)
        state = pretrain(tcfg, mcfg, corpus, ds.features, ds.graph.n,
                         out_dir=out / f"node-{int(fraction * 100)}",
                         config_echo=pre_cfg, workers=args.threads)
        acc = evaluate_icl(state.params, mcfg, eval_ds, icl_cfg["n_way"],
                           icl_cfg["k_shot"], icl_cfg["templates"], "void",
                           walk_cfg, icl_cfg["repeats"], seed)
        lcfg, lmcfg = cfgmod.link_pretrain_configs(link_cfg)
        link_params = link_pretrain(lcfg, lmcfg, corpus, ds.features,
                                    out_dir=out / f"link-{int(fraction * 100)}",
                                    config_echo=link_cfg)
        ft = finetune(link_params, lmcfg, train_graph, eval_ds.features, split,
                      fcfg, n_hops=lcfg.n_hops)
        mrr = test_mrr_of(ft, lmcfg, train_graph, eval_ds.features, split,
                          n_hops=lcfg.n_hops)
        rows.append({"fraction": fraction, "accuracy": acc.mean, "test_mrr": mrr})
        print(f"scaling[{fraction:.0%}]: acc {acc.mean:.4f}, test MRR {mrr:.4f}")
    with open(out / "scaling.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["fraction", "accuracy", "test_mrr"])
        for r in rows:
            w.writerow([r["fraction"], f"{r['accuracy']:.6f}", f"{r['test_mrr']:.6f}"])
    write_manifest(out, "scaling-report",
                   {"pretrain": pre_cfg, "icl": icl_cfg, "link": link_cfg,
                    "finetune": ft_cfg_d},
                   seed, [str(out / "scaling.csv")], started)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphseq")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, out=True):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        if dataset:
            p.add_argument("--dataset", type=Path, required=True)
        if out:
            p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth", help="generate a synthetic block-model dataset")
    common(p, dataset=False)

    p = sub.add_parser("partition", help="partition a graph into node blocks")
    common(p)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=None)

    p = sub.add_parser("icl-eval", help="in-context few-shot node classification")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("void", "desc"), default="void")

    p = sub.add_parser("link-pretrain", help="link-track masked pretraining")
    common(p)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=None)

    p = sub.add_parser("link-finetune", help="fine-tune an edge scorer")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="pretrained link checkpoint; omit to train from scratch")
    p.add_argument("--scratch-heads", type=int, default=8)
    p.add_argument("--scratch-ffn", type=int, default=768)

    p = sub.add_parser("link-eval", help="evaluate a fine-tuned model's MRR")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)

    p = sub.add_parser("ablation", help="negative-sampling ablation study")
    common(p)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--eval-dataset", type=Path, required=True)
    p.add_argument("--icl-config", type=Path, default=None)

    p = sub.add_parser("scaling-report", help="pretraining-fraction scaling study")
    common(p)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--eval-dataset", type=Path, required=True)
    p.add_argument("--icl-config", type=Path, default=None)
    p.add_argument("--link-config", type=Path, default=None)
    p.add_argument("--ft-config", type=Path, default=None)

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "pretrain": cmd_pretrain,
    "icl-eval": cmd_icl_eval,
    "link-pretrain": cmd_link_pretrain,
    "link-finetune": cmd_link_finetune,
    "link-eval": cmd_link_eval,
    "ablation": cmd_ablation,
    "scaling-report": cmd_scaling_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
