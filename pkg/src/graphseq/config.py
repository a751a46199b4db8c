"""Strict key/value config files.

One `key = value` pair per line, '#' comments. Unknown keys are rejected with
the nearest valid key named, so hyperparameter typos fail loudly instead of
silently corrupting an experiment. Key names mirror the hyperparameter tables
(mask_rate, p_random, hidden_dim, warmup_updates, ...).
"""

from __future__ import annotations

import difflib
from pathlib import Path

from .errors import ConfigError
from .masking import MaskingConfig, NEGATIVE_MODES
from .model import ModelConfig
from .pretrain import TrainConfig
from .linkpred import FinetuneConfig, LinkTrainConfig
from .synth import SynthSpec
from .walks import WalkConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a bool: {s}")


PRETRAIN_SCHEMA = {
    "mask_rate": (float, 0.2),
    "p_random": (float, 0.2),
    "p_unchanged": (float, 0.2),
    "hidden_dim": (int, 768),
    "ffn_dim": (int, 3072),
    "n_layers": (int, 3),
    "n_heads": (int, 12),
    "epochs": (int, 10),
    "weight_decay": (float, 0.01),
    "peak_lr": (float, 1e-4),
    "end_lr": (float, 1e-5),
    "warmup_updates": (int, 10000),
    "dropout": (float, 0.3),
    "attention_dropout": (float, 0.3),
    "emb_dropout": (float, 0.3),
    "p": (float, 0.25),
    "q": (float, 0.25),
    "walk_length": (int, 20),
    "batch_size": (int, 1024),
    "seed": (int, 0),
    "negative_mode": (str, "ours"),
}

LINK_PRETRAIN_SCHEMA = {
    "mask_rate": (float, 0.5),
    "p_random": (float, 0.0),
    "p_unchanged": (float, 0.0),
    "hidden_dim": (int, 384),
    "ffn_dim": (int, 768),
    "n_layers": (int, 2),
    "n_heads": (int, 8),
    "epochs": (int, 100),
    "weight_decay": (float, 0.0),
    "peak_lr": (float, 1e-3),
    "end_lr": (float, 1e-4),
    "warmup_updates": (int, 100),
    "dropout": (float, 0.1),
    "attention_dropout": (float, 0.1),
    "emb_dropout": (float, 0.0),
    "n_hops": (int, 3),
    "seed": (int, 0),
}

FINETUNE_SCHEMA = {
    "lr": (float, 1e-3),
    "projector_layers": (int, 3),
    "projector_dim": (int, 256),
    "epochs": (int, 1000),
    "patience": (int, 20),
    "batch_size": (int, 4096),
    "eval_negatives": (int, 200),
    "n_hops": (int, 3),
    "seed": (int, 0),
}

SYNTH_SCHEMA = {
    "n": (int, 1000),
    "classes": (int, 5),
    "dim": (int, 32),
    "p_in": (float, 0.02),
    "p_out": (float, 0.002),
    "noise": (float, 0.5),
    "separation": (float, 1.0),
}

PARTITION_SCHEMA = {
    "target_size": (int, 10000),
}

ICL_SCHEMA = {
    "n_way": (int, 5),
    "k_shot": (int, 3),
    "templates": (int, 100),
    "repeats": (int, 10),
    "hops": (int, 0),
    "p": (float, 0.25),
    "q": (float, 0.25),
    "walk_length": (int, 20),
    "seed": (int, 0),
}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


def resolve(raw: dict[str, str], schema: dict) -> dict:
    """Apply defaults and types; reject unknown keys naming the nearest one."""
    out = {key: default for key, (_, default) in schema.items()}
    for key, value in raw.items():
        if key not in schema:
            close = difflib.get_close_matches(key, schema.keys(), n=1)
            hint = f"; did you mean '{close[0]}'?" if close else ""
            raise ConfigError(f"unknown key '{key}'{hint}")
        parser = schema[key][0]
        try:
            out[key] = _parse_bool(value) if parser is bool else parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {value}") from exc
    return out


def load_config(path: str | Path | None, schema: dict) -> dict:
    raw = parse_kv_file(path) if path else {}
    return resolve(raw, schema)


def pretrain_configs(cfg: dict) -> tuple[TrainConfig, ModelConfig]:
    if cfg["negative_mode"] not in NEGATIVE_MODES:
        raise ConfigError(
            f"negative_mode must be one of {NEGATIVE_MODES}, got '{cfg['negative_mode']}'"
        )
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        peak_lr=cfg["peak_lr"],
        end_lr=cfg["end_lr"],
        warmup_updates=cfg["warmup_updates"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        walk=WalkConfig(walk_length=cfg["walk_length"], p=cfg["p"], q=cfg["q"]),
        masking=MaskingConfig(
            mask_rate=cfg["mask_rate"],
            p_random=cfg["p_random"],
            p_unchanged=cfg["p_unchanged"],
        ),
        seed=cfg["seed"],
        negative_mode=cfg["negative_mode"],
    )
    mcfg = ModelConfig(
        hidden_dim=cfg["hidden_dim"],
        ffn_dim=cfg["ffn_dim"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        max_len=cfg["walk_length"],
        dropout=cfg["dropout"],
        attention_dropout=cfg["attention_dropout"],
        emb_dropout=cfg["emb_dropout"],
    )
    return tcfg, mcfg


def link_pretrain_configs(cfg: dict) -> tuple[LinkTrainConfig, ModelConfig]:
    if cfg["p_random"] != 0.0 or cfg["p_unchanged"] != 0.0:
        raise ConfigError("the link track uses mask-only corruption "
                          "(p_random = 0 and p_unchanged = 0)")
    lcfg = LinkTrainConfig(
        epochs=cfg["epochs"],
        peak_lr=cfg["peak_lr"],
        end_lr=cfg["end_lr"],
        warmup_updates=cfg["warmup_updates"],
        weight_decay=cfg["weight_decay"],
        mask_rate=cfg["mask_rate"],
        n_hops=cfg["n_hops"],
        seed=cfg["seed"],
    )
    mcfg = ModelConfig(
        hidden_dim=cfg["hidden_dim"],
        ffn_dim=cfg["ffn_dim"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        max_len=cfg["n_hops"] + 1,
        dropout=cfg["dropout"],
        attention_dropout=cfg["attention_dropout"],
        emb_dropout=cfg["emb_dropout"],
        link_head=True,
    )
    return lcfg, mcfg


def finetune_config(cfg: dict) -> FinetuneConfig:
    return FinetuneConfig(
        lr=cfg["lr"],
        projector_layers=cfg["projector_layers"],
        projector_dim=cfg["projector_dim"],
        epochs=cfg["epochs"],
        patience=cfg["patience"],
        batch_size=cfg["batch_size"],
        eval_negatives=cfg["eval_negatives"],
        seed=cfg["seed"],
    )


def synth_spec(cfg: dict) -> SynthSpec:
    return SynthSpec(
        n=cfg["n"],
        classes=cfg["classes"],
        dim=cfg["dim"],
        p_in=cfg["p_in"],
        p_out=cfg["p_out"],
        noise=cfg["noise"],
        separation=cfg["separation"],
    )
