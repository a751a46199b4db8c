"""Turn walks into training sequences: distractor suffixes + masked targets.

A sequence position carries two node ids: `node_ids` is the position's
identity (what pooling groups by and what the loss reconstructs), while
`input_ids` is the node whose feature vector is fed to the model (differs
only at RANDOM-corrupted positions). Masked positions keep their identity
but are embedded with the learned mask vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .graph import Graph

FEATURE = 0
MASK = 1
RANDOM = 2
UNCHANGED = 3
DISTRACTOR = 4

KIND_NAMES = ("FEATURE", "MASK", "RANDOM", "UNCHANGED", "DISTRACTOR")

NEGATIVE_MODES = ("ours", "no-ns", "random-ns")


@dataclass(frozen=True)
class MaskingConfig:
    mask_rate: float = 0.2
    p_random: float = 0.2
    p_unchanged: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.mask_rate < 1.0):
            raise ConfigError("mask_rate must be in (0, 1)")
        if self.p_random < 0 or self.p_unchanged < 0:
            raise ConfigError("replacement probabilities must be nonnegative")
        if self.p_random + self.p_unchanged > 1.0:
            raise ConfigError("p_random + p_unchanged must be <= 1")


@dataclass(eq=False)
class MaskedSequence:
    node_ids: np.ndarray  # int64 (l,), position identity
    input_ids: np.ndarray  # int64 (l,), node embedded at the position
    kinds: np.ndarray  # int8 (l,)
    target_positions: np.ndarray  # int64 (m,), sorted
    distractor_id: int | None = None
    num_distractors: int = 0

    @property
    def length(self) -> int:
        return int(self.node_ids.shape[0])

    @property
    def target_nodes(self) -> np.ndarray:
        """Ground-truth node id per target position."""
        return self.node_ids[self.target_positions]

    def validate(self) -> None:
        l = self.length
        k = self.num_distractors
        assert self.kinds.shape == (l,) and self.input_ids.shape == (l,)
        assert np.all(self.kinds[l - k :] == DISTRACTOR)
        assert not np.any(self.kinds[: l - k] == DISTRACTOR)
        if k and self.distractor_id is not None:
            assert np.all(self.node_ids[l - k :] == self.distractor_id)
        tk = self.kinds[self.target_positions]
        assert np.all(np.isin(tk, (MASK, RANDOM, UNCHANGED)))
        assert self.target_positions.shape[0] >= 1


def inject_distractor(
    walk: np.ndarray, g: Graph, rng: np.random.Generator
) -> tuple[np.ndarray, int, int | None]:
    """Replace the last K positions with one repeated random node.

    K is uniform on {0, ..., l-1}; K is capped below l so at least one real
    node (and hence one loss target) always survives.
    """
    length = walk.shape[0]
    k = int(rng.integers(0, length))
    node_ids = walk.copy()
    if k == 0:
        return node_ids, 0, None
    distractor = int(rng.integers(0, g.n))
    node_ids[length - k :] = distractor
    return node_ids, k, distractor


def inject_negatives(
    walk: np.ndarray, g: Graph, rng: np.random.Generator, mode: str = "ours"
) -> tuple[np.ndarray, int, int | None]:
    """Distractor suffix in one of the ablation modes.

    "ours": one node repeated K times; "no-ns": no suffix at all;
    "random-ns": K independently resampled nodes.
    """
    if mode == "ours":
        return inject_distractor(walk, g, rng)
    if mode == "no-ns":
        return walk.copy(), 0, None
    if mode == "random-ns":
        length = walk.shape[0]
        k = int(rng.integers(0, length))
        node_ids = walk.copy()
        if k:
            node_ids[length - k :] = rng.integers(0, g.n, size=k)
        return node_ids, k, None
    raise ConfigError(f"unknown negative mode '{mode}'")


def apply_masking(
    node_ids: np.ndarray,
    num_distractors: int,
    cfg: MaskingConfig,
    g: Graph,
    rng: np.random.Generator,
    distractor_id: int | None = None,
) -> MaskedSequence:
    """Pick target positions among the real prefix and corrupt their inputs.

    Exactly max(1, round(mask_rate * eligible)) targets, chosen uniformly
    without replacement; each becomes MASK / RANDOM / UNCHANGED with
    probability (1 - p_random - p_unchanged, p_random, p_unchanged).
    """
    length = node_ids.shape[0]
    eligible = length - num_distractors
    if eligible < 1:
        raise ValueError("no maskable positions (all-distractor sequence)")
    m = max(1, int(np.floor(cfg.mask_rate * eligible + 0.5)))
    positions = np.sort(rng.choice(eligible, size=m, replace=False))

    kinds = np.full(length, FEATURE, dtype=np.int8)
    if num_distractors:
        kinds[eligible:] = DISTRACTOR
    input_ids = node_ids.copy()
    draws = rng.random(m)
    p_mask = 1.0 - cfg.p_random - cfg.p_unchanged
    for pos, r in zip(positions, draws):
        if r < p_mask:
            kinds[pos] = MASK
        elif r < p_mask + cfg.p_random:
            kinds[pos] = RANDOM
            input_ids[pos] = int(rng.integers(0, g.n))
        else:
            kinds[pos] = UNCHANGED
    return MaskedSequence(
        node_ids=node_ids,
        input_ids=input_ids,
        kinds=kinds,
        target_positions=positions.astype(np.int64),
        distractor_id=distractor_id,
        num_distractors=num_distractors,
    )


def build_sequence(
    walk: np.ndarray,
    g: Graph,
    cfg: MaskingConfig,
    rng: np.random.Generator,
    mode: str = "ours",
) -> MaskedSequence:
    """Compose negative injection and masking for one walk."""
    node_ids, k, distractor = inject_negatives(walk, g, rng, mode)
    return apply_masking(node_ids, k, cfg, g, rng, distractor_id=distractor)
