"""Entropy scoring and the confident/medium/uncertain dataset split.

Every sample is scored with the current global model.  The lowest-entropy
fraction becomes the confident subset, the highest-entropy fraction the
uncertain subset, and the remainder sits in the middle.  Ties are broken
by ascending sample index so the split is identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Sample
from .errors import ConfigError


@dataclass
class UncertaintyPartition:
    low: np.ndarray    # confident sample indices, entropy ascending
    mid: np.ndarray
    high: np.ndarray   # uncertain sample indices, entropy ascending
    entropy: np.ndarray  # per-sample scores, original dataset order


def entropy_single(probs: np.ndarray) -> float:
    """Shannon entropy -sum(p ln p) of one distribution, with 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ConfigError(f"expected a probability vector, got shape {probs.shape}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ConfigError("invalid probability distribution")
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return float(-terms.sum())


def entropy_multi(probs: np.ndarray, unknown) -> float:
    """Mean binary entropy over the unknown classes, normalized to [0, 1]."""
    unknown = list(unknown)
    if not unknown:
        raise ConfigError("unknown class set must be nonempty")
    p = np.asarray(probs, dtype=np.float64)[unknown]
    if np.any(p < 0) or np.any(p > 1):
        raise ConfigError("per-class probabilities must lie in [0, 1]")
    return float(np.mean([_binary_entropy(v) for v in p]) / np.log(2.0))


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * np.log(p) - (1.0 - p) * np.log(1.0 - p)


def score_dataset(dataset: list[Sample], params: nn.ModelParams, task: str,
                  unknown) -> np.ndarray:
    """Per-sample entropy under the given model, in dataset order."""
    xs = np.stack([s.x for s in dataset])
    logits = nn.forward(params, xs).logits
    if task == "single":
        probs = nn.softmax(logits)
        return np.array([entropy_single(p) for p in probs])
    probs = nn.sigmoid(logits)
    return np.array([entropy_multi(p, unknown) for p in probs])


def partition(dataset: list[Sample], global_params: nn.ModelParams, task: str,
              unknown, frac_l: float, frac_h: float) -> UncertaintyPartition:
    """Split the dataset into confident / medium / uncertain index sets.

    Sizes are round(frac_l * n) and round(frac_h * n); the uncertain count
    is clamped so both never overlap after rounding.
    """
    if frac_l < 0 or frac_h < 0 or frac_l + frac_h > 1.0:
        raise ConfigError(
            f"need frac_l + frac_h <= 1, got {frac_l} + {frac_h}")
    if not dataset:
        raise ConfigError("cannot partition an empty dataset")
    scores = score_dataset(dataset, global_params, task, unknown)
    n = len(dataset)
    n_l = int(round(frac_l * n))
    n_h = min(int(round(frac_h * n)), n - n_l)
    order = np.argsort(scores, kind="stable")  # ties keep ascending index
    return UncertaintyPartition(
        low=order[:n_l].copy(),
        mid=order[n_l:n - n_h].copy(),
        high=order[n - n_h:].copy(),
        entropy=scores,
    )
