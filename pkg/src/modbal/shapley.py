"""Modality contribution scores: Pearson profit and exact Shapley values.

The profit of a coalition is the sum, over every pose coordinate, of the
batch-wise Pearson correlation between ground truth and the prediction made
with only that coalition's features kept. The empty coalition is worth 0.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, no_tape
from .models import (
    EMPTY_MASK,
    FULL_MASK,
    MODALITIES,
    MultiModalModel,
    encode_all,
    forward,
    mask_of,
    predict_from_features,
)

DEGENERATE_STD = 1e-12


def pearson(a, b) -> float:
    """Population Pearson correlation; 0.0 when either side is (near) constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pearson needs two 1-D sequences of equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("pearson needs at least 2 values")
    da = a - a.mean()
    db = b - b.mean()
    va = (da * da).mean()
    vb = (db * db).mean()
    if math.sqrt(va) < DEGENERATE_STD or math.sqrt(vb) < DEGENERATE_STD:
        return 0.0
    # sqrt(va * vb) rather than sqrt(va) * sqrt(vb): exact 1.0 for a == b
    return float((da * db).mean() / math.sqrt(va * vb))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def profit(y, yhat) -> float:
    """Sum of per-coordinate Pearson correlations along the batch axis."""
    y = _as_array(y)
    yhat = _as_array(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"profit: shape mismatch {y.shape} vs {yhat.shape}")
    if y.shape[0] < 2:
        raise ValueError("profit needs a batch of at least 2 samples")
    a = y.reshape(y.shape[0], -1)
    b = yhat.reshape(yhat.shape[0], -1)
    return float(_rho(a, b, axis=0).sum())


def _rho(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    """Per-column correlations of ``a`` and ``b`` along ``axis``; 0 where either is constant."""
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=axis, keepdims=True)
    va = (da * da).mean(axis=0)
    vb = (db * db).mean(axis=axis)
    ok = (np.sqrt(va) >= DEGENERATE_STD) & (np.sqrt(vb) >= DEGENERATE_STD)
    cov = (da * db).mean(axis=axis)
    return np.where(ok, cov / np.sqrt(np.where(ok, va * vb, 1.0)), 0.0)


def shapley_weight(coalition_size: int, n_players: int) -> float:
    """|S|! (n - |S| - 1)! / n!"""
    return math.factorial(coalition_size) * math.factorial(n_players - coalition_size - 1) / math.factorial(n_players)


def weight_table(n_players: int = len(MODALITIES)) -> dict[int, float]:
    return {s: shapley_weight(s, n_players) for s in range(n_players)}


@dataclass
class ShapleyReport:
    per_modality: dict[str, float]
    full_profit: float
    batch_index: int = 0
    epoch_index: int = 0
    coalition_profits: dict[int, float] = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        out = {"epoch": self.epoch_index, "batch": self.batch_index}
        out.update({f"phi_{m}": self.per_modality[m] for m in MODALITIES})
        out["full_profit"] = self.full_profit
        return out


def coalition_profit(model: MultiModalModel, batch, mask: int) -> float:
    """Profit of ``mask``; the empty coalition short-circuits to 0.0."""
    if mask == EMPTY_MASK:
        return 0.0
    if len(batch.targets) < 2:
        raise ValueError("coalition_profit needs a batch of at least 2 samples")
    with no_tape():
        pred = forward(model, batch.inputs, mask)
    return profit(batch.targets, pred)


def profits_stacked(y, preds: np.ndarray) -> np.ndarray:
    """Vectorised :func:`profit` for a stack of predictions ``(k, batch, ...)``."""
    y = _as_array(y)
    k, n = preds.shape[0], preds.shape[1]
    if preds.shape[1:] != y.shape:
        raise ValueError(f"profit: shape mismatch {y.shape} vs {preds.shape[1:]}")
    if n < 2:
        raise ValueError("profit needs a batch of at least 2 samples")
    return _rho(y.reshape(n, -1), preds.reshape(k, n, -1), axis=1).sum(axis=1)


def _player_masks(players: tuple[str, ...]) -> list[int]:
    return [mask_of(c) for r in range(len(players) + 1) for c in itertools.combinations(players, r)]


def combine(profits: Mapping[int, float], players: tuple[str, ...] = MODALITIES) -> dict[str, float]:
    """Shapley values from a table of coalition profits keyed by bitmask."""
    n = len(players)
    weights = weight_table(n)
    phi = {m: 0.0 for m in MODALITIES}
    for m in players:
        bit = mask_of([m])
        others = tuple(p for p in players if p != m)
        for r in range(n):
            w = weights[r]
            for subset in itertools.combinations(others, r):
                s = mask_of(subset)
                phi[m] += w * (profits[s | bit] - profits[s])
    return phi


def shapley_scores(
    model: MultiModalModel,
    batch,
    players: tuple[str, ...] = MODALITIES,
    *,
    epoch: int = 0,
    batch_index: int = 0,
    timings: dict | None = None,
) -> ShapleyReport:
    """Exact Shapley values over the coalitions of ``players``.

    Encoders run once; each non-empty coalition then costs one fusion+head
    pass (2^n - 1 forward passes in total). Modalities outside ``players``
    are always masked out and score 0.
    """
    if len(batch.targets) < 2:
        raise ValueError("shapley_scores needs a batch of at least 2 samples")
    masks = [mask for mask in _player_masks(players) if mask != EMPTY_MASK]
    t0 = time.perf_counter()
    with no_tape():
        feats = encode_all(model, batch.inputs)
        preds = np.stack([predict_from_features(model, feats, mask).data for mask in masks])
    t1 = time.perf_counter()
    values = profits_stacked(batch.targets, preds)
    t2 = time.perf_counter()
    profits = {EMPTY_MASK: 0.0}
    profits.update({mask: float(v) for mask, v in zip(masks, values)})
    phi = combine(profits, players)
    t3 = time.perf_counter()
    if timings is not None:
        timings["pose_est"] = timings.get("pose_est", 0.0) + (t1 - t0)
        timings["correlation"] = timings.get("correlation", 0.0) + (t2 - t1)
        timings["score_calc"] = timings.get("score_calc", 0.0) + (t3 - t2)
    full = profits[mask_of(players)]
    return ShapleyReport(phi, full, batch_index, epoch, profits)


def shapley_oracle(
    model: MultiModalModel,
    batch,
    players: tuple[str, ...] = MODALITIES,
    value: Callable[[int], float] | None = None,
) -> ShapleyReport:
    """Permutation definition: average marginal gain over all join orders.

    No memoisation and no factorial weights; kept independent of
    :func:`shapley_scores` so it can check it.
    """
    if value is None:
        def value(mask):
            return coalition_profit(model, batch, mask)

    phi = {m: 0.0 for m in MODALITIES}
    orders = list(itertools.permutations(players))
    for order in orders:
        joined: list[str] = []
        for m in order:
            before = value(mask_of(joined))
            joined.append(m)
            phi[m] += value(mask_of(joined)) - before
    phi = {m: v / len(orders) for m, v in phi.items()}
    return ShapleyReport(phi, value(mask_of(players)))


def efficiency_gap(report: ShapleyReport) -> float:
    return abs(sum(report.per_modality.values()) - report.full_profit)


__all__ = [
    "pearson", "profit", "shapley_weight", "weight_table", "ShapleyReport", "coalition_profit",
    "profits_stacked", "combine", "shapley_scores", "shapley_oracle", "efficiency_gap", "FULL_MASK", "EMPTY_MASK",
]
