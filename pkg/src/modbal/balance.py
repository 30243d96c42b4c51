"""Adaptive weight constraint: Fisher-weighted pull of encoder weights
toward their epoch-start values, stronger for the higher-scoring modalities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .metrics import mpjpe_loss
from .models import MODALITIES, MultiModalModel, forward, mask_of, modality_parameters

log = logging.getLogger(__name__)


@dataclass
class AwcConfig:
    alpha_superior: float = 20000.0
    alpha_inferior: float = 10000.0
    window_epochs: int = 20
    fim_sample_size: int = 256

    def validate(self) -> None:
        from .errors import ConfigError

        if self.alpha_superior < 0 or self.alpha_inferior < 0:
            raise ConfigError("balance.alpha_superior and balance.alpha_inferior must be >= 0")
        if self.window_epochs < 0:
            raise ConfigError("balance.window_epochs must be >= 0")
        if self.fim_sample_size < 1:
            raise ConfigError("balance.fim_sample_size must be >= 1")


@dataclass(frozen=True)
class ParamSnapshot:
    entries: Mapping[str, np.ndarray]
    epoch: int = 0


def snapshot(model: MultiModalModel, epoch: int = 0, names: Iterable[str] | None = None) -> ParamSnapshot:
    names = list(model.params) if names is None else list(names)
    entries = {}
    for n in names:
        arr = model.params[n].data.copy()
        arr.setflags(write=False)
        entries[n] = arr
    return ParamSnapshot(entries, epoch)


@dataclass
class FimDiagonal:
    entries: dict[str, np.ndarray]
    sample_count: int
    epoch: int = 0

    def group_means(self, model: MultiModalModel) -> dict[str, float]:
        out = {}
        for m in MODALITIES:
            vals = [self.entries[n].ravel() for n in modality_parameters(model, m) if n in self.entries]
            out[m] = float(np.concatenate(vals).mean()) if vals else 0.0
        return out


def task_loss(model: MultiModalModel, sample) -> Tensor:
    return mpjpe_loss(forward(model, sample.inputs), sample.targets)


def compute_fim(
    model,
    samples: Iterable,
    loss_fn: Callable = task_loss,
    names: Iterable[str] | None = None,
    epoch: int = 0,
) -> FimDiagonal:
    """Diagonal Fisher estimate: per-sample squared gradients, averaged.

    ``model`` needs a ``params`` mapping of named tensors; ``loss_fn(model,
    sample)`` must return a scalar tensor. Each sample gets its own tape.
    """
    params = model.params
    names = list(params) if names is None else list(names)
    watched = [params[n] for n in names]
    acc = {n: np.zeros(params[n].shape) for n in names}
    count = 0
    for sample in samples:
        with Tape() as tape:
            loss = loss_fn(model, sample)
        grads = backward(loss, tape, watched)
        for n in names:
            acc[n] += grads[n] * grads[n]
        count += 1
    if count == 0:
        raise ValueError("compute_fim needs at least one sample")
    return FimDiagonal({n: a / count for n, a in acc.items()}, count, epoch)


@dataclass
class ModalityPartition:
    superior: frozenset
    inferior: frozenset
    source_scores: dict[str, float] = field(default_factory=dict)
    degenerate: bool = False

    @property
    def mask(self) -> int:
        """Bitmask of the superior set."""
        return mask_of(sorted(self.superior, key=MODALITIES.index))


def _lloyd(vals: np.ndarray, upper: np.ndarray, max_iter: int) -> np.ndarray:
    """Two-centroid Lloyd iterations from an initial assignment until it is stable."""
    for _ in range(max_iter):
        c_hi = vals[upper].mean()
        c_lo = vals[~upper].mean()
        new = np.abs(vals - c_hi) < np.abs(vals - c_lo)  # ties go to the lower cluster
        if np.array_equal(new, upper) or new.all() or not new.any():
            break
        upper = new
    return upper


def _inertia(vals: np.ndarray, upper: np.ndarray) -> float:
    return sum(float(((g - g.mean()) ** 2).sum()) for g in (vals[upper], vals[~upper]))


def partition_modalities(scores: Mapping[str, float], max_iter: int = 100) -> ModalityPartition:
    """Two-cluster 1-D K-means on the modality scores.

    The first run starts from centroids at the min and max score. Lloyd
    iterations can stop in a local optimum, so further restarts begin from
    every sorted threshold cut and the assignment with the lowest inertia is
    kept (the first run wins ties). All-equal scores give a single (superior)
    cluster, flagged as degenerate.
    """
    mods = [m for m in MODALITIES if m in scores]
    vals = np.array([float(scores[m]) for m in mods])
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"partition_modalities needs finite scores, got {dict(scores)}")
    lo, hi = vals.min(), vals.max()
    if lo == hi:
        log.warning("all modality scores equal (%s); treating every modality as superior", lo)
        return ModalityPartition(frozenset(mods), frozenset(), dict(scores), degenerate=True)

    starts = [np.abs(vals - hi) < np.abs(vals - lo)]
    starts += [vals >= t for t in np.unique(vals)[1:]]
    best, best_inertia = None, np.inf
    for start in starts:
        upper = _lloyd(vals, start, max_iter)
        inertia = _inertia(vals, upper)
        if best is None or inertia < best_inertia - 1e-12 * max(1.0, best_inertia):
            best, best_inertia = upper, inertia
    sup = frozenset(m for m, u in zip(mods, best) if u)
    inf = frozenset(m for m, u in zip(mods, best) if not u)
    return ModalityPartition(sup, inf, dict(scores))


def alpha_for(modality: str, partition: ModalityPartition, cfg: AwcConfig) -> float:
    if modality in partition.superior:
        return cfg.alpha_superior
    if modality in partition.inferior:
        return cfg.alpha_inferior
    return 0.0


def awc_loss(
    model: MultiModalModel,
    snap: ParamSnapshot,
    fim: FimDiagonal,
    partition: ModalityPartition,
    cfg: AwcConfig,
) -> Tensor:
    """sum_m alpha(m) * sum_i F_ii (theta_i - theta0_i)^2 / 2 over encoder weights only."""
    total = None
    for m in MODALITIES:
        alpha = alpha_for(m, partition, cfg)
        if alpha == 0.0:
            continue
        group = None
        for name in modality_parameters(model, m):
            p = model.params[name]
            ref = snap.entries.get(name)
            weight = fim.entries.get(name)
            if ref is None or weight is None:
                raise KeyError(f"snapshot/FIM has no entry for {name}")
            if ref.shape != p.shape or weight.shape != p.shape:
                raise ad.ShapeError("awc_loss", p.shape, ref.shape, weight.shape)
            term = (Tensor(weight) * (p - Tensor(ref)).square()).sum()
            group = term if group is None else group + term
        if group is not None:
            scaled = group * (alpha / 2.0)
            total = scaled if total is None else total + scaled
    return total if total is not None else Tensor(0.0)


def in_window(epoch: int, cfg: AwcConfig) -> bool:
    return epoch < cfg.window_epochs
