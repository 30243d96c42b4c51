"""Synthetic multi-modal pose regression data.

A shared latent ``z`` drives both the pose target and every modality. Each
modality sees ``snr * B_m z`` plus unit Gaussian noise, so its
informativeness about the pose is set by its ``snr``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .fileio import read_container, write_container
from .models import MODALITIES, default_input_dims

DATA_MAGIC = "MBDATA"
DATA_VERSION = 1
NONLINEARITIES = ("none", "tanh")


def default_snr() -> dict[str, float]:
    return {"R": 8.0, "L": 6.0, "M": 1.0, "W": 0.5}


def default_nonlinearity() -> dict[str, str]:
    return {m: "none" for m in MODALITIES}


@dataclass
class DataConfig:
    n_samples: int = 4000
    joints: int = 17
    latent_dim: int = 24
    input_dims: dict[str, int] = field(default_factory=default_input_dims)
    snr: dict[str, float] = field(default_factory=default_snr)
    nonlinearity: dict[str, str] = field(default_factory=default_nonlinearity)
    scale_mm: float = 100.0
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 2:
            raise ConfigError(f"data.n_samples must be >= 2 (Pearson needs two samples), got {self.n_samples}")
        n_test = self.n_test
        if n_test < 2 or self.n_samples - n_test < 2:
            raise ConfigError(
                f"data.n_samples={self.n_samples} with test_fraction={self.test_fraction} "
                "leaves a split with fewer than 2 samples"
            )
        for key in ("input_dims", "snr", "nonlinearity"):
            missing = [m for m in MODALITIES if m not in getattr(self, key)]
            if missing:
                raise ConfigError(f"missing key data.{key}.{missing[0]}")
        for m in MODALITIES:
            if not self.snr[m] > 0:
                raise ConfigError(f"data.snr.{m} must be > 0, got {self.snr[m]}")
            if self.nonlinearity[m] not in NONLINEARITIES:
                raise ConfigError(f"data.nonlinearity.{m} must be one of {NONLINEARITIES}")
            if self.input_dims[m] < 1:
                raise ConfigError(f"data.input_dims.{m} must be >= 1")
        if self.joints < 1 or self.latent_dim < 1:
            raise ConfigError("data.joints and data.latent_dim must be >= 1")

    @property
    def n_test(self) -> int:
        return int(round(self.n_samples * self.test_fraction))


@dataclass
class Batch:
    inputs: dict[str, np.ndarray]
    targets: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class Dataset:
    inputs: dict[str, np.ndarray]
    targets: np.ndarray
    indices: np.ndarray
    config: DataConfig
    split: str

    def __len__(self) -> int:
        return len(self.indices)

    def take(self, rows) -> Batch:
        rows = np.asarray(rows)
        return Batch({m: x[rows] for m, x in self.inputs.items()}, self.targets[rows], self.indices[rows])

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.targets, self.indices)

    def samples(self) -> Iterator[Batch]:
        """Single-sample batches in storage order."""
        for i in range(len(self)):
            yield self.take([i])


def generate(config: DataConfig) -> tuple[Dataset, Dataset]:
    """Draw the full sample set and split it 80/20 (by ``test_fraction``)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, k, j = config.n_samples, config.latent_dim, config.joints

    pose_map = rng.normal(size=(3 * j, k)) / np.sqrt(k)
    sensor_maps = {m: rng.normal(size=(config.input_dims[m], k)) / np.sqrt(k) for m in MODALITIES}
    z = rng.normal(size=(n, k))
    targets = (z @ pose_map.T).reshape(n, j, 3) * config.scale_mm

    inputs = {}
    for m in MODALITIES:
        signal = z @ sensor_maps[m].T
        if config.nonlinearity[m] == "tanh":
            signal = np.tanh(signal)
        inputs[m] = config.snr[m] * signal + rng.normal(size=(n, config.input_dims[m]))

    order = rng.permutation(n)
    test_rows = np.sort(order[: config.n_test])
    train_rows = np.sort(order[config.n_test:])

    def subset(rows, split):
        return Dataset({m: x[rows] for m, x in inputs.items()}, targets[rows], rows.astype(np.int64), config, split)

    return subset(train_rows, "train"), subset(test_rows, "test")


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """Shuffled mini-batches; a trailing batch with fewer than 2 rows is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        if len(rows) < 2:
            break
        yield ds.take(rows)


def _config_dict(config: DataConfig) -> dict:
    return asdict(config)


def save(ds: Dataset, path) -> str:
    arrays = {f"inputs.{m}": ds.inputs[m] for m in MODALITIES}
    arrays["targets"] = ds.targets
    arrays["indices"] = ds.indices.astype(np.float64)
    header = {"config": _config_dict(ds.config), "split": ds.split}
    return write_container(path, DATA_MAGIC, DATA_VERSION, header, arrays)


def load(path) -> Dataset:
    header, arrays, _ = read_container(path, DATA_MAGIC, DATA_VERSION)
    config = DataConfig(**header["config"])
    inputs = {m: arrays[f"inputs.{m}"] for m in MODALITIES}
    return Dataset(inputs, arrays["targets"], arrays["indices"].astype(np.int64), config, header["split"])


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return (
        a.split == b.split
        and asdict(a.config) == asdict(b.config)
        and np.array_equal(a.indices, b.indices)
        and np.array_equal(a.targets, b.targets)
        and all(np.array_equal(a.inputs[m], b.inputs[m]) for m in MODALITIES)
    )
