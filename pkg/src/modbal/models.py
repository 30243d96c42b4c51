"""Multi-modal pose regressor built on :mod:`modbal.autodiff`.

Four modality encoders (small MLPs ending in a projection to a shared feature
width), one of three fusion modules, and a linear pose head. Coalitions are
evaluated by zeroing the unified features of absent modalities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fileio import read_container, write_container

MODALITIES = ("R", "L", "M", "W")
SHARED = "shared"
GROUPS = MODALITIES + (SHARED,)
FUSIONS = ("concat", "concat_mlp", "attention")

FULL_MASK = (1 << len(MODALITIES)) - 1
EMPTY_MASK = 0

CHECKPOINT_MAGIC = "MODBAL"
CHECKPOINT_VERSION = 1


def mask_of(modalities: Iterable[str]) -> int:
    """Bitmask with bit i set for ``MODALITIES[i]``."""
    mask = 0
    for m in modalities:
        if m not in MODALITIES:
            raise ValueError(f"unknown modality {m!r}")
        mask |= 1 << MODALITIES.index(m)
    return mask


def members(mask: int) -> tuple[str, ...]:
    return tuple(m for i, m in enumerate(MODALITIES) if mask >> i & 1)


def mask_label(mask: int) -> str:
    return "".join(members(mask)) or "-"


def default_input_dims() -> dict[str, int]:
    return {"R": 64, "L": 48, "M": 24, "W": 16}


@dataclass
class ModelConfig:
    fusion: str = "concat"
    feature_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    input_dims: dict[str, int] = field(default_factory=default_input_dims)
    joints: int = 17
    attn_layers: int = 2
    attn_ff_dim: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion kind {self.fusion!r}; expected one of {FUSIONS}")
        if set(self.input_dims) != set(MODALITIES):
            raise ValueError(f"input_dims must cover exactly {MODALITIES}")


class MultiModalModel:
    """Parameters live in ``params`` (name -> Tensor); ``groups`` tags each name."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.forward_calls = 0
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------

    def _affine(self, prefix: str, fan_in: int, fan_out: int, group: str) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = self._rng.uniform(-limit, limit, size=(fan_in, fan_out))
        self._add(f"{prefix}.weight", w, group)
        self._add(f"{prefix}.bias", np.zeros(fan_out), group)

    def _add(self, name: str, value: np.ndarray, group: str) -> None:
        self.params[name] = Tensor(value, name=name)
        self.groups[name] = group

    def _build(self) -> None:
        cfg = self.config
        d = cfg.feature_dim
        for m in MODALITIES:
            widths = [cfg.input_dims[m], *cfg.hidden, d]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                self._affine(f"enc.{m}.{i}", a, b, m)

        if cfg.fusion == "concat_mlp":
            widths = [len(MODALITIES) * d, d, d, d]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                self._affine(f"fuse.mlp.{i}", a, b, SHARED)
        elif cfg.fusion == "attention":
            for layer in range(cfg.attn_layers):
                p = f"fuse.attn.{layer}"
                for proj in ("q", "k", "v", "o"):
                    self._affine(f"{p}.{proj}", d, d, SHARED)
                self._affine(f"{p}.ff1", d, cfg.attn_ff_dim, SHARED)
                self._affine(f"{p}.ff2", cfg.attn_ff_dim, d, SHARED)
                for norm in ("ln1", "ln2"):
                    self._add(f"{p}.{norm}.gain", np.ones(d), SHARED)
                    self._add(f"{p}.{norm}.bias", np.zeros(d), SHARED)

        head_in = len(MODALITIES) * d if cfg.fusion == "concat" else d
        self._affine("head", head_in, 3 * cfg.joints, SHARED)

    # -- convenience -------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"state does not match model parameters: {sorted(missing)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def num_scalars(self, group: str | None = None) -> int:
        names = self.params if group is None else modality_parameters(self, group)
        return sum(self.params[n].data.size for n in names)

    def __call__(self, inputs, mask: int = FULL_MASK) -> Tensor:
        return forward(self, inputs, mask)


def _linear(model: MultiModalModel, prefix: str, x: Tensor) -> Tensor:
    return x @ model.params[f"{prefix}.weight"] + model.params[f"{prefix}.bias"]


def encode(model: MultiModalModel, modality: str, x) -> Tensor:
    """Unified feature ``(batch, feature_dim)`` for one modality."""
    cfg = model.config
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dims[modality]:
        raise ad.ShapeError(f"encode[{modality}]", x.shape, (None, cfg.input_dims[modality]))
    n_layers = len(cfg.hidden) + 1
    h = x
    for i in range(n_layers):
        h = _linear(model, f"enc.{modality}.{i}", h)
        if i < n_layers - 1:
            h = h.relu()
    return h


def apply_mask(features: Mapping[str, Tensor], mask: int) -> dict[str, Tensor]:
    """Replace the features of modalities absent from ``mask`` by zeros."""
    present = set(members(mask))
    return {m: features[m] if m in present else Tensor(np.zeros(features[m].shape)) for m in MODALITIES}


def _attention_layer(model: MultiModalModel, p: str, h: Tensor) -> Tensor:
    d = h.shape[-1]
    q = _linear(model, f"{p}.q", h)
    k = _linear(model, f"{p}.k", h)
    v = _linear(model, f"{p}.v", h)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
    attended = _linear(model, f"{p}.o", ad.softmax_lastdim(scores) @ v)
    h = ad.layernorm_lastdim(h + attended) * model.params[f"{p}.ln1.gain"] + model.params[f"{p}.ln1.bias"]
    ff = _linear(model, f"{p}.ff2", _linear(model, f"{p}.ff1", h).relu())
    return ad.layernorm_lastdim(h + ff) * model.params[f"{p}.ln2.gain"] + model.params[f"{p}.ln2.bias"]


def fuse_predict(model: MultiModalModel, masked_features: Mapping[str, Tensor], mask: int = FULL_MASK) -> Tensor:
    """Fuse already-masked features and regress poses of shape ``(batch, joints, 3)``.

    ``mask`` is informational here: absent modalities must already be zeroed.
    """
    cfg = model.config
    feats = [masked_features[m] for m in MODALITIES]
    batch = feats[0].shape[0]
    d = cfg.feature_dim
    if cfg.fusion == "concat":
        fused = ad.concat_lastdim(feats)
    elif cfg.fusion == "concat_mlp":
        fused = ad.concat_lastdim(feats)
        for i in range(3):
            fused = _linear(model, f"fuse.mlp.{i}", fused)
            if i < 2:
                fused = fused.relu()
    elif cfg.fusion == "attention":
        h = ad.concat_lastdim(feats).reshape(batch, len(MODALITIES), d)
        for layer in range(cfg.attn_layers):
            h = _attention_layer(model, f"fuse.attn.{layer}", h)
        fused = h.mean(axis=1)
    else:
        raise ValueError(f"unknown fusion kind {cfg.fusion!r}")
    out = _linear(model, "head", fused)
    return out.reshape(batch, cfg.joints, 3)


def encode_all(model: MultiModalModel, batch_inputs: Mapping[str, object]) -> dict[str, Tensor]:
    return {m: encode(model, m, batch_inputs[m]) for m in MODALITIES}


def predict_from_features(model: MultiModalModel, features: Mapping[str, Tensor], mask: int = FULL_MASK) -> Tensor:
    """One forward pass from unmasked encoder features; counted in ``forward_calls``."""
    model.forward_calls += 1
    if mask != FULL_MASK:
        features = apply_mask(features, mask)
    return fuse_predict(model, features, mask)


def forward(model: MultiModalModel, batch_inputs: Mapping[str, object], mask: int = FULL_MASK) -> Tensor:
    """Encode every modality, zero the absent ones, fuse and regress."""
    return predict_from_features(model, encode_all(model, batch_inputs), mask)


def modality_parameters(model: MultiModalModel, group: str) -> list[str]:
    if group not in GROUPS:
        raise ValueError(f"unknown parameter group {group!r}")
    return [name for name, g in model.groups.items() if g == group]


def head_blocks(model: MultiModalModel) -> dict[str, np.ndarray]:
    """Per-modality row blocks of the concat head weight."""
    if model.config.fusion != "concat":
        raise ValueError("head blocks are only defined for concat fusion")
    d = model.config.feature_dim
    w = model.params["head.weight"].data
    return {m: w[i * d:(i + 1) * d] for i, m in enumerate(MODALITIES)}


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: MultiModalModel, path) -> str:
    cfg = asdict(model.config)
    cfg["hidden"] = list(cfg["hidden"])
    header = {"model_config": cfg, "groups": model.groups}
    return write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, model.state_dict())


def load_checkpoint(path) -> MultiModalModel:
    header, arrays, _ = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    model = MultiModalModel(ModelConfig(**header["model_config"]))
    model.load_state_dict(arrays)
    return model
