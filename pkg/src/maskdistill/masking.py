"""Magnitude-based, per-tensor teacher masking.

Within every maskable tensor the ``floor(r * N)`` smallest-magnitude weights are
zeroed. Ties in magnitude are broken by ascending flat index, so the masks for
increasing ratios are nested. One-dimensional tensors (layer-norm gains and
biases) are never masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import read_container, write_container
from .errors import DomainError, StructuralError
from .model import ParameterView


@dataclass(frozen=True)
class LayerMask:
    name: str
    threshold: float
    mask: np.ndarray  # bool, same shape as the tensor; True = kept

    @property
    def kept_count(self) -> int:
        return int(self.mask.sum())

    @property
    def size(self) -> int:
        return int(self.mask.size)


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    layers: tuple[LayerMask, ...]

    def __getitem__(self, name: str) -> LayerMask:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def is_maskable(values: np.ndarray) -> bool:
    return np.ndim(values) >= 2


def masked_count(ratio: float, size: int) -> int:
    # the epsilon guards products such as 0.29 * 100 = 28.999999999999996
    return min(size, int(math.floor(ratio * size + 1e-9)))


def _layer_mask(name: str, values: np.ndarray, ratio: float) -> LayerMask:
    flat = np.abs(values).ravel()
    k = masked_count(ratio, flat.size)
    order = np.argsort(flat, kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:k]] = False
    threshold = float(flat[order[k]]) if k < flat.size else math.inf
    return LayerMask(name, threshold, keep.reshape(values.shape))


def build_mask(teacher: ParameterView, ratio: float) -> MaskPlan:
    ratio = float(ratio)
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"mask ratio must lie in [0, 1], got {ratio}")
    layers = []
    for name, values in teacher.items():
        if not is_maskable(values):
            continue
        if not np.all(np.isfinite(values)):
            raise DomainError(f"non-finite teacher weights in {name}")
        layers.append(_layer_mask(name, values, ratio))
    return MaskPlan(ratio, tuple(layers))


def apply_mask(teacher: ParameterView, plan: MaskPlan) -> ParameterView:
    """Return a new view with ``mask * w`` on planned tensors; ``teacher`` is not modified."""
    by_name = {layer.name: layer for layer in plan.layers}
    for name, layer in by_name.items():
        if name not in teacher:
            raise StructuralError(f"mask plan names unknown layer {name!r}")
        if teacher[name].shape != layer.mask.shape:
            raise StructuralError(f"mask shape {layer.mask.shape} != tensor shape {teacher[name].shape} for {name}")
    return ParameterView(
        (name, values * by_name[name].mask if name in by_name else values.copy())
        for name, values in teacher.items()
    )


def masked_fraction(plan: MaskPlan) -> tuple[dict[str, float], float]:
    """Per-layer fraction of masked entries and the global fraction over planned layers."""
    per_layer = {layer.name: 1.0 - layer.kept_count / layer.size for layer in plan.layers}
    total = sum(layer.size for layer in plan.layers)
    masked = sum(layer.size - layer.kept_count for layer in plan.layers)
    return per_layer, (masked / total if total else 0.0)


def save_plan(path, plan: MaskPlan) -> None:
    meta = {
        "type": "mask_plan",
        "ratio": plan.ratio,
        "thresholds": {layer.name: layer.threshold for layer in plan.layers},
    }
    write_container(path, meta, [(layer.name, layer.mask) for layer in plan.layers])


def load_plan(path) -> MaskPlan:
    meta, arrays = read_container(path)
    if meta.get("type") != "mask_plan":
        raise StructuralError(f"{path} does not hold a mask plan")
    thresholds = meta["thresholds"]
    return MaskPlan(
        float(meta["ratio"]),
        tuple(LayerMask(name, float(thresholds[name]), mask) for name, mask in arrays),
    )
