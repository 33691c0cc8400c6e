"""Thresholds, masks and one-shot application."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyModule, RatioOutOfRange, ShapeMismatch, UnknownTensor, UnknownPreset
from .importance import ImportanceTable, layer_scores, magnitude_scores, pool_layers, prunable_ids
from .taxonomy import PRUNABLE_ROLES, LayerEntry
from .tensor_store import NUMPY_DTYPES, Checkpoint, TensorRecord

SCHEMES = ("per-module", "model-as-module", "uniform-magnitude")
POOLED_KEY = "ALL"

PRESET_RATIOS = {"dimap1": 0.145, "dimap2": 0.335, "dimap3": 0.525}

MaskSet = Dict[str, np.ndarray]


def preset_ratio(name: str) -> float:
    try:
        return PRESET_RATIOS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESET_RATIOS)}") from None


@dataclass
class PrunePlan:
    scheme: str
    target_ratio: float
    thresholds: Dict[str, Optional[float]] = field(default_factory=dict)
    removal_counts: Dict[str, int] = field(default_factory=dict)
    module_sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def total_removed(self) -> int:
        return sum(self.removal_counts.values())

    @property
    def total_prunable(self) -> int:
        return sum(self.module_sizes.values())


def select_lowest(scores: np.ndarray, k: int) -> Tuple[np.ndarray, Optional[float]]:
    """Boolean mask of the k lowest scores and the largest removed score.

    Equal scores are removed from the highest pool position down, so the
    result depends only on the values, never on evaluation order.
    """
    n = scores.size
    removed = np.zeros(n, dtype=bool)
    if k <= 0:
        return removed, None
    if k >= n:
        removed[:] = True
        return removed, float(scores.max())
    t = float(np.partition(scores, k - 1)[k - 1])
    removed = scores < t
    need = k - int(np.count_nonzero(removed))
    ties = np.flatnonzero(scores == t)
    removed[ties[ties.size - need :]] = True
    return removed, t


def _pool_masks(table: ImportanceTable, removed: np.ndarray, taxonomy: Sequence[LayerEntry],
                masks: MaskSet) -> None:
    for k, lid in enumerate(table.layer_ids):
        entry = taxonomy[lid]
        keep = ~removed[table.offsets[k] : table.offsets[k + 1]]
        masks[entry.name] = keep.reshape(entry.shape)


def make_plan(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry], target_ratio: float,
              scheme: str = "per-module", threads: int = 1) -> Tuple[PrunePlan, MaskSet]:
    if not 0.0 <= target_ratio < 1.0:
        raise RatioOutOfRange(f"target ratio {target_ratio} not in [0, 1)")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    plan = PrunePlan(scheme, target_ratio)
    masks: MaskSet = {}

    if scheme == "per-module":
        for role in PRUNABLE_ROLES:
            ids = prunable_ids(taxonomy, (role,))
            if not ids:
                raise EmptyModule(f"no prunable tensors carry role {role}")
            table = pool_layers(ckpt, taxonomy, ids, role, layer_scores, threads)
            k = round(target_ratio * len(table))
            removed, thr = select_lowest(table.scores, k)
            _pool_masks(table, removed, taxonomy, masks)
            plan.thresholds[str(role)] = thr
            plan.removal_counts[str(role)] = k
            plan.module_sizes[str(role)] = len(table)
    else:
        ids = prunable_ids(taxonomy, PRUNABLE_ROLES)
        if not ids:
            raise EmptyModule("checkpoint has no prunable tensors")
        score_fn = layer_scores if scheme == "model-as-module" else magnitude_scores
        table = pool_layers(ckpt, taxonomy, ids, None, score_fn, threads)
        k = round(target_ratio * len(table))
        removed, thr = select_lowest(table.scores, k)
        _pool_masks(table, removed, taxonomy, masks)
        plan.thresholds[POOLED_KEY] = thr
        for role in PRUNABLE_ROLES:
            names = [taxonomy[i].name for i in ids if taxonomy[i].role is role]
            if not names:
                continue
            plan.module_sizes[str(role)] = sum(masks[n].size for n in names)
            plan.removal_counts[str(role)] = sum(int(masks[n].size - np.count_nonzero(masks[n])) for n in names)
    # Network order, independent of which module was processed first.
    order = {e.name: i for i, e in enumerate(taxonomy)}
    masks = dict(sorted(masks.items(), key=lambda kv: order[kv[0]]))
    return plan, masks


def apply(ckpt: Checkpoint, masks: MaskSet) -> Checkpoint:
    tensors = ckpt.as_dict()
    for name, mask in masks.items():
        if name not in tensors:
            raise UnknownTensor(f"mask for unknown tensor {name!r}")
        if tuple(np.shape(mask)) != tensors[name].shape:
            raise ShapeMismatch(
                f"{name}: mask shape {list(np.shape(mask))} != tensor shape {list(tensors[name].shape)}"
            )
    out = []
    for rec in ckpt:
        mask = masks.get(rec.name)
        if mask is None:
            out.append(rec)
            continue
        arr = np.where(np.asarray(mask, dtype=bool), rec.array(), 0).astype(NUMPY_DTYPES[rec.dtype])
        out.append(TensorRecord(rec.name, rec.dtype, rec.shape, arr.tobytes()))
    return Checkpoint(out, None if ckpt.metadata is None else dict(ckpt.metadata))


def masks_to_checkpoint(masks: MaskSet) -> Checkpoint:
    """Sidecar: F32 tensors holding exactly 0.0 / 1.0."""
    return Checkpoint([
        TensorRecord.from_array(name, np.asarray(m, dtype=np.float32), "F32") for name, m in masks.items()
    ])


def masks_from_checkpoint(ckpt: Checkpoint) -> MaskSet:
    out = {}
    for rec in ckpt:
        arr = rec.array()
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError(f"{rec.name}: mask values must be exactly 0.0 or 1.0")
        out[rec.name] = arr == 1.0
    return out


def zero_counts(masks: MaskSet, taxonomy: Sequence[LayerEntry]) -> Dict[str, int]:
    roles = {e.name: e.role for e in taxonomy}
    counts: Dict[str, int] = {}
    for name, m in masks.items():
        key = str(roles[name])
        counts[key] = counts.get(key, 0) + int(m.size - np.count_nonzero(m))
    return counts
