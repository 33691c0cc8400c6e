"""Analysis artifacts: keep-ratio tables, histograms, PGM mask heatmaps, JSON report."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .taxonomy import LayerEntry, ModuleRole
from .tensor_store import TensorRecord, to_f64

DEFAULT_BINS = 50
DEFAULT_RANGE = 0.1
KEPT_PIXEL = 255
PRUNED_PIXEL = 128


@dataclass
class KeepRow:
    name: str
    role: ModuleRole
    kept: int
    total: int

    @property
    def ratio(self) -> float:
        return self.kept / self.total if self.total else 1.0


def keep_ratio_table(masks: Mapping[str, np.ndarray], taxonomy: Sequence[LayerEntry],
                     include_aux: bool = False) -> List[KeepRow]:
    """One row per prunable tensor in network order; unmasked tensors count as fully kept."""
    rows = []
    for e in taxonomy:
        if not e.prunable and not include_aux:
            continue
        m = masks.get(e.name)
        kept = e.numel if m is None else int(np.count_nonzero(m))
        rows.append(KeepRow(e.name, e.role, kept, e.numel))
    return rows


def keep_ratio_variance(rows: Sequence[KeepRow]) -> float:
    """Population variance of per-layer keep ratios."""
    if not rows:
        return 0.0
    return float(np.var([r.ratio for r in rows]))


def emptied_counts(masks: Mapping[str, np.ndarray]) -> Dict[str, int]:
    """Output rows and whole layers left with no surviving weight."""
    rows = layers = 0
    for m in masks.values():
        m = np.asarray(m, dtype=bool)
        if not m.any():
            layers += 1
        if m.ndim == 2:
            rows += int((~m.any(axis=1)).sum())
    return {"empty_rows": rows, "empty_layers": layers}


def weight_histogram(rec, bins: int = DEFAULT_BINS, value_range: float = DEFAULT_RANGE) -> np.ndarray:
    """Fixed-width counts over [-range, range]; out-of-range values land in the end bins."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if value_range <= 0:
        raise ValueError("range must be positive")
    w = to_f64(rec) if isinstance(rec, TensorRecord) else np.asarray(rec, dtype=np.float64).ravel()
    idx = np.floor((w + value_range) / (2 * value_range) * bins)
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=bins)


def histogram_edges(bins: int = DEFAULT_BINS, value_range: float = DEFAULT_RANGE) -> np.ndarray:
    return np.linspace(-value_range, value_range, bins + 1)


def histogram_mass(counts, lo: float, hi: float, value_range: float = DEFAULT_RANGE) -> float:
    """Fraction of mass in [lo, hi], interpolating linearly inside straddled bins."""
    counts = np.asarray(counts, dtype=np.float64)
    edges = histogram_edges(counts.size, value_range)
    left, right = edges[:-1], edges[1:]
    overlap = np.clip(np.minimum(right, hi) - np.maximum(left, lo), 0, None) / (right - left)
    return float((counts * overlap).sum() / counts.sum())


def write_histogram_csv(counts, path, value_range: float = DEFAULT_RANGE) -> None:
    edges = histogram_edges(len(counts), value_range)
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo:.6g},{hi:.6g},{int(c)}\n")


def mask_heatmap(mask, path, downsample: int = 1) -> int:
    """Write a binary PGM (P5): 255 = kept, 128 = pruned; rows are output dims.

    With ``downsample`` > 1 each pixel max-pools a square block, so a pixel
    is kept if any weight in it is kept. Returns the factor used.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"heatmap needs a rank-2 mask, got rank {m.ndim}")
    f = int(downsample)
    if f < 1:
        raise ValueError("downsample factor must be >= 1")
    keep = m.astype(bool)
    if f > 1:
        h, w = -(-keep.shape[0] // f), -(-keep.shape[1] // f)
        padded = np.zeros((h * f, w * f), dtype=bool)
        padded[: keep.shape[0], : keep.shape[1]] = keep
        keep = padded.reshape(h, f, w, f).any(axis=(1, 3))
    pixels = np.where(keep, KEPT_PIXEL, PRUNED_PIXEL).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return f


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def auto_downsample(shape, max_side: int = 512) -> int:
    return max(1, math.ceil(max(shape) / max_side))


@dataclass
class PruneReport:
    model: str
    scheme: str
    target_ratio: float
    thresholds: Dict[str, Optional[float]]
    removal_counts: Dict[str, int]
    params_before: int
    prunable_before: int
    per_module_before: Dict[str, int]
    flops_dense: int
    flops_effective_before: int
    flops_effective_after: int
    layers: List[KeepRow]
    presets: Dict[str, Optional[str]] = field(default_factory=dict)
    nonzero_after: Optional[int] = None
    heatmaps: Dict[str, int] = field(default_factory=dict)
    timestamp: Optional[str] = None
    version: str = __version__

    @property
    def removed(self) -> int:
        return sum(self.removal_counts.values())

    @property
    def params_after(self) -> int:
        return self.params_before - self.removed

    @property
    def prunable_after(self) -> int:
        return self.prunable_before - self.removed

    def para_reduction(self, prunable_only: bool = False) -> float:
        base = self.prunable_before if prunable_only else self.params_before
        return self.removed / base if base else 0.0

    def flops_reduction(self) -> float:
        if not self.flops_effective_before:
            return 0.0
        return (self.flops_effective_before - self.flops_effective_after) / self.flops_effective_before

    def check(self) -> None:
        assert self.params_after == self.params_before - self.removed
        for row in self.layers:
            assert 0.0 <= row.ratio <= 1.0, row
            if row.role is ModuleRole.AUX_M:
                assert row.kept == row.total, row
        assert sum(self.per_module_before.values()) == self.params_before

    def to_json(self) -> Dict[str, Any]:
        per_module = {}
        for role, before in self.per_module_before.items():
            removed = self.removal_counts.get(role, 0)
            per_module[role] = {"before": before, "after": before - removed, "removed": removed}
        return {
            "model": self.model,
            "scheme": self.scheme,
            "target_ratio": self.target_ratio,
            "presets": dict(self.presets),
            "thresholds": dict(self.thresholds),
            "removal_counts": dict(self.removal_counts),
            "params": {
                "before": self.params_before,
                "after": self.params_after,
                "prunable_before": self.prunable_before,
                "prunable_after": self.prunable_after,
                "nonzero_after": self.nonzero_after,
                "per_module": per_module,
            },
            "flops": {
                "dense_before": self.flops_dense,
                "dense_after": self.flops_dense,
                "effective_before": self.flops_effective_before,
                "effective_after": self.flops_effective_after,
                "convention": "1 MAC = 1 FLOP",
            },
            "reduction": {
                "para_total": self.para_reduction(),
                "para_prunable": self.para_reduction(prunable_only=True),
                "flops": self.flops_reduction(),
            },
            "layers": [
                {"name": r.name, "role": str(r.role), "kept": r.kept, "total": r.total, "ratio": r.ratio}
                for r in self.layers
            ],
            "heatmap_downsample": dict(self.heatmaps),
            "timestamp": self.timestamp,
            "version": self.version,
        }


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6g}") if math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps_deterministic(obj) -> str:
    """Sorted keys, floats rounded to 6 significant digits."""
    return json.dumps(_round_floats(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(report, path) -> None:
    data = report.to_json() if isinstance(report, PruneReport) else report
    text = dumps_deterministic(data)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def source_timestamp() -> Optional[str]:
    """UTC time from SOURCE_DATE_EPOCH, or None so reports stay reproducible."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    import datetime as dt

    return dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
