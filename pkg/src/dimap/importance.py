"""Data-independent weight importance and module-level score pools.

A layer's weights are ranked by squared magnitude, largest first (ties by
ascending flat index). The weight at rank j scores

    w_j^2 / (w_1^2 + ... + w_j^2)

i.e. its share of the energy left in the layer at the moment it would be
removed, when pruning proceeds smallest-first. The top weight always scores 1.
Scores are comparable across layers, yet inside one layer they order weights
exactly like |w| does.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyModule, NonFiniteValue
from .tensor_store import Checkpoint, to_f64
from .taxonomy import LayerEntry, ModuleRole

_BLOCK = 4096


def _check_finite(w: np.ndarray) -> None:
    if not np.isfinite(w).all():
        raise NonFiniteValue("weights contain inf or NaN")


def descending_order(w: np.ndarray) -> np.ndarray:
    """Positions sorted by |w| descending, ties by ascending position."""
    a = np.abs(w)
    if a.size < 2**32:
        with np.errstate(over="ignore"):
            a32 = a.astype(np.float32)
        if np.array_equal(a32, a):
            # Non-negative float bits are order-preserving; pack (inverted
            # magnitude, position) into one unique uint64 key and sort that.
            bits = a32.view(np.uint32).astype(np.uint64)
            key = (np.uint64(0x7FFFFFFF) - bits) << np.uint64(32)
            key |= np.arange(a.size, dtype=np.uint64)
            key.sort()
            return (key & np.uint64(0xFFFFFFFF)).astype(np.int64)
    return np.argsort(-a, kind="stable")


def prefix_sums(x: np.ndarray) -> np.ndarray:
    """Inclusive prefix sums of a non-negative float64 vector.

    Sequential cumsum runs only inside fixed-size blocks; block offsets are
    accumulated with Neumaier compensation, so the error stays at the scale of
    one block rather than growing with the full length.
    """
    n = x.size
    if n <= _BLOCK:
        return np.cumsum(x)
    nblocks = -(-n // _BLOCK)
    padded = np.zeros(nblocks * _BLOCK)
    padded[:n] = x
    blocks = padded.reshape(nblocks, _BLOCK)
    local = np.cumsum(blocks, axis=1)
    totals = blocks.sum(axis=1)  # pairwise
    offsets = np.empty(nblocks)
    s = c = 0.0
    for i, t in enumerate(totals.tolist()):
        offsets[i] = s + c
        y = s + t
        c += (s - y) + t if abs(s) >= abs(t) else (t - y) + s
        s = y
    local += offsets[:, None]
    return local.ravel()[:n]


def layer_scores(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    _check_finite(w)
    scores = np.zeros(w.size)
    if w.size == 0:
        return scores
    order = descending_order(w)
    top = abs(w[order[0]])
    if top == 0:
        return scores
    # Scores are scale-free; normalising keeps w^2 clear of under/overflow.
    sq = np.square(w[order] / top)
    cum = prefix_sums(sq)
    ranked = np.divide(sq, cum, out=np.zeros_like(sq), where=cum > 0)
    scores[order] = ranked
    return scores


def magnitude_scores(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    _check_finite(w)
    return np.abs(w)


@dataclass
class ImportanceTable:
    """Pooled scores of one module.

    ``scores`` concatenates per-layer score vectors in taxonomy order, so the
    pool position of an entry is monotone in (layer_id, flat_index).
    """

    role: Optional[ModuleRole]
    layer_ids: List[int]
    offsets: np.ndarray  # len(layer_ids) + 1 boundaries into ``scores``
    scores: np.ndarray

    def __len__(self) -> int:
        return int(self.scores.size)

    def layer_slice(self, layer_id: int) -> np.ndarray:
        k = self.layer_ids.index(layer_id)
        return self.scores[self.offsets[k] : self.offsets[k + 1]]

    def entries(self) -> Iterator[Tuple[int, int, float]]:
        """(layer_id, flat_index, score) triples; meant for small models."""
        for k, lid in enumerate(self.layer_ids):
            chunk = self.scores[self.offsets[k] : self.offsets[k + 1]]
            for idx, score in enumerate(chunk.tolist()):
                yield lid, idx, score


def _scored_layers(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry], layer_ids: Sequence[int],
                   score_fn, threads: int) -> List[np.ndarray]:
    tensors = ckpt.as_dict()
    jobs = [tensors[taxonomy[i].name] for i in layer_ids]
    fn = lambda rec: score_fn(to_f64(rec))  # noqa: E731
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(rec) for rec in jobs]


def pool_layers(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry], layer_ids: Sequence[int],
                role: Optional[ModuleRole] = None, score_fn=layer_scores,
                threads: int = 1) -> ImportanceTable:
    chunks = _scored_layers(ckpt, taxonomy, layer_ids, score_fn, threads)
    sizes = [c.size for c in chunks]
    offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    scores = np.concatenate(chunks) if chunks else np.zeros(0)
    return ImportanceTable(role, list(layer_ids), offsets, scores)


def prunable_ids(taxonomy: Sequence[LayerEntry], roles) -> List[int]:
    return [i for i, e in enumerate(taxonomy) if e.prunable and e.role in roles]


def pool_module(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry], role: ModuleRole,
                threads: int = 1) -> ImportanceTable:
    if role is ModuleRole.AUX_M:
        raise EmptyModule("AUX_M is never pruned and has no importance pool")
    ids = prunable_ids(taxonomy, (role,))
    if not ids:
        raise EmptyModule(f"no prunable tensors carry role {role}")
    return pool_layers(ckpt, taxonomy, ids, role, threads=threads)


def dump_scores(tables: Sequence[ImportanceTable], ckpt: Checkpoint,
                taxonomy: Sequence[LayerEntry], path) -> None:
    """CSV of module, tensor_name, flat_index, weight, score."""
    tensors = ckpt.as_dict()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["module", "tensor_name", "flat_index", "weight", "score"])
        for table in tables:
            label = str(table.role) if table.role is not None else "ALL"
            for k, lid in enumerate(table.layer_ids):
                name = taxonomy[lid].name
                w = to_f64(tensors[name])
                chunk = table.scores[table.offsets[k] : table.offsets[k + 1]]
                for idx in range(w.size):
                    out.writerow([label, name, idx, repr(float(w[idx])), repr(float(chunk[idx]))])
