"""Numerical checks of the pruning-distortion theory on small instances.

Everything here is deliberately small and explicit: toy ReLU MLPs, exhaustive
mask enumeration, power iteration. It exists to catch mistakes in the
importance and pruning code, not to be fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import BoundViolated, DimMismatch, ShapeMismatch, TooLarge

BOUND_RTOL = 1e-9
MAX_BRUTE_FORCE = 16


def frobenius_gap(W, M) -> Tuple[float, float]:
    """(||W - M*W||_F computed directly, sqrt of the sum of removed w^2)."""
    W = np.asarray(W, dtype=np.float64)
    M = np.asarray(M)
    if W.shape != M.shape:
        raise ShapeMismatch(f"weight shape {W.shape} != mask shape {M.shape}")
    keep = M.astype(bool)
    direct = float(np.linalg.norm((W - np.where(keep, W, 0.0)).ravel()))
    closed = math.sqrt(math.fsum((W[~keep] ** 2).tolist()))
    return direct, closed


def top_magnitude_mask(W, s: int) -> np.ndarray:
    """Keep the s largest |w|; ties keep the lower flat index."""
    W = np.asarray(W, dtype=np.float64)
    flat = np.zeros(W.size, dtype=bool)
    flat[np.argsort(-np.abs(W.ravel()), kind="stable")[:s]] = True
    return flat.reshape(W.shape)


def brute_force_mask(W, s: int) -> Tuple[np.ndarray, float]:
    """Exhaustively find the mask with at most s ones minimizing ||W - M*W||_F.

    Among equally good masks, the one keeping lower flat indices wins
    (lexicographic on the kept-indicator vector, index 0 most significant).
    """
    W = np.asarray(W, dtype=np.float64)
    n = W.size
    if n > MAX_BRUTE_FORCE:
        raise TooLarge(f"{n} elements exceeds the brute-force cap of {MAX_BRUTE_FORCE}")
    if not 0 <= s <= n:
        raise ValueError(f"keep budget {s} outside [0, {n}]")
    dist, bits = _enumerate_masks(W.ravel())
    ones = bits.sum(axis=1)
    cand = np.flatnonzero(ones <= s)
    best = dist[cand].min()
    winners = cand[dist[cand] == best]
    # Row index c encodes index i at bit (n-1-i), so max c keeps lowest indices.
    pick = winners.max()
    return bits[pick].astype(bool).reshape(W.shape), float(math.sqrt(best))


def _enumerate_masks(w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = w.size
    codes = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.int8)
    removed_energy = (1 - bits) @ (w * w)
    return removed_energy, bits


def brute_force_all_budgets(W) -> List[np.ndarray]:
    """Optimal masks for every budget s = 0..n from a single enumeration."""
    W = np.asarray(W, dtype=np.float64)
    n = W.size
    if n > MAX_BRUTE_FORCE:
        raise TooLarge(f"{n} elements exceeds the brute-force cap of {MAX_BRUTE_FORCE}")
    dist, bits = _enumerate_masks(W.ravel())
    ones = bits.sum(axis=1)
    out = []
    for s in range(n + 1):
        cand = np.flatnonzero(ones <= s)
        best = dist[cand].min()
        pick = cand[dist[cand] == best].max()
        out.append(bits[pick].astype(bool).reshape(W.shape))
    return out


@dataclass
class MlpNet:
    """ReLU network x -> W_L relu(... relu(W_1 x)); no activation after the last layer."""

    layers: List[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(W, dtype=np.float64) for W in self.layers]
        if not self.layers:
            raise DimMismatch("network needs at least one layer")
        for i, W in enumerate(self.layers):
            if W.ndim != 2:
                raise DimMismatch(f"layer {i} is not a matrix")
            if i and W.shape[1] != self.layers[i - 1].shape[0]:
                raise DimMismatch(
                    f"layer {i} expects {W.shape[1]} inputs, previous layer gives {self.layers[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    def with_layer(self, l: int, W) -> "MlpNet":
        layers = list(self.layers)
        layers[l] = np.asarray(W, dtype=np.float64)
        return MlpNet(layers)

    @classmethod
    def random(cls, dims: Sequence[int], rng: np.random.Generator) -> "MlpNet":
        """dims = [in, h1, ..., out]; Gaussian entries scaled by 1/sqrt(fan_in)."""
        return cls([rng.normal(size=(o, i)) / math.sqrt(i) for i, o in zip(dims[:-1], dims[1:])])


def mlp_forward(net: MlpNet, x) -> np.ndarray:
    """Evaluate on a vector, or on a batch stored as columns of a matrix."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[0] != net.in_dim:
        raise DimMismatch(f"input has {h.shape[0]} features, network expects {net.in_dim}")
    last = len(net.layers) - 1
    for i, W in enumerate(net.layers):
        h = W @ h
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def unit_sphere(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(size=(dim, n))
    norms = np.linalg.norm(x, axis=0)
    # A zero draw has probability zero; redraw defensively anyway.
    while (norms == 0).any():
        bad = norms == 0
        x[:, bad] = rng.normal(size=(dim, int(bad.sum())))
        norms = np.linalg.norm(x, axis=0)
    return x / norms


@dataclass
class BoundReport:
    empirical_sup: float
    analytic_bound: float
    tightness: float
    sample_count: int


def analytic_bound(net: MlpNet, l: int, mask) -> float:
    """||W_l - M*W_l||_F times the Frobenius norms of every other layer."""
    W = net.layers[l]
    gap, _ = frobenius_gap(W, mask)
    others = [np.linalg.norm(net.layers[j]) for j in range(len(net.layers)) if j != l]
    return float(gap * math.prod(others))


def check_bound(net: MlpNet, l: int, mask, samples: int, seed: int,
                bound_scale: float = 1.0) -> BoundReport:
    """Monte-Carlo check that pruning layer ``l`` stays under the analytic bound.

    ``l`` is a 0-based layer index. ``bound_scale`` exists only so the test
    suite can corrupt the bound and exercise the failure path.
    """
    if not 0 <= l < len(net.layers):
        raise DimMismatch(f"layer index {l} outside [0, {len(net.layers)})")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    mask = np.asarray(mask)
    if mask.shape != net.layers[l].shape:
        raise DimMismatch(f"mask shape {mask.shape} != layer shape {net.layers[l].shape}")
    pruned = net.with_layer(l, np.where(mask.astype(bool), net.layers[l], 0.0))
    x = unit_sphere(samples, net.in_dim, np.random.default_rng(seed))
    gaps = np.linalg.norm(mlp_forward(net, x) - mlp_forward(pruned, x), axis=0)
    emp = float(gaps.max())
    bound = analytic_bound(net, l, mask) * bound_scale
    if emp > bound * (1 + BOUND_RTOL):
        raise BoundViolated(f"empirical sup {emp!r} exceeds analytic bound {bound!r} at layer {l}")
    if bound > 0:
        tight = emp / bound
    else:
        tight = 1.0  # 0 == 0: the bound holds with equality
    return BoundReport(emp, bound, tight, samples)


def spectral_norm(W, iterations: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on W^T W.

    The returned ||W v|| with unit v never exceeds the true value.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[None, :]
    if not W.any():
        return 0.0
    v = np.random.default_rng(seed).normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        u = W @ v
        est = float(np.linalg.norm(u))
        if est == 0.0:
            # v landed in the null space; restart from a fresh direction.
            v = np.random.default_rng(seed + 1).normal(size=W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = W.T @ u
        v /= np.linalg.norm(v)
    return max(est, float(np.linalg.norm(W @ v)))


def relu_lipschitz_gap(a, b) -> Tuple[float, float]:
    """(||relu(a) - relu(b)||, ||a - b||); the first never exceeds the second."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(np.maximum(a, 0) - np.maximum(b, 0))), float(np.linalg.norm(a - b))


# --- battery -----------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""


@dataclass
class TightnessRow:
    net_id: int
    layer: int
    sparsity: float
    empirical_sup: float
    analytic_bound: float
    tightness: float


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def check_frobenius_identity(seed: int, instances: int) -> CheckResult:
    worst = 0.0
    for t in range(instances):
        rng = _rng(seed, 1, t)
        W = rng.normal(size=(8, 8))
        M = rng.integers(0, 2, size=(8, 8))
        direct, closed = frobenius_gap(W, M)
        worst = max(worst, abs(direct - closed) / np.linalg.norm(W))
    return CheckResult("frobenius_identity", worst < 1e-12, instances, f"max rel err {worst:.3e}")


def check_brute_force(seed: int, tensors: int) -> CheckResult:
    bad = 0
    cases = 0
    for t in range(tensors):
        rng = _rng(seed, 2, t)
        n = int(rng.integers(1, MAX_BRUTE_FORCE + 1))
        W = rng.normal(size=n)
        for s, best in enumerate(brute_force_all_budgets(W)):
            cases += 1
            if not np.array_equal(best, top_magnitude_mask(W, s)):
                bad += 1
    return CheckResult("optimal_mask_is_top_magnitude", bad == 0, cases, f"{bad} mismatches")


def random_bound_case(seed: int, net_id: int) -> Tuple[MlpNet, int, np.ndarray]:
    rng = _rng(seed, 3, net_id)
    dims = [int(d) for d in rng.integers(8, 17, size=4)]
    net = MlpNet.random(dims, rng)
    l = int(rng.integers(0, 3))
    sparsity = float(rng.uniform(0.05, 0.95))
    mask = rng.random(net.layers[l].shape) >= sparsity
    return net, l, mask


def check_bound_battery(seed: int, nets: int, samples: int,
                        bound_scale: float = 1.0) -> Tuple[CheckResult, List[TightnessRow]]:
    rows = []
    violations = 0
    for k in range(nets):
        net, l, mask = random_bound_case(seed, k)
        try:
            rep = check_bound(net, l, mask, samples, seed=int(_rng(seed, 4, k).integers(2**63)),
                              bound_scale=bound_scale)
        except BoundViolated:
            violations += 1
            continue
        rows.append(TightnessRow(k, l, float(1 - mask.mean()), rep.empirical_sup,
                                 rep.analytic_bound, rep.tightness))
    return CheckResult("module_bound", violations == 0, nets, f"{violations} violations"), rows


def check_spectral(seed: int, matrices: int) -> CheckResult:
    bad = 0
    for t in range(matrices):
        rng = _rng(seed, 5, t)
        W = rng.normal(size=tuple(int(d) for d in rng.integers(1, 13, size=2)))
        if spectral_norm(W, 50, seed=t) > np.linalg.norm(W) + 1e-9:
            bad += 1
    return CheckResult("spectral_le_frobenius", bad == 0, matrices, f"{bad} violations")


def check_relu_lipschitz(seed: int, pairs: int) -> CheckResult:
    bad = 0
    for t in range(pairs):
        rng = _rng(seed, 6, t)
        a, b = rng.normal(size=(2, 16))
        lhs, rhs = relu_lipschitz_gap(a, b)
        if lhs > rhs * (1 + 1e-12):
            bad += 1
    return CheckResult("relu_1_lipschitz", bad == 0, pairs, f"{bad} violations")


def run_battery(seed: int = 0, trials: int = 100, samples: int = 1000,
                bound_scale: float = 1.0) -> Tuple[List[CheckResult], List[TightnessRow]]:
    """All checks; instance counts scale with ``trials`` (defaults: 1000/200/100/500/1000)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    bound, rows = check_bound_battery(seed, trials, samples, bound_scale)
    results = [
        check_frobenius_identity(seed, 10 * trials),
        check_brute_force(seed, 2 * trials),
        bound,
        check_spectral(seed, 5 * trials),
        check_relu_lipschitz(seed, 10 * trials),
    ]
    return results, rows
