"""Acceptance criteria 1-12, one test each.

Each test prints a PASS/FAIL line with the measured numbers, and the lines are
repeated in a summary section at the end of the pytest run. Run just this
module with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from dimap.cli import main
from dimap.distortion import (
    brute_force_all_budgets,
    check_bound,
    frobenius_gap,
    random_bound_case,
    top_magnitude_mask,
)
from dimap.errors import BoundViolated
from dimap.importance import descending_order, layer_scores
from dimap.pruner import apply, make_plan
from dimap.report import keep_ratio_table, keep_ratio_variance
from dimap.taxonomy import (
    PRUNABLE_ROLES,
    count_params,
    enumerate_layers,
    estimate_flops,
    preset_arch,
    synthesize,
)
from dimap.tensor_store import (
    Checkpoint,
    TensorRecord,
    header_bytes,
    read_checkpoint,
    to_f64,
    write_checkpoint,
)

PARAMS = {"swin-t": 28.3e6, "swin-s": 49.6e6, "swin-b": 87.8e6}
FLOPS = {"swin-t": 4.5e9, "swin-s": 8.7e9, "swin-b": 15.4e9}


def verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def test_01_param_counts():
    t0 = time.perf_counter()
    rel = {}
    for name, target in PARAMS.items():
        cfg = preset_arch(name)
        total = count_params(synthesize(cfg, seed=0), enumerate_layers(cfg)).total
        rel[name] = (total, (total - target) / target)
    dt = time.perf_counter() - t0
    ok = all(abs(r) <= 0.02 for _, r in rel.values()) and dt < 30
    detail = ", ".join(f"{k} {n / 1e6:.2f}M ({100 * r:+.2f}%)" for k, (n, r) in rel.items())
    verdict(1, "parameter counts", ok, f"{detail}; {dt:.1f}s")


def test_02_flops():
    rel = {}
    for name, target in FLOPS.items():
        est = estimate_flops(preset_arch(name))
        assert est.convention == "1 MAC = 1 FLOP"
        rel[name] = (est.dense, (est.dense - target) / target)
    ok = all(abs(r) <= 0.05 for _, r in rel.values())
    verdict(2, "dense FLOPs", ok, ", ".join(f"{k} {n / 1e9:.2f}G ({100 * r:+.2f}%)" for k, (n, r) in rel.items()))


def test_03_para_flops_coupling():
    cfg = preset_arch("swin-b")
    taxonomy = enumerate_layers(cfg)
    ckpt = synthesize(cfg, seed=0)
    plan, masks = make_plan(ckpt, taxonomy, 0.525, "per-module")
    params = count_params(ckpt, taxonomy).total
    para = plan.total_removed / params
    para_prunable = plan.total_removed / plan.total_prunable
    before = estimate_flops(cfg, None, taxonomy).effective
    after = estimate_flops(cfg, masks, taxonomy).effective
    flops = (before - after) / before
    gap = abs(para - flops)
    verdict(3, "Para/FLOPs coupling (swin-b, 0.525)", gap <= 0.03,
            f"Para.down {100 * para:.1f}% of model ({100 * para_prunable:.1f}% of prunable), "
            f"FLOPs.down {100 * flops:.1f}%, gap {100 * gap:.1f} points (limit 3)")


def test_04_frobenius_identity():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 65, size=2))
        W = rng.normal(0, rng.choice([1e-3, 1.0, 1e3]), size=shape)
        M = rng.random(shape) < rng.random()
        direct, closed = frobenius_gap(W, M)
        worst = max(worst, abs(direct - closed) / np.linalg.norm(W))
    dt = time.perf_counter() - t0
    verdict(4, "masked Frobenius identity", worst < 1e-12 and dt < 5,
            f"max |direct-closed|/||W|| = {worst:.2e}; {dt:.2f}s")


def test_05_optimal_mask():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    cases = mismatches = 0
    for _ in range(200):
        w = rng.normal(size=int(rng.integers(1, 17)))
        for s, best in enumerate(brute_force_all_budgets(w)):
            cases += 1
            mismatches += not np.array_equal(best, top_magnitude_mask(w, s))
    dt = time.perf_counter() - t0
    verdict(5, "optimal mask is top-magnitude", mismatches == 0 and dt < 60,
            f"{cases} (tensor, budget) cases, {mismatches} mismatches; {dt:.1f}s")


def test_06_distortion_bound():
    t0 = time.perf_counter()
    violations = 0
    tightness = []
    for k in range(100):
        net, l, mask = random_bound_case(6, k)
        try:
            tightness.append(check_bound(net, l, mask, samples=1000, seed=k).tightness)
        except BoundViolated:
            violations += 1
    dt = time.perf_counter() - t0
    verdict(6, "layer distortion bound", violations == 0 and dt < 60,
            f"100 nets x 1000 samples, {violations} violations, "
            f"tightness median {np.median(tightness):.3f} max {max(tightness):.3f}; {dt:.1f}s")


def _random_layers(seed, count):
    rng = np.random.default_rng(seed)
    for i in range(count):
        n = int(rng.integers(1, 5000))
        w = rng.normal(0, 0.02, size=n)
        if i % 5 == 1:  # repeated magnitudes with both signs
            w = rng.choice([-0.5, -0.25, 0.25, 0.5, 1.0], size=n)
        elif i % 5 == 2:  # many exact zeros
            w[rng.random(n) < 0.3] = 0.0
        elif i % 5 == 3:  # storage precision of real checkpoints
            w = w.astype(np.float32).astype(np.float64)
        yield w


def test_07_local_ranking():
    layers = mismatches = 0
    for w in _random_layers(7, 500):
        layers += 1
        by_score = np.argsort(-layer_scores(w), kind="stable")
        by_magnitude = np.argsort(-np.abs(w), kind="stable")
        mismatches += not (np.array_equal(by_score, by_magnitude)
                           and np.array_equal(by_magnitude, descending_order(w)))
    verdict(7, "layer-local ranking equals magnitude ranking", mismatches == 0,
            f"{layers} layers, {mismatches} mismatches")


def test_08_monotone_and_range(swin_t):
    _, ckpt, taxonomy = swin_t
    tensors = ckpt.as_dict()
    layers = [w for w in _random_layers(8, 500)]
    layers += [to_f64(tensors[e.name]) for e in taxonomy if e.prunable]
    bad = []
    for i, w in enumerate(layers):
        s = layer_scores(w)
        order = descending_order(w)
        ranked = s[order[w[order] != 0]]
        if ranked.size and ranked[0] != 1.0:
            bad.append((i, "top score"))
        if np.any(np.diff(ranked) >= 0):
            bad.append((i, "not strictly decreasing"))
        if s.min() < 0 or s.max() > 1:
            bad.append((i, "out of [0, 1]"))
    verdict(8, "score monotonicity and range", not bad,
            f"{len(layers)} layers (500 random + synthetic swin-t), {len(bad)} failures {bad[:3]}")


def test_09_sparsity_exact():
    cfg = preset_arch("swin-s")
    taxonomy = enumerate_layers(cfg)
    ckpt = synthesize(cfg, seed=0)
    tensors = ckpt.as_dict()
    sizes = {str(r): sum(e.numel for e in taxonomy if e.prunable and e.role is r) for r in PRUNABLE_ROLES}
    zeros_before = {str(r): sum(int((to_f64(tensors[e.name]) == 0).sum())
                                for e in taxonomy if e.prunable and e.role is r) for r in PRUNABLE_ROLES}
    off = []
    for ratio in (0.19, 0.28, 0.38, 0.45, 0.50):
        plan, masks = make_plan(ckpt, taxonomy, ratio, "per-module")
        pruned = apply(ckpt, masks).as_dict()
        for role in map(str, PRUNABLE_ROLES):
            zeros = sum(int((to_f64(pruned[e.name]) == 0).sum())
                        for e in taxonomy if e.prunable and str(e.role) == role)
            expected = round(ratio * sizes[role])
            if zeros - zeros_before[role] != expected or plan.removal_counts[role] != expected:
                off.append((ratio, role, zeros - zeros_before[role], expected))
    verdict(9, "per-module sparsity exactness (swin-s)", not off,
            f"5 ratios x 3 modules, {len(off)} off-target {off[:3]}")


def test_10_determinism(tmp_path, swin_t_path):
    digests = []
    for run, threads in enumerate(("1", "1", "8")):
        out = tmp_path / f"p{run}.safetensors"
        masks = tmp_path / f"m{run}.safetensors"
        rep = tmp_path / f"r{run}.json"
        code = main(["prune", "--input", str(swin_t_path), "--preset-arch", "swin-t", "--ratio", "0.45",
                     "--output", str(out), "--masks", str(masks), "--report", str(rep), "--threads", threads])
        assert code == 0
        digests.append(tuple(hashlib.sha256(p.read_bytes()).hexdigest() for p in (out, masks, rep)))
    same = len(set(digests)) == 1
    verdict(10, "byte-identical prune outputs", same,
            "threads 1, 1, 8: checkpoint/masks/report sha256 " + ("identical" if same else f"differ {digests}"))


def _random_checkpoint(rng):
    tensors = []
    for i in range(int(rng.integers(0, 12))):
        dtype = str(rng.choice(["F32", "F16"]))
        shape = tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(1, 5))))
        nbytes = math.prod(shape) * (4 if dtype == "F32" else 2)
        # Arbitrary bit patterns, NaN payloads included.
        tensors.append(TensorRecord(f"t{i}.{rng.integers(1 << 30)}", dtype, shape, rng.bytes(nbytes)))
    meta = {"seed": str(rng.integers(1 << 30))} if rng.random() < 0.5 else None
    return Checkpoint(tensors, meta)


def test_11_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    failures = 0
    for k in range(100):
        ckpt = _random_checkpoint(rng)
        path = tmp_path / f"c{k}.safetensors"
        write_checkpoint(ckpt, path)
        blob = path.read_bytes()
        back = read_checkpoint(path)
        data = b"".join(r.data for r in ckpt)
        ok = (
            [(r.name, r.dtype, r.shape, r.data) for r in back] == [(r.name, r.dtype, r.shape, r.data) for r in ckpt]
            and back.metadata == ckpt.metadata
            and blob.endswith(data)
            and len(blob) == 8 + len(header_bytes(ckpt)) + len(data)
        )
        write_checkpoint(back, path)
        failures += not (ok and path.read_bytes() == blob)
    verdict(11, "safetensors round trip", failures == 0, f"100 random checkpoints, {failures} failures")


def test_12_variance_contrast(swin_t):
    _, ckpt, taxonomy = swin_t
    var = {}
    for scheme in ("per-module", "uniform-magnitude"):
        _, masks = make_plan(ckpt, taxonomy, 0.5, scheme)
        var[scheme] = keep_ratio_variance(keep_ratio_table(masks, taxonomy))
    verdict(12, "keep-ratio variance contrast (swin-t, 0.5)", var["uniform-magnitude"] > var["per-module"],
            f"uniform-magnitude {var['uniform-magnitude']:.3g} vs per-module {var['per-module']:.3g}")
