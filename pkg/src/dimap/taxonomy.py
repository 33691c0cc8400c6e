"""Swin architecture model: tensor layout, module roles, synthesis and accounting."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidConfig, UnclassifiedTensor
from .tensor_store import Checkpoint, TensorRecord, NUMPY_DTYPES


class ModuleRole(str, enum.Enum):
    QKV_M = "QKV_M"
    PRJ_M = "PRJ_M"
    MLP_M = "MLP_M"
    AUX_M = "AUX_M"

    def __str__(self) -> str:
        return self.value


PRUNABLE_ROLES = (ModuleRole.QKV_M, ModuleRole.PRJ_M, ModuleRole.MLP_M)

# Substring patterns per role, checked in this order. Only rank-2 tensors are
# ever assigned a prunable role.
DEFAULT_PATTERNS: Dict[ModuleRole, Tuple[str, ...]] = {
    ModuleRole.QKV_M: (".attn.qkv.",),
    ModuleRole.PRJ_M: (".attn.proj.",),
    ModuleRole.MLP_M: (".mlp.fc1.", ".mlp.fc2."),
}
HEAD_PATTERN = "head."


@dataclass(frozen=True)
class Classifier:
    """Name-pattern classifier; ``prune_head`` moves the head weight into MLP_M."""

    patterns: Mapping[ModuleRole, Tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_PATTERNS)
    )
    prune_head: bool = False

    def __call__(self, name: str, shape: Sequence[int]) -> ModuleRole:
        if not name:
            raise ValueError("tensor name must be non-empty")
        if len(shape) != 2:
            return ModuleRole.AUX_M
        for role in PRUNABLE_ROLES:
            if any(p in name for p in self.patterns.get(role, ())):
                return role
        if self.prune_head and name.startswith(HEAD_PATTERN):
            return ModuleRole.MLP_M
        return ModuleRole.AUX_M

    @classmethod
    def from_file(cls, path, prune_head: bool = False) -> "Classifier":
        """Load ``{"QKV_M": [...], "PRJ_M": [...], "MLP_M": [...]}``; omitted roles keep defaults."""
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise InvalidConfig("pattern file must contain a JSON object")
        patterns = dict(DEFAULT_PATTERNS)
        for key, values in raw.items():
            try:
                role = ModuleRole(key)
            except ValueError:
                raise InvalidConfig(f"unknown module role {key!r} in pattern file") from None
            if role is ModuleRole.AUX_M:
                raise InvalidConfig("AUX_M is the fallback role and takes no patterns")
            if not isinstance(values, list) or not all(isinstance(v, str) and v for v in values):
                raise InvalidConfig(f"patterns for {key} must be a list of non-empty strings")
            patterns[role] = tuple(values)
        return cls(patterns, prune_head)


_DEFAULT_CLASSIFIER = Classifier()


def classify(name: str, shape: Sequence[int], prune_head: bool = False) -> ModuleRole:
    if prune_head:
        return Classifier(prune_head=True)(name, shape)
    return _DEFAULT_CLASSIFIER(name, shape)


@dataclass(frozen=True)
class ArchConfig:
    name: str
    img_size: int = 224
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 96
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    num_heads: Tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    num_classes: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def hidden_dim(self, i: int) -> int:
        return int(self.stage_dim(i) * self.mlp_ratio)

    def stage_tokens(self, i: int) -> int:
        side = self.img_size // self.patch_size // 2**i
        return side * side

    def validate(self) -> None:
        ints = ("img_size", "patch_size", "in_channels", "embed_dim", "window_size", "num_classes")
        for attr in ints:
            v = getattr(self, attr)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise InvalidConfig(f"{attr} must be a positive integer, got {v!r}")
        if not self.depths or len(self.depths) != len(self.num_heads):
            raise InvalidConfig("depths and num_heads must be non-empty and equally long")
        if any(d < 0 for d in self.depths) or any(h <= 0 for h in self.num_heads):
            raise InvalidConfig("depths must be >= 0 and num_heads > 0")
        if self.embed_dim % self.num_heads[0]:
            raise InvalidConfig("embed_dim must be divisible by num_heads[0]")
        if self.img_size % self.patch_size:
            raise InvalidConfig("img_size must be divisible by patch_size")
        grid = self.img_size // self.patch_size
        if grid % 2 ** (self.num_stages - 1):
            raise InvalidConfig("token grid cannot be halved at every stage")
        if self.mlp_ratio <= 0 or any(
            self.hidden_dim(i) != self.stage_dim(i) * self.mlp_ratio for i in range(self.num_stages)
        ):
            raise InvalidConfig("mlp_ratio must give an integer hidden width at every stage")

    def to_json(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["num_heads"] = list(self.num_heads)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "ArchConfig":
        keys = {
            "name", "img_size", "patch_size", "in_channels", "embed_dim", "depths",
            "num_heads", "window_size", "mlp_ratio", "num_classes",
        }
        missing = keys - set(data)
        extra = set(data) - keys
        if missing or extra:
            raise InvalidConfig(
                f"arch config keys mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
        if not isinstance(data["depths"], list) or not isinstance(data["num_heads"], list):
            raise InvalidConfig("depths and num_heads must be lists")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ArchConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path}: expected a JSON object")
        return cls.from_json(data)


PRESETS: Dict[str, ArchConfig] = {
    "swin-t": ArchConfig("swin-t", embed_dim=96, depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24)),
    "swin-s": ArchConfig("swin-s", embed_dim=96, depths=(2, 2, 18, 2), num_heads=(3, 6, 12, 24)),
    "swin-b": ArchConfig("swin-b", embed_dim=128, depths=(2, 2, 18, 2), num_heads=(4, 8, 16, 32)),
}


def preset_arch(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfig(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class LayerEntry:
    name: str
    role: ModuleRole
    stage: Optional[int]
    block: Optional[int]
    shape: Tuple[int, ...]
    prunable: bool
    # Token count the weight is applied to (linear layers only); drives FLOPs.
    tokens: Optional[int] = None

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


def _entry(name, shape, stage=None, block=None, tokens=None, classifier=_DEFAULT_CLASSIFIER):
    role = classifier(name, shape)
    prunable = role is not ModuleRole.AUX_M and len(shape) == 2
    return LayerEntry(name, role, stage, block, tuple(shape), prunable, tokens)


def enumerate_layers(cfg: ArchConfig, classifier: Optional[Classifier] = None) -> List[LayerEntry]:
    cfg.validate()
    cls = classifier or _DEFAULT_CLASSIFIER
    C, p = cfg.embed_dim, cfg.patch_size
    M = cfg.window_size
    out: List[LayerEntry] = []

    def add(name, shape, stage=None, block=None, tokens=None):
        out.append(_entry(name, shape, stage, block, tokens, cls))

    add("patch_embed.proj.weight", (C, cfg.in_channels, p, p), tokens=cfg.stage_tokens(0))
    add("patch_embed.proj.bias", (C,))
    add("patch_embed.norm.weight", (C,))
    add("patch_embed.norm.bias", (C,))
    for i in range(cfg.num_stages):
        Cs, H, tok = cfg.stage_dim(i), cfg.hidden_dim(i), cfg.stage_tokens(i)
        for j in range(cfg.depths[i]):
            b = f"layers.{i}.blocks.{j}."
            add(b + "norm1.weight", (Cs,), i, j)
            add(b + "norm1.bias", (Cs,), i, j)
            add(b + "attn.qkv.weight", (3 * Cs, Cs), i, j, tok)
            add(b + "attn.qkv.bias", (3 * Cs,), i, j)
            add(b + "attn.relative_position_bias_table", ((2 * M - 1) ** 2, cfg.num_heads[i]), i, j)
            add(b + "attn.proj.weight", (Cs, Cs), i, j, tok)
            add(b + "attn.proj.bias", (Cs,), i, j)
            add(b + "norm2.weight", (Cs,), i, j)
            add(b + "norm2.bias", (Cs,), i, j)
            add(b + "mlp.fc1.weight", (H, Cs), i, j, tok)
            add(b + "mlp.fc1.bias", (H,), i, j)
            add(b + "mlp.fc2.weight", (Cs, H), i, j, tok)
            add(b + "mlp.fc2.bias", (Cs,), i, j)
        if i < cfg.num_stages - 1:
            d = f"layers.{i}.downsample."
            add(d + "reduction.weight", (2 * Cs, 4 * Cs), i, None, cfg.stage_tokens(i + 1))
            add(d + "norm.weight", (4 * Cs,), i)
            add(d + "norm.bias", (4 * Cs,), i)
    last = cfg.stage_dim(cfg.num_stages - 1)
    add("norm.weight", (last,))
    add("norm.bias", (last,))
    add("head.weight", (cfg.num_classes, last), tokens=1)
    add("head.bias", (cfg.num_classes,))
    return out


_STAGE_RE = re.compile(r"layers\.(\d+)\.(?:blocks\.(\d+)\.)?")


def taxonomy_from_checkpoint(ckpt: Checkpoint, classifier: Optional[Classifier] = None) -> List[LayerEntry]:
    """Taxonomy inferred from tensor names alone (no FLOPs token counts)."""
    cls = classifier or _DEFAULT_CLASSIFIER
    out = []
    for rec in ckpt:
        m = _STAGE_RE.search(rec.name)
        stage = int(m.group(1)) if m else None
        block = int(m.group(2)) if m and m.group(2) is not None else None
        out.append(_entry(rec.name, rec.shape, stage, block, None, cls))
    return out


def check_taxonomy(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry]) -> None:
    """Require every checkpoint tensor to appear in the taxonomy with a matching shape."""
    by_name = {e.name: e for e in taxonomy}
    for rec in ckpt:
        entry = by_name.get(rec.name)
        if entry is None:
            raise UnclassifiedTensor(f"tensor {rec.name!r} is not in the taxonomy")
        if entry.shape != rec.shape:
            raise UnclassifiedTensor(
                f"tensor {rec.name!r} has shape {list(rec.shape)}, taxonomy expects {list(entry.shape)}"
            )


def name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def _synth_tensor(entry: LayerEntry, seed: int, dtype: str) -> TensorRecord:
    leaf = entry.name.rsplit(".", 1)[-1]
    is_norm = "norm" in entry.name.rsplit(".", 2)[-2]
    if is_norm and leaf == "weight":
        arr = np.ones(entry.shape)
    elif is_norm or leaf == "bias":
        arr = np.zeros(entry.shape)
    else:
        # PCG64 substream keyed by (seed, sha256(name)[:8]).
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, name_seed(entry.name)])))
        arr = rng.normal(0.0, 0.02, size=entry.shape)
    return TensorRecord(entry.name, dtype, entry.shape, arr.astype(NUMPY_DTYPES[dtype]).tobytes())


def synthesize(cfg: ArchConfig, seed: int, dtype: str = "F32", threads: int = 1) -> Checkpoint:
    """Random checkpoint: weights ~ N(0, 0.02), biases 0, norm scale 1 / shift 0."""
    if dtype not in NUMPY_DTYPES:
        raise InvalidConfig(f"dtype must be F32 or F16, got {dtype!r}")
    if not 0 <= seed < 2**64:
        raise InvalidConfig("seed must be an unsigned 64-bit integer")
    entries = enumerate_layers(cfg)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(lambda e: _synth_tensor(e, seed, dtype), entries))
    else:
        records = [_synth_tensor(e, seed, dtype) for e in entries]
    return Checkpoint(records, {"arch": cfg.name, "seed": str(seed), "generator": "dimap.synthesize"})


@dataclass
class ParamCounts:
    total: int
    nonzero: int
    per_module: Dict[ModuleRole, int]
    per_module_nonzero: Dict[ModuleRole, int]

    @property
    def prunable(self) -> int:
        return sum(self.per_module[r] for r in PRUNABLE_ROLES)

    @property
    def prunable_nonzero(self) -> int:
        return sum(self.per_module_nonzero[r] for r in PRUNABLE_ROLES)


def count_params(ckpt: Checkpoint, taxonomy: Sequence[LayerEntry]) -> ParamCounts:
    roles = {e.name: e.role for e in taxonomy}
    per = {r: 0 for r in ModuleRole}
    per_nz = {r: 0 for r in ModuleRole}
    for rec in ckpt:
        role = roles.get(rec.name)
        if role is None:
            raise UnclassifiedTensor(f"tensor {rec.name!r} is not in the taxonomy")
        per[role] += rec.numel
        per_nz[role] += int(np.count_nonzero(rec.array()))
    return ParamCounts(sum(per.values()), sum(per_nz.values()), per, per_nz)


@dataclass
class FlopsEstimate:
    dense: int
    effective: int
    per_component: Dict[str, int]

    convention = "1 MAC = 1 FLOP"


def estimate_flops(cfg: ArchConfig, masks: Optional[Mapping[str, np.ndarray]] = None,
                   taxonomy: Optional[Sequence[LayerEntry]] = None) -> FlopsEstimate:
    """Dense and nnz-effective FLOPs; masks substitute kept counts on prunable weights."""
    taxonomy = taxonomy if taxonomy is not None else enumerate_layers(cfg)
    masks = masks or {}
    dense = effective = 0
    comp = {"patch_embed": 0, "attention_matmul": 0, "qkv": 0, "proj": 0, "mlp": 0,
            "downsample": 0, "head": 0}
    for e in taxonomy:
        if e.tokens is None:
            continue
        n = e.numel
        cost = e.tokens * n
        kept = n
        if e.prunable and e.name in masks:
            kept = int(np.count_nonzero(masks[e.name]))
        eff = e.tokens * kept
        dense += cost
        effective += eff
        if e.name.startswith("patch_embed"):
            comp["patch_embed"] += cost
        elif ".attn.qkv." in e.name:
            comp["qkv"] += cost
        elif ".attn.proj." in e.name:
            comp["proj"] += cost
        elif ".mlp." in e.name:
            comp["mlp"] += cost
        elif ".downsample." in e.name:
            comp["downsample"] += cost
        elif e.name.startswith("head"):
            comp["head"] += cost
    for i in range(cfg.num_stages):
        # q@k^T and attn@v per window: 2 * tokens * M^2 * C_s, weight-free.
        att = cfg.depths[i] * 2 * cfg.stage_tokens(i) * cfg.window_size**2 * cfg.stage_dim(i)
        comp["attention_matmul"] += att
        dense += att
        effective += att
    return FlopsEstimate(dense, effective, comp)
