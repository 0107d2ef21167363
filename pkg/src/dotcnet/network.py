"""Three-scale network: per-branch DTCM, channel fusion, pooling, two FC layers."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .dtcm import CM, TAM, DTCMConfig, dtcm_forward, glorot_bound, init_dtcm
from .errors import ConfigError, ShapeError

BRANCH_NAMES = ("tiny", "medium", "large")
# order of the fused feature maps: large, medium, tiny scale
FUSION_ORDER = ("large", "medium", "tiny")
DEFAULT_KERNELS = (7, 17, 35)
DEFAULT_FILTERS = (12, 36, 6)


def make_branches(kernels=DEFAULT_KERNELS, filters=DEFAULT_FILTERS, mech1=TAM, mech2=CM,
                  second_order=True, attn_conv_k=3):
    return [DTCMConfig(kernel_size=k, num_filters=f, attn_conv_k=attn_conv_k,
                       first_order_mechanism=mech1, second_order_mechanism=mech2,
                       second_order_enabled=second_order)
            for k, f in zip(kernels, filters)]


@dataclass
class NetConfig:
    num_classes: int
    branches: list = field(default_factory=make_branches)
    enabled_branches: tuple = BRANCH_NAMES
    pool_grid: tuple = (4, 4)
    embed_dim: int = 128
    input_size: tuple = (64, 64)

    def __post_init__(self):
        enabled = set(self.enabled_branches)
        # canonical order for known names; unknown ones are kept so validate() can name them
        self.enabled_branches = tuple(n for n in BRANCH_NAMES if n in enabled) + \
            tuple(sorted(enabled - set(BRANCH_NAMES)))
        self.pool_grid = tuple(self.pool_grid)
        self.input_size = tuple(self.input_size)

    def branch(self, name):
        return self.branches[BRANCH_NAMES.index(name)]

    def validate(self):
        if len(self.branches) != len(BRANCH_NAMES):
            raise ConfigError(f"expected {len(BRANCH_NAMES)} branch configs, got {len(self.branches)}")
        unknown = set(self.enabled_branches) - set(BRANCH_NAMES)
        if unknown:
            raise ConfigError(f"unknown branch names {sorted(unknown)}; choose from {BRANCH_NAMES}")
        if not self.enabled_branches:
            raise ConfigError("at least one branch must be enabled")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        h, w = self.input_size
        for name in self.enabled_branches:
            b = self.branch(name).validate()
            if b.kernel_size > min(h, w):
                raise ConfigError(f"{name} branch kernel {b.kernel_size} exceeds input size {h}x{w}")
        gh, gw = self.pool_grid
        if not (1 <= gh <= h and 1 <= gw <= w):
            raise ConfigError(f"pool_grid {self.pool_grid} does not fit input size {self.input_size}")
        return self

    @property
    def fused_channels(self):
        return sum(self.branch(n).out_channels for n in self.enabled_branches)

    @property
    def feature_dim(self):
        return self.fused_channels * self.pool_grid[0] * self.pool_grid[1]

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "branches": [b.to_dict() for b in self.branches],
            "enabled_branches": list(self.enabled_branches),
            "pool_grid": list(self.pool_grid),
            "embed_dim": self.embed_dim,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        expected = {"num_classes", "branches", "enabled_branches", "pool_grid", "embed_dim", "input_size"}
        if set(d) != expected:
            raise ConfigError(f"config keys {sorted(set(d) ^ expected)} missing or unknown")
        d["branches"] = [DTCMConfig(**b) for b in d["branches"]]
        return cls(**d)

    def with_changes(self, **changes):
        return replace(self, **changes)


@dataclass
class NetworkState:
    branches: dict
    fc1_weight: T.Tensor
    fc1_bias: T.Tensor
    fc2_weight: T.Tensor
    fc2_bias: T.Tensor

    def parameters(self):
        out = {}
        for name, st in self.branches.items():
            out.update({f"{name}.{k}": v for k, v in st.parameters().items()})
        out["fc1.weight"] = self.fc1_weight
        out["fc1.bias"] = self.fc1_bias
        out["fc2.weight"] = self.fc2_weight
        out["fc2.bias"] = self.fc2_bias
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype):
        """Independent copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def copy(self):
        return self.astype(self.fc1_weight.dtype)


def init_network(cfg: NetConfig, seed: int, dtype=np.float32) -> NetworkState:
    cfg.validate()
    rng = np.random.default_rng(seed)
    branches = {}
    for name in BRANCH_NAMES:
        if name in cfg.enabled_branches:
            branches[name] = init_dtcm(cfg.branch(name), rng, dtype)
    d, e, k = cfg.feature_dim, cfg.embed_dim, cfg.num_classes
    a1, a2 = glorot_bound(d, e), glorot_bound(e, k)
    return NetworkState(
        branches=branches,
        fc1_weight=T.Tensor(rng.uniform(-a1, a1, size=(d, e)).astype(dtype), requires_grad=True),
        fc1_bias=T.Tensor(np.zeros(e, dtype=dtype), requires_grad=True),
        fc2_weight=T.Tensor(rng.uniform(-a2, a2, size=(e, k)).astype(dtype), requires_grad=True),
        fc2_bias=T.Tensor(np.zeros(k, dtype=dtype), requires_grad=True),
    )


def fused_features(x, cfg: NetConfig, state: NetworkState):
    maps = [dtcm_forward(x, cfg.branch(name), state.branches[name])
            for name in FUSION_ORDER if name in cfg.enabled_branches]
    return T.concat_channels(maps)


def net_forward(x, cfg: NetConfig, state: NetworkState):
    """Return (L2-normalized embedding, class logits) for a batch of images.

    The logits head reads the un-normalized first FC output.
    """
    if not cfg.enabled_branches:
        raise ConfigError("at least one branch must be enabled")
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(cfg.input_size):
        raise ShapeError(f"expected input (N,1,{cfg.input_size[0]},{cfg.input_size[1]}), got {x.shape}")
    if x.dtype != state.fc1_weight.dtype:
        x = T.Tensor(x.data.astype(state.fc1_weight.dtype))
    fused = fused_features(x, cfg, state)
    pooled = T.flatten(T.adaptive_avg_pool(fused, cfg.pool_grid))
    hidden = T.linear(pooled, state.fc1_weight, state.fc1_bias)
    logits = T.linear(hidden, state.fc2_weight, state.fc2_bias)
    return T.l2_normalize(hidden), logits


def embed(images, cfg, state, batch_size=64):
    """Forward without gradient tracking; returns (embeddings, logits) arrays."""
    frozen = state if not any(p.requires_grad for p in state.parameters().values()) else _frozen(state)
    embs, logits = [], []
    for start in range(0, len(images), batch_size):
        e, lg = net_forward(images[start:start + batch_size], cfg, frozen)
        embs.append(e.data)
        logits.append(lg.data)
    return np.concatenate(embs), np.concatenate(logits)


def _frozen(state):
    clone = state.copy()
    for p in clone.parameters().values():
        p.requires_grad = False
    return clone
