"""Dual-order texture competitive module.

One branch of the network: a first-order Gabor bank applied to the image,
an attention or competition mechanism on its responses, a second-order bank
applied to those, a second mechanism, and a channel concat of both orders.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .gabor import GaborBank, lgf_forward, make_bank

TAM = "tam"
CM = "cm"
TAM_CM = "tam+cm"
NONE = "none"
MECHANISMS = (TAM, CM, TAM_CM, NONE)


@dataclass
class DTCMConfig:
    kernel_size: int
    num_filters: int
    attn_conv_k: int = 3
    first_order_mechanism: str = TAM
    second_order_mechanism: str = CM
    second_order_enabled: bool = True

    def validate(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.num_filters < 1:
            raise ConfigError(f"num_filters must be >= 1, got {self.num_filters}")
        if self.attn_conv_k < 1 or self.attn_conv_k % 2 == 0:
            raise ConfigError(f"attn_conv_k must be odd and positive, got {self.attn_conv_k}")
        for name in ("first_order_mechanism", "second_order_mechanism"):
            mech = getattr(self, name)
            if mech not in MECHANISMS:
                raise ConfigError(f"{name} must be one of {MECHANISMS}, got {mech!r}")
        uses_cm = {self.first_order_mechanism}
        if self.second_order_enabled:
            uses_cm.add(self.second_order_mechanism)
        if uses_cm & {CM, TAM_CM} and self.num_filters < 2:
            raise ConfigError("competitive coding needs at least 2 filters")
        return self

    @property
    def out_channels(self):
        return self.num_filters * (2 if self.second_order_enabled else 1)

    def to_dict(self):
        return asdict(self)


def glorot_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class TripletAttentionParams:
    """Three 2-in/1-out convolutions with bias, one per rotation branch."""

    weights: list
    biases: list

    @classmethod
    def init(cls, attn_k, rng, dtype=np.float32):
        a = glorot_bound(2 * attn_k * attn_k, attn_k * attn_k)
        weights = [T.Tensor(rng.uniform(-a, a, size=(1, 2, attn_k, attn_k)).astype(dtype), requires_grad=True)
                   for _ in range(3)]
        biases = [T.Tensor(np.zeros(1, dtype=dtype), requires_grad=True) for _ in range(3)]
        return cls(weights, biases)

    def named(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"psi{i}.weight"] = w
            out[f"psi{i}.bias"] = b
        return out


def _gate(x, weight, bias):
    return T.mul(x, T.sigmoid(T.conv2d(T.channel_zpool(x), weight, bias)))


def triplet_attention(x, params: TripletAttentionParams):
    """Average of three cross-dimension gated copies of ``x`` (N, C, H, W).

    Branches 1 and 2 turn the volume a quarter anticlockwise about the H and
    W axes, gate it in that frame and turn it back; branch 3 gates in place.
    """
    x = T.as_tensor(x)
    (w1, w2, w3), (b1, b2, b3) = params.weights, params.biases
    ch = T.rotate90(_gate(T.rotate90(x, "H"), w1, b1), "H", clockwise=True)
    cw = T.rotate90(_gate(T.rotate90(x, "W"), w2, b2), "W", clockwise=True)
    hw = _gate(x, w3, b3)
    return _mean3(ch, cw, hw)


def _mean3(a, b, c):
    # summed in double and rounded once, so equal single-precision inputs average exactly
    total = a.data.astype(np.float64) + b.data + c.data
    return T._result((total / 3.0).astype(a.dtype), (a, b, c), lambda g: (g / 3.0,) * 3, "mean3")


def competitive_code(g):
    g = T.as_tensor(g)
    if g.ndim != 4 or g.shape[1] < 2:
        raise ConfigError(f"competitive coding needs at least 2 channels, got shape {g.shape}")
    return T.channel_softmax(g)


def apply_mechanism(x, mechanism, attention=None):
    if mechanism == NONE:
        return x
    if mechanism == CM:
        return competitive_code(x)
    if mechanism == TAM:
        return triplet_attention(x, attention)
    if mechanism == TAM_CM:
        return competitive_code(triplet_attention(x, attention))
    raise ConfigError(f"unknown mechanism {mechanism!r}")


@dataclass
class DTCMState:
    lgf1: GaborBank
    lgf2: GaborBank | None
    tam1: TripletAttentionParams | None
    tam2: TripletAttentionParams | None

    def parameters(self):
        out = {}
        for tag, bank in (("lgf1", self.lgf1), ("lgf2", self.lgf2)):
            if bank is not None:
                out.update({f"{tag}.{k}": v for k, v in bank.parameters().items()})
        for tag, att in (("tam1", self.tam1), ("tam2", self.tam2)):
            if att is not None:
                out.update({f"{tag}.{k}": v for k, v in att.named().items()})
        return out


def _uses_tam(mechanism):
    return mechanism in (TAM, TAM_CM)


def init_dtcm(cfg: DTCMConfig, rng, dtype=np.float32):
    cfg.validate()
    seeds = rng.integers(0, 2**31 - 1, size=2)
    lgf1 = make_bank(cfg.kernel_size, cfg.num_filters, int(seeds[0]), dtype)
    lgf2 = make_bank(cfg.kernel_size, cfg.num_filters, int(seeds[1]), dtype) if cfg.second_order_enabled else None
    tam1 = TripletAttentionParams.init(cfg.attn_conv_k, rng, dtype) if _uses_tam(cfg.first_order_mechanism) else None
    tam2 = None
    if cfg.second_order_enabled and _uses_tam(cfg.second_order_mechanism):
        tam2 = TripletAttentionParams.init(cfg.attn_conv_k, rng, dtype)
    return DTCMState(lgf1, lgf2, tam1, tam2)


def dtcm_forward(x, cfg: DTCMConfig, state: DTCMState):
    f1 = apply_mechanism(lgf_forward(state.lgf1, x), cfg.first_order_mechanism, state.tam1)
    if not cfg.second_order_enabled:
        return f1
    f2 = apply_mechanism(lgf_forward(state.lgf2, f1), cfg.second_order_mechanism, state.tam2)
    return T.concat_channels([f1, f2])
