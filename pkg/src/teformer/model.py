"""TEFormer assembly: patch embedding, transformer blocks, classification head."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionKind, AttentionLayer, SpikingProjection
from .encoders import EncodingSpec, encode
from .errors import ConfigError, DimensionError
from .layers import Linear, Module
from .neurons import RELAXED, SPIKING, LifParams
from .numerics import Tensor
from .tea import TemporalEnhancement
from .tmlp import SpikingMLP, TemporalMLP

DIRECTIONS = ("forward", "backward")

ABLATIONS = {
    # variant: (tea on, tmlp on, tea direction, tmlp direction)
    "baseline": (False, False, "forward", "backward"),
    "+tmlp": (False, True, "forward", "backward"),
    "+tea": (True, False, "forward", "backward"),
    "full": (True, True, "forward", "backward"),
    "tea_bwd+tmlp_fwd": (True, True, "backward", "forward"),
    "tea_bwd+tmlp_bwd": (True, True, "backward", "backward"),
    "tea_fwd+tmlp_fwd": (True, True, "forward", "forward"),
}


@dataclass(frozen=True)
class ModelConfig:
    T: int = 4
    in_channels: int = 1
    height: int = 8
    width: int = 8
    patch: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    num_classes: int = 10
    placement: float = 0.5
    shallow_attention: str = "qkta"
    deep_attention: str = "ssa"
    disable_tea: bool = False
    disable_tmlp: bool = False
    tea_direction: str = "forward"
    tmlp_direction: str = "backward"
    encoding: str = "direct"
    encoding_seed: int = 0
    seed: int = 0
    neuron_mode: str = SPIKING
    tau: float = 2.0
    v_th: float = 1.0
    v_rest: float = 0.0
    v_reset: float = 0.0
    surrogate_width: float = 4.0
    tim_alpha: float = 0.5
    attention_scale: float = 0.125

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"ModelConfig.{name}: {why}", field=name)

        for name in ("T", "in_channels", "height", "width", "patch", "dim", "depth", "heads", "mlp_ratio",
                     "num_classes"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be a positive integer")
        if self.height % self.patch:
            bad("height", f"{self.height} not divisible by patch {self.patch}")
        if self.width % self.patch:
            bad("width", f"{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            bad("dim", f"{self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.placement <= 1.0:
            bad("placement", "must lie in [0, 1]")
        for name in ("shallow_attention", "deep_attention"):
            if getattr(self, name) not in ("ssa", "sdsa", "qkta", "tim"):
                bad(name, f"unknown attention kind {getattr(self, name)!r}")
        for name in ("tea_direction", "tmlp_direction"):
            if getattr(self, name) not in DIRECTIONS:
                bad(name, f"must be one of {DIRECTIONS}")
        if self.encoding not in ("direct", "phase", "rate", "ttfs"):
            bad("encoding", f"unknown encoding {self.encoding!r}")
        if self.neuron_mode not in (SPIKING, RELAXED):
            bad("neuron_mode", f"must be {SPIKING!r} or {RELAXED!r}")
        if self.tau < 1.0:
            bad("tau", "must be >= 1")
        if self.v_th <= self.v_rest:
            bad("v_th", "must exceed v_rest")

    @property
    def tokens(self):
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def hidden(self):
        return self.mlp_ratio * self.dim

    @property
    def temporal_blocks(self) -> int:
        return math.ceil(self.placement * self.depth - 1e-9)

    def lif(self) -> LifParams:
        return LifParams(self.tau, self.v_th, self.v_rest, self.v_reset, self.surrogate_width, self.neuron_mode)

    def encoder(self) -> EncodingSpec:
        return EncodingSpec(self.encoding, self.T, self.encoding_seed)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**d)


def configure_ablation(config: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {list(ABLATIONS)}", field="ablation")
    tea, tmlp, tea_dir, tmlp_dir = ABLATIONS[variant]
    return dataclasses.replace(config, disable_tea=not tea, disable_tmlp=not tmlp,
                               tea_direction=tea_dir, tmlp_direction=tmlp_dir)


class Block(Module):
    def __init__(self, index: int, config: ModelConfig, rng, lif: LifParams):
        name = f"block{index}"
        self.temporal = index < config.temporal_blocks
        kind = config.shallow_attention if self.temporal else config.deep_attention
        tea = None
        if self.temporal and not config.disable_tea:
            tea = TemporalEnhancement(f"{name}.tea")
        self.attn = AttentionLayer(f"{name}.attn", config.dim, AttentionKind(kind, config.heads, config.tim_alpha),
                                   rng, lif, tea=tea, tea_reverse=config.tea_direction == "backward",
                                   scale=config.attention_scale)
        if self.temporal and not config.disable_tmlp:
            self.mlp = TemporalMLP(f"{name}.mlp", config.dim, config.hidden, rng, lif,
                                   reverse_time=config.tmlp_direction == "forward")
        else:
            self.mlp = SpikingMLP(f"{name}.mlp", config.dim, config.hidden, rng, lif)

    def __call__(self, x):
        x = nx.add(x, self.attn(x))
        return nx.add(x, self.mlp(x))


class Model(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        lif = config.lif()
        p = config.patch
        self.embed = SpikingProjection("embed", config.in_channels * p * p, config.dim, rng, lif)
        self.blocks = [Block(i, config, rng, lif) for i in range(config.depth)]
        self.head = Linear("head", config.dim, config.num_classes, rng, bias=True)
        names = [q.name for q in self.parameters()]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"duplicate parameter names {sorted(dupes)}")

    def named_parameters(self) -> dict:
        return {q.name: q for q in self.parameters()}

    def parameter_count(self) -> int:
        return int(sum(q.data.size for q in self.parameters()))

    def tea_modules(self) -> list[TemporalEnhancement]:
        return [b.attn.tea for b in self.blocks if b.attn.tea is not None]

    def tea_alphas(self) -> list[float]:
        return [t.alpha for t in self.tea_modules()]

    def set_neuron_mode(self, mode: str):
        """Switch every neuron between spiking and relaxed operation."""
        self.config = dataclasses.replace(self.config, neuron_mode=mode)
        lif = self.config.lif()
        stack = [self]
        while stack:
            m = stack.pop()
            if hasattr(m, "lif"):
                m.lif = lif
            stack.extend(c for c in m.children() if isinstance(c, Module))

    def prepare_input(self, images, sample_ids=None, encode_seed=None) -> np.ndarray:
        """Static [B, C, H, W] images are encoded; [T, B, C, H, W] inputs pass through."""
        c = self.config
        x = np.asarray(images)
        if x.ndim == 4:
            spec = c.encoder()
            if encode_seed is not None:
                spec = dataclasses.replace(spec, seed=encode_seed)
            ids = np.arange(x.shape[0]) if sample_ids is None else sample_ids
            x = encode(x, spec, ids)
        if x.ndim != 5 or x.shape[0] != c.T or x.shape[2:] != (c.in_channels, c.height, c.width):
            raise DimensionError(
                f"expected images [B, {c.in_channels}, {c.height}, {c.width}] or "
                f"[{c.T}, B, {c.in_channels}, {c.height}, {c.width}], got {np.shape(images)}")
        return x

    def patchify(self, x: np.ndarray) -> np.ndarray:
        T, B, C, H, W = x.shape
        p = self.config.patch
        x = x.reshape(T, B, C, H // p, p, W // p, p).transpose(0, 1, 3, 5, 2, 4, 6)
        return x.reshape(T, B, (H // p) * (W // p), C * p * p)

    def features(self, images, sample_ids=None, encode_seed=None) -> Tensor:
        x = self.prepare_input(images, sample_ids, encode_seed)
        x = nx.Tensor(self.patchify(x).astype(self.head.weight.dtype))
        x = self.embed(x)
        for block in self.blocks:
            x = block(x)
        return x

    def __call__(self, images, sample_ids=None, encode_seed=None) -> Tensor:
        x = self.features(images, sample_ids, encode_seed)
        pooled = nx.mean(x, axis=(0, 2))
        return self.head(pooled)

    forward = __call__

    def astype(self, dtype):
        for q in self.parameters():
            q.data = q.data.astype(dtype)
            q.grad = np.zeros_like(q.data)
        return self


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def forward(model: Model, images, sample_ids=None) -> Tensor:
    return model(images, sample_ids)
