"""Baseline 3-D U-Net and its attention-gated variant, plus checkpoints.

Both models share one trunk: per scale, two k=3 same-padding conv blocks
(conv + batch norm + relu) with channel doubling and factor-2 max-pool
downsampling; the decoder mirrors it with trilinear upsampling.  The
gated variant multiplies every skip connection except the shallowest by
learned attention coefficients before concatenation.  Trunk weights are
drawn from a random stream independent of the gate stream, so networks
built with the same seed have bit-identical trunks whether or not
attention is enabled.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import (
    MultiGate,
    gate_apply,
    gate_param_count,
    init_pass_through,
    make_multi_gate,
    multi_gate_apply,
)
from .errors import ConfigurationError, DimensionError, FormatError
from .layers import (
    BatchNormParams,
    Conv3dParams,
    batch_norm,
    conv3d,
    make_batch_norm_params,
    make_conv3d_params,
    max_pool3d,
    trilinear_resample,
)
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "Network",
    "build",
    "forward",
    "param_count",
    "attention_param_overhead",
    "save_checkpoint",
    "load_checkpoint",
    "load_network",
]

IN_CHANNELS = 1

CHECKPOINT_MAGIC = b"VXGATECK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture description; channel width doubles at every scale."""

    depth: int = 4
    base_channels: int = 8
    n_classes: int = 2
    n_gates: int = 1
    deep_supervision: bool = True
    attention_enabled: bool = True

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_gates < 1:
            raise ConfigurationError(f"n_gates must be >= 1, got {self.n_gates}")
        for s in self.gated_scales():
            if self.channels_at(s) % self.n_gates:
                raise ConfigurationError(
                    f"n_gates={self.n_gates} does not divide the "
                    f"{self.channels_at(s)} channels at scale {s}"
                )

    def channels_at(self, scale: int) -> int:
        return self.base_channels * 2 ** (scale - 1)

    def gated_scales(self) -> range:
        """Scales whose skip connections carry a gate (shallowest excluded)."""
        return range(2, self.depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ConvBlock:
    """conv(k=3, pad=1) + batch norm + relu."""

    def __init__(self, in_c: int, out_c: int, rng: np.random.Generator):
        self.conv = make_conv3d_params(in_c, out_c, 3, rng, padding=1)
        self.bn = make_batch_norm_params(out_c)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(batch_norm(conv3d(x, self.conv), self.bn, training))

    def parameters(self):
        return [
            ("conv.weight", self.conv.weight),
            ("conv.bias", self.conv.bias),
            ("bn.scale", self.bn.scale),
            ("bn.shift", self.bn.shift),
        ]

    def buffers(self):
        return [
            ("bn.running_mean", self.bn.running_mean),
            ("bn.running_var", self.bn.running_var),
        ]


class DecoderStage:
    """Upsampling conv block plus the two post-concatenation conv blocks."""

    def __init__(self, coarse_c: int, out_c: int, rng: np.random.Generator):
        self.up = ConvBlock(coarse_c, out_c, rng)
        self.conv1 = ConvBlock(2 * out_c, out_c, rng)
        self.conv2 = ConvBlock(out_c, out_c, rng)

    def blocks(self):
        return [("up", self.up), ("conv1", self.conv1), ("conv2", self.conv2)]


class Network:
    """Instantiated layer graph for one ModelConfig."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        trunk_rng = np.random.default_rng([seed, 0])
        gate_rng = np.random.default_rng([seed, 1])

        d, base = config.depth, config.base_channels
        self.encoders: list[tuple[ConvBlock, ConvBlock]] = []
        in_c = IN_CHANNELS
        for s in range(1, d + 1):
            out_c = config.channels_at(s)
            self.encoders.append((ConvBlock(in_c, out_c, trunk_rng), ConvBlock(out_c, out_c, trunk_rng)))
            in_c = out_c

        self.decoders: list[DecoderStage] = []  # scales depth-1 .. 1
        for s in range(d - 1, 0, -1):
            self.decoders.append(DecoderStage(config.channels_at(s + 1), config.channels_at(s), trunk_rng))

        self.aux_heads: dict[int, Conv3dParams] = {}
        if config.deep_supervision:
            for s in range(d - 1, 1, -1):
                self.aux_heads[s] = make_conv3d_params(config.channels_at(s), config.n_classes, 1, trunk_rng)

        self.final = make_conv3d_params(base, config.n_classes, 1, trunk_rng)

        self.gates: dict[int, MultiGate] = {}
        if config.attention_enabled:
            for s in range(d - 1, 1, -1):
                f_l = config.channels_at(s)
                mg = make_multi_gate(f_l, config.channels_at(s + 1), max(f_l // 2, 1), config.n_gates, gate_rng)
                for sub in mg.sub_gates:
                    init_pass_through(sub)
                self.gates[s] = mg

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for s, (b1, b2) in enumerate(self.encoders, start=1):
            out.extend((f"enc{s}.block1.{n}", t) for n, t in b1.parameters())
            out.extend((f"enc{s}.block2.{n}", t) for n, t in b2.parameters())
        for s in sorted(self.gates, reverse=True):
            out.extend((f"gate{s}.{n}", t) for n, t in self.gates[s].parameters())
        for stage, s in zip(self.decoders, range(self.config.depth - 1, 0, -1)):
            for bn, block in stage.blocks():
                out.extend((f"dec{s}.{bn}.{n}", t) for n, t in block.parameters())
        for s in sorted(self.aux_heads, reverse=True):
            head = self.aux_heads[s]
            out.append((f"aux{s}.weight", head.weight))
            out.append((f"aux{s}.bias", head.bias))
        out.append(("final.weight", self.final.weight))
        out.append(("final.bias", self.final.bias))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for s, (b1, b2) in enumerate(self.encoders, start=1):
            out.extend((f"enc{s}.block1.{n}", a) for n, a in b1.buffers())
            out.extend((f"enc{s}.block2.{n}", a) for n, a in b2.buffers())
        for stage, s in zip(self.decoders, range(self.config.depth - 1, 0, -1)):
            for bn, block in stage.blocks():
                out.extend((f"dec{s}.{bn}.{n}", a) for n, a in block.buffers())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update({name: a for name, a in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise FormatError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise FormatError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def attention_map_labels(self) -> list[str]:
        """One label per coefficient map, in forward-pass emission order."""
        labels = []
        for s in sorted(self.gates, reverse=True):
            for i in range(self.gates[s].n_gates):
                labels.append(f"gate{s}.sub{i}")
        return labels


def build(config: ModelConfig, seed: int = 0) -> Network:
    return Network(config, seed=seed)


def forward(
    net: Network,
    x: Tensor,
    training: bool = False,
    force_alpha: float | None = None,
) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    """Run the network.

    Returns (main_output, aux_outputs, attention_maps).  The main output
    and every aux output are channel-softmaxed at full resolution; the
    attention maps are emitted coarsest gate first, at skip resolution.
    When force_alpha is given, every gate is bypassed and the skip is
    scaled by that constant instead (the constant is outside the
    differentiation graph, which isolates the gradient path through the
    gated features).
    """
    cfg = net.config
    if x.ndim != 5 or x.shape[1] != IN_CHANNELS:
        raise DimensionError(f"input must be (batch, {IN_CHANNELS}, D, H, W), got {x.shape}")
    div = 2 ** (cfg.depth - 1)
    if any(e % div for e in x.shape[2:]):
        raise DimensionError(f"spatial extents {x.shape[2:]} must be divisible by {div}")

    skips: list[Tensor] = []
    h = x
    for s, (b1, b2) in enumerate(net.encoders, start=1):
        h = b2(b1(h, training), training)
        if s < cfg.depth:
            skips.append(h)
            h = max_pool3d(h, 2)

    d = h
    aux_outputs: list[Tensor] = []
    attention_maps: list[Tensor] = []
    for stage, s in zip(net.decoders, range(cfg.depth - 1, 0, -1)):
        skip = skips[s - 1]
        if s in net.gates:
            if force_alpha is None:
                skip, alphas = multi_gate_apply(skip, d, net.gates[s])
                attention_maps.extend(alphas)
            else:
                const = Tensor(np.full((skip.shape[0], 1) + skip.shape[2:], float(force_alpha)))
                skip = gate_apply(skip, const)
                attention_maps.extend([const] * net.gates[s].n_gates)
        up = stage.up(trilinear_resample(d, skip.shape[2:]), training)
        d = stage.conv2(stage.conv1(T.concat_channels([skip, up]), training), training)
        if s in net.aux_heads:
            logits = conv3d(d, net.aux_heads[s])
            aux_outputs.append(T.softmax_channel(trilinear_resample(logits, x.shape[2:])))

    main = T.softmax_channel(conv3d(d, net.final))
    return main, aux_outputs, attention_maps


def param_count(net: Network) -> int:
    """Exact number of scalar learnables (running statistics excluded)."""
    return sum(t.size for _, t in net.named_parameters())


def attention_param_overhead(config: ModelConfig) -> int:
    """Analytic learnable count added by enabling attention."""
    total = 0
    for s in config.gated_scales():
        f_l = config.channels_at(s)
        total += config.n_gates * gate_param_count(f_l, config.channels_at(s + 1), max(f_l // 2, 1))
    return total


def save_checkpoint(path, config: ModelConfig, state: dict[str, np.ndarray]) -> None:
    """Versioned binary container: header, config record, named f64 blobs.

    Blob order follows the dict's insertion order; writing and reading
    the same state round-trips bitwise.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for e in arr.shape:
            buf.write(struct.pack("<I", e))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise FormatError(f"truncated checkpoint while reading {what}")
        return b

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg = ModelConfig.from_dict(json.loads(take(cfg_len, "config")))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint config record: {e}") from e
    (count,) = struct.unpack("<I", take(4, "blob count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n, f"data of {name}"), dtype="<f8").reshape(shape)
        state[name] = data.copy()
    if buf.read(1):
        raise FormatError("trailing bytes after last checkpoint blob")
    return cfg, state


def load_network(path) -> tuple[Network, dict[str, np.ndarray]]:
    """Rebuild a Network from a checkpoint.

    Returns the network plus any blobs that are not model state (for
    example optimizer state saved alongside the parameters).
    """
    cfg, state = load_checkpoint(path)
    net = Network(cfg, seed=0)
    model_names = set(net.state_dict())
    net.load_state_dict({k: v for k, v in state.items() if k in model_names})
    extras = {k: v for k, v in state.items() if k not in model_names}
    return net, extras
