"""Additive soft attention gates for skip connections.

A gate scores each coarse-grid location from two sources: the skip
features x (projected and downsampled 2x by a strided 1x1x1 transform)
and a gating signal g from the next-coarser scale.  The score passes
through relu, a scalar projection, and a sigmoid; the resulting
coefficient map is resampled back to the skip resolution and multiplies
the skip features channel-wise.

Multi-dimensional attention splits the skip channels into contiguous
equal groups, each gated by its own coefficient map so different groups
can specialize on different target structures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Conv3dParams, conv3d, he_uniform, trilinear_resample
from .tensor import Tensor

__all__ = [
    "AttentionGateParams",
    "MultiGate",
    "make_attention_gate_params",
    "make_multi_gate",
    "init_pass_through",
    "attention_coefficients",
    "gate_apply",
    "multi_gate_apply",
    "gate_param_count",
]

PASS_THROUGH_BIAS = 3.0  # sigmoid(3.0) ~ 0.9526: near-identity gate, usable gradient


@dataclass
class AttentionGateParams:
    """Learnable set of one attention gate.

    w_x: skip projection, 1x1x1 with spatial stride 2, no bias.
    w_g: gating-signal projection, 1x1x1, bias b_g.
    psi: scalar score projection, 1x1x1 to one channel, bias b_psi.
    """

    w_x: Conv3dParams
    w_g: Conv3dParams
    psi: Conv3dParams

    def __post_init__(self):
        if self.w_x.bias is not None:
            raise ConfigurationError("w_x carries no bias; b_g lives on w_g")
        if self.psi.out_channels != 1:
            raise ConfigurationError("psi must project to a single channel")
        if self.w_x.out_channels != self.w_g.out_channels:
            raise ConfigurationError("w_x and w_g must share the intermediate extent")

    @property
    def f_l(self) -> int:
        return self.w_x.in_channels

    @property
    def f_g(self) -> int:
        return self.w_g.in_channels

    @property
    def f_int(self) -> int:
        return self.w_x.out_channels

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_x.weight", self.w_x.weight),
            ("w_g.weight", self.w_g.weight),
            ("w_g.bias", self.w_g.bias),
            ("psi.weight", self.psi.weight),
            ("psi.bias", self.psi.bias),
        ]


@dataclass
class MultiGate:
    """One or more sub-gates sharing a skip connection.

    With n sub-gates the skip's channels are partitioned into n
    contiguous equal groups; sub-gate i gates group i.  A single
    sub-gate reproduces the plain gate exactly.
    """

    sub_gates: list[AttentionGateParams]

    def __post_init__(self):
        if not self.sub_gates:
            raise ConfigurationError("a MultiGate needs at least one sub-gate")

    @property
    def n_gates(self) -> int:
        return len(self.sub_gates)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, sg in enumerate(self.sub_gates):
            out.extend((f"sub{i}.{n}", t) for n, t in sg.parameters())
        return out


def make_attention_gate_params(
    f_l: int, f_g: int, f_int: int, rng: np.random.Generator
) -> AttentionGateParams:
    if min(f_l, f_g, f_int) < 1:
        raise ConfigurationError(f"channel extents must be >= 1, got {(f_l, f_g, f_int)}")
    w_x = Conv3dParams(
        weight=T.parameter(he_uniform((f_int, f_l, 1, 1, 1), f_l, rng)),
        bias=None,
        stride=(2, 2, 2),
    )
    w_g = Conv3dParams(
        weight=T.parameter(he_uniform((f_int, f_g, 1, 1, 1), f_g, rng)),
        bias=T.parameter(np.zeros(f_int)),
    )
    psi = Conv3dParams(
        weight=T.parameter(he_uniform((1, f_int, 1, 1, 1), f_int, rng)),
        bias=T.parameter(np.zeros(1)),
    )
    return AttentionGateParams(w_x=w_x, w_g=w_g, psi=psi)


def make_multi_gate(f_l: int, f_g: int, f_int: int, n_gates: int, rng: np.random.Generator) -> MultiGate:
    if n_gates < 1 or f_l % n_gates:
        raise ConfigurationError(f"n_gates={n_gates} must divide the {f_l} skip channels")
    return MultiGate(sub_gates=[make_attention_gate_params(f_l, f_g, f_int, rng) for _ in range(n_gates)])


def init_pass_through(p: AttentionGateParams) -> None:
    """Make the gate transmit features nearly unattenuated.

    psi weights are zeroed and b_psi set to +3.0, so the coefficient is
    the constant sigmoid(3.0) ~ 0.9526 regardless of x and g while the
    sigmoid still has usable slope (~0.045) for training away from the
    constant.  w_x, w_g and b_g are left as constructed.
    """
    p.psi.weight.data[...] = 0.0
    p.psi.bias.data[...] = PASS_THROUGH_BIAS


def attention_coefficients(x: Tensor, g: Tensor, p: AttentionGateParams) -> Tensor:
    """Coefficient map in (0,1) at the skip resolution.

    x must be exactly twice g's spatial extent on each axis; the score
    is computed on g's grid and trilinearly resampled up to x's grid.
    """
    if x.ndim != 5 or g.ndim != 5:
        raise DimensionError("attention_coefficients expects 5-D activations")
    if tuple(2 * e for e in g.shape[2:]) != x.shape[2:]:
        raise DimensionError(
            f"skip extents {x.shape[2:]} must be exactly 2x gating extents {g.shape[2:]}"
        )
    if x.shape[1] != p.f_l or g.shape[1] != p.f_g:
        raise DimensionError(
            f"channel mismatch: x has {x.shape[1]} (gate expects {p.f_l}), "
            f"g has {g.shape[1]} (gate expects {p.f_g})"
        )
    combined = T.relu(T.add(conv3d(x, p.w_x), conv3d(g, p.w_g)))
    alpha_coarse = T.sigmoid(conv3d(combined, p.psi))
    return trilinear_resample(alpha_coarse, x.shape[2:])


def gate_apply(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply features by a single-channel coefficient map.

    alpha broadcasts across channels; gradients flow to both inputs.
    """
    if alpha.ndim != 5 or alpha.shape[1] != 1:
        raise DimensionError(f"alpha must be single-channel 5-D, got {alpha.shape}")
    if alpha.shape[2:] != x.shape[2:] or alpha.shape[0] != x.shape[0]:
        raise DimensionError(f"alpha extents {alpha.shape} do not match x {x.shape}")
    out = T.mul_elementwise(x, alpha)
    out.op = "gate_apply"
    return out


def multi_gate_apply(x: Tensor, g: Tensor, m: MultiGate) -> tuple[Tensor, list[Tensor]]:
    """Gate each channel group with its own sub-gate's coefficients.

    Returns the re-concatenated gated features and the per-sub-gate
    coefficient maps (each at the skip resolution).  With one sub-gate
    this is bit-identical to attention_coefficients + gate_apply.
    """
    n = m.n_gates
    channels = x.shape[1]
    if channels % n:
        raise ConfigurationError(f"{n} sub-gates do not divide {channels} channels")
    group = channels // n
    gated, alphas = [], []
    for i, sub in enumerate(m.sub_gates):
        alpha = attention_coefficients(x, g, sub)
        part = T.slice_channels(x, i * group, (i + 1) * group)
        gated.append(gate_apply(part, alpha))
        alphas.append(alpha)
    return T.concat_channels(gated), alphas


def gate_param_count(f_l: int, f_g: int, f_int: int) -> int:
    """Scalar learnables of one sub-gate: W_x + W_g + b_g + psi + b_psi."""
    return f_l * f_int + f_g * f_int + f_int + f_int + 1
