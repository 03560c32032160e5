"""
Visual and audio encoders.

Both encoders use the same three-layer conv plan (8x8, 4x4, 3x3 kernels,
ReLU after each) followed by a linear projection to `feature_dim` and a
final ReLU.

The binaural audio encoder runs the left and right spectrogram channels
through one shared conv stack and fuses the two maps with Binaural
Difference Attention before the projection:

    diff  = |f_ar - f_al|
    w     = sigmoid(conv1x1(concat(f_al, f_ar)))     2C -> C
    w_r   = w * diff
    w_l   = (1 - w) * diff
    f_a   = f_al * w_l + f_ar * w_r

The concat baseline feeds both channels to a single stack instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from errors import ConfigError, ShapeError
from numerics import Module, Tape, Var

logger = logging.getLogger(__name__)

KERNELS = (8, 4, 3)
AUTO_PADDING = -1


@dataclass(frozen=True)
class EncoderConfig:
    channels: Tuple[int, int, int] = (32, 64, 32)
    kernels: Tuple[int, int, int] = KERNELS
    strides: Tuple[int, int, int] = (4, 2, 1)
    feature_dim: int = 512
    bda: bool = True
    gate_init: float = 0.01
    visual_padding: int = AUTO_PADDING
    audio_padding: int = AUTO_PADDING

    def validate(self) -> None:
        if len(self.channels) != 3 or len(self.strides) != 3:
            raise ConfigError("encoder plan needs exactly three conv layers")
        if tuple(self.kernels) != KERNELS:
            raise ConfigError(f"encoder kernels must be {KERNELS}, got {tuple(self.kernels)}")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("conv channels and strides must be positive")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")


@dataclass(frozen=True)
class ConvPlan:
    """Resolved layers (cout, k, stride, padding) for a given input size."""
    in_channels: int
    input_hw: Tuple[int, int]
    layers: Tuple[Tuple[int, int, int, int], ...]
    output_chw: Tuple[int, int, int]

    @property
    def flat_dim(self) -> int:
        c, h, w = self.output_chw
        return c * h * w

    @property
    def first_padding(self) -> int:
        return self.layers[0][3]


def _plan_output(input_hw: Tuple[int, int], cfg: EncoderConfig, pad: int) -> Optional[Tuple[int, int]]:
    h, w = input_hw
    for i, (k, s) in enumerate(zip(cfg.kernels, cfg.strides)):
        p = pad if i == 0 else 0
        if k > h + 2 * p or k > w + 2 * p:
            return None
        h = nx.conv_output_size(h, k, s, p)
        w = nx.conv_output_size(w, k, s, p)
    return h, w


def resolve_plan(input_hw: Tuple[int, int], cfg: EncoderConfig, in_channels: int = 1,
                 padding: int = AUTO_PADDING) -> ConvPlan:
    """Smallest symmetric layer-1 padding that keeps the stack valid (or the fixed one given)."""
    cfg.validate()
    candidates = range(0, 65) if padding == AUTO_PADDING else [padding]
    for pad in candidates:
        out = _plan_output(input_hw, cfg, pad)
        if out is not None:
            layers = tuple((c, k, s, pad if i == 0 else 0)
                           for i, (c, k, s) in enumerate(zip(cfg.channels, cfg.kernels, cfg.strides)))
            return ConvPlan(in_channels, tuple(input_hw), layers, (cfg.channels[-1], out[0], out[1]))
    raise ShapeError(f"input {input_hw} is incompatible with the conv plan "
                     f"(kernels {cfg.kernels}, strides {cfg.strides}, padding {padding})")


class ConvStack(Module):
    def __init__(self, name: str, plan: ConvPlan, seed: int = 0, precision: str = "float32"):
        super().__init__(name, seed, precision)
        self.plan = plan
        self.layers = []
        cin = plan.in_channels
        for i, (cout, k, s, p) in enumerate(plan.layers, start=1):
            w = self.param(f"conv{i}.weight", (cout, cin, k, k))
            b = self.param(f"conv{i}.bias", (cout,), init="zeros")
            self.layers.append((w, b, s, p))
            cin = cout

    def forward(self, tape: Tape, x) -> Var:
        x = nx._wrap(x)
        if x.value.ndim != 4 or x.shape[1] != self.plan.in_channels or tuple(x.shape[2:]) != self.plan.input_hw:
            raise ShapeError(f"{self.name}: expected (B,{self.plan.in_channels},{self.plan.input_hw[0]},"
                             f"{self.plan.input_hw[1]}) input, got {x.shape}")
        for w, b, s, p in self.layers:
            x = nx.relu(nx.conv2d(x, tape.use(w), tape.use(b), s, p))
        return x


class Projection(Module):
    """Flatten, linear, ReLU."""

    def __init__(self, name: str, in_dim: int, out_dim: int, seed: int = 0, precision: str = "float32"):
        super().__init__(name, seed, precision)
        self.weight = self.param("weight", (out_dim, in_dim))
        self.bias = self.param("bias", (out_dim,), init="zeros")

    def forward(self, tape: Tape, x) -> Var:
        return nx.relu(nx.linear(nx.flatten(x), tape.use(self.weight), tape.use(self.bias)))


class VisualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, input_hw: Tuple[int, int], seed: int = 0, precision: str = "float32"):
        super().__init__("visual", seed, precision)
        self.plan = resolve_plan(input_hw, cfg, 1, cfg.visual_padding)
        self.stack = self.child(ConvStack("visual.cnn", self.plan, seed, precision))
        self.proj = self.child(Projection("visual.proj", self.plan.flat_dim, cfg.feature_dim, seed, precision))

    def forward(self, tape: Tape, depth) -> Var:
        return self.proj.forward(tape, self.stack.forward(tape, depth))


def encode_visual(tape: Tape, depth, encoder: VisualEncoder) -> Var:
    return encoder.forward(tape, depth)


# --- Binaural Difference Attention ---

@dataclass
class ChannelFeatureMaps:
    f_al: Var
    f_ar: Var


@dataclass
class BdaIntermediates:
    diff: Var
    f_concat: Var
    w: Var
    w_l: Var
    w_r: Var
    f_a_map: Var


def _split_channels(spec) -> Tuple[Var, Var]:
    spec = nx._wrap(spec)
    if spec.value.ndim != 4 or spec.shape[1] != 2:
        raise ShapeError(f"binaural input must be (B,2,F,T), got {spec.shape}")
    return nx.slice_axis(spec, 1, 0, 1), nx.slice_axis(spec, 1, 1, 2)


def encode_audio_channels(tape: Tape, spec, stack: ConvStack) -> ChannelFeatureMaps:
    left, right = _split_channels(spec)
    return ChannelFeatureMaps(stack.forward(tape, left), stack.forward(tape, right))


def bda_fuse(maps: ChannelFeatureMaps, gate_weight, gate_bias) -> Tuple[Var, BdaIntermediates]:
    f_al, f_ar = maps.f_al, maps.f_ar
    if f_al.shape != f_ar.shape:
        raise ShapeError(f"bda_fuse: left map {f_al.shape} != right map {f_ar.shape}")
    diff = nx.abs_(nx.sub(f_ar, f_al))
    f_concat = nx.concat([f_al, f_ar], axis=1)
    w = nx.sigmoid(nx.conv2d(f_concat, gate_weight, gate_bias, 1, 0))
    w_r = nx.mul(w, diff)
    w_l = nx.mul(nx.rsub_scalar(1.0, w), diff)
    f_a_map = nx.add(nx.mul(f_al, w_l), nx.mul(f_ar, w_r))
    return f_a_map, BdaIntermediates(diff, f_concat, w, w_l, w_r, f_a_map)


def project_audio(tape: Tape, f_a_map, proj: Projection) -> Var:
    return proj.forward(tape, f_a_map)


class BdaAudioEncoder(Module):
    def __init__(self, cfg: EncoderConfig, input_hw: Tuple[int, int], seed: int = 0, precision: str = "float32"):
        super().__init__("audio", seed, precision)
        self.plan = resolve_plan(input_hw, cfg, 1, cfg.audio_padding)
        channels = self.plan.output_chw[0]
        self.stack = self.child(ConvStack("audio.cnn", self.plan, seed, precision))
        self.gate_weight = self.param("bda.gate.weight", (channels, 2 * channels, 1, 1),
                                      init="uniform", bound=cfg.gate_init)
        self.gate_bias = self.param("bda.gate.bias", (channels,), init="zeros")
        self.proj = self.child(Projection("audio.proj", self.plan.flat_dim, cfg.feature_dim, seed, precision))

    def encode_channels(self, tape: Tape, spec) -> ChannelFeatureMaps:
        return encode_audio_channels(tape, spec, self.stack)

    def fuse(self, tape: Tape, maps: ChannelFeatureMaps) -> Tuple[Var, BdaIntermediates]:
        return bda_fuse(maps, tape.use(self.gate_weight), tape.use(self.gate_bias))

    def forward(self, tape: Tape, spec) -> Var:
        f_a_map, _ = self.fuse(tape, self.encode_channels(tape, spec))
        return project_audio(tape, f_a_map, self.proj)


class ConcatAudioEncoder(Module):
    """Both ears stacked as input channels of one conv stack (no BDA)."""

    def __init__(self, cfg: EncoderConfig, input_hw: Tuple[int, int], seed: int = 0, precision: str = "float32"):
        super().__init__("audio", seed, precision)
        self.plan = resolve_plan(input_hw, cfg, 2, cfg.audio_padding)
        self.stack = self.child(ConvStack("audio.cnn", self.plan, seed, precision))
        self.proj = self.child(Projection("audio.proj", self.plan.flat_dim, cfg.feature_dim, seed, precision))

    def forward(self, tape: Tape, spec) -> Var:
        spec = nx._wrap(spec)
        if spec.value.ndim != 4 or spec.shape[1] != 2:
            raise ShapeError(f"binaural input must be (B,2,F,T), got {spec.shape}")
        return self.proj.forward(tape, self.stack.forward(tape, spec))


def encode_audio_concat_baseline(tape: Tape, spec, encoder: ConcatAudioEncoder) -> Var:
    return encoder.forward(tape, spec)


def build_audio_encoder(cfg: EncoderConfig, input_hw: Tuple[int, int], seed: int = 0,
                        precision: str = "float32") -> Module:
    cls = BdaAudioEncoder if cfg.bda else ConcatAudioEncoder
    return cls(cfg, input_hw, seed, precision)


def channel_means(maps: ChannelFeatureMaps) -> np.ndarray:
    """Per-sample (mean f_al, mean f_ar) pairs, shape (B, 2)."""
    left = maps.f_al.value.reshape(maps.f_al.shape[0], -1).mean(axis=1)
    right = maps.f_ar.value.reshape(maps.f_ar.shape[0], -1).mean(axis=1)
    return np.stack([left, right], axis=1)
