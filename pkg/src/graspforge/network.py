"""GG-CNN and MTG-CNN: fully convolutional grasp networks.

Both variants share an encoder trunk (conv, conv, pool, conv, conv, pool).
GG-CNN attaches one decoder head emitting the four grasp maps; MTG-CNN
duplicates the decoder into a structurally identical auxiliary head that
emits the auxiliary map. Decoders use two dilated convolutions followed by
two transposed convolutions, so the output maps match the input resolution.

Kernel sizes: trunk convolutions use 3x3 kernels to keep single-image
latency low; the two dilated layers use 5x5, which carries the receptive
field and puts the parameter counts at ~58k (GG-CNN) and ~109k (MTG-CNN).
Everything is overridable through ModelConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .tensor import (
    ConvSpec,
    Tensor,
    conv2d,
    conv_transpose2d,
    he_uniform,
    maxpool2d,
    relu,
    tune_allocator,
)

VARIANTS = ("ggcnn", "mtgcnn")
AUX_TASKS = ("none", "depth", "saliency")

GRASP_HEADS = ("q", "cos", "sin", "w")


def _default_trunk(in_channels=3, filters=16):
    return (
        ConvSpec(in_channels, filters, 3, padding=1),
        ConvSpec(filters, filters, 3, padding=1),
        ConvSpec(filters, filters, 3, padding=1),
        ConvSpec(filters, filters, 3, padding=1),
    )


def _default_dilated(filters=16, dilated_filters=32):
    return (
        ConvSpec(filters, dilated_filters, 5, padding=4, dilation=2),
        ConvSpec(dilated_filters, dilated_filters, 5, padding=8, dilation=4),
    )


def _default_transpose(filters=16, dilated_filters=32):
    return (
        ConvSpec(dilated_filters, filters, 4, stride=2, padding=1),
        ConvSpec(filters, filters, 4, stride=2, padding=1),
    )


@dataclass(frozen=True)
class ModelConfig:
    """Topology description; the per-layer specs drive shape validation,
    initialization, the forward pass and the checkpoint format."""

    input_size: int = 300
    variant: str = "ggcnn"
    auxiliary_task: str = "none"
    trunk_convs: tuple = field(default_factory=_default_trunk)
    head_dilated: tuple = field(default_factory=_default_dilated)
    head_transpose: tuple = field(default_factory=_default_transpose)
    pool_window: int = 2
    pool_stride: int = 2

    @staticmethod
    def default(variant="ggcnn", auxiliary_task="none", input_size=300,
                filters=16, dilated_filters=32, in_channels=3):
        cfg = ModelConfig(
            input_size=input_size,
            variant=variant,
            auxiliary_task=auxiliary_task,
            trunk_convs=_default_trunk(in_channels, filters),
            head_dilated=_default_dilated(filters, dilated_filters),
            head_transpose=_default_transpose(filters, dilated_filters),
        )
        cfg.validate()
        return cfg

    @property
    def head_out_channels(self):
        return self.head_transpose[-1].out_channels

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant '{self.variant}' (expected {VARIANTS})")
        if self.auxiliary_task not in AUX_TASKS:
            raise ConfigurationError(
                f"unknown auxiliary task '{self.auxiliary_task}' (expected {AUX_TASKS})")
        if self.variant == "ggcnn" and self.auxiliary_task != "none":
            raise ConfigurationError("ggcnn does not take an auxiliary task")
        if self.variant == "mtgcnn" and self.auxiliary_task == "none":
            raise ConfigurationError("mtgcnn requires an auxiliary task (depth or saliency)")
        if len(self.trunk_convs) != 4 or len(self.head_dilated) != 2 or len(self.head_transpose) != 2:
            raise ConfigurationError(
                "expected 4 trunk convs, 2 dilated convs and 2 transposed convs, got "
                f"{len(self.trunk_convs)}/{len(self.head_dilated)}/{len(self.head_transpose)}")
        chain = list(self.trunk_convs) + list(self.head_dilated) + list(self.head_transpose)
        for prev, nxt in zip(chain, chain[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ConfigurationError(
                    f"channel chain broken: {prev} feeds {nxt}")
        # Walk the spatial algebra and demand a size-preserving round trip.
        size = self.input_size
        for i, spec in enumerate(self.trunk_convs):
            size = spec.out_size(size)
            if i in (1, 3):
                if size < self.pool_window:
                    raise ConfigurationError(f"input size {self.input_size} too small to pool")
                size = (size - self.pool_window) // self.pool_stride + 1
        for spec in self.head_dilated:
            size = spec.out_size(size)
        for spec in self.head_transpose:
            size = spec.transpose_out_size(size)
        if size != self.input_size:
            raise ConfigurationError(
                f"layer algebra maps input size {self.input_size} to {size}; "
                "the decoder must restore the input resolution")

    def to_dict(self):
        def specs(seq):
            return [vars(s).copy() for s in seq]

        return {
            "input_size": self.input_size,
            "variant": self.variant,
            "auxiliary_task": self.auxiliary_task,
            "trunk_convs": specs(self.trunk_convs),
            "head_dilated": specs(self.head_dilated),
            "head_transpose": specs(self.head_transpose),
            "pool_window": self.pool_window,
            "pool_stride": self.pool_stride,
        }

    @staticmethod
    def from_dict(d):
        cfg = ModelConfig(
            input_size=int(d["input_size"]),
            variant=d["variant"],
            auxiliary_task=d["auxiliary_task"],
            trunk_convs=tuple(ConvSpec(**s) for s in d["trunk_convs"]),
            head_dilated=tuple(ConvSpec(**s) for s in d["head_dilated"]),
            head_transpose=tuple(ConvSpec(**s) for s in d["head_transpose"]),
            pool_window=int(d["pool_window"]),
            pool_stride=int(d["pool_stride"]),
        )
        cfg.validate()
        return cfg


@dataclass
class ParameterMaps:
    """Pixelwise network outputs, each shaped (N, 1, H, W).

    ``a`` is present exactly when the producing model is an MTG-CNN.
    """

    q: Tensor
    cos: Tensor
    sin: Tensor
    w: Tensor
    a: Tensor | None = None

    @property
    def batch_size(self):
        return self.q.shape[0]

    def sample_arrays(self, i=0):
        """Plain 2-D numpy views of one sample, for extraction/export."""
        out = {
            "q": self.q.data[i, 0],
            "cos": self.cos.data[i, 0],
            "sin": self.sin.data[i, 0],
            "w": self.w.data[i, 0],
        }
        if self.a is not None:
            out["a"] = self.a.data[i, 0]
        return out


def _head_layer_names(head):
    names = []
    for i in range(2):
        names.append(f"{head}.dilated{i}")
    for i in range(2):
        names.append(f"{head}.deconv{i}")
    return names


def parameter_names(config: ModelConfig):
    """Canonical parameter order; init, checkpoints and the optimizer all
    follow it."""
    names = []
    for i in range(len(config.trunk_convs)):
        names.append(f"trunk.conv{i}")
    names += _head_layer_names("grasp")
    for h in GRASP_HEADS:
        names.append(f"grasp.out_{h}")
    if config.variant == "mtgcnn":
        names += _head_layer_names("aux")
        names.append("aux.out_a")
    out = []
    for n in names:
        out.append(n + ".weight")
        out.append(n + ".bias")
    return out


def _layer_spec(config, name):
    scope, layer = name.split(".", 1)
    if scope == "trunk":
        return config.trunk_convs[int(layer[-1])], "conv"
    if layer.startswith("dilated"):
        return config.head_dilated[int(layer[-1])], "conv"
    if layer.startswith("deconv"):
        return config.head_transpose[int(layer[-1])], "deconv"
    # 1x1 output conv
    return ConvSpec(config.head_out_channels, 1, 1), "conv"


class Model:
    """A parameter set bound to a ModelConfig, with a forward pass."""

    def __init__(self, config: ModelConfig, params: dict):
        config.validate()
        expected = parameter_names(config)
        if list(params.keys()) != expected:
            raise ConfigurationError(
                f"parameter set does not match config: got {list(params.keys())[:4]}..., "
                f"expected {expected[:4]}...")
        self.config = config
        self.params = params

    @property
    def variant(self):
        return self.config.variant

    def parameters(self):
        return list(self.params.items())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def head_parameter_count(self, head="aux") -> int:
        return int(sum(p.data.size for n, p in self.params.items() if n.startswith(head + ".")))

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = bool(flag)
        return self

    def freeze(self):
        return self.set_trainable(False)

    def _layer(self, name, x, kind):
        w = self.params[name + ".weight"]
        b = self.params[name + ".bias"]
        spec, _ = _layer_spec(self.config, name)
        if kind == "deconv":
            return conv_transpose2d(x, w, b, spec)
        return conv2d(x, w, b, spec)

    def _trunk(self, x):
        cfg = self.config
        for i in range(len(cfg.trunk_convs)):
            x = relu(self._layer(f"trunk.conv{i}", x, "conv"))
            if i in (1, 3):
                x = maxpool2d(x, cfg.pool_window, cfg.pool_stride)
        return x

    def _decode(self, head, x):
        for i in range(2):
            x = relu(self._layer(f"{head}.dilated{i}", x, "conv"))
        for i in range(2):
            x = relu(self._layer(f"{head}.deconv{i}", x, "deconv"))
        return x

    def forward(self, image) -> ParameterMaps:
        """Map a normalized image batch (N, C, H, W) to parameter maps.

        Accepts a single (C, H, W) array/Tensor as a batch of one. Raw
        regression outputs; no clamping.
        """
        tune_allocator()
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.data.ndim == 3:
            x = Tensor(x.data[None], requires_grad=x.requires_grad)
        in_ch = self.config.trunk_convs[0].in_channels
        s = self.config.input_size
        if x.data.ndim != 4 or x.data.shape[1] != in_ch or x.data.shape[2:] != (s, s):
            raise ContractViolation(
                f"expected input shaped (N, {in_ch}, {s}, {s}), got {tuple(x.data.shape)}")
        feat = self._trunk(x)
        g = self._decode("grasp", feat)
        maps = {h: self._layer(f"grasp.out_{h}", g, "conv") for h in GRASP_HEADS}
        a = None
        if self.config.variant == "mtgcnn":
            a = self._layer("aux.out_a", self._decode("aux", feat), "conv")
        return ParameterMaps(maps["q"], maps["cos"], maps["sin"], maps["w"], a)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Fresh model with fan-in-scaled uniform weights from the given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name in parameter_names(config):
        layer = name[:-len(".weight")] if name.endswith(".weight") else name[:-len(".bias")]
        spec, kind = _layer_spec(config, layer)
        k = spec.kernel_size
        if kind == "deconv":
            wshape = (spec.in_channels, spec.out_channels, k, k)
        else:
            wshape = (spec.out_channels, spec.in_channels, k, k)
        fan_in = spec.in_channels * k * k
        if name.endswith(".weight"):
            params[name] = Tensor(he_uniform(wshape, fan_in, rng), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(spec.out_channels, dtype=np.float32),
                                  requires_grad=True)
    return Model(config, params)


def prune_auxiliary(model: Model) -> Model:
    """Drop the auxiliary head; the returned GG-CNN-shaped model shares the
    trunk and grasp-head weight tensors, so grasp outputs are bit-identical."""
    if model.config.variant != "mtgcnn":
        raise ContractViolation("prune_auxiliary requires an mtgcnn model")
    cfg = replace(model.config, variant="ggcnn", auxiliary_task="none")
    params = {n: p for n, p in model.params.items() if not n.startswith("aux.")}
    return Model(cfg, params)
