"""
CIFAR-style CNNs with three named stages.

`resnet` is the basic-block ResNet v1 (depth = 6n + 2, 1x1 projection + BN on
downsampling blocks); `plaincnn` is a three-conv toy net for fast tests. Both
end in global average pooling + one fully connected layer, and both expose
every stage output, which is where Feature Mining heads attach.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core import ops
from core.errors import ConfigurationError, InputError
from core.regularizers import REGULARIZERS, stage_hook
from core.rng import RngStream
from core.tensor import InitSpec, Parameter, Tensor

logger = logging.getLogger(__name__)

FAMILIES = ("resnet", "plaincnn")
RESNET_DEPTHS = (8, 20, 56)
STAGE_IDS = ("stage1", "stage2", "stage3")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "resnet"
    depth: int = 20
    stage_widths: Tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 10
    image_size: int = 32
    in_channels: int = 3
    regularizer: str = "none"
    drop_rate: float = 0.1
    drop_block_size: int = 3

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"model.family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "resnet" and self.depth not in RESNET_DEPTHS:
            raise ConfigurationError(f"unsupported resnet depth {self.depth}; use one of {RESNET_DEPTHS}")
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
            raise ConfigurationError(f"model.stage_widths needs three positive widths, got {self.stage_widths}")
        if self.num_classes < 2:
            raise ConfigurationError("model.num_classes must be at least 2")
        if self.image_size < 8:
            raise ConfigurationError("model.image_size must be at least 8")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(f"model.regularizer must be one of {REGULARIZERS}")
        return self


@dataclass
class StageOutput:
    stage_id: str
    tensor: Tensor
    channels: int
    spatial: Tuple[int, int]


class ParameterSet:
    """Ordered named parameters plus batch-norm states."""

    def __init__(self):
        self.params = OrderedDict()
        self.bn_states = OrderedDict()

    def _add(self, name, data, scheme, stream, fan_in=0):
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        p = Parameter(data.astype(np.float32), name, InitSpec(scheme, stream, fan_in))
        self.params[name] = p
        return p

    def conv_param(self, name, c_out, c_in, k, rng: RngStream):
        fan_in = c_in * k * k
        std = math.sqrt(2.0 / fan_in)
        data = rng.next_generator().normal(0.0, std, size=(c_out, c_in, k, k))
        return self._add(name, data, "he_normal", rng.name, fan_in)

    def fc_params(self, name, n_out, n_in, rng: RngStream, zero_bias=False):
        bound = 1.0 / math.sqrt(n_in)
        w = rng.next_generator().uniform(-bound, bound, size=(n_out, n_in))
        if zero_bias:
            b = np.zeros(n_out)
        else:
            b = rng.next_generator().uniform(-bound, bound, size=n_out)
        return (self._add(f"{name}.weight", w, "uniform_fan_in", rng.name, n_in),
                self._add(f"{name}.bias", b, "zeros" if zero_bias else "uniform_fan_in", rng.name, n_in))

    def bn_params(self, name, channels):
        self.bn_states[name] = ops.BatchNormState.for_channels(channels)
        return (self._add(f"{name}.gamma", np.ones(channels), "ones", ""),
                self._add(f"{name}.beta", np.zeros(channels), "zeros", ""))

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class ConvNet(ParameterSet):
    """Shared trunk plumbing; subclasses implement `_build` and `_stage`."""

    def __init__(self, spec: ModelSpec, init_rng: RngStream, reg_rng: RngStream = None):
        super().__init__()
        self.spec = spec.validate()
        self.training = True
        self.stage_ids = STAGE_IDS
        self.stage_channels = dict(zip(STAGE_IDS, spec.stage_widths))
        self._build(init_rng)
        self.fc_weight, self.fc_bias = self.fc_params("fc", spec.num_classes, spec.stage_widths[-1], init_rng)
        self._reg_hook = None
        if spec.regularizer != "none":
            self._reg_hook = stage_hook(spec.regularizer, spec.drop_rate, spec.drop_block_size,
                                        reg_rng or RngStream("regularizer", 0), list(STAGE_IDS))

    def _build(self, rng):
        raise NotImplementedError

    def _stage(self, index, x):
        raise NotImplementedError

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def _conv_bn(self, x, name, stride=1, padding=1, relu=True):
        gamma, beta = self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"]
        y = ops.conv2d(x, self.params[f"{name}.conv"], stride=stride, padding=padding)
        y = ops.batch_norm(y, gamma, beta, self.bn_states[f"{name}.bn"], training=self.training)
        return ops.relu(y) if relu else y

    def _add_conv_bn(self, name, c_out, c_in, k, rng):
        self.conv_param(f"{name}.conv", c_out, c_in, k, rng)
        self.bn_params(f"{name}.bn", c_out)

    def check_input(self, x: Tensor):
        s = self.spec
        expected = (s.in_channels, s.image_size, s.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise InputError(f"expected input (N, {', '.join(map(str, expected))}), got {x.shape}")

    def forward_stages(self, x: Tensor, stage_hook=None) -> List[StageOutput]:
        """
        Run the trunk. `stage_hook(stage_id, tensor)` may replace a stage
        output; the replacement feeds the next stage and is what gets reported.
        """
        self.check_input(x)
        outputs = []
        for index, stage_id in enumerate(self.stage_ids):
            x = self._stage(index, x)
            if self.training and self._reg_hook is not None:
                x = self._reg_hook(stage_id, x)
            if stage_hook is not None:
                x = stage_hook(stage_id, x)
            outputs.append(StageOutput(stage_id, x, x.shape[1], tuple(x.shape[2:])))
        return outputs

    def classify(self, feature: Tensor) -> Tensor:
        return ops.fully_connected(ops.global_avg_pool(feature), self.fc_weight, self.fc_bias)

    def forward_with_stages(self, x: Tensor, stage_hook=None):
        stages = self.forward_stages(x, stage_hook)
        return stages, self.classify(stages[-1].tensor)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_with_stages(x)[1]


class ResNet(ConvNet):
    def _build(self, rng):
        s = self.spec
        self.blocks_per_stage = (s.depth - 2) // 6
        self._add_conv_bn("stem", s.stage_widths[0], s.in_channels, 3, rng)
        c_in = s.stage_widths[0]
        for si, width in enumerate(s.stage_widths):
            for bi in range(self.blocks_per_stage):
                name = f"{STAGE_IDS[si]}.block{bi}"
                stride = 2 if (si > 0 and bi == 0) else 1
                self._add_conv_bn(f"{name}.a", width, c_in, 3, rng)
                self._add_conv_bn(f"{name}.b", width, width, 3, rng)
                if stride != 1 or c_in != width:
                    self._add_conv_bn(f"{name}.proj", width, c_in, 1, rng)
                c_in = width

    def _stage(self, index, x):
        if index == 0:
            x = self._conv_bn(x, "stem")
        for bi in range(self.blocks_per_stage):
            name = f"{STAGE_IDS[index]}.block{bi}"
            stride = 2 if (index > 0 and bi == 0) else 1
            out = self._conv_bn(x, f"{name}.a", stride=stride)
            out = self._conv_bn(out, f"{name}.b", relu=False)
            if f"{name}.proj.conv" in self.params:
                shortcut = self._conv_bn(x, f"{name}.proj", stride=stride, padding=0, relu=False)
            else:
                shortcut = x
            x = ops.relu(ops.add(out, shortcut))
        return x


class PlainCNN(ConvNet):
    def _build(self, rng):
        c_in = self.spec.in_channels
        for stage_id, width in zip(STAGE_IDS, self.spec.stage_widths):
            self._add_conv_bn(stage_id, width, c_in, 3, rng)
            c_in = width

    def _stage(self, index, x):
        return self._conv_bn(x, STAGE_IDS[index], stride=1 if index == 0 else 2)


def build(spec: ModelSpec, init_rng: RngStream, reg_rng: RngStream = None) -> ConvNet:
    spec.validate()
    model_cls = ResNet if spec.family == "resnet" else PlainCNN
    model = model_cls(spec, init_rng, reg_rng)
    logger.info("built %s-%s: %d parameters", spec.family, spec.depth, model.num_parameters())
    return model


def forward_with_stages(model: ConvNet, batch):
    images = batch.images if hasattr(batch, "images") else batch
    return model.forward_with_stages(images)
