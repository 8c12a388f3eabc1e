"""Macro skeleton: stem -> choice blocks -> tail -> classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .blocks import BlockInstance, _Plan, build_block, forward_block, init_param, plan_param_count, squeeze_excite
from .engine import Tensor
from .errors import ShapeError
from .space import Genome, Preset, channel_ratio, decode_block, validate

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def fixed_plan(preset: Preset) -> _Plan:
    plan = _Plan()
    c0 = preset.stem_channels
    t_conv, t_se, t_expand = preset.tail
    plan.conv("stem.conv", c0, 3, k=3, bias=True)
    plan.bn("stem.bn", c0)
    plan.conv("tail.conv", t_conv, preset.last_channels)
    plan.bn("tail.bn", t_conv)
    plan.fc("tail.fc", t_se, t_conv)
    plan.se("tail.se", t_se)
    plan.fc("tail.expand", t_expand, t_se)
    plan.fc("head", preset.classes, t_expand)
    return plan


def fixed_param_count(preset: Preset) -> int:
    return plan_param_count(fixed_plan(preset))


def init_fixed(preset: Preset, rng: np.random.Generator, dtype=np.float32) -> tuple:
    plan = fixed_plan(preset)
    params = {e.name: Tensor(init_param(e, rng, dtype), name=e.name) for e in plan.entries}
    buffers = {e.name: init_param(e, rng, dtype) for e in plan.buffers}
    return params, buffers


@dataclass
class Network:
    preset: Preset
    genome: Genome
    fixed: dict  # name -> Tensor
    fixed_buffers: dict  # name -> ndarray
    blocks: list = field(default_factory=list)  # BlockInstance per choice layer

    def parameters(self) -> dict:
        out = dict(self.fixed)
        for i, blk in enumerate(self.blocks):
            for name, t in blk.params.items():
                out[f"L{i}.{name}"] = t
        return out

    def buffers(self) -> dict:
        out = dict(self.fixed_buffers)
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.buffers.items():
                out[f"L{i}.{name}"] = arr
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def _bn(self, name, x, train):
        return ops.batch_norm(
            x,
            self.fixed[f"{name}.g"],
            self.fixed[f"{name}.b"],
            self.fixed_buffers[f"{name}.rm"],
            self.fixed_buffers[f"{name}.rv"],
            train,
            BN_MOMENTUM,
            BN_EPS,
        )

    def stem(self, x: Tensor) -> Tensor:
        """First layer (the stem conv); the only layer the perturbation couples to."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError("network", "input.C", x.shape[1] if x.ndim == 4 else x.ndim, "expected", 3)
        return ops.conv2d(x, self.fixed["stem.conv.w"], self.fixed["stem.conv.b"], 1, 1)

    def after_stem(self, h: Tensor, train: bool = False) -> Tensor:
        h = ops.relu(self._bn("stem.bn", h, train))
        for blk in self.blocks:
            h = forward_block(blk, h, train)
        h = ops.conv2d(h, self.fixed["tail.conv.w"])
        h = ops.relu(self._bn("tail.bn", h, train))
        v = ops.global_avg_pool(h)
        v = ops.relu(ops.fully_connected(v, self.fixed["tail.fc.w"], self.fixed["tail.fc.b"]))
        v = squeeze_excite(self.fixed, "tail.se", v)
        v = ops.relu(ops.fully_connected(v, self.fixed["tail.expand.w"], self.fixed["tail.expand.b"]))
        return ops.fully_connected(v, self.fixed["head.w"], self.fixed["head.b"])

    def __call__(self, x, train: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        return self.after_stem(self.stem(x), train)


def build_network(preset: Preset, genome: Genome, rng: np.random.Generator, dtype=np.float32) -> Network:
    """Freshly initialized stand-alone subnet for ``genome``."""
    validate(genome, preset)
    fixed, buffers = init_fixed(preset, rng, dtype)
    blocks = []
    for layer, b, c in zip(preset.layers, genome.blocks, genome.channels):
        blocks.append(
            build_block(
                decode_block(b), layer.in_channels, layer.out_channels, layer.stride, channel_ratio(c), rng, dtype
            )
        )
    return Network(preset, genome, fixed, buffers, blocks)


def forward_network(net: Network, x, train: bool = False) -> Tensor:
    return net(x, train)


def predict(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax predictions without recording a tape."""
    preds = []
    for i in range(0, len(x), batch_size):
        logits = net(Tensor(x[i : i + batch_size]), train=False)
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(x) == 0:
        return 0.0
    return float((predict(net, x, batch_size) == y).mean() * 100.0)
