"""Genome encoding, legality rules and the parameter-count table."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    BLOCK_SPECS,
    CHANNEL_RATIOS,
    NUM_BLOCKS,
    STRIDE2_BLOCKS,
    BlockSpec,
    block_plan,
    mid_channels,
    plan_param_count,
)
from .errors import (
    GenomeFormatError,
    GenomeLegalityError,
    GenomeLengthError,
    TamNasError,
)

NUM_CHANNELS = len(CHANNEL_RATIOS)
FULL_WIDTH_CHANNEL = NUM_CHANNELS - 1
BLOCK_ONLY_CHANNEL = 4


@dataclass(frozen=True)
class LayerSpec:
    index: int
    in_channels: int
    out_channels: int
    stride: int


@dataclass(frozen=True)
class Preset:
    """Macro skeleton: stem, choice layers, tail.

    ``stages`` lists ``(out_channels, repeat, stride)`` rows; ``tail`` is
    (last 1x1 conv, SE-gated expansion, final 1x1 conv) widths.
    """

    name: str
    input_size: int
    classes: int
    stem_channels: int
    stages: tuple
    tail: tuple

    @property
    def layers(self) -> tuple:
        out = []
        c_in = self.stem_channels
        for c_out, repeat, stride in self.stages:
            for r in range(repeat):
                s = stride if r == 0 else 1
                out.append(LayerSpec(len(out), c_in, c_out, s))
                c_in = c_out
        return tuple(out)

    @property
    def num_layers(self) -> int:
        return sum(r for _, r, _ in self.stages)

    @property
    def last_channels(self) -> int:
        return self.stages[-1][0]

    def digest(self) -> str:
        blob = json.dumps(
            [self.name, self.input_size, self.classes, self.stem_channels, self.stages, self.tail]
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FULL = Preset(
    name="full",
    input_size=32,
    classes=10,
    stem_channels=24,
    stages=((48, 1, 2), (48, 3, 1), (96, 1, 2), (96, 7, 1), (192, 1, 2), (192, 3, 1)),
    tail=(176, 920, 1024),
)

MINI = Preset(
    name="mini",
    input_size=16,
    classes=4,
    stem_channels=8,
    stages=((16, 1, 2), (16, 2, 1), (32, 1, 2), (32, 2, 1)),
    tail=(64, 128, 128),
)

PRESETS = {"full": FULL, "mini": MINI}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise TamNasError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def channel_ratio(channel_id: int) -> float:
    if not 0 <= channel_id < NUM_CHANNELS:
        raise TamNasError(f"channel id {channel_id} outside [0, {NUM_CHANNELS - 1}]")
    return CHANNEL_RATIOS[channel_id]


def decode_block(block_id: int) -> BlockSpec:
    if not 0 <= block_id < NUM_BLOCKS:
        raise TamNasError(f"block id {block_id} outside [0, {NUM_BLOCKS - 1}]")
    return BLOCK_SPECS[block_id]


def encode_block(spec: BlockSpec) -> int:
    return BLOCK_SPECS.index(spec)


def legal_blocks(layer: LayerSpec) -> tuple:
    return STRIDE2_BLOCKS if layer.stride == 2 else tuple(range(NUM_BLOCKS))


@dataclass(frozen=True)
class Genome:
    blocks: tuple
    channels: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def __len__(self):
        return len(self.blocks)

    def text(self) -> str:
        return encode(self)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]


def validate(genome: Genome, preset: Preset) -> Genome:
    layers = preset.layers
    if len(genome.blocks) != len(layers) or len(genome.channels) != len(layers):
        raise GenomeLengthError(
            f"genome has {len(genome.blocks)}/{len(genome.channels)} genes, "
            f"preset {preset.name!r} has {len(layers)} layers"
        )
    for layer, b, c in zip(layers, genome.blocks, genome.channels):
        if not 0 <= c < NUM_CHANNELS:
            raise GenomeFormatError(f"channel id {c} at layer {layer.index} outside [0, 9]")
        if b not in legal_blocks(layer):
            raise GenomeLegalityError(layer.index, b, layer.stride)
    return genome


def is_legal(genome: Genome, preset: Preset) -> bool:
    try:
        validate(genome, preset)
    except TamNasError:
        return False
    return True


def encode(genome: Genome) -> str:
    return " ".join(map(str, genome.blocks)) + " / " + " ".join(map(str, genome.channels))


def decode(text: str, preset: Preset) -> Genome:
    parts = text.strip().split("/")
    if len(parts) != 2:
        raise GenomeFormatError(f"expected 'blocks / channels', got {text!r}")
    try:
        blocks = [int(t) for t in parts[0].split()]
        channels = [int(t) for t in parts[1].split()]
    except ValueError as exc:
        raise GenomeFormatError(f"non-integer gene in {text!r}") from exc
    return validate(Genome(blocks, channels), preset)


def random_genome(preset: Preset, rng: np.random.Generator, channel_ids=None) -> Genome:
    """Uniform over legal blocks; channels uniform over ``channel_ids`` (default all)."""
    channel_ids = tuple(range(NUM_CHANNELS)) if channel_ids is None else tuple(channel_ids)
    blocks, channels = [], []
    for layer in preset.layers:
        legal = legal_blocks(layer)
        blocks.append(legal[rng.integers(len(legal))])
        channels.append(channel_ids[rng.integers(len(channel_ids))])
    return Genome(blocks, channels)


def cardinality(preset: Preset) -> int:
    total = 1
    for layer in preset.layers:
        total *= len(legal_blocks(layer)) * NUM_CHANNELS
    return total


# --------------------------------------------------------------------------
# parameter table


def block_params(layer: LayerSpec, block_id: int, channel_id: int) -> int:
    spec = decode_block(block_id)
    mid = mid_channels(layer.out_channels, channel_ratio(channel_id))
    return plan_param_count(block_plan(spec, layer.in_channels, layer.out_channels, layer.stride, mid))


@dataclass
class ParamTable:
    """``table[layer, block, channel]``; -1 marks illegal placements."""

    preset: Preset
    fixed: int
    table: np.ndarray = field(repr=False)

    def entry(self, layer: int, block: int, channel: int) -> int:
        v = int(self.table[layer, block, channel])
        if v < 0:
            raise GenomeLegalityError(layer, block, self.preset.layers[layer].stride)
        return v

    def bounds(self, channel_ids=None) -> tuple:
        """Smallest and largest achievable totals over the given channel ids."""
        ids = list(range(NUM_CHANNELS)) if channel_ids is None else list(channel_ids)
        lo = hi = self.fixed
        for i, layer in enumerate(self.preset.layers):
            sub = self.table[i][np.ix_(list(legal_blocks(layer)), ids)]
            lo += int(sub.min())
            hi += int(sub.max())
        return lo, hi

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "block", "channel", "count"])
        w.writerow(["fixed", "", "", self.fixed])
        for (i, b, c), v in np.ndenumerate(self.table):
            if v >= 0:
                w.writerow([i, b, c, int(v)])
        return buf.getvalue()


def build_param_table(preset: Preset) -> ParamTable:
    from .network import fixed_param_count

    layers = preset.layers
    table = np.full((len(layers), NUM_BLOCKS, NUM_CHANNELS), -1, dtype=np.int64)
    for layer in layers:
        for b in legal_blocks(layer):
            for c in range(NUM_CHANNELS):
                table[layer.index, b, c] = block_params(layer, b, c)
    return ParamTable(preset, fixed_param_count(preset), table)


def count_params(genome: Genome, table: ParamTable) -> int:
    validate(genome, table.preset)
    return table.fixed + sum(
        table.entry(i, b, c) for i, (b, c) in enumerate(zip(genome.blocks, genome.channels))
    )
