"""Weight-sharing supernet: storage, constrained sampling, cloning, training.

Every legal (layer, block) pair owns one parameter set built at the widest
channel ratio. A subnet takes, per layer, the first ``mid`` intermediate
channels of its chosen block (prefix slicing). Training works on views
into the store, so an SGD step on the sampled path updates the shared
weights in place and leaves every other choice untouched.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adversarial import AttackSpec, TradesConfig, yopo_trades_step
from .blocks import CHANNEL_RATIOS, build_block, mid_channels, slice_block
from .data import Dataset, batches
from .engine import Tensor
from .errors import CheckpointError, InfeasibleWindowError, NonFiniteError, TamNasError
from .network import Network, fixed_param_count, init_fixed
from .optim import SGD, step_lr
from .space import (
    BLOCK_ONLY_CHANNEL,
    FULL,
    Genome,
    ParamTable,
    Preset,
    channel_ratio,
    count_params,
    decode,
    decode_block,
    legal_blocks,
    random_genome,
    validate,
)

BLOCK_ONLY = "block"
JOINT = "joint"
FULL_WINDOWS = {BLOCK_ONLY: (1_823_000, 2_375_000), JOINT: (1_610_000, 2_370_000)}
JOINT_START_CHANNELS = (8, 9)
MAX_ATTEMPTS = 10_000


# --------------------------------------------------------------------------
# weight store


@dataclass
class WeightStore:
    preset: Preset
    fixed: dict  # name -> Tensor
    fixed_buffers: dict  # name -> ndarray
    choices: dict  # (layer, block) -> full-width BlockInstance
    momentum: dict = field(default_factory=dict)  # store key -> ndarray

    @staticmethod
    def key(layer: int, block: int, name: str) -> str:
        return f"L{layer}.b{block}.{name}"

    def named_params(self) -> dict:
        out = {name: t.data for name, t in self.fixed.items()}
        for (i, b), inst in self.choices.items():
            for name, t in inst.params.items():
                out[self.key(i, b, name)] = t.data
        return out

    def named_buffers(self) -> dict:
        out = dict(self.fixed_buffers)
        for (i, b), inst in self.choices.items():
            for name, arr in inst.buffers.items():
                out[self.key(i, b, name)] = arr
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.named_params().values())


def build_weight_store(preset: Preset, rng: np.random.Generator, dtype=np.float32) -> WeightStore:
    fixed, buffers = init_fixed(preset, rng, dtype)
    widest = CHANNEL_RATIOS[-1]
    choices = {}
    for layer in preset.layers:
        for b in legal_blocks(layer):
            choices[(layer.index, b)] = build_block(
                decode_block(b), layer.in_channels, layer.out_channels, layer.stride, widest, rng, dtype
            )
    store = WeightStore(preset, fixed, buffers, choices)
    store.momentum = {k: np.zeros_like(v) for k, v in store.named_params().items()}
    return store


def _subnet(store: WeightStore, genome: Genome, copy: bool) -> Network:
    validate(genome, store.preset)
    blocks = []
    for layer, b, c in zip(store.preset.layers, genome.blocks, genome.channels):
        mid = mid_channels(layer.out_channels, channel_ratio(c))
        blocks.append(slice_block(store.choices[(layer.index, b)], mid, copy))
    if copy:
        fixed = {k: Tensor(t.data.copy(), name=k) for k, t in store.fixed.items()}
        buffers = {k: v.copy() for k, v in store.fixed_buffers.items()}
    else:
        fixed = {k: Tensor(t.data, name=k) for k, t in store.fixed.items()}
        buffers = store.fixed_buffers
    return Network(store.preset, genome, fixed, buffers, blocks)


def clone_subnet(store: WeightStore, genome: Genome) -> Network:
    """Stand-alone copy of the subnet's weights and BN statistics."""
    return _subnet(store, genome, copy=True)


def path_network(store: WeightStore, genome: Genome) -> Network:
    """The same subnet as views into the store (writes go through)."""
    return _subnet(store, genome, copy=False)


def path_momentum(store: WeightStore, net: Network) -> dict:
    """Momentum buffers for ``net`` as views into the store's full-width buffers."""
    from .blocks import width_slice

    out = {k: store.momentum[k] for k in net.fixed}
    for i, (b, inst) in enumerate(zip(net.genome.blocks, net.blocks)):
        for name in inst.params:
            full = store.momentum[store.key(i, b, name)]
            out[f"L{i}.{name}"] = width_slice(full, inst.width_axes[name], inst.mid_channels)
    return out


# --------------------------------------------------------------------------
# sampling


def phase_window(preset: Preset, phase: str) -> tuple:
    """Parameter window for a phase; other presets scale by fixed-part size."""
    lo, hi = FULL_WINDOWS[phase]
    if preset == FULL:
        return lo, hi
    r = fixed_param_count(preset) / fixed_param_count(FULL)
    return int(round(lo * r)), int(round(hi * r))


@dataclass(frozen=True)
class SamplerState:
    phase: str
    epoch: int
    active_channels: tuple
    window: tuple
    seed: int
    rng_state: dict | None = None
    genome: str | None = None  # architecture currently being trained

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerState":
        d = dict(d)
        d["active_channels"] = tuple(d["active_channels"])
        d["window"] = tuple(d["window"])
        return cls(**d)


def initial_sampler_state(preset: Preset, seed: int) -> SamplerState:
    rng = np.random.default_rng(seed)
    return SamplerState(
        BLOCK_ONLY, 0, (BLOCK_ONLY_CHANNEL,), phase_window(preset, BLOCK_ONLY), seed, rng.bit_generator.state
    )


def enter_joint_phase(state: SamplerState, preset: Preset) -> SamplerState:
    return replace(state, phase=JOINT, active_channels=JOINT_START_CHANNELS, window=phase_window(preset, JOINT))


def sampler_rng(state: SamplerState) -> np.random.Generator:
    rng = np.random.default_rng(state.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    return rng


def sample_architecture(state: SamplerState, table: ParamTable, rng: np.random.Generator) -> Genome:
    """Uniform legal genome over the active channels, rejected until inside the window."""
    ids = (BLOCK_ONLY_CHANNEL,) if state.phase == BLOCK_ONLY else tuple(state.active_channels)
    lo, hi = state.window
    for _ in range(MAX_ATTEMPTS):
        g = random_genome(table.preset, rng, ids)
        if lo <= count_params(g, table) <= hi:
            return g
    raise InfeasibleWindowError(state.window, table.bounds(ids), MAX_ATTEMPTS)


def widen_channel_space(state: SamplerState, epoch: int, joint_start: int = 500, period: int = 20) -> SamplerState:
    """Grow the active channel ids during the joint phase.

    The set starts at {8, 9}; one period after the joint phase begins, and
    every period thereafter, the next lower id joins.
    """
    if state.phase != JOINT:
        return state
    added = max(0, (epoch - joint_start) // period - 1)
    lowest = max(0, JOINT_START_CHANNELS[0] - added)
    active = tuple(sorted(set(state.active_channels) | set(range(lowest, len(CHANNEL_RATIOS)))))
    return replace(state, active_channels=active)


# --------------------------------------------------------------------------
# schedule and training


@dataclass(frozen=True)
class TrainSchedule:
    block_epochs: int = 500
    joint_epochs: int = 500
    refresh: int = 20
    lr: float = 0.1
    block_milestones: tuple = (200, 400, 450)
    joint_milestones: tuple = (600, 700, 800)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 512
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.refresh < 1 or self.block_epochs % self.refresh or self.joint_epochs % self.refresh:
            raise TamNasError(
                f"refresh period {self.refresh} must divide both phase lengths "
                f"({self.block_epochs}, {self.joint_epochs})"
            )

    @property
    def total_epochs(self) -> int:
        return self.block_epochs + self.joint_epochs

    def phase(self, epoch: int) -> str:
        return BLOCK_ONLY if epoch < self.block_epochs else JOINT

    def lr_at(self, epoch: int) -> float:
        if epoch < self.block_epochs:
            return step_lr(self.lr, epoch, self.block_milestones)
        return step_lr(self.lr, epoch, self.joint_milestones)


MINI_SCHEDULE = TrainSchedule(
    block_epochs=6,
    joint_epochs=6,
    refresh=2,
    block_milestones=(4,),
    joint_milestones=(10,),
    batch_size=64,
    checkpoint_every=4,
)


def default_schedule(preset: Preset) -> TrainSchedule:
    return TrainSchedule() if preset == FULL else MINI_SCHEDULE


@dataclass
class TrainResult:
    state: SamplerState
    history: list  # per epoch: dict(epoch, phase, genome, params, lr, loss)
    checkpoints: list


def train_supernet(
    store: WeightStore,
    state: SamplerState,
    schedule: TrainSchedule,
    dataset: Dataset,
    trades: TradesConfig,
    attack: AttackSpec,
    table: ParamTable,
    checkpoint_dir=None,
    stop_epoch: int | None = None,
    log=None,
    augmented: bool = True,
) -> TrainResult:
    """Two-phase supernet training, resumable from ``state.epoch``.

    A fresh architecture is sampled at the start of every refresh period
    and trained with TRADES-YOPO steps through views into the store.
    """
    rng = sampler_rng(state)
    optimizer = SGD(schedule.momentum, schedule.weight_decay)
    genome = decode(state.genome, store.preset) if state.genome else None
    history, written = [], []
    last_ckpt = None
    if checkpoint_dir is not None:
        resumed = Path(checkpoint_dir) / f"supernet_e{state.epoch:04d}.tamn"
        last_ckpt = resumed if resumed.exists() else None
    end = schedule.total_epochs if stop_epoch is None else min(stop_epoch, schedule.total_epochs)
    for epoch in range(state.epoch, end):
        if schedule.phase(epoch) == JOINT and state.phase != JOINT:
            state = enter_joint_phase(state, store.preset)
        state = widen_channel_space(state, epoch, schedule.block_epochs, schedule.refresh)
        if genome is None or epoch % schedule.refresh == 0:
            genome = sample_architecture(state, table, rng)
        net = path_network(store, genome)
        mom = path_momentum(store, net)
        lr = schedule.lr_at(epoch)
        data_rng = np.random.default_rng([state.seed, epoch])
        losses = []
        for bi, (x, y) in enumerate(batches(dataset, schedule.batch_size, data_rng, train=True, augmented=augmented)):
            try:
                losses.append(yopo_trades_step(net, x, y, trades, attack, optimizer, lr, mom, data_rng))
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"epoch {epoch} batch {bi}: {exc}; last good checkpoint: {last_ckpt}",
                    batch_index=bi,
                    checkpoint=last_ckpt,
                ) from None
        state = replace(state, epoch=epoch + 1, rng_state=rng.bit_generator.state, genome=genome.text())
        row = {
            "epoch": epoch,
            "phase": state.phase,
            "genome": genome.text(),
            "params": count_params(genome, table),
            "lr": lr,
            "loss": float(np.mean(losses)) if losses else float("nan"),
        }
        history.append(row)
        if log is not None:
            log(row)
        done = epoch + 1
        if checkpoint_dir is not None and (
            done in (schedule.block_epochs, schedule.total_epochs) or done % schedule.checkpoint_every == 0
        ):
            last_ckpt = Path(checkpoint_dir) / f"supernet_e{done:04d}.tamn"
            save_checkpoint(last_ckpt, store, state)
            written.append(last_ckpt)
    return TrainResult(state, history, written)


# --------------------------------------------------------------------------
# checkpoint file
#
# magic "TAMN" | u32 version | u16 len + preset digest | u32 len + JSON state
# | u32 tensor count | per tensor: u16 len + name, u8 dtype, u8 ndim,
#   ndim x u32 dims, little-endian float32 data | u32 CRC32 of all of the above

MAGIC = b"TAMN"
VERSION = 1
_F32 = 1


def _pack_str(fmt: str, s: str) -> bytes:
    raw = s.encode()
    return struct.pack(fmt, len(raw)) + raw


def checkpoint_bytes(store: WeightStore, state: SamplerState, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str("<H", store.preset.digest())]
    header = {"preset": store.preset.name, "sampler": state.to_dict(), "meta": meta or {}}
    parts.append(_pack_str("<I", json.dumps(header, sort_keys=True)))
    tensors = []
    for prefix, group in (("p", store.named_params()), ("b", store.named_buffers()), ("m", store.momentum)):
        for name in sorted(group):
            tensors.append((f"{prefix}:{name}", group[name]))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str("<H", name))
        parts.append(struct.pack("<BB", _F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, store: WeightStore, state: SamplerState, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(store, state, meta))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode()


def parse_checkpoint(blob: bytes) -> tuple:
    """Return ``(preset digest, header dict, {name: array})``."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a TAMN checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(blob[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.string("<H")
    header = json.loads(r.string("<I"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string("<H")
        dtype, ndim = r.unpack("<BB")
        if dtype != _F32:
            raise CheckpointError(f"tensor {name}: unknown dtype code {dtype}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return digest, header, tensors


def load_checkpoint(path, preset: Preset) -> tuple:
    """Rebuild ``(store, sampler_state, meta)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    digest, header, tensors = parse_checkpoint(path.read_bytes())
    if digest != preset.digest():
        raise CheckpointError(f"checkpoint preset hash {digest} does not match {preset.name} ({preset.digest()})")
    store = build_weight_store(preset, np.random.default_rng(0))
    groups = {"p": store.named_params(), "b": store.named_buffers(), "m": store.momentum}
    expected = {f"{p}:{n}" for p, g in groups.items() for n in g}
    if expected != set(tensors):
        missing = sorted(expected - set(tensors))[:3]
        raise CheckpointError(f"checkpoint tensor set mismatch (e.g. missing {missing})")
    for prefix, group in groups.items():
        for name, arr in group.items():
            src = tensors[f"{prefix}:{name}"]
            if src.shape != arr.shape:
                raise CheckpointError(f"tensor {name}: shape {src.shape} != {arr.shape}")
            arr[...] = src
    return store, SamplerState.from_dict(header["sampler"]), header.get("meta", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
