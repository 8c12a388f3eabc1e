"""Post-search work: subnet retraining, attack grids, layer statistics, Lego-Net."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .adversarial import GRID_EPSILONS, GRID_STEPS, AttackSpec, TradesConfig, attack_grid, yopo_trades_step
from .blocks import NUM_BLOCKS
from .data import Dataset, batches
from .errors import NonFiniteError, TamNasError
from .network import Network, accuracy, build_network
from .optim import SGD, step_lr, zero_buffers
from .space import FULL, NUM_CHANNELS, Genome, Preset, count_params, build_param_table, legal_blocks, validate
from .supernet import WeightStore, clone_subnet

SCRATCH = "scratch"
FINETUNE = "finetune"


@dataclass(frozen=True)
class SubnetSchedule:
    epochs: int = 100
    lr: float = 0.1
    milestones: tuple = (20, 40, 80)
    momentum: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 512


MINI_SUBNET_SCHEDULE = SubnetSchedule(epochs=6, milestones=(4,), batch_size=64)


def default_subnet_schedule(preset: Preset) -> SubnetSchedule:
    return SubnetSchedule() if preset == FULL else MINI_SUBNET_SCHEDULE


@dataclass
class TrainedSubnetReport:
    genome: str
    init: str
    clean_accuracy: float
    grid: list  # dicts with epsilon, steps, accuracy
    params: int
    seed: int
    history: list = field(default_factory=list)  # mean training loss per epoch

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainedSubnetReport":
        return cls(**json.loads(text))


def init_subnet(genome: Genome, init: str, preset: Preset, store: WeightStore | None, seed: int) -> Network:
    validate(genome, preset)
    if init == SCRATCH:
        return build_network(preset, genome, np.random.default_rng([seed, 1]))
    if init == FINETUNE:
        if store is None:
            raise TamNasError("fine-tuning needs a supernet snapshot")
        return clone_subnet(store, genome)
    raise TamNasError(f"init must be {SCRATCH!r} or {FINETUNE!r}, got {init!r}")


def fit_subnet(
    net: Network,
    train: Dataset,
    schedule: SubnetSchedule,
    trades: TradesConfig,
    attack: AttackSpec,
    seed: int,
    augmented: bool = True,
) -> list:
    """Train ``net`` in place with TRADES-YOPO; returns mean loss per epoch."""
    optimizer = SGD(schedule.momentum, schedule.weight_decay)
    momentum = zero_buffers(net.parameters())
    history = []
    for epoch in range(schedule.epochs):
        rng = np.random.default_rng([seed, 2, epoch])
        lr = step_lr(schedule.lr, epoch, schedule.milestones)
        losses = []
        for bi, (x, y) in enumerate(batches(train, schedule.batch_size, rng, train=True, augmented=augmented)):
            try:
                losses.append(yopo_trades_step(net, x, y, trades, attack, optimizer, lr, momentum, rng))
            except NonFiniteError as exc:
                raise NonFiniteError(
                    f"subnet {net.genome.text()} epoch {epoch} batch {bi}: {exc}", batch_index=bi
                ) from None
        history.append(float(np.mean(losses)))
    return history


def train_subnet(
    genome: Genome,
    init: str,
    preset: Preset,
    train: Dataset,
    test: Dataset,
    schedule: SubnetSchedule,
    trades: TradesConfig,
    attack: AttackSpec,
    store: WeightStore | None = None,
    seed: int = 0,
    epsilons=GRID_EPSILONS,
    steps=GRID_STEPS,
    augmented: bool = True,
) -> TrainedSubnetReport:
    net = init_subnet(genome, init, preset, store, seed)
    history = fit_subnet(net, train, schedule, trades, attack, seed, augmented)
    return report_for(net, init, test, seed, history, epsilons, steps)


def report_for(net: Network, init: str, test: Dataset, seed: int, history=(), epsilons=GRID_EPSILONS, steps=GRID_STEPS):
    rows = attack_grid(net, test.x, test.y, epsilons, steps, seed=seed)
    return TrainedSubnetReport(
        genome=net.genome.text(),
        init=init,
        clean_accuracy=accuracy(net, test.x, test.y),
        grid=[{"epsilon": e, "steps": k, "accuracy": a} for e, k, a in rows],
        params=count_params(net.genome, build_param_table(net.preset)),
        seed=seed,
        history=list(history),
    )


# --------------------------------------------------------------------------
# statistics


@dataclass
class LayerStatistics:
    preset: Preset
    blocks: np.ndarray  # (layers, 22) occurrence counts
    channels: np.ndarray  # (layers, 10)
    size: int

    def to_csv(self, kind: str = "blocks") -> str:
        table = self.blocks if kind == "blocks" else self.channels
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer"] + list(range(table.shape[1])))
        for i, row in enumerate(table):
            w.writerow([i] + [int(v) for v in row])
        return buf.getvalue()


def layer_statistics(genomes, preset: Preset) -> LayerStatistics:
    """Per-layer occurrence counts of block ids and channel ids."""
    genomes = list(genomes)
    n = preset.num_layers
    blocks = np.zeros((n, NUM_BLOCKS), dtype=np.int64)
    channels = np.zeros((n, NUM_CHANNELS), dtype=np.int64)
    for g in genomes:
        if len(g.blocks) != n:
            raise TamNasError(
                f"genome with {len(g.blocks)} layers does not belong to preset {preset.name!r} ({n} layers)"
            )
        validate(g, preset)
        blocks[np.arange(n), g.blocks] += 1
        channels[np.arange(n), g.channels] += 1
    return LayerStatistics(preset, blocks, channels, len(genomes))


def top_k(individuals, key: str, k: int) -> tuple:
    """``(genomes, short)``: the ``k`` best by ``key`` (ties by params); ``short`` flags k > available."""
    if key not in ("clean_error", "adv_error", "params"):
        raise TamNasError(f"unknown objective {key!r}")
    ranked = sorted(individuals, key=lambda i: (getattr(i.fitness, key), i.fitness.params))
    return [i.genome for i in ranked[:k]], k > len(ranked)


def build_lego(stats: LayerStatistics) -> Genome:
    """Modal block and channel per layer; ties go to the smaller id."""
    blocks, channels = [], []
    for layer in stats.preset.layers:
        b_counts = stats.blocks[layer.index]
        c_counts = stats.channels[layer.index]
        if b_counts.sum() == 0:
            raise TamNasError(f"no statistics for layer {layer.index}")
        legal = list(legal_blocks(layer))
        b = int(np.argmax(b_counts))
        if b not in legal:
            b = legal[int(np.argmax(b_counts[legal]))]
        blocks.append(b)
        channels.append(int(np.argmax(c_counts)))
    return Genome(blocks, channels)
