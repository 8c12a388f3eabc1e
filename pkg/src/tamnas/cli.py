"""Command-line pipeline: gen-data, train-supernet, search, train-subnet,
evaluate, analyze, lego.

Commands talk to each other only through files under
``<out>/<experiment>/``::

    data/         train.npz, test.npz
    checkpoints/  supernet.tamn (+ periodic snapshots)
    fronts/       front.json, archive.json, hv.csv, lego.json
    reports/      subnet_<init>.json, evaluate.json
    stats/        blocks.csv, channels.csv, topk.json, supernet_history.csv
    manifest/     <command>.json
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import multiprocessing
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adversarial import attack_grid, robust_accuracy
from .analysis import build_lego, layer_statistics, top_k, train_subnet
from .config import ExperimentConfig, default_config, load_config, save_config
from .data import Dataset, generate_synthetic, load_cifar10_binary, split
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InfeasibleWindowError,
    MissingArtifactError,
    NonFiniteError,
    TamNasError,
)
from .network import accuracy
from .nsga import (
    EvaluationContext,
    FitnessTriple,
    Individual,
    evaluate,
    fast_nondominated_sort,
    front_records,
    front_to_json,
    hv_to_csv,
    run_search,
)
from .space import build_param_table, decode, get_preset
from .supernet import (
    build_weight_store,
    clone_subnet,
    file_digest,
    initial_sampler_state,
    load_checkpoint,
    save_checkpoint,
    train_supernet,
)

log = logging.getLogger("tamnas")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COMPUTE = 4
EXIT_MISSING = 5
EXIT_CHECKPOINT = 6
EXIT_EXISTS = 7

SUBDIRS = ("data", "checkpoints", "fronts", "reports", "stats", "manifest")


class ArtifactExistsError(TamNasError):
    pass


# --------------------------------------------------------------------------
# plumbing


class Run:
    """Resolved config plus the experiment's output directories."""

    def __init__(self, cfg: ExperimentConfig, root: Path, force: bool, jobs: int):
        self.cfg = cfg
        self.root = root
        self.force = force
        self.jobs = jobs
        self.preset = get_preset(cfg.preset)
        self.hash = cfg.digest()
        self.outputs: list = []

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def need(self, sub: str, name: str, producer: str) -> Path:
        p = self.path(sub, name)
        if not p.exists():
            raise MissingArtifactError(p, f"run `tamnas {producer}` first")
        return p

    def claim(self, sub: str, name: str) -> Path:
        p = self.path(sub, name)
        if p.exists() and not self.force:
            raise ArtifactExistsError(f"{p} already exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p.relative_to(self.root)))
        return p

    def write_text(self, sub: str, name: str, text: str) -> Path:
        p = self.claim(sub, name)
        p.write_text(text)
        return p

    def write_json(self, sub: str, name: str, obj) -> Path:
        return self.write_text(sub, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_csv(self, sub: str, name: str, text: str) -> Path:
        return self.write_text(sub, name, f"# config_hash: {self.hash}\n" + text)


def build_id() -> str:
    """``git describe``-style identifier, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def read_csv(path: Path) -> list:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def csv_hash(path: Path) -> str | None:
    first = path.read_text().split("\n", 1)[0]
    return first.split(":", 1)[1].strip() if first.startswith("# config_hash:") else None


def save_dataset(ds: Dataset, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, x=ds.x, y=ds.y, classes=np.int64(ds.classes))


def load_dataset(path: Path) -> Dataset:
    try:
        with np.load(path) as z:
            return Dataset(z["x"].astype(np.float32), z["y"].astype(np.int64), int(z["classes"]))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}", None) from None


def load_splits(run: Run) -> tuple:
    pool = load_dataset(run.need("data", "train.npz", "gen-data"))
    test = load_dataset(run.need("data", "test.npz", "gen-data"))
    train, val = split(pool, run.cfg.data.val_fraction, run.cfg.seed)
    return train, val, test


def load_store(run: Run):
    ckpt = run.need("checkpoints", "supernet.tamn", "train-supernet")
    store, state, meta = load_checkpoint(ckpt, run.preset)
    return store, meta, file_digest(ckpt)


def individuals_from(records: list, preset) -> list:
    out = []
    for r in records:
        fit = FitnessTriple(r["clean_error"], r["adv_error"], r["params"])
        out.append(Individual(decode(r["genome"], preset), fit, r.get("rank"), r.get("crowding")))
    return out


def load_records(run: Run, name: str) -> list:
    path = run.need("fronts", name, "search")
    records = json.loads(path.read_text())
    hashes = {r.get("config_hash") for r in records}
    if hashes - {run.hash} and not run.force:
        raise ConfigError(
            f"{path} was produced with config hash(es) {sorted(h for h in hashes if h)}, current is {run.hash}; "
            "pass --force to use it anyway"
        )
    return records


def fitness_context(run: Run, store, snapshot: str) -> EvaluationContext:
    _, val, _ = load_splits(run)
    cap = run.cfg.search.val_samples
    if cap is not None:
        val = val.subset(np.arange(min(cap, len(val))))
    return EvaluationContext(store, val, run.cfg.search.attack, build_param_table(run.preset), run.cfg.seed, snapshot)


_WORKER_CTX = None


def _worker_eval(genome):
    return evaluate(genome, _WORKER_CTX)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run) -> None:
    d = run.cfg.data
    if d.kind == "synthetic":
        pool = generate_synthetic(d.classes, d.samples, d.image_size, d.noise, seed=run.cfg.seed)
        test = generate_synthetic(
            d.classes, d.test_samples, d.image_size, d.noise, seed=run.cfg.seed + 1, template_seed=run.cfg.seed
        )
    else:
        if not d.path:
            raise ConfigError("data.path must point at the CIFAR-10 binary directory")
        pool = load_cifar10_binary(d.path)
        test = load_cifar10_binary(Path(d.path) / "test_batch.bin")
    save_dataset(pool, run.claim("data", "train.npz"))
    save_dataset(test, run.claim("data", "test.npz"))
    log.info("wrote %d training and %d test images", len(pool), len(test))


def cmd_train_supernet(run: Run) -> None:
    train, _, _ = load_splits(run)
    final = run.claim("checkpoints", "supernet.tamn")
    store = build_weight_store(run.preset, np.random.default_rng([run.cfg.seed, 11]))
    state = initial_sampler_state(run.preset, run.cfg.seed)
    table = build_param_table(run.preset)
    result = train_supernet(
        store,
        state,
        run.cfg.supernet,
        train,
        run.cfg.trades,
        run.cfg.attack,
        table,
        checkpoint_dir=run.root / "checkpoints",
        augmented=run.cfg.data.augment,
        log=lambda r: log.info("epoch %(epoch)d %(phase)s loss %(loss).4f lr %(lr).4g params %(params)d", r),
    )
    save_checkpoint(final, store, result.state, {"config_hash": run.hash})
    run.outputs.extend(str(p.relative_to(run.root)) for p in result.checkpoints)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["epoch", "phase", "genome", "params", "lr", "loss"], lineterminator="\n")
    w.writeheader()
    w.writerows(result.history)
    run.write_csv("stats", "supernet_history.csv", buf.getvalue())


def cmd_search(run: Run) -> None:
    global _WORKER_CTX
    store, meta, snapshot = load_store(run)
    if meta.get("config_hash") not in (None, run.hash) and not run.force:
        raise ConfigError(f"checkpoint config hash {meta.get('config_hash')} != current {run.hash}; use --force")
    ctx = fitness_context(run, store, snapshot)
    table = ctx.table
    search_cfg = replace(run.cfg.search.nsga, seed=run.cfg.seed)
    pool = None
    map_fn = map
    if run.jobs > 1:
        _WORKER_CTX = ctx
        pool = multiprocessing.get_context("fork").Pool(run.jobs)
        map_fn = lambda fn, items: pool.map(_worker_eval, list(items))  # noqa: E731
    try:
        result = run_search(
            search_cfg,
            run.preset,
            table,
            lambda g: evaluate(g, ctx),
            log=lambda r: log.info("generation %(generation)d archive HV %(archive_hv).6f", r),
            map_fn=map_fn,
        )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    front = json.loads(front_to_json(result.front))
    for r in front:
        r["config_hash"] = run.hash
    run.write_json("fronts", "front.json", front)
    archive = []
    for gen, ind in result.archive:
        rec = front_records([ind])[0]
        rec.update(generation=gen, config_hash=run.hash)
        archive.append(rec)
    run.write_json("fronts", "archive.json", archive)
    run.write_csv("fronts", "hv.csv", hv_to_csv(result.hv_history))
    log.info("front has %d members", len(result.front))


def _pick_genome(run: Run, text: str | None):
    if text:
        return decode(text, run.preset)
    lego = run.path("fronts", "lego.json")
    if lego.exists():
        return decode(json.loads(lego.read_text())["genome"], run.preset)
    front = individuals_from(load_records(run, "front.json"), run.preset)
    return top_k(front, run.cfg.analysis.key, 1)[0][0]


def cmd_train_subnet(run: Run, genome_text: str | None) -> None:
    genome = _pick_genome(run, genome_text)
    train, _, test = load_splits(run)
    store = None
    if "finetune" in run.cfg.subnet.inits:
        store, _, _ = load_store(run)
    for init in run.cfg.subnet.inits:
        report = train_subnet(
            genome,
            init,
            run.preset,
            train,
            test,
            run.cfg.subnet.schedule,
            run.cfg.trades,
            run.cfg.attack,
            store=store,
            seed=run.cfg.seed,
            epsilons=run.cfg.analysis.grid_epsilons,
            steps=run.cfg.analysis.grid_steps,
            augmented=run.cfg.data.augment,
        )
        obj = json.loads(report.to_json())
        obj["config_hash"] = run.hash
        run.write_json("reports", f"subnet_{init}.json", obj)
        log.info("%s subnet: clean accuracy %.2f%%", init, report.clean_accuracy)


def cmd_evaluate(run: Run, genome_text: str | None) -> None:
    genome = _pick_genome(run, genome_text)
    store, _, snapshot = load_store(run)
    ctx = fitness_context(run, store, snapshot)
    fit = evaluate(genome, ctx)
    _, _, test = load_splits(run)
    net = clone_subnet(store, genome)
    rows = attack_grid(net, test.x, test.y, run.cfg.analysis.grid_epsilons, run.cfg.analysis.grid_steps, run.cfg.seed)
    run.write_json(
        "reports",
        "evaluate.json",
        {
            "config_hash": run.hash,
            "genome": genome.text(),
            "fitness": {"clean_error": fit.clean_error, "adv_error": fit.adv_error, "params": fit.params},
            "test_clean_accuracy": accuracy(net, test.x, test.y),
            "grid": [{"epsilon": e, "steps": k, "accuracy": a} for e, k, a in rows],
        },
    )


def _top_pool(run: Run) -> tuple:
    """Top-k genomes from the archive's nondominated set."""
    archive = individuals_from(load_records(run, "archive.json"), run.preset)
    unique = {}
    for ind in archive:
        unique.setdefault(ind.genome.text(), ind)
    inds = list(unique.values())
    objs = [i.fitness.objectives() for i in inds]
    nd = [inds[i] for i in fast_nondominated_sort(objs)[0]]
    genomes, short = top_k(nd, run.cfg.analysis.key, run.cfg.analysis.top_k)
    if short:
        log.warning("only %d nondominated genomes available for top-%d", len(genomes), run.cfg.analysis.top_k)
    return genomes, short


def cmd_analyze(run: Run) -> None:
    genomes, short = _top_pool(run)
    stats = layer_statistics(genomes, run.preset)
    run.write_csv("stats", "blocks.csv", stats.to_csv("blocks"))
    run.write_csv("stats", "channels.csv", stats.to_csv("channels"))
    run.write_json(
        "stats",
        "topk.json",
        {"config_hash": run.hash, "key": run.cfg.analysis.key, "short": short, "genomes": [g.text() for g in genomes]},
    )


def cmd_lego(run: Run) -> None:
    genomes, _ = _top_pool(run)
    lego = build_lego(layer_statistics(genomes, run.preset))
    store, _, snapshot = load_store(run)
    fit = evaluate(lego, fitness_context(run, store, snapshot))
    front = load_records(run, "front.json")
    run.write_json(
        "fronts",
        "lego.json",
        {
            "config_hash": run.hash,
            "genome": lego.text(),
            "clean_error": fit.clean_error,
            "adv_error": fit.adv_error,
            "params": fit.params,
            "best_front_adv_error": min(r["adv_error"] for r in front),
            "best_front_clean_error": min(r["clean_error"] for r in front),
        },
    )
    log.info("lego %s: clean error %.2f, adv error %.2f", lego.text(), fit.clean_error, fit.adv_error)


COMMANDS = ("gen-data", "train-supernet", "search", "train-subnet", "evaluate", "analyze", "lego")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tamnas", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"tamnas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=("full", "mini"))
        p.add_argument("--out", type=Path, help="output root (default: $TAMNAS_OUT or ./out)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--force", action="store_true", help="overwrite outputs, accept mismatched inputs")
        if name in ("train-subnet", "evaluate"):
            p.add_argument("--genome", help="genome text 'b b ... / c c ...'")
    return parser


def resolve(args) -> Run:
    if args.config is not None:
        cfg = load_config(args.config, args.preset)
    else:
        cfg = default_config(args.preset or "full")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    root_base = args.out or (Path(cfg.output) if cfg.output else None) or Path(os.environ.get("TAMNAS_OUT", "out"))
    root = Path(root_base) / cfg.experiment
    for d in SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    return Run(cfg, root, args.force, args.jobs)


def dispatch(run: Run, args) -> None:
    name = args.command
    if name == "gen-data":
        cmd_gen_data(run)
    elif name == "train-supernet":
        cmd_train_supernet(run)
    elif name == "search":
        cmd_search(run)
    elif name == "train-subnet":
        cmd_train_subnet(run, args.genome)
    elif name == "evaluate":
        cmd_evaluate(run, args.genome)
    elif name == "analyze":
        cmd_analyze(run)
    elif name == "lego":
        cmd_lego(run)


def exit_code(exc: BaseException) -> int:
    for kind, code in (
        (MissingArtifactError, EXIT_MISSING),
        (ArtifactExistsError, EXIT_EXISTS),
        (CheckpointError, EXIT_CHECKPOINT),
        (ConfigError, EXIT_CONFIG),
        (DataError, EXIT_DATA),
        (NonFiniteError, EXIT_COMPUTE),
        (InfeasibleWindowError, EXIT_COMPUTE),
    ):
        if isinstance(exc, kind):
            return code
    return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        run = resolve(args)
        save_config(run.cfg, run.root / "config.yaml")
        dispatch(run, args)
    except TamNasError as exc:
        log.error("%s", exc)
        return exit_code(exc)
    manifest = {
        "command": args.command,
        "config_hash": run.hash,
        "seed": run.cfg.seed,
        "preset": run.cfg.preset,
        "build": build_id(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": sorted(run.outputs),
    }
    (run.root / "manifest" / f"{args.command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
