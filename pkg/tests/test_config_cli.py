import json

import numpy as np
import pytest

from tamnas import cli
from tamnas.config import config_from_dict, default_config, dump_config, load_config, save_config
from tamnas.errors import ConfigError
from tamnas.space import MINI, random_genome


def test_full_defaults_carry_published_settings():
    cfg = default_config("full")
    assert cfg.supernet.block_epochs == 500 and cfg.supernet.refresh == 20
    assert cfg.subnet.schedule.epochs == 100 and cfg.subnet.schedule.weight_decay == 5e-3
    assert (cfg.trades.m, cfg.trades.n) == (5, 3)
    assert (cfg.search.nsga.parent_size, cfg.search.nsga.generations) == (50, 20)
    assert cfg.data.kind == "cifar10"


@pytest.mark.parametrize("preset", ["full", "mini"])
def test_config_roundtrip(tmp_path, preset):
    cfg = default_config(preset)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_partial_override_and_hash_change(tmp_path):
    (tmp_path / "c.yaml").write_text("preset: mini\nseed: 4\nsearch:\n  nsga:\n    generations: 3\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.seed == 4 and cfg.search.nsga.generations == 3
    assert cfg.search.val_samples == default_config("mini").search.val_samples
    assert cfg.digest() != default_config("mini").digest()
    # the output root does not affect the hash
    assert config_from_dict({"preset": "mini", "output": "/elsewhere"}).digest() == default_config("mini").digest()


@pytest.mark.parametrize(
    "raw",
    [
        {"preset": "mini", "colour": 3},
        {"preset": "mini", "search": {"nsga": {"generation": 3}}},
        {"preset": "mini", "seed": "zero"},
        {"preset": "mini", "data": {"kind": "svhn"}},
        {"preset": "huge"},
        {"preset": "mini", "data": {"kind": "cifar10"}},
        {"preset": "mini", "supernet": {"refresh": 5}},
        {"preset": "mini", "analysis": {"key": "latency"}},
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_dump_is_plain_yaml():
    text = dump_config(default_config("mini"))
    assert "!!python" not in text and "preset: mini" in text


def run(tmp_path, *args):
    return cli.main([*args, "--preset", "mini", "--out", str(tmp_path)])


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0 and "tamnas" in capsys.readouterr().out


def test_search_without_checkpoint_is_missing_artifact(tmp_path, caplog):
    assert run(tmp_path, "gen-data") == cli.EXIT_OK
    assert run(tmp_path, "search") == cli.EXIT_MISSING
    assert "supernet.tamn" in caplog.text and "train-supernet" in caplog.text


def test_missing_data_and_bad_config_codes(tmp_path):
    assert run(tmp_path, "train-supernet") == cli.EXIT_MISSING
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: mini\nwhatever: 1\n")
    assert run(tmp_path, "gen-data", "--config", str(bad)) == cli.EXIT_CONFIG
    assert run(tmp_path, "gen-data", "--config", str(tmp_path / "absent.yaml")) == cli.EXIT_CONFIG
    assert not (tmp_path / "tamnas" / "data" / "train.npz").exists()


def test_cifar_without_path_is_config_error(tmp_path):
    assert cli.main(["gen-data", "--preset", "full", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_corrupt_checkpoint_exit_code(tmp_path):
    assert run(tmp_path, "gen-data") == cli.EXIT_OK
    (tmp_path / "tamnas" / "checkpoints" / "supernet.tamn").write_bytes(b"TAMN garbage")
    assert run(tmp_path, "search") == cli.EXIT_CHECKPOINT


def test_manifest_and_overwrite_guard(tmp_path):
    assert run(tmp_path, "gen-data", "--seed", "3") == cli.EXIT_OK
    root = tmp_path / "tamnas"
    manifest = json.loads((root / "manifest" / "gen-data.json").read_text())
    assert manifest["seed"] == 3 and manifest["preset"] == "mini"
    assert manifest["config_hash"] == load_config(root / "config.yaml").digest()
    assert manifest["outputs"] == ["data/test.npz", "data/train.npz"]
    assert {"build", "wall_time_s", "started"} <= set(manifest)
    first = (root / "data" / "train.npz").read_bytes()
    assert run(tmp_path, "gen-data", "--seed", "3") == cli.EXIT_EXISTS
    assert run(tmp_path, "gen-data", "--seed", "3", "--force") == cli.EXIT_OK
    assert (root / "data" / "train.npz").read_bytes() == first


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("TAMNAS_OUT", str(tmp_path / "env"))
    assert cli.main(["gen-data", "--preset", "mini"]) == cli.EXIT_OK
    assert (tmp_path / "env" / "tamnas" / "data" / "train.npz").exists()


def _fake_archive(cfg_hash, n=6):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        g = random_genome(MINI, rng)
        out.append(
            {
                "genome": g.text(),
                "clean_error": 10.0 + i,
                "adv_error": 30.0 - i,
                "params": 40_000 + i,
                "rank": 0,
                "crowding": None,
                "generation": 0,
                "config_hash": cfg_hash,
            }
        )
    return out


def test_analyze_refuses_mixed_hashes(tmp_path):
    root = tmp_path / "tamnas"
    (root / "fronts").mkdir(parents=True)
    current = default_config("mini").digest()
    records = _fake_archive(current)
    records[2]["config_hash"] = "0123456789abcdef"
    (root / "fronts" / "archive.json").write_text(json.dumps(records))
    assert run(tmp_path, "analyze") == cli.EXIT_CONFIG
    assert run(tmp_path, "analyze", "--force") == cli.EXIT_OK
    rows = cli.read_csv(root / "stats" / "blocks.csv")
    assert len(rows) == 6 and all(sum(int(v) for k, v in r.items() if k != "layer") == 6 for r in rows)
    assert cli.csv_hash(root / "stats" / "blocks.csv") == current
    topk = json.loads((root / "stats" / "topk.json").read_text())
    assert topk["genomes"][0] == records[5]["genome"]  # lowest adv_error


def test_jobs_must_be_positive(tmp_path):
    assert run(tmp_path, "gen-data", "--jobs", "0") == cli.EXIT_CONFIG
