"""Strict config parsing and the command-line front end."""

import csv
import json
from pathlib import Path

import pytest

from fedskel import cli
from fedskel.config import config_from_dict, load_config
from fedskel.errors import ConfigError

SMALL_TOML = """
seed = 0
out_dir = "runs"

[data]
profile = "balanced"
base_samples = 24
classes_per_client = 4
sigma = 0.3
rewire_edges = 2
frames = 10

[data.skeleton]
preset = "mini11"

[model]
channels = [4, 6, 8]
feature_dim = 8
temporal_kernel = 3

[federation]
n_clients = 2
rounds = 3
strategy = "fsar"
lr = 0.05
server_momentum = 0.0

[eval]
eval_interval = 1
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def test_defaults():
    cfg = config_from_dict({})
    assert cfg.federation.rounds == 300
    assert cfg.federation.local_epochs == 1
    assert cfg.federation.momentum == 0.9
    assert cfg.federation.weight_decay == 1e-4
    assert (cfg.loss.lambda_ce, cfg.loss.lambda_kd, cfg.loss.lambda_reg) == (1.0, 1.0, 0.1)
    assert cfg.model.channels == (16, 32, 64)
    assert cfg.data.skeleton.preset == "ntu25"


def test_unknown_keys_rejected_with_dotted_path():
    with pytest.raises(ConfigError, match="unknown key 'federation.leraning_rate'"):
        config_from_dict({"federation": {"leraning_rate": 0.1}})
    with pytest.raises(ConfigError, match="unknown key 'typo'"):
        config_from_dict({"typo": 1})
    with pytest.raises(ConfigError, match="data.skeleton"):
        config_from_dict({"data": {"skeleton": {"presett": "ntu25"}}})


def test_auto_resolutions():
    fsar = config_from_dict({"federation": {"strategy": "fsar"}})
    assert fsar.resolved_conv_mode() == "ats"
    assert fsar.resolve_strategy().server_momentum == 0.9
    avg = config_from_dict({"federation": {"strategy": "fedavg"}})
    assert avg.resolved_conv_mode() == "vanilla"
    assert avg.resolve_strategy().server_momentum == 0.0


def test_validation_errors():
    with pytest.raises(ConfigError, match="strategy"):
        config_from_dict({"federation": {"strategy": "gossip"}})
    with pytest.raises(ConfigError, match="profile"):
        config_from_dict({"data": {"profile": "zipf"}})
    with pytest.raises(ConfigError, match="rounds"):
        config_from_dict({"federation": {"rounds": 0}})
    with pytest.raises(ConfigError, match="grain_count"):
        config_from_dict({"loss": {"grain_count": 3}})
    with pytest.raises(ConfigError, match="server_momentum"):
        config_from_dict({"federation": {"server_momentum": "fast"}})


def test_with_overrides_is_pure():
    cfg = config_from_dict({})
    new = cfg.with_overrides(seed=7, strategy="fedbn", rounds=5)
    assert (new.seed, new.federation.strategy, new.federation.rounds) == (7, "fedbn", 5)
    assert (cfg.seed, cfg.federation.strategy, cfg.federation.rounds) == (0, "fsar", 300)
    assert cfg.with_overrides(seed=None).seed == 0
    with pytest.raises(ConfigError):
        cfg.with_overrides(bogus=1)


def test_round_trip_through_dict():
    cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk.toml")
    again = config_from_dict(cfg.to_dict())
    assert again == cfg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[federation\nrounds = 3")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(bad)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _train(small_config, tmp_path, *extra):
    code = cli.main(["train", "--config", str(small_config),
                     "--out", str(tmp_path / "out"), *extra])
    run_dir = tmp_path / "out" / "small_fsar_s0"
    return code, run_dir


def test_cli_train_outputs(small_config, tmp_path):
    code, run_dir = _train(small_config, tmp_path)
    assert code == 0
    for name in ("metrics.csv", "coeffs.csv", "round_log.txt", "config.json"):
        assert (run_dir / name).exists()
    assert (run_dir / "checkpoints" / "server.ckpt").exists()
    with open(run_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rounds = {r["round"] for r in rows}
    assert rounds == {"0", "1", "2"}
    accs = [r for r in rows if r["metric"] == "accuracy"]
    assert accs and all(0.0 <= float(r["value"]) <= 1.0 for r in accs)


def test_cli_rounds_override(small_config, tmp_path):
    code, run_dir = _train(small_config, tmp_path, "--rounds", "1")
    assert code == 0
    with open(run_dir / "metrics.csv", newline="") as fh:
        assert {r["round"] for r in csv.DictReader(fh)} == {"0"}
    # The resolved config records the override; the file on disk is untouched.
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["federation"]["rounds"] == 1
    assert "rounds = 3" in small_config.read_text()


def test_cli_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("unknown_key = 1")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "absent.toml")]) == 2


def test_cli_io_error_exit_code(small_config, tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("not a directory")
    assert cli.main(["train", "--config", str(small_config),
                     "--out", str(blocker / "sub")]) == 4


def test_cli_generate_deterministic(small_config, tmp_path):
    for out in ("a", "b"):
        assert cli.main(["generate", "--config", str(small_config),
                         "--out", str(tmp_path / out)]) == 0
    a_dir, b_dir = tmp_path / "a" / "data", tmp_path / "b" / "data"
    manifest = json.loads((a_dir / "manifest.json").read_text())
    assert [m["client"] for m in manifest] == [0, 1]
    for entry in manifest:
        assert (a_dir / entry["file"]).read_bytes() == (b_dir / entry["file"]).read_bytes()


def test_cli_env_out_honored(small_config, tmp_path, monkeypatch):
    target = tmp_path / "envout"
    monkeypatch.setenv(cli.ENV_OUT, str(target))
    assert cli.main(["train", "--config", str(small_config), "--rounds", "1"]) == 0
    assert (target / "small_fsar_s0" / "metrics.csv").exists()


def test_cli_compare_identical_strategies(small_config, tmp_path):
    code = cli.main(["compare", "--config", str(small_config),
                     "--out", str(tmp_path / "out"),
                     "--strategies", "fedavg", "fedavg"])
    assert code == 0
    with open(tmp_path / "out" / "compare_small_s0" / "compare.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_strategy = {}
    for row in rows:
        by_strategy.setdefault(row["strategy"], {})[row["client"]] = row
    first, second = by_strategy["fedavg#0"], by_strategy["fedavg#1"]
    for cid in first:
        assert first[cid]["final_accuracy"] == second[cid]["final_accuracy"]
        assert float(second[cid]["delta_vs_first"]) == 0.0


def test_cli_analyze_and_eval(small_config, tmp_path):
    code, run_dir = _train(small_config, tmp_path)
    assert code == 0
    assert cli.main(["analyze", "--config", str(small_config),
                     "--out", str(tmp_path / "out")]) == 0
    for b in range(3):
        assert (run_dir / f"cka_block{b}.csv").exists()
    with open(run_dir / "coeff_drift.csv", newline="") as fh:
        drift = list(csv.DictReader(fh))
    assert len(drift) == 2 * 3  # clients x blocks
    assert any(
        abs(float(r["d_alpha"])) + abs(float(r["d_beta"])) + abs(float(r["d_gamma"])) > 0
        for r in drift
    )
    with open(run_dir / "series_accuracy_client0.csv", newline="") as fh:
        series = list(csv.DictReader(fh))
    assert [r["round"] for r in series] == ["0", "1", "2"]

    assert cli.main(["eval", "--config", str(small_config),
                     "--out", str(tmp_path / "out")]) == 0
    with open(run_dir / "eval.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["client"] for r in rows] == ["0", "1"]


def test_cli_analyze_fixed_coeffs_zero_drift(tmp_path):
    fixed_toml = SMALL_TOML.replace(
        'temporal_kernel = 3',
        'temporal_kernel = 3\ncoeff_mode = "fixed"',
    )
    path = tmp_path / "fixed.toml"
    path.write_text(fixed_toml)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
    assert cli.main(["analyze", "--config", str(path), "--out", str(out)]) == 0
    with open(out / "fixed_fsar_s0" / "coeff_drift.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            assert float(row["d_alpha"]) == 0.0
            assert float(row["d_beta"]) == 0.0
            assert float(row["d_gamma"]) == 0.0


def test_cli_analyze_requires_checkpoints(small_config, tmp_path):
    assert cli.main(["analyze", "--config", str(small_config),
                     "--out", str(tmp_path / "empty")]) == 2
