"""TOML config loading, digests, and the command-line surface."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from splitlimb.cli import main
from splitlimb.config import (
    ConfigError,
    DataConfig,
    ExperimentConfig,
    TrainConfig,
    config_digest,
    load_config,
    validate,
)
from splitlimb.trace import TrainTrace

GOOD_TOML = """
[train]
topology = "vertical"
k = 2
seed = 3
epochs = 2
batch_size = 16
lr = 0.05
client_width = 8
server_width = 6

[data]
source = "synthetic"
n = 64
image_size = 16
train_fraction = 0.8

[output]
dir = "{out}"
"""


@pytest.fixture
def good_config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(GOOD_TOML.format(out=tmp_path / "run"))
    return path


def test_load_config_round_trip(good_config):
    cfg = load_config(good_config)
    assert cfg.train.topology == "vertical"
    assert cfg.train.lr == 0.05
    assert cfg.data.n == 64
    validate(cfg)


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(path)


def test_load_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[optimizer]\nname = \"adam\"\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(path)


def test_load_config_rejects_wrong_types(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\nk = \"two\"\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[train]\nk = true\n")  # bool is not an int here
    with pytest.raises(ConfigError):
        load_config(path)


def test_load_config_coerces_int_lr(tmp_path):
    path = tmp_path / "ok.toml"
    path.write_text("[train]\nlr = 1\n")
    assert load_config(path).train.lr == 1.0


def test_validate_catalog():
    bad = [
        dict(topology="ring"),
        dict(topology="vanilla", k=2),
        dict(k=0),
        dict(epochs=0),
        dict(batch_size=0),
        dict(lr=0.0),
        dict(lr=-1.0),
        dict(client_width=0),
    ]
    for overrides in bad:
        cfg = ExperimentConfig()
        cfg.train = TrainConfig(**overrides)
        with pytest.raises(ConfigError):
            validate(cfg)
    cfg = ExperimentConfig()
    cfg.data = DataConfig(source="archive", archive_root=None)
    with pytest.raises(ConfigError):
        validate(cfg)
    cfg = ExperimentConfig()
    cfg.data = DataConfig(n=100, image_size=4)  # below minimum side
    with pytest.raises(ConfigError):
        validate(cfg)


def test_digest_is_stable_and_sensitive():
    t, d = TrainConfig(), DataConfig()
    base = config_digest(t, d)
    assert base == config_digest(TrainConfig(), DataConfig())
    assert config_digest(TrainConfig(seed=1), d) != base
    assert config_digest(TrainConfig(lr=0.010000001), d) != base
    assert config_digest(t, DataConfig(n=257)) != base


def test_digest_ignores_transport_and_output():
    cfg_a = ExperimentConfig()
    cfg_b = ExperimentConfig()
    cfg_b.transport.kind = "tcp"
    cfg_b.transport.port = 9999
    cfg_b.output.dir = "elsewhere"
    assert cfg_a.digest == cfg_b.digest


# -- CLI ------------------------------------------------------------------------


def test_cli_train_evaluate_compare(good_config, tmp_path, capsys):
    assert main(["train", "--config", str(good_config)]) == 0
    out = capsys.readouterr().out
    assert "trained 2 epochs" in out
    run_dir = tmp_path / "run"
    assert (run_dir / "trace.json").exists()
    assert (run_dir / "metrics.csv").exists()
    assert (run_dir / "params.npz").exists()

    assert main(["evaluate", "--config", str(good_config)]) == 0
    out = capsys.readouterr().out
    assert "train: loss=" in out and "test: loss=" in out

    assert main(["compare-oracle", "--config", str(good_config)]) == 0
    assert "match exactly" in capsys.readouterr().out


def test_cli_trace_json_is_valid(good_config, tmp_path):
    main(["train", "--config", str(good_config)])
    raw = json.loads((tmp_path / "run" / "trace.json").read_text())
    assert raw["topology"] == "vertical"
    assert len(raw["steps"]) == 2 * 4  # 51 train ids -> 4 batches of 16
    trace = TrainTrace.load(tmp_path / "run" / "trace.json")
    assert trace.k == 2


def test_cli_metrics_csv_header(good_config, tmp_path):
    main(["train", "--config", str(good_config)])
    lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy"
    assert len(lines) == 1 + 2 * 2


def test_cli_synth_then_archive_train_matches_synthetic(good_config, tmp_path, capsys):
    """Archive round-trip must not change training: the quantized pixels are
    the dataset, wherever they are stored."""
    assert main([
        "synth", "--out", str(tmp_path / "shards"),
        "--n", "64", "--image-size", "16", "--seed", "3", "--k", "2",
    ]) == 0
    arch_toml = tmp_path / "arch.toml"
    arch_toml.write_text(
        GOOD_TOML.format(out=tmp_path / "run_arch").replace(
            'source = "synthetic"',
            f'source = "archive"\narchive_root = "{tmp_path / "shards"}"',
        )
    )
    assert main(["train", "--config", str(good_config)]) == 0
    assert main(["train", "--config", str(arch_toml)]) == 0
    capsys.readouterr()
    synth_trace = TrainTrace.load(tmp_path / "run" / "trace.json")
    arch_trace = TrainTrace.load(tmp_path / "run_arch" / "trace.json")
    # digests differ (source field) but the trajectories must be identical
    assert [s.loss for s in synth_trace.steps] == [s.loss for s in arch_trace.steps]
    assert [
        (m.loss, m.correct) for m in synth_trace.metrics
    ] == [(m.loss, m.correct) for m in arch_trace.metrics]
    assert [c.groups for c in synth_trace.checksums] == [c.groups for c in arch_trace.checksums]


def test_cli_bad_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[train]\ntopology = \"ring\"\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2


def test_cli_role_limb_requires_index(good_config, tmp_path, capsys):
    tcp_toml = tmp_path / "tcp.toml"
    tcp_toml.write_text(
        GOOD_TOML.format(out=tmp_path / "runx")
        + "\n[transport]\nkind = \"tcp\"\nport = 7499\n"
    )
    assert main(["train", "--config", str(tcp_toml), "--role", "limb"]) == 2
    assert "limb-index" in capsys.readouterr().err


def test_cli_role_needs_tcp(good_config, capsys):
    assert main(["train", "--config", str(good_config), "--role", "server"]) == 2


def test_cli_evaluate_without_snapshot_exit_2(good_config, tmp_path, capsys):
    assert main(["evaluate", "--config", str(good_config), "--params", str(tmp_path)]) == 2
    assert "missing arrays" in capsys.readouterr().err


def test_backend_env_var_selects_numpy_and_matches(good_config, tmp_path):
    """A subprocess forced onto the numpy fallback must produce the
    byte-identical trace file the numba path wrote."""
    main(["train", "--config", str(good_config)])
    baseline = (tmp_path / "run" / "trace.json").read_bytes()
    env = dict(os.environ, SPLITLIMB_BACKEND="numpy")
    out2 = tmp_path / "run_np"
    r = subprocess.run(
        [sys.executable, "-m", "splitlimb.cli", "train",
         "--config", str(good_config), "--out", str(out2)],
        capture_output=True, text=True, env=env, timeout=300,
    )
    assert r.returncode == 0, r.stderr
    assert (out2 / "trace.json").read_bytes() == baseline


def test_cli_tcp_subprocess_roles(tmp_path):
    """Server and limbs as real OS processes over localhost TCP."""
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    toml = tmp_path / "tcp.toml"
    toml.write_text(
        GOOD_TOML.format(out=tmp_path / "srv")
        + f"\n[transport]\nkind = \"tcp\"\nport = {port}\n"
    )
    cmd = [sys.executable, "-m", "splitlimb.cli", "train", "--config", str(toml)]
    server = subprocess.Popen(
        cmd + ["--role", "server"], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True
    )
    limbs = [
        subprocess.Popen(
            cmd + ["--role", "limb", "--limb-index", str(i), "--out", str(tmp_path / f"l{i}")],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        for i in range(2)
    ]
    procs = [server] + limbs
    for p in procs:
        out, err = p.communicate(timeout=300)
        assert p.returncode == 0, f"{p.args}: {err}"
    assert (tmp_path / "srv" / "trace.json").exists()
    assert (tmp_path / "l0" / "limb_0.npz").exists()
    assert (tmp_path / "l1" / "limb_1.npz").exists()
    # the distributed run reproduces the single-process trajectory
    from splitlimb.limbs import run_split_training

    cfg = load_config(toml)
    cfg.transport.kind = "loopback"
    validate(cfg)
    ref_trace, _, _ = run_split_training(cfg)
    got = TrainTrace.load(tmp_path / "srv" / "trace.json")
    assert got == ref_trace
