"""Experiment configuration: TOML loading, validation, canonical digest.

The config digest is the 64-bit FNV-1a hash of a canonical key=value string
covering every field that influences the numeric trajectory (and nothing
else: transport and output settings are deliberately excluded so that the
same experiment over loopback and TCP carries the same digest).  Parties
exchange the digest during the handshake and abort on mismatch, and it doubles
as the wire session id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import backend

TOPOLOGIES = ("vanilla", "vertical", "ushaped")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class TrainConfig:
    topology: str = "vertical"
    k: int = 2
    seed: int = 0
    epochs: int = 120
    batch_size: int = 32
    lr: float = 0.01
    client_width: int = 128
    server_width: int = 64


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "archive"
    n: int = 256
    image_size: int = 100
    train_fraction: float = 0.8
    archive_root: Optional[str] = None


@dataclass
class TransportConfig:
    kind: str = "loopback"  # "loopback" or "tcp"
    host: str = "127.0.0.1"
    port: int = 7401


@dataclass
class OutputConfig:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def digest(self) -> int:
        return config_digest(self.train, self.data)


def config_digest(train: TrainConfig, data: DataConfig) -> int:
    """FNV-1a 64 over the canonical config string.

    Format (field order is part of the contract; floats use repr, the
    shortest round-tripping form):

        topology=..;k=..;seed=..;epochs=..;batch_size=..;lr=..;
        client_width=..;server_width=..;source=..;n=..;image_size=..;
        train_fraction=..
    """
    canon = (
        f"topology={train.topology};k={train.k};seed={train.seed};"
        f"epochs={train.epochs};batch_size={train.batch_size};lr={train.lr!r};"
        f"client_width={train.client_width};server_width={train.server_width};"
        f"source={data.source};n={data.n};image_size={data.image_size};"
        f"train_fraction={data.train_fraction!r}"
    )
    return backend.fnv1a64(canon.encode("utf-8"))


def validate(cfg: ExperimentConfig) -> None:
    t, d = cfg.train, cfg.data
    if t.topology not in TOPOLOGIES:
        raise ConfigError(f"train.topology must be one of {TOPOLOGIES}, got {t.topology!r}")
    if t.k < 1:
        raise ConfigError(f"train.k must be >= 1, got {t.k}")
    if t.topology == "vanilla" and t.k != 1:
        raise ConfigError(f"vanilla topology requires k=1, got k={t.k}")
    if t.epochs < 1:
        raise ConfigError(f"train.epochs must be >= 1, got {t.epochs}")
    if t.batch_size < 1:
        raise ConfigError(f"train.batch_size must be >= 1, got {t.batch_size}")
    if not t.lr > 0.0:
        raise ConfigError(f"train.lr must be positive, got {t.lr}")
    if t.client_width < 1 or t.server_width < 1:
        raise ConfigError("layer widths must be >= 1")
    if d.source not in ("synthetic", "archive"):
        raise ConfigError(f"data.source must be synthetic or archive, got {d.source!r}")
    if d.source == "archive" and not d.archive_root:
        raise ConfigError("data.source=archive requires data.archive_root")
    if d.n < 2:
        raise ConfigError(f"data.n must be >= 2, got {d.n}")
    if d.image_size < 8:
        raise ConfigError(f"data.image_size must be >= 8, got {d.image_size}")
    if d.image_size < t.k:
        raise ConfigError(f"cannot cut {d.image_size} columns into {t.k} shards")
    if not 0.0 < d.train_fraction < 1.0:
        raise ConfigError(f"data.train_fraction must be in (0, 1), got {d.train_fraction}")
    n_train = int(d.n * d.train_fraction)
    if n_train == 0 or n_train == d.n:
        raise ConfigError(
            f"split of n={d.n} at fraction={d.train_fraction} leaves an empty side"
        )
    if cfg.transport.kind not in ("loopback", "tcp"):
        raise ConfigError(f"transport.kind must be loopback or tcp, got {cfg.transport.kind!r}")
    # Port 0 means "let the OS pick" — usable only when one process hosts
    # every party; separate limb/server processes need a concrete port.
    if not 0 <= cfg.transport.port < 65536:
        raise ConfigError(f"transport.port out of range: {cfg.transport.port}")


_SECTIONS = {
    "train": (TrainConfig, ("topology", "k", "seed", "epochs", "batch_size", "lr",
                            "client_width", "server_width")),
    "data": (DataConfig, ("source", "n", "image_size", "train_fraction", "archive_root")),
    "transport": (TransportConfig, ("kind", "host", "port")),
    "output": (OutputConfig, ("dir",)),
}

_FIELD_TYPES = {
    ("train", "topology"): str,
    ("train", "k"): int,
    ("train", "seed"): int,
    ("train", "epochs"): int,
    ("train", "batch_size"): int,
    ("train", "lr"): (int, float),
    ("train", "client_width"): int,
    ("train", "server_width"): int,
    ("data", "source"): str,
    ("data", "n"): int,
    ("data", "image_size"): int,
    ("data", "train_fraction"): (int, float),
    ("data", "archive_root"): str,
    ("transport", "kind"): str,
    ("transport", "host"): str,
    ("transport", "port"): int,
    ("output", "dir"): str,
}


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config.  Unknown keys are errors."""
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    cfg = ExperimentConfig()
    for section, table in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls, keys = _SECTIONS[section]
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        target = getattr(cfg, section)
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            want = _FIELD_TYPES[(section, key)]
            if not isinstance(value, want) or isinstance(value, bool):
                raise ConfigError(f"{section}.{key} has wrong type {type(value).__name__}")
            if want == (int, float):
                value = float(value)
            setattr(target, key, value)
    validate(cfg)
    return cfg
