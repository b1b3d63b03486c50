"""Training traces: everything two runs must agree on to count as identical.

A trace records, per training step, the float32 batch loss; per epoch, the
train/test metrics and the checksum of every parameter group.  Float values
are serialized both as their repr and as the hex of their float32 bit
pattern — the bit pattern is authoritative on load, so a JSON round trip is
exact and trace comparison is meaningful at tolerance zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path


def f32_hex(v: float) -> str:
    return struct.pack("<f", v).hex()


def f32_from_hex(h: str) -> float:
    return struct.unpack("<f", bytes.fromhex(h))[0]


@dataclass
class StepLoss:
    epoch: int
    batch: int
    loss: float  # exact float32 value


@dataclass
class MetricRow:
    epoch: int
    split: str  # "train" or "test"
    loss: float  # exact float32 value
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


@dataclass
class EpochChecksums:
    epoch: int
    groups: dict  # name -> uint64 checksum, insertion order pinned


@dataclass
class TrainTrace:
    topology: str
    k: int
    config_digest: int
    steps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    checksums: list = field(default_factory=list)

    def add_step(self, epoch: int, batch: int, loss: float) -> None:
        self.steps.append(StepLoss(epoch, batch, loss))

    def add_metrics(self, epoch: int, split: str, loss: float, correct: int, total: int) -> None:
        self.metrics.append(MetricRow(epoch, split, loss, correct, total))

    def add_checksums(self, epoch: int, groups: dict) -> None:
        self.checksums.append(EpochChecksums(epoch, dict(groups)))

    def to_json_dict(self) -> dict:
        return {
            "topology": self.topology,
            "k": self.k,
            "config_digest": f"{self.config_digest:#018x}",
            "steps": [
                {"epoch": s.epoch, "batch": s.batch, "loss": s.loss, "loss_hex": f32_hex(s.loss)}
                for s in self.steps
            ],
            "metrics": [
                {
                    "epoch": m.epoch,
                    "split": m.split,
                    "loss": m.loss,
                    "loss_hex": f32_hex(m.loss),
                    "correct": m.correct,
                    "total": m.total,
                }
                for m in self.metrics
            ],
            "checksums": [
                {"epoch": c.epoch, "groups": {k: f"{v:#018x}" for k, v in c.groups.items()}}
                for c in self.checksums
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainTrace":
        trace = cls(d["topology"], d["k"], int(d["config_digest"], 16))
        for s in d["steps"]:
            trace.steps.append(StepLoss(s["epoch"], s["batch"], f32_from_hex(s["loss_hex"])))
        for m in d["metrics"]:
            trace.metrics.append(
                MetricRow(m["epoch"], m["split"], f32_from_hex(m["loss_hex"]),
                          m["correct"], m["total"])
            )
        for c in d["checksums"]:
            trace.checksums.append(
                EpochChecksums(c["epoch"], {k: int(v, 16) for k, v in c["groups"].items()})
            )
        return trace

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainTrace":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_metrics_csv(self, path) -> None:
        lines = ["epoch,split,loss,accuracy"]
        for m in self.metrics:
            lines.append(f"{m.epoch},{m.split},{m.loss!r},{m.accuracy:.6f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
