"""Command-line entry point.

Subcommands:

* ``synth``           generate a synthetic dataset as per-limb shard archives
* ``partition``       shard a directory of images into per-limb archives
* ``train``           run a training session (all parties, or one role)
* ``evaluate``        offline metrics from saved parameters
* ``compare-oracle``  certify a split run against the monolithic trainer

Exit codes: 0 success, 2 invalid config or data, 3 protocol violation,
4 transport failure, 5 oracle mismatch.  ``SPLITLIMB_LOG`` sets the log
level (debug/info/warning/error); ``SPLITLIMB_BACKEND`` picks the compute
backend (numba/numpy).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, validate
from .datakit import build_shard_sets, partition_images, synth_dataset, write_shard_archive
from .limbs import (
    LimbResult,
    RunPlan,
    ServerResult,
    evaluate_assembled,
    load_limb_shard_set,
    load_shard_sets,
    run_limb,
    run_server,
    run_split_training,
)
from .numerics import DenseLayer, NumericsError
from .oracle import compare_traces, train_monolithic
from .trace import TrainTrace
from .transport import TcpListener, TransportError, connect_tcp
from .wire import ProtocolViolation, WireError

log = logging.getLogger("splitlimb")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_TRANSPORT = 4
EXIT_ORACLE = 5


def _setup_logging() -> None:
    level = os.environ.get("SPLITLIMB_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load(path: str) -> ExperimentConfig:
    cfg = load_config(path)
    validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Parameter snapshots


def _limb_arrays(r: LimbResult) -> dict:
    out = {f"limb_{r.limb_index}_w": r.layer.w, f"limb_{r.limb_index}_b": r.layer.b}
    if r.head is not None:
        out["head_w"] = r.head.w
        out["head_b"] = r.head.b
    return out


def _server_arrays(r: ServerResult) -> dict:
    out = {"hidden_w": r.hidden.w, "hidden_b": r.hidden.b}
    if r.head is not None:
        out["head_w"] = r.head.w
        out["head_b"] = r.head.b
    return out


def load_model_params(params_dir: Path, k: int) -> tuple[list[DenseLayer], DenseLayer, DenseLayer]:
    """Reassemble all layers from ``params.npz`` or per-role snapshot files."""
    arrays: dict[str, np.ndarray] = {}
    for f in sorted(params_dir.glob("*.npz")):
        with np.load(f) as z:
            arrays.update({name: z[name] for name in z.files})
    missing = [
        name
        for name in [f"limb_{i}_{p}" for i in range(k) for p in "wb"]
        + ["hidden_w", "hidden_b", "head_w", "head_b"]
        if name not in arrays
    ]
    if missing:
        raise ConfigError(f"snapshot in {params_dir} is missing arrays: {missing}")
    limbs = [DenseLayer(arrays[f"limb_{i}_w"], arrays[f"limb_{i}_b"]) for i in range(k)]
    hidden = DenseLayer(arrays["hidden_w"], arrays["hidden_b"])
    head = DenseLayer(arrays["head_w"], arrays["head_b"])
    return limbs, hidden, head


def _write_run_outputs(out_dir: Path, trace: TrainTrace, arrays: dict | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    trace.save(out_dir / "trace.json")
    trace.write_metrics_csv(out_dir / "metrics.csv")
    if arrays:
        np.savez(out_dir / "params.npz", **arrays)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    images, labels = synth_dataset(args.n, args.image_size, args.seed)
    sets = build_shard_sets(images, labels, args.k)
    out = Path(args.out)
    for sset in sets:
        write_shard_archive(out / f"limb_{sset.spec.limb_index}", sset)
    print(f"wrote {args.n} samples as {args.k} shard archives under {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    n = partition_images(args.images, args.labels, args.out, args.k, args.image_size)
    print(f"partitioned {n} images into {args.k} shard archives under {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args.config)
    if args.out:
        cfg.output.dir = args.out
    out_dir = Path(cfg.output.dir)

    if args.role == "all":
        trace, server, limb_results = run_split_training(cfg)
        arrays = _server_arrays(server)
        for r in limb_results:
            arrays.update(_limb_arrays(r))
        _write_run_outputs(out_dir, trace, arrays)
        last = trace.metrics[-1]
        print(
            f"trained {cfg.train.epochs} epochs ({cfg.train.topology}, k={cfg.train.k}); "
            f"final test accuracy {last.correct / last.total:.4f}"
        )
        print(f"outputs in {out_dir}")
        return EXIT_OK

    if cfg.transport.kind != "tcp":
        raise ConfigError(f"--role {args.role} needs transport.kind = \"tcp\"")
    if cfg.transport.port == 0:
        raise ConfigError("role-split runs need a fixed transport.port")

    if args.role == "server":
        listener = TcpListener(cfg.transport.host, cfg.transport.port)
        try:
            channels = [listener.accept(args.wait) for _ in range(cfg.train.k)]
        finally:
            listener.close()
        server = run_server(cfg.train, cfg.data, channels)
        _write_run_outputs(out_dir, server.trace, None)
        np.savez(out_dir / "server.npz", **_server_arrays(server))
        last = server.trace.metrics[-1]
        print(f"server done; final test accuracy {last.correct / last.total:.4f}")
        return EXIT_OK

    # role == "limb"
    if args.limb_index is None:
        raise ConfigError("--role limb needs --limb-index")
    if not 0 <= args.limb_index < cfg.train.k:
        raise ConfigError(f"--limb-index {args.limb_index} out of range for k={cfg.train.k}")
    sset = load_limb_shard_set(cfg, args.limb_index)
    channel = connect_tcp(cfg.transport.host, cfg.transport.port, retry_for=args.wait)
    result = run_limb(cfg.train, cfg.data, sset, channel)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / f"limb_{args.limb_index}.npz", **_limb_arrays(result))
    print(f"limb {args.limb_index} done after {result.epochs_seen} epochs")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args.config)
    params_dir = Path(args.params if args.params else cfg.output.dir)
    limbs, hidden, head = load_model_params(params_dir, cfg.train.k)
    shard_sets = load_shard_sets(cfg)
    labels = shard_sets[0].labels
    if labels is None:
        raise ConfigError("dataset has no labels to evaluate against")
    plan = RunPlan.from_config(cfg.train, cfg.data)
    for name, ids in (("train", plan.train_ids), ("test", plan.test_ids)):
        if args.split not in ("all", name):
            continue
        loss, correct, total = evaluate_assembled(
            limbs, hidden, head, shard_sets, labels, ids, cfg.train.batch_size
        )
        print(f"{name}: loss={loss:.6f} accuracy={correct / total:.4f} ({correct}/{total})")
    return EXIT_OK


def cmd_compare_oracle(args) -> int:
    cfg = _load(args.config)
    shard_sets = load_shard_sets(cfg)
    trace_split, _, _ = run_split_training(cfg, shard_sets)
    trace_mono, _ = train_monolithic(cfg, shard_sets)
    if args.save_traces:
        out = Path(args.save_traces)
        out.mkdir(parents=True, exist_ok=True)
        trace_split.save(out / "trace_split.json")
        trace_mono.save(out / "trace_monolithic.json")
    divergence = compare_traces(trace_split, trace_mono, tol=args.tol)
    if divergence is None:
        print(
            f"split and monolithic traces match exactly "
            f"({len(trace_split.steps)} steps, {cfg.train.epochs} epochs, k={cfg.train.k})"
        )
        return EXIT_OK
    print(f"oracle mismatch at {divergence}", file=sys.stderr)
    return EXIT_ORACLE


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitlimb", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic shard-archive dataset")
    sp.add_argument("--out", required=True, help="directory for the limb_<i> archives")
    sp.add_argument("--n", type=int, default=256, help="number of samples")
    sp.add_argument("--image-size", type=int, default=100, help="square image side")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--k", type=int, default=2, help="number of vertical shards")
    sp.set_defaults(fn=cmd_synth)

    pp = sub.add_parser("partition", help="shard a directory of PGM/PPM images")
    pp.add_argument("--images", required=True, help="directory of input images")
    pp.add_argument("--labels", required=True, help="TSV of filename<TAB>label")
    pp.add_argument("--out", required=True)
    pp.add_argument("--k", type=int, required=True)
    pp.add_argument("--image-size", type=int, default=100)
    pp.set_defaults(fn=cmd_partition)

    tp = sub.add_parser("train", help="run a training session")
    tp.add_argument("--config", required=True, help="TOML experiment config")
    tp.add_argument("--role", choices=("all", "server", "limb"), default="all")
    tp.add_argument("--limb-index", type=int, default=None)
    tp.add_argument("--out", default=None, help="override output.dir")
    tp.add_argument(
        "--wait", type=float, default=30.0, help="seconds to wait for peers (tcp roles)"
    )
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("evaluate", help="offline metrics from saved parameters")
    ep.add_argument("--config", required=True)
    ep.add_argument("--params", default=None, help="snapshot directory (default: output.dir)")
    ep.add_argument("--split", choices=("train", "test", "all"), default="all")
    ep.set_defaults(fn=cmd_evaluate)

    cp = sub.add_parser("compare-oracle", help="certify split vs monolithic equivalence")
    cp.add_argument("--config", required=True)
    cp.add_argument("--tol", type=float, default=0.0)
    cp.add_argument("--save-traces", default=None, help="directory to dump both traces")
    cp.set_defaults(fn=cmd_compare_oracle)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, NumericsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolViolation, WireError) as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
