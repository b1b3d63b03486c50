"""Split-learning parties: limb clients, the server, and the run orchestrator.

Determinism is the organizing principle.  Every party derives its random
streams from the shared seed by purpose (`derive_seed`), computes the same
train/test split and the same per-epoch permutation locally, and the server
polls limbs in ascending index order — so the merged message sequence, the
training trajectory, and the resulting `TrainTrace` are identical for any
transport and for any physical placement of the layers.

Topologies:

* ``vanilla``: one limb holds whole images (k = 1).
* ``vertical``: k limbs each hold a vertical strip; limb 0 also holds the
  labels and streams them to the server batch by batch.
* ``ushaped``: like vertical, but labels never leave limb 0 — the server
  returns its hidden activations to limb 0, which owns the head layer,
  computes the loss, and returns the gradient.

The model is the same in all three: per-limb dense+ReLU into a concatenated
feature vector, then dense+ReLU ("hidden"), then dense+sigmoid ("head") with
binary cross-entropy, plain SGD, one update per batch.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import wire
from .config import DataConfig, ExperimentConfig, TrainConfig, config_digest
from .datakit import LabeledShardSet, build_shard_sets, read_shard_archive, synth_dataset, split_train_test
from .numerics import (
    DenseLayer,
    bce_loss,
    dense_backward,
    dense_forward,
    init_dense,
    param_checksum,
    relu,
    relu_backward,
    sgd_step,
    sigmoid,
    sigmoid_backward,
)
from .rng import Rng, derive_seed
from .trace import TrainTrace
from .transport import DEFAULT_TIMEOUT, TcpListener, connect_tcp, loopback_pair
from .wire import (
    BatchMeta,
    EndEpoch,
    EndSession,
    HeadActivations,
    HeadGrad,
    Hello,
    Labels,
    Metrics,
    PHASE_EVAL_TEST,
    PHASE_EVAL_TRAIN,
    PHASE_TRAIN,
    ProtocolViolation,
    ROLE_LIMB,
    ROLE_SERVER,
    SERVER_INDEX,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SessionState,
    Smashed,
    SmashedGrad,
    TOPOLOGY_IDS,
)


log = logging.getLogger(__name__)


def batch_slices(total: int, batch_size: int) -> list[tuple[int, int]]:
    """Consecutive [start, end) slices; the final partial batch is kept."""
    return [(s, min(s + batch_size, total)) for s in range(0, total, batch_size)]


def epoch_order(seed: int, epoch: int, train_ids: np.ndarray) -> np.ndarray:
    """The shared shuffle of the training ids for one epoch."""
    perm = Rng(derive_seed(seed, "perm", epoch)).permutation(train_ids.shape[0])
    return train_ids[perm]


@dataclass
class RunPlan:
    """Split and batch layout every party derives identically from config."""

    train_ids: np.ndarray
    test_ids: np.ndarray
    batch_size: int

    @classmethod
    def from_config(cls, tcfg: TrainConfig, dcfg: DataConfig) -> "RunPlan":
        train_ids, test_ids = split_train_test(dcfg.n, dcfg.train_fraction, tcfg.seed)
        return cls(train_ids, test_ids, tcfg.batch_size)

    @property
    def train_batches(self) -> int:
        return math.ceil(self.train_ids.shape[0] / self.batch_size)

    @property
    def test_batches(self) -> int:
        return math.ceil(self.test_ids.shape[0] / self.batch_size)


class MetricAccumulator:
    """Canonical evaluation bookkeeping, identical at every party.

    The running loss total is kept in float32: each batch contributes
    float32(batch_mean_loss) * float32(rows), added in batch order; the final
    loss is total / float32(count).  Correctness counts are exact integers;
    a prediction of exactly 0.5 classifies as class 1.
    """

    def __init__(self):
        self.loss_total = np.float32(0.0)
        self.correct = 0
        self.count = 0

    def add_batch(self, batch_loss: float, pred: np.ndarray, y: np.ndarray) -> None:
        rows = pred.shape[0]
        self.loss_total = self.loss_total + np.float32(batch_loss) * np.float32(rows)
        self.correct += int(np.sum((pred >= 0.5) == (y >= 0.5)))
        self.count += rows

    @property
    def loss(self) -> float:
        return float(self.loss_total / np.float32(self.count))


def _recv(channel, expect_session: int, timeout: float):
    """Receive and decode one message, checking the frame's session id."""
    data = channel.recv_bytes(timeout)
    frame, end = wire.decode_frame(data)
    if end != len(data):
        raise wire.LengthMismatch(f"channel delivered {len(data) - end} trailing bytes")
    if frame.session_id != expect_session:
        raise ProtocolViolation(
            "session-mismatch", f"{frame.session_id:#018x} != {expect_session:#018x}"
        )
    return wire.decode_message(frame)


def _expect(msg, cls, where: str):
    if not isinstance(msg, cls):
        raise ProtocolViolation(
            "unexpected-message", f"{where}: got {type(msg).__name__}, expected {cls.__name__}"
        )
    return msg


# ---------------------------------------------------------------------------
# Limb


@dataclass
class LimbResult:
    limb_index: int
    layer: DenseLayer
    head: Optional[DenseLayer] = None
    epochs_seen: int = 0


def run_limb(
    tcfg: TrainConfig,
    dcfg: DataConfig,
    sset: LabeledShardSet,
    channel,
    recv_timeout: float = DEFAULT_TIMEOUT,
) -> LimbResult:
    """Drive one limb client over an established channel until EndSession."""
    i = sset.spec.limb_index
    ushaped = tcfg.topology == "ushaped"
    holder = i == 0
    digest = config_digest(tcfg, dcfg)
    session = digest

    if not np.array_equal(sset.sample_ids, np.arange(sset.n, dtype=np.int64)):
        raise ValueError(f"limb {i}: sample ids are not the ordinals 0..{sset.n - 1}")
    if holder and sset.labels is None:
        raise ValueError("limb 0 must hold the labels")

    layer = init_dense(Rng(derive_seed(tcfg.seed, "limb", i)), sset.shards.shape[1], tcfg.client_width)
    head = None
    if ushaped and holder:
        head = init_dense(Rng(derive_seed(tcfg.seed, "head")), tcfg.server_width, 1)

    plan = RunPlan.from_config(tcfg, dcfg) if holder else None
    labels_col = sset.labels.reshape(-1, 1) if sset.labels is not None else None

    channel.send_bytes(
        wire.encode_frame(session, Hello(ROLE_LIMB, i, TOPOLOGY_IDS[tcfg.topology], tcfg.k, digest))
    )
    hello = _expect(_recv(channel, session, recv_timeout), Hello, f"limb {i} handshake")
    if hello.role != ROLE_SERVER or hello.limb_index != SERVER_INDEX:
        raise ProtocolViolation("bad-hello", f"limb {i}: peer is not the server")
    if hello.config_digest != digest:
        raise ProtocolViolation("digest-mismatch", f"limb {i}: server digest differs")

    epoch = 0
    pending: Optional[tuple] = None  # (cache, pre_act) of the current train batch
    batch_ids: Optional[np.ndarray] = None
    eval_acc: Optional[MetricAccumulator] = None
    result = LimbResult(i, layer, head)

    while True:
        msg = _recv(channel, session, recv_timeout)
        if isinstance(msg, BatchMeta):
            ids = msg.sample_ids.astype(np.int64)
            x = sset.shards[ids]
            z, cache = dense_forward(layer, x)
            a = relu(z)
            channel.send_bytes(
                wire.encode_frame(session, Smashed(msg.phase, msg.epoch, msg.batch_index, i, a))
            )
            batch_ids = ids
            pending = (cache, z) if msg.phase == PHASE_TRAIN else None
            if holder and not ushaped:
                channel.send_bytes(
                    wire.encode_frame(
                        session,
                        Labels(msg.phase, msg.epoch, msg.batch_index, sset.labels[ids]),
                    )
                )
            if ushaped and holder and msg.phase != PHASE_TRAIN and msg.batch_index == 0:
                eval_acc = MetricAccumulator()
        elif isinstance(msg, SmashedGrad):
            if pending is None:
                raise ProtocolViolation("unexpected-message", f"limb {i}: gradient without batch")
            cache, z = pending
            g = relu_backward(msg.data, z)
            _, gw, gb = dense_backward(layer, cache, g)
            sgd_step(layer, gw, gb, tcfg.lr, f"limb_{i}")
            pending = None
        elif isinstance(msg, HeadActivations):
            if not (ushaped and holder):
                raise ProtocolViolation("head-forbidden", f"limb {i} got HeadActivations")
            y = labels_col[batch_ids]
            zo, co = dense_forward(head, msg.data)
            pred = sigmoid(zo)
            loss, gpred = bce_loss(pred, y)
            if msg.phase == PHASE_TRAIN:
                gzo = sigmoid_backward(pred, gpred)
                gah, gwo, gbo = dense_backward(head, co, gzo)
                sgd_step(head, gwo, gbo, tcfg.lr, "head")
                channel.send_bytes(
                    wire.encode_frame(
                        session, HeadGrad(msg.phase, msg.epoch, msg.batch_index, 0, gah, loss)
                    )
                )
            else:
                eval_acc.add_batch(loss, pred, y)
                total = plan.train_batches if msg.phase == PHASE_EVAL_TRAIN else plan.test_batches
                if msg.batch_index == total - 1:
                    split = SPLIT_TRAIN if msg.phase == PHASE_EVAL_TRAIN else SPLIT_TEST
                    channel.send_bytes(
                        wire.encode_frame(
                            session,
                            Metrics(msg.epoch, split, eval_acc.loss, eval_acc.correct, eval_acc.count),
                        )
                    )
                    eval_acc = None
        elif isinstance(msg, EndEpoch):
            groups = [(f"limb_{i}", param_checksum(layer))]
            if ushaped and holder:
                groups.append(("head", param_checksum(head)))
            channel.send_bytes(
                wire.encode_frame(session, EndEpoch(msg.epoch, i, tuple(groups)))
            )
            epoch += 1
            result.epochs_seen = epoch
        elif isinstance(msg, EndSession):
            break
        else:
            raise ProtocolViolation(
                "unexpected-message", f"limb {i}: {type(msg).__name__}"
            )
    channel.close()
    return result


# ---------------------------------------------------------------------------
# Server


@dataclass
class ServerResult:
    trace: TrainTrace
    hidden: DenseLayer
    head: Optional[DenseLayer]
    limb_checksums: dict = field(default_factory=dict)  # final epoch, by group
    messages: Optional[list] = None  # merged transcript when captured


def run_server(
    tcfg: TrainConfig,
    dcfg: DataConfig,
    channels: list,
    capture_messages: bool = False,
    recv_timeout: float = DEFAULT_TIMEOUT,
) -> ServerResult:
    """Drive the server side of a session over k established channels.

    Channels may arrive in any order (TCP accept order is nondeterministic);
    the handshake hellos identify which limb is on which channel.  After the
    handshake every exchange follows ascending limb index, which pins the
    merged message order this function also feeds to its `SessionState`.
    """
    ushaped = tcfg.topology == "ushaped"
    digest = config_digest(tcfg, dcfg)
    session = digest
    k = tcfg.k
    if len(channels) != k:
        raise ValueError(f"server needs {k} channels, got {len(channels)}")
    if tcfg.epochs < 1:
        raise ValueError("a session runs at least one epoch")

    state = SessionState(tcfg.topology, k, digest)
    captured: Optional[list] = [] if capture_messages else None

    def feed(msg):
        state.feed(msg)
        if captured is not None:
            captured.append(msg)

    # Handshake: read one Hello per channel, map limbs, then replay the
    # hellos into the automaton in canonical (ascending, server-last) order.
    by_limb: dict[int, object] = {}
    hellos: dict[int, Hello] = {}
    for ch in channels:
        msg = _expect(_recv(ch, session, recv_timeout), Hello, "server handshake")
        if msg.role != ROLE_LIMB:
            raise ProtocolViolation("bad-hello", "server got a non-limb hello")
        if msg.limb_index in by_limb:
            raise ProtocolViolation("duplicate-hello", f"limb {msg.limb_index}")
        by_limb[msg.limb_index] = ch
        hellos[msg.limb_index] = msg
    missing = [i for i in range(k) if i not in by_limb]
    if missing:
        raise ProtocolViolation("bad-hello", f"no hello from limbs {missing}")
    for i in range(k):
        feed(hellos[i])
    own_hello = Hello(ROLE_SERVER, SERVER_INDEX, TOPOLOGY_IDS[tcfg.topology], k, digest)
    feed(own_hello)
    hello_frame = wire.encode_frame(session, own_hello)
    for i in range(k):
        by_limb[i].send_bytes(hello_frame)

    hidden = init_dense(
        Rng(derive_seed(tcfg.seed, "hidden")), k * tcfg.client_width, tcfg.server_width
    )
    head = None
    if not ushaped:
        head = init_dense(Rng(derive_seed(tcfg.seed, "head")), tcfg.server_width, 1)

    plan = RunPlan.from_config(tcfg, dcfg)
    trace = TrainTrace(tcfg.topology, k, digest)

    def broadcast(msg):
        feed(msg)
        data = wire.encode_frame(session, msg)
        for i in range(k):
            by_limb[i].send_bytes(data)

    def send_to(limb: int, msg):
        feed(msg)
        by_limb[limb].send_bytes(wire.encode_frame(session, msg))

    def recv_from(limb: int, cls):
        msg = _expect(_recv(by_limb[limb], session, recv_timeout), cls, f"server<-limb{limb}")
        feed(msg)
        return msg

    def gather_smashed(phase: int, epoch: int, bidx: int, rows: int) -> np.ndarray:
        parts = []
        for i in range(k):
            msg = recv_from(i, Smashed)
            if (msg.phase, msg.epoch, msg.batch_index, msg.limb) != (phase, epoch, bidx, i):
                raise ProtocolViolation(
                    "batch-sequence", f"smashed from limb {i} does not match current step"
                )
            parts.append(msg.data)
        return np.concatenate(parts, axis=1)

    def forward_hidden(x: np.ndarray):
        zh, ch = dense_forward(hidden, x)
        return relu(zh), zh, ch

    for epoch in range(tcfg.epochs):
        order = epoch_order(tcfg.seed, epoch, plan.train_ids)
        for bidx, (s, e) in enumerate(batch_slices(order.shape[0], tcfg.batch_size)):
            ids = order[s:e]
            broadcast(BatchMeta(PHASE_TRAIN, epoch, bidx, ids.astype(np.uint64)))
            x = gather_smashed(PHASE_TRAIN, epoch, bidx, e - s)
            if ushaped:
                ah, zh, ch = forward_hidden(x)
                send_to(0, HeadActivations(PHASE_TRAIN, epoch, bidx, SERVER_INDEX, ah))
                hg = recv_from(0, HeadGrad)
                loss, gah = hg.loss, hg.data
            else:
                lab = recv_from(0, Labels)
                y = lab.labels.reshape(-1, 1)
                ah, zh, ch = forward_hidden(x)
                zo, co = dense_forward(head, ah)
                pred = sigmoid(zo)
                loss, gpred = bce_loss(pred, y)
                gzo = sigmoid_backward(pred, gpred)
                gah, gwo, gbo = dense_backward(head, co, gzo)
                sgd_step(head, gwo, gbo, tcfg.lr, "head")
            gh = relu_backward(gah, zh)
            gx, gwh, gbh = dense_backward(hidden, ch, gh)
            sgd_step(hidden, gwh, gbh, tcfg.lr, "hidden")
            trace.add_step(epoch, bidx, loss)
            for i in range(k):
                block = gx[:, i * tcfg.client_width : (i + 1) * tcfg.client_width]
                send_to(i, SmashedGrad(PHASE_TRAIN, epoch, bidx, i, np.ascontiguousarray(block)))

        # Evaluation passes: train split then test split, in id order.
        for phase, split, split_name, ids_all in (
            (PHASE_EVAL_TRAIN, SPLIT_TRAIN, "train", plan.train_ids),
            (PHASE_EVAL_TEST, SPLIT_TEST, "test", plan.test_ids),
        ):
            acc = MetricAccumulator() if not ushaped else None
            for bidx, (s, e) in enumerate(batch_slices(ids_all.shape[0], tcfg.batch_size)):
                ids = ids_all[s:e]
                broadcast(BatchMeta(phase, epoch, bidx, ids.astype(np.uint64)))
                x = gather_smashed(phase, epoch, bidx, e - s)
                if ushaped:
                    ah, _, _ = forward_hidden(x)
                    send_to(0, HeadActivations(phase, epoch, bidx, SERVER_INDEX, ah))
                else:
                    lab = recv_from(0, Labels)
                    y = lab.labels.reshape(-1, 1)
                    ah, _, _ = forward_hidden(x)
                    zo, _ = dense_forward(head, ah)
                    pred = sigmoid(zo)
                    loss, _ = bce_loss(pred, y)
                    acc.add_batch(loss, pred, y)
            if ushaped:
                m = recv_from(0, Metrics)
                if (m.epoch, m.split) != (epoch, split):
                    raise ProtocolViolation("split-mismatch", "metrics for the wrong pass")
            else:
                m = Metrics(epoch, split, acc.loss, acc.correct, acc.count)
                feed(m)
            trace.add_metrics(epoch, split_name, m.loss, m.correct, m.total)
            log.info(
                "epoch %d %s: loss=%.6f accuracy=%.4f (%d/%d)",
                epoch, split_name, m.loss, m.correct / m.total, m.correct, m.total,
            )

        # Epoch close: exchange parameter-group checksums.
        srv_groups = [("hidden", param_checksum(hidden))]
        if not ushaped:
            srv_groups.append(("head", param_checksum(head)))
        broadcast(EndEpoch(epoch, SERVER_INDEX, tuple(srv_groups)))
        merged: dict[str, int] = {}
        limb_groups: dict[str, int] = {}
        for i in range(k):
            ee = recv_from(i, EndEpoch)
            for name, checksum in ee.groups:
                limb_groups[name] = checksum
        for i in range(k):
            merged[f"limb_{i}"] = limb_groups[f"limb_{i}"]
        merged["hidden"] = dict(srv_groups)["hidden"]
        merged["head"] = limb_groups["head"] if ushaped else dict(srv_groups)["head"]
        trace.add_checksums(epoch, merged)

    broadcast(EndSession(tcfg.epochs, digest))
    for i in range(k):
        by_limb[i].close()
    result = ServerResult(trace, hidden, head, merged, captured)
    return result


# ---------------------------------------------------------------------------
# Offline evaluation (no protocol): used by the evaluate CLI and tests


def evaluate_assembled(
    limb_layers: list[DenseLayer],
    hidden: DenseLayer,
    head: DenseLayer,
    shard_sets: list[LabeledShardSet],
    labels: np.ndarray,
    ids: np.ndarray,
    batch_size: int,
) -> tuple[float, int, int]:
    """Metrics of the assembled model over ``ids``, by the canonical procedure.

    Matches the in-protocol evaluation bit for bit: same batching, same
    float32 loss accumulation, same tie rule.
    """
    acc = MetricAccumulator()
    labels_col = labels.reshape(-1, 1).astype(np.float32)
    for s, e in batch_slices(ids.shape[0], batch_size):
        batch = ids[s:e].astype(np.int64)
        parts = []
        for layer, sset in zip(limb_layers, shard_sets):
            z, _ = dense_forward(layer, sset.shards[batch])
            parts.append(relu(z))
        x = np.concatenate(parts, axis=1)
        zh, _ = dense_forward(hidden, x)
        zo, _ = dense_forward(head, relu(zh))
        pred = sigmoid(zo)
        y = labels_col[batch]
        loss, _ = bce_loss(pred, y)
        acc.add_batch(loss, pred, y)
    return acc.loss, acc.correct, acc.count


# ---------------------------------------------------------------------------
# Orchestration


def load_shard_sets(cfg: ExperimentConfig) -> list[LabeledShardSet]:
    """Materialize all limbs' data according to the config."""
    if cfg.data.source == "synthetic":
        images, labels = synth_dataset(cfg.data.n, cfg.data.image_size, cfg.train.seed)
        return build_shard_sets(images, labels, cfg.train.k)
    from pathlib import Path

    root = Path(cfg.data.archive_root)
    sets = []
    for i in range(cfg.train.k):
        sset = read_shard_archive(root / f"limb_{i}")
        if sset.n != cfg.data.n:
            raise ValueError(f"archive limb_{i} has {sset.n} samples, config says {cfg.data.n}")
        sets.append(sset)
    return sets


def load_limb_shard_set(cfg: ExperimentConfig, limb_index: int) -> LabeledShardSet:
    """One limb's data only — what a standalone limb process touches."""
    if cfg.data.source == "synthetic":
        images, labels = synth_dataset(cfg.data.n, cfg.data.image_size, cfg.train.seed)
        return build_shard_sets(images, labels, cfg.train.k)[limb_index]
    from pathlib import Path

    sset = read_shard_archive(Path(cfg.data.archive_root) / f"limb_{limb_index}")
    if sset.n != cfg.data.n:
        raise ValueError(f"archive has {sset.n} samples, config says {cfg.data.n}")
    return sset


def run_split_training(
    cfg: ExperimentConfig,
    shard_sets: Optional[list[LabeledShardSet]] = None,
    capture_messages: bool = False,
    recv_timeout: float = DEFAULT_TIMEOUT,
) -> tuple[TrainTrace, ServerResult, list[LimbResult]]:
    """Run a full training session in one process.

    Limbs run on threads; the server runs on the calling thread.  With
    ``cfg.transport.kind == "tcp"`` the parties talk over real localhost
    sockets, otherwise over in-process loopback channels — the result is
    identical by construction either way.
    """
    if shard_sets is None:
        shard_sets = load_shard_sets(cfg)
    k = cfg.train.k
    if len(shard_sets) != k:
        raise ValueError(f"need {k} shard sets, got {len(shard_sets)}")

    limb_results: list[Optional[LimbResult]] = [None] * k
    limb_errors: list[Optional[BaseException]] = [None] * k
    threads = []

    if cfg.transport.kind == "tcp":
        listener = TcpListener(cfg.transport.host, cfg.transport.port)

        def limb_main(i: int):
            channel = None
            try:
                channel = connect_tcp(listener.host, listener.port, retry_for=10.0)
                limb_results[i] = run_limb(cfg.train, cfg.data, shard_sets[i], channel, recv_timeout)
            except BaseException as exc:  # noqa: BLE001 - reported to the caller
                limb_errors[i] = exc
                if channel is not None:
                    channel.close()

        for i in range(k):
            t = threading.Thread(target=limb_main, args=(i,), name=f"limb-{i}", daemon=True)
            t.start()
            threads.append(t)
        try:
            server_channels = [listener.accept(recv_timeout) for _ in range(k)]
        finally:
            listener.close()
    else:
        pairs = [loopback_pair() for _ in range(k)]
        server_channels = [srv for srv, _ in pairs]

        def limb_main(i: int):
            channel = pairs[i][1]
            try:
                limb_results[i] = run_limb(cfg.train, cfg.data, shard_sets[i], channel, recv_timeout)
            except BaseException as exc:  # noqa: BLE001 - reported to the caller
                limb_errors[i] = exc
                channel.close()

        for i in range(k):
            t = threading.Thread(target=limb_main, args=(i,), name=f"limb-{i}", daemon=True)
            t.start()
            threads.append(t)

    try:
        server = run_server(cfg.train, cfg.data, server_channels, capture_messages, recv_timeout)
    except BaseException:
        for t in threads:
            t.join(timeout=5.0)
        for err in limb_errors:
            if err is not None:
                raise err
        raise
    for t in threads:
        t.join(timeout=recv_timeout)
    for err in limb_errors:
        if err is not None:
            raise err
    return server.trace, server, [r for r in limb_results if r is not None]
