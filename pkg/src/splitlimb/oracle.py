"""Monolithic reference trainer and trace comparison.

`train_monolithic` trains the same model as a split session, centralized in
one process with no protocol: the k per-limb first layers become one
block-structured layer whose cross-block weights are zero and stay zero
(gradients are masked every step).  Because every kernel accumulates in a
pinned order and the masked weight entries contribute exact +0.0 terms, the
monolithic trajectory is bit-identical to the split one — same step losses,
same metrics, same parameter checksums — which is what `compare_traces`
certifies at tolerance zero.

The zero-block argument in brief: pinned accumulation never produces -0.0
(IEEE round-to-nearest gives +0.0 for both exact cancellation and
(+0)+(-0)), so adding the masked terms x*(+0.0) leaves every partial sum
bit-unchanged; masked weights updated with masked gradients stay exactly
+0.0 (lr*(+/-0.0) is +/-0.0 and 0.0 minus that is +0.0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import DataConfig, ExperimentConfig, TrainConfig, config_digest
from .datakit import LabeledShardSet
from .limbs import MetricAccumulator, RunPlan, batch_slices, epoch_order, load_shard_sets
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
from .trace import TrainTrace, f32_hex


@dataclass
class MonolithicModel:
    """The centralized model with split-equivalent block structure."""

    first: DenseLayer  # [sum of shard dims, k * client_width], block-structured
    mask: np.ndarray  # float32 0/1, same shape as first.w; 1 inside the blocks
    hidden: DenseLayer
    head: DenseLayer
    row_bounds: list[tuple[int, int]]  # input rows owned by each limb
    client_width: int

    def limb_block(self, i: int) -> DenseLayer:
        """Limb i's slice of the first layer, as its own dense layer."""
        r0, r1 = self.row_bounds[i]
        c0, c1 = i * self.client_width, (i + 1) * self.client_width
        return DenseLayer(
            np.ascontiguousarray(self.first.w[r0:r1, c0:c1]),
            np.ascontiguousarray(self.first.b[c0:c1]),
        )


def assemble_monolithic(tcfg: TrainConfig, shard_dims: list[int]) -> MonolithicModel:
    """Build the centralized model from the same init streams the parties use."""
    k = tcfg.k
    cw = tcfg.client_width
    total = sum(shard_dims)
    w = np.zeros((total, k * cw), dtype=np.float32)
    b = np.zeros(k * cw, dtype=np.float32)
    mask = np.zeros_like(w)
    bounds = []
    r0 = 0
    for i, dim in enumerate(shard_dims):
        block = init_dense(Rng(derive_seed(tcfg.seed, "limb", i)), dim, cw)
        w[r0 : r0 + dim, i * cw : (i + 1) * cw] = block.w
        b[i * cw : (i + 1) * cw] = block.b
        mask[r0 : r0 + dim, i * cw : (i + 1) * cw] = 1.0
        bounds.append((r0, r0 + dim))
        r0 += dim
    hidden = init_dense(Rng(derive_seed(tcfg.seed, "hidden")), k * cw, tcfg.server_width)
    head = init_dense(Rng(derive_seed(tcfg.seed, "head")), tcfg.server_width, 1)
    return MonolithicModel(DenseLayer(w, b), mask, hidden, head, bounds, cw)


def train_monolithic(
    cfg: ExperimentConfig,
    shard_sets: Optional[list[LabeledShardSet]] = None,
) -> tuple[TrainTrace, MonolithicModel]:
    """Centralized training run producing a trace in the split-run schema."""
    tcfg, dcfg = cfg.train, cfg.data
    if shard_sets is None:
        shard_sets = load_shard_sets(cfg)
    if len(shard_sets) != tcfg.k:
        raise ValueError(f"need {tcfg.k} shard sets, got {len(shard_sets)}")
    if shard_sets[0].labels is None:
        raise ValueError("labels missing from limb 0's shard set")

    model = assemble_monolithic(tcfg, [s.shards.shape[1] for s in shard_sets])
    x_all = np.concatenate([s.shards for s in shard_sets], axis=1)
    y_all = shard_sets[0].labels.reshape(-1, 1)

    plan = RunPlan.from_config(tcfg, dcfg)
    trace = TrainTrace(tcfg.topology, tcfg.k, config_digest(tcfg, dcfg))

    def forward(x):
        z1, c1 = dense_forward(model.first, x)
        a1 = relu(z1)
        zh, ch = dense_forward(model.hidden, a1)
        ah = relu(zh)
        zo, co = dense_forward(model.head, ah)
        return sigmoid(zo), (z1, c1, zh, ch, co)

    for epoch in range(tcfg.epochs):
        order = epoch_order(tcfg.seed, epoch, plan.train_ids)
        for bidx, (s, e) in enumerate(batch_slices(order.shape[0], tcfg.batch_size)):
            ids = order[s:e]
            x, y = x_all[ids], y_all[ids]
            pred, (z1, c1, zh, ch, co) = forward(x)
            loss, gpred = bce_loss(pred, y)
            gzo = sigmoid_backward(pred, gpred)
            gah, gwo, gbo = dense_backward(model.head, co, gzo)
            sgd_step(model.head, gwo, gbo, tcfg.lr, "head")
            gh = relu_backward(gah, zh)
            ga1, gwh, gbh = dense_backward(model.hidden, ch, gh)
            sgd_step(model.hidden, gwh, gbh, tcfg.lr, "hidden")
            g1 = relu_backward(ga1, z1)
            _, gw1, gb1 = dense_backward(model.first, c1, g1)
            sgd_step(model.first, gw1 * model.mask, gb1, tcfg.lr, "first")
            trace.add_step(epoch, bidx, loss)

        for split_name, ids_all in (("train", plan.train_ids), ("test", plan.test_ids)):
            acc = MetricAccumulator()
            for s, e in batch_slices(ids_all.shape[0], tcfg.batch_size):
                ids = ids_all[s:e]
                pred, _ = forward(x_all[ids])
                y = y_all[ids]
                loss, _ = bce_loss(pred, y)
                acc.add_batch(loss, pred, y)
            trace.add_metrics(epoch, split_name, acc.loss, acc.correct, acc.count)

        groups = {f"limb_{i}": param_checksum(model.limb_block(i)) for i in range(tcfg.k)}
        groups["hidden"] = param_checksum(model.hidden)
        groups["head"] = param_checksum(model.head)
        trace.add_checksums(epoch, groups)

    return trace, model


# ---------------------------------------------------------------------------
# Trace comparison


@dataclass
class TraceDivergence:
    where: str  # human-readable location of the first difference
    detail: str

    def __str__(self):
        return f"{self.where}: {self.detail}"


def compare_traces(a: TrainTrace, b: TrainTrace, tol: float = 0.0) -> Optional[TraceDivergence]:
    """First divergence between two traces, or None if equal within ``tol``.

    At tol=0 losses must match bit for bit (compared via their float32
    payloads); counts and checksums must always match exactly.
    """

    def loss_differs(x: float, y: float) -> bool:
        if tol == 0.0:
            return f32_hex(x) != f32_hex(y)
        return abs(x - y) > tol

    for name in ("topology", "k", "config_digest"):
        va, vb = getattr(a, name), getattr(b, name)
        if va != vb:
            return TraceDivergence("header", f"{name}: {va!r} != {vb!r}")
    if len(a.steps) != len(b.steps):
        return TraceDivergence("steps", f"count {len(a.steps)} != {len(b.steps)}")
    for sa, sb in zip(a.steps, b.steps):
        if (sa.epoch, sa.batch) != (sb.epoch, sb.batch):
            return TraceDivergence(
                f"step {sa.epoch}/{sa.batch}", f"position mismatch vs {sb.epoch}/{sb.batch}"
            )
        if loss_differs(sa.loss, sb.loss):
            return TraceDivergence(
                f"step {sa.epoch}/{sa.batch}",
                f"loss {f32_hex(sa.loss)} ({sa.loss!r}) != {f32_hex(sb.loss)} ({sb.loss!r})",
            )
    if len(a.metrics) != len(b.metrics):
        return TraceDivergence("metrics", f"count {len(a.metrics)} != {len(b.metrics)}")
    for ma, mb in zip(a.metrics, b.metrics):
        loc = f"metrics {ma.epoch}/{ma.split}"
        if (ma.epoch, ma.split) != (mb.epoch, mb.split):
            return TraceDivergence(loc, f"position mismatch vs {mb.epoch}/{mb.split}")
        if loss_differs(ma.loss, mb.loss):
            return TraceDivergence(loc, f"loss {f32_hex(ma.loss)} != {f32_hex(mb.loss)}")
        if (ma.correct, ma.total) != (mb.correct, mb.total):
            return TraceDivergence(
                loc, f"counts {ma.correct}/{ma.total} != {mb.correct}/{mb.total}"
            )
    if len(a.checksums) != len(b.checksums):
        return TraceDivergence("checksums", f"count {len(a.checksums)} != {len(b.checksums)}")
    for ca, cb in zip(a.checksums, b.checksums):
        if ca.epoch != cb.epoch:
            return TraceDivergence(f"checksums {ca.epoch}", f"epoch mismatch vs {cb.epoch}")
        if list(ca.groups) != list(cb.groups):
            return TraceDivergence(
                f"checksums {ca.epoch}", f"groups {list(ca.groups)} != {list(cb.groups)}"
            )
        for name in ca.groups:
            if ca.groups[name] != cb.groups[name]:
                return TraceDivergence(
                    f"checksums {ca.epoch}",
                    f"{name}: {ca.groups[name]:#018x} != {cb.groups[name]:#018x}",
                )
    return None
