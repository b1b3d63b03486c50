"""Acceptance gate: the promises this package ships under, one test each.

Every test prints a single ``[ACCEPTANCE] <claim>: PASS/FAIL`` line (visible
with ``pytest -s`` or ``-rA``, and in the captured output of any failure) so a
run of this file doubles as a checklist:

1. split-protocol training is bit-identical to the masked monolithic network
   (tolerance 0) for k=1, 2 and 4;
2. the u-shaped topology computes the same model as the vertical one while
   sending zero Labels messages;
3. analytic gradients match central finite differences (rel err <= 1e-4,
   >= 100 randomized cases);
4. training over localhost TCP produces the same TrainTrace as loopback;
5. fuzzing frames and transcripts (>= 1000 cases) never passes silently;
6. the synthetic task is actually learnable at scale (train >= 0.90,
   test >= 0.70 for at least 4 of 5 fixed seeds);
7. the data pipeline round-trips exactly (column split, PGM files, archives).

The heavyweight runs keep to modest wall-clock budgets, asserted explicitly.
"""

import time

import numpy as np

import test_numerics as gradcheck
from splitlimb.cli import main
from splitlimb.config import DataConfig, ExperimentConfig, TrainConfig, validate
from splitlimb.datakit import (
    load_pgm,
    read_manifest_ids,
    save_pgm,
    synth_dataset,
    vertical_split,
    write_shard_archive,
)
from splitlimb.datakit import build_shard_sets
from splitlimb.limbs import run_split_training
from splitlimb.numerics import bce_loss
from splitlimb.wire import (
    PHASE_TRAIN,
    ROLE_LIMB,
    ROLE_SERVER,
    SERVER_INDEX,
    SPLIT_TEST,
    BatchMeta,
    EndEpoch,
    EndSession,
    HeadActivations,
    HeadGrad,
    Hello,
    Labels,
    Metrics,
    ProtocolViolation,
    SessionState,
    Smashed,
    SmashedGrad,
    WireError,
    decode_frame,
    encode_frame,
)


def _report(claim, ok, detail=""):
    line = f"[ACCEPTANCE] {claim}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


def _config(**overrides) -> ExperimentConfig:
    """Defaults of the shipped config plus per-test overrides."""
    train = dict(topology="vertical", k=2, seed=0, epochs=10)
    data = dict(n=256)
    for key, value in overrides.items():
        (train if key in TrainConfig.__dataclass_fields__ else data)[key] = value
    cfg = ExperimentConfig()
    cfg.train = TrainConfig(**train)
    cfg.data = DataConfig(**data)
    validate(cfg)
    return cfg


# -- 1. oracle equivalence ----------------------------------------------------

ORACLE_TOML = """
[train]
topology = "{topology}"
k = {k}
seed = 0
epochs = 10

[data]
n = 256
"""


def test_split_training_matches_monolithic_oracle(tmp_path):
    timings = []
    for k in (2, 1, 4):
        topology = "vanilla" if k == 1 else "vertical"
        path = tmp_path / f"oracle_k{k}.toml"
        path.write_text(ORACLE_TOML.format(topology=topology, k=k))
        t0 = time.monotonic()
        rc = main(["compare-oracle", "--config", str(path)])
        timings.append((k, time.monotonic() - t0))
        assert rc == 0, f"compare-oracle diverged for k={k}"
    detail = ", ".join(f"k={k} {dt:.1f}s" for k, dt in timings)
    headline = timings[0][1]  # the k=2 run is the stated budget
    _report(
        "split == monolithic oracle at tolerance 0 (n=256, 10 epochs, k=1/2/4)",
        headline < 60.0,
        detail,
    )


# -- 2. topology equivalence --------------------------------------------------


def test_ushaped_matches_vertical_without_sharing_labels():
    vert_trace, vert_server, _ = run_split_training(
        _config(topology="vertical", epochs=5), capture_messages=True
    )
    ush_trace, ush_server, _ = run_split_training(
        _config(topology="ushaped", epochs=5), capture_messages=True
    )

    assert vert_trace.checksums[-1].groups == ush_trace.checksums[-1].groups
    assert [c.groups for c in vert_trace.checksums] == [c.groups for c in ush_trace.checksums]
    assert [s.loss for s in vert_trace.steps] == [s.loss for s in ush_trace.steps]

    ushaped_labels = sum(isinstance(m, Labels) for m in ush_server.messages)
    vertical_labels = sum(isinstance(m, Labels) for m in vert_server.messages)
    assert vertical_labels > 0  # the comparison is not vacuous
    _report(
        "u-shaped == vertical final checksums, zero Labels on the wire",
        ushaped_labels == 0,
        f"identical checksums over 5 epochs; Labels msgs: vertical={vertical_labels}, ushaped=0",
    )


# -- 3. gradient suite ---------------------------------------------------------


def _bce_grad_error(seed):
    """d(mean bce)/d(prediction) against central differences."""
    rng = np.random.default_rng(5000 + seed)
    rows = int(rng.integers(1, 8))
    pred = rng.uniform(0.05, 0.95, size=(rows, 1))
    y = (rng.random((rows, 1)) > 0.5).astype(np.float64)
    _, analytic = bce_loss(pred, y)
    numeric = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        orig = pred[idx]
        pred[idx] = orig + gradcheck.STEP
        hi, _ = bce_loss(pred, y)
        pred[idx] = orig - gradcheck.STEP
        lo, _ = bce_loss(pred, y)
        pred[idx] = orig
        numeric[idx] = (hi - lo) / (2 * gradcheck.STEP)
    return gradcheck.rel_err(analytic, numeric)


def test_gradients_match_central_differences():
    cases = 0
    worst = 0.0
    for seed in gradcheck.CASE_SEEDS:
        rng = np.random.default_rng(1000 + seed)
        batch = int(rng.integers(1, 6))
        dims = rng.integers(2, 7, size=3)
        layers, x, y = gradcheck._random_network(
            rng, batch, int(dims[0]), int(dims[1]), int(dims[2])
        )
        grads = gradcheck._analytic_grads(layers, x, y)
        for tensor in gradcheck.CHECKED_TENSORS:
            if tensor == "x":
                numeric = gradcheck._numeric_grad_input(layers, x, y)
            elif tensor == "smashed":
                numeric = gradcheck._numeric_grad_smashed(layers, x, y)
            else:
                name, field = tensor.split(".")
                numeric = gradcheck._numeric_grad_param(layers, x, y, name, field)
            err = gradcheck.rel_err(grads[tensor], numeric)
            assert err <= gradcheck.REL_TOL, f"{tensor} seed={seed}: rel err {err:.2e}"
            worst = max(worst, err)
            cases += 1
        err = _bce_grad_error(seed)
        assert err <= gradcheck.REL_TOL, f"bce seed={seed}: rel err {err:.2e}"
        worst = max(worst, err)
        cases += 1
    _report(
        "gradients match central differences (step 1e-5, rel err <= 1e-4)",
        cases >= 100,
        f"{cases} cases (every layer, d/dx, d/dsmashed, d/dpred), worst rel err {worst:.2e}",
    )


# -- 4. transport transparency --------------------------------------------------


def test_tcp_and_loopback_runs_are_identical():
    t0 = time.monotonic()
    loop_trace, _, _ = run_split_training(_config(seed=1, epochs=4))
    tcp_cfg = _config(seed=1, epochs=4)
    tcp_cfg.transport.kind = "tcp"
    tcp_cfg.transport.port = 0  # OS-assigned; fine for single-process runs
    tcp_trace, _, _ = run_split_training(tcp_cfg)
    elapsed = time.monotonic() - t0
    assert tcp_trace == loop_trace
    _report(
        "localhost TCP run == loopback run (identical TrainTraces)",
        elapsed < 120.0,
        f"{len(loop_trace.steps)} steps, {len(loop_trace.checksums)} checksum rows, {elapsed:.1f}s",
    )


# -- 5. protocol fuzzing ---------------------------------------------------------


FUZZ_SAMPLES = [
    Hello(ROLE_LIMB, 0, 1, 2, 0xA1B2C3D4E5F60718),
    Hello(ROLE_SERVER, SERVER_INDEX, 1, 2, 0xA1B2C3D4E5F60718),
    BatchMeta(PHASE_TRAIN, 0, 0, np.arange(8, dtype=np.uint64)),
    Smashed(PHASE_TRAIN, 0, 0, 1, np.linspace(-1, 1, 48, dtype=np.float32).reshape(8, 6)),
    Labels(PHASE_TRAIN, 0, 0, np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype=np.float32)),
    HeadActivations(PHASE_TRAIN, 1, 2, 0, np.ones((8, 5), dtype=np.float32)),
    HeadGrad(PHASE_TRAIN, 1, 2, 0, np.full((8, 5), 0.25, dtype=np.float32), 0.625),
    SmashedGrad(PHASE_TRAIN, 0, 0, 1, np.zeros((8, 6), dtype=np.float32)),
    Metrics(3, SPLIT_TEST, 0.25, 9, 12),
    EndEpoch(3, SERVER_INDEX, (("hidden", 0x1234ABCD5678EF90),)),
    EndSession(2, 0xA1B2C3D4E5F60718),
]


def _flip_bytes_cases(count):
    """Random single-byte corruptions; every one must raise a WireError."""
    frames = [encode_frame(0xA1B2C3D4E5F60718, m) for m in FUZZ_SAMPLES]
    rng = np.random.default_rng(20260401)
    kinds = set()
    for _ in range(count):
        buf = bytearray(frames[int(rng.integers(len(frames)))])
        buf[int(rng.integers(len(buf)))] ^= int(rng.integers(1, 256))
        try:
            decode_frame(bytes(buf))
        except WireError as e:
            kinds.add(type(e).__name__)
        else:
            raise AssertionError("corrupted frame decoded cleanly")
    return count, kinds


def _capture_transcript(topology):
    cfg = _config(
        topology=topology, k=2, epochs=2, batch_size=8, lr=0.05,
        client_width=6, server_width=5, n=24, image_size=12, train_fraction=0.75,
    )
    _, server, _ = run_split_training(cfg, capture_messages=True)
    return cfg, server.messages


def _replay(topology, k, msgs):
    """'violation' | 'unclosed' | 'clean' — never a silent wrong result."""
    state = SessionState(topology, k)
    try:
        for m in msgs:
            state.feed(m)
    except ProtocolViolation:
        return "violation"
    return "clean" if state.closed else "unclosed"


def _swap_is_identity(a, b):
    """True when swapping adjacent-or-not a/b provably cannot change the run:
    handshake hellos are unordered, and the k Smashed (resp. SmashedGrad)
    messages of one step form an unordered gather window."""
    if isinstance(a, Hello) and isinstance(b, Hello):
        return True
    for cls in (Smashed, SmashedGrad):
        if isinstance(a, cls) and isinstance(b, cls):
            return (a.phase, a.epoch, a.batch_index) == (b.phase, b.epoch, b.batch_index)
    return False


def test_fuzzing_never_passes_silently():
    flip_count, flip_kinds = _flip_bytes_cases(600)

    detected = 0
    identity_swaps = 0
    rng = np.random.default_rng(97)
    for topology in ("vertical", "ushaped"):
        cfg, msgs = _capture_transcript(topology)
        k = cfg.train.k
        assert _replay(topology, k, msgs) == "clean"  # baseline sanity

        mutations = []
        for i in range(len(msgs)):
            mutations.append(("delete", msgs[:i] + msgs[i + 1:], None))
            mutations.append(("duplicate", msgs[:i + 1] + [msgs[i]] + msgs[i + 1:], None))
        for i in range(len(msgs) - 1):
            swapped = list(msgs)
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
            mutations.append(("swap", swapped, (msgs[i], msgs[i + 1])))
        for _ in range(150):  # distant transpositions
            i = int(rng.integers(0, len(msgs) - 1))
            j = int(rng.integers(i + 1, len(msgs)))
            swapped = list(msgs)
            swapped[i], swapped[j] = swapped[j], swapped[i]
            mutations.append(("swap", swapped, (msgs[i], msgs[j])))

        for kind, mutated, pair in mutations:
            outcome = _replay(topology, k, mutated)
            if kind == "swap" and _swap_is_identity(*pair):
                # provably order-free: the automaton must keep accepting it
                assert outcome == "clean", f"{topology}: legal reorder rejected"
                identity_swaps += 1
            else:
                assert outcome in ("violation", "unclosed"), (
                    f"{topology}: silent {kind} of {type(pair or mutated)!r}"
                )
                detected += 1

    total = flip_count + detected
    _report(
        "fuzzing is never silent (byte flips + deletion/duplication/transposition)",
        total >= 1000,
        f"{flip_count} byte flips -> {sorted(flip_kinds)}; "
        f"{detected} transcript mutations all detected; "
        f"{identity_swaps} provably order-free swaps correctly accepted",
    )


# -- 6. learning sanity -----------------------------------------------------------


def test_synthetic_task_is_learned_at_scale():
    t0 = time.monotonic()
    results = []
    for seed in range(5):
        trace, _, _ = run_split_training(_config(seed=seed, epochs=35, n=2000))
        final_train, final_test = trace.metrics[-2], trace.metrics[-1]
        assert (final_train.split, final_test.split) == ("train", "test")
        assert (final_train.total, final_test.total) == (1600, 400)
        results.append((seed, final_train.accuracy, final_test.accuracy))
    elapsed = time.monotonic() - t0
    passing = sum(1 for _, tr, te in results if tr >= 0.90 and te >= 0.70)
    detail = "; ".join(f"seed {s}: {tr:.3f}/{te:.3f}" for s, tr, te in results)
    _report(
        "learning sanity: train >= 0.90 and test >= 0.70 on >= 4 of 5 seeds "
        "(n=2000, 1600/400, k=2, 35 epochs)",
        passing >= 4 and elapsed < 600.0,
        f"{passing}/5 seeds pass in {elapsed:.0f}s; {detail}",
    )


# -- 7. data pipeline --------------------------------------------------------------


def test_data_pipeline_round_trips_exactly(tmp_path):
    rng = np.random.default_rng(11)

    # column split reassembles pixel-for-pixel
    images = rng.random((100, 23, 17)).astype(np.float32)
    for k in range(1, 6):
        for img in images:
            shards = vertical_split(img, k)
            back = np.hstack(shards)
            assert back.dtype == img.dtype and np.array_equal(back, img)

    # PGM files survive a write/read/write cycle byte-for-byte
    for i in range(20):
        u8 = rng.integers(0, 256, size=(int(rng.integers(1, 40)), int(rng.integers(1, 40))))
        img = (u8 / 255.0).astype(np.float32)
        p1, p2 = tmp_path / f"a{i}.pgm", tmp_path / f"b{i}.pgm"
        save_pgm(p1, img)
        save_pgm(p2, load_pgm(p1))
        assert p1.read_bytes() == p2.read_bytes()

    # shard archives agree on the sample_id sequence across limbs
    images, labels = synth_dataset(40, 15, seed=9)
    for i, sset in enumerate(build_shard_sets(images, labels, k=3)):
        write_shard_archive(tmp_path / f"limb_{i}", sset)
    id_seqs = [read_manifest_ids(tmp_path / f"limb_{i}").tolist() for i in range(3)]
    assert id_seqs[0] == id_seqs[1] == id_seqs[2] == list(range(40))

    _report(
        "data pipeline exact: column split (k=1..5), PGM bytes, archive id order",
        True,
        "100 images reassembled x 5 k values; 20 PGM byte round-trips; 3 aligned archives",
    )
