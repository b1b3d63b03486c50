"""PCG32 generator and seed-derivation tests.

The stream itself is pinned against the published pcg32 demo output, so any
change to the generator breaks loudly rather than silently shifting every
training trajectory in the package.
"""

import numpy as np
import pytest

from splitlimb.rng import Rng, derive_seed

# First outputs of the pcg32 reference implementation's demo program for
# pcg32_srandom(42, 54).
PCG32_DEMO_SEED42_SEQ54 = [
    0xA15C02B7,
    0x7B47F409,
    0xBA1D3330,
    0x83D2F293,
    0xBFA4784B,
    0xCBED606E,
]


def test_reference_stream():
    rng = Rng.from_raw(42, 54)
    got = [rng.next_u32() for _ in range(6)]
    assert got == PCG32_DEMO_SEED42_SEQ54


def test_seeded_stream_is_stable():
    # Frozen once from this implementation; a change here means every
    # derived quantity in the package changed.
    rng = Rng(0)
    first = [rng.next_u32() for _ in range(4)]
    assert first == [1092706980, 1449026797, 1724843990, 2665415193]


def test_same_seed_same_stream():
    a, b = Rng(99), Rng(99)
    assert [a.next_u32() for _ in range(50)] == [b.next_u32() for _ in range(50)]


def test_different_seeds_differ():
    a = [Rng(s).next_u32() for s in range(64)]
    assert len(set(a)) == 64


@pytest.mark.parametrize("n", [0, 1, 2, 7, 63, 64, 65, 1000])
def test_bulk_matches_scalar(n):
    scalar = Rng(1234)
    bulk = Rng(1234)
    want = np.array([scalar.next_u32() for _ in range(n)], dtype=np.uint32)
    got = bulk.u32_array(n)
    assert got.dtype == np.uint32
    assert np.array_equal(got, want)
    # the two generators must also land in the same state
    assert bulk.next_u32() == scalar.next_u32()


def test_bulk_then_scalar_interleaving():
    a, b = Rng(5), Rng(5)
    seq_a = list(a.u32_array(10)) + [a.next_u32()] + list(a.u32_array(3))
    seq_b = [b.next_u32() for _ in range(14)]
    assert [int(v) for v in seq_a] == seq_b


def test_u01_range():
    rng = Rng(42)
    xs = rng.u01_array(10_000)
    assert xs.min() >= 0.0
    assert xs.max() < 1.0
    assert abs(xs.mean() - 0.5) < 0.02


def test_uniform_array_bounds():
    xs = Rng(3).uniform_array(5000, -2.5, 0.5)
    assert xs.min() >= -2.5
    assert xs.max() < 0.5


def test_below_covers_range():
    rng = Rng(8)
    seen = {rng.below(10) for _ in range(500)}
    assert seen == set(range(10))


def test_permutation_is_permutation():
    for seed in range(5):
        p = Rng(seed).permutation(40)
        assert sorted(p.tolist()) == list(range(40))


def test_permutation_deterministic():
    assert np.array_equal(Rng(7).permutation(100), Rng(7).permutation(100))
    assert not np.array_equal(Rng(7).permutation(100), Rng(8).permutation(100))


def test_permutation_trivial_sizes():
    assert Rng(0).permutation(0).tolist() == []
    assert Rng(0).permutation(1).tolist() == [0]


# -- derive_seed ---------------------------------------------------------------


def test_derive_seed_is_stable():
    # Frozen values; these feed every init stream and shuffle in the package.
    assert derive_seed(0, "split") == derive_seed(0, "split")
    assert derive_seed(0, "limb", 0) != derive_seed(0, "limb", 1)
    assert derive_seed(0, "limb", 0) != derive_seed(1, "limb", 0)
    assert derive_seed(0, "perm", 3) != derive_seed(0, "perm", 4)


def test_derive_seed_no_concatenation_ambiguity():
    # parts are joined with a separator, so ("ab",) and ("a","b") differ
    assert derive_seed(0, "ab") != derive_seed(0, "a", "b")


def test_derive_seed_distinct_purposes():
    values = {
        derive_seed(12, "split"),
        derive_seed(12, "hidden"),
        derive_seed(12, "head"),
        derive_seed(12, "limb", 0),
        derive_seed(12, "perm", 0),
        derive_seed(12, "sample", 0),
    }
    assert len(values) == 6
