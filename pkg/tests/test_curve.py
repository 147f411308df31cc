"""Curve-key unit tests: frozen examples, oracle cross-checks, properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vxmamba import curve
from vxmamba.errors import CapacityError, EmptyReportError, RangeError

from oracles import (hilbert_path_recursive, morton_reference,
                     path_is_space_filling, serialize_reference)


def dense_grid(order):
    side = 1 << order
    ax = np.arange(side)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"),
                    axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# hilbert encode / decode
# ---------------------------------------------------------------------------

def test_hilbert_zero_maps_to_zero():
    assert curve.hilbert_encode((0, 0, 0), 1) == 0
    assert curve.hilbert_decode(0, 1) == (0, 0, 0)


def test_hilbert_order1_is_permutation():
    keys = curve.hilbert_encode(dense_grid(1), 1)
    assert sorted(keys.tolist()) == list(range(8))


@pytest.mark.parametrize("order", [1, 2, 3])
def test_hilbert_path_unit_adjacent_exhaustive(order):
    grid = dense_grid(order)
    keys = curve.hilbert_encode(grid, order)
    path = grid[np.argsort(keys)]
    assert path_is_space_filling(path, order)


def test_recursive_oracle_agrees_on_adjacency_check():
    # the independent recursive construction passes the same checker,
    # so the checker itself distinguishes valid paths from broken ones
    for order in (1, 2, 3):
        assert path_is_space_filling(hilbert_path_recursive(order), order)
    broken = hilbert_path_recursive(2)
    broken[[3, 40]] = broken[[40, 3]]
    assert not path_is_space_filling(broken, 2)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_hilbert_roundtrip_exhaustive(order):
    grid = dense_grid(order)
    keys = curve.hilbert_encode(grid, order)
    back = curve.hilbert_decode(keys, order)
    assert np.array_equal(back, grid)


def test_hilbert_decode_consecutive_keys_adjacent_order2():
    keys = np.arange(64, dtype=np.uint64)
    pts = curve.hilbert_decode(keys, 2)
    steps = np.abs(np.diff(pts, axis=0)).sum(axis=1)
    assert (steps == 1).all()


@pytest.mark.parametrize("order", [4, 5, 6])
def test_hilbert_adjacency_sampled_high_orders(order):
    rng = np.random.default_rng(order)
    ks = rng.integers(0, (1 << (3 * order)) - 1, size=5000, dtype=np.uint64)
    a = curve.hilbert_decode(ks, order)
    b = curve.hilbert_decode(ks + np.uint64(1), order)
    steps = np.abs(a - b).sum(axis=1)
    assert (steps == 1).all()


def test_fast_path_matches_reference_transform():
    # the table-driven encoder against the literal bit sweep, exhaustive
    # at small orders and sampled where exhaustion is impractical
    for order in (1, 2, 3, 4):
        grid = dense_grid(order)
        x, y, z = (np.ascontiguousarray(grid[:, i], dtype=np.uint64)
                   for i in range(3))
        ref = curve._hilbert_transform_encode(x, y, z, order)
        assert np.array_equal(curve.hilbert_encode(grid, order), ref)
    rng = np.random.default_rng(7)
    for order in (5, 9, 13, 21):
        pts = rng.integers(0, 1 << order, size=(2000, 3), dtype=np.int64)
        x, y, z = (np.ascontiguousarray(pts[:, i], dtype=np.uint64)
                   for i in range(3))
        ref = curve._hilbert_transform_encode(x, y, z, order)
        assert np.array_equal(curve.hilbert_encode(pts, order), ref)


@given(order=st.integers(1, 21), data=st.data())
@settings(max_examples=40, deadline=None)
def test_hilbert_roundtrip_property(order, data):
    side = 1 << order
    coord = data.draw(st.tuples(st.integers(0, side - 1),
                                st.integers(0, side - 1),
                                st.integers(0, side - 1)))
    key = curve.hilbert_encode(coord, order)
    assert 0 <= key < 1 << (3 * order)
    assert curve.hilbert_decode(key, order) == coord


def test_hilbert_range_errors():
    with pytest.raises(RangeError):
        curve.hilbert_encode((2, 0, 0), 1)
    with pytest.raises(RangeError):
        curve.hilbert_encode((0, -1, 0), 3)
    with pytest.raises(RangeError):
        curve.hilbert_decode(8, 1)
    with pytest.raises(RangeError):
        curve.hilbert_encode((0, 0, 0), 22)
    with pytest.raises(RangeError):
        curve.hilbert_encode((0, 0, 0), 0)


# ---------------------------------------------------------------------------
# morton
# ---------------------------------------------------------------------------

def test_morton_frozen_examples():
    assert curve.morton_encode((1, 1, 1), 1) == 7
    assert curve.morton_encode((0, 0, 1), 1) == 1
    # x=11, y=01, z=10 interleave to 101 110
    assert curve.morton_encode((3, 1, 2), 2) == 46


def test_morton_matches_bitloop_reference():
    rng = np.random.default_rng(3)
    for order in (1, 2, 5, 12, 21):
        pts = rng.integers(0, 1 << order, size=(200, 3), dtype=np.int64)
        keys = curve.morton_encode(pts, order)
        ref = [morton_reference(*pt, order) for pt in pts.tolist()]
        assert keys.tolist() == ref


def test_morton_roundtrip():
    grid = dense_grid(3)
    keys = curve.morton_encode(grid, 3)
    assert np.array_equal(curve.morton_decode(keys, 3), grid)


# ---------------------------------------------------------------------------
# random permutation keys
# ---------------------------------------------------------------------------

def test_random_key_deterministic():
    a = curve.random_key((5, 2, 7), 3, seed=42)
    b = curve.random_key((5, 2, 7), 3, seed=42)
    assert a == b


def test_random_key_injective_full_grid():
    keys = curve.random_key(dense_grid(2), 2, seed=11)
    assert len(np.unique(keys)) == 64
    assert int(keys.max()) < 1 << 6
    keys4 = curve.random_key(dense_grid(4), 4, seed=11)
    assert len(np.unique(keys4)) == 4096


def test_random_key_seed_changes_some_key():
    grid = dense_grid(1)
    a = curve.random_key(grid, 1, seed=0)
    b = curve.random_key(grid, 1, seed=1)
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("kind", ["hilbert", "morton", "random"])
@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_bijectivity_exhaustive(kind, order):
    keys = curve._encode_kind(dense_grid(order), kind, order, seed=9)
    assert len(np.unique(keys)) == 1 << (3 * order)
    assert int(keys.max()) == (1 << (3 * order)) - 1


# ---------------------------------------------------------------------------
# curve tables
# ---------------------------------------------------------------------------

def test_table_order1_matches_encode():
    table = curve.build_curve_table("hilbert", 1)
    grid = dense_grid(1)
    assert np.array_equal(table.lookup(grid), curve.hilbert_encode(grid, 1))


@pytest.mark.parametrize("kind", ["hilbert", "morton", "random"])
def test_table_vs_direct_all_cells_order3(kind):
    table = curve.build_curve_table(kind, 3, seed=5)
    grid = dense_grid(3)
    assert np.array_equal(table.lookup(grid),
                          curve._encode_kind(grid, kind, 3, seed=5))


def test_table_budget_exceeded():
    # order 7: 2^21 entries x 8 bytes = 16 MiB, over a 1 MiB budget
    with pytest.raises(CapacityError):
        curve.build_curve_table("hilbert", 7, byte_budget=1 << 20)


def test_serialize_rejects_mismatched_table():
    table = curve.build_curve_table("morton", 2)
    with pytest.raises(RangeError):
        curve.serialize(np.array([[0, 0, 0]]), "hilbert", 2, table=table)


# ---------------------------------------------------------------------------
# serialize
# ---------------------------------------------------------------------------

def test_serialize_single_voxel():
    assert curve.serialize(np.array([[3, 3, 3]]), "hilbert", 2).tolist() == [0]


def test_serialize_preserves_sorted_pair():
    coords = np.array([[0, 0, 0], [1, 1, 1]])
    assert curve.serialize(coords, "morton", 1).tolist() == [0, 1]


def test_serialize_empty():
    assert curve.serialize(np.empty((0, 3), dtype=np.int64),
                           "hilbert", 2).tolist() == []


@pytest.mark.parametrize("kind", ["hilbert", "morton", "random"])
def test_serialize_matches_comparison_sort(kind):
    rng = np.random.default_rng(1)
    coords = rng.integers(0, 1 << 4, size=(500, 3), dtype=np.int64)
    perm = curve.serialize(coords, kind, 4, seed=3)
    keys = curve._encode_kind(coords, kind, 4, seed=3)
    assert perm.tolist() == serialize_reference(keys).tolist()


def test_serialize_million_matches_reference_order10():
    rng = np.random.default_rng(12)
    lin = np.unique(rng.integers(0, 1 << 30, size=1_100_000, dtype=np.uint64))
    lin = lin[:1_000_000]
    assert len(lin) == 1_000_000
    coords = np.stack([lin >> np.uint64(20),
                       (lin >> np.uint64(10)) & np.uint64(1023),
                       lin & np.uint64(1023)], axis=1).astype(np.int64)
    perm = curve.serialize(coords, "hilbert", 10)
    keys = curve.hilbert_encode(coords, 10)
    ref = np.lexsort((np.arange(len(keys)), keys))
    assert np.array_equal(perm, ref)
    # spot check the head against the explicit comparison sort as well
    head = serialize_reference(keys[:2000])
    assert curve.serialize(coords[:2000], "hilbert", 10).tolist() == head.tolist()


def test_serialize_stable_on_duplicate_coords():
    coords = np.array([[1, 1, 1], [0, 0, 0], [1, 1, 1]])
    assert curve.serialize(coords, "morton", 1).tolist() == [1, 0, 2]


def test_serialize_range_error():
    with pytest.raises(RangeError):
        curve.serialize(np.array([[4, 0, 0]]), "hilbert", 2)


# ---------------------------------------------------------------------------
# locality
# ---------------------------------------------------------------------------

def test_locality_two_voxel_pair():
    coords = np.array([[0, 0, 0], [0, 0, 1]])
    rep = curve.locality_stats(coords, "morton", 1)
    assert rep.mean == 1.0
    assert rep.sample_count == 1


def test_locality_no_adjacent_pair():
    coords = np.array([[0, 0, 0], [3, 3, 3]])
    with pytest.raises(EmptyReportError):
        curve.locality_stats(coords, "hilbert", 2)


def test_locality_empty_grid():
    with pytest.raises(EmptyReportError):
        curve.locality_stats(np.empty((0, 3), dtype=np.int64), "hilbert", 2)


def test_locality_stats_at_least_one():
    grid = dense_grid(2)
    for kind in ("hilbert", "morton", "random"):
        rep = curve.locality_stats(grid, kind, 2, seed=4)
        assert rep.mean >= 1.0 and rep.median >= 1.0 and rep.p90 >= 1.0


@pytest.mark.parametrize("order", [2, 3, 4])
def test_locality_ordering_dense(order):
    # exhaustive pair enumeration: sample_count above the pair count.
    # Median orders the three kinds strictly at every order here; the mean
    # does not separate hilbert from morton (both space-to-key means are
    # within a few percent, morton slightly lower), so the mean is only
    # asserted against the random baseline. See the acceptance suite for
    # the full story.
    grid = dense_grid(order)
    pairs = 3 * (1 << order) ** 2 * ((1 << order) - 1)
    hil = curve.locality_stats(grid, "hilbert", order, sample_count=pairs)
    mor = curve.locality_stats(grid, "morton", order, sample_count=pairs)
    rnd_median = np.mean([curve.locality_stats(grid, "random", order,
                                               sample_count=pairs, seed=s).median
                          for s in range(16)])
    rnd_mean = np.mean([curve.locality_stats(grid, "random", order,
                                             sample_count=pairs, seed=s).mean
                        for s in range(16)])
    assert hil.median < mor.median < rnd_median
    assert hil.mean < rnd_mean
    assert mor.mean < rnd_mean


def test_locality_deterministic_given_seed():
    rng = np.random.default_rng(0)
    coords = np.unique(rng.integers(0, 16, size=(300, 3), dtype=np.int64),
                       axis=0)
    a = curve.locality_stats(coords, "hilbert", 4, sample_count=50, seed=8)
    b = curve.locality_stats(coords, "hilbert", 4, sample_count=50, seed=8)
    assert a == b
