"""Space-filling-curve keys for sparse 3D voxels.

Three curve kinds are provided: a Hilbert curve (bit-transform encoder with a
table-driven fast path), Z-order (Morton interleave), and a keyed random
permutation used as a locality-free baseline. Keys are unsigned 64-bit
ordinals, so the per-axis order is capped at 21 (3*21 = 63 bits).

The Hilbert encoder works in two steps: an axis-transform sweep from the high
bit down (exchange the low bits of two axes when the control bit is 0, invert
when it is 1), then one global Gray decode of the interleaved word. The fast
path replaces the per-bit sweep with a state machine over the 24 cube
orientations the sweep can reach, consuming three bits per axis per lookup.
The machine is derived at runtime from the reference encoder and validated
exhaustively at small orders in the test suite.
"""

from dataclasses import dataclass
import itertools

import numpy as np

from .errors import CapacityError, EmptyReportError, RangeError

U = np.uint64

MAX_ORDER = 21
CURVE_KINDS = ("hilbert", "morton", "random")

DEFAULT_TABLE_BUDGET = 64 * 1024 * 1024  # bytes


def _check_order(order):
    order = int(order)
    if not 1 <= order <= MAX_ORDER:
        raise RangeError(f"order must be in [1, {MAX_ORDER}], got {order}")
    return order


def _check_coords(coords, order):
    coords = np.asarray(coords)
    if coords.ndim == 1:
        coords = coords.reshape(1, 3)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise RangeError(f"coords must be (V, 3), got shape {coords.shape}")
    side = 1 << order
    if coords.size and (coords.min() < 0 or coords.max() >= side):
        bad = np.argmax((coords < 0).any(axis=1) | (coords >= side).any(axis=1))
        raise RangeError(
            f"coordinate {tuple(coords[bad])} out of range for order {order}")
    return coords


# ---------------------------------------------------------------------------
# Morton (Z-order)
# ---------------------------------------------------------------------------

def _spread3(v):
    # place the 21 low bits of v at every third position of a 63-bit word
    v = v & U(0x1FFFFF)
    v = (v | (v << U(32))) & U(0x1F00000000FFFF)
    v = (v | (v << U(16))) & U(0x1F0000FF0000FF)
    v = (v | (v << U(8))) & U(0x100F00F00F00F00F)
    v = (v | (v << U(4))) & U(0x10C30C30C30C30C3)
    v = (v | (v << U(2))) & U(0x1249249249249249)
    return v


def _compact3(v):
    v = v & U(0x1249249249249249)
    v = (v | (v >> U(2))) & U(0x10C30C30C30C30C3)
    v = (v | (v >> U(4))) & U(0x100F00F00F00F00F)
    v = (v | (v >> U(8))) & U(0x1F0000FF0000FF)
    v = (v | (v >> U(16))) & U(0x1F00000000FFFF)
    v = (v | (v >> U(32))) & U(0x1FFFFF)
    return v


def _interleave3(x, y, z):
    return (_spread3(x) << U(2)) | (_spread3(y) << U(1)) | _spread3(z)


def morton_encode(coord, order):
    """Bit-interleaved key with x in the most significant slot of each triple."""
    order = _check_order(order)
    coords = _check_coords(coord, order)
    keys = _interleave3(coords[:, 0].astype(np.uint64),
                        coords[:, 1].astype(np.uint64),
                        coords[:, 2].astype(np.uint64))
    return keys if np.asarray(coord).ndim == 2 else int(keys[0])


def morton_decode(key, order):
    order = _check_order(order)
    keys = np.asarray(key, dtype=np.uint64).reshape(-1)
    if keys.size and int(keys.max()) >= (1 << (3 * order)):
        raise RangeError(f"key out of range for order {order}")
    coords = np.stack([_compact3(keys >> U(2)), _compact3(keys >> U(1)),
                       _compact3(keys)], axis=1).astype(np.int64)
    return coords if np.asarray(key).ndim else tuple(int(v) for v in coords[0])


# ---------------------------------------------------------------------------
# Hilbert: reference bit-transform encoder / decoder
# ---------------------------------------------------------------------------

def _hilbert_transform_encode(x, y, z, order):
    """Vectorized axis-transform sweep plus global Gray decode."""
    axes = [x.copy(), y.copy(), z.copy()]
    one = U(1)
    for s in range(order - 1, 0, -1):
        p = U((1 << s) - 1)
        for i in range(3):
            bit = (axes[i] >> U(s)) & one          # 1 -> invert, 0 -> exchange
            axes[0] ^= bit * p
            keep = (bit ^ one) * p
            t = (axes[0] ^ axes[i]) & keep
            axes[0] ^= t
            axes[i] ^= t
    # Gray decode of the interleaved word, folded per axis
    axes[1] ^= axes[0]
    axes[2] ^= axes[1]
    t = np.zeros_like(axes[2])
    for s in range(order - 1, 0, -1):
        t ^= ((axes[2] >> U(s)) & one) * U((1 << s) - 1)
    axes[0] ^= t
    axes[1] ^= t
    axes[2] ^= t
    return _interleave3(axes[0], axes[1], axes[2])


def _hilbert_transform_decode(keys, order):
    """Exact inverse: Gray encode the word, de-interleave, undo the sweep.

    The encoder's per-axis fold is the same thing as one global Gray decode
    of the interleaved word, so its inverse is the single-shift Gray encode.
    Each sweep step only edits bits below its control bit, so the control
    reads are still valid when the steps are replayed in reverse order, and
    every step is an involution given its control bit.
    """
    one = U(1)
    m = keys ^ (keys >> one)
    axes = [_compact3(m >> U(2)), _compact3(m >> U(1)), _compact3(m)]
    for s in range(1, order):
        p = U((1 << s) - 1)
        for i in (2, 1, 0):
            bit = (axes[i] >> U(s)) & one
            keep = (bit ^ one) * p
            t = (axes[0] ^ axes[i]) & keep
            axes[0] ^= t
            axes[i] ^= t
            axes[0] ^= bit * p
    return np.stack(axes, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Hilbert: orientation state machine and block lookup tables
# ---------------------------------------------------------------------------

def _signed_perms():
    return [(perm, flips)
            for perm in itertools.permutations(range(3))
            for flips in range(8)]


def _sp_cell(sp, cell):
    """Apply a signed axis permutation to a packed 3-bit cell (x<<2|y<<1|z)."""
    perm, flips = sp
    bits = [(cell >> 2) & 1, (cell >> 1) & 1, cell & 1]
    out = 0
    for a in range(3):
        out |= (bits[perm[a]] ^ ((flips >> (2 - a)) & 1)) << (2 - a)
    return out


def _sp_coord(sp, cx, cy, cz, order):
    perm, flips = sp
    src = (cx, cy, cz)
    mask = (1 << order) - 1
    out = []
    for a in range(3):
        v = src[perm[a]]
        if (flips >> (2 - a)) & 1:
            v = mask ^ v
        out.append(v)
    return out


def _scalar_encode(cx, cy, cz, order):
    keys = _hilbert_transform_encode(np.array([cx], dtype=np.uint64),
                                     np.array([cy], dtype=np.uint64),
                                     np.array([cz], dtype=np.uint64), order)
    return int(keys[0])


def _derive_machine():
    """Discover the orientation states reachable by the encoder.

    A state is a signed axis permutation applied to the coordinates before
    encoding. For each state, an order-2 probe checks that all 8 cells of
    each octant share one top digit and that the low digits equal the
    order-1 encoding of some signed permutation of the local cell; that
    permutation is the child state. Breadth-first search from the identity
    closes the set (24 states). Raises if the probe ever fails, which would
    mean the encoder is not octant-recursive; the test suite additionally
    cross-checks the machine against the reference encoder exhaustively.
    """
    e1 = {c: _scalar_encode((c >> 2) & 1, (c >> 1) & 1, c & 1, 1)
          for c in range(8)}
    sps = _signed_perms()
    ident = ((0, 1, 2), 0)
    states = {ident: 0}
    queue = [ident]
    trans = []
    while queue:
        st = queue.pop(0)
        table = []
        for oc in range(8):
            ox, oy, oz = (oc >> 2) & 1, (oc >> 1) & 1, oc & 1
            keys = {}
            for lc in range(8):
                cx = 2 * ox + ((lc >> 2) & 1)
                cy = 2 * oy + ((lc >> 1) & 1)
                cz = 2 * oz + (lc & 1)
                sx, sy, sz = _sp_coord(st, cx, cy, cz, 2)
                keys[lc] = _scalar_encode(sx, sy, sz, 2)
            tops = {k >> 3 for k in keys.values()}
            if len(tops) != 1:
                raise AssertionError("octant cells straddle top digits")
            child = next((cand for cand in sps
                          if all(e1[_sp_cell(cand, lc)] == (keys[lc] & 7)
                                 for lc in range(8))), None)
            if child is None:
                raise AssertionError("octant is not a signed-perm image")
            if child not in states:
                states[child] = len(states)
                queue.append(child)
            table.append((tops.pop(), states[child]))
        trans.append(table)
    n = len(states)
    digit1 = np.zeros(n * 8, dtype=np.uint32)
    next1 = np.zeros(n * 8, dtype=np.uint32)
    for sid in range(n):
        for oc in range(8):
            digit1[sid * 8 + oc], next1[sid * 8 + oc] = trans[sid][oc]
    return n, digit1, next1


def _compose_tables(dig_a, nxt_a, ka, dig_b, nxt_b, kb, n_states):
    """Tables for ka+kb levels from a ka-level (high) and kb-level (low) pair."""
    k = ka + kb
    wa, wb, w = 1 << (3 * ka), 1 << (3 * kb), 1 << (3 * k)
    idx = np.arange(w)
    kmask = (1 << k) - 1
    xs, ys, zs = idx >> (2 * k), (idx >> k) & kmask, idx & kmask
    lomask = (1 << kb) - 1
    hi = ((xs >> kb) << (2 * ka)) | ((ys >> kb) << ka) | (zs >> kb)
    lo = ((xs & lomask) << (2 * kb)) | ((ys & lomask) << kb) | (zs & lomask)
    dig = np.zeros(n_states * w, dtype=np.uint32)
    nxt = np.zeros(n_states * w, dtype=np.uint32)
    for sid in range(n_states):
        da = dig_a[sid * wa + hi]
        sa = nxt_a[sid * wa + hi]
        dig[sid * w:(sid + 1) * w] = (da << (3 * kb)) | dig_b[sa * wb + lo]
        nxt[sid * w:(sid + 1) * w] = nxt_b[sa * wb + lo]
    return dig, nxt


class _HilbertTables:
    """Packed lookup tables, one uint32 per entry: digit << state_bits | next."""

    def __init__(self):
        n, d1, n1 = _derive_machine()
        d2, n2 = _compose_tables(d1, n1, 1, d1, n1, 1, n)
        d3, n3 = _compose_tables(d2, n2, 2, d1, n1, 1, n)
        self.state_bits = max(1, int(n - 1).bit_length())
        self.packed = {}
        for k, (dig, nxt) in ((1, (d1, n1)), (2, (d2, n2)), (3, (d3, n3))):
            assert 3 * k + self.state_bits <= 32
            self.packed[k] = ((dig << np.uint32(self.state_bits))
                              | nxt.astype(np.uint32))


_tables = None


def _get_tables():
    global _tables
    if _tables is None:
        _tables = _HilbertTables()
    return _tables


def _hilbert_encode_fast(x, y, z, order):
    """Block-table encode, three levels per lookup, remainder block first."""
    tb = _get_tables()
    n = x.shape[0]
    h = np.zeros(n, dtype=np.uint64)
    st = np.zeros(n, dtype=np.uint32)
    tmp = np.empty(n, dtype=np.uint64)
    idx = np.empty(n, dtype=np.uint32)
    sbits = np.uint32(tb.state_bits)
    smask = np.uint32((1 << tb.state_bits) - 1)
    ks = ([order % 3] if order % 3 else []) + [3] * (order // 3)
    s = order
    for k in ks:
        s -= k
        lut = tb.packed[k]
        kmask = U((1 << k) - 1)
        np.right_shift(x, U(s), out=tmp)
        np.bitwise_and(tmp, kmask, out=tmp)
        np.left_shift(tmp, U(2 * k), out=tmp)
        idx[:] = tmp
        np.right_shift(y, U(s), out=tmp)
        np.bitwise_and(tmp, kmask, out=tmp)
        np.left_shift(tmp, U(k), out=tmp)
        np.bitwise_or(idx, tmp.astype(np.uint32), out=idx)
        np.right_shift(z, U(s), out=tmp)
        np.bitwise_and(tmp, kmask, out=tmp)
        np.bitwise_or(idx, tmp.astype(np.uint32), out=idx)
        np.multiply(st, np.uint32(1 << (3 * k)), out=st)
        np.add(idx, st, out=idx)
        g = lut[idx]
        np.bitwise_and(g, smask, out=st)
        np.left_shift(h, U(3 * k), out=h)
        np.bitwise_or(h, (g >> sbits).astype(np.uint64), out=h)
    return h


def hilbert_encode(coord, order):
    """Hilbert traversal position of one coordinate or a (V, 3) batch."""
    order = _check_order(order)
    coords = _check_coords(coord, order)
    x = np.ascontiguousarray(coords[:, 0], dtype=np.uint64)
    y = np.ascontiguousarray(coords[:, 1], dtype=np.uint64)
    z = np.ascontiguousarray(coords[:, 2], dtype=np.uint64)
    keys = _hilbert_encode_fast(x, y, z, order)
    return keys if np.asarray(coord).ndim == 2 else int(keys[0])


def hilbert_decode(key, order):
    """Inverse of hilbert_encode; accepts one key or an array."""
    order = _check_order(order)
    keys = np.asarray(key, dtype=np.uint64).reshape(-1)
    if keys.size and int(keys.max()) >= (1 << (3 * order)):
        raise RangeError(f"key out of range for order {order}")
    coords = _hilbert_transform_decode(keys.copy(), order)
    return coords if np.asarray(key).ndim else tuple(int(v) for v in coords[0])


# ---------------------------------------------------------------------------
# keyed random permutation
# ---------------------------------------------------------------------------

def _mix64(v):
    # splitmix64 finalizer, used to derive round constants from the seed
    v = (v + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    v = ((v ^ (v >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    v = ((v ^ (v >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return v ^ (v >> 31)


def random_key(coord, order, seed):
    """Keyed bijective bit mixing of the interleaved coordinate.

    Rounds of xor-shift and odd multiplication modulo 2**(3*order); both are
    invertible on that ring, so the composition is a permutation. Stateless
    and deterministic for a given (order, seed).
    """
    order = _check_order(order)
    coords = _check_coords(coord, order)
    bits = 3 * order
    mask = U((1 << bits) - 1)
    v = _interleave3(coords[:, 0].astype(np.uint64),
                     coords[:, 1].astype(np.uint64),
                     coords[:, 2].astype(np.uint64))
    state = _mix64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    for _ in range(3):
        state = _mix64(state)
        mult = U((state | 1) & ((1 << bits) - 1))
        shift = U(max(1, (state >> 57) % bits))
        v ^= v >> shift
        v &= mask
        v *= mult
        v &= mask
    return v if np.asarray(coord).ndim == 2 else int(v[0])


# ---------------------------------------------------------------------------
# public types and batch operations
# ---------------------------------------------------------------------------

def _encode_kind(coords, kind, order, seed=0):
    if kind == "hilbert":
        return hilbert_encode(coords, order)
    if kind == "morton":
        return morton_encode(coords, order)
    if kind == "random":
        return random_key(coords, order, seed)
    raise RangeError(f"unknown curve kind {kind!r}; expected one of {CURVE_KINDS}")


@dataclass(frozen=True)
class CurveTable:
    """Dense coordinate-to-key template: keys[(x << 2m) | (y << m) | z]."""
    kind: str
    order: int
    seed: int
    keys: np.ndarray

    def lookup(self, coords):
        coords = _check_coords(coords, self.order)
        m = U(self.order)
        lin = ((coords[:, 0].astype(np.uint64) << (m + m))
               | (coords[:, 1].astype(np.uint64) << m)
               | coords[:, 2].astype(np.uint64))
        return self.keys[lin]


def build_curve_table(kind, order, seed=0, byte_budget=DEFAULT_TABLE_BUDGET):
    """Precompute every cell's key; refuses budgets the table would exceed."""
    order = _check_order(order)
    entries = 1 << (3 * order)
    need = entries * 8
    if need > byte_budget:
        raise CapacityError(
            f"table for order {order} needs {need} bytes "
            f"({entries} entries x 8), budget is {byte_budget}")
    side = 1 << order
    ax = np.arange(side, dtype=np.uint64)
    x = np.repeat(ax, side * side)
    y = np.tile(np.repeat(ax, side), side)
    z = np.tile(ax, side * side)
    keys = _encode_kind(np.stack([x, y, z], axis=1), kind, order, seed)
    return CurveTable(kind=kind, order=order, seed=seed, keys=keys)


def _grid_coords(grid):
    coords = getattr(grid, "coords", grid)
    return np.asarray(coords)


def curve_keys(coords, kind, order, seed=0, table=None):
    """Key per coordinate row for the chosen curve kind."""
    order = _check_order(order)
    coords = _check_coords(coords, order)
    if table is not None:
        if table.kind != kind or table.order != order:
            raise RangeError(
                f"table is for ({table.kind}, order {table.order}), "
                f"requested ({kind}, order {order})")
        return table.lookup(coords)
    return _encode_kind(coords, kind, order, seed)


def serialize(grid, kind, order, table=None, seed=0):
    """Permutation putting voxels in ascending key order, stable on ties.

    When 3*order plus the index width fits one 64-bit word, keys and indices
    are packed into a single array so one radix sort does the whole job;
    otherwise a stable argsort is used. Both give the same permutation.
    """
    order = _check_order(order)
    coords = _check_coords(_grid_coords(grid), order)
    if table is not None:
        if table.kind != kind or table.order != order:
            raise RangeError(
                f"table is for ({table.kind}, order {table.order}), "
                f"requested ({kind}, order {order})")
        keys = table.lookup(coords)
    else:
        keys = _encode_kind(coords, kind, order, seed)
    n = len(keys)
    if n <= 1:
        return np.arange(n, dtype=np.int64)
    idx_bits = max(1, int(n - 1).bit_length())
    if 3 * order + idx_bits <= 64:
        packed = (keys << U(idx_bits)) | np.arange(n, dtype=np.uint64)
        packed.sort(kind="stable")
        return (packed & U((1 << idx_bits) - 1)).astype(np.int64)
    return np.argsort(keys, kind="stable").astype(np.int64)


@dataclass(frozen=True)
class LocalityReport:
    kind: str
    order: int
    mean: float
    median: float
    p90: float
    sample_count: int


def locality_stats(grid, kind, order, sample_count=10000, seed=0):
    """Key-distance statistics over sampled unit-Manhattan voxel pairs.

    All +axis neighbor pairs present in the grid are enumerated, then at most
    sample_count of them are drawn without replacement. The seed drives both
    the sampling and the random curve kind.
    """
    order = _check_order(order)
    coords = _check_coords(_grid_coords(grid), order)
    if len(coords) == 0:
        raise EmptyReportError("empty voxel set")
    m = U(order)
    lin = ((coords[:, 0].astype(np.uint64) << (m + m))
           | (coords[:, 1].astype(np.uint64) << m)
           | coords[:, 2].astype(np.uint64))
    lut = {int(v): i for i, v in enumerate(lin)}
    side = 1 << order
    pairs = []
    for axis, step in ((0, U(1) << (m + m)), (1, U(1) << m), (2, U(1))):
        ok = coords[:, axis] + 1 < side
        cand = lin[ok] + step
        src = np.flatnonzero(ok)
        for s, c in zip(src, cand):
            j = lut.get(int(c))
            if j is not None:
                pairs.append((s, j))
    if not pairs:
        raise EmptyReportError("no unit-Manhattan adjacent voxel pair in grid")
    pairs = np.array(pairs, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if len(pairs) > sample_count:
        pairs = pairs[rng.choice(len(pairs), size=sample_count, replace=False)]
    keys = _encode_kind(coords, kind, order, seed)
    delta = np.abs(keys[pairs[:, 0]].astype(np.int64)
                   - keys[pairs[:, 1]].astype(np.int64)).astype(np.float64)
    return LocalityReport(kind=kind, order=order,
                          mean=float(delta.mean()),
                          median=float(np.median(delta)),
                          p90=float(np.percentile(delta, 90)),
                          sample_count=len(delta))
