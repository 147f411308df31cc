"""Point clouds to deduplicated sparse voxel grids, plus the resolution
operations around them: strided downsampling with parent maps, broadcast
upsampling, Z-axis merging, and dense BEV scatter.

Feature accumulation always runs in 64-bit after sorting points into a
canonical order (voxel index, then point values), so voxelization is
bitwise deterministic under any permutation of the input points.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class PointCloud:
    """Flat point list: rows of (x, y, z, intensity). May be empty."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ShapeError(f"points must be (N, 4), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class GridSpec:
    """Bounded grid: world range per axis and voxel edge lengths in meters."""
    range_min: tuple
    range_max: tuple
    voxel_size: tuple

    def __post_init__(self):
        rmin = tuple(float(v) for v in self.range_min)
        rmax = tuple(float(v) for v in self.range_max)
        size = tuple(float(v) for v in self.voxel_size)
        if len(rmin) != 3 or len(rmax) != 3 or len(size) != 3:
            raise ShapeError("range_min, range_max, voxel_size must have 3 entries")
        if any(s <= 0 for s in size):
            raise ContractError(f"voxel_size must be positive, got {size}")
        if any(b <= a for a, b in zip(rmin, rmax)):
            raise ContractError("range_max must exceed range_min per axis")
        object.__setattr__(self, "range_min", rmin)
        object.__setattr__(self, "range_max", rmax)
        object.__setattr__(self, "voxel_size", size)
        ext = tuple(int(np.ceil((b - a) / s - 1e-9))
                    for a, b, s in zip(rmin, rmax, size))
        if any(e < 1 for e in ext):
            raise ContractError(f"grid extents must be >= 1, got {ext}")
        if any(e >= 1 << 32 for e in ext):
            raise ContractError(f"grid extents must fit 32 bits, got {ext}")
        object.__setattr__(self, "extents", ext)

    def voxel_center(self, coords):
        coords = np.asarray(coords, dtype=np.float64)
        mins = np.array(self.range_min)
        size = np.array(self.voxel_size)
        return mins + (coords + 0.5) * size

    def scaled(self, stride):
        """Spec of the grid after integer-strided downsampling."""
        size = tuple(s * st for s, st in zip(self.voxel_size, stride))
        rmax = tuple(a + s * int(np.ceil(e / st))
                     for a, s, e, st in zip(self.range_min, size,
                                            self.extents, stride))
        return GridSpec(self.range_min, rmax, size)


# desk-scale default: paper-scale voxel edges on a 128 x 128 x 32 grid
DEFAULT_GRID = GridSpec(range_min=(-20.48, -20.48, -2.0),
                        range_max=(20.48, 20.48, 4.0),
                        voxel_size=(0.32, 0.32, 0.1875))


@dataclass
class SparseVoxelGrid:
    """Unique integer voxel coordinates with aligned per-voxel features."""
    coords: np.ndarray     # (V, 3) int64, columns i, j, k
    features: np.ndarray   # (V, C)
    spec: GridSpec
    report: "VoxelizeReport | None" = None

    @property
    def channels(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.coords)


@dataclass(frozen=True)
class VoxelizeReport:
    n_points: int
    n_nonfinite: int
    n_out_of_range: int
    n_voxels: int


@dataclass(frozen=True)
class ParentMap:
    """Fine-to-coarse assignment from a strided downsampling."""
    parent: np.ndarray   # (V_fine,) int64 coarse index per fine voxel
    counts: np.ndarray   # (V_coarse,) int64 children per coarse voxel

    @property
    def n_fine(self):
        return len(self.parent)

    @property
    def n_coarse(self):
        return len(self.counts)


@dataclass
class BEVMap:
    """Dense bird's-eye-view grid; data[j, i, :] is the cell feature."""
    data: np.ndarray     # (H, W, C)
    empty_input: bool = False

    @property
    def h(self):
        return self.data.shape[0]

    @property
    def w(self):
        return self.data.shape[1]

    @property
    def c(self):
        return self.data.shape[2]


FEATURE_MODES = ("raw5", "mean4")


def raw_feature_width(feature_mode):
    if feature_mode == "raw5":
        return 5
    if feature_mode == "mean4":
        return 4
    raise ContractError(
        f"unknown feature_mode {feature_mode!r}; expected one of {FEATURE_MODES}")


def _canonical_point_order(vox, pts):
    # voxel index is the primary key; point values break ties so the
    # accumulation order is a total order independent of input order
    return np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0],
                       vox[:, 2], vox[:, 1], vox[:, 0]))


def voxelize(points, spec, feature_mode="raw5"):
    """Mean-pool points into occupied voxels.

    raw5 features are (x - cx, y - cy, z - cz, intensity, 1) relative to the
    voxel center; mean4 features are plain (x, y, z, intensity). Non-finite
    points and points outside the range are dropped and counted in the
    report; the upper range boundary is exclusive.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 4)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ShapeError(f"points must be (N, 4), got {pts.shape}")
    n_total = len(pts)
    finite = np.isfinite(pts).all(axis=1)
    n_nonfinite = int(n_total - finite.sum())
    pts = pts[finite]
    mins = np.array(spec.range_min)
    size = np.array(spec.voxel_size)
    ext = np.array(spec.extents)
    vox = np.floor((pts[:, :3] - mins) / size).astype(np.int64)
    in_range = ((vox >= 0).all(axis=1) & (vox < ext).all(axis=1)
                & (pts[:, :3] < np.array(spec.range_max)).all(axis=1))
    n_out = int(len(pts) - in_range.sum())
    pts = pts[in_range]
    vox = vox[in_range]

    width = raw_feature_width(feature_mode)
    if len(pts) == 0:
        return SparseVoxelGrid(
            coords=np.empty((0, 3), dtype=np.int64),
            features=np.empty((0, width), dtype=np.float32),
            spec=spec,
            report=VoxelizeReport(n_total, n_nonfinite, n_out, 0))

    order = _canonical_point_order(vox, pts)
    vox = vox[order]
    pts = pts[order]
    boundary = np.empty(len(vox), dtype=bool)
    boundary[0] = True
    boundary[1:] = (np.diff(vox, axis=0) != 0).any(axis=1)
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, len(vox)))
    coords = vox[starts]

    if feature_mode == "raw5":
        centers = spec.voxel_center(vox)
        raw = np.concatenate([pts[:, :3] - centers, pts[:, 3:4],
                              np.ones((len(pts), 1))], axis=1)
    else:
        raw = pts
    sums = np.add.reduceat(raw, starts, axis=0)
    feats = (sums / counts[:, None]).astype(np.float32)
    return SparseVoxelGrid(
        coords=coords, features=feats, spec=spec,
        report=VoxelizeReport(n_total, n_nonfinite, n_out, len(coords)))


def downsample(grid, stride):
    """Floor-divide coordinates by the stride and mean-pool child features.

    Coarse voxels come out in lexicographic coordinate order, so the result
    is a function of the voxel set only.
    """
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or any(s < 1 for s in stride):
        raise ContractError(f"stride must be 3 integers >= 1, got {stride}")
    coarse_all = grid.coords // np.array(stride, dtype=np.int64)
    order = np.lexsort((coarse_all[:, 2], coarse_all[:, 1], coarse_all[:, 0]))
    sorted_coarse = coarse_all[order]
    boundary = np.empty(len(sorted_coarse), dtype=bool)
    if len(sorted_coarse):
        boundary[0] = True
        boundary[1:] = (np.diff(sorted_coarse, axis=0) != 0).any(axis=1)
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, len(sorted_coarse)))
    parent = np.empty(len(grid.coords), dtype=np.int64)
    parent[order] = np.repeat(np.arange(len(starts)), counts)
    pmap = ParentMap(parent=parent, counts=counts)
    coarse_grid = SparseVoxelGrid(
        coords=sorted_coarse[starts] if len(starts) else
        np.empty((0, 3), dtype=np.int64),
        features=pool_mean(grid.features, pmap),
        spec=grid.spec.scaled(stride))
    return coarse_grid, pmap


def pool_mean(features, pmap):
    """Per-parent mean of child features; accumulates in 64-bit."""
    if len(features) != pmap.n_fine:
        raise ShapeError(f"{len(features)} features for {pmap.n_fine} fine voxels")
    acc = np.zeros((pmap.n_coarse, features.shape[1]), dtype=np.float64)
    np.add.at(acc, pmap.parent, features.astype(np.float64))
    acc /= pmap.counts[:, None]
    return acc.astype(features.dtype)


def segment_sum(values, pmap):
    """Adjoint of upsample: sum child values into their parents."""
    if len(values) != pmap.n_fine:
        raise ShapeError(f"{len(values)} values for {pmap.n_fine} fine voxels")
    acc = np.zeros((pmap.n_coarse, values.shape[1]), dtype=values.dtype)
    np.add.at(acc, pmap.parent, values)
    return acc


def upsample(coarse_features, pmap):
    """Broadcast each parent's feature vector to its children."""
    if len(coarse_features) != pmap.n_coarse:
        raise ShapeError(
            f"{len(coarse_features)} coarse features for {pmap.n_coarse} parents")
    return coarse_features[pmap.parent]


def z_merge(grid, z_stride):
    """Downsample along the Z axis only; returns (grid, parent map)."""
    z_stride = int(z_stride)
    if z_stride < 1:
        raise ContractError(f"z_stride must be >= 1, got {z_stride}")
    return downsample(grid, (1, 1, z_stride))


def scatter_bev(grid):
    """Scatter a fully Z-merged grid into a dense (H, W, C) feature image."""
    ext = grid.spec.extents
    if ext[2] != 1:
        raise ContractError(
            f"scatter_bev needs k-extent 1, grid has extent {ext[2]}; "
            "z_merge the grid first")
    h, w = ext[1], ext[0]
    data = np.zeros((h, w, grid.channels), dtype=grid.features.dtype)
    if len(grid):
        data[grid.coords[:, 1], grid.coords[:, 0]] = grid.features
    return BEVMap(data=data, empty_input=len(grid) == 0)


def scatter_bev_adjoint(grad_bev, grid):
    """Gradient of scatter_bev with respect to the sparse features."""
    return grad_bev[grid.coords[:, 1], grid.coords[:, 0]]


# ---------------------------------------------------------------------------
# file interfaces
# ---------------------------------------------------------------------------

def load_points(path):
    """Headerless little-endian float32 N x 4 file (x, y, z, intensity)."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ShapeError(
            f"{path}: {raw.size} floats is not a multiple of 4")
    return PointCloud(raw.reshape(-1, 4).astype(np.float64))


def save_points(points, path):
    pts = np.asarray(getattr(points, "points", points), dtype="<f4")
    pts.reshape(-1, 4).tofile(path)


def save_bev(bev, path):
    """Flat float32 file in row-major (j, i, channel) order plus a JSON
    sidecar holding H, W, C."""
    np.ascontiguousarray(bev.data, dtype="<f4").tofile(path)
    with open(path + ".json", "w") as f:
        json.dump({"H": bev.h, "W": bev.w, "C": bev.c}, f)
        f.write("\n")


def load_bev(path):
    with open(path + ".json") as f:
        meta = json.load(f)
    data = np.fromfile(path, dtype="<f4")
    h, w, c = int(meta["H"]), int(meta["W"]), int(meta["C"])
    if data.size != h * w * c:
        raise ShapeError(
            f"{path}: {data.size} floats, sidecar says {h}x{w}x{c}")
    return BEVMap(data=data.reshape(h, w, c).astype(np.float64))
