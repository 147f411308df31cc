"""Synthetic scenes, a toy occupancy task, and report writers.

Scenes are boxes resting on a noisy ground plane plus scattered clutter:
small, fully deterministic stand-ins for real outdoor sweeps. The toy task
trains a one-pixel linear head on the backbone's bird's-eye output to
predict which cells any box footprint covers, driving the whole backward
stack with plain stochastic gradient descent.
"""

from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneConfig,
    backbone_backward,
    backbone_forward,
    init_params,
)
from .errors import ContractError, NumericError
from .voxelgrid import GridSpec, PointCloud, voxelize

# pocket-sized architecture for demos, benchmarks, and the toy task
TOY_CONFIG = BackboneConfig(
    d_model=16, blocks=2, stages=2, downstrides=(1, 2), z_strides=(2, 2),
    curve_order=5, win_w=4, win_h=4,
    grid_min=(-8.0, -8.0, -0.5), grid_max=(8.0, 8.0, 2.5),
    voxel_size=(0.5, 0.5, 0.75), n_state=4, expand=2)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene; every field drives the same rng."""
    n_boxes: int = 2
    box_min: tuple = (1.5, 1.5, 1.0)   # meters, per axis
    box_max: tuple = (4.0, 4.0, 2.0)
    points_per_box: int = 100
    ground_points: int = 300
    clutter_points: int = 50
    area_min: tuple = (-18.0, -18.0)
    area_max: tuple = (18.0, 18.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("box_min", "box_max", "area_min", "area_max"):
            object.__setattr__(self, name,
                               tuple(float(v) for v in getattr(self, name)))
        if min(self.n_boxes, self.points_per_box, self.ground_points,
               self.clutter_points) < 0:
            raise ContractError("scene counts must all be >= 0")
        if len(self.box_min) != 3 or len(self.box_max) != 3:
            raise ContractError("box size ranges must have 3 entries")
        if any(lo > hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ContractError(
                f"box_min {self.box_min} exceeds box_max {self.box_max}")
        if any(lo >= hi for lo, hi in zip(self.area_min, self.area_max)):
            raise ContractError(
                f"area_min {self.area_min} must be below area_max "
                f"{self.area_max}")
        span = [hi - lo for lo, hi in zip(self.area_min, self.area_max)]
        if self.n_boxes and any(self.box_max[i] > span[i] for i in range(2)):
            raise ContractError("largest box footprint does not fit the area")


def gen_scene(spec):
    """Deterministic point cloud plus the (cx, cy, cz, sx, sy, sz) box list.

    Boxes are axis-aligned, rest on the z=0 plane, and are filled with
    uniform points; the ground is a Gaussian-height sheet at z=0 and the
    clutter a Gaussian blob above it. Point count is exactly
    n_boxes * points_per_box + ground_points + clutter_points.
    """
    rng = np.random.default_rng(spec.seed)
    b = spec.n_boxes
    sizes = rng.uniform(spec.box_min, spec.box_max, (b, 3))
    centers = np.empty((b, 3))
    for axis in range(2):
        centers[:, axis] = rng.uniform(
            np.asarray(spec.area_min[axis]) + sizes[:, axis] / 2,
            np.asarray(spec.area_max[axis]) - sizes[:, axis] / 2)
    centers[:, 2] = sizes[:, 2] / 2
    boxes = np.column_stack([centers, sizes])

    chunks = []
    for i in range(b):
        xyz = rng.uniform(centers[i] - sizes[i] / 2,
                          centers[i] + sizes[i] / 2,
                          (spec.points_per_box, 3))
        chunks.append(np.column_stack(
            [xyz, rng.uniform(0, 1, spec.points_per_box)]))
    if spec.ground_points:
        g = spec.ground_points
        chunks.append(np.column_stack([
            rng.uniform(spec.area_min[0], spec.area_max[0], g),
            rng.uniform(spec.area_min[1], spec.area_max[1], g),
            rng.normal(0.0, 0.05, g),
            rng.uniform(0, 1, g)]))
    if spec.clutter_points:
        c = spec.clutter_points
        chunks.append(np.column_stack([
            rng.uniform(spec.area_min[0], spec.area_max[0], c),
            rng.uniform(spec.area_min[1], spec.area_max[1], c),
            np.abs(rng.normal(1.0, 0.75, c)),
            rng.uniform(0, 1, c)]))
    pts = np.concatenate(chunks) if chunks else np.empty((0, 4))
    return PointCloud(pts), boxes


def scene_for_grid(spec, seed, n_boxes=2, points_per_box=100,
                   ground_points=300, clutter_points=50):
    """SceneSpec sized to a grid: area inset 5%, boxes a few voxels wide."""
    if not isinstance(spec, GridSpec):
        raise ContractError("scene_for_grid needs a GridSpec")
    span = [spec.range_max[i] - spec.range_min[i] for i in range(2)]
    area_min = tuple(spec.range_min[i] + 0.05 * span[i] for i in range(2))
    area_max = tuple(spec.range_max[i] - 0.05 * span[i] for i in range(2))
    z_span = spec.range_max[2] - spec.range_min[2]
    box_min = (3 * spec.voxel_size[0], 3 * spec.voxel_size[1], 0.3 * z_span)
    box_max = (min(8 * spec.voxel_size[0], 0.3 * (area_max[0] - area_min[0])),
               min(8 * spec.voxel_size[1], 0.3 * (area_max[1] - area_min[1])),
               0.5 * z_span)
    box_min = tuple(min(box_min[i], box_max[i]) for i in range(3))
    return SceneSpec(n_boxes=n_boxes, box_min=box_min, box_max=box_max,
                     points_per_box=points_per_box,
                     ground_points=ground_points,
                     clutter_points=clutter_points,
                     area_min=area_min, area_max=area_max, seed=seed)


# ---------------------------------------------------------------------------
# toy occupancy task
# ---------------------------------------------------------------------------

def occupancy_labels(boxes, spec):
    """(H, W) 0/1 grid: 1 where a cell's column intersects any box footprint."""
    labels = np.zeros((spec.extents[1], spec.extents[0]))
    for cx, cy, cz, sx, sy, sz in np.asarray(boxes).reshape(-1, 6):
        lo = ((cx - sx / 2) - spec.range_min[0]) / spec.voxel_size[0]
        hi = ((cx + sx / 2) - spec.range_min[0]) / spec.voxel_size[0]
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi)) - 1
        lo = ((cy - sy / 2) - spec.range_min[1]) / spec.voxel_size[1]
        hi = ((cy + sy / 2) - spec.range_min[1]) / spec.voxel_size[1]
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi)) - 1
        i0, j0 = max(i0, 0), max(j0, 0)
        i1 = min(i1, spec.extents[0] - 1)
        j1 = min(j1, spec.extents[1] - 1)
        if i0 <= i1 and j0 <= j1:
            labels[j0:j1 + 1, i0:i1 + 1] = 1.0
    return labels


@dataclass(frozen=True)
class ToyTask:
    """Occupancy prediction over the scenes' bird's-eye grids."""
    train_scenes: tuple   # SceneSpec per training scene
    lr: float = 0.05
    steps: int = 200

    def __post_init__(self):
        object.__setattr__(self, "train_scenes", tuple(self.train_scenes))
        if len(self.train_scenes) < 1:
            raise ContractError("need at least one training scene")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy and its gradient, numerically stable."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ContractError(f"logits {z.shape} vs labels {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    ez = np.exp(-np.abs(z))
    sigma = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    grad = (sigma - y) / z.size
    return float(loss.mean()), grad


@dataclass
class TrainResult:
    losses: np.ndarray    # (steps,) loss before each update
    params: "object"      # ModelParams after the last step
    head_w: np.ndarray    # (D,)
    head_b: float


def train_toy(config, task, seed=0, head_only=False):
    """Plain SGD on per-cell BCE of a 1x1 linear head over the BEV output.

    Deterministic given the seed (which draws the initial parameters).
    head_only freezes the backbone so only the convex head subproblem is
    optimized. A non-finite loss aborts with the failing step index.
    """
    params = init_params(config, seed)
    spec = config.grid_spec()
    data = []
    for scene in task.train_scenes:
        cloud, boxes = gen_scene(scene)
        grid = voxelize(cloud, spec, config.feature_mode)
        data.append((grid, occupancy_labels(boxes, spec)))

    head_w = np.zeros(config.d_model)
    head_b = 0.0
    losses = np.empty(task.steps)
    for step in range(task.steps):
        grid, labels = data[step % len(data)]
        try:
            bev, tape = backbone_forward(grid, params, config,
                                         want_tape=not head_only)
            logits = bev.data @ head_w + head_b
            loss, g_logits = bce_with_logits(logits, labels)
        except NumericError as e:
            raise NumericError(f"training diverged at step {step}: {e}")
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        losses[step] = loss
        g_head_w = np.einsum("hwc,hw->c", bev.data, g_logits)
        g_head_b = float(g_logits.sum())
        if not head_only and tape is not None:
            grad_bev = g_logits[:, :, None] * head_w[None, None, :]
            _, pgrads = backbone_backward(tape, grad_bev)
            for name, tensor in params.named_tensors().items():
                tensor -= task.lr * pgrads[name]
        head_w -= task.lr * g_head_w
        head_b -= task.lr * g_head_b
    return TrainResult(losses=losses, params=params, head_w=head_w,
                       head_b=head_b)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _central_diff(f, x, eps=1e-5):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.float64)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + eps
        up = f()
        flat_x[i] = keep - eps
        down = f()
        flat_x[i] = keep
        flat_o[i] = (up - down) / (2 * eps)
    return out


def _max_rel(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(got), np.abs(want)))
    return float((np.abs(got - want) / denom).max()) if got.size else 0.0


def _check_group(loss, tensors, grads):
    worst = 0.0
    for name, tensor in tensors.items():
        fd = _central_diff(loss, tensor)
        worst = max(worst, _max_rel(grads[name], fd))
    return worst


def gradcheck_report(seed=0):
    """Central-difference audit of every differentiable operation.

    Returns [(op_name, max_rel_err), ...] comparing each hand-written
    backward pass against central finite differences (64-bit, step 1e-5)
    on small random instances.
    """
    from .blocks import (dsb_backward, dsb_forward, layer_norm_bwd,
                         layer_norm_fwd, mlp_bwd, mlp_fwd)
    from .curve import curve_keys, serialize
    from .ssm import selective_scan_bwd, selective_scan_fwd
    from .blocks import SequenceTensor
    from .voxelgrid import SparseVoxelGrid

    rng = np.random.default_rng(seed)
    report = []

    x = rng.normal(size=(5, 6))
    gain = rng.normal(size=6)
    bias = rng.normal(size=6)
    like = rng.normal(size=(5, 6))
    loss = lambda: float((layer_norm_fwd(x, gain, bias)[0] * like).sum())
    _, cache = layer_norm_fwd(x, gain, bias)
    gx, gg, gb = layer_norm_bwd(cache, like)
    worst = max(_max_rel(gx, _central_diff(loss, x)),
                _max_rel(gg, _central_diff(loss, gain)),
                _max_rel(gb, _central_diff(loss, bias)))
    report.append(("layer_norm", worst))

    cfg1 = BackboneConfig(d_model=4, blocks=1, stages=1, downstrides=(2,),
                          z_strides=(1,), curve_order=3, win_w=2, win_h=2,
                          grid_min=(0.0, 0.0, 0.0), grid_max=(8.0, 8.0, 2.0),
                          voxel_size=(1.0, 1.0, 1.0), n_state=2, expand=1)
    mlp = init_params(cfg1, seed).iwe[2][0]
    xin = rng.normal(size=(4, 10))
    like = rng.normal(size=(4, 4))
    loss = lambda: float((mlp_fwd(xin, mlp)[0] * like).sum())
    _, cache = mlp_fwd(xin, mlp)
    gx, grads = mlp_bwd(cache, like)
    worst = max(_max_rel(gx, _central_diff(loss, xin)),
                _check_group(loss, mlp.tensors(), grads))
    report.append(("posembed_mlp", worst))

    for direction in ("forward", "reversed"):
        ssm = init_params(cfg1, seed + 1).blocks[0].fwd_ssm
        seq = rng.normal(size=(6, 4))
        like = rng.normal(size=(6, 4))

        def loss():
            out, _ = selective_scan_fwd(seq, ssm, direction, want_tape=False)
            return float((out * like).sum())

        _, tape = selective_scan_fwd(seq, ssm, direction)
        gseq, grads = selective_scan_bwd(tape, like)
        worst = max(_max_rel(gseq, _central_diff(loss, seq)),
                    _check_group(loss, ssm.tensors(), grads))
        report.append((f"scan_{direction}", worst))

    blk = init_params(cfg1, seed + 2).blocks[0]
    cells = rng.choice(8 * 8 * 2, size=10, replace=False)
    coords = np.column_stack([cells // 16, (cells // 2) % 8, cells % 2])
    grid = SparseVoxelGrid(coords=coords.astype(np.int64),
                           features=rng.normal(size=(10, 4)),
                           spec=cfg1.grid_spec())
    perm = serialize(grid, "hilbert", 3)
    seq = SequenceTensor(features=grid.features[perm],
                         coords=grid.coords[perm],
                         keys=curve_keys(grid.coords[perm], "hilbert", 3),
                         spec=grid.spec)
    like = rng.normal(size=(10, 4))

    def loss():
        out, _ = dsb_forward(seq, blk, "hilbert", 3, want_tape=False)
        return float((out.features * like).sum())

    _, tape = dsb_forward(seq, blk, "hilbert", 3)
    gseq, grads = dsb_backward(tape, like)
    worst = max(_max_rel(gseq, _central_diff(loss, seq.features)),
                _check_group(loss, blk.tensors(), grads))
    report.append(("dual_scale_block", worst))

    cfg2 = BackboneConfig(d_model=4, blocks=2, stages=1, downstrides=(2,),
                          z_strides=(2,), curve_order=3, win_w=2, win_h=2,
                          grid_min=(0.0, 0.0, 0.0), grid_max=(8.0, 8.0, 2.0),
                          voxel_size=(1.0, 1.0, 1.0), n_state=2, expand=1)
    params = init_params(cfg2, seed + 3)
    cells = rng.choice(8 * 8 * 2, size=12, replace=False)
    coords = np.column_stack([cells // 16, (cells // 2) % 8, cells % 2])
    grid = SparseVoxelGrid(coords=coords.astype(np.int64),
                           features=rng.normal(size=(12, 5)),
                           spec=cfg2.grid_spec())
    bev, tape = backbone_forward(grid, params, cfg2)
    like = rng.normal(size=bev.data.shape)

    def loss():
        out, _ = backbone_forward(grid, params, cfg2, want_tape=False)
        return float((out.data * like).sum())

    gin, grads = backbone_backward(tape, like)
    worst = max(_max_rel(gin, _central_diff(loss, grid.features)),
                _check_group(loss, params.named_tensors(), grads))
    report.append(("backbone", worst))
    return report


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    """8-bit binary (P5) grayscale image; header plus raw rows."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"image must be 2-d, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ContractError(f"image must be uint8, got {img.dtype}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def saliency_image(saliency, grid):
    """Scatter per-voxel saliency onto the BEV grid, max per cell,
    normalized so the brightest cell is 255."""
    values = np.asarray(saliency.values if hasattr(saliency, "values")
                        else saliency, dtype=np.float64)
    if len(values) != len(grid):
        raise ContractError(
            f"{len(values)} saliency values for {len(grid)} voxels")
    img = np.zeros((grid.spec.extents[1], grid.spec.extents[0]))
    np.maximum.at(img, (grid.coords[:, 1], grid.coords[:, 0]), values)
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.rint(img * 255).astype(np.uint8)


def write_csv(path_or_none, header, rows):
    """Tiny CSV emitter; returns the text, writing it when a path is given."""
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path_or_none is not None:
        with open(path_or_none, "w") as f:
            f.write(text)
    return text
