"""Full sparse-voxel sequence backbone.

The pipeline voxelizes a point cloud, embeds raw voxel features, runs the
dual-scale blocks stage by stage as one serialized sequence (merging along
Z at each stage end), and scatters the survivors into a dense bird's-eye
feature image. Parameters initialize deterministically from a seed and
round-trip through a small binary tensor format. Saliency maps trace one
output cell's gradient back to every input voxel.
"""

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .blocks import (
    DSBParams,
    MLPParams,
    SequenceTensor,
    WindowSpec,
    dsb_backward,
    dsb_forward,
    IWE_WIDTH,
)
from .curve import CURVE_KINDS, curve_keys, serialize
from .errors import ContractError, FormatError, RangeError, ShapeError
from .ssm import CONV_WIDTH, SelectiveSSMParams, softplus_inv
from .voxelgrid import (
    BEVMap,
    GridSpec,
    PointCloud,
    SparseVoxelGrid,
    raw_feature_width,
    scatter_bev,
    scatter_bev_adjoint,
    segment_sum,
    upsample,
    voxelize,
    z_merge,
)

WEIGHTS_MAGIC = b"VXMB"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    """Architecture plus grid description, fully JSON round-trippable."""
    d_model: int = 128
    blocks: int = 6
    stages: int = 3
    downstrides: tuple = (1, 2, 4)
    z_strides: tuple = (2, 2, 2)
    curve_kind: str = "hilbert"
    curve_order: int = 7
    win_w: int = 8
    win_h: int = 8
    scale_win: bool = False
    grid_min: tuple = (-20.48, -20.48, -2.0)
    grid_max: tuple = (20.48, 20.48, 4.0)
    voxel_size: tuple = (0.32, 0.32, 0.1875)
    n_state: int = 16
    expand: int = 2
    feature_mode: str = "raw5"
    grouped: bool = False
    group_size: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("downstrides", "z_strides", "grid_min", "grid_max",
                     "voxel_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.d_model < 1:
            raise ContractError(f"d_model must be >= 1, got {self.d_model}")
        if self.blocks < 1 or self.stages < 1:
            raise ContractError("need at least one block and one stage")
        if self.blocks % self.stages:
            raise ContractError(
                f"{self.blocks} blocks do not divide into {self.stages} "
                "stages")
        for name in ("downstrides", "z_strides"):
            strides = getattr(self, name)
            if len(strides) != self.stages:
                raise ContractError(
                    f"{name} must list one value per stage "
                    f"({self.stages}), got {len(strides)}")
            if any(int(s) < 1 for s in strides):
                raise ContractError(f"{name} must all be >= 1, got {strides}")
        if self.curve_kind not in CURVE_KINDS:
            raise ContractError(
                f"curve_kind must be one of {CURVE_KINDS}, "
                f"got {self.curve_kind!r}")
        if self.n_state < 1 or self.expand < 1:
            raise ContractError("n_state and expand must be >= 1")
        if self.group_size < 1:
            raise ContractError(
                f"group_size must be >= 1, got {self.group_size}")
        spec = self.grid_spec()  # validates grid geometry
        side = 1 << self.curve_order
        if max(spec.extents) > side:
            raise ContractError(
                f"grid extents {spec.extents} exceed the order-"
                f"{self.curve_order} curve cube of side {side}")
        raw_feature_width(self.feature_mode)  # validates the mode name

    def grid_spec(self):
        return GridSpec(self.grid_min, self.grid_max, self.voxel_size)

    def window(self):
        return WindowSpec(self.win_w, self.win_h)

    @property
    def blocks_per_stage(self):
        return self.blocks // self.stages

    @property
    def d_inner(self):
        return self.expand * self.d_model

    def to_json(self):
        doc = {}
        for f in fields(self):
            v = getattr(self, f.name)
            doc[f.name] = list(v) if isinstance(v, tuple) else v
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"config is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise FormatError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """All learnable tensors.

    Blocks with the same coarse-branch stride share one pair of positional
    MLPs; `iwe` maps stride -> (fine, coarse) and owns those objects, and
    the per-block DSBParams hold references into it.
    """
    config: BackboneConfig
    embed_w: np.ndarray   # (D, raw_width)
    embed_b: np.ndarray   # (D,)
    blocks: list          # [DSBParams]
    iwe: dict             # stride -> (MLPParams fine, MLPParams coarse)
    merge_w: list         # per stage (D, D)
    merge_b: list         # per stage (D,)

    def named_tensors(self):
        """Flat name -> array view of every distinct parameter tensor."""
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.tensors().items():
                if not name.startswith("iwe_"):
                    out[f"block{i}.{name}"] = arr
        for stride in sorted(self.iwe):
            fine, coarse = self.iwe[stride]
            for label, mlp in (("fine", fine), ("coarse", coarse)):
                for name, arr in mlp.tensors().items():
                    out[f"iwe_s{stride}.{label}.{name}"] = arr
        for s in range(len(self.merge_w)):
            out[f"merge{s}.w"] = self.merge_w[s]
            out[f"merge{s}.b"] = self.merge_b[s]
        return out

    def n_params(self):
        return sum(int(t.size) for t in self.named_tensors().values())

    def validate(self):
        for name, arr in self.named_tensors().items():
            if not np.isfinite(arr).all():
                raise ContractError(f"tensor {name} contains non-finite "
                                    "values")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _init_ssm(rng, d, di, n):
    return SelectiveSSMParams(
        w_in=_uniform(rng, (2 * di, d), d),
        conv_k=_uniform(rng, (di, CONV_WIDTH), CONV_WIDTH),
        conv_b=_uniform(rng, (di,), CONV_WIDTH),
        w_delta=_uniform(rng, (di,), di),
        b_delta=softplus_inv(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1)))),
        w_b=_uniform(rng, (n, di), di),
        b_b=_uniform(rng, (n,), di),
        w_c=_uniform(rng, (n, di), di),
        b_c=_uniform(rng, (n,), di),
        a_log=np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (di, 1)),
        d_skip=np.ones(di),
        w_out=_uniform(rng, (d, di), di),
    )


def _init_mlp(rng, d):
    hidden = d
    return MLPParams(w1=_uniform(rng, (hidden, IWE_WIDTH), IWE_WIDTH),
                     b1=_uniform(rng, (hidden,), IWE_WIDTH),
                     w2=_uniform(rng, (d, hidden), hidden),
                     b2=_uniform(rng, (d,), hidden))


def init_params(config, seed=None):
    """Deterministic parameter draw: same config and seed, same bits.

    Linear weights and biases are fan-in-scaled uniform; the state decay
    logs start at log(1..N) for every channel; the step-size bias is the
    softplus inverse of a log-uniform draw from [1e-3, 1e-1]; norm gains
    start at 1 and the skip gains at 1, so blocks are NOT identities.
    """
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    d, di, n = config.d_model, config.d_inner, config.n_state
    raw = raw_feature_width(config.feature_mode)

    embed_w = _uniform(rng, (d, raw), raw)
    embed_b = _uniform(rng, (d,), raw)

    block_ssms = [( _init_ssm(rng, d, di, n), _init_ssm(rng, d, di, n))
                  for _ in range(config.blocks)]
    iwe = {stride: (_init_mlp(rng, d), _init_mlp(rng, d))
           for stride in sorted(set(config.downstrides))}
    merge_w = [_uniform(rng, (d, d), d) for _ in range(config.stages)]
    merge_b = [_uniform(rng, (d,), d) for _ in range(config.stages)]

    win = config.window()
    blocks = []
    for i in range(config.blocks):
        stride = int(config.downstrides[i // config.blocks_per_stage])
        fine, coarse = iwe[stride]
        fwd, bwd = block_ssms[i]
        blocks.append(DSBParams(
            fwd_ssm=fwd, bwd_ssm=bwd,
            ln_f_gain=np.ones(d), ln_f_bias=np.zeros(d),
            ln_b_gain=np.ones(d), ln_b_bias=np.zeros(d),
            iwe_fine=fine, iwe_coarse=coarse,
            win=win, stride=stride, scale_win=config.scale_win))
    return ModelParams(config=config, embed_w=embed_w, embed_b=embed_b,
                       blocks=blocks, iwe=iwe, merge_w=merge_w,
                       merge_b=merge_b)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    pmap: "object"        # fine -> merged parent map (mean pool)
    lin_in: np.ndarray    # merged features entering the stage linear map
    perm: np.ndarray      # serialization permutation after the merge


@dataclass
class BackboneTape:
    config: BackboneConfig
    params: ModelParams
    in_grid: SparseVoxelGrid
    perm0: np.ndarray
    block_tapes: list
    stage_records: list
    final_grid: SparseVoxelGrid
    final_pmap: "object"  # None when the grid was already flat in Z


def _as_sequence(grid, config):
    perm = serialize(grid, config.curve_kind, config.curve_order)
    coords = grid.coords[perm]
    keys = curve_keys(coords, config.curve_kind, config.curve_order)
    return SequenceTensor(features=grid.features[perm], coords=coords,
                          keys=keys, spec=grid.spec), perm


def backbone_forward(inp, params, config, want_tape=True):
    """Point cloud or voxel grid -> dense bird's-eye feature map.

    Returns (BEVMap, tape); the tape is None for want_tape=False or when
    the input voxelizes to nothing (the map is then all zeros and flagged).
    """
    spec = config.grid_spec()
    if isinstance(inp, PointCloud):
        grid = voxelize(inp, spec, config.feature_mode)
    elif isinstance(inp, SparseVoxelGrid):
        grid = inp
    else:
        raise ContractError(
            f"input must be a PointCloud or SparseVoxelGrid, "
            f"got {type(inp).__name__}")
    if grid.features.shape[1] != params.embed_w.shape[1]:
        raise ContractError(
            f"grid has {grid.features.shape[1]}-wide features, embedding "
            f"expects {params.embed_w.shape[1]}")
    if len(grid) == 0:
        data = np.zeros((spec.extents[1], spec.extents[0], config.d_model))
        return BEVMap(data=data, empty_input=True), None

    group = config.group_size if config.grouped else None
    emb = grid.features @ params.embed_w.T + params.embed_b
    cur = SparseVoxelGrid(coords=grid.coords, features=emb, spec=grid.spec)
    seq, perm0 = _as_sequence(cur, config)

    block_tapes = []
    stage_records = []
    bi = 0
    for s in range(config.stages):
        for _ in range(config.blocks_per_stage):
            seq, tape = dsb_forward(seq, params.blocks[bi], config.curve_kind,
                                    config.curve_order, group_size=group,
                                    want_tape=want_tape)
            block_tapes.append(tape)
            bi += 1
        stage_grid = SparseVoxelGrid(coords=seq.coords, features=seq.features,
                                     spec=seq.spec)
        merged, pmap = z_merge(stage_grid, config.z_strides[s])
        lin_in = merged.features
        lin_out = lin_in @ params.merge_w[s].T + params.merge_b[s]
        merged = SparseVoxelGrid(coords=merged.coords, features=lin_out,
                                 spec=merged.spec)
        seq, perm = _as_sequence(merged, config)
        stage_records.append(StageRecord(pmap=pmap, lin_in=lin_in, perm=perm)
                             if want_tape else None)

    final_grid = SparseVoxelGrid(coords=seq.coords, features=seq.features,
                                 spec=seq.spec)
    final_pmap = None
    if final_grid.spec.extents[2] > 1:
        # whatever Z structure survives the configured merges is collapsed
        # here so the scatter below always sees a flat grid
        final_grid, final_pmap = z_merge(final_grid,
                                         final_grid.spec.extents[2])
    bev = scatter_bev(final_grid)
    if not want_tape:
        return bev, None
    tape = BackboneTape(config=config, params=params, in_grid=grid,
                        perm0=perm0, block_tapes=block_tapes,
                        stage_records=stage_records, final_grid=final_grid,
                        final_pmap=final_pmap)
    return bev, tape


def backbone_backward(tape, grad_bev):
    """Reverse-mode pass: BEV gradient -> (input-feature grads, param grads).

    grad_inputs is the gradient with respect to the voxelized input grid's
    feature matrix; param grads are keyed like ModelParams.named_tensors(),
    with shared positional MLPs accumulated across the blocks using them.
    """
    config, params = tape.config, tape.params
    grad_bev = np.asarray(grad_bev, dtype=np.float64)
    h, w = tape.final_grid.spec.extents[1], tape.final_grid.spec.extents[0]
    if grad_bev.shape != (h, w, config.d_model):
        raise ShapeError(f"grad_bev must be ({h}, {w}, {config.d_model}), "
                         f"got {grad_bev.shape}")
    grads = {name: np.zeros_like(arr)
             for name, arr in params.named_tensors().items()}

    g = scatter_bev_adjoint(grad_bev, tape.final_grid)
    if tape.final_pmap is not None:
        g = upsample(g / tape.final_pmap.counts[:, None], tape.final_pmap)

    bi = config.blocks - 1
    for s in reversed(range(config.stages)):
        rec = tape.stage_records[s]
        g_lin_out = np.empty_like(g)
        g_lin_out[rec.perm] = g
        grads[f"merge{s}.w"] += g_lin_out.T @ rec.lin_in
        grads[f"merge{s}.b"] += g_lin_out.sum(axis=0)
        g_lin_in = g_lin_out @ params.merge_w[s]
        g = upsample(g_lin_in / rec.pmap.counts[:, None], rec.pmap)
        for _ in range(config.blocks_per_stage):
            stride = params.blocks[bi].stride
            g, bgrads = dsb_backward(tape.block_tapes[bi], g)
            for name, val in bgrads.items():
                if name.startswith("iwe_fine."):
                    key = f"iwe_s{stride}.fine.{name[len('iwe_fine.'):]}"
                elif name.startswith("iwe_coarse."):
                    key = f"iwe_s{stride}.coarse.{name[len('iwe_coarse.'):]}"
                else:
                    key = f"block{bi}.{name}"
                grads[key] += val
            bi -= 1

    g_emb = np.empty_like(g)
    g_emb[tape.perm0] = g
    grads["embed.w"] += g_emb.T @ tape.in_grid.features
    grads["embed.b"] += g_emb.sum(axis=0)
    grad_inputs = g_emb @ params.embed_w
    return grad_inputs, grads


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaliencyMap:
    """Per-input-voxel response magnitudes for chosen output cells."""
    values: np.ndarray   # (V_in,) >= 0
    targets: tuple       # input-voxel row indices the map was merged over
    reduction: str

    def __post_init__(self):
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=np.float64))

    def support(self, frac=0.01):
        """Voxels whose saliency reaches `frac` of the maximum."""
        peak = self.values.max() if len(self.values) else 0.0
        if peak <= 0.0:
            return 0
        return int(np.count_nonzero(self.values >= frac * peak))


def erf_saliency(params, config, grid, targets, reduction="sum"):
    """Gradient-based receptive field of the output cells above `targets`.

    Each target names an input-voxel row; the scalar read out is the sum
    over channels of the output feature at that voxel's (x, y) cell. One
    backward pass per target gives |d readout / d input features| summed
    over input channels; several targets merge by elementwise max.
    """
    if reduction != "sum":
        raise ContractError(f"unsupported reduction {reduction!r}")
    if np.ndim(targets) == 0:
        targets = [targets]
    targets = [int(t) for t in targets]
    if not targets:
        raise ContractError("need at least one target voxel")
    for t in targets:
        if not 0 <= t < len(grid):
            raise RangeError(
                f"target voxel {t} is not in the voxel set of {len(grid)}")
    bev, tape = backbone_forward(grid, params, config)
    merged = np.zeros(len(grid))
    for t in targets:
        grad_bev = np.zeros_like(bev.data, dtype=np.float64)
        grad_bev[grid.coords[t, 1], grid.coords[t, 0], :] = 1.0
        grad_inputs, _ = backbone_backward(tape, grad_bev)
        merged = np.maximum(merged, np.abs(grad_inputs).sum(axis=1))
    return SaliencyMap(values=merged, targets=tuple(targets),
                       reduction="sum-of-channels")


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

def save_weights(params, path):
    """Write every named tensor, sorted by name, as 64-bit little-endian."""
    tensors = params.named_tensors()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(tensors)))
        for name in sorted(tensors):
            # np.asarray keeps rank-0 tensors rank 0 (ascontiguousarray
            # would promote them to shape (1,))
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _reader(blob, path):
    state = {"off": 0}

    def take(n, what):
        off = state["off"]
        if off + n > len(blob):
            raise FormatError(
                f"{path}: truncated reading {what} at offset {off}")
        state["off"] = off + n
        return blob[off:off + n], off

    return take, state


def load_weights(path, config):
    """Read a weights file back into the parameter structure for `config`.

    The tensor names and shapes must match the config's layout exactly;
    anything else is a format error naming the offending field.
    """
    with open(path, "rb") as f:
        blob = f.read()
    take, state = _reader(blob, path)

    magic, off = take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset {off}")
    raw, off = take(8, "header")
    version, count = struct.unpack("<II", raw)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} "
                          f"at offset {off}")

    loaded = {}
    for _ in range(count):
        raw, off = take(2, "tensor name length")
        (name_len,) = struct.unpack("<H", raw)
        if name_len == 0:
            raise FormatError(
                f"{path}: zero tensor name length at offset {off}")
        raw, off = take(name_len, f"tensor name ({name_len} bytes)")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(
                f"{path}: tensor name at offset {off} is not UTF-8")
        raw, off = take(1, f"rank of {name}")
        rank = raw[0]
        raw, off = take(4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, off = take(8 * n_vals, f"data of {name}")
        if name in loaded:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        loaded[name] = np.frombuffer(raw, dtype="<f8").reshape(dims)
    if state["off"] != len(blob):
        raise FormatError(
            f"{path}: {len(blob) - state['off']} trailing bytes after the "
            "last tensor")

    params = init_params(config)
    expected = params.named_tensors()
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise FormatError(
            f"{path}: tensor names do not match the config layout "
            f"(missing: {missing or 'none'}, unexpected: {extra or 'none'})")
    for name, arr in expected.items():
        if loaded[name].shape != arr.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {loaded[name].shape}, "
                f"config expects {arr.shape}")
        arr[...] = loaded[name]
    params.validate()
    return params
