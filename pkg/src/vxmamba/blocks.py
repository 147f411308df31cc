"""Dual-scale bidirectional scan block and window-derived positional
features, with the layer-norm and MLP primitives they need.

A block computes, for a serialized voxel sequence F with coordinates C,

    fine   = LN(SCAN_fwd(F + POS(C)))
    coarse = Up(LN(SCAN_rev(serialize(Down(F) + POS(C')))))
    out    = F + fine + coarse

where Down is a strided mean-pool in the XY plane, Up broadcasts parents
back to children, and POS embeds window-relative coordinates through a
shared two-layer MLP. Every piece has a hand-written backward pass.
"""

from dataclasses import dataclass

import numpy as np

from .curve import curve_keys, serialize
from .errors import ContractError, RangeError, ShapeError
from .ssm import (
    SelectiveSSMParams,
    selective_scan_bwd,
    selective_scan_fwd,
    silu,
    silu_grad,
)
from .voxelgrid import SparseVoxelGrid, downsample, segment_sum, upsample

LN_EPS = 1e-5
IWE_WIDTH = 10


@dataclass(frozen=True)
class WindowSpec:
    """Implicit window extents in voxels along x and y."""
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ContractError(f"window must be >= 1, got {self.w}x{self.h}")

    @property
    def shift(self):
        return (self.w // 2, self.h // 2)


@dataclass
class SequenceTensor:
    """Voxel features in serialized (ascending-key) order."""
    features: np.ndarray   # (L, D)
    coords: np.ndarray     # (L, 3) int64
    keys: np.ndarray       # (L,) uint64
    spec: "object"         # GridSpec the coords live in

    def __post_init__(self):
        if not (len(self.features) == len(self.coords) == len(self.keys)):
            raise ShapeError(
                f"misaligned lengths: {len(self.features)} features, "
                f"{len(self.coords)} coords, {len(self.keys)} keys")
        if len(self.keys) > 1 and (np.diff(self.keys.astype(np.int64)) < 0).any():
            raise ContractError("keys must be ascending (serialized order)")

    def __len__(self):
        return len(self.features)


def serialize_sequence(grid, kind, order, table=None, seed=0):
    """Order a grid's voxels along the curve and bundle them as a sequence."""
    perm = serialize(grid, kind, order, table=table, seed=seed)
    coords = np.asarray(grid.coords, dtype=np.int64)[perm]
    keys = curve_keys(coords, kind, order, seed=seed, table=table)
    return SequenceTensor(features=np.asarray(grid.features)[perm],
                          coords=coords, keys=keys, spec=grid.spec)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def layer_norm_fwd(x, gain, bias, eps=LN_EPS):
    """Per-token normalization over channels, then gain and bias."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != gain.shape:
        raise ShapeError(
            f"x {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv
    out = x_hat * gain + bias
    return out, (x_hat, inv, gain)


def layer_norm_bwd(cache, grad_out):
    x_hat, inv, gain = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != x_hat.shape:
        raise ShapeError(f"grad {grad_out.shape} vs input {x_hat.shape}")
    grad_gain = (grad_out * x_hat).sum(axis=0)
    grad_bias = grad_out.sum(axis=0)
    g = grad_out * gain
    c = x_hat.shape[1]
    grad_x = inv / c * (c * g - g.sum(axis=1, keepdims=True)
                        - x_hat * (g * x_hat).sum(axis=1, keepdims=True))
    return grad_x, grad_gain, grad_bias


@dataclass
class MLPParams:
    w1: np.ndarray   # (hidden, in)
    b1: np.ndarray   # (hidden,)
    w2: np.ndarray   # (out, hidden)
    b2: np.ndarray   # (out,)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name),
                                           dtype=np.float64))
        if (self.b1.shape != (self.w1.shape[0],)
                or self.w2.shape[1] != self.w1.shape[0]
                or self.b2.shape != (self.w2.shape[0],)):
            raise ShapeError(
                f"inconsistent MLP shapes: w1 {self.w1.shape}, "
                f"b1 {self.b1.shape}, w2 {self.w2.shape}, b2 {self.b2.shape}")

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def mlp_fwd(x, params):
    """Two layers with a SiLU between them."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[1]:
        raise ShapeError(
            f"x must be (L, {params.w1.shape[1]}), got {x.shape}")
    h_pre = x @ params.w1.T + params.b1
    h = silu(h_pre)
    out = h @ params.w2.T + params.b2
    return out, (x, h_pre, h, params)


def mlp_bwd(cache, grad_out):
    x, h_pre, h, params = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (len(x), params.w2.shape[0]):
        raise ShapeError(
            f"grad must be ({len(x)}, {params.w2.shape[0]}), "
            f"got {grad_out.shape}")
    grad_h = grad_out @ params.w2
    grad_pre = grad_h * silu_grad(h_pre)
    grads = {
        "w2": grad_out.T @ h, "b2": grad_out.sum(axis=0),
        "w1": grad_pre.T @ x, "b1": grad_pre.sum(axis=0),
    }
    return grad_pre @ params.w1, grads


# ---------------------------------------------------------------------------
# implicit window embedding
# ---------------------------------------------------------------------------

def iwe_features(coords, win):
    """Window-relative position features, 5 per shift and two shifts.

    Per voxel and shift i: (z, window index of x, window index of y,
    x within window, y within window), where shift 1 offsets x and y by
    half a window before the floor/mod split.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"coords must be (L, 3), got {coords.shape}")
    if coords.size and coords.min() < 0:
        raise RangeError("coords must be non-negative")
    out = np.empty((len(coords), IWE_WIDTH), dtype=np.float64)
    sx, sy = win.shift
    for i, (ox, oy) in enumerate(((0, 0), (sx, sy))):
        x = coords[:, 0] + ox
        y = coords[:, 1] + oy
        out[:, 5 * i + 0] = coords[:, 2]
        out[:, 5 * i + 1] = x // win.w
        out[:, 5 * i + 2] = y // win.h
        out[:, 5 * i + 3] = x % win.w
        out[:, 5 * i + 4] = y % win.h
    return out


def iwe_embed(raw, mlp_params):
    """Embed raw window features to model width."""
    if raw.shape[1] != IWE_WIDTH:
        raise ShapeError(f"raw features must be (L, {IWE_WIDTH}), "
                         f"got {raw.shape}")
    out, _ = mlp_fwd(raw, mlp_params)
    return out


# ---------------------------------------------------------------------------
# the dual-scale block
# ---------------------------------------------------------------------------

@dataclass
class DSBParams:
    """Parameters of one dual-scale block.

    iwe_fine and iwe_coarse may be the same object; the owner decides how
    embeddings are shared across blocks of equal stride.
    """
    fwd_ssm: SelectiveSSMParams
    bwd_ssm: SelectiveSSMParams
    ln_f_gain: np.ndarray
    ln_f_bias: np.ndarray
    ln_b_gain: np.ndarray
    ln_b_bias: np.ndarray
    iwe_fine: MLPParams
    iwe_coarse: MLPParams
    win: WindowSpec
    stride: int = 1
    scale_win: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")
        d = self.fwd_ssm.d_model
        if self.bwd_ssm.d_model != d:
            raise ShapeError("forward and backward widths differ")
        for name in ("ln_f_gain", "ln_f_bias", "ln_b_gain", "ln_b_bias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (d,):
                raise ShapeError(f"{name} must be ({d},), got {arr.shape}")
            setattr(self, name, arr)

    @property
    def d_model(self):
        return self.fwd_ssm.d_model

    def coarse_window(self):
        if self.scale_win:
            return WindowSpec(self.win.w * self.stride,
                              self.win.h * self.stride)
        return self.win

    def tensors(self):
        out = {}
        for prefix, ssm_p in (("fwd_ssm", self.fwd_ssm),
                              ("bwd_ssm", self.bwd_ssm)):
            for name, arr in ssm_p.tensors().items():
                out[f"{prefix}.{name}"] = arr
        for name in ("ln_f_gain", "ln_f_bias", "ln_b_gain", "ln_b_bias"):
            out[name] = getattr(self, name)
        for prefix, mlp in (("iwe_fine", self.iwe_fine),
                            ("iwe_coarse", self.iwe_coarse)):
            for name, arr in mlp.tensors().items():
                out[f"{prefix}.{name}"] = arr
        return out


@dataclass
class DSBTape:
    params: DSBParams
    seq: SequenceTensor
    mlp_cache_f: tuple
    ssm_tape_f: "object"
    ln_cache_f: tuple
    pmap: "object"
    perm: np.ndarray
    mlp_cache_b: tuple
    ssm_tape_b: "object"
    ln_cache_b: tuple


def group_reset_mask(length, group_size):
    """Scan-state reset points cutting a sequence into contiguous groups."""
    if group_size is None:
        return None
    group_size = int(group_size)
    if group_size < 1:
        raise ContractError(f"group size must be >= 1, got {group_size}")
    return np.arange(length) % group_size == 0


def dsb_forward(seq, params, kind, order, table=None, seed=0,
                group_size=None, want_tape=True):
    """One dual-scale block over a serialized sequence.

    Coordinates and keys pass through unchanged; only features move. The
    coarse branch lives on the grid downsampled by (stride, stride, 1) and
    is re-serialized there before the reversed-direction scan.

    group_size, when given, cuts both scans into fixed-size contiguous
    groups processed independently (state resets at every boundary); this
    is the ablation counterpart of the default whole-sequence scan. With
    want_tape=False the returned tape is None and the scans skip their
    backward bookkeeping.
    """
    if len(seq) < 1:
        raise ContractError("sequence must have at least one voxel")
    if seq.features.shape[1] != params.d_model:
        raise ContractError(
            f"features are {seq.features.shape[1]}-wide, block expects "
            f"{params.d_model}")
    ext = np.asarray(seq.spec.extents)
    if (seq.coords < 0).any() or (seq.coords >= ext).any():
        raise ContractError("coords fall outside the grid extents")
    feats = np.asarray(seq.features, dtype=np.float64)

    raw_f = iwe_features(seq.coords, params.win)
    emb_f, mlp_cache_f = mlp_fwd(raw_f, params.iwe_fine)
    ssm_out_f, ssm_tape_f = selective_scan_fwd(
        feats + emb_f, params.fwd_ssm, "forward",
        reset=group_reset_mask(len(seq), group_size), want_tape=want_tape)
    fine, ln_cache_f = layer_norm_fwd(ssm_out_f, params.ln_f_gain,
                                      params.ln_f_bias)

    grid = SparseVoxelGrid(coords=seq.coords, features=feats, spec=seq.spec)
    coarse_grid, pmap = downsample(grid, (params.stride, params.stride, 1))
    raw_b = iwe_features(coarse_grid.coords, params.coarse_window())
    emb_b, mlp_cache_b = mlp_fwd(raw_b, params.iwe_coarse)
    mixed = coarse_grid.features + emb_b
    perm = serialize(coarse_grid, kind, order, table=table, seed=seed)
    ssm_out_b, ssm_tape_b = selective_scan_fwd(
        mixed[perm], params.bwd_ssm, "reversed",
        reset=group_reset_mask(len(coarse_grid), group_size),
        want_tape=want_tape)
    ln_b, ln_cache_b = layer_norm_fwd(ssm_out_b, params.ln_b_gain,
                                      params.ln_b_bias)
    ln_b_unser = np.empty_like(ln_b)
    ln_b_unser[perm] = ln_b
    coarse = upsample(ln_b_unser, pmap)

    out = SequenceTensor(features=feats + fine + coarse, coords=seq.coords,
                         keys=seq.keys, spec=seq.spec)
    if not want_tape:
        return out, None
    tape = DSBTape(params=params, seq=seq, mlp_cache_f=mlp_cache_f,
                   ssm_tape_f=ssm_tape_f, ln_cache_f=ln_cache_f, pmap=pmap,
                   perm=perm, mlp_cache_b=mlp_cache_b, ssm_tape_b=ssm_tape_b,
                   ln_cache_b=ln_cache_b)
    return out, tape


def dsb_backward(tape, grad_out):
    """Reverse-mode pass of dsb_forward.

    Returns (grad_seq, grads) with grads keyed like DSBParams.tensors().
    When iwe_fine and iwe_coarse are one shared object, the caller owns
    summing the two gradient groups.
    """
    p = tape.params
    grad_out = np.asarray(grad_out, dtype=np.float64)
    length = len(tape.seq)
    if grad_out.shape != (length, p.d_model):
        raise ShapeError(
            f"grad_out must be ({length}, {p.d_model}), got {grad_out.shape}")
    grads = {}
    grad_f = grad_out.copy()

    g_ssm_out, g_gain_f, g_bias_f = layer_norm_bwd(tape.ln_cache_f, grad_out)
    grads["ln_f_gain"], grads["ln_f_bias"] = g_gain_f, g_bias_f
    g_mixed_f, ssm_grads_f = selective_scan_bwd(tape.ssm_tape_f, g_ssm_out)
    for name, g in ssm_grads_f.items():
        grads[f"fwd_ssm.{name}"] = g
    grad_f += g_mixed_f
    _, mlp_grads_f = mlp_bwd(tape.mlp_cache_f, g_mixed_f)
    for name, g in mlp_grads_f.items():
        grads[f"iwe_fine.{name}"] = g

    g_up = segment_sum(grad_out, tape.pmap)
    g_lnb_out = g_up[tape.perm]
    g_ssm_out_b, g_gain_b, g_bias_b = layer_norm_bwd(tape.ln_cache_b,
                                                     g_lnb_out)
    grads["ln_b_gain"], grads["ln_b_bias"] = g_gain_b, g_bias_b
    g_mixed_ser, ssm_grads_b = selective_scan_bwd(tape.ssm_tape_b,
                                                  g_ssm_out_b)
    for name, g in ssm_grads_b.items():
        grads[f"bwd_ssm.{name}"] = g
    g_mixed = np.empty_like(g_mixed_ser)
    g_mixed[tape.perm] = g_mixed_ser
    _, mlp_grads_b = mlp_bwd(tape.mlp_cache_b, g_mixed)
    for name, g in mlp_grads_b.items():
        grads[f"iwe_coarse.{name}"] = g
    grad_f += upsample(g_mixed / tape.pmap.counts[:, None], tape.pmap)

    return grad_f, grads
