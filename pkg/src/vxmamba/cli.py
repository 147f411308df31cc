"""Command-line front end.

Subcommands: voxelize, curve-stats, forward, gradcheck, erf, bench,
train-toy. Exit codes: 0 success, 1 usage error, 2 contract or format
error, 3 failed correctness check.
"""

import argparse
import json
import sys
import time

import numpy as np

from .backbone import (
    BackboneConfig,
    backbone_forward,
    erf_saliency,
    init_params,
    load_weights,
    save_weights,
)
from .curve import locality_stats, serialize
from .errors import CheckFailure, ContractError, VxError
from .harness import (
    TOY_CONFIG,
    ToyTask,
    gen_scene,
    gradcheck_report,
    occupancy_labels,
    saliency_image,
    scene_for_grid,
    train_toy,
    write_csv,
    write_pgm,
)
from .ssm import linear_scan_par, linear_scan_seq
from .voxelgrid import load_points, save_bev, voxelize

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path, default):
    if path is None:
        return default
    with open(path) as f:
        return BackboneConfig.from_json(f.read())


def _check_threads(n):
    if n < 1:
        raise ContractError(f"--threads must be >= 1, got {n}")
    # the numeric backend is vectorized single-process; the flag is
    # accepted for interface stability and recorded in reports
    return n


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_voxelize(args):
    config = _load_config(args.config, BackboneConfig())
    cloud = load_points(args.points)
    grid = voxelize(cloud, config.grid_spec(), config.feature_mode)
    r = grid.report
    print(f"points={r.n_points} voxels={r.n_voxels} "
          f"out_of_range={r.n_out_of_range} nonfinite={r.n_nonfinite}")
    if args.out:
        doc = {"n_points": r.n_points, "n_voxels": r.n_voxels,
               "n_out_of_range": r.n_out_of_range,
               "n_nonfinite": r.n_nonfinite,
               "extents": list(grid.spec.extents)}
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    return 0


def _dense_coords(order):
    side = 1 << order
    g = np.arange(side, dtype=np.int64)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()])


def cmd_curve_stats(args):
    coords = _dense_coords(args.order)
    rows = []
    for kind in ("hilbert", "morton"):
        s = locality_stats(coords, kind, args.order,
                           sample_count=args.sample, seed=args.seed)
        rows.append((kind, s.order, f"{s.mean:.6f}", f"{s.median:.6f}",
                     f"{s.p90:.6f}", s.sample_count))
    randoms = [locality_stats(coords, "random", args.order,
                              sample_count=args.sample, seed=args.seed + i)
               for i in range(args.random_seeds)]
    rows.append(("random", args.order,
                 f"{np.mean([s.mean for s in randoms]):.6f}",
                 f"{np.mean([s.median for s in randoms]):.6f}",
                 f"{np.mean([s.p90 for s in randoms]):.6f}",
                 randoms[0].sample_count))
    text = write_csv(args.out, ("kind", "order", "mean", "median", "p90",
                                "sample_count"), rows)
    if not args.out:
        print(text, end="")
    return 0


def cmd_forward(args):
    _check_threads(args.threads)
    config = _load_config(args.config, BackboneConfig())
    cloud = load_points(args.points)
    grid = voxelize(cloud, config.grid_spec(), config.feature_mode)
    params = (load_weights(args.weights, config) if args.weights
              else init_params(config, args.seed))
    start = time.perf_counter()
    bev, _ = backbone_forward(grid, params, config, want_tape=False)
    elapsed = time.perf_counter() - start
    save_bev(bev, args.out)
    print(f"voxels={len(grid)} seconds={elapsed:.4f}")
    return 0


def cmd_gradcheck(args):
    _check_threads(args.threads)
    report = gradcheck_report(args.seed)
    rows = []
    failed = []
    for op, err in report:
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{op}: max_rel_err={err:.3e} {status}")
        rows.append((op, f"{err:.3e}", status))
        if err >= GRADCHECK_TOL:
            failed.append(op)
    if args.out:
        write_csv(args.out, ("op", "max_rel_err", "status"), rows)
    if failed:
        raise CheckFailure(
            f"gradient check exceeded {GRADCHECK_TOL:g} for: "
            f"{', '.join(failed)}")
    return 0


def _erf_one(config, seed, num_targets):
    grid_spec = config.grid_spec()
    cloud, _ = gen_scene(scene_for_grid(grid_spec, seed, n_boxes=3,
                                        points_per_box=150,
                                        ground_points=600,
                                        clutter_points=80))
    grid = voxelize(cloud, grid_spec, config.feature_mode)
    if len(grid) < num_targets:
        raise ContractError(
            f"scene produced {len(grid)} voxels for {num_targets} targets")
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    targets = rng.choice(len(grid), size=num_targets, replace=False)
    sal = erf_saliency(params, config, grid, targets)
    return grid, sal


def cmd_erf(args):
    config = _load_config(args.config, TOY_CONFIG)
    runs = [("a", config)]
    if args.config_b:
        runs.append(("b", _load_config(args.config_b, None)))
    rows = []
    for label, cfg in runs:
        grid, sal = _erf_one(cfg, args.seed, args.num_targets)
        image = saliency_image(sal, grid)
        suffix = f"_{label}.pgm" if len(runs) > 1 else ".pgm"
        write_pgm(args.out + suffix, image)
        rows.append((label, sal.support(), f"{sal.values.max():.6e}",
                     len(grid), args.num_targets))
        print(f"config_{label}: voxels={len(grid)} support={sal.support()}")
    write_csv(args.out + ".csv",
              ("config", "support", "max_saliency", "voxels", "targets"),
              rows)
    return 0


def cmd_bench(args):
    _check_threads(args.threads)
    rng = np.random.default_rng(args.seed)
    rows = []

    sizes = [int(s) for s in args.sizes.split(",") if s]
    extents = BackboneConfig().grid_spec().extents
    for n in sizes:
        coords = np.column_stack(
            [rng.integers(0, extents[i], n) for i in range(3)])
        times = []
        for _ in range(args.repeats):
            start = time.perf_counter()
            serialize(coords, "hilbert", 7)
            times.append(time.perf_counter() - start)
        rows.append(("serialize_hilbert", n,
                     f"{float(np.median(times)):.6f}"))

    length = args.scan_length
    a = rng.uniform(0.9, 0.999, (length, 8, 4))
    b = rng.normal(size=(length, 8, 4))
    for name, fn in (("scan_sequential_tokens_per_s",
                      lambda: linear_scan_seq(a, b, 0.0)),
                     ("scan_parallel_tokens_per_s",
                      lambda: linear_scan_par(a, b, 0.0, 128))):
        times = []
        for _ in range(args.repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        rows.append((name, length,
                     f"{length / float(np.median(times)):.0f}"))

    config = _load_config(args.config, TOY_CONFIG)
    cloud, _ = gen_scene(scene_for_grid(config.grid_spec(), args.seed))
    grid = voxelize(cloud, config.grid_spec(), config.feature_mode)
    params = init_params(config, args.seed)
    times = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        backbone_forward(grid, params, config, want_tape=False)
        times.append(time.perf_counter() - start)
    rows.append(("forward", len(grid), f"{float(np.median(times)):.6f}"))

    text = write_csv(args.out, ("name", "size", "value"), rows)
    if not args.out:
        print(text, end="")
    return 0


def cmd_train_toy(args):
    config = _load_config(args.config, TOY_CONFIG)
    if args.scenes < 1:
        raise ContractError(f"--scenes must be >= 1, got {args.scenes}")
    specs = tuple(scene_for_grid(config.grid_spec(), args.seed + i)
                  for i in range(args.scenes))
    task = ToyTask(train_scenes=specs, lr=args.lr, steps=args.steps)
    result = train_toy(config, task, seed=args.seed)
    first, last = result.losses[0], result.losses[-1]
    print(f"steps={args.steps} initial_loss={first:.6f} "
          f"final_loss={last:.6f} ratio={last / first:.4f}")
    if args.out:
        write_csv(args.out + ".csv", ("step", "loss"),
                  [(i, f"{v:.8f}") for i, v in enumerate(result.losses)])
        save_weights(result.params, args.out + ".vxmb")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="vxmamba",
                     description="Sparse-voxel state-space backbone tools")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("voxelize", help="voxelize a point file and report")
    p.add_argument("--points", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("curve-stats",
                       help="key-locality statistics per curve kind")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--sample", type=int, default=10000)
    p.add_argument("--random-seeds", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curve_stats)

    p = sub.add_parser("forward", help="run the backbone on a point file")
    p.add_argument("--points", required=True)
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of all backward passes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("erf",
                       help="saliency map(s) for random output targets")
    p.add_argument("--config")
    p.add_argument("--config-b", dest="config_b")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-targets", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("bench", help="serialization/scan/forward timings")
    p.add_argument("--sizes", default="100000,1000000")
    p.add_argument("--scan-length", type=int, default=32768)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy",
                       help="SGD on the occupancy toy task end to end")
    p.add_argument("--config")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 3
    except (VxError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
