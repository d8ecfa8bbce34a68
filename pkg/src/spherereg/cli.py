"""Command-line interface: mesh generation, synthetic cohorts, training,
registration, evaluation, and the built-in self test.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 internal
budget exceeded.  ``--threads 1`` pins the numerical libraries to one
thread, which guarantees bitwise-reproducible runs.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_BUDGET = 3


def _set_threads(n: int) -> None:
    # must happen before numpy (and its BLAS) is imported
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_mesh(args) -> int:
    from .mesh import build_icosphere, write_ico

    sphere = build_icosphere(args.order)
    v = sphere.n_vertices
    f = len(sphere.faces)
    e = v + f - 2  # Euler characteristic of the sphere
    if args.out:
        try:
            write_ico(args.out, sphere)
        except OSError as exc:
            return _fail(f"cannot write {args.out}: {exc}", EXIT_IO)
    print(f"vertices={v} edges={e} faces={f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .pipeline import PairEntry, SyntheticWarpSpec, \
        generate_synthetic_pair, write_manifest
    from .mesh import write_sfm
    from .warp import write_def

    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        return _fail(f"cannot create {args.out}: {exc}", EXIT_IO)
    entries = []
    for i in range(args.pairs):
        spec = SyntheticWarpSpec(
            seed=args.seed + i, max_angle=args.max_angle,
            smoothness=args.smoothness, field_degree=args.field_degree,
            n_components=args.components, n_channels=args.channels,
            noise=args.noise,
        )
        try:
            moving, fixed, truth = generate_synthetic_pair(spec, args.order)
        except RuntimeError as exc:
            return _fail(str(exc), EXIT_BUDGET)
        paths = (os.path.join(args.out, f"pair{i:04d}_moving.sfm"),
                 os.path.join(args.out, f"pair{i:04d}_fixed.sfm"),
                 os.path.join(args.out, f"pair{i:04d}_truth.def"))
        write_sfm(paths[0], moving)
        write_sfm(paths[1], fixed)
        write_def(paths[2], truth)
        entries.append(PairEntry(*paths))
    write_manifest(os.path.join(args.out, "manifest.txt"), entries)
    print(f"wrote {args.pairs} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import read_manifest, read_run_config, train_run

    try:
        cfg = read_run_config(args.config)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    if args.seed is not None:
        cfg.seed = args.seed
    if not os.path.exists(cfg.manifest):
        return _fail(f"manifest not found: {cfg.manifest}", EXIT_USAGE)
    try:
        entries = read_manifest(cfg.manifest)
        for e in entries:
            for p in (e.moving_path, e.fixed_path):
                if not os.path.exists(p):
                    return _fail(f"missing data file: {p}", EXIT_USAGE)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    for k, stage in enumerate(cfg.stages, 1):
        print(f"stage {k}: control_order={stage.control_order} "
              f"n_labels={stage.n_labels} crf={stage.use_crf} "
              f"lam_sm={stage.lam_sm} r={stage.r}")

    def log(rec):
        print(f"epoch {rec.epoch}: train_loss={rec.train_loss:.6f} "
              f"val_cc={rec.val_cc:.6f}", flush=True)

    try:
        train_run(cfg, args.out, log=log)
    except FloatingPointError as exc:
        return _fail(f"training diverged: {exc}", EXIT_BUDGET)
    except OSError as exc:
        return _fail(str(exc), EXIT_IO)
    print(f"checkpoints written to {args.out}")
    return EXIT_OK


def _load_stages(ckpt_dir):
    from .conv import read_arch
    from .optim import read_gmw
    from .pipeline import StageConfig, apply_stage_cfg

    stages = []
    for k in (1, 2):
        arch_path = os.path.join(ckpt_dir, f"stage{k}.arch")
        gmw_path = os.path.join(ckpt_dir, f"stage{k}.gmw")
        if not os.path.exists(arch_path):
            continue
        net = read_arch(arch_path)
        store = read_gmw(gmw_path)
        stage = StageConfig(
            input_order=net.input_order, control_order=net.control_order,
            label_order=net.label_order, n_labels=net.n_labels,
            fcb_channels=net.fcb_channels, res_channels=net.res_channels,
            in_channels=net.in_channels, n_kernels=net.n_kernels,
            shared_fcbs=net.shared_fcbs,
            use_crf="crf.omega" in store,
        )
        cfg_path = os.path.join(ckpt_dir, f"stage{k}.cfg")
        if os.path.exists(cfg_path):
            stage = apply_stage_cfg(cfg_path, stage)
        stages.append((stage, store))
    if not stages:
        raise ValueError(f"no stage checkpoints in {ckpt_dir}")
    return stages


def cmd_register(args) -> int:
    from .mesh import read_sfm, write_sfm
    from .metrics import write_met
    from .pipeline import register_pair
    from .warp import write_def

    try:
        moving = read_sfm(args.moving)
        fixed = read_sfm(args.fixed)
        stages = _load_stages(args.ckpt)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_IO)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    try:
        field, warped, report = register_pair(stages, moving, fixed)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    write_sfm(args.out, warped)
    if args.deform:
        write_def(args.deform, field)
    write_met(sys.stdout, report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .mesh import read_ico, read_sfm
    from .metrics import cluster_mass, distortion_stats, metrics_report, \
        vertex_areas, write_met
    from .warp import read_def

    try:
        fixed = read_sfm(args.fixed)
        warped = read_sfm(args.warped)
        sphere = read_ico(args.sphere)
    except FileNotFoundError as exc:
        return _fail(str(exc), EXIT_IO)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    stats = None
    if args.deform:
        try:
            field = read_def(args.deform)
            stats = distortion_stats(sphere, field)
        except FileNotFoundError as exc:
            return _fail(str(exc), EXIT_IO)
        except ValueError as exc:
            return _fail(str(exc), EXIT_USAGE)
    cm = None
    if args.zmap:
        zmap = read_sfm(args.zmap)
        areas = vertex_areas(sphere.vertices, sphere.faces)
        cm = cluster_mass(zmap, areas, threshold=args.threshold)
    report = metrics_report(fixed, warped, stats, cm)
    write_met(sys.stdout, report)
    return EXIT_OK


def cmd_selftest(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from .crf import CrfConfig, crf_forward, meanfield_reference
    from .mesh import barycentric_map, build_icosphere, vertex_count
    from .metrics import distortion_stats
    from .optim import ParamStore, check_registered_ops
    from .warp import DeformationField, build_label_space, control_grid, \
        identity_field

    failures = []

    def check(name, ok):
        print(f"{'ok' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    for k in range(5):
        check(f"icosphere order {k} counts",
              build_icosphere(k).n_vertices == vertex_count(k))
    sphere = build_icosphere(3)
    rng = np.random.Generator(np.random.Philox(0))
    q = rng.standard_normal((1000, 3))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    bmap = barycentric_map(sphere, q)
    recon = np.einsum("nk,nkd->nd", bmap.weights,
                      sphere.vertices[sphere.faces[bmap.face_index]])
    recon /= np.linalg.norm(recon, axis=1, keepdims=True)
    check("barycentric reconstruction",
          float(np.abs(recon - q).max()) < 1e-6)

    errs = check_registered_ops(n_probes=10, seed=0)
    check("primitive gradient checks", max(errs.values()) < 1e-4)

    cfg = CrfConfig(iterations=5)
    ok = True
    for seed in range(5):
        rng = np.random.Generator(np.random.Philox(seed))
        labels = build_label_space(control_grid(0), 2, 4)
        u = rng.standard_normal((12, 4))
        omega = rng.random((12, 12))
        mu = rng.standard_normal((4, 4))
        store = ParamStore()
        store.add("crf.omega", omega)
        store.add("crf.mu", mu)
        got, _ = crf_forward(u, labels, store, cfg)
        ref = meanfield_reference(u, labels, omega, mu, cfg)[-1]
        ok = ok and float(np.abs(got - ref).max()) <= 1e-12
    check("CRF staged vs naive oracle", ok)

    sphere1 = build_icosphere(1)
    ident = distortion_stats(sphere1, identity_field(1))
    check("identity distortion exactly zero",
          bool(np.all(ident.log2_areal == 0.0)
               and np.all(ident.log2_shape == 0.0)))
    stretch = distortion_stats(
        sphere1, DeformationField(1, 2.0 * sphere1.vertices))
    check("uniform stretch log2 areal = 2",
          bool(np.all(np.abs(stretch.log2_areal - 2.0) < 1e-9)))

    if failures:
        print(f"{len(failures)} self-test failure(s)")
        return EXIT_USAGE
    print("all self tests passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spherereg",
        description="Spherical surface registration via discrete "
                    "deformation learning.",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap numerical worker threads (1 = bitwise "
                             "deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate an icosphere")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-angle", type=float, default=0.55)
    p.add_argument("--smoothness", type=float, default=1.2)
    p.add_argument("--field-degree", type=int, default=6)
    p.add_argument("--components", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train registration stages")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one pair")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deform", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluate a registration")
    p.add_argument("--fixed", required=True)
    p.add_argument("--warped", required=True)
    p.add_argument("--sphere", required=True)
    p.add_argument("--deform", default=None)
    p.add_argument("--zmap", default=None)
    p.add_argument("--threshold", type=float, default=5.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def _validate(args) -> str | None:
    if args.command == "mesh" and not 0 <= args.order <= 8:
        return "mesh order must be between 0 and 8"
    if args.command == "synth":
        if args.pairs < 0:
            return "pair count must be nonnegative"
        if not 0 <= args.order <= 6:
            return "synth order must be between 0 and 6"
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads > 0:
        _set_threads(args.threads)
    problem = _validate(args)
    if problem:
        print(f"error: {problem}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
