"""Command-line entry point: ``rpcvol <subcommand> ...``.

Exit codes: 0 on success, 2 when some dates were skipped, 1 on a fatal error.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

from rpcvol import __version__
from rpcvol.errors import RpcVolError
from rpcvol.io import atomic_write_text
from rpcvol import pipeline as pl

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("rpcvol")


def _resolve_config(args, root):
    path = args.config
    if path is None and root is not None:
        candidate = os.path.join(root, pl.CONFIG_NAME)
        if os.path.exists(candidate):
            path = candidate
    config = pl.load_config(path) if path else pl.PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes.update(ransac_seed=args.seed, regression_seed=args.seed)
    if args.workers is not None:
        changes["workers"] = args.workers
    return dataclasses.replace(config, **changes) if changes else config


def _series_root(date_dir):
    return os.path.dirname(os.path.normpath(date_dir))


def cmd_refine(args):
    config = _resolve_config(args, _series_root(args.date_dir))
    res = pl.run_refine(args.date_dir, config)
    rec = res.record
    root = _series_root(args.date_dir)
    atomic_write_text(pl.out_dir(root, config, rec.date, "refine.json"),
                      json.dumps(rec.to_json(), indent=2, sort_keys=True) + "\n")
    print("%s: %d tracks, reference %s, rms %.4f -> %.4f px in %d iterations"
          % (rec.date, rec.n_tracks, rec.reference, rec.initial_rms_px,
             rec.final_rms_px, rec.iterations))
    return EXIT_OK


def cmd_reconstruct(args):
    config = _resolve_config(args, _series_root(args.date_dir))
    res = pl.run_reconstruct(args.date_dir, config)
    print("%s: %d pairs, coverage %.3f" % (os.path.basename(os.path.normpath(args.date_dir)),
                                           len(res.pairs), res.coverage))
    return EXIT_OK


def cmd_align(args):
    config = _resolve_config(args, args.root)
    dsms = pl.read_dsms(args.root, config)
    if not dsms:
        raise RpcVolError("no per-date DSMs under %s" % pl.out_dir(args.root, config))
    dates = sorted(dsms)
    aligned, records = pl.align_series(dates, dsms, config)
    for d, g in aligned.items():
        pl.write_ascii_grid(pl.out_dir(args.root, config, "aligned", d + ".asc"), g)
    atomic_write_text(pl.out_dir(args.root, config, "alignment.json"),
                      json.dumps(records, indent=2, sort_keys=True) + "\n")
    for d in dates:
        print(d, records[d])
    return EXIT_OK if len(aligned) == len(dates) else EXIT_PARTIAL


def cmd_volume(args):
    config = _resolve_config(args, args.root)
    aligned = pl.read_dsms(args.root, config, "aligned")
    wp = pl._weights_path(args.root, config)
    weights = pl.read_weights(wp) if wp else None
    vr = pl.compute_volumes(aligned, config, weights)
    pl.write_volume_outputs(args.root, config, vr)
    for d, v in vr.series.items():
        print("%s %.1f m3" % (d.isoformat(), v))
    if vr.regression is not None:
        reg = vr.regression[0]
        print("weight = %.4f * V[Mm3] + %.4f (rms train %.4f Mt)" % (reg.a, reg.b, reg.rms_train))
    return EXIT_OK


def cmd_pipeline(args):
    config = _resolve_config(args, args.root)
    manifest = pl.run_series(args.root, config)
    skipped = [r for r in manifest.records if r.status != "ok"]
    for r in manifest.records:
        print(r.date, r.status, r.reason)
    if skipped and len(skipped) == len(manifest.records):
        return EXIT_FATAL
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_synth(args):
    from rpcvol import synth

    seed = 0 if args.seed is None else args.seed
    world = synth.generate_world(seed, args.piles, tuple(args.extent))
    truth = synth.write_series(args.out_dir, world, n_dates=args.dates,
                               n_scenes=args.scenes, seed=seed, n_points=args.points,
                               pixel_noise_sigma=args.noise,
                               dense_spacing=args.dense_spacing)
    config = pl.PipelineConfig(aoi=truth.aoi)
    if args.workers is not None:
        config = dataclasses.replace(config, workers=args.workers)
    atomic_write_text(os.path.join(args.out_dir, pl.CONFIG_NAME), config.dumps())
    print("wrote %d dates to %s" % (len(truth.dates), args.out_dir))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="rpcvol",
        description="RPC attitude refinement, DSM reconstruction and volume tracking.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="seed for RANSAC, the regression split and synth")
    p.add_argument("--workers", type=int, help="parallel date workers")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("refine", help="bundle-adjust one date")
    s.add_argument("date_dir")
    s.set_defaults(func=cmd_refine)
    s = sub.add_parser("reconstruct", help="per-pair and merged DSMs of one date")
    s.add_argument("date_dir")
    s.set_defaults(func=cmd_reconstruct)
    s = sub.add_parser("align", help="align every date's DSM onto the first date")
    s.add_argument("root")
    s.set_defaults(func=cmd_align)
    s = sub.add_parser("volume", help="mask, nDSM, volumes and weight regression")
    s.add_argument("root")
    s.set_defaults(func=cmd_volume)
    s = sub.add_parser("pipeline", help="full run over a series")
    s.add_argument("root")
    s.set_defaults(func=cmd_pipeline)
    s = sub.add_parser("synth", help="write a synthetic series with ground truth")
    s.add_argument("out_dir")
    s.add_argument("--dates", type=int, default=6)
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--piles", type=int, default=4)
    s.add_argument("--extent", type=float, nargs=2, default=(400.0, 1300.0),
                   metavar=("EAST_M", "NORTH_M"))
    s.add_argument("--points", type=int, default=1500)
    s.add_argument("--noise", type=float, default=0.3, help="tie-point pixel noise")
    s.add_argument("--dense-spacing", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_FATAL
    try:
        return args.func(args)
    except (RpcVolError, ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
