"""Command-line entry point.

Machine-readable results go to stdout (JSON) or to the files named on the
command line; logs and human-readable tables go to stderr.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .em_cluster import classify_foreground, fit_em
from .errors import ParseError, ValidationError, VoxalignError
from .evaluation import PhantomSpec, checkerboard, compute_tre, generate_phantom
from .io_formats import (
    TransformRecord,
    read_landmarks_csv,
    read_metaimage,
    read_transform_json,
    write_landmarks_csv,
    write_metaimage,
    write_pgm_slice,
    write_transform_json,
)
from .mi_metric import MattesMutualInformation, draw_samples
from .pca_init import compute_pca_frame, initial_alignment, registration_seed
from .pipeline import INIT_MODES, RegistrationConfig, register
from .transforms import AffineTransform
from .volume import CUBIC, LINEAR, resample

log = logging.getLogger("voxalign")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it to our code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(doc):
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _threads(args):
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        env = os.environ.get("VOXALIGN_THREADS")
        if env is None:
            return None
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"VOXALIGN_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def _load_transform(path):
    if path is None:
        return AffineTransform()
    return read_transform_json(path).to_transform()


def _out_path(path):
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise ValidationError(f"output directory {p.parent} does not exist")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_register(args):
    cfg = RegistrationConfig.from_json(args.config) if args.config else RegistrationConfig()
    overrides = {"init": args.init, "seed": args.seed, "threads": _threads(args)}
    if args.affine_only:
        overrides["bspline_stage"] = False
    cfg = cfg.replace(**overrides)
    out = _out_path(args.out)
    fixed = read_metaimage(args.fixed)
    moving = read_metaimage(args.moving)
    result = register(fixed, moving, cfg)
    write_transform_json(result.record(), out)
    if args.resampled:
        write_metaimage(resample(moving, fixed, result.transform, CUBIC), _out_path(args.resampled))
    summary = result.summary()
    summary["transform"] = str(out)
    _emit(summary)
    return EXIT_OK


def cmd_pca_init(args):
    fixed = read_metaimage(args.fixed)
    moving = read_metaimage(args.moving)
    gf, gm = fit_em(fixed), fit_em(moving)
    ff = compute_pca_frame(fixed, classify_foreground(fixed, gf))
    fm = compute_pca_frame(moving, classify_foreground(moving, gm))
    align = initial_alignment(ff, fm)
    doc = {
        "rotation": align.rotation.tolist(),
        "translation": align.translation.tolist(),
        "fixed_centroid": ff.centroid.tolist(),
        "moving_centroid": fm.centroid.tolist(),
        "fixed_eigenvalues": ff.eigenvalues.tolist(),
        "moving_eigenvalues": fm.eigenvalues.tolist(),
        **align.diagnostics(),
    }
    if args.out:
        seed = registration_seed(align, ff.centroid)
        write_transform_json(TransformRecord.from_transform(seed, {"init": "pca"}), _out_path(args.out))
        doc["transform"] = args.out
    _emit(doc)
    return EXIT_OK


def cmd_cluster(args):
    v = read_metaimage(args.volume)
    gmm = fit_em(v, args.max_iterations, args.tolerance)
    mask = classify_foreground(v, gmm)
    doc = gmm.to_dict()
    doc["foreground_voxels"] = int(mask.data.sum())
    if args.mask:
        write_metaimage(mask, _out_path(args.mask), "MET_UCHAR")
        doc["mask"] = args.mask
    _emit(doc)
    return EXIT_OK


def cmd_metric(args):
    fixed = read_metaimage(args.fixed)
    moving = read_metaimage(args.moving)
    t = _load_transform(args.transform)
    if args.count is not None:
        samples = draw_samples(fixed, count=args.count, seed=args.seed)
    else:
        samples = draw_samples(fixed, fraction=args.fraction, seed=args.seed)
    metric = MattesMutualInformation(fixed, moving, samples, t, args.bins, threads=_threads(args) or 1)
    m = metric.evaluate(gradient=args.gradient)
    doc = m.to_dict()
    doc["sample_count"] = samples.count
    if args.gradient:
        doc["gradient"] = m.gradient.tolist()
    _emit(doc)
    return EXIT_OK


def cmd_phantom(args):
    spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ph = generate_phantom(spec)
    paths = {
        "fixed": out / "fixed.mha",
        "moving": out / "moving.mha",
        "landmarks": out / "landmarks.csv",
        "ground_truth": out / "ground_truth.json",
    }
    write_metaimage(ph.fixed, paths["fixed"])
    write_metaimage(ph.moving, paths["moving"])
    write_landmarks_csv(ph.landmarks, paths["landmarks"])
    write_transform_json(TransformRecord.from_transform(ph.ground_truth, {"source": "phantom"}), paths["ground_truth"])
    _emit({k: str(p) for k, p in paths.items()})
    return EXIT_OK


def cmd_tre(args):
    landmarks = read_landmarks_csv(args.landmarks)
    report = compute_tre(landmarks, _load_transform(args.transform))
    print(report.table(), file=sys.stderr)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_checkerboard(args):
    fixed = read_metaimage(args.fixed)
    moving = read_metaimage(args.moving)
    if args.transform or not fixed.same_geometry(moving):
        moving = resample(moving, fixed, _load_transform(args.transform), CUBIC)
    board = checkerboard(fixed, moving, args.cells)
    doc = {}
    if args.out:
        write_metaimage(board, _out_path(args.out))
        doc["volume"] = args.out
    if args.pgm:
        index = args.index if args.index is not None else board.dims[args.axis] // 2
        write_pgm_slice(board, args.axis, index, (0.0, 255.0), _out_path(args.pgm))
        doc["slice"] = args.pgm
    if not doc:
        raise ValidationError("checkerboard needs --out and/or --pgm")
    _emit(doc)
    return EXIT_OK


def cmd_resample(args):
    moving = read_metaimage(args.moving)
    reference = read_metaimage(args.reference)
    out = resample(moving, reference, _load_transform(args.transform), args.scheme, args.padding)
    write_metaimage(out, _out_path(args.out))
    _emit({"volume": args.out, "dims": list(out.dims)})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="voxalign", description="Multimodal 3-D volume registration with mutual information.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a moving volume onto a fixed volume")
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--config", help="JSON configuration; flags override it")
    r.add_argument("--out", required=True, help="transform JSON (fixed to moving)")
    r.add_argument("--resampled", help="write the moving volume resampled onto the fixed grid")
    r.add_argument("--init", choices=INIT_MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--affine-only", action="store_true", help="skip the B-spline stage")
    r.set_defaults(func=cmd_register)

    c = sub.add_parser("pca-init", help="principal-axes initial alignment")
    c.add_argument("--fixed", required=True)
    c.add_argument("--moving", required=True)
    c.add_argument("--out", help="write the fixed-to-moving seed transform JSON")
    c.set_defaults(func=cmd_pca_init)

    c = sub.add_parser("cluster", help="two-class EM foreground segmentation")
    c.add_argument("--volume", required=True)
    c.add_argument("--mask", help="write the foreground mask (MetaImage)")
    c.add_argument("--max-iterations", type=int, default=200)
    c.add_argument("--tolerance", type=float, default=1e-10)
    c.set_defaults(func=cmd_cluster)

    c = sub.add_parser("metric", help="evaluate -MI for a transform")
    c.add_argument("--fixed", required=True)
    c.add_argument("--moving", required=True)
    c.add_argument("--transform", help="transform JSON (default identity)")
    c.add_argument("--bins", type=int, default=50)
    g = c.add_mutually_exclusive_group()
    g.add_argument("--fraction", type=float, default=0.09)
    g.add_argument("--count", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--gradient", action="store_true", help="also report the parameter gradient")
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_metric)

    c = sub.add_parser("phantom", help="generate a synthetic fixed/moving pair")
    c.add_argument("--spec", help="phantom spec JSON (default spec if omitted)")
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_phantom)

    c = sub.add_parser("tre", help="target registration error over landmark pairs")
    c.add_argument("--landmarks", required=True)
    c.add_argument("--transform", help="transform JSON (default identity)")
    c.set_defaults(func=cmd_tre)

    c = sub.add_parser("checkerboard", help="checkerboard fusion of fixed and resampled moving")
    c.add_argument("--fixed", required=True)
    c.add_argument("--moving", required=True)
    c.add_argument("--transform", help="resample the moving volume through this transform first")
    c.add_argument("--cells", type=int, default=4)
    c.add_argument("--out", help="fused volume (MetaImage)")
    c.add_argument("--pgm", help="also write one slice as a PGM image")
    c.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    c.add_argument("--index", type=int)
    c.set_defaults(func=cmd_checkerboard)

    c = sub.add_parser("resample", help="resample a volume onto a reference grid")
    c.add_argument("--moving", required=True)
    c.add_argument("--reference", required=True)
    c.add_argument("--transform", help="transform JSON (default identity)")
    c.add_argument("--out", required=True)
    c.add_argument("--scheme", choices=(LINEAR, CUBIC), default=CUBIC)
    c.add_argument("--padding", type=float, default=0.0)
    c.set_defaults(func=cmd_resample)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"voxalign {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (VoxalignError, OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"voxalign {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
