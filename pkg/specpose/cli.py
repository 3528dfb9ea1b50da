"""Command-line interface for specpose."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .codebook import RoughPose, build_codebook
from .errors import SpecPoseError, ValidationError
from .geometry import CameraIntrinsics, Mesh
from .harness import (
    EvalConfig,
    MeshRegistry,
    ablate_losses,
    evaluate,
    load_dataset,
    load_predictions,
    refinement_curve,
    selftest,
)
from .meshes import bundled_names, bundled_mesh
from .refine import NoiseConfig, RefineOptions, coarse_match, iterative_refine
from .render import (
    REFINER_SIZE,
    assemble_refiner_input,
    crop_and_resize,
    extract_sharp_edges,
    mask_bbox,
    render_view,
)
from .utils import FileUtils, ImageIO, MeshIO, PoseIO, TensorIO

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INTERNAL = 2


def setup_logging(verbose: bool = False) -> None:
    """Set up logging configuration."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr,
    )


class UsageError(ValidationError):
    """Bad command-line usage."""


class SpecPoseArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the validation exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _emit(args: argparse.Namespace, data: Dict[str, Any], table: Optional[str] = None) -> None:
    if args.pretty:
        if table is not None:
            print(table)
        else:
            width = max((len(k) for k in data), default=0)
            for key, value in data.items():
                print(f"{key.ljust(width)}  {json.dumps(value) if not isinstance(value, str) else value}")
    else:
        print(json.dumps(data))


def _mesh(spec: str) -> Mesh:
    return MeshRegistry().resolve(spec)


def _intrinsics(path: Optional[str]) -> CameraIntrinsics:
    return PoseIO.load_intrinsics(path) if path else CameraIntrinsics.default()


def _floats(text: str, n: int, what: str) -> List[float]:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(values) != n:
        raise UsageError(f"{what} must be {n} comma-separated numbers, got {text!r}")
    return values


def _refine_options(args: argparse.Namespace) -> RefineOptions:
    return RefineOptions(
        loss_kind=args.loss,
        outer_iterations=args.iters,
        max_inner_steps=args.inner_steps,
        n_points=args.n_points,
        seed=args.seed,
    )


def _noise(args: argparse.Namespace) -> NoiseConfig:
    if args.noise:
        rot, offset, depth = _floats(args.noise, 3, "--noise")
        return NoiseConfig(rot, offset, depth, args.seed)
    return NoiseConfig.reference(args.noise_interpretation, args.angle_units, seed=args.seed)


def extract_edges_command(args: argparse.Namespace) -> None:
    mesh = _mesh(args.mesh)
    edges = extract_sharp_edges(mesh, args.threshold)
    _emit(
        args,
        {
            "mesh": mesh.name,
            "threshold": edges.dihedral_threshold,
            "count": len(edges),
            "edges": edges.edges.tolist(),
        },
    )


def render_command(args: argparse.Namespace) -> None:
    mesh = _mesh(args.mesh)
    pose = PoseIO.load_pose(args.pose)
    intr = PoseIO.load_intrinsics(args.intrinsics)
    edges = extract_sharp_edges(mesh, args.threshold)
    buffers = render_view(mesh, edges, pose, intr, width=args.line_width)
    out = FileUtils.ensure_directory(Path(args.output_dir))
    ImageIO.save_png(buffers.mask, out / "mask.png")
    ImageIO.save_png(buffers.edge_image, out / "edges.png")
    bbox = mask_bbox(buffers.mask)
    result: Dict[str, Any] = {
        "mask_pixels": int(buffers.mask.sum()),
        "edge_pixels": int(buffers.edge_image.sum()),
        "bbox": list(bbox) if bbox else None,
        "output_dir": str(out),
    }
    if bbox is not None:
        gray = np.repeat((buffers.mask.astype(np.uint8) * 128)[..., None], 3, axis=2)
        crop = np.clip(np.rint(crop_and_resize(gray, bbox, args.size)), 0, 255).astype(np.uint8)
        tensor = assemble_refiner_input(
            crop,
            crop_and_resize(buffers.edge_image, bbox, args.size) > 0.5,
            crop_and_resize(buffers.mask, bbox, args.size) > 0.5,
            size=args.size,
        )
        TensorIO.save(tensor.channels, out / "refiner_input.spk5")
        result["refiner_input"] = str(out / "refiner_input.spk5")
    else:
        logger.warning("Object not visible; no refiner input written")
    _emit(args, result)


def encode_pose_command(args: argparse.Namespace) -> None:
    cb = build_codebook()
    pose = PoseIO.load_pose(args.pose)
    if args.intrinsics:
        _emit(args, cb.encode_pose(pose, _intrinsics(args.intrinsics)).to_dict())
    else:
        vp, ipr = cb.encode_rotation(pose.rotation)
        _emit(args, {"vp": vp, "ipr": ipr})


def decode_pose_command(args: argparse.Namespace) -> None:
    cb = build_codebook()
    offset = _floats(args.offset, 2, "offset")
    rough = RoughPose(args.vp, args.ipr, (offset[0], offset[1]), args.depth)
    _emit(args, cb.decode_pose(rough, _intrinsics(args.intrinsics)).to_dict())


def coarse_match_command(args: argparse.Namespace) -> None:
    mesh = _mesh(args.mesh)
    image = ImageIO.load_png(args.edge_image)
    if image.ndim == 3:
        image = image.max(axis=2)
    intr = _intrinsics(args.intrinsics)
    rough = coarse_match(
        image > 0, mesh, extract_sharp_edges(mesh, args.threshold), build_codebook(), args.depth, intr
    )
    _emit(args, rough.to_dict())


def refine_command(args: argparse.Namespace) -> None:
    mesh = _mesh(args.mesh)
    initial = PoseIO.load_pose(args.init_pose)
    gt = PoseIO.load_pose(args.gt_pose)
    result = iterative_refine(initial, mesh, gt, _intrinsics(args.intrinsics), _refine_options(args))
    if args.trace_csv:
        result.save_trace_csv(args.trace_csv)
    table = "\n".join(f"iter {k}: ADD {add:.6f} m" for k, add in enumerate(result.add_trace))
    _emit(args, result.to_dict(), table)


def evaluate_command(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.manifest)
    predictions = load_predictions(args.predictions)
    config = EvalConfig(n_points=args.n_points, seed=args.seed, workers=args.workers)
    report = evaluate(dataset, predictions, registry=MeshRegistry(Path(args.manifest).parent), config=config)
    _emit(args, report.to_dict(), report.format_table())


def ablate_command(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.manifest)
    report = ablate_losses(
        dataset,
        MeshRegistry(Path(args.manifest).parent),
        _noise(args),
        _refine_options(args),
        EvalConfig(seed=args.seed, workers=args.workers),
    )
    _emit(args, report.to_dict(), report.format_table())


def curve_command(args: argparse.Namespace) -> None:
    dataset = load_dataset(args.manifest)
    report = refinement_curve(
        dataset,
        MeshRegistry(Path(args.manifest).parent),
        _noise(args),
        _refine_options(args),
        _intrinsics(args.intrinsics),
        EvalConfig(seed=args.seed, workers=args.workers),
    )
    _emit(args, report.to_dict(), report.format_table())


def meshes_command(args: argparse.Namespace) -> None:
    rows = []
    for name in bundled_names():
        mesh = bundled_mesh(name)
        entry: Dict[str, Any] = {
            "name": name,
            "vertices": mesh.n_vertices,
            "triangles": mesh.n_triangles,
            "diameter": mesh.diameter,
        }
        if args.export:
            entry["path"] = str(MeshIO.save_obj(mesh, Path(args.export) / f"{name}.obj"))
        rows.append(entry)
    table = "\n".join(
        f"{r['name']:<18} {r['vertices']:>6} verts {r['triangles']:>6} tris  diameter {r['diameter']:.4f} m"
        for r in rows
    )
    _emit(args, {"meshes": rows}, table)


def selftest_command(args: argparse.Namespace) -> int:
    result = selftest(seed=args.seed)
    summary = (
        f"{result['round_trips']}/{result['bins']} round-trips ok; "
        f"gradient checks {'ok' if result['gradients_ok'] else 'FAILED'}"
    )
    logger.info(summary)
    _emit(args, result, summary)
    return EXIT_OK if result["passed"] else EXIT_VALIDATION


def _add_common(p: argparse.ArgumentParser, top_level: bool = False) -> None:
    # Subcommands repeat the global flags without defaults so they never
    # overwrite a value given before the subcommand name.
    seed_default = 0 if top_level else argparse.SUPPRESS
    flag_default = False if top_level else argparse.SUPPRESS
    p.add_argument('--seed', type=int, default=seed_default, help='Seed for every random draw (default: 0)')
    p.add_argument('--pretty', action='store_true', default=flag_default, help='Print aligned tables instead of JSON')
    p.add_argument('--verbose', '-v', action='store_true', default=flag_default, help='Enable verbose logging')


def _add_refine_args(p: argparse.ArgumentParser) -> None:
    p.add_argument('--loss', choices=['l_cpm', 'l_3dpm'], default='l_cpm', help='Loss to minimize (default: l_cpm)')
    p.add_argument('--iters', type=int, default=4, help='Outer refinement iterations (default: 4)')
    p.add_argument('--inner-steps', type=int, default=100, help='Descent steps per iteration (default: 100)')
    p.add_argument('--n-points', type=int, default=500, help='Model sample points (default: 500)')


def _add_noise_args(p: argparse.ArgumentParser) -> None:
    p.add_argument('--noise', help='Noise sigmas as ROT,OFFSET,DEPTH (radians, meters)')
    p.add_argument(
        '--noise-interpretation', choices=['std', 'variance'], default='std',
        help='Read the default noise constants as std or variance (default: std)',
    )
    p.add_argument('--angle-units', choices=['rad', 'deg'], default='rad', help='Units of the default rotation constant')


def build_parser() -> argparse.ArgumentParser:
    parser = SpecPoseArgumentParser(
        prog='specpose',
        description="Pose codebooks, sharp-edge rendering, point-matching refinement and ADD/ADD-S evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  specpose selftest
  specpose extract-edges housing --threshold 0.7854
  specpose encode-pose pose.json
  specpose decode-pose 10 5 50,0 2.0
  specpose refine shaft init.json gt.json --loss l_cpm --iters 4
  specpose evaluate manifest.json predictions.json --pretty
        """,
    )
    _add_common(parser, top_level=True)
    subparsers = parser.add_subparsers(dest='command', help='Available commands', parser_class=SpecPoseArgumentParser)

    def add(name: str, help_text: str, func: Callable[[argparse.Namespace], Any]) -> argparse.ArgumentParser:
        p = subparsers.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = add('extract-edges', 'List sharp edges of a mesh', extract_edges_command)
    p.add_argument('mesh', help='Bundled mesh name or OBJ path')
    p.add_argument('--threshold', type=float, default=np.pi / 4, help='Dihedral threshold in radians (default: pi/4)')

    p = add('render', 'Render mask, edges and the refiner input', render_command)
    p.add_argument('mesh', help='Bundled mesh name or OBJ path')
    p.add_argument('pose', help='Pose JSON file')
    p.add_argument('intrinsics', help='Intrinsics JSON file')
    p.add_argument('--size', type=int, default=REFINER_SIZE, help='Refiner crop size (default: 240)')
    p.add_argument('--threshold', type=float, default=np.pi / 4, help='Sharp-edge threshold in radians')
    p.add_argument('--line-width', type=int, default=1, help='Edge line width in pixels (default: 1)')
    p.add_argument('--output-dir', '-o', default='render', help='Output directory (default: render)')

    p = add('encode-pose', 'Encode a pose into codebook bins', encode_pose_command)
    p.add_argument('pose', help='Pose JSON file')
    p.add_argument('--intrinsics', help='Intrinsics JSON; adds offset and depth to the output')

    p = add('decode-pose', 'Decode codebook bins into a pose', decode_pose_command)
    p.add_argument('vp', type=int, help='Viewpoint index')
    p.add_argument('ipr', type=int, help='In-plane rotation index')
    p.add_argument('offset', help='2D offset in pixels as U,V')
    p.add_argument('depth', type=float, help='Depth in meters')
    p.add_argument('--intrinsics', help='Intrinsics JSON (default: 640x480, f=500)')

    p = add('coarse-match', 'Match an edge image against the template library', coarse_match_command)
    p.add_argument('edge_image', help='Edge image PNG')
    p.add_argument('mesh', help='Bundled mesh name or OBJ path')
    p.add_argument('--depth', type=float, default=0.5, help='Depth guess in meters (default: 0.5)')
    p.add_argument('--intrinsics', help='Intrinsics JSON (default: 640x480, f=500)')
    p.add_argument('--threshold', type=float, default=np.pi / 4, help='Sharp-edge threshold in radians')

    p = add('refine', 'Iteratively refine a pose', refine_command)
    p.add_argument('mesh', help='Bundled mesh name or OBJ path')
    p.add_argument('init_pose', help='Initial pose JSON')
    p.add_argument('gt_pose', help='Ground-truth pose JSON')
    p.add_argument('--intrinsics', help='Intrinsics JSON (default: 640x480, f=500)')
    p.add_argument('--trace-csv', help='Write the loss trace as CSV')
    _add_refine_args(p)

    p = add('evaluate', 'ADD / ADD-S success rates', evaluate_command)
    p.add_argument('manifest', help='Dataset manifest JSON')
    p.add_argument('predictions', help='Predicted poses JSON array')
    p.add_argument('--n-points', type=int, default=1000, help='Sample points per mesh (default: 1000)')
    p.add_argument('--workers', type=int, default=1, help='Worker threads (default: 1)')

    p = add('ablate', 'Compare L1 and cosine refinement on perturbed poses', ablate_command)
    p.add_argument('manifest', help='Dataset manifest JSON')
    p.add_argument('--workers', type=int, default=1, help='Worker threads (default: 1)')
    _add_refine_args(p)
    _add_noise_args(p)

    p = add('curve', 'ADD success rate per refinement iteration', curve_command)
    p.add_argument('manifest', help='Dataset manifest JSON')
    p.add_argument('--intrinsics', help='Intrinsics JSON (default: 640x480, f=500)')
    p.add_argument('--workers', type=int, default=1, help='Worker threads (default: 1)')
    _add_refine_args(p)
    _add_noise_args(p)

    p = add('meshes', 'List bundled meshes', meshes_command)
    p.add_argument('--export', help='Write every bundled mesh as OBJ into this directory')

    add('selftest', 'Codebook round-trips and gradient checks', selftest_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.verbose)

    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_VALIDATION

    try:
        code = args.func(args)
        return EXIT_OK if code is None else int(code)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SpecPoseError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        print(f"Internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
