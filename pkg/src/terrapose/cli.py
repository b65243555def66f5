"""terrapose command line: every pipeline stage as a file-based subcommand.

Exit codes: 0 success, 2 validation/input error, 3 numerical failure
(NoConsensus / Diverged). Nonzero exits write no output files; successful
outputs are written atomically. All angles on the CLI boundary are degrees.
Identical inputs plus --seed give byte-identical outputs for any --threads.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import geofuse, io, orient, panorama, pepalp, terrain, topdown
from .errors import NumericalFailure, TerraposeError
from .features import match_knn


class Diverged(NumericalFailure):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        code = (
            "UnknownSubcommand"
            if "argument command: invalid choice" in message
            else "InvalidArguments"
        )
        print(f"ERROR {code}: {message}", file=sys.stderr)
        raise SystemExit(2)


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("TERRAPOSE_THREADS", "1")))
    except ValueError:
        return 1


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed, 64-bit integer [any]")
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="internal parallelism cap [>=1; default: TERRAPOSE_THREADS or 1]",
    )
    p.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")


def _threads(args) -> int:
    return args.threads if args.threads and args.threads > 0 else _threads_default()


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def cmd_gen_dem(args):
    if args.kind == "mountain_mix":
        from .experiments import make_mountain_dem

        grid = make_mountain_dem(args.seed, n=args.size, cell_size=args.cell, n_hills=args.hills)
    else:
        grid = terrain.synth_terrain(
            args.kind,
            args.size,
            args.size,
            args.cell,
            origin_easting=args.origin_x,
            origin_northing=args.origin_y,
            height=args.height,
            amplitude=args.amp,
            sigma=args.sigma,
            slope=args.slope,
            axis_azimuth=math.radians(args.axis_azimuth_deg),
        )
    terrain.write_ascii_grid(grid, args.output)


def cmd_render_pano(args):
    grid = terrain.load_ascii_grid(args.dem)
    pano = panorama.render_horizon_panorama(
        grid,
        (args.x, args.y, args.z),
        math.radians(args.step_deg),
        args.max_range,
        curvature=args.curvature == "on",
        refraction_k=args.refraction_k,
        threads=_threads(args),
    )
    io.write_panorama_csv(args.output, pano)


def cmd_render_view(args):
    grid = terrain.load_ascii_grid(args.dem)
    pose = io.read_pose(args.pose)
    img, bands = panorama.render_view(
        grid, pose, shading=args.shading, max_range=args.max_range, threads=_threads(args)
    )
    io.write_pgm(args.output, img)
    if args.xyz_out:
        io.write_xyz_bands(args.xyz_out, bands)


def cmd_skyline(args):
    image = io.read_pgm(args.image)
    sk = orient.extract_image_skyline(
        image, gradient_threshold=args.grad_threshold, smoothing_radius=args.smooth_radius
    )
    io.write_query_skyline_csv(args.output, sk)


def _reference_for(args, grid, pose):
    pano = panorama.render_horizon_panorama(
        grid,
        pose.t,
        math.radians(args.step_deg),
        args.max_range,
        threads=_threads(args),
    )
    return orient.ReferenceSkyline.from_panorama(pano)


def cmd_orient_dtw(args):
    grid = terrain.load_ascii_grid(args.dem)
    pose = io.read_pose(args.pose)
    if args.skyline:
        sk = io.read_query_skyline_csv(args.skyline)
    else:
        sk = orient.extract_image_skyline(
            io.read_pgm(args.image),
            gradient_threshold=args.grad_threshold,
            smoothing_radius=args.smooth_radius,
        )
    sk = orient.smooth_skyline(sk, size=args.smooth_size)
    reference = _reference_for(args, grid, pose)
    heading, tilt, roll, alignment = orient.orient_by_skyline(
        sk,
        pose.intrinsics,
        reference,
        slope_weight=args.slope_weight,
        refine_iterations=args.refine_iterations,
        tilt_search_deg=args.tilt_search_deg,
    )
    io.write_json(
        args.output,
        {
            "heading_deg": math.degrees(heading),
            "tilt_deg": math.degrees(tilt),
            "roll_deg": math.degrees(roll),
            "dtw_cost": alignment.cost,
            "method": "dtw",
        },
    )


def cmd_orient_hog(args):
    grid = terrain.load_ascii_grid(args.dem)
    pose = io.read_pose(args.pose)
    query = io.read_pgm(args.image)
    scales = tuple(int(s) for s in args.scales.split(","))
    heading, azimuths, curve = orient.orient_by_patches(
        query,
        grid,
        pose.t,
        scales=scales,
        pixels_per_radian=pose.intrinsics.focal_px,
        max_range=args.max_range,
        stride=args.stride,
    )
    io.write_json(
        args.output,
        {
            "heading_deg": math.degrees(heading),
            "tilt_deg": 0.0,
            "roll_deg": 0.0,
            "dtw_cost": float("nan"),
            "method": "hog",
            "score_curve": {
                "azimuth_deg": [math.degrees(a) for a in azimuths],
                "score": [float(s) for s in curve],
            },
        },
    )


def cmd_pose_init(args):
    xyz, ldesc = io.read_landmarks_csv(args.landmarks)
    uv, qdesc = io.read_keypoints_csv(args.keypoints)
    intr = io.read_pose(args.pose).intrinsics
    matches = match_knn(ldesc, qdesc, ratio=args.ratio)
    if len(matches) < 6:
        raise TerraposeError(
            f"descriptor matching produced {len(matches)} candidate pairs, need >= 6"
        )
    li = matches[:, 0].astype(int)
    qi = matches[:, 1].astype(int)
    pose = pepalp.initial_pose_ransac(
        uv[qi], xyz[li], intr,
        iterations=args.iterations, inlier_tol_px=args.inlier_tol, seed=args.seed,
    )
    io.write_pose(args.output, pose)


def cmd_refine_pepalp(args):
    prior = io.read_pose(args.prior)
    xyz, ldesc = io.read_landmarks_csv(args.landmarks)
    uv, qdesc = io.read_keypoints_csv(args.keypoints)
    schedule = pepalp.PepAlpSchedule(
        max_iterations=args.max_iterations,
        gate_confidence=args.gate_confidence,
        descriptor_threshold=args.descr_threshold,
        descriptor_decay=args.descr_decay,
        pixel_sigma=args.pixel_sigma,
        tolerance=args.tolerance,
        inner_iterations=args.inner_iterations,
    )
    result = pepalp.pep_alp(prior, xyz, ldesc, uv, qdesc, schedule)
    if result.diverged:
        raise Diverged("no iteration accepted any match; prior retained")
    io.write_pose(args.output, result.pose)
    if args.diagnostics:
        with io.atomic_write(args.diagnostics) as fh:
            import json as _json

            for record in result.diagnostics:
                fh.write(_json.dumps(record, sort_keys=True, default=io._json_default))
                fh.write("\n")


def cmd_warp_topdown(args):
    raster = io.read_pgm(args.pano)
    pano = topdown.PanoramaImage(
        raster=raster,
        heading_col0=math.radians(args.heading0_deg),
        cam_height=args.height,
    )
    view = topdown.pano_to_topdown(
        pano, gsd=args.gsd, extent=args.extent, min_depression_deg=args.min_depression_deg
    )
    io.write_pgm(args.output, view.raster)


def cmd_register(args):
    td_raster = io.read_pgm(args.topdown)
    aerial = io.read_pgm(args.aerial)
    if args.matches:
        matches = io.read_matches_csv(args.matches)
    else:
        kp_a, d_a = topdown.detect_and_describe(
            td_raster, scales=tuple(int(s) for s in args.scales.split(",")),
            response_threshold=args.response_threshold,
        )
        kp_b, d_b = topdown.detect_and_describe(
            aerial, scales=tuple(int(s) for s in args.scales.split(",")),
            response_threshold=args.response_threshold,
        )
        nn = match_knn(d_a, d_b, ratio=args.ratio)
        matches = np.hstack(
            [kp_a[nn[:, 0].astype(int)], kp_b[nn[:, 1].astype(int)]]
        ) if len(nn) else np.zeros((0, 4))
    H, inliers = topdown.ransac_homography(
        matches, iterations=args.iterations, inlier_tol_px=args.inlier_tol, seed=args.seed
    )
    view = topdown.TopDownView(
        raster=td_raster, gsd=args.gsd_topdown, extent=td_raster.shape[1] * args.gsd_topdown
    )
    crop, (r0, c0), poly, coverage = topdown.register_crop(view, aerial, H)
    io.write_homography_json(args.homography_out, H)
    if args.crop_out:
        io.write_pgm(args.crop_out, crop)
    if args.polygon_out:
        io.write_json(
            args.polygon_out,
            {
                "polygon": [[float(x), float(y)] for x, y in poly],
                "crop_offset": [r0, c0],
                "coverage": coverage,
                "n_inliers": int(inliers.sum()),
            },
        )


def cmd_change_score(args):
    a = io.read_pgm(args.region_a)
    b = io.read_pgm(args.region_b)
    thresholds = topdown.ChangeThresholds(
        r_min=args.r_min if args.r_min is not None else topdown.CLASS_THRESHOLDS[args.scene].r_min,
        z_min=args.z_min,
        flagged_fraction=args.flag_fraction,
    )
    report = topdown.change_zscore(a, b, args.tile, args.scene, thresholds)
    io.write_json(
        args.output,
        {
            "scene_class": report.scene_class,
            "scene_changed": report.scene_changed,
            "changed_fraction": report.changed_fraction,
            "n_degenerate": report.n_degenerate,
            "tiles": [
                {"row": t.row, "col": t.col, "r": t.r, "z": t.z, "flag": t.changed,
                 "degenerate": t.degenerate}
                for t in report.tiles
            ],
        },
    )


def cmd_fuse(args):
    detections = io.read_detections_csv(args.detections)
    views, score_maps = io.views_from_json(args.views)
    road_raster = None
    if args.road_raster:
        arr, meta = io.read_f32_raster(args.road_raster)
        road_raster = geofuse.RoadDistanceRaster(
            origin_easting=float(meta.get("origin_easting", 0.0)),
            origin_northing=float(meta.get("origin_northing", 0.0)),
            cell_size=float(meta.get("cell_size", 1.0)),
            values=arr,
        )
    if args.priors:
        priors = io.priors_from_dict(io.read_json(args.priors), road_raster=road_raster)
    else:
        priors = geofuse.FusionPriors(road_raster=road_raster,
                                      detection_threshold=args.threshold)
    proposals = geofuse.union_and_rescore(
        detections, views, score_maps,
        merge_radius=args.merge_radius, footprint_radius=args.footprint_radius,
    )
    if args.exact:
        selected, energy = geofuse.solve_exact(proposals, priors)
    else:
        selected, energy = geofuse.solve_greedy(proposals, priors)
    io.write_proposals_csv(args.output, proposals, selected)


def cmd_learn_priors(args):
    positions = io.read_positions_csv(args.positions)
    hist = geofuse.learn_spacing_histogram(positions, bin_width=args.bin_width)
    priors = geofuse.FusionPriors(
        spacing=hist,
        w_spacing=args.w_spacing,
        w_road=args.w_road,
        detection_threshold=args.threshold,
    )
    io.write_json(args.output, io.priors_to_dict(priors))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(
        prog="terrapose",
        description="DEM panorama rendering, skyline orientation, pose refinement, "
        "top-down registration and multi-view detection fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-dem", help="write a synthetic DEM as an ESRI ASCII grid",
                       formatter_class=fmt)
    p.add_argument("--kind", required=True,
                   choices=["flat", "cone", "ridge", "gaussian_hill", "mountain_mix"],
                   help="analytic surface family")
    p.add_argument("--size", type=int, default=129, help="grid nodes per side [>=2]")
    p.add_argument("--cell", type=float, default=25.0, help="cell size, meters [>0]")
    p.add_argument("--height", type=float, default=0.0, help="flat height, meters")
    p.add_argument("--amp", type=float, default=None, help="peak amplitude, meters [>0]")
    p.add_argument("--sigma", type=float, default=None, help="gaussian sigma, meters [>0]")
    p.add_argument("--slope", type=float, default=None, help="cone slope, m/m [>0]")
    p.add_argument("--axis-azimuth-deg", type=float, default=0.0,
                   help="ridge axis azimuth, degrees [0..360)")
    p.add_argument("--hills", type=int, default=10, help="mountain_mix hill count [>=1]")
    p.add_argument("--origin-x", type=float, default=0.0, help="lower-left easting, meters")
    p.add_argument("--origin-y", type=float, default=0.0, help="lower-left northing, meters")
    p.add_argument("-o", "--output", required=True, help="output .asc path")
    _add_common(p)
    p.set_defaults(handler=cmd_gen_dem)

    p = sub.add_parser("render-pano", help="render a 360-degree horizon panorama CSV",
                       formatter_class=fmt)
    p.add_argument("--dem", required=True, help="input ESRI ASCII grid")
    p.add_argument("--x", type=float, required=True, help="camera easting, meters")
    p.add_argument("--y", type=float, required=True, help="camera northing, meters")
    p.add_argument("--z", type=float, required=True,
                   help="camera height, meters (raised to terrain+1.6 if at/below ground)")
    p.add_argument("--step-deg", type=float, default=1.0,
                   help="azimuth step, degrees [must divide 360]")
    p.add_argument("--max-range", type=float, default=20000.0, help="ray range, meters [>0]")
    p.add_argument("--curvature", choices=["off", "on"], default="off",
                   help="earth curvature and refraction correction")
    p.add_argument("--refraction-k", type=float, default=0.13,
                   help="refraction coefficient when curvature is on [0..1]")
    p.add_argument("-o", "--output", required=True, help="output panorama CSV")
    _add_common(p)
    p.set_defaults(handler=cmd_render_pano)

    p = sub.add_parser("render-view", help="render a perspective view of the DEM",
                       formatter_class=fmt)
    p.add_argument("--dem", required=True, help="input ESRI ASCII grid")
    p.add_argument("--pose", required=True, help="pose JSON (position, angles, intrinsics)")
    p.add_argument("--shading", choices=["hypsometric", "slope"], default="hypsometric",
                   help="grey shading style")
    p.add_argument("--max-range", type=float, default=20000.0, help="ray range, meters [>0]")
    p.add_argument("--xyz-out", default=None,
                   help="optional prefix for XYZ band rasters (<prefix>.{x,y,z}.f32)")
    p.add_argument("-o", "--output", required=True, help="output 16-bit PGM")
    _add_common(p)
    p.set_defaults(handler=cmd_render_view)

    p = sub.add_parser("skyline", help="extract the per-column skyline of an image",
                       formatter_class=fmt)
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--grad-threshold", type=float, default=0.1,
                   help="vertical gradient threshold, intensity/px [0..1]")
    p.add_argument("--smooth-radius", type=int, default=2, help="box smoothing radius, px [>=0]")
    p.add_argument("-o", "--output", required=True, help="output skyline CSV (col,row,valid)")
    _add_common(p)
    p.set_defaults(handler=cmd_skyline)

    p = sub.add_parser("orient-dtw", help="recover heading/tilt/roll by skyline DTW",
                       formatter_class=fmt)
    p.add_argument("--dem", required=True, help="input ESRI ASCII grid")
    p.add_argument("--pose", required=True,
                   help="prior pose JSON: position + intrinsics (angles ignored)")
    p.add_argument("--image", default=None, help="query PGM image")
    p.add_argument("--skyline", default=None, help="precomputed query skyline CSV")
    p.add_argument("--step-deg", type=float, default=0.5,
                   help="reference azimuth step, degrees [must divide 360]")
    p.add_argument("--max-range", type=float, default=20000.0, help="ray range, meters [>0]")
    p.add_argument("--grad-threshold", type=float, default=0.1,
                   help="skyline gradient threshold, intensity/px [0..1]")
    p.add_argument("--smooth-radius", type=int, default=2, help="image smoothing radius, px")
    p.add_argument("--smooth-size", type=int, default=5,
                   help="skyline moving-average width, columns [>=1]")
    p.add_argument("--slope-weight", type=float, default=0.5,
                   help="DTW slope-difference weight [>=0]")
    p.add_argument("--tilt-search-deg", type=float, default=4.0,
                   help="coarse tilt sweep half-range, degrees [0 disables]")
    p.add_argument("--refine-iterations", type=int, default=6,
                   help="tilt/roll compensation iterations [>=0]")
    p.add_argument("-o", "--output", required=True, help="output orientation JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_orient_dtw)

    p = sub.add_parser("orient-hog", help="recover heading by HOG patch correlation",
                       formatter_class=fmt)
    p.add_argument("--dem", required=True, help="input ESRI ASCII grid")
    p.add_argument("--pose", required=True,
                   help="prior pose JSON: position + intrinsics (angles ignored)")
    p.add_argument("--image", required=True, help="query PGM image")
    p.add_argument("--scales", default="32,48,64",
                   help="comma-separated patch sizes, px [each >=16]")
    p.add_argument("--stride", type=int, default=2, help="azimuth candidate stride [>=1]")
    p.add_argument("--max-range", type=float, default=20000.0, help="ray range, meters [>0]")
    p.add_argument("-o", "--output", required=True, help="output orientation JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_orient_hog)

    p = sub.add_parser("pose-init", help="RANSAC initial pose from 2D-3D correspondences",
                       formatter_class=fmt)
    p.add_argument("--landmarks", required=True, help="landmarks CSV (x,y,z,d0..)")
    p.add_argument("--keypoints", required=True, help="query keypoints CSV (u,v,d0..)")
    p.add_argument("--pose", required=True, help="pose JSON supplying the intrinsics")
    p.add_argument("--ratio", type=float, default=0.9,
                   help="descriptor NN ratio threshold [0..1]")
    p.add_argument("--iterations", type=int, default=1000, help="RANSAC iterations [>=1]")
    p.add_argument("--inlier-tol", type=float, default=3.0,
                   help="inlier reprojection tolerance, px [>0]")
    p.add_argument("-o", "--output", required=True, help="output pose JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_pose_init)

    p = sub.add_parser("refine-pepalp",
                       help="iterated Kalman pose refinement with ellipse gating",
                       formatter_class=fmt)
    p.add_argument("--prior", required=True, help="prior pose JSON (with covariance)")
    p.add_argument("--landmarks", required=True, help="landmarks CSV (x,y,z,d0..)")
    p.add_argument("--keypoints", required=True, help="query keypoints CSV (u,v,d0..)")
    p.add_argument("--max-iterations", type=int, default=10, help="outer iterations [>=1]")
    p.add_argument("--gate-confidence", type=float, default=0.95,
                   help="chi-square gate confidence [0..1]")
    p.add_argument("--descr-threshold", type=float, default=0.8,
                   help="initial descriptor distance threshold [>0]")
    p.add_argument("--descr-decay", type=float, default=0.8,
                   help="per-iteration threshold decay [(0,1)]")
    p.add_argument("--pixel-sigma", type=float, default=1.0,
                   help="measurement noise sigma, px [>0]")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="state-change convergence tolerance [>0]")
    p.add_argument("--inner-iterations", type=int, default=3,
                   help="IEKF relinearizations per update [>=1]")
    p.add_argument("--diagnostics", default=None, help="optional JSON-lines diagnostics path")
    p.add_argument("-o", "--output", required=True, help="output refined pose JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_refine_pepalp)

    p = sub.add_parser("warp-topdown", help="warp a ground panorama to a top-down view",
                       formatter_class=fmt)
    p.add_argument("--pano", required=True, help="equirectangular PGM (width = 2 x height)")
    p.add_argument("--height", type=float, default=2.5, help="camera height, meters [>0]")
    p.add_argument("--heading0-deg", type=float, default=0.0,
                   help="azimuth of panorama column 0, degrees")
    p.add_argument("--gsd", type=float, default=0.5, help="ground sampling distance, m/px [>0]")
    p.add_argument("--extent", type=float, default=150.0, help="square extent, meters [>0]")
    p.add_argument("--min-depression-deg", type=float, default=5.0,
                   help="cells below this depression are nodata, degrees [>0]")
    p.add_argument("-o", "--output", required=True, help="output 16-bit PGM")
    _add_common(p)
    p.set_defaults(handler=cmd_warp_topdown)

    p = sub.add_parser("register",
                       help="register a top-down view inside an aerial image",
                       formatter_class=fmt)
    p.add_argument("--topdown", required=True, help="top-down PGM")
    p.add_argument("--aerial", required=True, help="aerial PGM")
    p.add_argument("--matches", default=None,
                   help="optional external matches CSV (uA,vA,uB,vB); skips detection")
    p.add_argument("--scales", default="16,24,32",
                   help="descriptor patch sizes, px [each >=16]")
    p.add_argument("--response-threshold", type=float, default=0.01,
                   help="corner response threshold, relative [0..1]")
    p.add_argument("--ratio", type=float, default=0.8, help="NN ratio threshold [0..1]")
    p.add_argument("--iterations", type=int, default=1000, help="RANSAC iterations [>=1]")
    p.add_argument("--inlier-tol", type=float, default=3.0,
                   help="symmetric transfer error tolerance, px [>0]")
    p.add_argument("--gsd-topdown", type=float, default=0.5, help="top-down GSD, m/px [>0]")
    p.add_argument("--homography-out", required=True, help="output homography JSON")
    p.add_argument("--crop-out", default=None, help="optional aerial crop PGM")
    p.add_argument("--polygon-out", default=None, help="optional footprint polygon JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_register)

    p = sub.add_parser("change-score", help="tile-wise correlation change scoring",
                       formatter_class=fmt)
    p.add_argument("--region-a", required=True, help="first registered region PGM")
    p.add_argument("--region-b", required=True, help="second registered region PGM")
    p.add_argument("--tile", type=int, default=32,
                   help="tile size, px [must divide region size]")
    p.add_argument("--scene", choices=["urban", "rural"], required=True,
                   help="scene class (external preclassification)")
    p.add_argument("--r-min", type=float, default=None,
                   help="correlation flag threshold [-1..1; default per scene class]")
    p.add_argument("--z-min", type=float, default=-2.0, help="robust z flag threshold")
    p.add_argument("--flag-fraction", type=float, default=0.25,
                   help="scene verdict flagged-tile fraction [0..1]")
    p.add_argument("-o", "--output", required=True, help="output change report JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_change_score)

    p = sub.add_parser("fuse", help="multi-view detection fusion in geographic space",
                       formatter_class=fmt)
    p.add_argument("--detections", required=True,
                   help="detections CSV (view_id,umin,vmin,umax,vmax,score)")
    p.add_argument("--views", required=True, help="views JSON (geometries + score rasters)")
    p.add_argument("--priors", default=None, help="optional priors JSON from learn-priors")
    p.add_argument("--road-raster", default=None,
                   help="optional road distance raster (.f32 + sidecar)")
    p.add_argument("--merge-radius", type=float, default=2.0,
                   help="proposal merge radius, meters [>0]")
    p.add_argument("--footprint-radius", type=float, default=1.0,
                   help="object footprint radius, meters [>0]")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="detection threshold when no priors JSON [0..1]")
    p.add_argument("--exact", action="store_true",
                   help="use exhaustive selection (<= 20 proposals)")
    p.add_argument("-o", "--output", required=True,
                   help="output proposals CSV (easting,northing,score,selected)")
    _add_common(p)
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("learn-priors", help="learn the spacing prior from positions",
                       formatter_class=fmt)
    p.add_argument("--positions", required=True, help="training positions CSV (easting,northing)")
    p.add_argument("--bin-width", type=float, default=1.0, help="histogram bin width, meters [>0]")
    p.add_argument("--w-spacing", type=float, default=0.2, help="spacing prior weight [>=0]")
    p.add_argument("--w-road", type=float, default=0.0, help="road prior weight [>=0]")
    p.add_argument("--threshold", type=float, default=0.5, help="detection threshold [0..1]")
    p.add_argument("-o", "--output", required=True, help="output priors JSON")
    _add_common(p)
    p.set_defaults(handler=cmd_learn_priors)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.handler(args)
    except NumericalFailure as e:
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return 3
    except TerraposeError as e:
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"ERROR InvalidInput: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
