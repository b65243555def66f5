"""File formats for every pipeline stage.

Rasters travel as binary PGM (P5, 8- or 16-bit); float rasters (XYZ bands,
score maps, road distances) as 32-bit little-endian flat binary with a JSON
sidecar; poses and homographies as JSON; skylines, panoramas, landmarks,
keypoints, matches and detections as headered CSV. All angles in files are
degrees; radians never cross the I/O boundary. Writes are atomic
(temp-then-rename).
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from contextlib import contextmanager

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .orient import QuerySkyline, ReferenceSkyline
from .panorama import SyntheticPanorama, XyzBands


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file in the target directory, rename on success."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path, obj) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# PGM / PPM rasters
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    """Grey raster in [0, 1] as binary PGM; NaN pixels are written as 0."""
    img = np.nan_to_num(np.asarray(image, dtype=np.float64), nan=0.0)
    img = np.clip(img, 0.0, 1.0)
    q = np.round(img * maxval)
    data = (
        q.astype(">u2").tobytes() if maxval > 255 else q.astype(np.uint8).tobytes()
    )
    with atomic_write(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode())
        fh.write(data)


def _read_pnm_header(fh):
    magic = fh.readline().split()[0]
    vals = []
    while len(vals) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PNM header")
        stripped = line.split(b"#")[0].split()
        vals.extend(int(v) for v in stripped)
    return magic, vals[0], vals[1], vals[2]


def read_pgm(path) -> np.ndarray:
    """PGM (P5) or PPM (P6, converted to luminance) as float in [0, 1]."""
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_pnm_header(fh)
        channels = {b"P5": 1, b"P6": 3}.get(magic)
        if channels is None:
            raise ValueError(f"unsupported PNM magic {magic!r} in {path}")
        dtype = ">u2" if maxval > 255 else np.uint8
        count = width * height * channels
        data = np.frombuffer(fh.read(), dtype=dtype, count=count).astype(np.float64)
    img = data.reshape(height, width, channels) / maxval
    if channels == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
        return img
    return img[:, :, 0]


# ---------------------------------------------------------------------------
# float32 rasters with JSON sidecar
# ---------------------------------------------------------------------------

def write_f32_raster(path, array: np.ndarray, sidecar_extra: dict | None = None) -> None:
    """Flat little-endian float32 binary plus <path>.json sidecar; NaN is the
    nodata value and recorded in the sidecar."""
    arr = np.asarray(array, dtype="<f4")
    with atomic_write(path, "wb") as fh:
        fh.write(arr.tobytes())
    meta = {"width": int(arr.shape[1]), "height": int(arr.shape[0]),
            "dtype": "float32-le", "nodata": "nan"}
    if sidecar_extra:
        meta.update(sidecar_extra)
    write_json(str(path) + ".json", meta)


def read_f32_raster(path):
    meta = read_json(str(path) + ".json")
    arr = np.fromfile(path, dtype="<f4").reshape(meta["height"], meta["width"])
    return arr.astype(np.float64), meta


def write_xyz_bands(prefix, bands: XyzBands) -> None:
    """Three float32 rasters <prefix>.{x,y,z}.f32 plus sidecars."""
    for name, band in (("x", bands.x), ("y", bands.y), ("z", bands.z)):
        write_f32_raster(f"{prefix}.{name}.f32", band, {"band": name})


def read_xyz_bands(prefix) -> XyzBands:
    arrays = {}
    for name in ("x", "y", "z"):
        arrays[name], _ = read_f32_raster(f"{prefix}.{name}.f32")
    return XyzBands(**arrays)


# ---------------------------------------------------------------------------
# pose JSON
# ---------------------------------------------------------------------------

_DEG = math.pi / 180.0
_COV_SCALE = np.diag([1.0, 1.0, 1.0, _DEG, _DEG, _DEG])


def pose_to_dict(pose: CameraPose) -> dict:
    k = pose.intrinsics
    cov_deg = np.linalg.inv(_COV_SCALE) @ pose.covariance @ np.linalg.inv(_COV_SCALE)
    return {
        "x": float(pose.t[0]),
        "y": float(pose.t[1]),
        "z": float(pose.t[2]),
        "heading_deg": math.degrees(pose.heading),
        "tilt_deg": math.degrees(pose.tilt),
        "roll_deg": math.degrees(pose.roll),
        "focal_px": k.focal_px,
        "ppu": k.ppu,
        "ppv": k.ppv,
        "width": k.width,
        "height": k.height,
        "cov": [float(v) for v in cov_deg.ravel()],
    }


def pose_from_dict(d: dict) -> CameraPose:
    """Pose JSON: position meters, angles degrees; covariance either a
    36-number row-major 'cov' (meters/degrees units) or diagonal from
    sigma_x_m/sigma_y_m/sigma_z_m/sigma_heading_deg/sigma_tilt_deg/
    sigma_roll_deg entries (default zero)."""
    intr = CameraIntrinsics(
        focal_px=float(d["focal_px"]),
        ppu=float(d.get("ppu", d["width"] / 2.0)),
        ppv=float(d.get("ppv", d["height"] / 2.0)),
        width=int(d["width"]),
        height=int(d["height"]),
    )
    if "cov" in d:
        cov_deg = np.asarray(d["cov"], dtype=np.float64).reshape(6, 6)
    else:
        sig = [
            float(d.get("sigma_x_m", 0.0)),
            float(d.get("sigma_y_m", 0.0)),
            float(d.get("sigma_z_m", 0.0)),
            float(d.get("sigma_heading_deg", 0.0)),
            float(d.get("sigma_tilt_deg", 0.0)),
            float(d.get("sigma_roll_deg", 0.0)),
        ]
        cov_deg = np.diag(np.square(sig))
    cov = _COV_SCALE @ cov_deg @ _COV_SCALE
    return CameraPose(
        t=(float(d["x"]), float(d["y"]), float(d["z"])),
        r=(
            math.radians(float(d.get("heading_deg", 0.0))),
            math.radians(float(d.get("tilt_deg", 0.0))),
            math.radians(float(d.get("roll_deg", 0.0))),
        ),
        intrinsics=intr,
        covariance=cov,
    )


def write_pose(path, pose: CameraPose) -> None:
    write_json(path, pose_to_dict(pose))


def read_pose(path) -> CameraPose:
    return pose_from_dict(read_json(path))


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path, expected_header=None):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if expected_header is not None and [h.strip() for h in header[: len(expected_header)]] != list(expected_header):
            raise ValueError(f"{path}: expected header {expected_header}, got {header}")
        return header, [row for row in r if row]


def write_panorama_csv(path, pano: SyntheticPanorama) -> None:
    rows = [
        (
            repr(math.degrees(az)),
            repr(math.degrees(el)),
            repr(float(rg)),
            repr(float(p[0])),
            repr(float(p[1])),
            repr(float(p[2])),
        )
        for az, el, rg, p in zip(pano.azimuths, pano.elevations, pano.ranges, pano.points)
    ]
    _write_csv(path, ("azimuth_deg", "elev_deg", "range_m", "x", "y", "z"), rows)


def read_reference_skyline_csv(path) -> ReferenceSkyline:
    _, rows = _read_csv(path, ("azimuth_deg", "elev_deg"))
    az = np.array([math.radians(float(r[0])) for r in rows])
    el = np.array([math.radians(float(r[1])) for r in rows])
    return ReferenceSkyline(azimuths=az, elevations=el)


def write_reference_skyline_csv(path, ref: ReferenceSkyline) -> None:
    rows = [
        (repr(math.degrees(a)), repr(math.degrees(e)))
        for a, e in zip(ref.azimuths, ref.elevations)
    ]
    _write_csv(path, ("azimuth_deg", "elev_deg"), rows)


def write_query_skyline_csv(path, skyline: QuerySkyline) -> None:
    rows = [
        (c, repr(float(skyline.rows[c])) if skyline.valid[c] else "nan",
         int(skyline.valid[c]))
        for c in range(skyline.width)
    ]
    _write_csv(path, ("col", "row", "valid"), rows)


def read_query_skyline_csv(path) -> QuerySkyline:
    _, rows = _read_csv(path, ("col", "row", "valid"))
    n = max(int(r[0]) for r in rows) + 1
    out = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    for r in rows:
        c = int(r[0])
        valid[c] = bool(int(r[2]))
        if valid[c]:
            out[c] = float(r[1])
    return QuerySkyline(rows=out, valid=valid)


def write_landmarks_csv(path, xyz: np.ndarray, descriptors: np.ndarray) -> None:
    d = np.asarray(descriptors)
    header = ["x", "y", "z"] + [f"d{i}" for i in range(d.shape[1])]
    rows = [
        [repr(float(v)) for v in np.concatenate([p, dv])] for p, dv in zip(np.asarray(xyz), d)
    ]
    _write_csv(path, header, rows)


def read_landmarks_csv(path):
    header, rows = _read_csv(path)
    if header[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected landmarks header x,y,z,d0..., got {header[:4]}")
    data = np.array([[float(v) for v in r] for r in rows])
    return data[:, :3], data[:, 3:]


def write_keypoints_csv(path, uv: np.ndarray, descriptors: np.ndarray) -> None:
    d = np.asarray(descriptors)
    header = ["u", "v"] + [f"d{i}" for i in range(d.shape[1])]
    rows = [
        [repr(float(v)) for v in np.concatenate([p, dv])] for p, dv in zip(np.asarray(uv), d)
    ]
    _write_csv(path, header, rows)


def read_keypoints_csv(path):
    header, rows = _read_csv(path)
    if header[:2] != ["u", "v"]:
        raise ValueError(f"{path}: expected keypoints header u,v,d0..., got {header[:3]}")
    data = np.array([[float(v) for v in r] for r in rows])
    return data[:, :2], data[:, 2:]


def write_matches_csv(path, matches: np.ndarray) -> None:
    rows = [[repr(float(v)) for v in m] for m in np.asarray(matches)[:, :4]]
    _write_csv(path, ("uA", "vA", "uB", "vB"), rows)


def read_matches_csv(path) -> np.ndarray:
    _, rows = _read_csv(path, ("uA", "vA", "uB", "vB"))
    return np.array([[float(v) for v in r[:4]] for r in rows])


def write_homography_json(path, H) -> None:
    write_json(path, {"matrix": [float(v) for v in np.asarray(H.matrix).ravel()]})


def read_homography_json(path):
    from .topdown import Homography

    return Homography(np.asarray(read_json(path)["matrix"], dtype=np.float64).reshape(3, 3))


def read_detections_csv(path):
    from .geofuse import ViewDetection

    _, rows = _read_csv(path, ("view_id", "umin", "vmin", "umax", "vmax", "score"))
    return [
        ViewDetection(
            view_id=r[0],
            bbox=(float(r[1]), float(r[2]), float(r[3]), float(r[4])),
            score=float(r[5]),
        )
        for r in rows
    ]


def write_detections_csv(path, detections) -> None:
    rows = [
        (d.view_id, repr(d.bbox[0]), repr(d.bbox[1]), repr(d.bbox[2]), repr(d.bbox[3]),
         repr(d.score))
        for d in detections
    ]
    _write_csv(path, ("view_id", "umin", "vmin", "umax", "vmax", "score"), rows)


def write_proposals_csv(path, proposals, selected_indices) -> None:
    sel = set(selected_indices)
    rows = [
        (repr(p.easting), repr(p.northing), repr(p.combined_score), int(i in sel))
        for i, p in enumerate(proposals)
    ]
    _write_csv(path, ("easting", "northing", "score", "selected"), rows)


def read_positions_csv(path) -> np.ndarray:
    _, rows = _read_csv(path, ("easting", "northing"))
    return np.array([[float(r[0]), float(r[1])] for r in rows])


def write_positions_csv(path, positions) -> None:
    rows = [(repr(float(e)), repr(float(n))) for e, n in np.asarray(positions)]
    _write_csv(path, ("easting", "northing"), rows)


# ---------------------------------------------------------------------------
# priors and views JSON
# ---------------------------------------------------------------------------

def priors_to_dict(priors) -> dict:
    out = {
        "spacing": {
            "bin_width": priors.spacing.bin_width,
            "probs": [float(v) for v in priors.spacing.probs],
            "floor": priors.spacing.floor,
        },
        "road": {
            "bin_width": priors.road_histogram.bin_width,
            "probs": [float(v) for v in priors.road_histogram.probs],
            "floor": priors.road_histogram.floor,
        },
        "w_spacing": priors.w_spacing,
        "w_road": priors.w_road,
        "detection_threshold": priors.detection_threshold,
    }
    return out


def priors_from_dict(d: dict, road_raster=None):
    from .geofuse import FusionPriors, SpacingHistogram

    def hist(h):
        return SpacingHistogram(
            bin_width=float(h["bin_width"]),
            probs=np.asarray(h["probs"], dtype=np.float64),
            floor=float(h["floor"]),
        )

    return FusionPriors(
        spacing=hist(d["spacing"]),
        road_histogram=hist(d["road"]) if "road" in d else SpacingHistogram.uniform(),
        road_raster=road_raster,
        w_spacing=float(d.get("w_spacing", 0.0)),
        w_road=float(d.get("w_road", 0.0)),
        detection_threshold=float(d.get("detection_threshold", 0.5)),
    )


def views_from_json(path):
    """Fusion view geometries plus score rasters.

    {"views": [{"id", "type": "pano"|"ortho", ... , "score_raster": path}]};
    pano entries carry easting/northing/cam_height/heading0_deg/width/height,
    ortho entries a 6-number affine transform (E,N per pixel row-major).
    Raster paths resolve relative to the JSON file.
    """
    from .geofuse import OrthoView, PanoView

    spec = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    views = {}
    score_maps = {}
    for v in spec["views"]:
        vid = v["id"]
        if v["type"] == "pano":
            views[vid] = PanoView(
                view_id=vid,
                easting=float(v["easting"]),
                northing=float(v["northing"]),
                cam_height=float(v["cam_height"]),
                heading_col0=math.radians(float(v.get("heading0_deg", 0.0))),
                width=int(v["width"]),
                height=int(v["height"]),
            )
        elif v["type"] == "ortho":
            views[vid] = OrthoView(
                view_id=vid,
                transform=np.asarray(v["transform"], dtype=np.float64).reshape(2, 3),
                width=int(v["width"]),
                height=int(v["height"]),
            )
        else:
            raise ValueError(f"unknown view type {v['type']!r}")
        raster_path = v["score_raster"]
        if not os.path.isabs(raster_path):
            raster_path = os.path.join(base, raster_path)
        if raster_path.endswith(".pgm"):
            score_maps[vid] = read_pgm(raster_path)
        else:
            score_maps[vid], _ = read_f32_raster(raster_path)
    return views, score_maps
