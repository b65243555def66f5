"""In-house feature stack shared by the orientation and registration pipelines.

HOG patch descriptors (9 unsigned bins, 8x8 px cells, 2x2 block L2-hys),
Harris-style corner detection, and exact descriptor matching. One
implementation serves both the panorama-strip correlation and the
top-down/aerial registration.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import NoKeypoints

HOG_BINS = 9
HOG_CELL = 8
HOG_BLOCK = 2
_HYS_CLIP = 0.2


def hog_descriptor(patch: np.ndarray, cell: int = HOG_CELL, bins: int = HOG_BINS) -> np.ndarray:
    """HOG of a grey patch; all-zero vector when the patch has no gradients.

    The patch is cropped to whole cells; blocks are 2x2 cells at 1-cell
    stride with L2-hys normalization.
    """
    patch = np.asarray(patch, dtype=np.float64)
    nr = (patch.shape[0] // cell) * cell
    nc = (patch.shape[1] // cell) * cell
    if nr < cell * HOG_BLOCK or nc < cell * HOG_BLOCK:
        raise ValueError(f"patch {patch.shape} smaller than one {HOG_BLOCK}x{HOG_BLOCK}-cell block")
    patch = patch[:nr, :nc]

    gy, gx = np.gradient(patch)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)

    # soft orientation vote between the two nearest bin centers
    pos = ang / (np.pi / bins) - 0.5
    b0 = np.floor(pos).astype(int)
    w1 = pos - b0
    b0 = np.mod(b0, bins)
    b1 = np.mod(b0 + 1, bins)

    cr, cc = nr // cell, nc // cell
    hist = np.zeros((cr, cc, bins))
    flat_cell = (
        np.repeat(np.arange(cr), cell)[:, None] * cc + np.repeat(np.arange(cc), cell)[None, :]
    )
    for b in range(bins):
        votes = mag * ((b0 == b) * (1.0 - w1) + (b1 == b) * w1)
        hist[:, :, b] = np.bincount(flat_cell.ravel(), votes.ravel(), minlength=cr * cc).reshape(
            cr, cc
        )

    blocks = []
    for r in range(cr - HOG_BLOCK + 1):
        for c in range(cc - HOG_BLOCK + 1):
            v = hist[r : r + HOG_BLOCK, c : c + HOG_BLOCK].ravel()
            n = np.linalg.norm(v)
            if n > 1e-12:
                v = np.minimum(v / n, _HYS_CLIP)
                n2 = np.linalg.norm(v)
                if n2 > 1e-12:
                    v = v / n2
            blocks.append(v)
    return np.concatenate(blocks)


def descriptor_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized correlation of two descriptors; 0 when either is flat."""
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


def harris_keypoints(
    image: np.ndarray,
    response_threshold: float = 0.01,
    k: float = 0.06,
    nms_radius: int = 3,
    max_keypoints: int | None = None,
) -> np.ndarray:
    """Harris corner maxima as (n, 2) float (u, v) pixel coordinates.

    response_threshold is relative to the strongest response, which makes the
    keypoint set invariant to affine intensity changes. Strongest first.
    """
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    sxx = ndimage.uniform_filter(gx * gx, size=3)
    syy = ndimage.uniform_filter(gy * gy, size=3)
    sxy = ndimage.uniform_filter(gx * gy, size=3)
    response = (sxx * syy - sxy**2) - k * (sxx + syy) ** 2

    peak = float(response.max(initial=0.0))
    if peak <= 0.0:
        raise NoKeypoints("no positive corner response in image")
    local_max = response == ndimage.maximum_filter(response, size=2 * nms_radius + 1)
    mask = local_max & (response > response_threshold * peak)
    # suppress the image border where gradients are one-sided
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise NoKeypoints("no corner response above threshold")
    order = np.argsort(response[rows, cols])[::-1]
    if max_keypoints is not None:
        order = order[:max_keypoints]
    return np.column_stack([cols[order], rows[order]]).astype(np.float64)


def _extract_patch(image: np.ndarray, u: float, v: float, size: int) -> np.ndarray:
    half = size // 2
    r0 = int(round(v)) - half
    c0 = int(round(u)) - half
    padded = np.pad(
        image,
        ((max(0, -r0), max(0, r0 + size - image.shape[0])),
         (max(0, -c0), max(0, c0 + size - image.shape[1]))),
        mode="edge",
    )
    rr = r0 + max(0, -r0)
    cc = c0 + max(0, -c0)
    return padded[rr : rr + size, cc : cc + size]


def multiscale_hog(image: np.ndarray, keypoints: np.ndarray, scales) -> np.ndarray:
    """Concatenated per-scale HOGs around each (u, v) keypoint, L2-normalized."""
    descs = []
    for u, v in keypoints:
        parts = [hog_descriptor(_extract_patch(image, u, v, int(s))) for s in scales]
        d = np.concatenate(parts)
        n = np.linalg.norm(d)
        descs.append(d / n if n > 1e-12 else d)
    return np.asarray(descs)


def match_knn(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.8) -> np.ndarray:
    """Exact 2-nearest-neighbor matching with the Lowe ratio test.

    Returns (m, 3) rows (index_a, index_b, distance); may be empty. A match
    survives only if d1 < ratio * d2 strictly, so exact ties are rejected.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    d = cdist(a, b)
    out = []
    for i in range(a.shape[0]):
        row = d[i]
        if row.size == 1:
            if row[0] == 0.0:
                out.append((i, 0, 0.0))
            continue
        j1, j2 = np.argpartition(row, 1)[:2]
        if row[j1] > row[j2]:
            j1, j2 = j2, j1
        if row[j1] < ratio * row[j2]:
            out.append((i, int(j1), float(row[j1])))
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)
