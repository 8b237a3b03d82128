"""Object masks from dense ground-truth optical flow.

Scenes whose objects and background each move under one affine motion can
be segmented by fitting an affine model to every 3x3 patch of the flow,
discarding patches that no single affine explains, and grouping the rest
by motion. The largest group is the background.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParseError

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
RESIDUAL_THRESHOLD = 0.1
MERGE_THRESHOLD = 0.5
MIN_AREA_FRACTION = 0.001
GRID_POINTS = 16


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) horizontal displacement
    v: np.ndarray  # (H, W) vertical displacement

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ContractError("u and v must be (H, W) arrays of equal shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ContractError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


def read_flo(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ParseError(f"truncated .flo header ({len(data)} bytes)", len(data))
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise ParseError(f"bad .flo magic {magic!r}", 0)
    width, height = struct.unpack("<ii", data[4:12])
    if width <= 0 or height <= 0:
        raise ParseError(f"invalid .flo dimensions {width}x{height}", 4)
    expected = 12 + 8 * width * height
    if len(data) < expected:
        raise ParseError(f"truncated .flo payload: expected {expected} bytes, got {len(data)}", len(data))
    flow = np.frombuffer(data, dtype="<f4", count=2 * width * height, offset=12).reshape(height, width, 2)
    return FlowField(u=flow[..., 0].copy(), v=flow[..., 1].copy())


def write_flo(path: str | Path, flow: FlowField) -> None:
    h, w = flow.shape
    payload = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(payload.tobytes())


@dataclass(frozen=True)
class AffineModel:
    """2x3 matrix mapping pixel coordinates (x, y, 1) to displacement (u, v)."""

    matrix: np.ndarray

    def predict(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        a = self.matrix
        return np.stack([a[0, 0] * xs + a[0, 1] * ys + a[0, 2], a[1, 0] * xs + a[1, 1] * ys + a[1, 2]], axis=-1)


def _fit(xs: np.ndarray, ys: np.ndarray, disp: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares affine over point sets; returns (2x3 matrix, RMS residual) or (nan, inf)."""
    design = np.stack([xs, ys, np.ones_like(xs)], axis=1).astype(np.float64)
    if np.linalg.matrix_rank(design) < 3:
        return np.full((2, 3), np.nan), np.inf
    coef, *_ = np.linalg.lstsq(design, disp.astype(np.float64), rcond=None)
    matrix = coef.T
    resid = design @ coef - disp
    return matrix, float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))


def fit_patch_affine(flow: FlowField, center: tuple[int, int], patch: int = 3) -> tuple[AffineModel, float]:
    """Fit an affine motion to the ``patch x patch`` window around ``center`` = (y, x).

    The residual is the RMS displacement error over the window; a
    rank-deficient window gives residual ``inf``.
    """
    h, w = flow.shape
    r = patch // 2
    cy, cx = center
    if not (r <= cy < h - r and r <= cx < w - r):
        raise ContractError(f"patch at {center} does not fit inside {h}x{w} flow")
    ys, xs = np.mgrid[cy - r:cy + r + 1, cx - r:cx + r + 1]
    disp = flow.stacked()[cy - r:cy + r + 1, cx - r:cx + r + 1].reshape(-1, 2)
    matrix, residual = _fit(xs.ravel().astype(float), ys.ravel().astype(float), disp)
    return AffineModel(matrix), residual


@dataclass
class PatchFits:
    """Affine fits for every interior patch centre (vectorized form of :func:`fit_patch_affine`)."""

    centers: np.ndarray  # (P, 2) as (y, x)
    matrices: np.ndarray  # (P, 2, 3)
    residuals: np.ndarray  # (P,)
    patch: int = 3


def fit_all_patches(flow: FlowField, patch: int = 3) -> PatchFits:
    h, w = flow.shape
    r = patch // 2
    if h < patch or w < patch:
        raise ContractError(f"flow {h}x{w} smaller than patch {patch}")
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    local = np.stack([dx.ravel(), dy.ravel(), np.ones(patch * patch)], axis=1).astype(np.float64)
    pinv = np.linalg.pinv(local)  # (3, patch^2)
    stacked = flow.stacked().astype(np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(stacked, (patch, patch), axis=(0, 1))
    # windows: (H-2r, W-2r, 2, patch, patch)
    win = windows.reshape(windows.shape[0], windows.shape[1], 2, patch * patch)
    coef = np.einsum("kp,ijcp->ijck", pinv, win)  # local coefficients (a, b, c) per component
    pred = np.einsum("pk,ijck->ijcp", local, coef)
    residuals = np.sqrt(np.mean(np.sum((pred - win) ** 2, axis=2), axis=-1))
    cy, cx = np.mgrid[r:h - r, r:w - r]
    # shift the intercept from patch-local to absolute coordinates
    a, b, c = coef[..., 0], coef[..., 1], coef[..., 2]
    c_abs = c - a * cx[..., None] - b * cy[..., None]
    matrices = np.stack([a, b, c_abs], axis=-1)  # (.., 2, 3)
    centers = np.stack([cy.ravel(), cx.ravel()], axis=1)
    return PatchFits(centers=centers, matrices=matrices.reshape(-1, 2, 3), residuals=residuals.ravel(), patch=patch)


def _grid_embedding(matrices: np.ndarray, height: int, width: int, points: int = GRID_POINTS) -> np.ndarray:
    """Embed affines so Euclidean distance equals RMS flow disagreement on a points x points grid."""
    ys = np.linspace(0, height - 1, points)
    xs = np.linspace(0, width - 1, points)
    gx, gy = np.meshgrid(xs, ys)
    p = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], axis=1)
    second_moment = p.T @ p / len(p)
    chol = np.linalg.cholesky(second_moment)
    return np.einsum("nrk,kj->nrj", matrices, chol).reshape(len(matrices), -1)


def _local_disagreement(m1: np.ndarray, m2: np.ndarray, y: float, x: float, r: int) -> np.ndarray:
    dy, dx = np.mgrid[-r - 1:r + 2, -r - 1:r + 2]
    pts = np.stack([x + dx.ravel(), y + dy.ravel(), np.ones(dx.size)], axis=0)
    diff = (m1 - m2) @ pts
    return np.sqrt(np.mean(np.sum(diff ** 2, axis=-2), axis=-1))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        a, b = self.find(i), self.find(j)
        if a != b:
            self.parent[max(a, b)] = min(a, b)


def cluster_affines(
    flow: FlowField,
    fits: PatchFits,
    residual_threshold: float = RESIDUAL_THRESHOLD,
    merge_threshold: float = MERGE_THRESHOLD,
) -> np.ndarray:
    """Group consistent patch models into motion clusters; returns (H, W) labels, 0 = unassigned.

    Patches with residual above ``residual_threshold`` are dropped. Adjacent
    patches whose models agree (RMS disagreement < ``merge_threshold`` over
    their neighbourhood) form regions; each region's affine is refit on all
    its pixels, and regions are merged closest pair first while the RMS
    disagreement of their affines over a 16x16 image grid stays below
    ``merge_threshold``. Leftover pixels take the label of a neighbouring
    cluster whose affine explains their flow within ``merge_threshold``.
    """
    h, w = flow.shape
    r = fits.patch // 2
    labels = np.zeros((h, w), dtype=np.int64)
    keep = np.isfinite(fits.residuals) & (fits.residuals <= residual_threshold)
    if not keep.any():
        logger.warning("all %d patches failed the consistency check", len(keep))
        return labels

    # 1. regions of mutually agreeing, 4-adjacent consistent patches
    index = -np.ones((h, w), dtype=np.int64)
    kept_idx = np.nonzero(keep)[0]
    index[fits.centers[kept_idx, 0], fits.centers[kept_idx, 1]] = np.arange(len(kept_idx))
    uf = _UnionFind(len(kept_idx))
    mats = fits.matrices[kept_idx]
    cy, cx = fits.centers[kept_idx, 0], fits.centers[kept_idx, 1]
    for oy, ox in ((0, 1), (1, 0)):
        ny, nx = cy + oy, cx + ox
        inside = (ny < h) & (nx < w)
        nbr = np.full(len(kept_idx), -1)
        nbr[inside] = index[ny[inside], nx[inside]]
        pairs = np.nonzero(nbr >= 0)[0]
        if len(pairs) == 0:
            continue
        d = np.array([
            _local_disagreement(mats[i], mats[nbr[i]], cy[i] + oy / 2, cx[i] + ox / 2, r) for i in pairs
        ])
        for i in pairs[d < merge_threshold]:
            uf.union(int(i), int(nbr[i]))
    roots = np.array([uf.find(i) for i in range(len(kept_idx))])
    region_ids, region_of = np.unique(roots, return_inverse=True)

    # 2. refit one affine per region on every pixel its patches cover
    stacked = flow.stacked()
    region_pixels, region_mats = [], []
    for k in range(len(region_ids)):
        cover = np.zeros((h, w), dtype=bool)
        members = np.nonzero(region_of == k)[0]
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                cover[cy[members] + dy, cx[members] + dx] = True
        ys, xs = np.nonzero(cover)
        matrix, _ = _fit(xs.astype(float), ys.astype(float), stacked[ys, xs])
        if not np.isfinite(matrix).all():
            matrix = mats[members].mean(axis=0)
        region_pixels.append(len(members))
        region_mats.append(matrix)
    region_mats = np.array(region_mats)

    # 3. closest-pair-first agglomeration on image-domain disagreement
    emb = _grid_embedding(region_mats, h, w)
    weights = np.array(region_pixels, dtype=np.float64)
    clusters = {i: [i] for i in range(len(region_mats))}
    cent = {i: emb[i] for i in clusters}
    mass = {i: weights[i] for i in clusters}
    while len(clusters) > 1:
        keys = sorted(clusters)
        c = np.stack([cent[k] for k in keys])
        dist = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        flat = int(np.argmin(dist))
        i, j = divmod(flat, len(keys))
        if dist[i, j] >= merge_threshold:
            break
        a, b = keys[min(i, j)], keys[max(i, j)]
        cent[a] = (cent[a] * mass[a] + cent[b] * mass[b]) / (mass[a] + mass[b])
        mass[a] += mass[b]
        clusters[a] += clusters.pop(b)
        del cent[b], mass[b]

    cluster_of_region = np.zeros(len(region_mats), dtype=np.int64)
    cluster_mats = []
    for label, key in enumerate(sorted(clusters), start=1):
        cluster_of_region[clusters[key]] = label
        members = clusters[key]
        cluster_mats.append(np.average(region_mats[members], axis=0, weights=weights[members]))
    patch_label = cluster_of_region[region_of]

    # 4. pixel labels: majority over covering consistent patches, then fill the gaps
    n_clusters = len(cluster_mats)
    votes = np.zeros((n_clusters + 1, h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            np.add.at(votes, (patch_label, cy + dy, cx + dx), 1.0)
    covered = votes[1:].sum(0) > 0
    labels[covered] = np.argmax(votes[1:], axis=0)[covered] + 1

    ys, xs = np.mgrid[0:h, 0:w]
    errors = np.stack([
        np.linalg.norm(AffineModel(m).predict(xs, ys) - stacked, axis=-1) for m in cluster_mats
    ])
    near = np.zeros((n_clusters, h, w), dtype=bool)
    for k in range(n_clusters):
        near[k] = ndimage.binary_dilation(labels == k + 1, iterations=2)
    errors = np.where(near, errors, np.inf)
    best = np.argmin(errors, axis=0)
    fill = (labels == 0) & (np.min(errors, axis=0) < merge_threshold)
    labels[fill] = best[fill] + 1
    return labels


def postprocess(labels: np.ndarray, min_area: int) -> list[np.ndarray]:
    """Drop components smaller than ``min_area``, then the largest cluster (background).

    Returns one binary mask per remaining cluster, ordered by label.
    """
    cleaned = np.zeros_like(labels)
    for lab in np.unique(labels):
        if lab == 0:
            continue
        comps, n = ndimage.label(labels == lab)
        if n == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comps), comps, index=np.arange(1, n + 1))
        for ci, size in enumerate(sizes, start=1):
            if size >= min_area:
                cleaned[comps == ci] = lab
    present = [lab for lab in np.unique(cleaned) if lab != 0]
    if not present:
        return []
    areas = {lab: int(np.count_nonzero(cleaned == lab)) for lab in present}
    background = max(present, key=lambda lab: (areas[lab], -lab))
    return [(cleaned == lab).astype(np.float64) for lab in present if lab != background]


def flow_to_masks(
    flow: FlowField,
    residual_threshold: float = RESIDUAL_THRESHOLD,
    merge_threshold: float = MERGE_THRESHOLD,
    min_area: int | None = None,
) -> list[np.ndarray]:
    h, w = flow.shape
    if min_area is None:
        min_area = max(1, int(round(MIN_AREA_FRACTION * h * w)))
    labels = cluster_affines(flow, fit_all_patches(flow), residual_threshold, merge_threshold)
    return postprocess(labels, min_area)


def export_masks(flo_path: str | Path, out_dir: str | Path, **kwargs) -> Path:
    """Write ``object_K.png`` per recovered object plus ``manifest.json``."""
    from .imaging import save_mask

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flow = read_flo(flo_path)
    masks = flow_to_masks(flow, **kwargs)
    entries = []
    for k, m in enumerate(masks):
        name = f"object_{k}.png"
        save_mask(out_dir / name, m)
        entries.append({"mask": name, "area": int(m.sum())})
    manifest = {"flo": str(flo_path), "height": flow.shape[0], "width": flow.shape[1], "objects": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def synthetic_scene(
    height: int, width: int, objects: list[tuple[tuple[int, int, int, int], np.ndarray]],
    background: np.ndarray, noise_sigma: float = 0.0, rng_seed=None,
) -> tuple[FlowField, list[np.ndarray]]:
    """Flow for a background affine plus rectangles ``(y0, x0, y1, x1)`` each moving under its own affine.

    Later rectangles occlude earlier ones; returns the flow and the visible
    region of every rectangle.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    flow = AffineModel(np.asarray(background, dtype=np.float64)).predict(xs, ys)
    owner = np.full((height, width), -1)
    for k, ((y0, x0, y1, x1), matrix) in enumerate(objects):
        region = (slice(y0, y1), slice(x0, x1))
        flow[region] = AffineModel(np.asarray(matrix, dtype=np.float64)).predict(xs[region], ys[region])
        owner[region] = k
    if noise_sigma > 0:
        flow = flow + np.random.default_rng(rng_seed).normal(0.0, noise_sigma, flow.shape)
    masks = [(owner == k).astype(np.float64) for k in range(len(objects))]
    return FlowField(u=flow[..., 0], v=flow[..., 1]), masks
