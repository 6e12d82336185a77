"""Point clouds fused from calibrated RGB-D views.

Pipeline order is fixed: :func:`fuse_views` -> :func:`augment` -> :func:`fps`.
Features are computed at full density, then the cloud is downsampled.

Channel layout of ``PointCloud.features``::

    0:3   x, y, z (world frame, m)
    3:6   r, g, b in [0, 1]
    6:9   unit normal                      (after augment)
    9:11  log curvature eigenvalues        (after augment)
    11    critical-object label in [0, 1]  (after segmentation)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNeighborhood, EmptyCloud, KTooLarge, MissingProvenance, ResolutionMismatch
from .geometry import CameraModel

RAW_CHANNELS = 6
AUG_CHANNELS = 11
LABEL_CHANNEL = 11
CURVATURE_EPS = 1e-5
DEGENERATE_EIGEN = 1e-12


@dataclass(frozen=True, slots=True, eq=False)
class PointCloud:
    features: np.ndarray
    # (M, 3) integer rows: view index, pixel u, pixel v.
    provenance: np.ndarray | None = None
    # (V, 3) camera centers, indexed by provenance view.
    viewpoints: np.ndarray | None = None

    def __post_init__(self) -> None:
        f = self.features
        if f.ndim != 2 or f.shape[1] < 3:
            raise ValueError(f"point features must have shape (M, C>=3), got {f.shape}")
        if self.provenance is not None and self.provenance.shape != (f.shape[0], 3):
            raise ValueError("provenance needs one (view, u, v) row per point")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def positions(self) -> np.ndarray:
        return self.features[:, 0:3]

    @property
    def colors(self) -> np.ndarray:
        return self.features[:, 3:6]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        prov = None if self.provenance is None else self.provenance[idx]
        return replace(self, features=self.features[idx], provenance=prov)

    def with_channels(self, extra: np.ndarray) -> "PointCloud":
        cols = np.asarray(extra, dtype=np.float64).reshape(len(self), -1)
        return replace(self, features=np.concatenate([self.features, cols], axis=1))


View = tuple[CameraModel, np.ndarray, np.ndarray | None]


def fuse_views(views: Sequence[View], far_clip: float = 100.0) -> PointCloud:
    """Back-project every valid depth pixel of every view into one world-frame cloud.

    Pixels with depth <= 0, depth >= ``far_clip`` or non-finite depth are
    skipped. Points are ordered by view, then row, then column.
    """

    if not views:
        raise EmptyCloud("no views to fuse")

    feats: list[np.ndarray] = []
    provs: list[np.ndarray] = []
    centers: list[np.ndarray] = []
    for view_index, (cam, depth, rgb) in enumerate(views):
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (cam.height, cam.width):
            raise ResolutionMismatch(
                f"view {view_index}: depth {depth.shape} does not match camera {(cam.height, cam.width)}"
            )
        centers.append(cam.center)

        valid = np.isfinite(depth) & (depth > 0) & (depth < far_clip)
        v, u = np.nonzero(valid)
        d = depth[v, u]
        p_cam = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=1)
        world = (p_cam - cam.t) @ cam.R

        if rgb is None:
            color = np.zeros((d.shape[0], 3))
        else:
            color = np.clip(np.asarray(rgb, dtype=np.float64)[v, u], 0.0, 1.0)

        feats.append(np.concatenate([world, color], axis=1))
        provs.append(np.stack([np.full_like(u, view_index), u, v], axis=1))

    features = np.concatenate(feats, axis=0)
    if features.shape[0] == 0:
        raise EmptyCloud("no pixel has a valid depth")
    return PointCloud(
        features=features,
        provenance=np.concatenate(provs, axis=0).astype(np.int64),
        viewpoints=np.stack(centers),
    )


# ---------------------------------------------------------------------------
# Neighborhoods


def knn_brute_force(points: np.ndarray, k: int, *, chunk: int = 256) -> np.ndarray:
    """O(M^2) reference for :func:`knn`; ties go to the lower index."""

    p = np.asarray(points, dtype=np.float64)
    m = p.shape[0]
    if not 1 <= k < m:
        raise KTooLarge(f"k={k} needs 1 <= k < M={m}")
    out = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk):
        rows = np.arange(start, min(start + chunk, m))
        diff = p[rows, None, :] - p[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        d2[np.arange(rows.size), rows] = np.inf
        out[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn(cloud: PointCloud | np.ndarray, k: int) -> np.ndarray:
    """The ``k`` nearest other points of every point, shape (M, k).

    Neighbors are ordered by distance, ties by lower index. A KD-tree
    proposes candidates; their squared distances are recomputed exactly as
    in :func:`knn_brute_force`, and rows whose k-th distance reaches the
    edge of the candidate ball are re-queried by radius.
    """

    pts = np.ascontiguousarray(cloud.positions if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
    m = pts.shape[0]
    if m == 0:
        raise EmptyCloud("knn on an empty cloud")
    if not 1 <= k < m:
        raise KTooLarge(f"k={k} needs 1 <= k < M={m}")

    tree = cKDTree(pts)
    kq = min(m, k + 2)
    tree_dist, cand = tree.query(pts, k=kq)
    cand = cand.astype(np.int64)

    diff = pts[cand] - pts[:, None, :]
    d2 = np.sum(diff * diff, axis=2)
    d2[cand == np.arange(m)[:, None]] = np.inf

    order = np.lexsort((cand, d2), axis=-1)
    d2_sorted = np.take_along_axis(d2, order, axis=1)
    out = np.take_along_axis(cand, order, axis=1)[:, :k]

    if kq == m:
        return out

    # Points outside the candidate set are at least as far as the last
    # candidate; when the k-th distance reaches that edge, ties may be missing.
    edge = tree_dist[:, -1] ** 2 * (1.0 - 1e-9)
    unsafe = np.flatnonzero(~(d2_sorted[:, k - 1] < edge))
    for i in unsafe:
        radius = float(np.sqrt(d2_sorted[i, k - 1])) * (1.0 + 1e-6) + 1e-12
        ball = np.asarray(tree.query_ball_point(pts[i], radius), dtype=np.int64)
        ball = ball[ball != i]
        bd = pts[ball] - pts[i]
        bd2 = np.sum(bd * bd, axis=1)
        out[i] = ball[np.lexsort((ball, bd2))[:k]]
    return out


# ---------------------------------------------------------------------------
# Local geometry


def _neighborhoods(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """(M, k+1, 3): each point followed by its neighbors."""

    idx = np.concatenate([np.arange(points.shape[0])[:, None], neighbors], axis=1)
    return points[idx]


def estimate_normals(cloud: PointCloud, neighbors: np.ndarray) -> np.ndarray:
    """Unit PCA normals, oriented toward the camera each point came from."""

    if neighbors.ndim != 2 or neighbors.shape[1] + 1 < 3:
        raise DegenerateNeighborhood("normals need at least 3 points per neighborhood")
    if cloud.provenance is None or cloud.viewpoints is None:
        raise MissingProvenance("normal orientation needs per-point provenance")

    pts = cloud.positions
    hood = _neighborhoods(pts, neighbors)
    centered = hood - hood.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    eigvals, eigvecs = np.linalg.eigh(covs)

    degenerate = np.flatnonzero(eigvals[:, 1] < DEGENERATE_EIGEN)
    if degenerate.size:
        raise DegenerateNeighborhood(
            f"{degenerate.size} neighborhoods are collinear (first at point {int(degenerate[0])})"
        )

    normals = eigvecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_camera = cloud.viewpoints[cloud.provenance[:, 0]] - pts
    flip = np.einsum("ij,ij->i", normals, to_camera) < 0
    normals[flip] *= -1.0
    return normals


def curvature_features(cloud: PointCloud, normals: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Per-point ``(log(l1 + eps), log(l2 + eps))`` of the normal-variation matrix.

    The matrix is the sum of outer products of ``n_i x n_j`` over the
    neighbors ``j``; ``l1 >= l2`` are its two largest eigenvalues.
    """

    n = np.asarray(normals, dtype=np.float64)
    crosses = np.cross(n[:, None, :], n[neighbors])
    sigma = np.einsum("nki,nkj->nij", crosses, crosses)
    eig = np.clip(np.linalg.eigvalsh(sigma), 0.0, None)
    return np.log(eig[:, ::-1][:, :2] + CURVATURE_EPS)


def augment(cloud: PointCloud, k: int = 16) -> PointCloud:
    """11-channel cloud: position, color, normal, curvature. Order is kept."""

    if len(cloud) <= k:
        raise KTooLarge(f"augment needs more than k={k} points, got {len(cloud)}")
    neighbors = knn(cloud, k)
    normals = estimate_normals(cloud, neighbors)
    curv = curvature_features(cloud, normals, neighbors)
    features = np.concatenate([cloud.features[:, :RAW_CHANNELS], normals, curv], axis=1)
    return replace(cloud, features=features)


# ---------------------------------------------------------------------------
# Sampling


def fps_indices(points: np.ndarray, n: int, seed: int = 0, *, start_index: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    The first index is ``start_index`` or drawn from ``seed``; every next one
    maximizes the distance to the selected set (lowest index on ties).
    """

    p = np.asarray(points, dtype=np.float64)
    m = p.shape[0]
    if n < 1:
        raise ValueError("fps needs n >= 1")
    if m == 0:
        raise EmptyCloud("fps on an empty cloud")
    if n >= m:
        return np.arange(m)

    first = int(np.random.default_rng(seed).integers(m)) if start_index is None else int(start_index)
    selected = np.empty(n, dtype=np.int64)
    selected[0] = first
    diff = p - p[first]
    min_d2 = np.sum(diff * diff, axis=1)
    min_d2[first] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        diff = p - p[nxt]
        min_d2 = np.minimum(min_d2, np.sum(diff * diff, axis=1))
        min_d2[nxt] = -1.0
    return selected


def fps(cloud: PointCloud, n: int, seed: int = 0, *, start_index: int | None = None) -> PointCloud:
    return cloud.subset(fps_indices(cloud.positions, n, seed, start_index=start_index))


def pad_cyclic(cloud: PointCloud, n: int) -> PointCloud:
    """Exactly ``n`` points: truncate, or repeat the cloud cyclically."""

    if len(cloud) == 0:
        raise EmptyCloud("cannot pad an empty cloud")
    return cloud.subset(np.arange(n) % len(cloud))
