"""Pinhole projection, multi-view stitching, augmentation and occlusion tests.

Pixel convention: ``u`` is horizontal in ``[0, width)``, ``v`` is vertical in
``[0, height)``. Pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``,
so the pixel holding a continuous coordinate is ``(floor(v), floor(u))``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

DEFAULT_OCCLUSION_TOL = 0.05


class BehindCameraError(ValueError):
    pass


class GeometryConfigError(ValueError):
    pass


class DegenerateBoxError(ValueError):
    pass


@dataclass(eq=False)
class CameraView:
    intrinsics: np.ndarray  # 3x3, K_intr
    extrinsics: np.ndarray  # 3x4, world -> camera
    width_px: int
    height_px: int
    image: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None  # (H, W) camera-frame z, meters
    intrinsic_scale: float = 1.0

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        if self.intrinsics.shape != (3, 3) or self.extrinsics.shape != (3, 4):
            raise GeometryConfigError("intrinsics must be 3x3 and extrinsics 3x4")
        if self.intrinsics[2, 2] != 1.0:
            raise GeometryConfigError("intrinsics[2][2] must equal 1")
        if not self.intrinsic_scale > 0:
            raise GeometryConfigError("intrinsic_scale must be positive")
        if self.image is None:
            self.image = np.zeros((self.height_px, self.width_px, 3))
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.height_px, self.width_px, 3):
            raise GeometryConfigError(
                f"image shape {self.image.shape} does not match {self.height_px}x{self.width_px}x3"
            )
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != (self.height_px, self.width_px):
                raise GeometryConfigError("depth map shape does not match image")

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``diag(s, s, 1) @ K_intr @ R_t``."""
        scale = np.diag([self.intrinsic_scale, self.intrinsic_scale, 1.0])
        return scale @ self.intrinsics @ self.extrinsics


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise DegenerateBoxError(f"box sizes must be positive, got {self.size}")

    @property
    def min(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def corners(self) -> np.ndarray:
        c, h = np.asarray(self.center), np.asarray(self.size) / 2
        signs = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=np.float64)
        return c + signs * h

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min - tol) & (p <= self.max + tol), axis=1)


@dataclass(frozen=True)
class Box2D:
    min: tuple[float, float]
    max: tuple[float, float]
    class_id: int = 0

    def __post_init__(self):
        if self.min[0] > self.max[0] or self.min[1] > self.max[1]:
            raise DegenerateBoxError(f"Box2D min {self.min} exceeds max {self.max}")

    @property
    def area(self) -> float:
        return (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])


@dataclass(frozen=True)
class AugmentParams:
    theta: float = 0.0
    flip_indicator: int = 1  # +1 = no flip, -1 = mirror x
    scale: float = 1.0

    def __post_init__(self):
        if self.flip_indicator not in (1, -1):
            raise ValueError("flip_indicator must be +1 or -1")
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError("scale must lie in [0.5, 2.0]")

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.flip_indicator == 1 and self.scale == 1.0


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _apply(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    # row-wise products summed explicitly: unlike BLAS matmul the result for a
    # point does not depend on how many other points share the call
    return (x[:, None, :] * M[None, :, :]).sum(axis=2)


def camera_coords(view: CameraView, points: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return _apply(view.extrinsics[:, :3], p) + view.extrinsics[:, 3]


def project_points(view: CameraView, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(uv, depth)``; ``uv`` is NaN where depth <= 0."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    homo = np.concatenate([p, np.ones((len(p), 1))], axis=1)
    img = _apply(view.projection_matrix, homo)
    depth = camera_coords(view, p)[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = img[:, :2] / img[:, 2:3]
    uv[depth <= 0] = np.nan
    return uv, depth


def project_point(view: CameraView, point) -> tuple[float, float]:
    uv, depth = project_points(view, np.asarray(point, dtype=np.float64)[None])
    if not depth[0] > 0:
        raise BehindCameraError(f"point {tuple(point)} has camera-frame depth {depth[0]:.4g}")
    return float(uv[0, 0]), float(uv[0, 1])


def project_box3d(view: CameraView, box: Box3D, clamp: bool = True) -> Box2D:
    """Tight axis-aligned 2D hull of the 8 projected corners."""
    uv, depth = project_points(view, box.corners())
    if np.any(depth <= 0):
        raise BehindCameraError("box has corners behind the camera")
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    if clamp:
        bounds = np.array([view.width_px, view.height_px], dtype=np.float64)
        lo = np.clip(lo, 0.0, bounds)
        hi = np.clip(hi, 0.0, bounds)
    return Box2D((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])), box.class_id)


def in_image(view: CameraView, uv: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    with np.errstate(invalid="ignore"):
        return (u >= 0) & (u < view.width_px) & (v >= 0) & (v < view.height_px)


def occlusion_filter(view: CameraView, points: np.ndarray, tolerance: float = DEFAULT_OCCLUSION_TOL) -> np.ndarray:
    """Visibility mask: inside the image, in front, and not behind the depth surface."""
    if view.depth is None:
        raise GeometryConfigError("occlusion_filter needs a depth map")
    uv, depth = project_points(view, points)
    ok = in_image(view, uv) & (depth > 0)
    visible = np.zeros(len(uv), dtype=bool)
    idx = np.nonzero(ok)[0]
    cols = np.floor(uv[idx, 0]).astype(int)
    rows = np.floor(uv[idx, 1]).astype(int)
    visible[idx] = depth[idx] <= view.depth[rows, cols] + tolerance
    return visible


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augmentation_matrix(p: AugmentParams) -> np.ndarray:
    c, s_, f, k = np.cos(p.theta), np.sin(p.theta), float(p.flip_indicator), float(p.scale)
    return np.array(
        [
            [c * f * k, s_ * f, 0.0],
            [-s_, c * k, 0.0],
            [0.0, 0.0, k],
        ]
    )


def augment_extrinsics(R_t: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Literal extrinsic update ``A^T @ R_t``."""
    return np.asarray(A).T @ np.asarray(R_t)


def augment_extrinsics_exact(R_t: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Extrinsic update that keeps every projection fixed when points map as ``p' = A p``.

    ``[R | t] -> [R A^-1 | t]``.
    """
    R_t = np.asarray(R_t)
    out = R_t.copy()
    out[:, :3] = R_t[:, :3] @ np.linalg.inv(A)
    return out


def transform_points(points: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.asarray(points) @ np.asarray(A).T


def transform_box(box: Box3D, A: np.ndarray) -> Box3D:
    """Axis-aligned hull of the transformed corners.

    Exact for flips and scaling; under rotation the hull contains the rotated box.
    """
    if np.allclose(A, np.diag(np.diag(A)), atol=0.0):
        d = np.diag(A)
        center = d * np.asarray(box.center)
        size = np.abs(d) * np.asarray(box.size)
    else:
        corners = transform_points(box.corners(), A)
        lo, hi = corners.min(axis=0), corners.max(axis=0)
        center, size = (lo + hi) / 2, hi - lo
    return Box3D(tuple(float(x) for x in center), tuple(float(x) for x in size), box.class_id)


# ---------------------------------------------------------------------------
# multi-view stitching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StitchedLayout:
    """Side-by-side placement of equally sized views in one wide image."""

    num_views: int
    width_px: int
    height_px: int

    @property
    def total_width(self) -> int:
        return self.num_views * self.width_px

    def to_global(self, view_index, u):
        view_index = np.asarray(view_index)
        if np.any((view_index < 0) | (view_index >= self.num_views)):
            raise IndexError("view index out of range")
        return view_index * self.width_px + np.asarray(u)

    def to_local(self, u_global):
        u_global = np.asarray(u_global, dtype=np.float64)
        view = np.floor(u_global / self.width_px).astype(int)
        if np.any((view < 0) | (view >= self.num_views)):
            raise IndexError("global u outside stitched image")
        return view, u_global - view * self.width_px


def stitch_views(views: list[CameraView]) -> StitchedLayout:
    if not views:
        raise GeometryConfigError("need at least one view")
    h, w = views[0].height_px, views[0].width_px
    for v in views[1:]:
        if v.height_px != h:
            raise GeometryConfigError("views must share height_px")
        if v.width_px != w:
            raise GeometryConfigError("views must share width_px")
    return StitchedLayout(len(views), w, h)


def stitched_image(views: list[CameraView]) -> np.ndarray:
    stitch_views(views)
    return np.concatenate([v.image for v in views], axis=1)


@dataclass
class StitchedProjection:
    uv: np.ndarray  # (N, 2) global coordinates, NaN where invalid
    view_index: np.ndarray  # (N,) int, -1 where invalid
    depth: np.ndarray  # (N,) camera depth in the chosen view, inf where invalid

    @property
    def valid(self) -> np.ndarray:
        return self.view_index >= 0


def project_to_stitched(
    views: list[CameraView],
    points: np.ndarray,
    use_occlusion: bool = True,
    tolerance: float = DEFAULT_OCCLUSION_TOL,
) -> StitchedProjection:
    """Project into whichever visible view sees the point at the smallest depth.

    Ties go to the lower view index. Depth maps are consulted when present and
    ``use_occlusion`` is set.
    """
    layout = stitch_views(views)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(p)
    best_depth = np.full(n, np.inf)
    best_view = np.full(n, -1, dtype=int)
    best_uv = np.full((n, 2), np.nan)
    for k, view in enumerate(views):
        uv, depth = project_points(view, p)
        if use_occlusion and view.depth is not None:
            vis = occlusion_filter(view, p, tolerance)
        else:
            vis = in_image(view, uv) & (depth > 0)
        better = vis & (depth < best_depth)
        best_depth[better] = depth[better]
        best_view[better] = k
        best_uv[better] = uv[better]
    ok = best_view >= 0
    best_uv[ok, 0] = layout.to_global(best_view[ok], best_uv[ok, 0])
    return StitchedProjection(best_uv, best_view, best_depth)


def box_to_stitched_2d(views: list[CameraView], box: Box3D) -> tuple[Box2D, int] | None:
    """Derive the 2D label of a 3D box in stitched coordinates.

    Candidate views have all corners in front and a non-empty clamped box. The
    view showing the largest fraction of the unclamped box wins; ties go to
    the smaller center depth, then the lower index. ``None`` if no view sees it.
    """
    layout = stitch_views(views)
    best = None
    for k, view in enumerate(views):
        try:
            full = project_box3d(view, box, clamp=False)
        except BehindCameraError:
            continue
        clamped = project_box3d(view, box, clamp=True)
        if clamped.area <= 0 or full.area <= 0:
            continue
        frac = clamped.area / full.area
        depth = camera_coords(view, np.asarray(box.center)[None])[0, 2]
        key = (-frac, depth, k)
        if best is None or key < best[0]:
            best = (key, k, clamped)
    if best is None:
        return None
    _, k, b = best
    off = k * layout.width_px
    return Box2D((b.min[0] + off, b.min[1]), (b.max[0] + off, b.max[1]), box.class_id), k


def look_at_extrinsics(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World->camera ``[R | t]`` for a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return np.concatenate([R, (-R @ eye)[:, None]], axis=1)


__all__ = [
    "AugmentParams",
    "BehindCameraError",
    "Box2D",
    "Box3D",
    "CameraView",
    "DegenerateBoxError",
    "GeometryConfigError",
    "StitchedLayout",
    "StitchedProjection",
    "augment_extrinsics",
    "augment_extrinsics_exact",
    "augmentation_matrix",
    "box_to_stitched_2d",
    "camera_coords",
    "in_image",
    "look_at_extrinsics",
    "occlusion_filter",
    "project_box3d",
    "project_point",
    "project_points",
    "project_to_stitched",
    "stitch_views",
    "stitched_image",
    "transform_box",
    "transform_points",
]
