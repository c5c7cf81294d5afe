"""Scene -> model inputs: seed points, image patches, and the point-to-patch index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    DEFAULT_OCCLUSION_TOL,
    CameraView,
    GeometryConfigError,
    StitchedLayout,
    project_to_stitched,
    stitch_views,
    stitched_image,
)

SENTINEL = -1


class TokenizerInputError(ValueError):
    pass


def farthest_point_sampling(points: np.ndarray, n: int, start_index: int | None = None) -> np.ndarray:
    """Greedy farthest-point subset of size ``n``; returns indices in pick order.

    The default start is the point farthest from the centroid, which makes the
    selected set independent of input ordering (up to exact distance ties).
    """
    pts = np.asarray(points, dtype=np.float64)
    if n > len(pts):
        raise TokenizerInputError(f"requested {n} samples from {len(pts)} points")
    if n <= 0:
        return np.zeros(0, dtype=int)
    if start_index is None:
        start_index = int(np.argmax(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))
    picked = np.empty(n, dtype=int)
    picked[0] = start_index
    dist = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        picked[i] = nxt
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return picked


DEFAULT_DENSITY_RADII = (0.25, 0.5, 1.0)


@dataclass
class SeedPoints:
    coords: np.ndarray  # (N_pnt, 3) world meters, a subset of the scene points
    indices: np.ndarray  # (N_pnt,) into the scene point array
    inputs: np.ndarray  # (N_pnt, 3 + 4R): coords minus scene center, then per radius [log-count, mean shift]


def local_density(points: np.ndarray, queries: np.ndarray, radius: float) -> np.ndarray:
    """log(1 + #points within ``radius``), scaled to O(1)."""
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    return np.log1p((d2 <= radius * radius).sum(axis=1)) / 5.0


def local_descriptor(points: np.ndarray, queries: np.ndarray, radii=DEFAULT_DENSITY_RADII) -> np.ndarray:
    """Kernel density estimate and its mean-shift direction at several radii.

    Per radius: ``log(1 + count) / 5`` and ``(mean(neighbours) - q) / r``; the
    second part is proportional to the gradient of the flat-kernel density
    estimate, so it points towards where the surface mass is.
    """
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    cols = []
    for r in radii:
        inside = d2 <= r * r
        count = inside.sum(axis=1)
        mean = (inside[:, :, None] * points[None]).sum(axis=1) / np.maximum(count, 1)[:, None]
        shift = np.where(count[:, None] > 0, (mean - queries) / r, 0.0)
        cols += [np.log1p(count)[:, None] / 5.0, shift]
    return np.concatenate(cols, axis=1)


def sample_seeds(points: np.ndarray, n_pnt: int, density_radii=DEFAULT_DENSITY_RADII, start_index: int | None = None) -> SeedPoints:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < n_pnt:
        raise TokenizerInputError(f"scene has {len(pts)} points, need at least {n_pnt}")
    if np.isscalar(density_radii):
        density_radii = (float(density_radii),)
    idx = farthest_point_sampling(pts, n_pnt, start_index)
    coords = pts[idx]
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    inputs = np.column_stack([coords - center, local_descriptor(pts, coords, density_radii)])
    return SeedPoints(coords, idx, inputs)


def select_proposals(seeds: SeedPoints, k: int, pool_fraction: float = 0.5) -> np.ndarray:
    """K proposal seeds: FPS restricted to the densest ``pool_fraction`` of seeds.

    Density is the smallest-radius count stored in ``seeds.inputs``; ties are
    broken by coordinates so the pool does not depend on input order.
    """
    n = len(seeds.coords)
    pool_size = min(n, max(k, int(np.ceil(pool_fraction * n))))
    c = seeds.coords
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0], -seeds.inputs[:, 3]))
    pool = order[:pool_size]
    return pool[farthest_point_sampling(c[pool], k)]


@dataclass
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    patches: np.ndarray  # (N_pat, S*S*3) flattened pixels, row-major over the grid

    @property
    def n_pat(self) -> int:
        return self.rows * self.cols

    def cell_of(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.cols)


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split an (H, W, 3) image into a floor(H/S) x floor(W/S) grid; trailing pixels are dropped."""
    H, W, _ = image.shape
    S = int(patch_size)
    rows, cols = H // S, W // S
    if rows == 0 or cols == 0:
        raise GeometryConfigError(f"image {H}x{W} is smaller than one {S}x{S} patch")
    crop = image[: rows * S, : cols * S]
    patches = crop.reshape(rows, S, cols, S, 3).transpose(0, 2, 1, 3, 4).reshape(rows * cols, S * S * 3)
    return PatchGrid(S, rows, cols, np.ascontiguousarray(patches))


def patch_index(u, v, total_width: int, patch_size: int):
    """Zero-based ``floor(floor(v)/S) * floor(W/S) + floor(floor(u)/S)``."""
    S = int(patch_size)
    fu = np.floor(np.asarray(u, dtype=np.float64)).astype(int)
    fv = np.floor(np.asarray(v, dtype=np.float64)).astype(int)
    return (fv // S) * (int(total_width) // S) + fu // S


@dataclass
class PointPatchMap:
    patch_index: np.ndarray  # (N_pnt,) int in [0, N_pat) or SENTINEL
    uv: np.ndarray  # (N_pnt, 2) stitched pixel coordinates, NaN when unprojectable

    @property
    def valid(self) -> np.ndarray:
        return self.patch_index != SENTINEL


def build_point_patch_map(
    coords: np.ndarray,
    views: list[CameraView],
    patch_size: int,
    use_occlusion: bool = True,
    tolerance: float = DEFAULT_OCCLUSION_TOL,
) -> PointPatchMap:
    layout = stitch_views(views)
    proj = project_to_stitched(views, coords, use_occlusion=use_occlusion, tolerance=tolerance)
    S = int(patch_size)
    rows, cols = layout.height_px // S, layout.total_width // S
    index = np.full(len(coords), SENTINEL, dtype=int)
    ok = proj.valid.copy()
    uv = proj.uv
    with np.errstate(invalid="ignore"):
        ok &= (np.floor(uv[:, 0]) < cols * S) & (np.floor(uv[:, 1]) < rows * S)
    index[ok] = patch_index(uv[ok, 0], uv[ok, 1], layout.total_width, S)
    return PointPatchMap(index, uv)


@dataclass
class TokenizedScene:
    """Everything the model needs from one scene, as plain arrays."""

    scene_id: str
    seeds: SeedPoints
    proposal_index: np.ndarray  # (K,) into seeds
    grid: PatchGrid
    point_patch: PointPatchMap
    layout: StitchedLayout
    views: list[CameraView]


def tokenize_scene(
    scene,
    n_pnt: int,
    k: int,
    patch_size: int,
    density_radii=DEFAULT_DENSITY_RADII,
    use_occlusion: bool = True,
    tolerance: float = DEFAULT_OCCLUSION_TOL,
) -> TokenizedScene:
    seeds = sample_seeds(scene.points, n_pnt, density_radii)
    if k > n_pnt:
        raise TokenizerInputError("K must not exceed N_pnt")
    proposals = select_proposals(seeds, k)
    layout = stitch_views(scene.views)
    grid = patchify(stitched_image(scene.views), patch_size)
    ppm = build_point_patch_map(seeds.coords, scene.views, patch_size, use_occlusion, tolerance)
    return TokenizedScene(scene.scene_id, seeds, proposals, grid, ppm, layout, scene.views)
