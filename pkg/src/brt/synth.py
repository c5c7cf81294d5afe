"""Deterministic synthetic indoor scenes and the JSON dataset container.

A scene is a room with a few axis-aligned boxes standing on the floor. Points
are sampled on box surfaces plus floor/wall clutter; cameras sit on the room
boundary looking inward and every image/depth map is ray-cast from the same
geometry, so the two modalities agree exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .geometry import (
    AugmentParams,
    Box3D,
    CameraView,
    augment_extrinsics,
    augment_extrinsics_exact,
    augmentation_matrix,
    BehindCameraError,
    look_at_extrinsics,
    project_box3d,
    transform_box,
    transform_points,
)

FORMAT_VERSION = 1
FLOOR_COLOR = (0.45, 0.45, 0.45)
WALL_COLOR = (0.75, 0.75, 0.75)
CEILING_COLOR = (0.9, 0.9, 0.9)


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    """Schema violation; the message starts with the offending field path."""


@dataclass(frozen=True)
class ClassSpec:
    name: str
    size: tuple[float, float, float]
    color: tuple[float, float, float]


DEFAULT_CLASSES = (
    ClassSpec("bed", (2.0, 1.6, 0.6), (0.85, 0.15, 0.15)),
    ClassSpec("table", (1.4, 0.8, 0.75), (0.15, 0.65, 0.15)),
    ClassSpec("chair", (0.5, 0.5, 0.9), (0.15, 0.25, 0.85)),
    ClassSpec("sofa", (2.0, 0.9, 0.8), (0.9, 0.8, 0.1)),
    ClassSpec("bookshelf", (0.9, 0.35, 1.8), (0.6, 0.2, 0.7)),
    ClassSpec("desk", (1.2, 0.6, 0.75), (0.1, 0.75, 0.75)),
    ClassSpec("nightstand", (0.5, 0.45, 0.6), (0.95, 0.5, 0.1)),
    ClassSpec("dresser", (1.0, 0.5, 1.1), (0.55, 0.35, 0.15)),
    ClassSpec("cabinet", (0.6, 0.6, 1.4), (0.1, 0.1, 0.1)),
    ClassSpec("bathtub", (1.6, 0.8, 0.55), (1.0, 0.6, 0.8)),
)


@dataclass
class SynthConfig:
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    boxes_per_scene: tuple[int, int] = (2, 5)
    points_per_scene: int = 2048
    views_per_scene: tuple[int, int] = (1, 3)
    image_size: tuple[int, int] = (64, 64)  # (H, W)
    noise_std: float = 0.01
    room_extent: float = 8.0
    room_height: float = 3.0
    clutter_fraction: float = 0.1
    wall_clutter_share: float = 0.2
    size_jitter: float = 0.1
    focal_px: float = 36.0
    camera_height: float = 1.8
    box_gap: float = 0.3
    max_retries: int = 200

    def __post_init__(self):
        self.classes = tuple(c if isinstance(c, ClassSpec) else ClassSpec(c["name"], tuple(c["size"]), tuple(c["color"])) for c in self.classes)
        self.boxes_per_scene = tuple(self.boxes_per_scene)
        if isinstance(self.views_per_scene, int):
            self.views_per_scene = (self.views_per_scene, self.views_per_scene)
        self.views_per_scene = tuple(self.views_per_scene)
        self.image_size = tuple(self.image_size)
        if not self.classes:
            raise ValueError("classes must be non-empty")
        if self.points_per_scene < 64:
            raise ValueError("points_per_scene must be at least 64")
        lo, hi = self.boxes_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("boxes_per_scene must be a range with lower bound >= 1")
        vlo, vhi = self.views_per_scene
        if not 1 <= vlo <= vhi:
            raise ValueError("views_per_scene must be a range with lower bound >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_json(self) -> dict:
        d = asdict(self)
        d["classes"] = [{"name": c.name, "size": list(c.size), "color": list(c.color)} for c in self.classes]
        for k in ("boxes_per_scene", "views_per_scene", "image_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass(eq=False)
class Scene:
    points: np.ndarray
    point_colors: np.ndarray
    views: list[CameraView]
    gt_boxes: list[Box3D]
    scene_id: str
    seed: int
    point_labels: np.ndarray | None = field(default=None, compare=False)  # box index or -1, not serialized

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.point_colors = np.asarray(self.point_colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("scene needs at least one point")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _place_boxes(cfg: SynthConfig, rng: np.random.Generator) -> list[Box3D]:
    n = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    half_room = cfg.room_extent / 2
    boxes: list[Box3D] = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            spec = cfg.classes[int(rng.integers(len(cfg.classes)))]
            jitter = rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
            size = np.asarray(spec.size) * jitter
            lim = half_room - 0.75 - size[:2] / 2
            if np.any(lim <= 0):
                continue
            xy = rng.uniform(-lim, lim)
            cand = Box3D((float(xy[0]), float(xy[1]), float(size[2] / 2)), tuple(float(s) for s in size), cfg.classes.index(spec))
            if all(_separated(cand, b, cfg.box_gap) for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(f"could not place {n} non-overlapping boxes after {cfg.max_retries} retries")
    return boxes


def _separated(a: Box3D, b: Box3D, gap: float) -> bool:
    return bool(np.any(a.min[:2] > b.max[:2] + gap) or np.any(b.min[:2] > a.max[:2] + gap))


def _sample_box_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the five exposed faces (the bottom rests on the floor)."""
    lo, hi = box.min, box.max
    dx, dy, dz = box.size
    faces = [  # (fixed axis, value, area)
        (0, lo[0], dy * dz), (0, hi[0], dy * dz),
        (1, lo[1], dx * dz), (1, hi[1], dx * dz),
        (2, hi[2], dx * dy),
    ]
    areas = np.array([f[2] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = rng.uniform(lo, hi, size=(n, 3))
    for k, (axis, value, _) in enumerate(faces):
        pts[which == k, axis] = value
    return pts


def _sample_clutter(cfg: SynthConfig, boxes: list[Box3D], n: int, rng: np.random.Generator):
    half = cfg.room_extent / 2
    n_wall = int(round(n * cfg.wall_clutter_share))
    n_floor = n - n_wall
    floor = [np.zeros((0, 3))]
    while sum(len(f) for f in floor) < n_floor:
        cand = np.column_stack([rng.uniform(-half, half, size=(n_floor, 2)), np.zeros(n_floor)])
        inside = np.zeros(len(cand), dtype=bool)
        for b in boxes:
            inside |= np.all((cand[:, :2] >= b.min[:2]) & (cand[:, :2] <= b.max[:2]), axis=1)
        floor.append(cand[~inside])
    floor_pts = np.concatenate(floor)[:n_floor]
    wall_idx = rng.integers(4, size=n_wall)
    t = rng.uniform(-half, half, size=n_wall)
    z = rng.uniform(0, cfg.room_height, size=n_wall)
    wall_pts = np.zeros((n_wall, 3))
    sign = np.where(wall_idx % 2 == 0, -half, half)
    on_x = wall_idx < 2
    wall_pts[on_x, 0] = sign[on_x]
    wall_pts[on_x, 1] = t[on_x]
    wall_pts[~on_x, 1] = sign[~on_x]
    wall_pts[~on_x, 0] = t[~on_x]
    wall_pts[:, 2] = z
    colors = np.concatenate([np.tile(FLOOR_COLOR, (n_floor, 1)), np.tile(WALL_COLOR, (n_wall, 1))])
    return np.concatenate([floor_pts, wall_pts]), colors


def _make_cameras(cfg: SynthConfig, n_views: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    H, W = cfg.image_size
    half = cfg.room_extent / 2
    K = np.array([[cfg.focal_px, 0.0, W / 2], [0.0, cfg.focal_px, H / 2], [0.0, 0.0, 1.0]])
    phi0 = rng.uniform(0, 2 * np.pi)
    cams = []
    for k in range(n_views):
        phi = phi0 + 2 * np.pi * k / n_views
        d = np.array([np.cos(phi), np.sin(phi)])
        # ray from the center to the square boundary
        eye_xy = d * half / np.max(np.abs(d))
        eye = np.array([eye_xy[0], eye_xy[1], cfg.camera_height])
        target = np.array([0.0, 0.0, 0.5])
        cams.append((K.copy(), look_at_extrinsics(eye, target)))
    return cams


def _cast(cfg: SynthConfig, origin: np.ndarray, d: np.ndarray, boxes: list[Box3D]):
    """Nearest hit along each ray ``origin + t d``: (t, color)."""
    best_t = np.full(len(d), np.inf)
    color = np.zeros((len(d), 3))
    half = cfg.room_extent / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        # room shell: floor, ceiling, four walls
        shells = [
            (2, 0.0, FLOOR_COLOR), (2, cfg.room_height, CEILING_COLOR),
            (0, -half, WALL_COLOR), (0, half, WALL_COLOR), (1, -half, WALL_COLOR), (1, half, WALL_COLOR),
        ]
        for axis, value, col in shells:
            tt = (value - origin[axis]) / d[:, axis]
            # cameras sit on a wall; rounding must not let that wall block their own view
            hit = (tt > 1e-9) & (tt < best_t)
            best_t[hit] = tt[hit]
            color[hit] = col
        for b in boxes:
            t1 = (b.min - origin) / d
            t2 = (b.max - origin) / d
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            tt = np.where(tnear > 0, tnear, tfar)
            hit = (tnear <= tfar) & (tt > 0) & (tt < best_t)
            best_t[hit] = tt[hit]
            color[hit] = cfg.classes[b.class_id].color
    return best_t, color


def _ray_cast(cfg: SynthConfig, K: np.ndarray, R_t: np.ndarray, boxes: list[Box3D]):
    """Render (image, depth) for one camera.

    Colors come from the ray through each pixel center.  Depth is the farthest
    visible surface among the center and the four pixel corners: for a planar
    face covering the pixel that bounds the depth of every point inside it, so
    a point on a visible face never reads as occluded.
    """
    H, W = cfg.image_size
    R, t = R_t[:, :3], R_t[:, 3]
    origin = -R.T @ t
    Kinv_T = np.linalg.inv(K).T

    def rays(us, vs):
        uu, vv = np.meshgrid(us, vs)
        pix = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
        # camera-space z is exactly 1, so the ray parameter equals camera depth
        return (pix @ Kinv_T) @ R

    t_center, color = _cast(cfg, origin, rays(np.arange(W) + 0.5, np.arange(H) + 0.5), boxes)
    t_corner, _ = _cast(cfg, origin, rays(np.arange(W + 1.0), np.arange(H + 1.0)), boxes)
    c = t_corner.reshape(H + 1, W + 1)
    depth = np.maximum.reduce([t_center.reshape(H, W), c[:-1, :-1], c[:-1, 1:], c[1:, :-1], c[1:, 1:]])
    return color.reshape(H, W, 3), depth


def fully_visible(view: CameraView, box: Box3D) -> bool:
    try:
        b = project_box3d(view, box, clamp=False)
    except BehindCameraError:
        return False
    return b.min[0] >= 0 and b.min[1] >= 0 and b.max[0] <= view.width_px and b.max[1] <= view.height_px


def generate_scene(cfg: SynthConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Build one scene; fully determined by ``(cfg, seed)``."""
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        scene = _generate_once(cfg, rng, seed, scene_id or f"scene_{seed:06d}")
        if any(fully_visible(v, b) for v in scene.views for b in scene.gt_boxes):
            return scene
    raise GenerationError(f"seed {seed}: no box fully visible after {cfg.max_retries} attempts")


def _generate_once(cfg: SynthConfig, rng: np.random.Generator, seed: int, scene_id: str) -> Scene:
    boxes = _place_boxes(cfg, rng)
    n_total = cfg.points_per_scene
    n_clutter = int(round(n_total * cfg.clutter_fraction))
    n_box = n_total - n_clutter
    areas = np.array([2 * (b.size[0] + b.size[1]) * b.size[2] + b.size[0] * b.size[1] for b in boxes])
    counts = np.floor(n_box * areas / areas.sum()).astype(int)
    counts[: n_box - counts.sum()] += 1
    pts, cols, labels = [], [], []
    for k, (b, c) in enumerate(zip(boxes, counts)):
        pts.append(_sample_box_surface(b, int(c), rng))
        cols.append(np.tile(cfg.classes[b.class_id].color, (int(c), 1)))
        labels.append(np.full(int(c), k))
    clutter, clutter_cols = _sample_clutter(cfg, boxes, n_clutter, rng)
    pts.append(clutter)
    cols.append(clutter_cols)
    labels.append(np.full(len(clutter), -1))
    points = np.concatenate(pts)
    if cfg.noise_std > 0:
        points = points + rng.normal(0, cfg.noise_std, size=points.shape)
    n_views = int(rng.integers(cfg.views_per_scene[0], cfg.views_per_scene[1] + 1))
    H, W = cfg.image_size
    views = []
    for K, R_t in _make_cameras(cfg, n_views, rng):
        image, depth = _ray_cast(cfg, K, R_t, boxes)
        views.append(CameraView(K, R_t, W, H, image=image, depth=depth))
    return Scene(points, np.concatenate(cols), views, boxes, scene_id, int(seed), np.concatenate(labels))


def generate_dataset(cfg: SynthConfig, seed: int, count: int) -> list[Scene]:
    return [generate_scene(cfg, seed * 100_003 + i, f"scene_{seed}_{i:05d}") for i in range(count)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment_scene(scene: Scene, p: AugmentParams, extrinsic_rule: str = "exact") -> Scene:
    """Apply the augmentation map to points, box labels and camera extrinsics.

    ``extrinsic_rule="exact"`` keeps every pixel projection unchanged;
    ``"transpose"`` applies the literal ``A^T R_t`` update.
    """
    if p.is_identity:
        return scene
    A = augmentation_matrix(p)
    update = {"exact": augment_extrinsics_exact, "transpose": augment_extrinsics}[extrinsic_rule]
    views = [
        CameraView(v.intrinsics, update(v.extrinsics, A), v.width_px, v.height_px, v.image, v.depth, v.intrinsic_scale)
        for v in scene.views
    ]
    return Scene(
        transform_points(scene.points, A),
        scene.point_colors,
        views,
        [transform_box(b, A) for b in scene.gt_boxes],
        scene.scene_id,
        scene.seed,
        scene.point_labels,
    )


def random_augment_params(rng: np.random.Generator, flip_prob=0.5, max_rot_deg=5.0, scale_range=(0.9, 1.1)) -> AugmentParams:
    flip = -1 if rng.random() < flip_prob else 1
    theta = float(np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg)))
    scale = float(rng.uniform(*scale_range))
    return AugmentParams(theta, flip, scale)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def scene_to_json(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "points": scene.points.tolist(),
        "point_colors": scene.point_colors.tolist(),
        "views": [
            {
                "K_intr": v.intrinsics.tolist(),
                "R_t": v.extrinsics.tolist(),
                "intrinsic_scale": v.intrinsic_scale,
                "width_px": v.width_px,
                "height_px": v.height_px,
                "image": v.image.ravel().tolist(),
                "depth": None if v.depth is None else v.depth.ravel().tolist(),
            }
            for v in scene.views
        ],
        "gt_boxes": [{"center": list(b.center), "size": list(b.size), "class_id": b.class_id} for b in scene.gt_boxes],
    }


def _need(d: Any, key: str, path: str, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise DatasetFormatError(f"{path}.{key}: missing field")
    val = d[key]
    if kind is not None and not isinstance(val, kind):
        raise DatasetFormatError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _matrix(val, shape, path) -> np.ndarray:
    try:
        arr = np.asarray(val, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: not numeric") from exc
    if arr.shape != shape:
        raise DatasetFormatError(f"{path}: expected shape {shape}, got {arr.shape}")
    return arr


def scene_from_json(d: dict, path: str = "scene", num_classes: int | None = None) -> Scene:
    scene_id = _need(d, "scene_id", path, str)
    seed = _need(d, "seed", path, int)
    pts = np.asarray(_need(d, "points", path, list), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise DatasetFormatError(f"{path}.points: expected N x 3 with N >= 1")
    cols = np.asarray(_need(d, "point_colors", path, list), dtype=np.float64)
    if cols.shape != pts.shape:
        raise DatasetFormatError(f"{path}.point_colors: expected shape {pts.shape}, got {cols.shape}")
    views = []
    for i, v in enumerate(_need(d, "views", path, list)):
        vp = f"{path}.views[{i}]"
        w = _need(v, "width_px", vp, int)
        h = _need(v, "height_px", vp, int)
        image = _matrix(_need(v, "image", vp, list), (h * w * 3,), f"{vp}.image").reshape(h, w, 3)
        depth_raw = v.get("depth")
        depth = None if depth_raw is None else _matrix(depth_raw, (h * w,), f"{vp}.depth").reshape(h, w)
        try:
            views.append(
                CameraView(
                    _matrix(_need(v, "K_intr", vp), (3, 3), f"{vp}.K_intr"),
                    _matrix(_need(v, "R_t", vp), (3, 4), f"{vp}.R_t"),
                    w, h, image, depth,
                    float(_need(v, "intrinsic_scale", vp, (int, float))),
                )
            )
        except ValueError as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"{vp}: {exc}") from exc
    boxes = []
    for i, b in enumerate(_need(d, "gt_boxes", path, list)):
        bp = f"{path}.gt_boxes[{i}]"
        cls = _need(b, "class_id", bp, int)
        if num_classes is not None and not 0 <= cls < num_classes:
            raise DatasetFormatError(f"{bp}.class_id: {cls} outside [0, {num_classes})")
        try:
            boxes.append(
                Box3D(
                    tuple(_matrix(_need(b, "center", bp), (3,), f"{bp}.center").tolist()),
                    tuple(_matrix(_need(b, "size", bp), (3,), f"{bp}.size").tolist()),
                    cls,
                )
            )
        except ValueError as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"{bp}: {exc}") from exc
    return Scene(pts, cols, views, boxes, scene_id, seed)


def dataset_to_json(scenes: Sequence[Scene], cfg: SynthConfig | None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": None if cfg is None else cfg.to_json(),
        "scenes": [scene_to_json(s) for s in scenes],
    }


def dataset_bytes(scenes: Sequence[Scene], cfg: SynthConfig | None) -> bytes:
    return json.dumps(dataset_to_json(scenes, cfg), separators=(",", ":")).encode()


def write_dataset(path, scenes: Sequence[Scene], cfg: SynthConfig | None = None) -> str:
    """Write the dataset and return the SHA-256 of the bytes written."""
    blob = dataset_bytes(scenes, cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def parse_dataset(doc: Any) -> tuple[SynthConfig | None, list[Scene]]:
    if not isinstance(doc, dict):
        raise DatasetFormatError("$: expected an object")
    version = _need(doc, "format_version", "$", int)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"$.format_version: unsupported version {version}")
    cfg_raw = doc.get("config")
    try:
        cfg = None if cfg_raw is None else SynthConfig.from_json(cfg_raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise DatasetFormatError(f"$.config: {exc}") from exc
    n_cls = None if cfg is None else cfg.num_classes
    scenes = [scene_from_json(s, f"$.scenes[{i}]", n_cls) for i, s in enumerate(_need(doc, "scenes", "$", list))]
    return cfg, scenes


def read_dataset(path) -> tuple[SynthConfig | None, list[Scene]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"$: invalid JSON ({exc})") from exc
    return parse_dataset(doc)


def content_hash(scenes: Sequence[Scene], cfg: SynthConfig | None = None) -> str:
    return hashlib.sha256(dataset_bytes(scenes, cfg)).hexdigest()
