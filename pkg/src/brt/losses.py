"""Set-prediction matching and the composite detection loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as tn
from .geometry import Box2D, Box3D, DegenerateBoxError, box_to_stitched_2d
from .tensor import NonFiniteError, Tensor

LOSS_KEYS = ("obj3d_center", "obj3d_size", "cls3d_obj", "cls3d_size", "obj2d_center", "obj2d_giou", "cls2d", "total")
SIZE_TEMPERATURE = 0.1


@dataclass
class LossWeights:
    alpha1: float = 0.2
    alpha2: float = 0.5
    alpha3: float = 0.1
    w_center3d: float = 1.0
    w_size3d: float = 0.1
    w_objcls3d: float = 1.0
    w_sizecls3d: float = 1.0
    w_center2d: float = 1.0
    w_giou2d: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def combine(self, terms: dict):
        """Weighted sum of the seven sub-terms; works on floats and tensors alike."""
        obj3d = self.w_center3d * terms["obj3d_center"] + self.w_size3d * terms["obj3d_size"]
        cls3d = self.w_objcls3d * terms["cls3d_obj"] + self.w_sizecls3d * terms["cls3d_size"]
        obj2d = self.w_center2d * terms["obj2d_center"] + self.w_giou2d * terms["obj2d_giou"]
        cls2d = terms["cls2d"]
        return obj3d + self.alpha1 * cls3d + self.alpha2 * obj2d + self.alpha3 * cls2d


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)

    @property
    def query_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every column (ground truth) to a distinct row (query)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("cost matrix contains non-finite entries")
    if m == 0:
        return MatchResult([], list(range(n)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols))
    used = {r for r, _ in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in used])


def assignment_cost(cost, match: MatchResult) -> float:
    cost = np.asarray(cost)
    return float(sum(cost[r, c] for r, c in match.pairs))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_cost(center, size, class_prob, gt_center, gt_size, gt_class) -> float:
    """L1(center) + 0.1 * L1(size) - log p(gt class) for one prediction/target pair."""
    return float(
        np.abs(np.asarray(center) - gt_center).sum()
        + 0.1 * np.abs(np.asarray(size) - gt_size).sum()
        - np.log(max(float(class_prob[gt_class]), 1e-300))
    )


def cost_matrix(center: np.ndarray, size: np.ndarray, logits: np.ndarray, gt_center, gt_size, gt_class) -> np.ndarray:
    prob = _softmax_np(logits)
    gt_center = np.asarray(gt_center).reshape(-1, 3)
    gt_size = np.asarray(gt_size).reshape(-1, 3)
    gt_class = np.asarray(gt_class, dtype=int)
    c = np.abs(center[:, None, :] - gt_center[None]).sum(-1)
    s = np.abs(size[:, None, :] - gt_size[None]).sum(-1)
    return c + 0.1 * s - np.log(np.maximum(prob[:, gt_class], 1e-300))


# ---------------------------------------------------------------------------
# GIoU
# ---------------------------------------------------------------------------

def giou_2d(a: Box2D, b: Box2D) -> float:
    if a.area <= 0 or b.area <= 0:
        raise DegenerateBoxError("GIoU needs boxes with positive area")
    iw = max(0.0, min(a.max[0], b.max[0]) - max(a.min[0], b.min[0]))
    ih = max(0.0, min(a.max[1], b.max[1]) - max(a.min[1], b.min[1]))
    inter = iw * ih
    union = a.area + b.area - inter
    hull = (max(a.max[0], b.max[0]) - min(a.min[0], b.min[0])) * (max(a.max[1], b.max[1]) - min(a.min[1], b.min[1]))
    return inter / union - (hull - union) / hull


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = max(0.0, min(a.max[0], b.max[0]) - max(a.min[0], b.min[0]))
    ih = max(0.0, min(a.max[1], b.max[1]) - max(a.min[1], b.min[1]))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def giou_tensor(pred_cxcywh: Tensor, gt_cxcywh: np.ndarray) -> Tensor:
    """Row-wise differentiable GIoU between predicted and fixed boxes in (cx, cy, w, h)."""
    half = pred_cxcywh[:, 2:4] * 0.5
    p_lo = pred_cxcywh[:, 0:2] - half
    p_hi = pred_cxcywh[:, 0:2] + half
    g = np.asarray(gt_cxcywh)
    g_lo = Tensor(g[:, 0:2] - g[:, 2:4] / 2)
    g_hi = Tensor(g[:, 0:2] + g[:, 2:4] / 2)
    wh_inter = tn.relu(tn.minimum(p_hi, g_hi) - tn.maximum(p_lo, g_lo))
    inter = wh_inter[:, 0] * wh_inter[:, 1]
    area_p = pred_cxcywh[:, 2] * pred_cxcywh[:, 3]
    area_g = Tensor(g[:, 2] * g[:, 3])
    union = area_p + area_g - inter
    wh_hull = tn.maximum(p_hi, g_hi) - tn.minimum(p_lo, g_lo)
    hull = wh_hull[:, 0] * wh_hull[:, 1]
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class SceneTargets:
    centers: np.ndarray  # (G, 3)
    sizes: np.ndarray  # (G, 3)
    classes: np.ndarray  # (G,)
    boxes2d: np.ndarray  # (G, 4) normalized (cx, cy, w, h); rows without a 2D label are zero
    has2d: np.ndarray  # (G,) bool

    @property
    def num(self) -> int:
        return len(self.classes)


def scene_targets(scene) -> SceneTargets:
    boxes: list[Box3D] = scene.gt_boxes
    G = len(boxes)
    W_tot = sum(v.width_px for v in scene.views)
    H = scene.views[0].height_px
    b2 = np.zeros((G, 4))
    has = np.zeros(G, dtype=bool)
    for i, b in enumerate(boxes):
        res = box_to_stitched_2d(scene.views, b)
        if res is None:
            continue
        box, _ = res
        w, h = box.max[0] - box.min[0], box.max[1] - box.min[1]
        if w <= 0 or h <= 0:
            continue
        b2[i] = [(box.min[0] + box.max[0]) / 2 / W_tot, (box.min[1] + box.max[1]) / 2 / H, w / W_tot, h / H]
        has[i] = True
    return SceneTargets(
        np.array([b.center for b in boxes], dtype=np.float64).reshape(G, 3),
        np.array([b.size for b in boxes], dtype=np.float64).reshape(G, 3),
        np.array([b.class_id for b in boxes], dtype=int),
        b2,
        has,
    )


def size_templates(scenes, num_classes: int) -> np.ndarray:
    """Per-class mean box size over the given scenes; unseen classes get the global mean."""
    sums = np.zeros((num_classes, 3))
    counts = np.zeros(num_classes)
    for s in scenes:
        for b in s.gt_boxes:
            sums[b.class_id] += b.size
            counts[b.class_id] += 1
    overall = sums.sum(axis=0) / max(counts.sum(), 1) if counts.sum() else np.ones(3)
    out = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], overall)
    return out


def nearest_template(sizes: np.ndarray, templates: np.ndarray) -> np.ndarray:
    d = ((np.log(sizes)[:, None, :] - np.log(templates)[None]) ** 2).sum(-1)
    return d.argmin(axis=1)


def size_template_logits(size: Tensor, templates: np.ndarray, temperature: float = SIZE_TEMPERATURE) -> Tensor:
    """Logits -||log(size) - log(template_j)||^2 / T over templates."""
    logs = tn.log(size)  # (n, 3)
    n = size.shape[0]
    diff = logs.reshape(n, 1, 3) - Tensor(np.log(templates)[None])
    return (diff * diff).sum(axis=2) * (-1.0 / temperature)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows."""
    n = logits.shape[0]
    logp = tn.log_softmax_lastdim(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), targets] = 1.0
    return (logp * Tensor(onehot)).sum() * (-1.0 / n)


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, float]
    match: MatchResult


def total_loss(pred, targets: SceneTargets, weights: LossWeights, templates: np.ndarray) -> LossOutput:
    """Hungarian-matched composite loss for one scene."""
    K = pred.center3d.shape[0]
    C = pred.logits3d.shape[1] - 1
    G = targets.num
    if G:
        cost = cost_matrix(pred.center3d.data, pred.size3d.data, pred.logits3d.data, targets.centers, targets.sizes, targets.classes)
        match = hungarian(cost)
    else:
        match = MatchResult([], list(range(K)))
    q = np.array([r for r, _ in match.pairs], dtype=int)
    g = np.array([c for _, c in match.pairs], dtype=int)
    zero = Tensor(0.0)
    norm = 1.0 / max(G, 1)

    cls_target = np.full(K, C)
    cls_target[q] = targets.classes[g]
    terms: dict[str, Tensor] = {"cls3d_obj": cross_entropy(pred.logits3d, cls_target)}
    if len(q):
        terms["obj3d_center"] = tn.abs_(pred.center3d[q] - Tensor(targets.centers[g])).sum() * norm
        terms["obj3d_size"] = tn.abs_(pred.size3d[q] - Tensor(targets.sizes[g])).sum() * norm
        tmpl = nearest_template(targets.sizes[g], templates)
        terms["cls3d_size"] = cross_entropy(size_template_logits(pred.size3d[q], templates), tmpl)
    else:
        terms["obj3d_center"] = terms["obj3d_size"] = terms["cls3d_size"] = zero

    # 2D stream reuses the 3D pairing (query i of both streams share the same proposal)
    sel = targets.has2d[g] if len(g) else np.zeros(0, dtype=bool)
    q2, g2 = q[sel], g[sel]
    cls2_target = np.full(K, C)
    cls2_target[q2] = targets.classes[g2]
    terms["cls2d"] = cross_entropy(pred.logits2d, cls2_target)
    if len(q2):
        norm2 = 1.0 / len(q2)
        box = pred.box2d[q2]
        terms["obj2d_center"] = tn.abs_(box[:, 0:2] - Tensor(targets.boxes2d[g2, 0:2])).sum() * norm2
        terms["obj2d_giou"] = (1.0 - giou_tensor(box, targets.boxes2d[g2])).sum() * norm2
    else:
        terms["obj2d_center"] = terms["obj2d_giou"] = zero

    total = weights.combine(terms)
    floats = {k: float(v.data) for k, v in terms.items()}
    floats["total"] = float(total.data)
    return LossOutput(total, floats, match)
