"""Independent reference implementations used by the unit and acceptance tests.

Each oracle recomputes a quantity by brute force (enumeration, rasterization,
sampling) rather than reusing the library code path it checks.
"""

import itertools

import numpy as np

from brt.geometry import Box2D, Box3D, CameraView


def patch_by_containment(u: int, v: int, width: int, height: int, S: int) -> int:
    """Search every patch rectangle for the one holding pixel (u, v); -1 if none (trailing pixels)."""
    rows, cols = height // S, width // S
    for r in range(rows):
        for c in range(cols):
            if c * S <= u < (c + 1) * S and r * S <= v < (r + 1) * S:
                return r * cols + c
    return -1


def corner_hull(view: CameraView, box: Box3D) -> tuple[np.ndarray, np.ndarray]:
    """Project the 8 corners one by one with explicit homogeneous arithmetic."""
    P = np.diag([view.intrinsic_scale, view.intrinsic_scale, 1.0]) @ view.intrinsics @ view.extrinsics
    us, vs = [], []
    for sx, sy, sz in itertools.product((-0.5, 0.5), repeat=3):
        x = np.array([box.center[0] + sx * box.size[0], box.center[1] + sy * box.size[1], box.center[2] + sz * box.size[2], 1.0])
        h = P @ x
        us.append(h[0] / h[2])
        vs.append(h[1] / h[2])
    return np.array([min(us), min(vs)]), np.array([max(us), max(vs)])


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum over all injective column->row assignments."""
    n, m = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(n), m):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def raster_giou(a: Box2D, b: Box2D, cells: int = 1000) -> float:
    """GIoU by counting cell centres of a fine grid laid over the enclosing hull."""
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    xs = lo[0] + (np.arange(cells) + 0.5) * (hi[0] - lo[0]) / cells
    ys = lo[1] + (np.arange(cells) + 0.5) * (hi[1] - lo[1]) / cells
    X, Y = np.meshgrid(xs, ys)
    ina = (X >= a.min[0]) & (X < a.max[0]) & (Y >= a.min[1]) & (Y < a.max[1])
    inb = (X >= b.min[0]) & (X < b.max[0]) & (Y >= b.min[1]) & (Y < b.max[1])
    cell = (hi[0] - lo[0]) * (hi[1] - lo[1]) / cells**2
    inter = (ina & inb).sum() * cell
    union = (ina | inb).sum() * cell
    hull = cells * cells * cell
    return inter / union - (hull - union) / hull


def raster_giou_separable(a: Box2D, b: Box2D, cells: int = 100_000) -> float:
    """The same cell-centre count as :func:`raster_giou` on a product grid.

    A rectangle covers exactly the cells whose x centre and y centre both fall
    inside it, so every 2D count factors into a product of two 1D counts. This
    allows a far finer grid at the same cost.
    """
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    counts = {}
    for ax in (0, 1):
        c = lo[ax] + (np.arange(cells) + 0.5) * (hi[ax] - lo[ax]) / cells
        ia = (c >= a.min[ax]) & (c < a.max[ax])
        ib = (c >= b.min[ax]) & (c < b.max[ax])
        counts[ax] = (int(ia.sum()), int(ib.sum()), int((ia & ib).sum()))
    na = counts[0][0] * counts[1][0]
    nb = counts[0][1] * counts[1][1]
    inter = counts[0][2] * counts[1][2]
    union = na + nb - inter
    hull = cells * cells
    return inter / union - (hull - union) / hull


def monte_carlo_iou3d(a: Box3D, b: Box3D, n: int = 1_000_000, seed: int = 0) -> float:
    """Sample the joint bounding region uniformly and count membership."""
    rng = np.random.default_rng(seed)
    lo = np.minimum(a.min, b.min)
    hi = np.maximum(a.max, b.max)
    p = rng.uniform(lo, hi, size=(n, 3))
    ina = np.all((p >= a.min) & (p <= a.max), axis=1)
    inb = np.all((p >= b.min) & (p <= b.max), axis=1)
    union = (ina | inb).sum()
    return float((ina & inb).sum() / union) if union else 0.0


def random_box3d(rng, lo=-2.0, hi=2.0, smin=0.2, smax=2.0, class_id=0) -> Box3D:
    return Box3D(tuple(rng.uniform(lo, hi, 3)), tuple(rng.uniform(smin, smax, 3)), class_id)


def random_box2d(rng, span=10.0, smin=0.2, smax=5.0) -> Box2D:
    lo = rng.uniform(0, span, 2)
    size = rng.uniform(smin, smax, 2)
    return Box2D(tuple(lo), tuple(lo + size))


def dense_masked_attention(x, wq, wk, wv, wo, mask, heads):
    """Per-head loops with explicit -inf logits for blocked pairs."""
    T, D = x.shape
    dh = D // heads
    out = np.zeros((T, D))
    weights = np.zeros((heads, T, T))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ wq[:, cols], x @ wk[:, cols], x @ wv[:, cols]
        for i in range(T):
            logits = np.array([q[i] @ k[j] if mask[i, j] else -np.inf for j in range(T)])
            e = np.exp(logits - logits.max())
            a = e / e.sum()
            weights[h, i] = a
            out[i] += (a @ v) @ wo[cols, :]
    return out, weights
