"""Hungarian matching, GIoU and the composite set-prediction loss."""

from types import SimpleNamespace

import numpy as np
import pytest
from conftest import TOY_MODEL
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_force_assignment, random_box2d, raster_giou, raster_giou_separable

from brt import tensor as tn
from brt.geometry import Box2D, DegenerateBoxError
from brt.losses import (
    LOSS_KEYS,
    LossWeights,
    assignment_cost,
    cost_matrix,
    cross_entropy,
    giou_2d,
    giou_tensor,
    hungarian,
    iou_2d,
    match_cost,
    nearest_template,
    scene_targets,
    size_template_logits,
    size_templates,
    total_loss,
)
from brt.model import BrTModel, ModelConfig
from brt.tensor import NonFiniteError, Tensor, grad_check

costs = st.integers(1, 6).flatmap(
    lambda m: st.integers(m, 6).flatmap(
        lambda n: st.lists(st.floats(-10, 10), min_size=n * m, max_size=n * m).map(lambda v: np.array(v).reshape(n, m))
    )
)


class TestHungarian:
    def test_diagonal(self):
        r = hungarian([[1, 2], [2, 1]])
        assert set(r.pairs) == {(0, 0), (1, 1)} and assignment_cost([[1, 2], [2, 1]], r) == 2

    def test_anti_diagonal(self):
        r = hungarian([[2, 1], [1, 2]])
        assert set(r.pairs) == {(0, 1), (1, 0)} and assignment_cost([[2, 1], [1, 2]], r) == 2

    def test_random_six_by_six(self, rng):
        for _ in range(5):
            c = rng.uniform(size=(6, 6))
            assert assignment_cost(c, hungarian(c)) == pytest.approx(brute_force_assignment(c), abs=1e-12)

    @given(costs)
    def test_brute_force(self, c):
        r = hungarian(c)
        assert len(r.pairs) == c.shape[1]
        assert len({q for q, _ in r.pairs}) == c.shape[1]
        assert sorted(g for _, g in r.pairs) == list(range(c.shape[1]))
        assert assignment_cost(c, r) == pytest.approx(brute_force_assignment(c), abs=1e-9)
        assert sorted(r.unmatched + [q for q, _ in r.pairs]) == list(range(c.shape[0]))

    def test_row_constant_invariance(self, rng):
        c = rng.uniform(size=(6, 4))
        shifted = c + rng.uniform(-5, 5, size=(6, 1))
        # with square problems every row is used, so a row shift cannot change the argmin
        sq = rng.uniform(size=(5, 5))
        assert hungarian(sq).pairs == hungarian(sq + rng.uniform(-5, 5, size=(5, 1))).pairs
        # column shifts always preserve it
        assert hungarian(c).pairs == hungarian(c + rng.uniform(-5, 5, size=(1, 4))).pairs
        assert len(hungarian(shifted).pairs) == 4

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            hungarian([[1.0, np.nan]])

    def test_no_ground_truth(self):
        r = hungarian(np.zeros((3, 0)))
        assert r.pairs == [] and r.unmatched == [0, 1, 2]


class TestMatchCost:
    def test_identical(self):
        assert match_cost((1, 2, 3), (1, 1, 1), [0.0, 1.0], (1, 2, 3), (1, 1, 1), 1) == 0.0

    def test_one_meter(self):
        assert match_cost((1, 2, 3), (1, 1, 1), [1.0], (2, 2, 3), (1, 1, 1), 0) == 1.0

    def test_matrix_matches_direct_formula(self, rng):
        ctr, size, logits = rng.normal(size=(5, 3)), rng.uniform(0.2, 2, (5, 3)), rng.normal(size=(5, 4))
        gc, gs, gk = rng.normal(size=(3, 3)), rng.uniform(0.2, 2, (3, 3)), rng.integers(0, 3, 3)
        prob = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        m = cost_matrix(ctr, size, logits, gc, gs, gk)
        for i in range(5):
            for j in range(3):
                assert m[i, j] == pytest.approx(match_cost(ctr[i], size[i], prob[i], gc[j], gs[j], gk[j]), abs=1e-12)


class TestGIoU:
    def test_identical(self):
        b = Box2D((0, 0), (2, 3))
        assert giou_2d(b, b) == 1.0

    def test_touching(self):
        assert giou_2d(Box2D((0, 0), (1, 1)), Box2D((1, 0), (2, 1))) == 0.0

    def test_degenerate(self):
        with pytest.raises(DegenerateBoxError):
            giou_2d(Box2D((0, 0), (0, 1)), Box2D((0, 0), (1, 1)))

    def test_raster_oracle(self, rng):
        worst = 0.0
        for _ in range(1000):
            a, b = random_box2d(rng), random_box2d(rng)
            worst = max(worst, abs(giou_2d(a, b) - raster_giou(a, b, cells=400)))
        # cells=400 keeps the run short; edges land within half a cell of the truth
        assert worst < 1e-2

    def test_raster_oracle_fine(self, rng):
        for _ in range(20):
            a, b = random_box2d(rng), random_box2d(rng)
            assert abs(giou_2d(a, b) - raster_giou(a, b)) < 1e-3

    def test_separable_count_equals_grid_count(self, rng):
        for _ in range(50):
            a, b = random_box2d(rng), random_box2d(rng)
            assert raster_giou_separable(a, b, cells=300) == pytest.approx(raster_giou(a, b, cells=300), abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_properties(self, seed):
        r = np.random.default_rng(seed)
        a, b = random_box2d(r), random_box2d(r)
        g = giou_2d(a, b)
        assert g == pytest.approx(giou_2d(b, a), abs=1e-15)
        assert -1 < g <= iou_2d(a, b) + 1e-15

    def test_monotone_under_separation(self):
        a = Box2D((0, 0), (1, 1))
        vals = [giou_2d(a, Box2D((x, 0.2), (x + 1, 1.2))) for x in np.linspace(0, 50, 60)]
        assert all(u > v for u, v in zip(vals, vals[1:]))
        assert vals[-1] < -0.9

    def test_tensor_matches_scalar(self, rng):
        pa = [random_box2d(rng) for _ in range(6)]
        pb = [random_box2d(rng) for _ in range(6)]
        cxcywh = lambda bs: np.array([[(b.min[0] + b.max[0]) / 2, (b.min[1] + b.max[1]) / 2, b.max[0] - b.min[0], b.max[1] - b.min[1]] for b in bs])
        out = giou_tensor(Tensor(cxcywh(pa)), cxcywh(pb)).data
        np.testing.assert_allclose(out, [giou_2d(a, b) for a, b in zip(pa, pb)], atol=1e-12)


class TestWeights:
    def test_unit_terms(self):
        # 1*1 + 0.1*1 + 0.2*(1 + 1) + 0.5*(1*1 + 2*1) + 0.1*1
        terms = {k: 1.0 for k in LOSS_KEYS if k != "total"}
        assert LossWeights().combine(terms) == pytest.approx(3.1, abs=1e-12)

    def test_defaults(self):
        w = LossWeights()
        assert (w.alpha1, w.alpha2, w.alpha3) == (0.2, 0.5, 0.1)
        assert (w.w_center3d, w.w_size3d, w.w_objcls3d, w.w_sizecls3d, w.w_center2d, w.w_giou2d) == (1, 0.1, 1, 1, 1, 2)

    def test_negative(self):
        with pytest.raises(ValueError):
            LossWeights(alpha1=-0.1)


class TestTemplates:
    def test_per_class_means(self, scenes):
        t = size_templates(scenes, 10)
        seen = {b.class_id for s in scenes for b in s.gt_boxes}
        for c in seen:
            np.testing.assert_allclose(t[c], np.mean([b.size for s in scenes for b in s.gt_boxes if b.class_id == c], axis=0))

    def test_nearest_template_logits_agree(self, rng):
        t = rng.uniform(0.3, 2, (5, 3))
        sizes = t[[3, 0, 4]] * 1.01
        assert nearest_template(sizes, t).tolist() == [3, 0, 4]
        assert np.argmax(size_template_logits(Tensor(sizes), t).data, axis=1).tolist() == [3, 0, 4]

    def test_cross_entropy(self):
        logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
        expect = -(np.log(np.exp(2) / np.exp([2, 0, -1]).sum()) + np.log(1 / 3)) / 2
        assert cross_entropy(Tensor(logits), np.array([0, 2])).item() == pytest.approx(expect, abs=1e-14)


def head_objective(model, scene, templates, weights=LossWeights()):
    """Loss as a function of the two heads only, with the trunk frozen."""
    pred = model.predict(scene)
    o_pnt = Tensor(tn.layernorm(pred.tokens.o_pnt, *model.final_ln).data)
    o_pat = Tensor(tn.layernorm(pred.tokens.o_pat, *model.final_ln).data)
    ref = Tensor(pred.bridge.reference.data)
    targets = scene_targets(scene)

    def f():
        h3 = tn.mlp_forward(o_pnt, model.head3d)
        h2 = tn.mlp_forward(o_pat, model.head2d)
        p = SimpleNamespace(
            center3d=ref + h3[:, 0:3], size3d=tn.exp(h3[:, 3:6]), logits3d=h3[:, 6:],
            box2d=tn.sigmoid(h2[:, 0:4]), logits2d=h2[:, 4:],
        )
        return total_loss(p, targets, weights, templates).total

    return f


class TestTotalLoss:
    def perfect(self, scene, templates, C=10, sharp=50.0):
        t = scene_targets(scene)
        K = max(4, t.num)
        centers = np.zeros((K, 3))
        sizes = np.ones((K, 3))
        l3 = np.full((K, C + 1), -sharp)
        l3[:, C] = sharp
        l2 = l3.copy()
        box = np.full((K, 4), 0.5)
        centers[: t.num], sizes[: t.num] = t.centers, t.sizes
        l3[: t.num] = -sharp
        l3[np.arange(t.num), t.classes] = sharp
        l2[: t.num] = -sharp
        for i in range(t.num):
            if t.has2d[i]:
                l2[i, t.classes[i]] = sharp
                box[i] = t.boxes2d[i]
            else:
                l2[i, C] = sharp
        # size templates equal to the true sizes make the size classification exact too
        return SimpleNamespace(center3d=Tensor(centers), size3d=Tensor(sizes), logits3d=Tensor(l3), box2d=Tensor(box), logits2d=Tensor(l2)), t

    def test_perfect_predictions(self, scene):
        tmpl = np.array([b.size for b in scene.gt_boxes])
        p, t = self.perfect(scene, tmpl)
        out = total_loss(p, t, LossWeights(), tmpl)
        for k in ("obj3d_center", "obj3d_size", "obj2d_center"):
            assert out.terms[k] == 0.0
        assert out.terms["obj2d_giou"] == pytest.approx(0.0, abs=1e-12)
        for k in ("cls3d_obj", "cls2d"):
            assert 0 <= out.terms[k] < 1e-10
        # the size classes come from a soft template score, so their CE stays at its logit value
        logits = -((np.log(t.sizes)[:, None] - np.log(tmpl)[None]) ** 2).sum(-1) / 0.1
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        assert out.terms["cls3d_size"] == pytest.approx(-np.mean(np.diag(logp)), abs=1e-12)
        assert sorted(out.match.pairs) == [(i, i) for i in range(t.num)]

    def test_empty_ground_truth(self, toy_model, scene):
        empty = SimpleNamespace(**{**scene.__dict__, "gt_boxes": []})
        out = total_loss(toy_model.predict(scene), scene_targets(empty), LossWeights(), np.ones((10, 3)))
        assert out.match.pairs == []
        for k in ("obj3d_center", "obj3d_size", "cls3d_size", "obj2d_center", "obj2d_giou"):
            assert out.terms[k] == 0.0
        assert out.terms["total"] == pytest.approx(0.2 * out.terms["cls3d_obj"] + 0.1 * out.terms["cls2d"])

    def test_non_negative_and_keys(self, toy_model, scenes):
        tmpl = size_templates(scenes, 10)
        for s in scenes[:3]:
            out = total_loss(toy_model.predict(s), scene_targets(s), LossWeights(), tmpl)
            assert set(out.terms) == set(LOSS_KEYS)
            assert all(v >= 0 for v in out.terms.values())
            assert out.terms["total"] == pytest.approx(LossWeights().combine(out.terms))

    def test_gt_permutation_invariance(self, toy_model, scene):
        tmpl = size_templates([scene], 10)
        pred = toy_model.predict(scene)
        a = total_loss(pred, scene_targets(scene), LossWeights(), tmpl)
        shuffled = SimpleNamespace(**{**scene.__dict__, "gt_boxes": scene.gt_boxes[::-1]})
        b = total_loss(pred, scene_targets(shuffled), LossWeights(), tmpl)
        for k in LOSS_KEYS:
            assert a.terms[k] == pytest.approx(b.terms[k], abs=1e-12)

    def test_head_gradients(self, scene):
        m = BrTModel(ModelConfig(**TOY_MODEL), seed=9)
        tmpl = size_templates([scene], 10)
        params = [m.registry[n] for n in m.registry.names() if n.startswith(("head3d.", "head2d."))]
        assert grad_check(head_objective(m, scene, tmpl), params, h=1e-4) < 1e-4
