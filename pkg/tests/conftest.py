import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brt.model import BrTModel, ModelConfig
from brt.synth import SynthConfig, generate_dataset, generate_scene

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# toy dims shared by several modules
TOY_MODEL = dict(n_pnt=32, k=4, d=16, l=2, h=2, s=16, f=8)


def toy_synth(**kw):
    base = dict(boxes_per_scene=(2, 3), points_per_scene=512, clutter_fraction=0.0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def small_cfg():
    return toy_synth()


@pytest.fixture(scope="session")
def scene(small_cfg):
    return generate_scene(small_cfg, 11, "fixture_scene")


@pytest.fixture(scope="session")
def scenes(small_cfg):
    return generate_dataset(small_cfg, 3, 6)


@pytest.fixture
def toy_model():
    return BrTModel(ModelConfig(**TOY_MODEL), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def scenes_equal(a, b, atol=0.0) -> bool:
    """Field-by-field scene comparison (numpy fields need allclose)."""
    if a.scene_id != b.scene_id or a.seed != b.seed or a.gt_boxes != b.gt_boxes:
        return False
    if not (np.allclose(a.points, b.points, atol=atol, rtol=0) and np.allclose(a.point_colors, b.point_colors, atol=atol, rtol=0)):
        return False
    if len(a.views) != len(b.views):
        return False
    for va, vb in zip(a.views, b.views):
        for name in ("intrinsics", "extrinsics", "image", "depth"):
            x, y = getattr(va, name), getattr(vb, name)
            if (x is None) != (y is None) or (x is not None and not np.allclose(x, y, atol=atol, rtol=0)):
                return False
        if (va.width_px, va.height_px, va.intrinsic_scale) != (vb.width_px, vb.height_px, vb.intrinsic_scale):
            return False
    return True


# acceptance verdicts, echoed once more at the end of the session
CRITERIA: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    print(line)
    CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
