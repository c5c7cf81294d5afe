"""AdamW training driver, step LR schedule, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box3D
from .losses import LossWeights, scene_targets, size_templates, total_loss
from .metrics import Detection, GroundTruth, metrics_report
from .model import BrTModel, ModelConfig, decays
from .synth import Scene, augment_scene, random_augment_params
from .tensor import NonFiniteError, ParamRegistry

log = logging.getLogger(__name__)


class TrainingDivergedError(NonFiniteError):
    def __init__(self, scene_id: str, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step} on scene {scene_id}: {terms}")
        self.scene_id = scene_id
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 2e-3
    lr_decay_factor: float = 0.1
    decay_epoch_fractions: tuple[float, ...] = (0.7, 0.8, 0.9)
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    augment: bool = True
    flip_prob: float = 0.5
    max_rotation_deg: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_steps: int | None = None
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decay_epoch_fractions = tuple(float(x) for x in self.decay_epoch_fractions)
        self.scale_range = tuple(float(x) for x in self.scale_range)
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        fr = self.decay_epoch_fractions
        if any(not 0 < x < 1 for x in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("decay_epoch_fractions must be increasing inside (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**self.loss_weights)

    def decay_epochs(self) -> list[int]:
        return [int(round(f * self.epochs)) for f in self.decay_epoch_fractions]

    def lr_at(self, epoch: int) -> float:
        n = sum(epoch >= e for e in self.decay_epochs())
        return self.lr * self.lr_decay_factor**n

    def to_json(self) -> dict:
        d = asdict(self)
        d["decay_epoch_fractions"] = list(self.decay_epoch_fractions)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class AdamW:
    """Adam with decoupled weight decay; decay skips biases, norm params and embeddings."""

    def __init__(self, registry: ParamRegistry, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.registry = registry
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in registry}
        self.v = {p.name: np.zeros_like(p.tensor.data) for p in registry}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p in self.registry:
            g = grads.get(p.name)
            if g is None:
                g = np.zeros_like(p.tensor.data)
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.tensor.data
            if self.weight_decay and decays(p.name):
                data -= self.lr * self.weight_decay * data
            data -= self.lr * update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def augment_params_for(cfg: TrainConfig, epoch: int, scene_index: int):
    rng = np.random.default_rng([cfg.seed, epoch, scene_index])
    return random_augment_params(rng, cfg.flip_prob, cfg.max_rotation_deg, cfg.scale_range)


@dataclass
class TrainResult:
    model: BrTModel
    log: list[dict]
    epoch_losses: list[float]
    templates: np.ndarray
    checkpoints: list[Path]


def scene_loss(model: BrTModel, scene: Scene, weights: LossWeights, templates: np.ndarray):
    pred = model.predict(scene)
    return total_loss(pred, scene_targets(scene), weights, templates)


def train(
    scenes: Sequence[Scene],
    model: BrTModel,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    class_names: Sequence[str] | None = None,
) -> TrainResult:
    """Optimize ``model`` in place on ``scenes``.

    Each step sums gradients of independent per-scene losses over a batch and
    reports the batch-mean loss terms. With ``out_dir`` set, writes
    ``train_log.jsonl``, ``model.{json,bin}`` and one checkpoint right before
    every LR decay.
    """
    weights = cfg.weights
    templates = size_templates(scenes, model.config.num_classes)
    reg = model.registry
    opt = AdamW(reg, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    extra = {"size_templates": templates.tolist(), "class_names": list(class_names or [])}
    records: list[dict] = []
    epoch_losses: list[float] = []
    ckpts: list[Path] = []
    decay_epochs = set(cfg.decay_epochs())
    step = 0
    n = len(scenes)
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            if out is not None and epoch in decay_epochs and epoch > 0:
                ckpts.append(model.save(out / f"model_epoch{epoch:04d}", extra))
            opt.lr = cfg.lr_at(epoch)
            order = np.random.default_rng([cfg.seed, epoch, 7919]).permutation(n)
            ep_total = []
            for b0 in range(0, n, cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = order[b0 : b0 + cfg.batch_size]
                reg.zero_grad()
                sums = dict.fromkeys(("obj3d_center", "obj3d_size", "cls3d_obj", "cls3d_size", "obj2d_center", "obj2d_giou", "cls2d", "total"), 0.0)
                for i in batch:
                    scene = scenes[int(i)]
                    if cfg.augment:
                        scene = augment_scene(scene, augment_params_for(cfg, epoch, int(i)))
                    try:
                        res = scene_loss(model, scene, weights, templates)
                    except NonFiniteError as exc:
                        raise TrainingDivergedError(scene.scene_id, step, {"error": str(exc)}) from exc
                    if not all(math.isfinite(v) for v in res.terms.values()):
                        raise TrainingDivergedError(scene.scene_id, step, res.terms)
                    (res.total * (1.0 / len(batch))).backward()
                    for k, v in res.terms.items():
                        sums[k] += v / len(batch)
                grads = {p.name: p.tensor.grad for p in reg if p.tensor.grad is not None}
                gnorm = clip_global_norm(grads, cfg.grad_clip)
                opt.step(grads)
                rec = {"step": step, "epoch": epoch, "lr": opt.lr, **sums, "grad_norm": gnorm}
                records.append(rec)
                ep_total.append(sums["total"])
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            if ep_total:
                epoch_losses.append(float(np.mean(ep_total)))
                log.info("epoch %d lr %.2e loss %.4f", epoch, opt.lr, epoch_losses[-1])
    finally:
        if log_fh is not None:
            log_fh.close()
    reg.zero_grad()
    if out is not None:
        ckpts.append(model.save(out / "model", extra))
    return TrainResult(model, records, epoch_losses, templates, ckpts)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def detections_for(model: BrTModel, scene: Scene, score_floor: float = 0.05) -> list[Detection]:
    """One 3D detection per query: class = argmax without no-object, score = its probability."""
    pred = model.predict(scene)
    prob = _softmax(pred.logits3d.data)[:, :-1]
    cls = prob.argmax(axis=1)
    score = prob.max(axis=1)
    out = []
    for i in range(len(cls)):
        if score[i] < score_floor:
            continue
        box = Box3D(tuple(pred.center3d.data[i].tolist()), tuple(pred.size3d.data[i].tolist()), int(cls[i]))
        out.append(Detection(box, int(cls[i]), float(score[i]), scene.scene_id))
    return out


def evaluate(
    scenes: Sequence[Scene],
    model: BrTModel,
    class_names: Sequence[str] | None = None,
    thresholds=(0.25, 0.5),
    score_floor: float = 0.05,
) -> dict:
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    for s in scenes:
        dets.extend(detections_for(model, s, score_floor))
        gts.extend(GroundTruth(b, b.class_id, s.scene_id) for b in s.gt_boxes)
    names = list(class_names) if class_names else [str(i) for i in range(model.config.num_classes)]
    return metrics_report(dets, gts, names, len(scenes), thresholds)


def build_model(cfg: ModelConfig, seed: int) -> BrTModel:
    return BrTModel(cfg, seed)
