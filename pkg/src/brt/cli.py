"""``brt`` command line: synth, train, eval, project, export-attn, report.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
Every command writes a run manifest before its first output artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .geometry import GeometryConfigError, box_to_stitched_2d, stitched_image
from .model import BrTModel, ModelConfig, ModelConfigError, group_offsets
from .synth import DatasetFormatError, SynthConfig, generate_dataset, read_dataset, write_dataset
from .tensor import CheckpointError, NonFiniteError
from .tokenizer import TokenizerInputError

log = logging.getLogger("brt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = [p] if p.is_file() else sorted(x for x in p.rglob("*") if x.is_file())
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()


def write_json(path, doc, indent=1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=indent, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def apply_overrides(doc: dict, overrides: list[str] | None) -> dict:
    """Apply ``key.sub=value`` overrides; values parse as JSON, falling back to strings."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return doc


def load_config_doc(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def split_overrides(overrides: list[str] | None, prefixes: tuple[str, ...]) -> dict[str, list[str]]:
    """Route ``model.x=..``/``train.x=..`` style overrides to their config file."""
    out: dict[str, list[str]] = {p: [] for p in prefixes}
    for item in overrides or []:
        head, _, rest = item.partition(".")
        if head not in out or not rest:
            raise ConfigError(f"override {item!r} must start with one of {', '.join(p + '.' for p in prefixes)}")
        out[head].append(rest)
    return out


def _build(cls, doc: dict, what: str):
    try:
        return cls.from_json(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} config: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, command: str, args: argparse.Namespace, inputs: dict[str, str | None], seeds: dict, configs: dict | None = None) -> Path:
    doc = {
        "command": command,
        "tool_version": tool_version(),
        "seeds": seeds,
        "config_paths": {k: v for k, v in vars(args).items() if k.endswith("config") and v is not None},
        "resolved_configs": configs or {},
        "output": str(args.out),
        "overrides": list(getattr(args, "set", None) or []),
        "input_hashes": {k: sha256_file(v) for k, v in inputs.items() if v is not None},
    }
    return write_json(path, doc)


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _load_dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise OSError(f"dataset not found: {path}") from exc


def _find_scene(scenes, scene_id: str):
    for s in scenes:
        if s.scene_id == scene_id:
            return s
    raise ConfigError(f"scene {scene_id!r} not in dataset")


def _load_model(checkpoint, model_config: ModelConfig | None = None):
    try:
        return BrTModel.load(checkpoint, model_config)
    except FileNotFoundError as exc:
        raise OSError(f"checkpoint not found: {checkpoint}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = apply_overrides(load_config_doc(args.config), args.set)
    cfg = _build(SynthConfig, doc, "synth")
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    write_manifest(_manifest_path(args.out), "synth", args, {"config": args.config}, {"seed": args.seed}, {"synth": cfg.to_json()})
    scenes = generate_dataset(cfg, args.seed, args.count)
    digest = write_dataset(args.out, scenes, cfg)
    print(f"wrote {len(scenes)} scenes to {args.out} sha256={digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    ov = split_overrides(args.set, ("model", "train"))
    mdoc = apply_overrides(load_config_doc(args.model_config), ov["model"])
    tdoc = apply_overrides(load_config_doc(args.train_config), ov["train"])
    synth_cfg, scenes = _load_dataset(args.dataset)
    if synth_cfg is not None and "num_classes" not in mdoc:
        mdoc["num_classes"] = synth_cfg.num_classes
    mcfg = _build(ModelConfig, mdoc, "model")
    tcfg = _build(TrainConfig, tdoc, "train")
    if not scenes:
        raise ConfigError("training dataset is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out / "run_manifest.json", "train", args,
        {"dataset": args.dataset, "model_config": args.model_config, "train_config": args.train_config},
        {"model": args.seed, "train": tcfg.seed},
        {"model": mcfg.to_json(), "train": tcfg.to_json()},
    )
    write_json(out / "model_config.json", mcfg.to_json())
    write_json(out / "train_config.json", tcfg.to_json())
    model = BrTModel(mcfg, args.seed)
    names = synth_cfg.class_names if synth_cfg is not None else None
    res = train(scenes, model, tcfg, out, names)
    print(f"trained {len(res.log)} steps; final epoch loss {res.epoch_losses[-1]:.6f}; checkpoint {res.checkpoints[-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    mcfg = None
    if args.model_config:
        mcfg = _build(ModelConfig, apply_overrides(load_config_doc(args.model_config), args.set), "model")
    elif args.set:
        raise ConfigError("--set on eval needs --model-config")
    write_manifest(
        _manifest_path(args.out), "eval", args,
        {"dataset": args.dataset, "checkpoint": Path(args.checkpoint).with_suffix(".json"), "model_config": args.model_config},
        {}, {"thresholds": args.thresholds},
    )
    synth_cfg, scenes = _load_dataset(args.dataset)
    model, manifest = _load_model(args.checkpoint, mcfg)
    names = manifest.get("class_names") or (synth_cfg.class_names if synth_cfg else None)
    metrics = evaluate(scenes, model, names, tuple(args.thresholds), args.score_floor)
    write_json(args.out, metrics)
    keys = sorted(k for k in metrics if k.startswith("map_"))
    print(" ".join(f"{k}={metrics[k]:.4f}" for k in keys))
    return EXIT_OK


def cmd_project(args) -> int:
    from .tokenizer import build_point_patch_map, sample_seeds

    write_manifest(_manifest_path(args.out), "project", args, {"dataset": args.dataset}, {}, {"n_pnt": args.n_pnt, "patch_size": args.patch_size})
    _, scenes = _load_dataset(args.dataset)
    scene = _find_scene(scenes, args.scene_id)
    seeds = sample_seeds(scene.points, min(args.n_pnt, len(scene.points)))
    ppm = build_point_patch_map(seeds.coords, scene.views, args.patch_size)
    boxes = []
    for i, b in enumerate(scene.gt_boxes):
        res = box_to_stitched_2d(scene.views, b)
        entry = {"gt_index": i, "class_id": b.class_id, "box2d": None, "view": None}
        if res is not None:
            entry["box2d"] = [*res[0].min, *res[0].max]
            entry["view"] = res[1]
        boxes.append(entry)
    doc = {
        "scene_id": scene.scene_id,
        "patch_size": args.patch_size,
        "seed_indices": seeds.indices.tolist(),
        "seed_points": seeds.coords.tolist(),
        "uv": [[None if not np.isfinite(x) else float(x) for x in row] for row in ppm.uv],
        "patch_index": ppm.patch_index.tolist(),
        "boxes2d": boxes,
    }
    write_json(args.out, doc)
    if args.figure:
        from .geometry import Box2D
        from .plotting import plot_projection

        b2 = [Box2D(tuple(e["box2d"][:2]), tuple(e["box2d"][2:]), e["class_id"]) for e in boxes if e["box2d"]]
        plot_projection(stitched_image(scene.views), ppm.uv, b2, args.patch_size, args.figure)
    print(f"projected {len(seeds.indices)} seeds of {scene.scene_id}; {int(ppm.valid.sum())} land on a patch")
    return EXIT_OK


def parse_stages(spec: str | None, num_stages: int) -> list[int]:
    if not spec or spec == "all":
        return list(range(1, num_stages + 1))
    try:
        stages = sorted({int(s) for s in spec.split(",")})
    except ValueError as exc:
        raise ConfigError(f"--stages: {exc}") from exc
    bad = [s for s in stages if not 1 <= s <= num_stages]
    if bad:
        raise ConfigError(f"--stages {bad} outside 1..{num_stages}")
    return stages


def cmd_export_attn(args) -> int:
    write_manifest(_manifest_path(args.out), "export-attn", args, {"dataset": args.dataset, "checkpoint": Path(args.checkpoint).with_suffix(".json")}, {}, {"stages": args.stages})
    _, scenes = _load_dataset(args.dataset)
    scene = _find_scene(scenes, args.scene_id)
    model, _ = _load_model(args.checkpoint)
    stages = parse_stages(args.stages, model.config.l)
    pred = model.predict(scene)
    n_pnt, n_pat, k = pred.tokens.sizes()
    groups = group_offsets(n_pnt, n_pat, k)
    doc = {
        "scene_id": scene.scene_id,
        "groups": groups,
        "heads": model.config.h,
        "stages": {str(s): pred.attention[s - 1].tolist() for s in stages},
    }
    write_json(args.out, doc, indent=None)
    if args.figure_dir:
        from .plotting import plot_attention

        for s in stages:
            plot_attention(pred.attention[s - 1], groups, Path(args.figure_dir) / f"attention_stage{s}.png", f"stage {s}")
    print(f"exported attention for stages {stages} of {scene.scene_id}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_ap_bars, plot_loss_curves

    run = Path(args.run_dir)
    out = Path(args.out)
    write_manifest(out / "report_manifest.json", "report", args, {"train_log": run / "train_log.jsonl", "metrics": args.metrics}, {})
    try:
        records = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines() if line.strip()]
    except FileNotFoundError as exc:
        raise OSError(f"no training log in {run}") from exc
    if not records:
        raise ConfigError("training log is empty")
    written = [plot_loss_curves(records, out / "loss_curve.png", out / "loss_curve.csv")]
    if args.metrics:
        metrics = json.loads(Path(args.metrics).read_text())
        written.append(plot_ap_bars(metrics, out / "ap_per_class.png", out / "ap_per_class.csv"))
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brt", description="Bridged point/patch transformer toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int, default=0, help="parameter initialization seed")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", action="append", metavar="model.KEY=VALUE|train.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", help="expected model config; mismatching checkpoints are rejected")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.25, 0.5])
    p.add_argument("--score-floor", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="per-scene geometry report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--n-pnt", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--figure")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("export-attn", help="dump attention weights for one scene")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--stages", default="all", help="comma list of 1-based stages or 'all'")
    p.add_argument("--figure-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("report", help="loss-curve and per-class AP figures with CSV tables")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at BRT_THREADS (default 1)."""
    raw = os.environ.get("BRT_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(f"BRT_THREADS must be a positive integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (ConfigError, ModelConfigError, CheckpointError, DatasetFormatError, GeometryConfigError, TokenizerInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
