"""Command-line entry point: synth, train, eval, predict-map, gradcheck.

JSON payloads go to stdout, human-readable summaries to stderr. Exit codes:
2 argument/config errors, 3 I/O errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as hsi
from .errors import ConfigError, IngestError, NumericError, PdmlError
from .grad import finite_diff_check
from .losses import LossConfig, make_loss_fn
from .metrics import default_palette, dump_embeddings, evaluate, predict_map, render_map
from .model import BackboneConfig, init_params
from .train import TrainConfig, load_result, save_result, train, write_history

RUN_KEYS = {"ratios", "standardize", "cube", "labels", "out"}
LOSS_KEYS = {f.name for f in dataclasses.fields(LossConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def parse_run_config(obj: dict) -> tuple[TrainConfig, dict]:
    """Split a run-config document into a TrainConfig and run-level settings.

    Every key is optional; unknown keys are rejected.
    """
    if not isinstance(obj, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(obj) - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    loss = obj.get("loss", {})
    if not isinstance(loss, dict):
        raise ConfigError("'loss' must be an object")
    bad = set(loss) - LOSS_KEYS
    if bad:
        raise ConfigError(f"unknown loss keys: {sorted(bad)}")
    train_fields = {k: v for k, v in obj.items() if k in TRAIN_KEYS and k != "loss"}
    try:
        cfg = TrainConfig(loss=LossConfig(**loss), **train_fields)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    run = {"ratios": tuple(obj.get("ratios", (0.2, 0.1, 0.7))),
           "standardize": bool(obj.get("standardize", True))}
    for k in ("cube", "labels", "out"):
        if k in obj:
            run[k] = obj[k]
    return cfg, run


def read_run_config(path) -> tuple[TrainConfig, dict]:
    if path is None:
        return parse_run_config({})
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IngestError(f"cannot read config {path}: {e}") from e
    try:
        obj = json.loads(text)
    except ValueError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse_run_config(obj)


def resolve_seed(flag, file_seed: int) -> int:
    """Flag beats the PDML_SEED environment variable, which beats the file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("PDML_SEED")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"PDML_SEED must be an integer, got {env!r}") from e
    return file_seed


def _prepare_cube(path, standardize: bool) -> hsi.HsiCube:
    cube = hsi.load_cube(path)
    return hsi.standardize(cube) if standardize else cube


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    spec = hsi.SynthSpec(n_classes=args.classes, height=args.size[0], width=args.size[1],
                         bands=args.bands, grid=args.grid, seed=resolve_seed(args.seed, 0),
                         noise=args.noise, mixing=args.mixing)
    paths = hsi.write_synthetic(spec, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_train(args) -> int:
    cfg, run = read_run_config(args.config)
    cfg.seed = resolve_seed(args.seed, cfg.seed)
    cube_path = args.cube or run.get("cube")
    labels_path = args.labels or run.get("labels")
    out = Path(args.out or run.get("out") or "run")
    if cube_path is None or labels_path is None:
        raise ConfigError("train needs --cube and --labels")
    cube = _prepare_cube(cube_path, run["standardize"])
    labels = hsi.load_labels(labels_path)
    if labels.shape != (cube.height, cube.width):
        raise ConfigError(f"label map {labels.shape} does not match cube "
                          f"{(cube.height, cube.width)}")
    split = hsi.stratified_split(labels, run["ratios"], cfg.seed)
    result = train(cube, labels, split, cfg, record_time=args.record_time)
    out.mkdir(parents=True, exist_ok=True)
    save_result(out / "checkpoint.pdc", result, cfg,
                {"standardize": run["standardize"], "bands": cube.bands,
                 "n_classes": labels.n_classes})
    write_history(out / "history.jsonl", result.history)
    (out / "split.json").write_text(split.to_json() + "\n")
    for h in result.history:
        print(f"epoch {h['epoch']:4d}  loss {h['train_loss']:.5f}  val_oa {h['val_oa']}",
              file=sys.stderr)
    print(json.dumps({"checkpoint": str(out / "checkpoint.pdc"),
                      "best_epoch": result.best_epoch, "best_val_oa": result.best_val_oa}))
    return 0


def cmd_eval(args) -> int:
    result, cfg, meta = load_result(args.checkpoint)
    split_path = Path(args.split_file) if args.split_file else (
        Path(args.checkpoint).parent / "split.json")
    try:
        split = hsi.DatasetSplit.from_json(split_path.read_text())
    except OSError as e:
        raise IngestError(f"cannot read split record {split_path}: {e}") from e
    cube = _prepare_cube(args.cube, meta.get("standardize", True))
    labels = hsi.load_labels(args.labels)
    coords = split.part(args.split)
    cm, m = evaluate(result.params, cube, labels, coords, cfg.patch_size)
    if args.embeddings:
        dump_embeddings(result.params, cube, labels, coords, cfg.patch_size, args.embeddings)
    payload = m.to_dict()
    payload["confusion"] = cm.tolist()
    payload["split"] = args.split
    payload["n"] = int(cm.sum())
    print(f"OA {m.oa:.4f}  AA {m.aa:.4f}  kappa {m.kappa:.4f}  on {cm.sum()} pixels",
          file=sys.stderr)
    print(json.dumps(payload))
    return 0


def cmd_predict_map(args) -> int:
    result, cfg, meta = load_result(args.checkpoint)
    cube = _prepare_cube(args.cube, meta.get("standardize", True))
    pred = predict_map(result.params, cube, cfg.patch_size)
    n_classes = result.params["cls.b"].shape[0]
    try:
        Path(args.out).write_bytes(render_map(pred, default_palette(n_classes)))
    except OSError as e:
        raise IngestError(f"cannot write {args.out}: {e}") from e
    print(json.dumps({"map": str(args.out), "height": cube.height, "width": cube.width}))
    return 0


def cmd_gradcheck(args) -> int:
    cfg, _ = read_run_config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    rng = np.random.default_rng(seed)
    bcfg = BackboneConfig(d=args.bands, n_classes=3, s=cfg.patch_size, c1=cfg.c1,
                          c2=cfg.c2, r=cfg.r, lap_bias=cfg.lap_bias)
    params = init_params(bcfg, seed)
    batch = hsi.PatchBatch(
        patches=rng.standard_normal((2, cfg.patch_size, cfg.patch_size, args.bands)),
        center_labels=np.array([1, 2]),
        coords=np.zeros((2, 2), dtype=np.int64),
    )
    report = finite_diff_check(make_loss_fn(cfg.loss), params, batch, [seed, 99],
                               eps=args.eps, coords_per_tag=args.coords)
    ok = report.max_rel_error < 1e-4
    print(f"max relative error {report.max_rel_error:.3e} ({'ok' if ok else 'FAIL'})",
          file=sys.stderr)
    print(json.dumps(report.to_dict()))
    return 0 if ok else NumericError.exit_code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdml", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cube, label map and spec sidecar")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--mixing", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--grid", type=_size, default=(4, 4))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--record-time", action="store_true",
                   help="add wall_ms to history lines (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a trained model on a recorded split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--split-file")
    p.add_argument("--embeddings", help="also write center-pixel embeddings as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-map", help="render a full-raster classification map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--config")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--coords", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except PdmlError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return IngestError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
