"""Command-line entry point: datagen, train, eval, heatmap, noise."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from gridmix.config import ConfigError, RunConfig, apply_overrides, load_config
from gridmix.data import (
    FitFailure,
    build_examples,
    estimate_noise,
    generate,
    load_dataset,
    load_tracks,
    resample_100ms,
    save_dataset,
)
from gridmix.features import HorizonOutOfRange, compute_features, vcs_frame_at
from gridmix.fsutil import atomic_write
from gridmix.inference import nms, prediction_array, write_predictions_csv
from gridmix.metrics import EmptyEvaluation, evaluate
from gridmix.mixture import heatmap, realize_params, write_heatmap
from gridmix.network import (
    NonFiniteGradient,
    ShapeMismatch,
    TrainState,
    forward,
    init_params,
    load_checkpoint,
    predict_raw,
    raw_to_head_output,
    save_checkpoint,
    train,
)
from gridmix.staticmap import ScenarioGeometry, rasterize

log = logging.getLogger("gridmix")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _model_from_checkpoint(cfg: RunConfig, path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    return replace(cfg, model=state.config), state


def cmd_datagen(cfg: RunConfig, args) -> int:
    if args.n_tracks is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, n_tracks=args.n_tracks))
    cfg.validate()
    ds = generate(cfg.scenario)
    manifest = save_dataset(args.out, ds)
    labels = [it.label for it in ds.items]
    counts = {name: labels.count(name) for name in ("straight", "turn", "fork")}
    print(f"wrote {len(ds.items)} tracks ({len(ds.train)} train, {len(ds.test)} test) to {manifest}")
    print("labels: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    opt = cfg.optimizer
    if args.epochs is not None:
        opt = replace(opt, epochs=args.epochs)
    if args.lr is not None:
        opt = replace(opt, learning_rate=args.lr)
    if args.batch_size is not None:
        opt = replace(opt, batch_size=args.batch_size)
    cfg = replace(cfg, optimizer=opt)
    state = None
    if args.resume:
        cfg, state = _model_from_checkpoint(cfg, args.resume)
    cfg.validate()
    ds = load_dataset(args.dataset or cfg.paths.dataset)
    examples = build_examples(ds, cfg.model.horizon, cfg.grid, cfg.map_config, cfg.model.t_max, split="train")
    if not examples:
        raise ValueError("the dataset has no training sequences")
    if state is None:
        state = TrainState(cfg.model, init_params(cfg.model))
    state = train(examples, cfg.model, cfg.grid, cfg.optimizer, cfg.gamma, state)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint.npz", state)
    rows = ["epoch,classification,regression,total"]
    rows += [f"{r['epoch']},{r['classification']!r},{r['regression']!r},{r['total']!r}" for r in state.curve]
    atomic_write(out / "loss.csv", "\n".join(rows) + "\n")
    atomic_write(out / "config.json", cfg.to_json() + "\n")
    last = state.curve[-1] if state.curve else None
    if last:
        print(f"epoch {last['epoch']}: classification {last['classification']:.4f} "
              f"regression {last['regression']:.4f} total {last['total']:.4f}")
    print(f"wrote {out / 'checkpoint.npz'} and {out / 'loss.csv'}")
    return 0


def _nms_sets(raw_steps, cfg: RunConfig):
    return [nms(realize_params(raw_to_head_output(r), cfg.grid), cfg.nms.alpha, cfg.nms.iou_threshold)
            for r in raw_steps]


def cmd_eval(cfg: RunConfig, args) -> int:
    cfg, state = _model_from_checkpoint(cfg, args.checkpoint or cfg.paths.checkpoint)
    metrics = cfg.metrics
    if args.k is not None:
        metrics = replace(metrics, k=args.k)
    if args.literal_fde:
        metrics = replace(metrics, literal_fde=True)
    cfg = replace(cfg, metrics=metrics)
    cfg.validate()
    ds = load_dataset(args.dataset or cfg.paths.dataset)
    examples = build_examples(ds, cfg.model.horizon, cfg.grid, cfg.map_config, cfg.model.t_max, split="test")
    if not examples:
        raise EmptyEvaluation("the dataset has no test sequences")
    raw = predict_raw(state.params, examples, cfg.model)
    k = metrics.k
    preds = np.stack([prediction_array(_nms_sets(seq, cfg), k) for seq in raw])
    targets = np.stack([e.targets for e in examples])
    valid = np.stack([e.classes for e in examples]) >= 0
    sigma_v = None
    if args.sigma_v == "estimate":
        sigma_v = estimate_noise([it.raw for it in ds.split("test")], cfg.ransac, cfg.scenario.seed).sigma_v
    elif args.sigma_v is not None:
        sigma_v = float(args.sigma_v)
    report = evaluate(preds, targets, valid, k, metrics.first_step, sigma_v, metrics.literal_fde)
    text = report.to_json()
    atomic_write(Path(args.out) / "eval.json", text + "\n")
    print(text)
    return 0


def cmd_heatmap(cfg: RunConfig, args) -> int:
    cfg, state = _model_from_checkpoint(cfg, args.checkpoint or cfg.paths.checkpoint)
    cfg.validate()
    tracks = load_tracks(args.tracks)
    tid = args.track_id or next(iter(tracks))
    if tid not in tracks:
        raise KeyError(f"track {tid!r} not in {args.tracks}")
    track = resample_100ms(tracks[tid])
    if not 0 <= args.t < len(track):
        raise HorizonOutOfRange(f"step {args.t} outside the {len(track)} resampled samples of track {tid}")
    geometry = ScenarioGeometry()
    if args.geometry:
        geometry = ScenarioGeometry.from_json(json.loads(Path(args.geometry).read_text(encoding="utf-8")))
    mc = cfg.map_config
    feats = compute_features(track, args.t)
    rasters = np.stack([rasterize(geometry, vcs_frame_at(track, s), mc).cells for s in range(args.t + 1)])
    dtype = cfg.model.torch_dtype
    with torch.no_grad():
        raw = forward(torch.as_tensor(feats[None], dtype=dtype), torch.as_tensor(rasters[None], dtype=dtype),
                      state.params, cfg.model)
    params = realize_params(raw_to_head_output(raw[0, -1].double().numpy()), cfg.grid)
    resolution = args.resolution or mc.resolution
    field = heatmap(params, cfg.extent, resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pgm, csv = write_heatmap(field, out / "heatmap", cfg.extent, resolution)
    preds = nms(params, cfg.nms.alpha, cfg.nms.iou_threshold)
    write_predictions_csv(out / "predictions.csv", preds)
    mass = float(field.sum()) * resolution * resolution
    print(f"track {tid} step {args.t}: {len(preds)} predictions, heatmap mass {mass:.4f}")
    print(f"wrote {pgm}, {csv}, {out / 'predictions.csv'}")
    return 0


def cmd_noise(cfg: RunConfig, args) -> int:
    tracks = load_tracks(args.tracks)
    est = estimate_noise(list(tracks.values()), cfg.ransac, cfg.scenario.seed)
    text = est.to_json()
    atomic_write(Path(args.out) / "noise.json", text + "\n")
    print(json.dumps({"sigma_v": est.sigma_v, "inlier_fraction": est.inlier_fraction, "tracks": len(tracks)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridmix", description=__doc__)
    p.add_argument("--config", help="JSON (or TOML on Python 3.11+) run configuration")
    p.add_argument("--seed", type=int, help="seed for data generation and model initialization")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set optimizer.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic dataset")
    d.add_argument("--n-tracks", type=int)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train a model and write checkpoint.npz and loss.csv")
    t.add_argument("--dataset", help="dataset directory or manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ADE/minADE/FDE on the test split")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--k", type=int)
    e.add_argument("--sigma-v", help="noise std in meters, or 'estimate' to fit it on the test tracks")
    e.add_argument("--literal-fde", action="store_true", help="use the two-term FDE expression")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="density heatmap and predictions for one track at one step")
    h.add_argument("tracks", help="track CSV")
    h.add_argument("--t", type=int, required=True, help="0-based step on the 100 ms grid")
    h.add_argument("--checkpoint")
    h.add_argument("--track-id")
    h.add_argument("--geometry", help="scenario geometry JSON")
    h.add_argument("--resolution", type=float, help="heatmap meters per pixel")
    h.set_defaults(func=cmd_heatmap)

    n = sub.add_parser("noise", help="estimate measurement noise from raw tracks")
    n.add_argument("tracks", help="track CSV")
    n.set_defaults(func=cmd_noise)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve_config(args)
        cfg.validate()
        return args.func(cfg, args)
    except (ConfigError, ShapeMismatch) as e:
        print(f"gridmix {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, IndexError, FitFailure, NonFiniteGradient) as e:
        # ParseError, EmptyEvaluation, NoiseExceedsMetric and HorizonOutOfRange land here
        kind = type(e).__name__
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"gridmix {args.command}: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
