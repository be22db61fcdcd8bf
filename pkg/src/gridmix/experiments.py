"""Scaled-down experiments: gradient check, overfit run and fork multimodality."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from torch.func import vmap

from gridmix.data import Example, ScenarioConfig, build_examples, generate
from gridmix.inference import nms
from gridmix.metrics import ade, min_ade
from gridmix.mixture import realize_params
from gridmix.network import (
    Batch,
    ModelConfig,
    OptimizerConfig,
    batch_loss,
    cnn_forward,
    evaluate_loss,
    gradients,
    init_params,
    make_batch,
    predict_raw,
    raw_to_head_output,
    train,
)
from gridmix.staticmap import MapConfig, assign_latent_many, make_grid

TOY_RESOLUTION = 2.0  # m/px, gives the 32 x 32 toy raster over the default extent


def toy_setup(cfg: Optional[ModelConfig] = None):
    cfg = cfg or ModelConfig.toy()
    x0, x1, _, _ = MapConfig().extent
    mc = MapConfig(resolution=(x1 - x0) / cfg.raster_size)
    return cfg, mc, make_grid(mc.extent, cfg.grid_n)


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradcheckReport:
    step: float
    points: int
    per_param: Dict[str, float]  # worst relative error over points, per parameter tensor
    worst_elementwise: float  # worst per-coordinate error, |a - b| / max(|a|, |b|, floor)
    worst: float
    seconds: float


def _pin_pools(batch: Batch, params, cfg: ModelConfig):
    flat = batch.rasters.reshape((-1,) + tuple(batch.rasters.shape[2:]))
    with torch.no_grad():
        _, idx = cnn_forward(flat, params, cfg, return_indices=True)
    return idx


def _central_differences(params, name, batch, cfg, grid, pools, step, chunk=512):
    W = params[name]
    flat = W.reshape(-1)
    m = flat.numel()

    def loss_at(w):
        c, r = batch_loss({**params, name: w}, batch, cfg, grid, 0.0, pools)
        return c + r

    fd = torch.empty(m, dtype=W.dtype)
    for s in range(0, m, chunk):
        idx = torch.arange(s, min(m, s + chunk))
        rows = torch.arange(len(idx))
        plus = flat.repeat(len(idx), 1)
        plus[rows, idx] += step
        minus = flat.repeat(len(idx), 1)
        minus[rows, idx] -= step
        f_plus = vmap(loss_at)(plus.reshape((-1,) + tuple(W.shape)))
        f_minus = vmap(loss_at)(minus.reshape((-1,) + tuple(W.shape)))
        fd[idx] = (f_plus - f_minus) / (2 * step)
    return fd


def gradcheck(
    cfg: Optional[ModelConfig] = None,
    n_points: int = 5,
    step: float = 1e-4,
    seq_len: int = 6,
    batch_size: int = 2,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Autograd gradients against central differences for every parameter coordinate.

    Runs in float64 on synthetic sequences with freshly drawn parameters at
    each point. Max-pool winners are pinned to those of the unperturbed point,
    so the differences measure the same smooth piece the gradient belongs to.
    The per-parameter error is ||g - fd|| / max(||g||, ||fd||) over the tensor.
    """
    cfg, mc, grid = toy_setup(cfg or ModelConfig.toy(dtype="float64"))
    if cfg.dtype != "float64":
        cfg = ModelConfig(**{**asdict(cfg), "dtype": "float64"})
    t_start = time.perf_counter()
    ds = generate(ScenarioConfig(n_tracks=max(8, batch_size * n_points), seed=seed))
    examples = build_examples(ds, cfg.horizon, grid, mc, cfg.t_max)
    per_param: Dict[str, float] = {}
    worst_elem = 0.0
    for point in range(n_points):
        rng = np.random.default_rng([seed, point])
        params = init_params(cfg, seed=int(rng.integers(2**31)))
        # nonzero biases so every term of every gradient is exercised
        params = {
            k: v + torch.as_tensor(0.1 * rng.standard_normal(tuple(v.shape)), dtype=v.dtype) if k.endswith(".b") else v
            for k, v in params.items()
        }
        pick = rng.choice(len(examples), batch_size, replace=False)
        full = make_batch([examples[i] for i in pick], torch.float64)
        t0 = int(rng.integers(0, cfg.t_max - seq_len + 1))
        sl = slice(t0, t0 + seq_len)
        batch = Batch(full.features[:, sl], full.rasters[:, sl], full.targets[:, sl], full.classes[:, sl])
        pools = _pin_pools(batch, params, cfg)
        _, grads = gradients(params, batch, cfg, grid)
        for name in params:
            a = grads[name].reshape(-1)
            b = _central_differences(params, name, batch, cfg, grid, pools, step)
            denom = max(a.norm().item(), b.norm().item())
            rel = (a - b).norm().item() / denom if denom > 0 else 0.0
            per_param[name] = max(per_param.get(name, 0.0), rel)
            elem = (a - b).abs() / torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
            worst_elem = max(worst_elem, elem.max().item())
    return GradcheckReport(step, n_points, per_param, worst_elem, max(per_param.values()),
                           time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Overfit run


@dataclass
class OverfitReport:
    initial_loss: float
    final_loss: float
    accuracy: float
    epochs: int
    seconds: float
    curve: List[dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def class_accuracy(raw: np.ndarray, examples: List[Example]) -> float:
    """Top-1 latent class accuracy over all in-extent steps."""
    classes = np.stack([e.classes for e in examples])
    mask = classes >= 0
    return float((raw[..., 0].argmax(-1)[mask] == classes[mask]).mean())


def run_overfit(
    n_sequences: int = 64,
    epochs: int = 200,
    learning_rate: float = 3e-3,
    batch_size: int = 8,
    seed: int = 0,
    on_epoch=None,
) -> OverfitReport:
    """Train the toy model on a handful of sequences and measure how well it memorizes them."""
    cfg, mc, grid = toy_setup(ModelConfig.toy(seed=seed))
    t_start = time.perf_counter()
    ds = generate(ScenarioConfig(n_tracks=n_sequences, seed=seed))
    examples = build_examples(ds, cfg.horizon, grid, mc, cfg.t_max)
    params0 = init_params(cfg)
    initial = evaluate_loss(params0, examples, cfg, grid).total
    opt = OptimizerConfig(learning_rate=learning_rate, epochs=epochs, batch_size=batch_size)
    state = train(examples, cfg, grid, opt, on_epoch=on_epoch)
    final = evaluate_loss(state.params, examples, cfg, grid).total
    acc = class_accuracy(predict_raw(state.params, examples, cfg), examples)
    return OverfitReport(initial, final, acc, epochs, time.perf_counter() - t_start, state.curve)


# ---------------------------------------------------------------------------
# Fork multimodality


@dataclass
class MultimodalReport:
    branch_hit_rate: float  # share of held-out forks whose top-2 land in both branch cells
    min_ade: float
    ade: float
    cell_diagonal: float
    n_test: int
    seconds: float


def branch_cells(example: Example, grid) -> tuple:
    """Cells of the driven branch and of its mirror image at the decision step."""
    t = int(example.meta["fork_index"])
    x, y = example.targets[t]
    cells = assign_latent_many(np.array([[x, y], [x, -y]]), grid)
    return int(cells[0]), int(cells[1]), t


def run_multimodal(
    n_tracks: int = 2000,
    epochs: int = 25,
    learning_rate: float = 3e-3,
    batch_size: int = 16,
    k: int = 3,
    seed: int = 0,
    on_epoch=None,
) -> MultimodalReport:
    """Train on symmetric Y-forks and check that both branches survive NMS at the fork."""
    cfg, mc, grid = toy_setup(ModelConfig.toy(seed=seed))
    t_start = time.perf_counter()
    ds = generate(ScenarioConfig(n_tracks=n_tracks, fraction_straight=0.0, fork_probability=1.0, seed=seed))
    train_ex = build_examples(ds, cfg.horizon, grid, mc, cfg.t_max, split="train")
    test_ex = build_examples(ds, cfg.horizon, grid, mc, cfg.t_max, split="test")
    opt = OptimizerConfig(learning_rate=learning_rate, epochs=epochs, batch_size=batch_size)
    state = train(train_ex, cfg, grid, opt, on_epoch=on_epoch)

    raw = predict_raw(state.params, test_ex, cfg)
    hits = 0
    preds = np.full(raw.shape[:2] + (k, 2), np.nan)
    for i, ex in enumerate(test_ex):
        for t in range(raw.shape[1]):
            kept = nms(realize_params(raw_to_head_output(raw[i, t]), grid))[:k]
            preds[i, t, : len(kept)] = [p.mu for p in kept]
        a, b, t = branch_cells(ex, grid)
        top2 = assign_latent_many(preds[i, t, :2], grid)
        if a != b and a >= 0 and b >= 0 and set(top2.tolist()) == {a, b}:
            hits += 1
    targets = np.stack([e.targets for e in test_ex])
    valid = np.stack([e.classes for e in test_ex]) >= 0
    cw, ch = grid.cell_size
    return MultimodalReport(
        hits / len(test_ex),
        min_ade(preds, targets, k=k, valid=valid),
        ade(preds, targets, valid=valid),
        math.hypot(cw, ch),
        len(test_ex),
        time.perf_counter() - t_start,
    )
