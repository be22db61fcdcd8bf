"""Embedding + two-layer LSTM + map CNN + dense head, and its training loop.

The model is written functionally: parameters live in a flat, ordered dict of
tensors so they can be checkpointed as plain arrays and perturbed one
coordinate at a time for gradient checks. Gradients come from torch autograd.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from gridmix.data import Example
from gridmix.fsutil import atomic_write
from gridmix.mixture import LOG_2PI, LOG_SIGMA_CLAMP, PHI_FLOOR, LossBreakdown, MixtureParams, RawHeadOutput
from gridmix.staticmap import GridSpec

log = logging.getLogger(__name__)

Params = Dict[str, torch.Tensor]
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    embedding_sizes: tuple = (8, 16)
    rnn_hidden_sizes: tuple = (256, 150)
    cnn_channels: tuple = (2, 4, 8, 8, 16, 16)
    head_sizes: tuple = (256, 128)  # hidden dense layers; the output layer is grid_n**2 * 5
    grid_n: int = 10
    raster_size: int = 128
    horizon: int = 20
    t_max: int = 30
    feature_scale: tuple = (1.0, 1.0, 0.1, 10.0)  # multiplies (dx, dy, v, h) before embedding
    dtype: str = "float32"
    seed: int = 0

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(
            rnn_hidden_sizes=(32, 24),
            cnn_channels=(2, 4, 4, 8, 8, 8),
            head_sizes=(64, 32),
            grid_n=4,
            raster_size=32,
        )
        base.update(kw)
        return cls(**base)

    @property
    def n_conv(self) -> int:
        return len(self.cnn_channels) - 1

    @property
    def cnn_flatten(self) -> int:
        side = self.raster_size >> self.n_conv
        return side * side * self.cnn_channels[-1]

    @property
    def head_input(self) -> int:
        return self.cnn_flatten + self.rnn_hidden_sizes[-1]

    @property
    def head_output(self) -> int:
        return self.grid_n * self.grid_n * 5

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> None:
        if self.raster_size % (1 << self.n_conv):
            raise ShapeMismatch(f"raster {self.raster_size} not divisible by 2**{self.n_conv}")
        if self.cnn_channels[0] != 2:
            raise ShapeMismatch("the map CNN takes 2 input channels")
        if self.grid_n < 1 or self.horizon < 1 or self.t_max < 1:
            raise ValueError("grid_n, horizon and t_max must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    prev = 4
    for i, n in enumerate(cfg.embedding_sizes):
        shapes[f"emb{i}.W"] = (n, prev)
        shapes[f"emb{i}.b"] = (n,)
        prev = n
    for i, h in enumerate(cfg.rnn_hidden_sizes):
        shapes[f"lstm{i}.W_ih"] = (4 * h, prev)
        shapes[f"lstm{i}.W_hh"] = (4 * h, h)
        shapes[f"lstm{i}.b"] = (4 * h,)
        prev = h
    for i, (cin, cout) in enumerate(zip(cfg.cnn_channels[:-1], cfg.cnn_channels[1:])):
        shapes[f"conv{i}.W"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.b"] = (cout,)
    prev = cfg.head_input
    for i, n in enumerate(tuple(cfg.head_sizes) + (cfg.head_output,)):
        shapes[f"head{i}.W"] = (n, prev)
        shapes[f"head{i}.b"] = (n,)
        prev = n
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> Params:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    out: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        out[name] = torch.tensor(arr, dtype=cfg.torch_dtype)
    return out


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([p.detach().cpu().numpy().ravel().astype(np.float64) for p in params.values()])


def unflatten(vec, like: Params) -> Params:
    need = sum(p.numel() for p in like.values())
    if len(vec) != need:
        raise ShapeMismatch(f"vector has {len(vec)} entries, parameters need {need}")
    out, pos = {}, 0
    for name, p in like.items():
        n = p.numel()
        out[name] = torch.as_tensor(np.asarray(vec[pos : pos + n]), dtype=p.dtype).reshape(p.shape)
        pos += n
    return out


# ---------------------------------------------------------------------------
# Forward pass


def _take_pool(h: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """2x2 max pool that reads the window winners from `idx` instead of comparing."""
    return h.flatten(-2).gather(-1, idx.flatten(-2)).reshape(idx.shape)


def cnn_forward(
    rasters: torch.Tensor,
    params: Params,
    cfg: ModelConfig,
    pool_indices: Optional[List[torch.Tensor]] = None,
    return_indices: bool = False,
):
    """(N, H, W, 2) rasters -> (N, cnn_flatten) features.

    `pool_indices` (as returned with return_indices=True) pins every max-pool
    window to a fixed winner, which turns the network into the smooth piece
    active at the point the indices came from. Gradient checks use this.
    """
    if rasters.shape[-3:] != (cfg.raster_size, cfg.raster_size, 2):
        raise ShapeMismatch(f"expected (..., {cfg.raster_size}, {cfg.raster_size}, 2), got {tuple(rasters.shape)}")
    h = rasters.permute(0, 3, 1, 2)
    winners = []
    for i in range(cfg.n_conv):
        h = torch.tanh(F.conv2d(h, params[f"conv{i}.W"], params[f"conv{i}.b"], padding=1))
        if pool_indices is None:
            h, idx = F.max_pool2d(h, 2, return_indices=True)
            winners.append(idx)
        else:
            h = _take_pool(h, pool_indices[i])
    # flatten in (row, col, channel) order
    out = h.permute(0, 2, 3, 1).reshape(h.shape[0], -1)
    return (out, winners) if return_indices else out


def embed(features: torch.Tensor, params: Params, cfg: ModelConfig) -> torch.Tensor:
    h = features * torch.as_tensor(cfg.feature_scale, dtype=features.dtype)
    for i in range(len(cfg.embedding_sizes)):
        h = torch.tanh(F.linear(h, params[f"emb{i}.W"], params[f"emb{i}.b"]))
    return h


def rnn_forward(inputs: torch.Tensor, params: Params, cfg: ModelConfig) -> torch.Tensor:
    """Stacked LSTM over (B, T, D) inputs; returns last-layer hidden states (B, T, H_last)."""
    seq = inputs
    for layer, hid in enumerate(cfg.rnn_hidden_sizes):
        W_ih, W_hh, b = params[f"lstm{layer}.W_ih"], params[f"lstm{layer}.W_hh"], params[f"lstm{layer}.b"]
        bsz = seq.shape[0]
        h = seq.new_zeros(bsz, hid)
        c = seq.new_zeros(bsz, hid)
        x_proj = F.linear(seq, W_ih, b)
        outs = []
        for t in range(seq.shape[1]):
            gates = x_proj[:, t] + h @ W_hh.T
            i, f, g, o = gates.chunk(4, dim=-1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
            outs.append(h)
        seq = torch.stack(outs, dim=1)
    return seq


def head_forward(x: torch.Tensor, params: Params, cfg: ModelConfig) -> torch.Tensor:
    n_layers = len(cfg.head_sizes) + 1
    for i in range(n_layers):
        x = F.linear(x, params[f"head{i}.W"], params[f"head{i}.b"])
        if i < n_layers - 1:
            x = torch.tanh(x)
    return x


def forward(features: torch.Tensor, rasters: torch.Tensor, params: Params, cfg: ModelConfig,
            pool_indices: Optional[List[torch.Tensor]] = None) -> torch.Tensor:
    """Raw head maps for every step.

    Args:
        features: (B, T, 4).
        rasters: (B, T, H, W, 2).
        pool_indices: optional pinned max-pool winners, see cnn_forward.

    Returns:
        (B, T, k, 5) with channels (phi logit, dmu_x, log sigma_x, dmu_y, log sigma_y)
        and k = grid_n**2 in row-major cell order.
    """
    if features.shape[:2] != rasters.shape[:2]:
        raise ShapeMismatch(f"features {tuple(features.shape)} vs rasters {tuple(rasters.shape)}")
    bsz, steps = features.shape[:2]
    flat = rasters.reshape((bsz * steps,) + tuple(rasters.shape[2:]))
    map_feat = cnn_forward(flat, params, cfg, pool_indices)
    dyn = rnn_forward(embed(features, params, cfg), params, cfg)
    x = torch.cat([map_feat.reshape(bsz, steps, -1), dyn], dim=-1)
    out = head_forward(x, params, cfg)
    return out.reshape(bsz, steps, cfg.grid_n * cfg.grid_n, 5)


# ---------------------------------------------------------------------------
# Loss


def step_losses(raw: torch.Tensor, targets: torch.Tensor, classes: torch.Tensor, centers: torch.Tensor, gamma: float):
    """Per-step (classification, regression) losses, zero where classes == -1.

    Shapes: raw (..., k, 5), targets (..., 2), classes (...).
    """
    mask = classes >= 0
    z = classes.clamp(min=0).unsqueeze(-1)
    logp = torch.log_softmax(raw[..., 0], dim=-1)
    lp = logp.gather(-1, z).squeeze(-1)
    lp_floor = lp.clamp(min=math.log(PHI_FLOOR))
    if gamma == 0:
        cls = -lp_floor
    else:
        cls = -((1.0 - lp.exp()) ** gamma) * lp_floor
    sel = raw.gather(-2, z.unsqueeze(-1).expand(*z.shape[:-1], 1, 5)).squeeze(-2)
    cz = centers[z.squeeze(-1)]
    lo, hi = LOG_SIGMA_CLAMP
    s_x = sel[..., 2].clamp(lo, hi)
    s_y = sel[..., 4].clamp(lo, hi)
    ex = (targets[..., 0] - sel[..., 1] - cz[..., 0]) * torch.exp(-s_x)
    ey = (targets[..., 1] - sel[..., 3] - cz[..., 1]) * torch.exp(-s_y)
    reg = 0.5 * (ex * ex + ey * ey) + s_x + s_y + LOG_2PI
    zero = torch.zeros((), dtype=raw.dtype)
    return torch.where(mask, cls, zero), torch.where(mask, reg, zero)


def sequence_loss(raw, targets, classes, grid: GridSpec, gamma: float = 0.0):
    """Per-sequence loss sums over unmasked steps: tensors (classification, regression) of shape (B,)."""
    centers = torch.as_tensor(grid.centers, dtype=raw.dtype)
    cls, reg = step_losses(raw, targets, classes, centers, gamma)
    return cls.sum(dim=-1), reg.sum(dim=-1)


def raw_to_head_output(raw_step: np.ndarray) -> RawHeadOutput:
    return RawHeadOutput.from_maps(np.asarray(raw_step, dtype=np.float64))


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    features: torch.Tensor
    rasters: torch.Tensor
    targets: torch.Tensor
    classes: torch.Tensor


def make_batch(examples: Sequence[Example], dtype: torch.dtype = torch.float32) -> Batch:
    return Batch(
        torch.as_tensor(np.stack([e.features for e in examples]), dtype=dtype),
        torch.as_tensor(np.stack([e.rasters() for e in examples]), dtype=dtype),
        torch.as_tensor(np.stack([e.targets for e in examples]), dtype=dtype),
        torch.as_tensor(np.stack([e.classes for e in examples]), dtype=torch.long),
    )


def batch_loss(params: Params, batch: Batch, cfg: ModelConfig, grid: GridSpec, gamma: float,
               pool_indices: Optional[List[torch.Tensor]] = None):
    """Mean over the batch of the per-sequence (classification, regression) sums."""
    raw = forward(batch.features, batch.rasters, params, cfg, pool_indices)
    cls, reg = sequence_loss(raw, batch.targets, batch.classes, grid, gamma)
    return cls.mean(), reg.mean()


def gradients(params: Params, batch: Batch, cfg: ModelConfig, grid: GridSpec, gamma: float = 0.0):
    """Loss breakdown and the gradient of the mean total loss for every parameter."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    cls, reg = batch_loss(leaves, batch, cfg, grid, gamma)
    total = cls + reg
    grads = torch.autograd.grad(total, list(leaves.values()))
    out = dict(zip(leaves.keys(), grads))
    bad = [k for k, g in out.items() if not torch.isfinite(g).all()]
    if bad or not torch.isfinite(total):
        raise NonFiniteGradient(f"non-finite loss/gradient (loss={total.item()}, params={bad[:5]})")
    return LossBreakdown(cls.item(), reg.item()), out


# ---------------------------------------------------------------------------
# Training


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 16
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainState:
    config: ModelConfig
    params: Params
    epoch: int = 0
    adam: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    adam_step: int = 0
    curve: List[dict] = field(default_factory=list)


def evaluate_loss(params: Params, examples: Sequence[Example], cfg: ModelConfig, grid: GridSpec,
                  gamma: float = 0.0, batch_size: int = 64) -> LossBreakdown:
    """Mean per-sequence loss over `examples` without gradients."""
    cls_sum, reg_sum = 0.0, 0.0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            b = make_batch(examples[i : i + batch_size], cfg.torch_dtype)
            raw = forward(b.features, b.rasters, params, cfg)
            c, r = sequence_loss(raw, b.targets, b.classes, grid, gamma)
            cls_sum += float(c.double().sum())
            reg_sum += float(r.double().sum())
    n = len(examples)
    return LossBreakdown(cls_sum / n, reg_sum / n)


def train(
    examples: Sequence[Example],
    cfg: ModelConfig,
    grid: GridSpec,
    opt: OptimizerConfig = OptimizerConfig(),
    gamma: float = 0.0,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Mini-batch Adam with gradient-norm clipping.

    Batch order for epoch e comes from a generator seeded with (seed, e), so a
    resumed run replays the same order as an uninterrupted one.
    """
    if not examples:
        raise ValueError("training needs at least one example")
    if state is None:
        state = TrainState(cfg, init_params(cfg))
    params = {k: v.detach().clone().requires_grad_(True) for k, v in state.params.items()}
    optim = torch.optim.Adam(params.values(), lr=opt.learning_rate, betas=(opt.beta1, opt.beta2))
    if state.adam:
        for name, p in params.items():
            st = state.adam[name]
            optim.state[p] = {
                "step": torch.tensor(float(state.adam_step)),
                "exp_avg": torch.as_tensor(st["exp_avg"], dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(st["exp_avg_sq"], dtype=p.dtype).clone(),
            }
    n = len(examples)
    target_epoch = state.epoch + opt.epochs
    while state.epoch < target_epoch:
        rng = np.random.default_rng([cfg.seed, state.epoch])
        order = rng.permutation(n)
        cls_sum = reg_sum = 0.0
        for i in range(0, n, opt.batch_size):
            idx = order[i : i + opt.batch_size]
            batch = make_batch([examples[j] for j in idx], cfg.torch_dtype)
            optim.zero_grad(set_to_none=True)
            cls, reg = batch_loss(params, batch, cfg, grid, gamma)
            total = cls + reg
            total.backward()
            grads = [p.grad for p in params.values()]
            if not torch.isfinite(total) or not all(torch.isfinite(g).all() for g in grads):
                raise NonFiniteGradient(f"epoch {state.epoch}: non-finite loss or gradient (loss={total.item()})")
            torch.nn.utils.clip_grad_norm_(list(params.values()), opt.clip_norm)
            optim.step()
            cls_sum += cls.item() * len(idx)
            reg_sum += reg.item() * len(idx)
        state.epoch += 1
        row = {"epoch": state.epoch, "classification": cls_sum / n, "regression": reg_sum / n,
               "total": (cls_sum + reg_sum) / n}
        state.curve.append(row)
        log.info("epoch %d cls %.4f reg %.4f total %.4f", row["epoch"], row["classification"],
                 row["regression"], row["total"])
        if on_epoch is not None:
            on_epoch(row)
    state.params = {k: v.detach().clone() for k, v in params.items()}
    state.adam = {}
    for name, p in params.items():
        st = optim.state.get(p)
        if st:
            state.adam[name] = {"exp_avg": st["exp_avg"].numpy().copy(), "exp_avg_sq": st["exp_avg_sq"].numpy().copy()}
            state.adam_step = int(st["step"])
    return state


# ---------------------------------------------------------------------------
# Prediction


def predict_raw(params: Params, examples: Sequence[Example], cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """(n, T, k, 5) float64 raw head maps."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            b = make_batch(examples[i : i + batch_size], cfg.torch_dtype)
            outs.append(forward(b.features, b.rasters, params, cfg).double().numpy())
    return np.concatenate(outs)


def realize_batch(raw: np.ndarray, grid: GridSpec) -> List[List[MixtureParams]]:
    from gridmix.mixture import realize_params

    return [[realize_params(raw_to_head_output(step), grid) for step in seq] for seq in raw]


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    """npz container: JSON metadata plus one array per parameter and Adam moment."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_json(),
        "epoch": state.epoch,
        "adam_step": state.adam_step,
        "curve": state.curve,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in state.params.items():
        arrays[f"param/{name}"] = p.detach().numpy()
    for name, st in state.adam.items():
        arrays[f"adam/{name}/exp_avg"] = st["exp_avg"]
        arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    _write_npz(path, arrays)


def _write_npz(path, arrays: Dict[str, np.ndarray]) -> None:
    """Like np.savez, but with fixed zip timestamps so equal content gives equal bytes."""
    buf_zip = io.BytesIO()
    with zipfile.ZipFile(buf_zip, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    atomic_write(path, buf_zip.getvalue())


def load_checkpoint(path) -> TrainState:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig.from_json(meta["config"])
        names = list(param_shapes(cfg))
        params = {n: torch.from_numpy(z[f"param/{n}"].copy()) for n in names}
        adam = {}
        if f"adam/{names[0]}/exp_avg" in z.files:
            adam = {n: {"exp_avg": z[f"adam/{n}/exp_avg"].copy(), "exp_avg_sq": z[f"adam/{n}/exp_avg_sq"].copy()}
                    for n in names}
    return TrainState(cfg, params, meta["epoch"], adam, meta["adam_step"], meta["curve"])
