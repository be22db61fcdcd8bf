import math

import numpy as np
import pytest
import torch

from gridmix.data import ScenarioConfig, build_examples, generate
from gridmix.experiments import gradcheck, toy_setup
from gridmix.mixture import decomposed_loss, realize_params
from gridmix.network import (
    Batch,
    ModelConfig,
    NonFiniteGradient,
    OptimizerConfig,
    ShapeMismatch,
    TrainState,
    count_params,
    flatten,
    forward,
    gradients,
    init_params,
    load_checkpoint,
    make_batch,
    raw_to_head_output,
    save_checkpoint,
    sequence_loss,
    train,
    unflatten,
)
from gridmix.staticmap import assign_latent_many


@pytest.fixture(scope="module")
def toy():
    cfg, mc, grid = toy_setup(ModelConfig.toy(dtype="float64"))
    ds = generate(ScenarioConfig(n_tracks=6, seed=0))
    return cfg, grid, build_examples(ds, cfg.horizon, grid, mc, cfg.t_max)


def test_param_count_default():
    emb = (8 * 4 + 8) + (16 * 8 + 16)
    lstm = 4 * 256 * (16 + 256 + 1) + 4 * 150 * (256 + 150 + 1)
    conv = sum(co * ci * 9 + co for ci, co in [(2, 4), (4, 8), (8, 8), (8, 16), (16, 16)])
    head_in = (128 // 32) ** 2 * 16 + 150
    head = (256 * head_in + 256) + (128 * 256 + 128) + (500 * 128 + 500)
    assert count_params(ModelConfig()) == emb + lstm + conv + head == 729968


def test_param_count_toy():
    assert count_params(ModelConfig.toy()) == 20448
    assert len(flatten(init_params(ModelConfig.toy()))) == 20448


def test_init_deterministic_and_flatten_round_trip():
    cfg = ModelConfig.toy()
    a, b = init_params(cfg), init_params(cfg)
    assert all(torch.equal(a[k], b[k]) for k in a)
    back = unflatten(flatten(a), a)
    assert all(torch.equal(a[k], back[k]) for k in a)
    with pytest.raises(ShapeMismatch):
        unflatten(flatten(a)[:-1], a)


def test_forward_shape(toy):
    cfg, _, ex = toy
    b = make_batch(ex[:2], torch.float64)
    raw = forward(b.features, b.rasters, init_params(cfg), cfg)
    assert raw.shape == (2, 30, 16, 5)
    with pytest.raises(ShapeMismatch):
        forward(b.features, b.rasters[:, :, :16, :16], init_params(cfg), cfg)


def test_causality(toy):
    cfg, _, ex = toy
    params = init_params(cfg)
    b = make_batch(ex[:1], torch.float64)
    base = forward(b.features, b.rasters, params, cfg)
    feats, rasters = b.features.clone(), b.rasters.clone()
    feats[:, 12:] += 3.0
    rasters[:, 12:] = 1.0 - rasters[:, 12:]
    moved = forward(feats, rasters, params, cfg)
    assert torch.equal(base[:, :12], moved[:, :12])
    assert not torch.allclose(base[:, 12:], moved[:, 12:])


def test_loss_matches_closed_form(toy):
    cfg, grid, ex = toy
    params = init_params(cfg, seed=5)
    b = make_batch(ex[:1], torch.float64)
    raw = forward(b.features, b.rasters, params, cfg)
    cls, reg = sequence_loss(raw, b.targets, b.classes, grid, gamma=2.0)
    want_c = want_r = 0.0
    for t in range(raw.shape[1]):
        p = realize_params(raw_to_head_output(raw[0, t].detach().numpy()), grid)
        lb = decomposed_loss(p, ex[0].targets[t], int(ex[0].classes[t]), gamma=2.0)
        want_c += lb.classification
        want_r += lb.regression
    assert cls.item() == pytest.approx(want_c, rel=1e-12)
    assert reg.item() == pytest.approx(want_r, rel=1e-12)


def test_out_of_extent_steps_masked(toy):
    cfg, grid, ex = toy
    b = make_batch(ex[:1], torch.float64)
    raw = forward(b.features, b.rasters, init_params(cfg), cfg)
    classes = b.classes.clone()
    classes[0, :10] = -1
    full = sequence_loss(raw, b.targets, b.classes, grid)
    part = sequence_loss(raw, b.targets, classes, grid)
    assert part[0].item() < full[0].item() and part[1].item() < full[1].item()


def test_duplicated_samples_leave_mean_gradient(toy):
    cfg, grid, ex = toy
    params = init_params(cfg)
    _, g1 = gradients(params, make_batch([ex[0], ex[1]], torch.float64), cfg, grid)
    _, g2 = gradients(params, make_batch([ex[0], ex[0], ex[1], ex[1]], torch.float64), cfg, grid)
    for k in g1:
        assert torch.allclose(g1[k], g2[k], rtol=1e-10, atol=1e-13)


def test_zero_gradient_at_exact_fit():
    # a stationary vehicle whose target sits exactly on a confident, clamped component
    cfg, mc, grid = toy_setup(ModelConfig.toy(dtype="float64"))
    params = init_params(cfg)
    last = len(cfg.head_sizes)
    params[f"head{last}.W"] = torch.zeros_like(params[f"head{last}.W"])
    target = np.array([0.0, 0.0])
    z = int(assign_latent_many(target[None], grid)[0])
    bias = np.zeros((grid.k, 5))
    bias[:, 0] = -40.0
    bias[z, 0] = 40.0
    bias[:, 2] = bias[:, 4] = -5.0
    bias[z, 1] = target[0] - grid.centers[z, 0]
    bias[z, 3] = target[1] - grid.centers[z, 1]
    params[f"head{last}.b"] = torch.tensor(bias.ravel())
    steps = 4
    batch = Batch(
        torch.zeros(1, steps, 4, dtype=torch.float64),
        torch.zeros(1, steps, 32, 32, 2, dtype=torch.float64),
        torch.zeros(1, steps, 2, dtype=torch.float64),
        torch.full((1, steps), z),
    )
    loss, grads = gradients(params, batch, cfg, grid)
    assert loss.classification < 1e-30
    # log sigma is clamped at -3 on both axes
    assert loss.regression == pytest.approx(steps * (-6.0 + math.log(2 * math.pi)))
    # softmax leaves exp(-80)-sized gradients on the competing logits
    assert max(g.abs().max().item() for g in grads.values()) < 1e-30


def test_non_finite_gradient_raises(toy):
    cfg, grid, ex = toy
    params = init_params(cfg)
    params["head0.b"] = params["head0.b"].clone()
    params["head0.b"][0] = float("nan")
    with pytest.raises(NonFiniteGradient):
        gradients(params, make_batch(ex[:1], torch.float64), cfg, grid)


def test_gradcheck_single_point():
    r = gradcheck(n_points=1, seq_len=3, batch_size=1)
    assert r.worst <= 1e-4
    assert set(r.per_param) == set(init_params(ModelConfig.toy()))


def test_training_deterministic_and_resumable(toy):
    cfg, grid, ex = toy
    opt = OptimizerConfig(learning_rate=3e-3, epochs=4, batch_size=2)
    a = train(ex, cfg, grid, opt)
    b = train(ex, cfg, grid, opt)
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
    half = OptimizerConfig(learning_rate=3e-3, epochs=2, batch_size=2)
    first = train(ex, cfg, grid, half)
    resumed = train(ex, cfg, grid, half, state=first)
    assert [r["epoch"] for r in resumed.curve] == [1, 2, 3, 4]
    for k in a.params:
        assert torch.allclose(a.params[k], resumed.params[k], rtol=0, atol=1e-12)
    assert a.curve[-1]["total"] < a.curve[0]["total"]


def test_checkpoint_round_trip(tmp_path, toy):
    cfg, grid, ex = toy
    state = train(ex, cfg, grid, OptimizerConfig(epochs=1, batch_size=3))
    save_checkpoint(tmp_path / "a.npz", state)
    save_checkpoint(tmp_path / "b.npz", state)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = load_checkpoint(tmp_path / "a.npz")
    assert back.config == state.config and back.epoch == 1 and back.curve == state.curve
    assert all(torch.equal(back.params[k], state.params[k]) for k in state.params)
    for k, st in state.adam.items():
        assert np.array_equal(back.adam[k]["exp_avg_sq"], st["exp_avg_sq"])


def test_empty_training_set_rejected(toy):
    cfg, grid, _ = toy
    with pytest.raises(ValueError):
        train([], cfg, grid)


def test_fresh_state_matches_explicit_init(toy):
    cfg, grid, ex = toy
    opt = OptimizerConfig(epochs=1, batch_size=3)
    a = train(ex, cfg, grid, opt)
    b = train(ex, cfg, grid, opt, state=TrainState(cfg, init_params(cfg)))
    assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
