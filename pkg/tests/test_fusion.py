from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcases import SMALL, bidifuse_instance, denoiser_batch, denoiser_instance, randomize
from sp4d.errors import ConfigError, ShapeError, TrainingError
from sp4d.fusion import autograd as ag
from sp4d.fusion.edm import NoiseLevel, karras_sigmas
from sp4d.fusion.model import (ModelConfig, as_tensors, bidifuse, count_branch_params, forward, init_params,
                               param_shapes)
from sp4d.fusion.sampler import sample
from sp4d.fusion.train import (ObjectData, TrainConfig, load_checkpoint, loss_fn, save_checkpoint, smoothed,
                               train)


def fuse_params(C, rng=None, zero=True):
    P = {"fuse.s.w1": np.ones((1, 1, 2 * C, C)), "fuse.s.b1": np.zeros(C),
         "fuse.s.w2": np.zeros((1, 1, C, C)), "fuse.s.b2": np.zeros(C)}
    return {k: ag.Tensor(v) for k, v in P.items()}


def test_bidifuse_zero_init_identity(rng):
    a, b = rng.normal(0, 1, (2, 1, 8, 8, 4))
    ra, rb = bidifuse(ag.Tensor(a), ag.Tensor(b), fuse_params(4), "s")
    np.testing.assert_array_equal(ra.data, a)
    np.testing.assert_array_equal(rb.data, b)


def test_bidifuse_constant_output(rng):
    a, b = rng.normal(0, 1, (2, 1, 8, 8, 4))
    P = fuse_params(4)
    P["fuse.s.b2"] = ag.Tensor(np.ones(4))
    ra, rb = bidifuse(ag.Tensor(a), ag.Tensor(b), P, "s")
    np.testing.assert_array_equal(ra.data, a + 1)
    np.testing.assert_array_equal(rb.data, b + 1)


def test_bidifuse_modes_and_errors(rng):
    a = ag.Tensor(rng.normal(0, 1, (1, 4, 4, 4)))
    assert bidifuse(a, a, {}, "s", "none") == (a, a)
    with pytest.raises(ShapeError, match=r"\(1, 4, 4, 4\).*\(1, 4, 4, 2\)"):
        bidifuse(a, ag.Tensor(np.zeros((1, 4, 4, 2))), fuse_params(4), "s")
    with pytest.raises(ConfigError):
        bidifuse(a, a, fuse_params(4), "s", "bogus")


@pytest.mark.parametrize("mode", ["literal-shared", "split"])
def test_bidifuse_gradients(mode):
    assert max(bidifuse_instance(s, mode) for s in range(5)) < 1e-4


def test_init_invariants():
    cfg = ModelConfig()
    P = init_params(cfg, 0)
    assert count_branch_params(P, "rgb") == count_branch_params(P, "part")
    for k, v in P.items():
        if k.endswith(".w2"):
            assert not v.any()
        if k.startswith("part."):
            np.testing.assert_array_equal(v, P["rgb." + k[5:]])
    assert set(P) == set(param_shapes(cfg))
    split = init_params(ModelConfig(fusion="split"), 0)
    assert any(k.startswith("fuse_rgb.") for k in split) and any(k.startswith("fuse_part.") for k in split)


@given(st.floats(1e-3, 1e3), st.floats(0.1, 2.0))
def test_edm_identities(sigma, sd):
    n = NoiseLevel(sigma, sd)
    assert n.c_skip * (sigma ** 2 + sd ** 2) == pytest.approx(sd ** 2, rel=1e-12)
    assert n.c_out ** 2 * (sigma ** 2 + sd ** 2) == pytest.approx((sigma * sd) ** 2, rel=1e-12)
    assert n.c_in ** 2 * (sigma ** 2 + sd ** 2) == pytest.approx(1.0, rel=1e-12)
    assert n.loss_weight * n.c_out ** 2 == pytest.approx(1.0, rel=1e-12)


def test_karras_schedule():
    s = karras_sigmas(5)
    assert s[0] == pytest.approx(80) and s[-2] == pytest.approx(0.002) and s[-1] == 0
    assert np.all(np.diff(s) < 0)
    assert karras_sigmas(1).tolist() == [80.0, 0.0]


def _inputs(rng, n=2, size=16, dtype=np.float64):
    x = {b: rng.normal(0, 1, (n, size, size, 3)).astype(dtype) for b in ("rgb", "part")}
    return x, rng.random((n, size, size, 3)).astype(dtype)


def test_small_sigma_limit(rng):
    P = as_tensors(randomize(init_params(SMALL, 0, np.float64), rng))
    x, cond = _inputs(rng)
    out = forward(P, SMALL, x, cond, 1e-9, [0, 1], [0, 0])
    for b in x:
        np.testing.assert_allclose(out.denoised[b].data, x[b], atol=1e-7)


def test_zero_input_finite():
    P = as_tensors(init_params(ModelConfig(), 0))
    z = np.zeros((1, 32, 32, 3), np.float32)
    out = forward(P, ModelConfig(), {"rgb": z, "part": z}, z, 1.0, 0, 0)
    assert all(np.isfinite(t.data).all() for t in out.denoised.values())


def test_indivisible_dims():
    P = as_tensors(init_params(SMALL, 0))
    z = np.zeros((1, 18, 18, 3), np.float32)
    with pytest.raises(ConfigError):
        forward(P, SMALL, {"rgb": z, "part": z}, z, 1.0, 0, 0)


def test_zero_fusion_equivalence(rng):
    params = randomize(init_params(SMALL, 0, np.float64), rng)
    for k in params:
        if k.startswith("fuse."):
            params[k] = np.zeros_like(params[k])
    P = as_tensors(params)
    x, cond = _inputs(rng)
    dual = forward(P, SMALL, x, cond, [0.5, 2.0], [0, 1], [1, 0])
    for b in ("rgb", "part"):
        single = forward(P, SMALL, {b: x[b]}, cond, [0.5, 2.0], [0, 1], [1, 0], branches=(b,))
        np.testing.assert_array_equal(dual.denoised[b].data, single.denoised[b].data)


def test_branch_swap_symmetry_at_init(rng):
    P = as_tensors(init_params(SMALL, 3, np.float64))
    x, cond = _inputs(rng)
    a = forward(P, SMALL, x, cond, 1.3, [0, 1], [0, 1])
    b = forward(P, SMALL, {"rgb": x["part"], "part": x["rgb"]}, cond, 1.3, [0, 1], [0, 1])
    np.testing.assert_array_equal(a.denoised["rgb"].data, b.denoised["part"].data)
    np.testing.assert_array_equal(a.denoised["part"].data, b.denoised["rgb"].data)


def test_full_network_gradients_per_group():
    groups = ["rgb.temb", "rgb.in", "rgb.enc0", "rgb.enc2", "rgb.mid", "rgb.dec1", "rgb.out",
              "part.enc1", "part.dec0", "part.out", "fuse.enc0", "fuse.mid", "fuse.dec2", "proj"]
    for i, g in enumerate(groups):
        assert denoiser_instance(i, lam=0.1, group=g) < 1e-3, g


def _tiny_data(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        labels = np.zeros((2, 2, size, size), np.int32)
        labels[..., 2:8, 2:14] = 1
        labels[..., 8:14, 2:14] = 2
        part = np.ones(labels.shape + (3,))
        part[labels == 1] = [0.2, 0.4, 0.8]
        part[labels == 2] = [0.8, 0.3, 0.2]
        rgb = np.clip(part * 0.8 + rng.normal(0, 0.02, part.shape), 0, 1)
        out.append(ObjectData(rgb.astype(np.float32), part.astype(np.float32), labels))
    return out


def test_lambda_zero_removes_contrastive_gradient(rng):
    params = randomize(init_params(SMALL, 0, np.float64), rng)
    batch = denoiser_batch(rng)
    noise = {b: rng.standard_normal(batch.rgb.shape) for b in ("rgb", "part")}
    P0 = as_tensors(params)
    t0, parts0 = loss_fn(P0, SMALL, batch, noise, 0.0, 0.07)
    ag.backward(t0)
    assert P0["proj.w"].grad is None and parts0["loss_contrast"] == 0.0
    assert parts0["loss"] == pytest.approx(parts0["loss_rgb"] + parts0["loss_part"], rel=1e-12)
    P1 = as_tensors(params)
    t1, parts1 = loss_fn(P1, SMALL, batch, noise, 0.5, 0.07)
    ag.backward(t1)
    assert parts1["loss_contrast"] > 0 and np.abs(P1["proj.w"].grad).sum() > 0
    # the denoising terms are untouched by the switch
    assert parts1["loss_rgb"] == parts0["loss_rgb"] and parts1["loss_part"] == parts0["loss_part"]
    assert not np.array_equal(P1["part.dec0.conv2.w"].grad, P0["part.dec0.conv2.w"].grad)


def test_training_decreases_and_is_deterministic():
    data = _tiny_data(1)
    cfg = TrainConfig(seed=5, steps=200, lr=2e-3, views_per_step=2, frames_per_step=1)
    r = train(data, SMALL, cfg)
    sm = smoothed([row["loss"] for row in r.log], 20)
    assert sm[-1] < sm[0]
    a = train(data, SMALL, TrainConfig(seed=1, steps=10, views_per_step=2, frames_per_step=1))
    b = train(data, SMALL, TrainConfig(seed=1, steps=10, views_per_step=2, frames_per_step=1))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes(), k


def test_two_stage_init_copies_rgb_branch():
    data = _tiny_data(1)
    s1 = train(data, SMALL, TrainConfig(steps=3, stage="rgb-only", views_per_step=1, frames_per_step=1))
    assert all(np.array_equal(s1.params[k], init_params(SMALL, 0)[k]) for k in s1.params if k.startswith("part."))
    s2 = train(data, SMALL, TrainConfig(steps=0), init=s1.params, init_stage="rgb-only")
    for k in s2.params:
        if k.startswith("part."):
            np.testing.assert_array_equal(s2.params[k], s1.params["rgb." + k[5:]])


def test_non_finite_aborts():
    data = _tiny_data(1)
    data[0].rgb[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="step"):
        train(data, SMALL, TrainConfig(steps=5, views_per_step=2, frames_per_step=2))


def test_checkpoint_roundtrip(tmp_path):
    r = train(_tiny_data(1), SMALL, TrainConfig(steps=2, views_per_step=1, frames_per_step=1))
    save_checkpoint(tmp_path / "ck", r.params, r.optimizer, {"step": 2})
    params, meta, moments = load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 2 and meta["optimizer_step"] == 2
    for k in r.params:
        assert params[k].tobytes() == r.params[k].tobytes()
        assert moments[0][k].tobytes() == r.optimizer.m[k].tobytes()


def test_sampler_contract():
    P = init_params(SMALL, 0)
    cond = np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32)
    a = sample(P, SMALL, cond, [0, 1, 2], [0, 0, 0], steps=1, seed=4)
    b = sample(P, SMALL, cond, [0, 1, 2], [0, 0, 0], steps=1, seed=4)
    for k in ("rgb", "part"):
        assert a[k].shape == cond.shape and np.isfinite(a[k]).all()
        assert a[k].min() >= 0 and a[k].max() <= 1
        np.testing.assert_array_equal(a[k], b[k])
    c = sample(P, SMALL, cond, [0, 1, 2], [0, 0, 0], steps=3, seed=4, chunk=2)
    d = sample(P, SMALL, cond, [0, 1, 2], [0, 0, 0], steps=3, seed=4, chunk=3)
    np.testing.assert_array_equal(c["part"], d["part"])
