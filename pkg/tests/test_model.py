import numpy as np
import pytest

from evanet import tensor as T
from evanet.data import EegEpoch
from evanet.encoder import EncoderConfig
from evanet.model import (ModelConfig, forward_eval, forward_train, init_params, load_params,
                          predict_head, save_params, set_target_scaling, trainable)
from evanet.tensor import ShapeError, Tensor
from evanet.training import AdamW, optimizer_params
from conftest import tiny_model_config
from oracles import param_grad_error


def batch(b=2, t=32, seed=0):
    g = np.random.default_rng(seed)
    return g.standard_normal((b, 19, t)) * 2e-5, g.uniform(15, 80, b)


def small64(**kw):
    enc = EncoderConfig(n_layers=1, d_model=16, n_heads=2, seq_len=32)
    return ModelConfig(encoder=enc, **kw)


# -- prediction head ------------------------------------------------------------------
def test_head_zero_weights_predict_zero():
    params = init_params(small64(), 0)
    for k, p in params.items():
        if k.startswith("head.") and p.requires_grad:
            p.data[:] = 0.0
    z = np.random.default_rng(0).standard_normal((3, 64))
    np.testing.assert_array_equal(predict_head(z, params).data, 0.0)


def test_head_widths_and_determinism():
    params = init_params(small64(), 0)
    shapes = [params[f"head.{i}.weight"].shape for i in range(3)]
    assert shapes == [(64, 64), (64, 32), (32, 1)]
    z = np.random.default_rng(1).standard_normal(64)
    a, b = predict_head(z, params), predict_head(z, params)
    assert a.shape == () and a.item() == b.item()
    with pytest.raises(ShapeError):
        predict_head(np.zeros(8), params)


def test_head_gradient():
    params = init_params(small64(), 2)
    z = Tensor(np.random.default_rng(2).standard_normal((4, 64)))
    names = [k for k in params if k.startswith("head.") and params[k].requires_grad]
    errs = param_grad_error(lambda p: T.tsum(T.square(predict_head(z, p))), params,
                            names=names)
    assert max(errs.values()) < 1e-5, errs


def test_target_scaling_is_affine_and_frozen():
    params = init_params(small64(), 0)
    z = np.random.default_rng(3).standard_normal(64)
    base = predict_head(z, params).item()
    set_target_scaling(params, 40.0, 15.0)
    assert predict_head(z, params).item() == pytest.approx(40.0 + 15.0 * base, rel=1e-14)
    assert "head.age_offset" not in trainable(params)


# -- forward_train --------------------------------------------------------------------
def test_zero_loss_weights_make_total_equal_pred():
    cfg = tiny_model_config(beta=0.0, gamma=0.0)
    x, y = batch()
    out = forward_train(x, y, init_params(cfg, 0), cfg, T.make_rng(0))
    assert out.l_total == out.l_pred
    assert out.l_ib > 0 and out.l_align > 0


def test_oracle_predictor_gives_zero_pred_loss(tiny_cfg):
    x, y = batch()
    out = forward_train(x, y, init_params(tiny_cfg, 0), tiny_cfg, T.make_rng(0),
                        predictor=lambda z: Tensor(y))
    assert out.l_pred == 0.0


@pytest.mark.parametrize("beta,gamma", [(1e-3, 0.7), (0.5, 0.1), (0.0, 0.9), (2.0, 0.0)])
def test_breakdown_matches_scalar_recomputation(beta, gamma):
    cfg = tiny_model_config(beta=beta, gamma=gamma)
    x, y = batch(2, seed=4)
    out = forward_train(x, y, init_params(cfg, 1), cfg, T.make_rng(7))
    l_pred = ((out.y_hat[0] - y[0]) ** 2 + (out.y_hat[1] - y[1]) ** 2) / 2
    l_ib = sum(0.5 * sum(np.exp(lv) + m * m - lv - 1 for m, lv in zip(mu_i, lv_i))
               for mu_i, lv_i in zip(out.mu, out.log_var)) / 2
    l_align = sum(sum((a - b) ** 2 for a, b in zip(z_i, p_i))
                  for z_i, p_i in zip(out.z, out.proto)) / 2
    assert out.l_pred == pytest.approx(l_pred, rel=1e-12)
    assert out.l_ib == pytest.approx(l_ib, rel=1e-12)
    assert out.l_align == pytest.approx(l_align, rel=1e-12)
    assert out.l_total == pytest.approx(out.l_pred + beta * out.l_ib + gamma * out.l_align,
                                        rel=1e-15, abs=0)
    eps = (out.z - out.mu) / np.exp(0.5 * out.log_var)
    assert np.all(np.isfinite(eps))


def test_ablation_without_vib():
    cfg = tiny_model_config(no_vib=True, beta=0.0)
    x, y = batch()
    out = forward_train(x, y, init_params(cfg, 0), cfg, T.make_rng(0))
    np.testing.assert_array_equal(out.z, out.mu)
    assert out.l_ib == 0.0


def test_ablation_without_alignment():
    cfg = tiny_model_config(no_align=True, gamma=0.0)
    params = init_params(cfg, 0)
    assert not any(k.startswith("proto.") for k in params)
    x, y = batch()
    out = forward_train(x, y, params, cfg, T.make_rng(0))
    assert out.l_align == 0.0 and out.proto is None
    out.total.backward()


def test_invalid_ablation_combinations():
    with pytest.raises(ValueError):
        tiny_model_config(no_align=True, gamma=0.7)
    with pytest.raises(ValueError):
        tiny_model_config(no_vib=True, beta=1e-3)
    with pytest.raises(ValueError):
        tiny_model_config(beta=-1.0)


def test_forward_train_rejects_bad_batches(tiny_cfg):
    params = init_params(tiny_cfg, 0)
    with pytest.raises(ShapeError):
        forward_train(np.zeros((0, 19, 32)), [], params, tiny_cfg, T.make_rng(0))
    with pytest.raises(ShapeError):
        forward_train(np.zeros((2, 19, 32)), [30.0], params, tiny_cfg, T.make_rng(0))


def test_end_to_end_gradient_tiny_model(tiny_cfg):
    x, y = batch(2, seed=9)
    params = init_params(tiny_cfg, 9)
    errs = param_grad_error(lambda p: forward_train(x, y, p, tiny_cfg, T.make_rng(3)).total,
                            params, n_entries=12, seed=9)
    assert max(errs.values()) < 1e-3, {k: v for k, v in errs.items() if v >= 1e-3}


def test_small_step_decreases_loss():
    cfg = tiny_model_config()
    for seed in range(10):
        x, y = batch(4, seed=seed)
        params = init_params(cfg, seed)
        before = forward_train(x, y, params, cfg, T.make_rng(seed))
        opt = AdamW(optimizer_params(params, cfg))
        before.total.backward()
        opt.step(1e-5)
        after = forward_train(x, y, params, cfg, T.make_rng(seed))
        assert after.l_total < before.l_total, seed


# -- forward_eval -------------------------------------------------------------------
def test_eval_determinism_and_shapes():
    cfg = small64()
    params = init_params(cfg, 0)
    ep = EegEpoch("s1", 52.0, "healthy", np.random.default_rng(0).standard_normal((19, 1000)) * 2e-5)
    cfg_full = ModelConfig(encoder=EncoderConfig(n_layers=1, d_model=16, n_heads=2))
    p_full = init_params(cfg_full, 0)
    y1, z1, p1 = forward_eval(ep, p_full, cfg_full)
    y2, z2, p2 = forward_eval(ep, p_full, cfg_full)
    assert isinstance(y1, float) and z1.shape == (64,) and p1.shape == (64,)
    assert y1 == y2 and z1.tobytes() == z2.tobytes() and p1.tobytes() == p2.tobytes()
    x, ages = batch(3)
    yb, zb, pb = forward_eval(x, params, cfg, ages=ages)
    assert yb.shape == (3,) and zb.shape == (3, 64) and pb.shape == (3, 64)
    assert forward_eval(x, params, cfg)[2] is None


def test_eval_close_to_train_when_variance_is_tiny():
    cfg = tiny_model_config(gamma=0.0)
    params = init_params(cfg, 5)
    params["vib.logvar.weight"].data[:] = 0.0
    params["vib.logvar.bias"].data[:] = -10.0
    x, y = batch(3, seed=5)
    y_eval, _, _ = forward_eval(x, params, cfg)
    y_train = forward_train(x, y, params, cfg, T.make_rng(cfg.eval_seed)).y_hat
    lip = params["head.age_scale"].item()
    for i in range(3):
        lip *= np.linalg.norm(params[f"head.{i}.weight"].data, 2)
    sigma = np.exp(-5.0)
    bound = lip * 5 * sigma * np.sqrt(cfg.d_latent)
    assert np.all(np.abs(y_eval - y_train) <= bound)


# -- checkpoints ----------------------------------------------------------------------
def test_param_round_trip(tmp_path, tiny_cfg):
    params = init_params(tiny_cfg, 3)
    set_target_scaling(params, 44.0, 16.0)
    save_params(params, tmp_path / "m.evaw")
    back = load_params(tmp_path / "m.evaw", tiny_cfg)
    assert set(back) == set(params)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()
        assert back[k].requires_grad == params[k].requires_grad


def test_load_rejects_mismatched_config(tmp_path, tiny_cfg):
    save_params(init_params(tiny_cfg, 0), tmp_path / "m.evaw")
    with pytest.raises(ValueError):
        load_params(tmp_path / "m.evaw", tiny_model_config(no_align=True, gamma=0.0))
    other = ModelConfig(encoder=EncoderConfig(n_layers=1, d_model=32, n_heads=2), d_latent=8)
    with pytest.raises(ValueError):
        load_params(tmp_path / "m.evaw", other)
