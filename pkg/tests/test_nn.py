import json
import math
import struct

import numpy as np
import pytest

from hyfunc import (
    MLP2,
    NumericsError,
    OptimConfig,
    Param,
    ParseError,
    ShapeError,
    adamw_step,
    grad_check,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)
from hyfunc.nn import log_softmax, softmax


def _tiny_mlp():
    mlp = MLP2(2, 2, 1, np.random.default_rng(0))
    mlp.w1.value[...] = [[1.0, 0.0], [0.0, 1.0]]
    mlp.b1.value[...] = [0.0, -3.0]
    mlp.w2.value[...] = [[2.0], [1.0]]
    mlp.b2.value[...] = [0.5]
    return mlp


def test_mlp2_forward_hand_computed():
    mlp = _tiny_mlp()
    # z1 = [1, -1] -> relu [1, 0] -> 2*1 + 1*0 + 0.5
    assert mlp.forward(np.array([1.0, 2.0])) == pytest.approx(2.5, abs=0)


def test_mlp2_forward_vector_matches_batch():
    mlp = MLP2(3, 4, 2, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=3)
    single = mlp.forward(x)
    batch = mlp.forward(x[None, :])
    assert single.shape == (2,)
    np.testing.assert_array_equal(batch[0], single)


def test_mlp2_shape_errors():
    mlp = MLP2(3, 4, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp.forward(np.zeros(4))
    with pytest.raises(ShapeError):
        MLP2(0, 1, 1, np.random.default_rng(0))
    out, cache = mlp.forward_cached(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        mlp.backward(cache, np.zeros((2, 3)))  # wrong upstream width


def test_mlp2_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    mlp = MLP2(4, 5, 3, rng)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 3))  # fixed linear readout makes the loss scalar

    def loss():
        return float((mlp.forward(x) * w).sum())

    out, cache = mlp.forward_cached(x)
    mlp.backward(cache, w)
    assert grad_check(loss, mlp.params()) < 1e-6


def test_mlp2_relu_derivative_is_zero_at_zero():
    mlp = _tiny_mlp()
    mlp.b1.value[...] = [-1.0, -2.0]
    x = np.array([[1.0, 2.0]])  # z1 lands exactly on the kink
    out, cache = mlp.forward_cached(x)
    dx = mlp.backward(cache, np.ones((1, 1)))
    # the subgradient convention here is relu'(0) == 0
    np.testing.assert_array_equal(mlp.w1.grad, 0.0)
    np.testing.assert_array_equal(mlp.b1.grad, 0.0)
    np.testing.assert_array_equal(dx, 0.0)
    np.testing.assert_array_equal(mlp.w2.grad, 0.0)  # a1 is zero too
    assert mlp.b2.grad == pytest.approx(1.0)


def test_softmax_and_log_softmax_consistent_and_stable():
    logits = np.array([[1.0, 2.0, 3.0], [1e4, 1e4 - 1.0, 0.0]])
    p = softmax(logits)
    lp = log_softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.log(p[0]), lp[0], atol=1e-12)
    assert np.all(np.isfinite(lp))


def test_lr_schedule_golden_points():
    cfg = OptimConfig(lr=1.0, total_steps=100, warmup_steps=10)
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 5) == pytest.approx(0.5)
    assert lr_at(cfg, 10) == pytest.approx(1.0)  # cosine start
    assert lr_at(cfg, 55) == pytest.approx(0.5)  # cosine midpoint
    assert lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(cfg, 200) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ShapeError):
        lr_at(cfg, -1)
    # all-warmup schedule: flat lr until total, zero after
    flat = OptimConfig(lr=2.0, total_steps=10, warmup_steps=10)
    assert lr_at(flat, 5) == pytest.approx(1.0)
    assert lr_at(flat, 12) == 0.0


def test_optim_config_defaults_and_validation():
    cfg = OptimConfig(lr=1.0, total_steps=100)
    assert cfg.warmup_steps == 5  # five percent of total
    with pytest.raises(ShapeError):
        OptimConfig(lr=0.0, total_steps=10)
    with pytest.raises(ShapeError):
        OptimConfig(lr=1.0, total_steps=10, warmup_steps=11)


def test_adamw_single_step_golden():
    p = Param(np.array([1.0]), "p")
    p.grad[...] = 0.5
    cfg = OptimConfig(lr=0.1, total_steps=1, warmup_steps=0, weight_decay=0.01)
    adamw_step(p, cfg, lr_now=0.1)
    g = 0.5
    m_hat = ((1 - 0.9) * g) / (1 - 0.9)
    v_hat = ((1 - 0.999) * g * g) / (1 - 0.999)
    expected = 1.0 - 0.1 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.01 * 1.0)
    assert p.value[0] == pytest.approx(expected, rel=0, abs=1e-15)
    np.testing.assert_array_equal(p.grad, 0.0)  # consumed


def test_adamw_decay_is_decoupled():
    # zero gradient: the Adam term vanishes, only weight decay moves the value
    p = Param(np.array([1.0]), "p")
    cfg = OptimConfig(lr=0.1, total_steps=1, warmup_steps=0, weight_decay=0.01)
    adamw_step(p, cfg, lr_now=0.1)
    assert p.value[0] == pytest.approx(1.0 - 0.1 * 0.01 * 1.0, abs=1e-15)


def test_adamw_rejects_non_finite_gradient():
    p = Param(np.array([1.0]), "p")
    p.grad[...] = np.nan
    cfg = OptimConfig(lr=0.1, total_steps=1, warmup_steps=0)
    with pytest.raises(NumericsError):
        adamw_step(p, cfg, lr_now=0.1)


def test_grad_check_flags_wrong_gradients():
    p = Param(np.array([0.7, -1.3]), "p")

    def loss():
        return float((p.value ** 2).sum())

    p.grad[...] = 2.0 * p.value * 1.1  # ten percent off
    rel = grad_check(loss, [p])
    assert 0.05 < rel < 0.15


def test_checkpoint_round_trip_and_determinism(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=7)}
    meta = {"kind": "test", "note": "x"}
    p1, p2 = tmp_path / "c1.bin", tmp_path / "c2.bin"
    save_checkpoint(str(p1), meta, arrays)
    save_checkpoint(str(p2), meta, arrays)
    assert p1.read_bytes() == p2.read_bytes()
    meta2, arrays2 = load_checkpoint(str(p1))
    assert meta2 == meta
    for k in arrays:
        np.testing.assert_array_equal(arrays2[k], arrays[k])


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(str(path), {"kind": "t"}, {"a": np.zeros(3)})
    blob = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(ParseError):
        load_checkpoint(str(bad))

    bad.write_bytes(blob[:10])  # truncated header
    with pytest.raises(ParseError):
        load_checkpoint(str(bad))

    bad.write_bytes(blob[:-8])  # truncated payload
    with pytest.raises(ParseError):
        load_checkpoint(str(bad))

    bad.write_bytes(blob + b"\x00" * 4)  # trailing bytes
    with pytest.raises(ParseError):
        load_checkpoint(str(bad))


def test_checkpoint_rejects_unknown_version(tmp_path):
    header = json.dumps({"version": 99, "meta": {}, "arrays": []}).encode()
    path = tmp_path / "v99.bin"
    path.write_bytes(b"HYNN1\x00" + struct.pack("<I", len(header)) + header)
    with pytest.raises(ParseError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_non_finite_arrays(tmp_path):
    with pytest.raises(NumericsError):
        save_checkpoint(str(tmp_path / "c.bin"), {}, {"a": np.array([np.inf])})
