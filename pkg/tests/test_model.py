import numpy as np
import pytest

from gradcheck import TINY, check, tiny_params, tiny_problem
from sleepshot import DivergenceError, ValidationError
from sleepshot.codec import Assembly
from sleepshot.model import (
    ModelConfig,
    backward,
    forward,
    forward_with_trace,
    init_params,
    load_params,
    read_checkpoint_header,
    save_params,
)

def test_default_shape_chain():
    cfg = ModelConfig(D=4)
    assert cfg.block_lengths == [3000, 500, 83, 13]
    assert cfg.flat_size == 416
    assert cfg.param_shapes()["dense.w"] == (50, 416)


def test_pooling_must_leave_features():
    with pytest.raises(ValidationError, match="collapses"):
        ModelConfig(D=1, L=600, P=2, pool_width=10)


def test_init_rules():
    cfg = ModelConfig(D=4)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
        if k.endswith(".b"):
            assert not a[k].any()
    bound = np.sqrt(6 / (4 * 100 + 8 * 100))
    assert bound == pytest.approx(0.0707, abs=1e-4)
    w = a["conv1.w"]
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.95 * bound
    assert not np.array_equal(a["conv1.w"], init_params(cfg, 8)["conv1.w"])


def test_zero_params_zero_input_output():
    cfg = ModelConfig(assembly="SAR", **TINY)
    p = init_params(cfg)
    for k in p:
        p.tensors[k][...] = 0
    out = forward(p, np.zeros((2, 600)))
    lay = Assembly.SAR.layout
    np.testing.assert_allclose(out[list(lay.stage)], 0.2, atol=1e-7)
    np.testing.assert_allclose(out[[lay.arousal_presence, lay.resp_presence]], 0.5, atol=1e-7)
    np.testing.assert_allclose(out[list(lay.resp_class)], 0.5, atol=1e-7)
    np.testing.assert_array_equal(out[lay.linear_indices], 0)


def test_output_activations_and_inference_determinism():
    p = tiny_params(dtype="float32")
    x = np.random.default_rng(0).standard_normal((4, 2, 600)) * 3
    out = forward(p, x)
    lay = Assembly.SAR.layout
    assert np.all(np.abs(out[:, list(lay.stage)].sum(axis=1) - 1) < 1e-6)
    assert np.all(np.abs(out[:, list(lay.resp_class)].sum(axis=1) - 1) < 1e-6)
    sig = out[:, lay.sigmoid_indices]
    assert np.all((sig > 0) & (sig < 1))
    np.testing.assert_array_equal(out, forward(p, x))


def test_dropout_mask_follows_seed():
    p = tiny_params()
    x = np.random.default_rng(1).standard_normal((3, 2, 600))
    a = forward(p, x, training=True, dropout_seed=5)
    b = forward(p, x, training=True, dropout_seed=5)
    c = forward(p, x, training=True, dropout_seed=6)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_input_errors():
    p = tiny_params()
    with pytest.raises(ValidationError, match="does not match"):
        forward(p, np.zeros((3, 600)))
    x = np.zeros((2, 600))
    x[0, 3] = np.inf
    with pytest.raises(DivergenceError, match="input"):
        forward(p, x)


@pytest.mark.parametrize("assembly", ["S", "SA", "SR", "SAR"])
def test_gradients_match_finite_differences(assembly):
    p, x, g = tiny_problem(assembly)
    worst, probes, crossings = check(p, x, g, entries=8, rng=np.random.default_rng(0))
    assert crossings == 0
    assert worst < 1e-4


def test_zero_loss_gradient_gives_zero_gradients():
    p = tiny_params()
    x = np.random.default_rng(0).standard_normal((2, 2, 600))
    _, tr = forward_with_trace(p, x, training=True)
    grads = backward(p, tr, np.zeros((2, 13)))
    assert all(not v.any() for v in grads.values())


def test_unused_head_component_gets_no_gradient():
    p = tiny_params()
    x = np.random.default_rng(0).standard_normal((2, 2, 600))
    _, tr = forward_with_trace(p, x)
    g = np.random.default_rng(1).standard_normal((2, 13))
    g[:, 12] = 0.0
    grads = backward(p, tr, g)
    assert not grads["head.w"][12].any() and grads["head.b"][12] == 0
    assert grads["head.w"][11].any()


def test_backward_rejects_mismatched_trace():
    p = tiny_params()
    _, tr = forward_with_trace(p, np.zeros((1, 2, 600)))
    with pytest.raises(ValidationError, match="shape"):
        backward(p, tr, np.zeros((2, 13)))
    other = tiny_params("S")
    with pytest.raises(ValidationError, match="different configuration"):
        backward(other, tr, np.zeros((1, 13)))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_round_trip(tmp_path, dtype):
    p = tiny_params(dtype=dtype)
    path = save_params(p, tmp_path / "m.ckpt", lineage={"seed": 1})
    back = load_params(path, expect=p.config)
    assert back.config == p.config
    for k in p:
        assert back[k].dtype == p[k].dtype
        assert back[k].tobytes() == p[k].tobytes()
    x = np.random.default_rng(0).standard_normal((2, 2, 600))
    np.testing.assert_array_equal(forward(p, x), forward(back, x))
    assert read_checkpoint_header(path)["lineage"] == {"seed": 1}


def test_checkpoint_errors(tmp_path):
    p = tiny_params()
    path = save_params(p, tmp_path / "m.ckpt")
    wrong = ModelConfig(**{**TINY, "D": 3}, assembly="SAR", dtype="float64")
    with pytest.raises(ValidationError, match="mismatch"):
        load_params(path, expect=wrong)
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(ValidationError, match="corrupt"):
        load_params(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world")
    with pytest.raises(ValidationError, match="not a checkpoint"):
        load_params(tmp_path / "junk.ckpt")
