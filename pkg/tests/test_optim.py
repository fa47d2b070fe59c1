import numpy as np
import pytest

from chanmap.optim import Optimizer, OptimizerConfig
from chanmap.tensor import Tensor


def _param(value, grad):
    p = Tensor(np.array(value, np.float32), requires_grad=True)
    p.grad = np.array(grad, np.float32)
    return p


def test_sgd_plain_step():
    p = _param([1.0], [2.0])
    Optimizer([p], OptimizerConfig("sgd", lr=0.1, momentum=0.0)).step()
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad is None


def test_weight_decay_alone():
    p = _param([1.0], [0.0])
    Optimizer([p], OptimizerConfig("sgd", lr=1.0, momentum=0.0, weight_decay=1e-4)).step()
    assert p.data[0] == pytest.approx(0.9999)


def test_adam_first_step_is_lr_sized():
    # bias-corrected first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    g = np.array([0.3, -4.0, 1e-3], np.float32)
    p = _param(np.zeros(3), g)
    cfg = OptimizerConfig("adam", lr=1e-2)
    Optimizer([p], cfg).step()
    expected = -cfg.lr * g / (np.abs(g) + cfg.eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-4)


def test_momentum_accumulates():
    p = _param([0.0], [1.0])
    opt = Optimizer([p], OptimizerConfig("sgd", lr=1.0, momentum=0.5))
    opt.step()
    p.grad = np.array([1.0], np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(-1.0 - 1.5)
    assert opt.step_count == 2


def test_missing_gradient_raises():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(RuntimeError, match="no gradient"):
        Optimizer([p], OptimizerConfig()).step()


def test_buffers_match_parameter_shapes():
    ps = [_param(np.zeros((2, 3)), np.ones((2, 3))), _param(np.zeros(4), np.ones(4))]
    opt = Optimizer(ps, OptimizerConfig("adam"))
    opt.step()
    state = opt.state_dict()
    assert [m.shape for m in state["m"]] == [(2, 3), (4,)]
    assert state["step"] == 1


def test_bad_config():
    with pytest.raises(ValueError):
        OptimizerConfig("rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0)
