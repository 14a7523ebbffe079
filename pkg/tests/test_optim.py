import math

import numpy as np
import pytest

from maskdistill.errors import ConfigError
from maskdistill.model import ParameterView
from maskdistill.optim import AdamW, OptimizerConfig


def test_defaults():
    c = OptimizerConfig()
    assert (c.learning_rate, c.beta1, c.beta2, c.weight_decay, c.eps) == (1e-6, 0.9, 0.999, 0.01, 1e-8)
    with pytest.raises(ConfigError):
        OptimizerConfig(learning_rate=-1.0)


def test_quadratic_steps_match_hand_computation():
    # loss = (w - 3)^2, gradient 2 (w - 3)
    lr, b1, b2, wd, eps = 0.1, 0.9, 0.999, 0.01, 1e-8
    w0 = 1.0
    params = ParameterView([("w", np.array([w0]))])
    opt = AdamW(params, OptimizerConfig(lr, b1, b2, wd, eps))
    w, m, v = w0, 0.0, 0.0
    for t in (1, 2, 3):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        opt.step(params, ParameterView([("w", np.array([2 * (params["w"][0] - 3)]))]))
        assert abs(params["w"][0] - w) <= 1e-12
    # first step alone has the closed form w0 (1 - lr wd) + lr * sign(3 - w0), up to eps
    first = w0 * (1 - lr * wd) + lr * 1.0 * 4 / (4 + eps)
    p = ParameterView([("w", np.array([w0]))])
    AdamW(p, OptimizerConfig(lr, b1, b2, wd, eps)).step(p, ParameterView([("w", np.array([-4.0]))]))
    assert abs(p["w"][0] - first) <= 1e-12


def test_zero_learning_rate_is_bit_exact():
    rng = np.random.default_rng(0)
    params = ParameterView([("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=5))])
    before = params.copy()
    opt = AdamW(params, OptimizerConfig(learning_rate=0.0))
    for _ in range(3):
        opt.step(params, ParameterView([(n, rng.normal(size=v.shape)) for n, v in params.items()]))
    assert params.equal(before)
    assert opt.m.names() == params.names() and opt.t == 3
