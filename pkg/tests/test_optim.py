import numpy as np
import numpy.testing as npt

from coldrec import autodiff as ad
from coldrec.optim import Adam, adam_step


def test_zero_gradient_leaves_params_unchanged():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(3)}, {}, lr=0.1)
    npt.assert_allclose(p["w"], before)


def test_first_step_moves_against_gradient_sign():
    p = {"w": np.zeros(4)}
    g = np.array([1.0, -2.0, 0.5, -0.1])
    adam_step(p, {"w": g}, {}, lr=0.05)
    # bias-corrected first step has magnitude ~lr in the -sign(g) direction
    npt.assert_allclose(p["w"], -0.05 * np.sign(g), rtol=1e-6)


def test_adam_minimizes_quadratic():
    # 100 steps on f(x) = x^2 from x = 1 with lr 0.05 shrinks |x| below 0.1
    p = {"x": np.array([1.0])}
    state = {}
    for _ in range(100):
        adam_step(p, {"x": 2.0 * p["x"]}, state, lr=0.05)
    assert abs(p["x"][0]) < 0.1


def test_adam_wrapper_matches_functional():
    x1 = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x1}, lr=0.05)
    for _ in range(100):
        opt.zero_grad()
        loss = ad.mean(ad.mul(x1, x1))
        loss.backward()
        opt.step()
    assert abs(x1.data[0]) < 0.1

    p = {"x": np.array([1.0])}
    state = {}
    for _ in range(100):
        adam_step(p, {"x": 2.0 * p["x"]}, state, lr=0.05)
    npt.assert_allclose(x1.data, p["x"], rtol=1e-12)
