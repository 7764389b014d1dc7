import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from redfuse.autograd import grad_check
from redfuse.objective import SSIM_C1, loss_grad, loss_l1, loss_ssim, loss_total, ssim_index

import oracles


def img(a):
    return np.asarray(a, dtype=np.float64).reshape(1, 1, *np.shape(a))


def triple(rng, n=16):
    return tuple(rng.random((1, 1, n, n)) for _ in range(3))


def checkerboard(n):
    return (np.indices((n, n)).sum(axis=0) % 2).astype(np.float64)


images = arrays(np.float64, (1, 1, 12, 12), elements=st.floats(0, 1))


@given(images)
def test_ssim_self_is_one(x):
    assert ssim_index(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_anticorrelated():
    c = checkerboard(16)
    s = ssim_index(img(c), img(1 - c))
    assert s < 0
    assert s == pytest.approx(oracles.ssim(c, 1 - c), rel=1e-9)


def test_ssim_constant_images_luminance_only():
    s = ssim_index(np.zeros((1, 1, 16, 16)), np.ones((1, 1, 16, 16)))
    assert s == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-6)


def test_ssim_matches_oracle(rng):
    a, b, _ = triple(rng)
    assert ssim_index(a, b) == pytest.approx(oracles.ssim(a[0, 0], b[0, 0]), rel=1e-9)


def test_losses_vanish_on_identical_inputs(rng):
    x = rng.random((1, 1, 16, 16))
    br = loss_total(x, x, x)
    assert (br.l_ssim, br.l_1, br.l_grad) == (0.0, 0.0, 0.0)
    assert br.total == 0.0


def test_ssim_loss_with_equal_sources(rng):
    i, _, f = triple(rng)
    assert loss_ssim(i, i, f) == pytest.approx(2 * (1 - ssim_index(i, f)), rel=1e-14)


def test_l1_constants():
    i, v = np.full((1, 1, 4, 4), 0.2), np.full((1, 1, 4, 4), 0.4)
    values = [loss_l1(i, v, np.full((1, 1, 4, 4), c)) for c in (0.25, 0.3, 0.35)]
    np.testing.assert_allclose(values, 0.2, rtol=1e-12)


def test_grad_loss_constant_images_is_zero():
    c = [np.full((1, 1, 8, 8), x) for x in (0.1, 0.5, 0.9)]
    assert loss_grad(*c) == 0.0
    z = np.zeros((1, 1, 8, 8))
    assert loss_grad(z, z + 1, z + 0.5) == 0.0


def test_grad_loss_vertical_step():
    n = 10
    step = np.zeros((n, n))
    step[:, n // 2:] = 1.0
    i, v = img(step), np.full((1, 1, n, n), 0.3)
    assert loss_grad(i, v, i) == 0.0
    # The Sobel-x response of a unit step is 4 on the two columns flanking it.
    assert loss_grad(i, v, v) == pytest.approx(8 / n, abs=1e-11)


def test_components_match_oracles(rng):
    for _ in range(3):
        i, v, f = triple(rng, 16)
        a, b, c = i[0, 0], v[0, 0], f[0, 0]
        assert loss_ssim(i, v, f) == pytest.approx(oracles.loss_ssim(a, b, c), rel=1e-9)
        assert loss_l1(i, v, f) == pytest.approx(oracles.loss_l1(a, b, c), rel=1e-12)
        assert loss_grad(i, v, f) == pytest.approx(oracles.loss_grad(a, b, c), rel=1e-12)


def test_total_is_sum_of_components(rng):
    i, v, f = triple(rng)
    br = loss_total(i, v, f)
    assert br.total == br.l_ssim + br.l_1 + br.l_grad
    assert br.l_ssim == loss_ssim(i, v, f)
    assert br.l_1 == loss_l1(i, v, f)
    assert br.l_grad == loss_grad(i, v, f)
    assert 0 <= br.l_ssim <= 4 and br.l_1 >= 0 and br.l_grad >= 0


@given(images, images, images)
def test_total_is_symmetric_in_sources(i, v, f):
    assert loss_total(i, v, f).as_dict() == loss_total(v, i, f).as_dict()


def test_total_gradient_wrt_fused(rng):
    i, v, f = triple(rng, 12)

    def fn(tape, p):
        return loss_total(i, v, tape.param("f", p["f"])).total_var

    assert grad_check(fn, {"f": f}, 1e-6, sweep="directions", probes=12) < 1e-6


def test_shape_mismatch():
    with pytest.raises(ValueError):
        loss_total(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 9)))
