import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpcguide.autodiff import Tape, backward
from mpcguide.schedule import SCHEDULE_KINDS, corrupt, frac_to_step, make_schedule

# frozen reference values (T = 100 unless noted)
FROZEN = {
    "linear-beta": (0.999499874937461, 0.2723912566831395, 0.004515538700491977),
    "cosine": (0.9996843093705424, 0.7027400589411691, 0.0004928054666245152),
    "scaled-linear": (0.9957409301620578, 0.5242578228038377, 0.06176938432664749),
}


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
def test_frozen_alpha_values(kind):
    s = make_schedule(kind, 100)
    np.testing.assert_allclose([s.alpha[1], s.alpha[50], s.alpha[100]], FROZEN[kind], rtol=1e-12)


def test_ddpm_terminal_alpha_bar():
    # the well-known DDPM endpoint: alpha_bar_T ~ 4.04e-5 for 1000 linear steps
    s = make_schedule("linear-beta", 1000)
    assert s.alpha[-1] ** 2 == pytest.approx(4.0358e-5, rel=1e-4)


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
@given(T=st.integers(2, 400))
def test_variance_preserving_and_monotone(kind, T):
    s = make_schedule(kind, T)
    np.testing.assert_allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0
    assert (np.diff(s.alpha) < 0).all() and (np.diff(s.sigma) > 0).all()


def test_arrays_are_read_only():
    s = make_schedule()
    with pytest.raises(ValueError):
        s.alpha[3] = 0.5


def test_bad_arguments():
    with pytest.raises(ValueError, match="T >= 2"):
        make_schedule("linear-beta", 1)
    with pytest.raises(ValueError, match="unknown schedule"):
        make_schedule("sqrt", 100)
    s = make_schedule()
    with pytest.raises(ValueError):
        s.check_step(101)
    with pytest.raises(ValueError):
        s.check_step(-1)


def test_equality_is_by_value():
    assert make_schedule("cosine", 50) == make_schedule("cosine", 50)
    assert make_schedule("cosine", 50) != make_schedule("cosine", 51)
    assert make_schedule("cosine", 50) != make_schedule("linear-beta", 50)


def test_corrupt_numpy_and_tensor_agree():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x, eps = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    z = corrupt(x, 40, eps, s)
    np.testing.assert_allclose(z, s.alpha[40] * x + s.sigma[40] * eps, rtol=0, atol=0)
    with Tape() as tape:
        xt = tape.watch(x)
        zt = corrupt(xt, 40, eps, s)
    np.testing.assert_array_equal(zt.data, z)
    np.testing.assert_allclose(backward(zt.sum(), [xt])[0], s.alpha[40])


def test_corrupt_rejects_mismatch_and_bad_step():
    s = make_schedule()
    with pytest.raises(ValueError, match="shape"):
        corrupt(np.zeros(2), 1, np.zeros(3), s)
    with pytest.raises(ValueError):
        corrupt(np.zeros(2), 200, np.zeros(2), s)


def test_corrupted_statistics():
    s = make_schedule()
    rng = np.random.default_rng(1)
    x = rng.standard_normal(200_000) * 2 + 1
    z = corrupt(x, 60, rng.standard_normal(x.shape), s)
    assert z.mean() == pytest.approx(s.alpha[60], abs=0.02)
    assert z.var() == pytest.approx(4 * s.alpha[60] ** 2 + s.sigma[60] ** 2, rel=0.02)


def test_frac_to_step():
    assert frac_to_step(0.29, 100) == 29
    assert frac_to_step(0.125, 100) == 13  # ties go up
    assert frac_to_step(1.0, make_schedule("cosine", 50)) == 50
    with pytest.raises(ValueError):
        frac_to_step(1.2, 100)


@given(st.floats(0, 1), st.integers(2, 2000))
def test_frac_to_step_in_range_and_close(f, T):
    k = frac_to_step(f, T)
    assert 0 <= k <= T and abs(k - f * T) <= 0.5 + 1e-9
