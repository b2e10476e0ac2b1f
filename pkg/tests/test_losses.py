import numpy as np
import pytest

from fedcert import (
    CROSS_ENTROPY,
    LINEAR,
    LOGISTIC,
    LOOKUP,
    SQUARED,
    ZERO_ONE,
    DimensionMismatchError,
    Hypothesis,
    LossFn,
    Sample,
    UnsupportedGradientError,
    curvature_bound,
    loss,
    loss_gradient,
    loss_values,
)


def logistic_h(w=(1.0, -0.5), b=0.2):
    return Hypothesis(kind=LOGISTIC, weights=np.array(w, dtype=float), bias=b)


def linear_h():
    W = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    return Hypothesis(kind=LINEAR, weights=W, bias=np.array([0.0, 0.1, -0.1]))


def test_zero_one_correct_and_wrong():
    h = logistic_h()
    z_pos = Sample(features=np.array([3.0, 0.0]), label=1)   # score 3.2 -> class 1
    z_neg = Sample(features=np.array([3.0, 0.0]), label=0)
    assert loss(LossFn(ZERO_ONE), h, z_pos) == 0.0
    assert loss(LossFn(ZERO_ONE), h, z_neg) == 1.0


def test_clipped_squared_identity_case():
    # score-valued rule hitting the target exactly
    h = Hypothesis(kind=LOGISTIC, weights=np.array([0.0]), bias=0.0)
    z = Sample(features=np.array([0.0]), label=0.5)   # sigmoid(0) = 0.5
    assert loss(LossFn(SQUARED), h, z) == 0.0


def test_loss_fuzz_always_in_unit_interval():
    rng = np.random.default_rng(0)
    losses = [LossFn(ZERO_ONE), LossFn(CROSS_ENTROPY), LossFn(SQUARED)]
    n = 0
    for _ in range(200):
        d = rng.integers(1, 5)
        h = Hypothesis(kind=LOGISTIC, weights=rng.normal(size=d) * 10, bias=float(rng.normal() * 10))
        X = rng.normal(size=(17, d)) * 5
        y = rng.integers(0, 2, size=17)
        for lf in losses:
            vals = loss_values(lf, h, X, y)
            assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
            n += len(vals)
    assert n >= 10_000


def _central_diff(lf, h, x, y, step=1e-5):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = step
        fp = loss(lf, h, Sample(features=x + e, label=y))
        fm = loss(lf, h, Sample(features=x - e, label=y))
        g[j] = (fp - fm) / (2 * step)
    return g


def test_gradient_matches_finite_differences():
    # 100 random differentiable points, relative error <= 1e-5
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        d = int(rng.integers(1, 4))
        kind = rng.choice([LOGISTIC, LINEAR])
        if kind == LOGISTIC:
            h = Hypothesis(kind=LOGISTIC, weights=rng.normal(size=d), bias=float(rng.normal()))
            lf = LossFn(rng.choice([CROSS_ENTROPY, SQUARED]))
            y = int(rng.integers(0, 2)) if lf.kind == CROSS_ENTROPY else float(rng.uniform())
        else:
            C = int(rng.integers(2, 4))
            h = Hypothesis(kind=LINEAR, weights=rng.normal(size=(C, d)), bias=rng.normal(size=C))
            lf = LossFn(CROSS_ENTROPY)
            y = int(rng.integers(0, C))
        x = rng.normal(size=d)
        raw_ok = 0.0 < loss(lf, h, Sample(features=x, label=y)) < 1.0
        if not raw_ok:
            continue  # clipped region: gradient is 0 by construction, FD may straddle the kink
        g = loss_gradient(lf, h, Sample(features=x, label=y))
        fd = _central_diff(lf, h, x, y)
        denom = max(np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(g - fd) / denom <= 1e-5, (kind, lf.kind, x, y)
        checked += 1


def test_gradient_zero_at_squared_minimizer():
    h = Hypothesis(kind=LOGISTIC, weights=np.array([2.0]), bias=0.0)
    z = Sample(features=np.array([0.0]), label=0.5)
    g = loss_gradient(LossFn(SQUARED), h, z)
    assert np.allclose(g, 0.0)


def test_gradient_constant_lookup_is_zero():
    grid = np.array([[0.0], [1.0], [2.0]])
    h = Hypothesis(kind=LOOKUP, weights=np.array([1, 1, 1]), grid=grid)
    g = loss_gradient(LossFn(ZERO_ONE), h, Sample(features=np.array([1.0]), label=0))
    assert np.allclose(g, 0.0)


def test_gradient_unsupported_for_zero_one():
    h = logistic_h()
    with pytest.raises(UnsupportedGradientError):
        loss_gradient(LossFn(ZERO_ONE), h, Sample(features=np.array([1.0, 1.0]), label=0))


def test_dimension_mismatch_rejected():
    h = logistic_h()
    with pytest.raises(DimensionMismatchError):
        loss(LossFn(ZERO_ONE), h, Sample(features=np.array([1.0, 2.0, 3.0]), label=1))


def test_lookup_table_off_grid_rejected():
    grid = np.array([[0.0], [1.0]])
    h = Hypothesis(kind=LOOKUP, weights=np.array([0, 1]), grid=grid)
    assert loss(LossFn(ZERO_ONE), h, Sample(features=np.array([1.0]), label=1)) == 0.0
    with pytest.raises(ValueError):
        loss(LossFn(ZERO_ONE), h, Sample(features=np.array([0.5]), label=1))


def test_hypothesis_json_round_trip():
    for h in (logistic_h(), linear_h()):
        h2 = Hypothesis.from_json_dict(h.to_json_dict())
        assert h2.kind == h.kind
        assert np.array_equal(h2.weights, h.weights)
        assert h2.cache_key() == h.cache_key()


def test_nonfinite_weights_rejected():
    with pytest.raises(ValueError):
        Hypothesis(kind=LOGISTIC, weights=np.array([np.nan]), bias=0.0)
    with pytest.raises(ValueError):
        Sample(features=np.array([np.inf]), label=0)


def test_curvature_bound_scales_with_weights():
    h1 = Hypothesis(kind=LOGISTIC, weights=np.array([1.0, 0.0]), bias=0.0)
    h2 = Hypothesis(kind=LOGISTIC, weights=np.array([2.0, 0.0]), bias=0.0)
    b1 = curvature_bound(LossFn(CROSS_ENTROPY), h1)
    b2 = curvature_bound(LossFn(CROSS_ENTROPY), h2)
    assert b1 > 0 and abs(b2 - 4 * b1) < 1e-12
