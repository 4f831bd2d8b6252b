import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robustbf import beamformers as bf
from robustbf.estimators import MetaBankBeamformer, RobustWMMSEBeamformer

from _tiny import sampler


@pytest.fixture(scope="module")
def tasks():
    return sampler().batch(6, 42)


def small_bank_model(**kw):
    base = dict(n_bases=2, rank=2, delta=0.25, hidden=(8, 8, 8), epochs=1, batch_size=3, n_steps=2,
                snr_db=10.0, random_state=3)
    base.update(kw)
    return MetaBankBeamformer(**base)


@pytest.mark.parametrize("method", ["wmmse", "swmmse", "robust_wmmse_sample"])
def test_baseline_predict_shapes_and_power(tasks, method):
    est = RobustWMMSEBeamformer(method=method, snr_db=10.0, iters=10).fit()
    V = est.predict(tasks)
    assert V.shape == (6, 4, 2)
    np.testing.assert_allclose(np.sum(np.abs(V) ** 2, axis=(1, 2)), 1.0, rtol=1e-12)
    assert np.isfinite(est.score(tasks))


def test_baseline_matches_direct_solver(tasks):
    est = RobustWMMSEBeamformer(snr_db=10.0, iters=7).fit()
    t = tasks[0]
    hbar = t.support.mean(axis=1)
    sys = bf.SystemParams.from_snr_db(10.0)
    from robustbf.online import task_statistics
    _, R_S = task_statistics(t)
    direct = bf.robust_wmmse(bf.StatModel(hbar, R_S), sys, iters=7).V_value
    assert np.array_equal(est.predict([t])[0], direct)


def test_array_input_equals_task_input(tasks):
    est = RobustWMMSEBeamformer(method="wmmse", iters=5).fit()
    S = np.stack([t.support for t in tasks])
    assert np.array_equal(est.predict(S), est.predict(tasks))
    with pytest.raises(ValueError):
        est.score(S)


def test_input_validation():
    est = RobustWMMSEBeamformer().fit()
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 2, 2, 4)))          # not complex
    bad = np.ones((1, 2, 2, 4), dtype=complex)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.predict(bad)
    with pytest.raises(ValueError):
        RobustWMMSEBeamformer(method="magic").fit()


def test_unfitted_raises(tasks):
    with pytest.raises(NotFittedError):
        RobustWMMSEBeamformer().predict(tasks)
    with pytest.raises(NotFittedError):
        small_bank_model().predict(tasks)


def test_params_round_trip_through_clone():
    est = small_bank_model(n_bases=3)
    c = clone(est)
    assert c.get_params() == est.get_params()
    c.set_params(n_steps=4)
    assert c.n_steps == 4 and est.n_steps == 2


def test_bank_model_fit_predict_score(tasks):
    est = small_bank_model().fit(tasks)
    assert est.bank_.M == 2 and len(est.training_log_) == 1
    V = est.predict(tasks[:2])
    assert V.shape == (2, 4, 2)
    np.testing.assert_allclose(np.sum(np.abs(V) ** 2, axis=(1, 2)), 1.0, rtol=1e-12)
    s = est.score(tasks)
    assert np.isfinite(s) and s > 0


def test_bank_model_deterministic(tasks):
    a = small_bank_model().fit(tasks)
    b = small_bank_model().fit(tasks)
    for x, y in zip(a.bank_.bases, b.bank_.bases):
        assert np.array_equal(x.data, y.data)
    assert np.array_equal(a.predict(tasks), b.predict(tasks))


def test_bank_model_needs_true_channels(tasks):
    S = np.stack([t.support for t in tasks])
    with pytest.raises(ValueError):
        small_bank_model().fit(S)
