from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from litevio.estimator import TestTimeAdapter, VIOEstimator
from litevio.corruption import NoiseSchedule, apply_schedule
from litevio.sensorsim import SceneConfig, generate_stream, window
from litevio.validation import check_seeds, check_stream, check_windows
from litevio.geometry import Trajectory
from litevio.network import TINY

FAST = dict(profile="tiny", lr=1e-3, epochs=2, batch_size=8, stage2_epochs=2, stage2_batch_size=8, patience=0)


@pytest.fixture(scope="module")
def streams():
    return [generate_stream(SceneConfig(seed=s, T=20, height=16, width=16, imu_rate=4)) for s in (0, 1)]


@pytest.fixture(scope="module")
def fitted(streams):
    return VIOEstimator(**FAST).fit(streams)


def arrays(stream):
    ws = [window(stream, t) for t in range(stream.T - 1)]
    return np.stack([w.image_pair for w in ws]), np.stack([w.imu for w in ws]), stream.deltas()


def chunk(stream, a, b):
    gt = Trajectory(stream.gt.poses[a:b], stream.gt.timestamps[a:b])
    return replace(stream, frames=stream.frames[a:b], imu=stream.imu[a:b - 1], gt=gt)


def test_params_and_clone():
    est = VIOEstimator(**FAST)
    params = est.get_params()
    assert params["profile"] == "tiny" and params["epochs"] == 2
    c = clone(est)
    assert c.get_params() == params and c is not est
    c.set_params(lr=5e-4)
    assert c.lr == 5e-4 and est.lr == 1e-3


def test_unfitted_raises(streams):
    with pytest.raises(NotFittedError):
        VIOEstimator().predict(streams[0])
    with pytest.raises(NotFittedError):
        TestTimeAdapter().predict(streams[0])


def test_fit_on_streams(fitted, streams):
    assert fitted.n_windows_ == 38 and len(fitted.history_) == 2
    pred = fitted.predict(streams[0])
    assert pred.shape == (19, 6) and np.all(np.isfinite(pred))
    assert fitted.predict_inertial(streams[0]).shape == (19, 6)


def test_window_and_stream_predictions_agree(fitted, streams):
    pairs, imu, _ = arrays(streams[1])
    a = fitted.predict((pairs, imu))
    b = fitted.predict(streams[1])
    assert np.allclose(a, b, atol=1e-6)
    assert np.allclose(fitted.predict(window(streams[1], 3)), b[3:4], atol=1e-6)


def test_array_fit_matches_stream_fit(fitted, streams):
    pairs = np.concatenate([arrays(s)[0] for s in streams])
    imu = np.concatenate([arrays(s)[1] for s in streams])
    y = np.concatenate([arrays(s)[2] for s in streams])
    est = VIOEstimator(**FAST).fit((pairs, imu), y)
    assert np.allclose(est.predict(streams[0]), fitted.predict(streams[0]), atol=1e-5)
    with pytest.raises(ValueError):
        VIOEstimator(**FAST).fit((pairs, imu))


def test_score_is_r2(fitted, streams):
    pairs, imu, y = arrays(streams[0])
    assert np.isfinite(fitted.score((pairs, imu), y))


def test_bad_inputs(fitted):
    with pytest.raises(ValueError):
        VIOEstimator(profile="huge").fit([generate_stream(SceneConfig(seed=0, T=5))])
    with pytest.raises(ValueError):
        fitted.predict(generate_stream(SceneConfig(seed=0, T=5)))
    with pytest.raises(TypeError):
        check_stream(np.zeros(3))
    with pytest.raises(ValueError):
        check_windows(np.zeros((2, 6, 16, 16)), np.zeros((3, 5, 6)))
    with pytest.raises(ValueError):
        check_windows(np.full((1, 6, 16, 16), np.nan), np.zeros((1, 5, 6)))
    with pytest.raises(ValueError):
        check_windows(np.zeros((1, 6, 16, 16)), np.zeros((1, 5, 6)), TINY, np.zeros((2, 6)))
    with pytest.raises(ValueError):
        check_seeds([1, 1])
    assert check_seeds(3) == [3]


def test_save_load(fitted, streams, tmp_path):
    back = VIOEstimator.load(fitted.save(tmp_path / "m.pt"))
    assert back.get_params() == fitted.get_params()
    assert np.array_equal(back.predict(streams[0]), fitted.predict(streams[0]))


def test_adapter_zero_eta_is_frozen(fitted, streams):
    tta = TestTimeAdapter(model=fitted, eta=0.0, proxy_samples=4).fit(streams[0])
    test = generate_stream(SceneConfig(seed=9, T=20, height=16, width=16, imu_rate=4))
    blurred, _ = apply_schedule(test, NoiseSchedule.single_shift(20, 5, 15, "blur"), seed=0)
    assert np.array_equal(tta.predict(blurred), fitted.predict(blurred))
    assert len(tta.trace_) == 19 and len(tta.match(blurred)) == 19


def test_adapter_chunks_form_one_run(fitted, streams):
    test = generate_stream(SceneConfig(seed=9, T=21, height=16, width=16, imu_rate=4))
    blurred, _ = apply_schedule(test, NoiseSchedule.single_shift(21, 0, 21, "blur"), seed=0)
    params = dict(model=fitted, eta=1e-2, proxy_samples=4, gating=False)
    whole = TestTimeAdapter(**params).fit(streams[0])
    a = whole.predict(blurred)
    parts = TestTimeAdapter(**params).fit(streams[0])
    first, second = chunk(blurred, 0, 11), chunk(blurred, 10, 21)
    b = np.concatenate([parts.predict(first), parts.predict(second)])
    assert np.array_equal(a, b)
    # the source model is never touched
    assert len(fitted.network_.bn_dictionary) == 0
    parts.reset()
    assert len(parts.trace_) == 0
