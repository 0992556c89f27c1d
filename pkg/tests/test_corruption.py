import numpy as np
import pytest

from litevio.corruption import (
    BRIGHTNESS_OFFSET, Episode, NoiseId, NoiseSchedule, apply_schedule, corrupt, transition_labels,
)
from litevio.sensorsim import SceneConfig, generate_stream

NOISES = [n for n in NoiseId if n != NoiseId.CLEAN]


@pytest.fixture(scope="module")
def img():
    return np.random.default_rng(0).uniform(0, 1, (3, 32, 48)).astype(np.float32)


@pytest.mark.parametrize("severity", [1, 3, 5])
def test_clean_is_identity(img, severity):
    out = corrupt(img, NoiseId.CLEAN, severity)
    assert out is img


@pytest.mark.parametrize("severity", [1, 2, 3, 4, 5])
def test_brightness_closed_form(severity):
    flat = np.full((3, 8, 8), 0.5)
    out = corrupt(flat, "brightness", severity)
    assert np.allclose(out, min(1.0, 0.5 + BRIGHTNESS_OFFSET[severity - 1]), atol=1e-12)


@pytest.mark.parametrize("noise", NOISES)
def test_shape_range_and_determinism(img, noise):
    a = corrupt(img, noise, 3, seed=9, frame_index=4)
    b = corrupt(img, noise, 3, seed=9, frame_index=4)
    assert a.shape == img.shape and a.dtype == img.dtype
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a, img)


@pytest.mark.parametrize("noise", ["rain", "snow", "multiplicative"])
def test_stochastic_noise_depends_on_seed_and_frame(img, noise):
    a = corrupt(img, noise, 3, seed=1, frame_index=0)
    assert not np.array_equal(a, corrupt(img, noise, 3, seed=2, frame_index=0))
    assert not np.array_equal(a, corrupt(img, noise, 3, seed=1, frame_index=1))


@pytest.mark.parametrize("noise", NOISES)
def test_severity_increases_distortion(img, noise):
    dist = [np.mean(np.abs(corrupt(img, noise, s, seed=3) - img)) for s in (1, 5)]
    assert dist[1] > dist[0]


def test_bad_arguments(img):
    with pytest.raises(ValueError):
        corrupt(img, "blur", 0)
    with pytest.raises(ValueError):
        corrupt(img, "fog", 3)
    assert NoiseId.parse("Bright") == NoiseId.BRIGHTNESS
    assert NoiseId.parse(2) == NoiseId.BLUR


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(10, (Episode(5, 12, NoiseId.BLUR),))
    with pytest.raises(ValueError):
        NoiseSchedule(10, (Episode(0, 6, NoiseId.BLUR), Episode(5, 8, NoiseId.RAIN)))
    with pytest.raises(ValueError):
        NoiseSchedule(10, (Episode(0, 6, NoiseId.BLUR, severity=6),))


@pytest.fixture(scope="module")
def small_stream():
    return generate_stream(SceneConfig(seed=0, T=40, height=16, width=16))


def test_empty_schedule_is_identity(small_stream):
    out, labels = apply_schedule(small_stream, NoiseSchedule(small_stream.T), seed=0)
    assert np.array_equal(out.frames, small_stream.frames)
    assert not labels.any()


def test_fig7_style_episode():
    fps = 10
    s = generate_stream(SceneConfig(seed=1, T=1101, height=16, width=16))
    sched = NoiseSchedule.single_shift(s.T, 22 * fps, 88 * fps, "blur")
    out, labels = apply_schedule(s, sched, seed=0)
    assert labels[:220].sum() == 0 and labels[880:].sum() == 0
    assert np.all(labels[220:880] == NoiseId.BLUR)
    assert np.array_equal(out.frames[:220], s.frames[:220])
    assert not np.array_equal(out.frames[220], s.frames[220])


def test_label_histogram_counting_oracle(small_stream, rng):
    for _ in range(20):
        cuts = np.sort(rng.choice(np.arange(1, small_stream.T), 4, replace=False))
        eps = [Episode(int(cuts[0]), int(cuts[1]), NoiseId(int(rng.integers(1, 8)))),
               Episode(int(cuts[2]), int(cuts[3]), NoiseId(int(rng.integers(1, 8))))]
        _, labels = apply_schedule(small_stream, NoiseSchedule(small_stream.T, tuple(eps)), seed=1)
        expected = {}
        for e in eps:
            expected[int(e.noise)] = expected.get(int(e.noise), 0) + e.end - e.start
        expected[0] = small_stream.T - sum(e.end - e.start for e in eps)
        counts = {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))}
        assert counts == {k: v for k, v in expected.items() if v}


def test_apply_schedule_matches_per_frame_corrupt(small_stream):
    sched = NoiseSchedule(small_stream.T, (Episode(3, 9, NoiseId.RAIN, 4),))
    out, _ = apply_schedule(small_stream, sched, seed=5)
    for t in range(3, 9):
        assert np.array_equal(out.frames[t], corrupt(small_stream.frames[t], "rain", 4, 5, t))


def test_cyclic_schedule():
    sched = NoiseSchedule.cyclic(601, ["blur", "brightness", "contrast"], cycles=2)
    lengths = [e.end - e.start for e in sched.episodes]
    assert len(lengths) == 6 and sum(lengths) == 601 and max(lengths) - min(lengths) <= 1
    assert [e.noise.name for e in sched.episodes[:3]] == ["BLUR", "BRIGHTNESS", "CONTRAST"]
    assert sched.episodes[0].start == 0 and sched.episodes[-1].end == 601
    rt = NoiseSchedule.from_list(601, sched.to_list())
    assert rt == sched


def test_transition_labels_use_newer_frame():
    assert list(transition_labels([0, 0, 2, 2, 0])) == [0, 2, 2, 0]
