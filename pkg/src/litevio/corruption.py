"""Visual corruptions with five severity levels and time-indexed schedules.

All corruptions act on float images of shape (c, h, w) with values in
[0, 1] and return a clipped array of the same shape. Stochastic noises draw
from a Philox generator keyed by ``(seed, frame_index)`` so frames can be
corrupted in any order.

Severity tables (index 0 is severity 1):

=============  =====================================================
multiplicative per-pixel gain ~ U[1-a, 1+a], a = .15 .25 .35 .5 .65
blur           gaussian sigma (px at 64 px width) 1.0 2.0 3.5 5.0 6.5
rain           streak count 20 35 50 70 90, length 6 8 10 12 14 px,
               global dimming .05 .08 .1 .12 .15
snow           flake count 40 70 100 140 180, radius 1 1 1 2 2 px,
               whitening haze .05 .08 .1 .14 .18
shadow         polygons 1 1 2 2 3, darkening factor .7 .6 .55 .5 .45
brightness     additive offset .1 .2 .3 .4 .5
contrast       gain about the channel mean .6 .45 .3 .2 .12
=============  =====================================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.draw import disk, line_aa, polygon


class NoiseId(IntEnum):
    CLEAN = 0
    MULTIPLICATIVE = 1
    BLUR = 2
    RAIN = 3
    SNOW = 4
    SHADOW = 5
    BRIGHTNESS = 6
    CONTRAST = 7

    @classmethod
    def parse(cls, value) -> "NoiseId":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            aliases = {"MULTI": "MULTIPLICATIVE", "BRIGHT": "BRIGHTNESS", "CONT": "CONTRAST"}
            key = aliases.get(key, key)
            try:
                return cls[key]
            except KeyError:
                raise ValueError(f"unknown noise {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown noise id {value!r}") from None


DEFAULT_SEVERITY = 3

MULTIPLICATIVE_RANGE = (0.15, 0.25, 0.35, 0.5, 0.65)
BLUR_SIGMA = (1.0, 2.0, 3.5, 5.0, 6.5)
RAIN = dict(count=(20, 35, 50, 70, 90), length=(6, 8, 10, 12, 14), dim=(0.05, 0.08, 0.1, 0.12, 0.15))
SNOW = dict(count=(40, 70, 100, 140, 180), radius=(1, 1, 1, 2, 2), haze=(0.05, 0.08, 0.1, 0.14, 0.18))
SHADOW = dict(count=(1, 1, 2, 2, 3), factor=(0.7, 0.6, 0.55, 0.5, 0.45))
BRIGHTNESS_OFFSET = (0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_GAIN = (0.6, 0.45, 0.3, 0.2, 0.12)


def _rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), frame_index & (2**64 - 1)]))


def _scale(img) -> float:
    return img.shape[-1] / 64.0


def _multiplicative(img, s, rng):
    a = MULTIPLICATIVE_RANGE[s]
    return img * rng.uniform(1 - a, 1 + a, img.shape[1:])[None]


def _blur(img, s, rng):
    sigma = BLUR_SIGMA[s] * _scale(img)
    return gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")


def _rain(img, s, rng):
    c, h, w = img.shape
    out = img * (1 - RAIN["dim"][s])
    mask = np.zeros((h, w))
    L = int(round(RAIN["length"][s] * _scale(img)))
    slant = rng.uniform(-0.3, 0.3)
    for _ in range(int(RAIN["count"][s] * _scale(img) ** 2)):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        r1 = min(h - 1, r0 + L)
        c1 = int(np.clip(c0 + slant * L, 0, w - 1))
        rr, cc, val = line_aa(r0, c0, r1, c1)
        np.maximum.at(mask, (rr, cc), val)
    return out * (1 - 0.7 * mask) + 0.8 * 0.7 * mask


def _snow(img, s, rng):
    c, h, w = img.shape
    out = img * (1 - SNOW["haze"][s]) + SNOW["haze"][s]
    mask = np.zeros((h, w), dtype=bool)
    rad = max(1, int(round(SNOW["radius"][s] * _scale(img))))
    for _ in range(int(SNOW["count"][s] * _scale(img) ** 2)):
        rr, cc = disk((rng.integers(0, h), rng.integers(0, w)), rad, shape=(h, w))
        mask[rr, cc] = True
    return np.where(mask[None], 0.95, out)


def _shadow(img, s, rng):
    c, h, w = img.shape
    shade = np.ones((h, w))
    for _ in range(SHADOW["count"][s]):
        n = rng.integers(3, 6)
        rows = rng.uniform(h * 0.35, h, n)
        cols = rng.uniform(-0.2 * w, 1.2 * w, n)
        rr, cc = polygon(rows, cols, shape=(h, w))
        shade[rr, cc] = SHADOW["factor"][s]
    return img * shade[None]


def _brightness(img, s, rng):
    return img + BRIGHTNESS_OFFSET[s]


def _contrast(img, s, rng):
    mean = img.mean(axis=(1, 2), keepdims=True)
    return (img - mean) * CONTRAST_GAIN[s] + mean


_CORRUPTIONS = {
    NoiseId.MULTIPLICATIVE: _multiplicative,
    NoiseId.BLUR: _blur,
    NoiseId.RAIN: _rain,
    NoiseId.SNOW: _snow,
    NoiseId.SHADOW: _shadow,
    NoiseId.BRIGHTNESS: _brightness,
    NoiseId.CONTRAST: _contrast,
}


def corrupt(img: np.ndarray, noise, severity: int = DEFAULT_SEVERITY, seed: int = 0,
            frame_index: int = 0) -> np.ndarray:
    noise = NoiseId.parse(noise)
    if not 1 <= int(severity) <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    if noise == NoiseId.CLEAN:
        return img
    src = np.asarray(img)
    out = _CORRUPTIONS[noise](src.astype(np.float64), int(severity) - 1, _rng(seed, frame_index))
    return np.clip(out, 0.0, 1.0).astype(src.dtype)


@dataclass(frozen=True)
class Episode:
    start: int
    end: int        # exclusive
    noise: NoiseId
    severity: int = DEFAULT_SEVERITY

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "noise": self.noise.name.lower(),
                "severity": self.severity}


@dataclass(frozen=True)
class NoiseSchedule:
    """Non-overlapping corruption episodes over frames ``[0, T)``; ends are exclusive."""
    T: int
    episodes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        eps = tuple(e if isinstance(e, Episode) else Episode(
            int(e["start"]), int(e["end"]), NoiseId.parse(e["noise"]),
            int(e.get("severity", DEFAULT_SEVERITY))) for e in self.episodes)
        object.__setattr__(self, "episodes", eps)
        prev_end = 0
        for e in eps:
            if not 0 <= e.start < e.end <= self.T:
                raise ValueError(f"episode [{e.start}, {e.end}) outside [0, {self.T})")
            if e.start < prev_end:
                raise ValueError("episodes must be sorted and non-overlapping")
            if not 1 <= e.severity <= 5:
                raise ValueError(f"severity must be in 1..5, got {e.severity}")
            prev_end = e.end

    def labels(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=int)
        for e in self.episodes:
            out[e.start:e.end] = int(e.noise)
        return out

    def severities(self) -> np.ndarray:
        out = np.zeros(self.T, dtype=int)
        for e in self.episodes:
            out[e.start:e.end] = e.severity
        return out

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.episodes]

    @classmethod
    def from_list(cls, T: int, items) -> "NoiseSchedule":
        return cls(T, tuple(items))

    @classmethod
    def single_shift(cls, T: int, t0: int, t1: int, noise, severity=DEFAULT_SEVERITY):
        return cls(T, (Episode(t0, t1, NoiseId.parse(noise), severity),))

    @classmethod
    def cyclic(cls, T: int, noises, cycles: int = 2, lead_in: int = 0, severity=DEFAULT_SEVERITY):
        """Equal-length segments cycling through ``noises`` after a clean lead-in."""
        noises = [NoiseId.parse(n) for n in noises]
        n_seg = len(noises) * cycles
        bounds = np.linspace(lead_in, T, n_seg + 1).round().astype(int)
        eps = [Episode(int(a), int(b), noises[i % len(noises)], severity)
               for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])) if b > a]
        return cls(T, tuple(eps))


def transition_labels(frame_labels) -> np.ndarray:
    """Label of each transition ``t -> t+1``: the label of the newer frame."""
    return np.asarray(frame_labels)[1:]


def apply_schedule(stream, sched: NoiseSchedule, seed: int = 0):
    """Corrupt a stream's frames per schedule; returns ``(stream', frame_labels)``."""
    from .sensorsim import with_frames

    if sched.T != stream.T:
        raise ValueError(f"schedule covers {sched.T} frames, stream has {stream.T}")
    frames = stream.frames.copy()
    for e in sched.episodes:
        for t in range(e.start, e.end):
            frames[t] = corrupt(stream.frames[t], e.noise, e.severity, seed, t)
    out = with_frames(stream, frames)
    out.meta["schedule"] = sched.to_list()
    return out, sched.labels()
