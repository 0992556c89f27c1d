"""Experiment configuration loaded from YAML files.

Keys missing from a file take the defaults below; command-line flags
override file values. See ``configs/desk.yaml`` for a commented example.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..adaptation import AdaptConfig
from ..corruption import NoiseId, NoiseSchedule
from ..network import PROFILES
from ..sensorsim import SceneConfig
from ..training import TrainConfig
from ..validation import check_seeds

CONFIG_DIR = Path(__file__).parent / "configs"
PROTOCOLS = ("stationary", "single-shift", "continual")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"            # "synthetic" or "kitti"
    train_seeds: tuple = (100, 101, 102, 103)
    train_length: int = 501
    proxy_seed: int = 5000
    proxy_length: int = 40
    test_seed_offset: int = 900
    scene: dict = field(default_factory=dict)     # SceneConfig overrides
    kitti: dict = field(default_factory=dict)     # {"train": [seq, ...], "test": seq}


@dataclass(frozen=True)
class ContinualConfig:
    length: int = 601
    cycles: int = 2
    lead_in: int = 0
    schedule: tuple | None = None        # explicit episodes override the cyclic default


@dataclass(frozen=True)
class SingleShiftConfig:
    length: int = 1101
    t0: int = 220
    t1: int = 880
    noise: str = "blur"


@dataclass(frozen=True)
class StationaryConfig:
    length: int = 301
    epochs: int = 1
    noises: tuple | None = None          # defaults to the experiment noises


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    profile: str = "desk"
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    noises: tuple = ("blur", "brightness", "contrast")
    severity: int = 3
    protocol: str = "continual"
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig(lr=1e-3, epochs=30, batch_size=16)
    train_stage2: TrainConfig = TrainConfig(lr=3e-3, epochs=60, batch_size=64)
    adapt: AdaptConfig = AdaptConfig(eta=1e-2, optimizer="sgd")
    continual: ContinualConfig = ContinualConfig()
    single_shift: SingleShiftConfig = SingleShiftConfig()
    stationary: StationaryConfig = StationaryConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    workers: int = 1
    threads: int = 1
    out: str = "runs/desk"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        try:
            object.__setattr__(self, "seeds", tuple(check_seeds(self.seeds)))
            noises = tuple(NoiseId.parse(n).name.lower() for n in self.noises)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not noises or "clean" in noises:
            raise ConfigError("noises must list at least one corruption and exclude 'clean'")
        object.__setattr__(self, "noises", noises)
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity must be in 1..5")
        if self.workers < 1 or self.threads < 1:
            raise ConfigError("workers and threads must be >= 1")
        ss = self.single_shift
        if not 0 < ss.t0 < ss.t1 <= ss.length:
            raise ConfigError("single_shift needs 0 < t0 < t1 <= length")
        self.scene(0, 2)  # validates scene overrides against the profile
        if self.data.source == "kitti":
            self._check_kitti()
        elif self.data.source != "synthetic":
            raise ConfigError(f"unknown data source {self.data.source!r}")

    def _check_kitti(self):
        k = self.data.kitti
        seqs = list(k.get("train", [])) + ([k["test"]] if "test" in k else [])
        if not seqs or "test" not in k:
            raise ConfigError("kitti source needs 'train' sequences and a 'test' sequence")
        for seq in seqs:
            for key in ("image_dir", "pose_file", "imu_file"):
                if key not in seq:
                    raise ConfigError(f"kitti sequence missing {key!r}")
                if not Path(seq[key]).exists():
                    raise ConfigError(f"referenced file does not exist: {seq[key]}")

    # ---- derived settings

    @property
    def network(self):
        return PROFILES[self.profile]

    def scene(self, seed: int, T: int) -> SceneConfig:
        h, w = self.network.image_size
        overrides = dict(self.data.scene)
        unknown = set(overrides) - {f.name for f in dataclasses.fields(SceneConfig)}
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        overrides.setdefault("imu_rate", self.network.r_imu - 1)
        try:
            sc = SceneConfig(**{**overrides, "seed": int(seed), "T": int(T), "height": h, "width": w})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid scene settings: {e}") from None
        if sc.r_imu != self.network.r_imu:
            raise ConfigError(f"scene imu_rate gives {sc.r_imu} samples per window, "
                              f"profile {self.profile!r} expects {self.network.r_imu}")
        return sc

    def adapt_config(self, seed: int, eta: float | None = None) -> AdaptConfig:
        d = self.adapt.to_dict()
        d["seed"] = int(seed)
        if eta is not None:
            d["eta"] = float(eta)
        return AdaptConfig(**d)

    def continual_schedule(self) -> NoiseSchedule:
        c = self.continual
        if c.schedule is not None:
            return NoiseSchedule.from_list(c.length, c.schedule)
        return NoiseSchedule.cyclic(c.length, self.noises, c.cycles, c.lead_in, self.severity)

    def single_shift_schedule(self) -> NoiseSchedule:
        s = self.single_shift
        return NoiseSchedule.single_shift(s.length, s.t0, s.t1, s.noise, self.severity)

    def stationary_noises(self) -> tuple:
        return tuple(self.stationary.noises or self.noises)

    # ---- serialization

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            d[f.name] = _plain(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(dict(d or {}))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"data": DataConfig, "train": TrainConfig, "train_stage2": TrainConfig,
                  "adapt": AdaptConfig, "continual": ContinualConfig,
                  "single_shift": SingleShiftConfig, "stationary": StationaryConfig,
                  "finetune": FinetuneConfig}
        defaults = cls()
        kwargs = {}
        for key, value in d.items():
            if key in nested:
                base = getattr(defaults, key)
                base = base.to_dict() if hasattr(base, "to_dict") else dataclasses.asdict(base)
                sub = dict(value or {})
                bad = set(sub) - set(base)
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                merged = {**base, **sub}
                for k, v in merged.items():
                    if isinstance(v, list) and k != "scene":
                        merged[k] = tuple(v)
                try:
                    kwargs[key] = nested[key](**merged)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"invalid {key!r} section: {e}") from None
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.from_dict(d)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the built-in desk defaults.

    A bare name such as ``golden`` resolves to a shipped config.
    """
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file() and (CONFIG_DIR / f"{path}.yaml").is_file():
        p = CONFIG_DIR / f"{path}.yaml"
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = yaml.safe_load(p.read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{p}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return ExperimentConfig.from_dict(d)


def parse_schedule(text: str, T: int) -> NoiseSchedule:
    """Schedule from an inline YAML/JSON list or a file holding one."""
    p = Path(text)
    src = p.read_text() if p.exists() else text
    try:
        items = yaml.safe_load(src)
    except yaml.YAMLError as e:
        raise ConfigError(f"bad schedule: {e}") from None
    if isinstance(items, dict) and "episodes" in items:
        T = int(items.get("T", T))
        items = items["episodes"]
    if not isinstance(items, list):
        raise ConfigError("schedule must be a list of {start, end, noise, severity}")
    try:
        return NoiseSchedule.from_list(T, items)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad schedule: {e}") from None
