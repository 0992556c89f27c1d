"""Compact visual-inertial odometry network.

Four sub-networks: a 2-D conv visual encoder over stacked frame pairs, a
1-D conv inertial encoder over the IMU window, a fused decoder on
``x_v || x_i`` and an inertial-only decoder on ``x_i``. Both decoders emit
``[phi(3), v(3)]``.

Parameters are partitioned into the BatchNorm affine pairs of the visual
encoder (``theta_a``, the only tensors touched at test time) and everything
else (``theta_f``). A BN dictionary holds one copy of ``theta_a`` per domain.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MODES = {"train": "batch", "adapt": "instance", "infer": "running"}


class StateError(RuntimeError):
    """Operation not valid in the network's current state."""


@dataclass(frozen=True)
class NetworkConfig:
    """Layer layout. Conv layers are ``(out_channels, kernel, stride)`` triples."""
    in_channels: int = 6
    image_size: tuple = (64, 64)
    r_imu: int = 11
    visual_layers: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (128, 3, 2))
    inertial_layers: tuple = ((32, 3, 1), (64, 3, 1))
    fused_hidden: tuple = (128,)
    inertial_hidden: tuple = (64,)
    slope: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    profile: str = "desk"

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("visual_layers", "inertial_layers"):
            layers = tuple(tuple(int(v) for v in layer) for layer in getattr(self, name))
            if not layers:
                raise ValueError(f"{name} must not be empty")
            object.__setattr__(self, name, layers)
        object.__setattr__(self, "fused_hidden", tuple(int(v) for v in self.fused_hidden))
        object.__setattr__(self, "inertial_hidden", tuple(int(v) for v in self.inertial_hidden))
        if self.in_channels < 1 or self.r_imu < 1 or min(self.image_size) < 1:
            raise ValueError("input dimensions must be positive")
        if self.profile == "paper" and self.parameter_estimate() >= 1_000_000:
            raise ValueError("paper profile exceeds the sub-million parameter budget")

    @property
    def visual_dim(self) -> int:
        return self.visual_layers[-1][0]

    @property
    def inertial_dim(self) -> int:
        return self.inertial_layers[-1][0]

    def parameter_estimate(self) -> int:
        n, c = 0, self.in_channels
        for out, k, _ in self.visual_layers:
            n += c * out * k * k + 2 * out
            c = out
        c = 6
        for out, k, _ in self.inertial_layers:
            n += c * out * k + out
            c = out
        for dims in ((self.visual_dim + self.inertial_dim,) + self.fused_hidden + (6,),
                     (self.inertial_dim,) + self.inertial_hidden + (6,)):
            n += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        return n

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k.endswith("_layers") else
                    list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


DESK = NetworkConfig()
TINY = NetworkConfig(image_size=(16, 16), r_imu=5, visual_layers=((4, 3, 2), (8, 3, 2)),
                     inertial_layers=((4, 3, 1),), fused_hidden=(8,), inertial_hidden=(4,),
                     profile="tiny")
PAPER = NetworkConfig(
    image_size=(256, 512),
    visual_layers=((16, 7, 2), (32, 5, 2), (64, 5, 2), (64, 3, 1), (128, 3, 2),
                   (128, 3, 1), (128, 3, 2), (256, 3, 2)),
    inertial_layers=((64, 3, 1), (128, 3, 1)),
    fused_hidden=(256,),
    inertial_hidden=(352,),
    profile="paper",
)
PROFILES = {"desk": DESK, "paper": PAPER, "tiny": TINY}


class AffineBatchNorm2d(nn.Module):
    """BatchNorm with an explicit statistics source.

    ``stats`` is ``"batch"`` (training; updates running estimates),
    ``"instance"`` (per-sample spatial statistics) or ``"running"``.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def forward(self, x, stats: str, weight=None, bias=None):
        weight = self.weight if weight is None else weight
        bias = self.bias if bias is None else bias
        if stats == "batch":
            self.num_batches_tracked += 1
            return F.batch_norm(x, self.running_mean, self.running_var, weight, bias,
                                training=True, momentum=self.momentum, eps=self.eps)
        if stats == "running":
            if int(self.num_batches_tracked) == 0:
                raise StateError("running statistics are uninitialized; train the network first")
            return F.batch_norm(x, self.running_mean, self.running_var, weight, bias,
                                training=False, eps=self.eps)
        if stats == "instance":
            x = F.instance_norm(x, eps=self.eps)
            return x * weight[None, :, None, None] + bias[None, :, None, None]
        raise ValueError(f"unknown statistics source {stats!r}")


class VisualLayer(nn.Module):
    def __init__(self, cin, cout, k, s, cfg: NetworkConfig):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, stride=s, padding=k // 2, bias=False)
        self.bn = AffineBatchNorm2d(cout, cfg.bn_eps, cfg.bn_momentum)
        self.slope = cfg.slope

    def forward(self, x, stats):
        return F.leaky_relu(self.bn(self.conv(x), stats), self.slope)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers, c = [], cfg.in_channels
        for out, k, s in cfg.visual_layers:
            layers.append(VisualLayer(c, out, k, s, cfg))
            c = out
        self.layers = nn.ModuleList(layers)


class InertialEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers, c = [], 6
        for out, k, s in cfg.inertial_layers:
            layers.append(nn.Conv1d(c, out, k, stride=s, padding=k // 2))
            c = out
        self.convs = nn.ModuleList(layers)
        self.slope = cfg.slope

    def forward(self, imu):
        x = imu.transpose(1, 2)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
        return x.mean(dim=2)


def _mlp(dims, slope) -> nn.Sequential:
    mods = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        mods.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            mods.append(nn.LeakyReLU(slope))
    return nn.Sequential(*mods)


def _valid_range(n: int, k: int, s: int) -> slice:
    # output positions whose receptive field avoids zero padding
    p = k // 2
    n_out = (n + 2 * p - k) // s + 1
    idx = [i for i in range(n_out) if i * s - p >= 0 and i * s - p + k - 1 <= n - 1]
    return slice(idx[0], idx[-1] + 1)


class VIONetwork(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(cfg)
        self.inertial = InertialEncoder(cfg)
        self.fused_decoder = _mlp((cfg.visual_dim + cfg.inertial_dim,) + cfg.fused_hidden + (6,),
                                  cfg.slope)
        self.inertial_decoder = _mlp((cfg.inertial_dim,) + cfg.inertial_hidden + (6,), cfg.slope)
        self.register_buffer("imu_mean", torch.zeros(6))
        self.register_buffer("imu_std", torch.ones(6))
        self.bn_dictionary: list[dict[str, torch.Tensor]] = []
        self.active_entry = 0
        _, k, s = cfg.visual_layers[0]
        self._ddf_rows = _valid_range(cfg.image_size[0], k, s)
        self._ddf_cols = _valid_range(cfg.image_size[1], k, s)

    # ---- parameter partition

    def theta_a_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("visual.") and ".bn." in n]

    def theta_f_names(self) -> list[str]:
        a = set(self.theta_a_names())
        return [n for n, _ in self.named_parameters() if n not in a]

    def theta_a(self) -> list[nn.Parameter]:
        params = dict(self.named_parameters())
        return [params[n] for n in self.theta_a_names()]

    def submodule_params(self, name: str) -> list[nn.Parameter]:
        return list(getattr(self, name).parameters())

    # ---- forward

    def encode_inertial(self, imu: torch.Tensor) -> torch.Tensor:
        return self.inertial((imu - self.imu_mean) / self.imu_std)

    def ddf_from(self, o1: torch.Tensor) -> torch.Tensor:
        """Channel statistics of the first conv output and its activation, per sample."""
        bn = self.visual.layers[0].bn
        if self.bn_dictionary:
            w = self.bn_dictionary[0]["visual.layers.0.bn.weight"]
            b = self.bn_dictionary[0]["visual.layers.0.bn.bias"]
        else:
            w, b = bn.weight, bn.bias
        o1 = o1.detach()
        stats = "running" if int(bn.num_batches_tracked) > 0 else "instance"
        i2 = F.leaky_relu(bn(o1, stats, w.detach(), b.detach()), self.cfg.slope)
        o1 = o1[:, :, self._ddf_rows, self._ddf_cols]
        i2 = i2[:, :, self._ddf_rows, self._ddf_cols]
        parts = [o1.mean(dim=(2, 3)), o1.std(dim=(2, 3), unbiased=False),
                 i2.mean(dim=(2, 3)), i2.std(dim=(2, 3), unbiased=False)]
        return torch.cat(parts, dim=1)

    def forward(self, images: torch.Tensor, imu: torch.Tensor, stats: str = "running"):
        """Return ``(y_fused, y_inertial, ddf)`` for a batch."""
        first = self.visual.layers[0]
        o1 = first.conv(images)
        ddf = self.ddf_from(o1)
        x = F.leaky_relu(first.bn(o1, stats), first.slope)
        for layer in self.visual.layers[1:]:
            x = layer(x, stats)
        x_v = x.mean(dim=(2, 3))
        x_i = self.encode_inertial(imu)
        y_f = self.fused_decoder(torch.cat([x_v, x_i], dim=1))
        y_i = self.inertial_decoder(x_i)
        return y_f, y_i, ddf

    def predict_inertial(self, imu: torch.Tensor) -> torch.Tensor:
        return self.inertial_decoder(self.encode_inertial(imu))

    # ---- BN dictionary

    def active_bn(self) -> dict[str, torch.Tensor]:
        params = dict(self.named_parameters())
        return {n: params[n].detach().clone() for n in self.theta_a_names()}

    def reset_bn_dictionary(self, K: int) -> None:
        """Fresh dictionary of ``K + 1`` entries, all copies of the active affine parameters."""
        snap = self.active_bn()
        self.bn_dictionary = [{n: t.clone() for n, t in snap.items()} for _ in range(K + 1)]
        self.active_entry = 0

    def _check_entry(self, k: int) -> None:
        if not self.bn_dictionary:
            raise StateError("BN dictionary is empty; call reset_bn_dictionary first")
        if not 0 <= k < len(self.bn_dictionary):
            raise IndexError(f"BN entry {k} outside [0, {len(self.bn_dictionary) - 1}]")

    def get_bn_entry(self, k: int) -> dict[str, torch.Tensor]:
        self._check_entry(k)
        return {n: t.clone() for n, t in self.bn_dictionary[k].items()}

    def set_bn_entry(self, k: int, values: dict) -> None:
        self._check_entry(k)
        ref = self.bn_dictionary[k]
        if set(values) != set(ref):
            raise ValueError("BN entry names do not match the visual encoder layout")
        for n, t in values.items():
            t = torch.as_tensor(t)
            if t.shape != ref[n].shape:
                raise ValueError(f"{n}: shape {tuple(t.shape)} != {tuple(ref[n].shape)}")
        self.bn_dictionary[k] = {n: torch.as_tensor(values[n]).to(ref[n]).clone() for n in ref}
        if k == self.active_entry:
            self.load_bn_entry(k)

    def load_bn_entry(self, k: int) -> None:
        self._check_entry(k)
        params = dict(self.named_parameters())
        with torch.no_grad():
            for n, t in self.bn_dictionary[k].items():
                params[n].copy_(t)
        self.active_entry = k

    def store_active_entry(self) -> None:
        """Write the active affine parameters back into the active dictionary slot."""
        self._check_entry(self.active_entry)
        self.bn_dictionary[self.active_entry] = self.active_bn()


def init_network(cfg: NetworkConfig = DESK, seed: int = 0) -> VIONetwork:
    """Deterministic He-style initialization; output layers are zeroed."""
    gen = torch.Generator().manual_seed(int(seed))
    net = VIONetwork(cfg)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, math.sqrt(2.0 / ((1 + cfg.slope ** 2) * fan_in)), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        for head in (net.fused_decoder[-1], net.inertial_decoder[-1]):
            head.weight.zero_()
            head.bias.zero_()
    return net


def param_count(net: VIONetwork) -> dict:
    counts = {name: sum(p.numel() for p in getattr(net, name).parameters())
              for name in ("visual", "inertial", "fused_decoder", "inertial_decoder")}
    total = sum(counts.values())
    bn_affine = sum(2 * layer.bn.weight.numel() for layer in net.visual.layers)
    return {
        **counts,
        "total": total,
        "total_without_inertial_decoder": total - counts["inertial_decoder"],
        "bn_affine": bn_affine,
        "bn_entry_overhead": bn_affine / total,
        "inertial_decoder_share": counts["inertial_decoder"] / total,
    }


def gradients(net: VIONetwork, loss: torch.Tensor, wrt="theta_a") -> dict[str, torch.Tensor]:
    """Gradients of ``loss`` for ``"theta_a"``, ``"all"`` or an explicit list of names."""
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        raise StateError("loss was not computed from a gradient-tracked forward pass")
    params = dict(net.named_parameters())
    if wrt == "theta_a":
        names = net.theta_a_names()
    elif wrt == "all":
        names = list(params)
    else:
        names = list(wrt)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True,
                                retain_graph=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(net: VIONetwork, w, bn_entry: int | None = None, mode: str = "infer"):
    """Single-window forward. Returns numpy ``(y_fused, y_inertial, ddf)``.

    ``mode`` picks the normalization statistics: ``train`` batch, ``adapt``
    the current input's spatial statistics, ``infer`` running estimates.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}")
    cfg = net.cfg
    pair = np.asarray(w.image_pair)
    imu = np.asarray(w.imu)
    if pair.shape != (cfg.in_channels,) + cfg.image_size or imu.shape != (cfg.r_imu, 6):
        raise ValueError(f"window shapes {pair.shape}, {imu.shape} do not match the network config")
    if bn_entry is not None and bn_entry != net.active_entry:
        net.load_bn_entry(bn_entry)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        y_f, y_i, ddf = net(to_tensor(pair[None], dtype), to_tensor(imu[None], dtype), MODES[mode])
    return y_f[0].numpy().astype(float), y_i[0].numpy().astype(float), ddf[0].numpy().astype(float)


# ---- checkpoints

CHECKPOINT_FORMAT = "litevio-checkpoint/1"


def save_checkpoint(net: VIONetwork, path, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": net.cfg.to_dict(),
        "state_dict": {k: v.clone() for k, v in net.state_dict().items()},
        "bn_dictionary": [{n: t.clone() for n, t in e.items()} for e in net.bn_dictionary],
        "active_entry": net.active_entry,
        **extra,
    }
    torch.save(blob, path)
    return path


def load_checkpoint(path) -> tuple[VIONetwork, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise StateError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    net = VIONetwork(NetworkConfig.from_dict(blob["config"]))
    net.load_state_dict(blob["state_dict"])
    net.bn_dictionary = [{n: t.clone() for n, t in e.items()} for e in blob["bn_dictionary"]]
    net.active_entry = blob.get("active_entry", 0)
    if net.bn_dictionary:
        net.load_bn_entry(net.active_entry)
    return net, blob
