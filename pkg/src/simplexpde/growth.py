"""Small convolutional corrector added to the explicit part of each step."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .field import DomainError

_FIELDS = ("w1", "b1", "w2", "b2", "gamma")


@dataclass(frozen=True)
class ResidualNet:
    """gamma * conv2(tanh(conv1([p; treatment planes]))), 3x3 kernels, replicate padding."""

    w1: object  # (H, K + C, 3, 3)
    b1: object  # (H,)
    w2: object  # (K, H, 3, 3)
    b2: object  # (K,)
    gamma: object = 0.1

    @property
    def num_classes(self) -> int:
        return np.shape(value(self.w2))[0]

    @property
    def num_channels(self) -> int:
        return np.shape(value(self.w1))[1] - self.num_classes

    @property
    def hidden(self) -> int:
        return np.shape(value(self.w1))[0]

    def tensor_fields(self):
        return [n for n in _FIELDS if isinstance(getattr(self, n), ad.Tensor)]

    def with_values(self, **kw) -> "ResidualNet":
        return replace(self, **kw)

    def __call__(self, p, channels):
        return residual_forward(p, channels, self)

    def to_params(self, params: ad.ParamSet, trainable: bool = True):
        for n in _FIELDS:
            params.add(f"net.{n}", value(getattr(self, n)), trainable=trainable, lr_group="network")
        params.constraints["net.gamma"] = ad.Clip(0.0, None)
        params.add_set_constraint(clamp_output_norm)

    @classmethod
    def from_params(cls, vals: dict) -> "ResidualNet":
        return cls(*(vals[f"net.{n}"] for n in _FIELDS))


def residual_forward(p, channels, net: ResidualNet):
    K = np.shape(value(p))[-3]
    ch = np.asarray(channels, dtype=np.float64)
    if K != net.num_classes or ch.shape[-1] != net.num_channels:
        raise DomainError(f"net expects K={net.num_classes}, C={net.num_channels}; got K={K}, C={ch.shape[-1]}")
    H, W = np.shape(value(p))[-2:]
    planes = np.broadcast_to(ch[..., :, None, None], ch.shape + (H, W))
    x = ad.concat([p, planes], axis=-3)
    hidden = ad.tanh(ad.conv3x3(x, net.w1, net.b1))
    return ad.mul(net.gamma, ad.conv3x3(hidden, net.w2, net.b2))


def fan_in_scale(in_channels: int) -> float:
    return 1.0 / np.sqrt(9.0 * in_channels)


def init_residual(seed: int, num_classes: int, num_channels: int, hidden: int = 8,
                  gamma: float = 0.1) -> ResidualNet:
    if hidden < 1:
        raise DomainError("hidden width must be at least 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x6E6574])))
    cin = num_classes + num_channels
    s1, s2 = fan_in_scale(cin), fan_in_scale(hidden)
    w1 = rng.uniform(-s1, s1, size=(hidden, cin, 3, 3))
    b1 = rng.uniform(-s1, s1, size=hidden)
    w2 = rng.uniform(-s2, s2, size=(num_classes, hidden, 3, 3))
    b2 = rng.uniform(-s2, s2, size=num_classes)
    w2, b2 = _clamp_pair(w2, b2)
    return ResidualNet(w1, b1, w2, b2, np.float64(gamma))


def _clamp_pair(w2, b2, bound=1.0):
    """Rescale each output channel so that sum|w| + |b| <= bound (keeps |conv2 . tanh| <= bound)."""
    norm = np.abs(w2).sum(axis=(1, 2, 3)) + np.abs(b2)
    scale = np.where(norm > bound, bound / np.maximum(norm, 1e-300), 1.0)
    return w2 * scale[:, None, None, None], b2 * scale


def clamp_output_norm(params: ad.ParamSet):
    if "net.w2" in params:
        w2, b2 = _clamp_pair(params["net.w2"], params["net.b2"])
        params.set("net.w2", w2)
        params.set("net.b2", b2)
