"""Parameter containers, toy convolutional networks and optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Anything with named parameter tensors."""

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters()
        for name, p in params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {key!r}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr


class Conv(Module):
    """Stride-1 same-padded convolution layer."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator | None, zero: bool = False):
        if zero or rng is None:
            w = np.zeros((c_out, c_in, k, k))
        else:
            # He init for rectifier nets
            w = rng.normal(0.0, math.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


class ToyNet(Module):
    """Backbone of 3x3 conv+ReLU blocks followed by a 1x1 classifier head.

    The backbone output (after the last rectifier) is the distillation feature.
    """

    def __init__(self, widths: list[int], n_classes: int, rng: np.random.Generator, role: str = "teacher",
                 in_channels: int = 3):
        if role not in ("teacher", "student"):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.widths = list(widths)
        self.n_classes = n_classes
        self.blocks = []
        c = in_channels
        for w in widths:
            self.blocks.append(Conv(c, w, 3, rng))
            c = w
        self.head = Conv(c, n_classes, 1, rng)

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def named_parameters(self):
        out = {}
        for i, b in enumerate(self.blocks):
            for k, v in b.named_parameters().items():
                out[f"block{i}.{k}"] = v
        for k, v in self.head.named_parameters().items():
            out[f"head.{k}"] = v
        return out

    def features(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = ad.relu(b(x))
        return x

    def classify(self, feat: Tensor) -> Tensor:
        return self.head(feat)

    def __call__(self, x: Tensor) -> Tensor:
        return self.classify(self.features(x))


# ---------------------------------------------------------------------------
# optimizers

def cosine_lr(step: int, total: int, base: float, final: float = 0.0) -> float:
    """Cosine decay from ``base`` at step 0 toward ``final`` at ``total``."""
    if total <= 1:
        return base
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * step / total))


def poly_lr(step: int, total: int, base: float, power: float = 0.9) -> float:
    if total <= 0:
        return base
    return base * (1.0 - step / total) ** power


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class SGD:
    params: list[Tensor]
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    buf: list = field(default_factory=list)

    def __post_init__(self):
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data -= lr * b

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
