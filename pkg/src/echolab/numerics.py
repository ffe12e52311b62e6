"""Small dense-tensor core: layer kinds, reverse-mode gradients and an Adam optimizer.

Tensors are ``torch.Tensor`` values; autograd records the graph. Every network in
the package is assembled from the layer kinds defined here, so the gradient suite
in ``tests/test_numerics.py`` covers all of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    """Input tensor does not match the layer's declared shape rule."""


class ConfigError(ValueError):
    """Unknown layer kind or invalid layer/optimizer configuration."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


def configure_torch(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# layer specs

LAYER_KINDS = ("affine", "conv2d", "upconv2d", "groupnorm", "silu", "time_embedding", "temporal_mix")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    stride: int = 1
    kernel: int = 3
    groups: int = 1
    frames: int = 0
    frequencies: int = 64

    def describe(self) -> str:
        return (f"{self.kind}(in={self.in_dim},out={self.out_dim},stride={self.stride},"
                f"k={self.kernel},g={self.groups},T={self.frames},f={self.frequencies})")


class Affine(nn.Module):
    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        bound = 1.0 / math.sqrt(spec.in_dim)
        self.weight = nn.Parameter(torch.empty(spec.out_dim, spec.in_dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(spec.out_dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.in_dim:
            raise ShapeError(f"affine expects last dim {self.spec.in_dim}, got {tuple(x.shape)}")
        return F.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    """Square-kernel convolution on (B, C, H, W).

    Stride 1 uses "same" padding; stride 2 pads floor(k/2), halving even extents.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__()
        if spec.stride not in (1, 2):
            raise ConfigError(f"conv2d stride must be 1 or 2, got {spec.stride}")
        self.spec = spec
        k = spec.kernel
        bound = 1.0 / math.sqrt(spec.in_dim * k * k)
        self.weight = nn.Parameter(torch.empty(spec.out_dim, spec.in_dim, k, k).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(spec.out_dim))
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(f"conv2d expects (B,{self.spec.in_dim},H,W), got {tuple(x.shape)}")
        return F.conv2d(x, self.weight, self.bias, stride=self.spec.stride, padding=self.padding)


class UpConv2d(nn.Module):
    """Nearest-neighbour x2 upsampling followed by a stride-1 convolution."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        self.conv = Conv2d(LayerSpec("conv2d", spec.in_dim, spec.out_dim, 1, spec.kernel))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ShapeError(f"upconv2d expects (B,C,H,W), got {tuple(x.shape)}")
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class GroupNorm(nn.Module):
    def __init__(self, spec: LayerSpec):
        super().__init__()
        if spec.in_dim % spec.groups:
            raise ConfigError(f"groupnorm: {spec.in_dim} channels not divisible by {spec.groups} groups")
        self.spec = spec
        self.weight = nn.Parameter(torch.ones(spec.in_dim))
        self.bias = nn.Parameter(torch.zeros(spec.in_dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() < 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError(f"groupnorm expects (B,{self.spec.in_dim},...), got {tuple(x.shape)}")
        return F.group_norm(x, self.spec.groups, self.weight, self.bias, eps=1e-5)


class SiLU(nn.Module):
    def __init__(self, spec: LayerSpec | None = None):
        super().__init__()
        self.spec = spec or LayerSpec("silu")

    def forward(self, x: Tensor) -> Tensor:
        return x * torch.sigmoid(x)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of a scalar in [0, 1]; output width is 2 * frequencies.

    Angular frequencies are geometric between 1 and 16*pi so that the unit
    interval is resolved without making the map too stiff to differentiate.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        n = spec.frequencies
        freqs = torch.exp(torch.linspace(0.0, math.log(16 * math.pi), n))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: Tensor) -> Tensor:
        if t.dim() != 1:
            raise ShapeError(f"time_embedding expects a 1-d batch of scalars, got {tuple(t.shape)}")
        angles = t[:, None] * self.freqs.to(t.dtype)[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TemporalMix(nn.Module):
    """Per-pixel affine map across the frame axis of (B, T, C, H, W) tensors."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        T = spec.frames
        self.weight = nn.Parameter(torch.eye(T) + 0.01 * torch.randn(T, T))
        self.bias = nn.Parameter(torch.zeros(T))

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 5 or x.shape[1] != self.spec.frames:
            raise ShapeError(f"temporal_mix expects (B,{self.spec.frames},C,H,W), got {tuple(x.shape)}")
        return torch.einsum("st,btchw->bschw", self.weight, x) + self.bias[None, :, None, None, None]


_BUILDERS: Dict[str, Callable[[LayerSpec], nn.Module]] = {
    "affine": Affine,
    "conv2d": Conv2d,
    "upconv2d": UpConv2d,
    "groupnorm": GroupNorm,
    "silu": SiLU,
    "time_embedding": TimeEmbedding,
    "temporal_mix": TemporalMix,
}


def make_layer(spec: LayerSpec) -> nn.Module:
    try:
        builder = _BUILDERS[spec.kind]
    except KeyError:
        raise ConfigError(f"unknown layer kind {spec.kind!r}; expected one of {LAYER_KINDS}") from None
    return builder(spec)


def forward_layer(layer: nn.Module | LayerSpec, x: Tensor) -> Tensor:
    """Apply a layer (or a freshly initialised one built from a spec) to ``x``."""
    if isinstance(layer, LayerSpec):
        layer = make_layer(layer)
    return layer(x)


# shorthands used by the model definitions
def affine(i: int, o: int) -> Affine:
    return Affine(LayerSpec("affine", i, o))


def conv(i: int, o: int, stride: int = 1, kernel: int = 3) -> Conv2d:
    return Conv2d(LayerSpec("conv2d", i, o, stride, kernel))


def upconv(i: int, o: int) -> UpConv2d:
    return UpConv2d(LayerSpec("upconv2d", i, o))


def norm(c: int, groups: int = 8) -> GroupNorm:
    return GroupNorm(LayerSpec("groupnorm", c, c, groups=min(groups, c)))


def time_embedding(frequencies: int = 64) -> TimeEmbedding:
    return TimeEmbedding(LayerSpec("time_embedding", frequencies=frequencies))


def temporal_mix(frames: int) -> TemporalMix:
    return TemporalMix(LayerSpec("temporal_mix", frames=frames))


def layer_manifest(model: nn.Module) -> list[list]:
    """Names and shapes of every parameter, in registration order."""
    return [[name, list(p.shape)] for name, p in model.named_parameters()]


# ---------------------------------------------------------------------------
# gradients

def backward(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. tracked ``params``.

    Untracked entries (``requires_grad=False``) and parameters the loss does not
    depend on are absent from the result. The graph is released afterwards.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    tracked = {k: p for k, p in params.items() if p.requires_grad}
    if not tracked:
        return {}
    grads = torch.autograd.grad(loss.reshape(()), list(tracked.values()), allow_unused=True)
    return {k: g for k, g in zip(tracked, grads) if g is not None}


def finite_difference_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central differences of a scalar function, evaluated in float64."""
    x = x.detach().to(torch.float64).clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """max |a - n| scaled by the largest numeric entry."""
    scale = max(float(numeric.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def random_layer_case(kind: str, rng: np.random.Generator) -> tuple[LayerSpec, Tensor]:
    """A small random spec and a matching float64 input for ``kind``."""
    r = lambda *s: torch.from_numpy(rng.standard_normal(s))
    i, o = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    if kind == "affine":
        return LayerSpec("affine", i, o), r(2, i)
    if kind == "conv2d":
        stride = int(rng.integers(1, 3))
        return LayerSpec("conv2d", i, o, stride), r(1, i, 4, 4)
    if kind == "upconv2d":
        return LayerSpec("upconv2d", i, o), r(1, i, 2, 2)
    if kind == "groupnorm":
        return LayerSpec("groupnorm", 4, 4, groups=2), r(2, 4, 3, 3)
    if kind == "silu":
        return LayerSpec("silu"), r(2, 5)
    if kind == "time_embedding":
        return LayerSpec("time_embedding", frequencies=8), torch.from_numpy(rng.uniform(0, 1, 3))
    if kind == "temporal_mix":
        return LayerSpec("temporal_mix", frames=4), r(1, 4, 2, 2, 2)
    raise ConfigError(f"unknown layer kind {kind!r}")


def layer_gradient_error(spec: LayerSpec, x: Tensor, seed: int = 0, h: float = 1e-3) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients.

    Covers the input and every parameter; everything runs in float64 and the
    scalar objective is a fixed random projection of the layer output.
    """
    torch.manual_seed(seed)
    layer = make_layer(spec).double()
    with torch.no_grad():
        for p in layer.parameters():  # move away from identity/zero inits
            p.add_(0.3 * torch.randn_like(p))
    x = x.detach().double().clone().requires_grad_(True)
    proj = torch.randn_like(layer(x))

    def objective(inp: Tensor) -> Tensor:
        return (layer(inp) * proj).sum()

    params = {"input": x, **dict(layer.named_parameters())}
    grads = backward(objective(x), params)
    worst = relative_error(grads["input"], finite_difference_grad(objective, x, h))
    for name, p in layer.named_parameters():
        def by_param(value: Tensor, p=p) -> Tensor:
            saved = p.detach().clone()
            with torch.no_grad():
                p.copy_(value)
            out = objective(x)
            with torch.no_grad():
                p.copy_(saved)
            return out

        worst = max(worst, relative_error(grads[name], finite_difference_grad(by_param, p, h)))
    return worst


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]) -> None:
    """One bias-corrected adaptive-moment update, applied to ``params`` in place.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            elif g.shape != p.shape:
                raise ContractError(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            elif m.shape != p.shape:
                raise ContractError(f"moment for {name} has shape {tuple(m.shape)}, param {tuple(p.shape)}")
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Bundles a parameter map with its optimizer state."""

    def __init__(self, params: Iterable[tuple[str, Tensor]] | Mapping[str, Tensor], lr: float = 1e-3):
        self.params = dict(params.items() if isinstance(params, Mapping) else params)
        self.state = OptimizerState(lr=lr)

    def step(self, loss: Tensor) -> float:
        grads = backward(loss, self.params)
        optimizer_step(self.state, self.params, grads)
        return float(loss.detach())


def to_numpy(x: Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()
