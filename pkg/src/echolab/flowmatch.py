"""Latent flow matching: linear path, velocity regression, condition dropout,
classifier-free guidance and an Euler sampler.

Two velocity networks share the machinery: ``ImageFlowNet`` (conditioned on a
view class and an LV mask) and ``VideoFlowNet`` (conditioned on an anatomy
latent and an EF score).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
from torch import Tensor, nn

from .numerics import Adam, ConfigError, ContractError, SiLU, affine, conv, norm, temporal_mix, time_embedding

log = logging.getLogger(__name__)

IMAGE_FIELDS = ("view", "mask")
VIDEO_FIELDS = ("anatomy", "ef")
SELECTORS = ("none", "anatomy-only", "ef-only", "mask-only", "view-only")


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# path

def _check_t(t):
    tt = torch.as_tensor(t)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise ContractError(f"t must lie in [0, 1], got {t}")


def _pad_t(t, x: Tensor):
    if isinstance(t, (float, int)):
        return t
    return t.reshape(-1, *([1] * (x.dim() - 1)))


def interpolate(x0: Tensor, x1: Tensor, t) -> Tensor:
    """Point on the straight path: t=0 is data, t=1 is noise."""
    if x0.shape != x1.shape:
        raise ContractError(f"endpoint shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    _check_t(t)
    t = _pad_t(t, x0)
    return (1 - t) * x0 + t * x1


def velocity_target(x0: Tensor, x1: Tensor) -> Tensor:
    if x0.shape != x1.shape:
        raise ContractError(f"endpoint shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


# ---------------------------------------------------------------------------
# conditioning

@dataclass
class ConditioningSet:
    """Batched conditions; a field is used only where its presence flag is True.

    ``view``: (B,) long; ``mask``: (B, 1, h, w); ``anatomy``: (B, K, h, w);
    ``ef``: (B,) percent. Presence flags are (B,) bool tensors.
    """

    view: Tensor | None = None
    mask: Tensor | None = None
    anatomy: Tensor | None = None
    ef: Tensor | None = None
    present: dict[str, Tensor] = field(default_factory=dict)

    def batch_size(self) -> int:
        for v in (self.view, self.mask, self.anatomy, self.ef):
            if v is not None:
                return v.shape[0]
        raise ContractError("empty conditioning set")

    def fields(self) -> tuple[str, ...]:
        return tuple(k for k in ("view", "mask", "anatomy", "ef") if getattr(self, k) is not None)

    def flag(self, name: str) -> Tensor:
        if getattr(self, name) is None:
            return torch.zeros(self.batch_size(), dtype=torch.bool)
        return self.present.get(name, torch.ones(self.batch_size(), dtype=torch.bool))

    def with_present(self, keep: set[str]) -> "ConditioningSet":
        """Same values, with every field outside ``keep`` dropped."""
        n = self.batch_size()
        present = {k: (self.flag(k) if k in keep else torch.zeros(n, dtype=torch.bool)) for k in self.fields()}
        return ConditioningSet(self.view, self.mask, self.anatomy, self.ef, present)

    def dropped(self, drop: dict[str, Tensor]) -> "ConditioningSet":
        present = {k: self.flag(k) & ~drop[k] if k in drop else self.flag(k) for k in self.fields()}
        return ConditioningSet(self.view, self.mask, self.anatomy, self.ef, present)

    def index(self, idx) -> "ConditioningSet":
        sel = lambda v: None if v is None else v[idx]
        return ConditioningSet(sel(self.view), sel(self.mask), sel(self.anatomy), sel(self.ef),
                               {k: v[idx] for k, v in self.present.items()})


def _blend(flag: Tensor, value: Tensor, null: Tensor) -> Tensor:
    f = flag.to(value.dtype).reshape(-1, *([1] * (value.dim() - 1)))
    return f * value + (1 - f) * null


# ---------------------------------------------------------------------------
# networks

class ResBlock(nn.Module):
    def __init__(self, c: int, emb: int, frames: int = 0):
        super().__init__()
        self.n1, self.c1 = norm(c), conv(c, c)
        self.n2, self.c2 = norm(c), conv(c, c)
        self.emb = affine(emb, c)
        self.act = SiLU()
        self.frames = frames
        if frames:
            self.mix = temporal_mix(frames)

    def forward(self, h: Tensor, e: Tensor) -> Tensor:
        r = self.c1(self.act(self.n1(h)))
        r = r + self.emb(e)[:, :, None, None]
        r = self.c2(self.act(self.n2(r)))
        if self.frames:
            bt, c, hh, ww = r.shape
            r = self.mix(r.reshape(bt // self.frames, self.frames, c, hh, ww)).reshape(bt, c, hh, ww)
        return h + r


class ImageFlowNet(nn.Module):
    """Velocity field over (B, K, h, w) latents, conditioned on view and mask."""

    variant = "image"
    fields = IMAGE_FIELDS

    def __init__(self, latent_channels: int = 2, latent_size: int = 8, width: int = 64, blocks: int = 3,
                 n_views: int = 3, frequencies: int = 64):
        super().__init__()
        self.geometry = (latent_channels, latent_size, latent_size)
        emb = 2 * frequencies
        self.temb = time_embedding(frequencies)
        self.tproj = nn.Sequential(affine(emb, emb), SiLU(), affine(emb, emb))
        self.view_table = nn.Parameter(0.1 * torch.randn(n_views + 1, emb))  # last row: null view
        self.null_mask = nn.Parameter(torch.zeros(1, latent_size, latent_size))
        self.inp = conv(latent_channels + 1, width)
        self.blocks = nn.ModuleList(ResBlock(width, emb) for _ in range(blocks))
        self.out_norm = norm(width)
        self.out = conv(width, latent_channels)
        self.act = SiLU()
        self.n_views = n_views

    def forward(self, x: Tensor, t: Tensor, cond: ConditioningSet) -> Tensor:
        b = x.shape[0]
        e = self.tproj(self.temb(t))
        if cond.view is not None:
            v = torch.where(cond.flag("view"), cond.view.long(), torch.full_like(cond.view.long(), self.n_views))
        else:
            v = torch.full((b,), self.n_views, dtype=torch.long)
        e = e + self.view_table[v]
        null = self.null_mask.expand(b, -1, -1, -1)
        m = _blend(cond.flag("mask"), cond.mask, null) if cond.mask is not None else null
        h = self.inp(torch.cat([x, m], dim=1))
        for blk in self.blocks:
            h = blk(h, e)
        return self.out(self.act(self.out_norm(h)))


class VideoFlowNet(nn.Module):
    """Velocity field over (B, T, K, h, w) latent clips, conditioned on anatomy and EF.

    Spatial residual blocks run per frame; each is followed by a learned affine
    mix across frames.
    """

    variant = "video"
    fields = VIDEO_FIELDS

    def __init__(self, latent_channels: int = 2, latent_size: int = 8, frames: int = 16, width: int = 48,
                 blocks: int = 3, frequencies: int = 64):
        super().__init__()
        self.geometry = (frames, latent_channels, latent_size, latent_size)
        emb = 2 * frequencies
        self.temb = time_embedding(frequencies)
        self.tproj = nn.Sequential(affine(emb, emb), SiLU(), affine(emb, emb))
        self.efproj = nn.Sequential(affine(emb, emb), SiLU(), affine(emb, emb))
        self.null_ef = nn.Parameter(torch.zeros(emb))
        self.null_anatomy = nn.Parameter(torch.zeros(latent_channels, latent_size, latent_size))
        self.frame_pos = nn.Parameter(0.1 * torch.randn(frames, emb))
        self.inp = conv(2 * latent_channels, width)
        self.blocks = nn.ModuleList(ResBlock(width, emb, frames) for _ in range(blocks))
        self.out_norm = norm(width)
        self.out = conv(width, latent_channels)
        self.act = SiLU()
        self.frames = frames

    def forward(self, x: Tensor, t: Tensor, cond: ConditioningSet) -> Tensor:
        b, T, k, hh, ww = x.shape
        e = self.tproj(self.temb(t))
        null_ef = self.null_ef.expand(b, -1)
        if cond.ef is not None:
            ef_e = self.efproj(self.temb((cond.ef / 100.0).clamp(0, 1).to(x.dtype)))
            e = e + _blend(cond.flag("ef"), ef_e, null_ef)
        else:
            e = e + null_ef
        null_a = self.null_anatomy.expand(b, -1, -1, -1)
        a = _blend(cond.flag("anatomy"), cond.anatomy, null_a) if cond.anatomy is not None else null_a
        a = a[:, None].expand(b, T, k, hh, ww)
        h = self.inp(torch.cat([x, a], dim=2).reshape(b * T, 2 * k, hh, ww))
        e = (e[:, None, :] + self.frame_pos[None]).reshape(b * T, -1)
        for blk in self.blocks:
            h = blk(h, e)
        return self.out(self.act(self.out_norm(h))).reshape(b, T, k, hh, ww)


class VelocityModel(Protocol):
    fields: tuple[str, ...]

    def __call__(self, x: Tensor, t: Tensor, cond: ConditioningSet) -> Tensor: ...


# ---------------------------------------------------------------------------
# training objective

@dataclass
class DropoutSchedule:
    p_field: float = 0.1
    p_all: float = 0.1


def draw_drop_mask(fields: tuple[str, ...], batch: int, sched: DropoutSchedule, gen: torch.Generator) -> dict[str, Tensor]:
    """Each field dropped independently with ``p_field``; everything dropped with extra ``p_all``."""
    all_drop = torch.rand(batch, generator=gen) < sched.p_all
    return {f: (torch.rand(batch, generator=gen) < sched.p_field) | all_drop for f in fields}


def fm_loss(model: VelocityModel, x0: Tensor, cond: ConditioningSet, x1: Tensor, t: Tensor,
            drop: dict[str, Tensor] | None = None) -> Tensor:
    """Mean over the batch of the squared velocity error, summed over latent elements."""
    if x0.shape != x1.shape:
        raise ContractError("data and noise shapes differ")
    xt = interpolate(x0, x1, t)
    c = cond.dropped(drop) if drop else cond
    err = model(xt, t, c) - velocity_target(x0, x1)
    loss = (err ** 2).reshape(err.shape[0], -1).sum(1).mean()
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite flow-matching loss {float(loss)}")
    return loss


def check_normalized(x0: Tensor, channel_dim: int, tol: float = 0.5) -> None:
    dims = [d for d in range(x0.dim()) if d != channel_dim]
    std = x0.std(dim=dims)
    if bool(((std - 1).abs() > tol).any()):
        warnings.warn(f"flow-matching inputs do not look normalised (channel std {std.tolist()})", stacklevel=2)


@dataclass
class FlowTrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    p_field: float = 0.1
    p_all: float = 0.1
    seed: int = 0
    cosine: bool = False  # decay the learning rate to zero over the run


def train_flow(model: nn.Module, draw_batch: Callable[[torch.Generator, int], tuple[Tensor, ConditioningSet]],
               cfg: FlowTrainConfig) -> list[dict]:
    """Generic loop; ``draw_batch(gen, n)`` returns normalised data and its conditions."""
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    sched = DropoutSchedule(cfg.p_field, cfg.p_all)
    history = []
    ema = None
    model.train()
    for step in range(cfg.steps):
        if cfg.cosine:
            opt.state.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        x0, cond = draw_batch(gen, cfg.batch)
        if step == 0:
            check_normalized(x0, channel_dim=x0.dim() - 3)
        x1 = torch.randn(x0.shape, generator=gen)
        t = torch.rand(x0.shape[0], generator=gen)
        drop = draw_drop_mask(model.fields, x0.shape[0], sched, gen) if model.fields else None
        try:
            loss = opt.step(fm_loss(model, x0, cond, x1, t, drop))
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {step}") from None
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if step % 200 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss, "loss_ema": ema})
            log.info("flow step %d loss %.4f (ema %.4f)", step, loss, ema)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# guidance and sampling

_KEEP = {
    "none": set(),
    "anatomy-only": {"anatomy"},
    "ef-only": {"ef"},
    "mask-only": {"mask"},
    "view-only": {"view"},
}


@dataclass(frozen=True)
class SamplerSpec:
    steps: int = 100
    cfg_scale: float = 2.0
    negative: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.cfg_scale < 0:
            raise ValueError("cfg scale must be non-negative")
        if self.negative not in SELECTORS:
            raise ValueError(f"unknown negative selector {self.negative!r}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "cfg_scale": self.cfg_scale, "negative": self.negative, "seed": self.seed}


def negative_condition(model: VelocityModel, cond: ConditioningSet, selector: str) -> ConditioningSet:
    keep = _KEEP.get(selector)
    if keep is None:
        raise ConfigError(f"unknown negative selector {selector!r}")
    missing = keep - set(model.fields)
    if missing:
        raise ConfigError(f"selector {selector!r} needs {sorted(missing)}, which this model does not take")
    return cond.with_present(keep)


def cfg_velocity(model: VelocityModel, x: Tensor, t: Tensor, cond: ConditioningSet, scale: float,
                 negative: str = "none") -> Tensor:
    """Guided velocity v_neg + scale * (v_cond - v_neg).

    scale=0 gives the negative (unconditional or partially conditioned) branch,
    scale=1 the plain conditional prediction.
    """
    neg = negative_condition(model, cond, negative)
    if scale == 1.0:
        return model(x, t, cond)
    if scale == 0.0:
        return model(x, t, neg)
    v_cond = model(x, t, cond)
    v_neg = model(x, t, neg)
    return v_neg + scale * (v_cond - v_neg)


@torch.no_grad()
def sample_euler(model: VelocityModel, spec: SamplerSpec, cond: ConditioningSet, shape: tuple[int, ...],
                 x1: Tensor | None = None) -> Tensor:
    """Integrate from noise at t=1 to data at t=0 in ``spec.steps`` uniform Euler steps."""
    if x1 is None:
        gen = torch.Generator().manual_seed(spec.seed)
        x1 = torch.randn(shape, generator=gen)
    x = x1.clone()
    n = x.shape[0]
    dt = 1.0 / spec.steps
    for i in range(spec.steps):
        t = torch.full((n,), 1.0 - i * dt)
        x = x - dt * cfg_velocity(model, x, t, cond, spec.cfg_scale, spec.negative)
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite sampler state at step {i}")
    return x


def sample_images(model: ImageFlowNet, spec: SamplerSpec, view: Tensor, mask: Tensor,
                  x1: Tensor | None = None) -> Tensor:
    cond = ConditioningSet(view=view, mask=mask)
    return sample_euler(model, spec, cond, (view.shape[0], *model.geometry), x1)


def animate(model: VideoFlowNet, anatomy: Tensor, ef: Tensor, spec: SamplerSpec, x1: Tensor | None = None) -> Tensor:
    """Latent clips (B, T, K, h, w) animating ``anatomy`` (B, K, h, w) at the given EF values.

    ``x1`` overrides the starting noise (otherwise drawn from ``spec.seed``).
    """
    ef = torch.as_tensor(ef, dtype=torch.float32).reshape(-1)
    if bool(((ef < 0) | (ef > 100)).any()):
        raise ContractError("EF conditioning must be a percentage")
    cond = ConditioningSet(anatomy=anatomy, ef=ef)
    return sample_euler(model, spec, cond, (anatomy.shape[0], *model.geometry), x1)


def sample_in_batches(fn: Callable[[slice, int], Tensor], n: int, batch: int) -> np.ndarray:
    """Run ``fn(slice, chunk_seed_offset)`` over chunks and concatenate results."""
    out = []
    for i, start in enumerate(range(0, n, batch)):
        out.append(fn(slice(start, min(n, start + batch)), i).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


# ---------------------------------------------------------------------------
# 2-D sanity model

class PointFlowNet(nn.Module):
    """MLP velocity field for unconditional 2-D point clouds."""

    fields: tuple[str, ...] = ()

    def __init__(self, dim: int = 2, hidden: int = 128, frequencies: int = 16):
        super().__init__()
        self.temb = time_embedding(frequencies)
        self.net = nn.Sequential(
            affine(dim + 2 * frequencies, hidden), SiLU(),
            affine(hidden, hidden), SiLU(),
            affine(hidden, hidden), SiLU(),
            affine(hidden, dim),
        )
        self.geometry = (dim,)

    def forward(self, x: Tensor, t: Tensor, cond: ConditioningSet | None = None) -> Tensor:
        return self.net(torch.cat([x, self.temb(t)], dim=1))


def eight_gaussians(n: int, rng: np.random.Generator, radius: float = 2.0, std: float = 0.2) -> np.ndarray:
    angles = 2 * np.pi * rng.integers(0, 8, n) / 8
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], 1)
    return (centers + std * rng.standard_normal((n, 2))).astype(np.float32)


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""
    from scipy.spatial.distance import cdist

    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def energy_floor(draw: Callable[[], np.ndarray], pairs: int = 5) -> float:
    """Mean energy distance between independent real halves: the sampling-noise floor."""
    return float(np.mean([energy_distance(draw(), draw()) for _ in range(pairs)]))


def fit_point_cloud(points: np.ndarray, steps: int = 8000, batch: int = 256, lr: float = 3e-3,
                    seed: int = 0, hidden: int = 128, cosine: bool = True) -> tuple[PointFlowNet, list[dict]]:
    """Unconditional flow matching on a fixed (N, d) point set."""
    data = torch.as_tensor(np.asarray(points, np.float32))
    torch.manual_seed(seed)
    net = PointFlowNet(dim=data.shape[1], hidden=hidden)

    def draw(gen, n):
        return data[torch.randint(0, len(data), (n,), generator=gen)], ConditioningSet(ef=torch.zeros(n))

    with warnings.catch_warnings():
        # raw 2-D coordinates are not channel-normalised latents
        warnings.simplefilter("ignore", UserWarning)
        hist = train_flow(net, draw, FlowTrainConfig(steps=steps, batch=batch, lr=lr, p_field=0.0, p_all=0.0, seed=seed,
                                                   cosine=cosine))
    return net, hist


def sample_points(net: PointFlowNet, n: int, steps: int = 100, seed: int = 0) -> np.ndarray:
    cond = ConditioningSet(ef=torch.zeros(n))
    return sample_euler(net, SamplerSpec(steps=steps, cfg_scale=1.0, seed=seed), cond, (n, *net.geometry)).numpy()
