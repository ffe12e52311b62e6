"""Adversarial VAE that defines the spatial latent space, plus latent normalisation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .numerics import Adam, ContractError, SiLU, affine, conv, norm, upconv

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, term: str, value: float, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {term} loss ({value}){where}")
        self.term = term
        self.step = step


class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class AvaeArgs:
    image_size: int = 32
    latent_channels: int = 2
    compression: int = 4
    width: int = 32

    @property
    def latent_size(self) -> int:
        return self.image_size // self.compression


@dataclass
class LatentCode:
    mu: Tensor
    sigma: Tensor
    z: Tensor | None = None


class Encoder(nn.Module):
    def __init__(self, a: AvaeArgs):
        super().__init__()
        n_down = int(round(math.log2(a.compression)))
        if 2 ** n_down != a.compression:
            raise ValueError("compression factor must be a power of two")
        w = a.width
        layers: list[nn.Module] = [conv(1, w // 2), norm(w // 2), SiLU()]
        c = w // 2
        for _ in range(n_down):
            layers += [conv(c, w, stride=2), norm(w), SiLU()]
            c = w
        layers += [conv(w, w), norm(w), SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = conv(w, 2 * a.latent_channels, kernel=1)
        self.k = a.latent_channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.head(self.body(x))
        mu, log_sigma = h[:, : self.k], h[:, self.k:]
        return mu, torch.exp(log_sigma.clamp(-12.0, 4.0))


class Decoder(nn.Module):
    def __init__(self, a: AvaeArgs):
        super().__init__()
        n_up = int(round(math.log2(a.compression)))
        w = a.width
        layers: list[nn.Module] = [conv(a.latent_channels, w), norm(w), SiLU(), conv(w, w), norm(w), SiLU()]
        c = w
        for i in range(n_up):
            out = w if i < n_up - 1 else w // 2
            layers += [upconv(c, out), norm(out), SiLU()]
            c = out
        layers += [conv(c, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        return torch.sigmoid(self.body(z))


class Discriminator(nn.Module):
    """Three strided convolutions, global average pool, one real/fake logit."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            conv(1, width, stride=2), SiLU(),
            conv(width, 2 * width, stride=2), SiLU(),
            conv(2 * width, 2 * width, stride=2), SiLU(),
        )
        self.head = affine(2 * width, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x).mean(dim=(2, 3))).squeeze(1)


class Avae(nn.Module):
    def __init__(self, args: AvaeArgs = AvaeArgs()):
        super().__init__()
        self.args = args
        self.encoder = Encoder(args)
        self.decoder = Decoder(args)
        self.discriminator = Discriminator()

    def vae_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if not k.startswith("discriminator.")}

    def disc_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if k.startswith("discriminator.")}


def _as_batch(model: Avae, x: Tensor) -> Tensor:
    n = model.args.image_size
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1:] != (1, n, n):
        raise ContractError(f"expected images of shape ({n},{n}), got {tuple(x.shape)}")
    return x


def encode(model: Avae, x: Tensor) -> LatentCode:
    mu, sigma = model.encoder(_as_batch(model, x))
    return LatentCode(mu, sigma)


def reparameterize(code: LatentCode, eps: Tensor) -> Tensor:
    if eps.shape != code.mu.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(code.mu.shape)}")
    code.z = code.mu + code.sigma * eps
    return code.z


def decode(model: Avae, z: Tensor) -> Tensor:
    k, h = model.args.latent_channels, model.args.latent_size
    if z.dim() != 4 or z.shape[1:] != (k, h, h):
        raise ContractError(f"expected latents of shape (B,{k},{h},{h}), got {tuple(z.shape)}")
    return model.decoder(z)


def kl_term(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent units, averaged over the batch."""
    per = 0.5 * (mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma))
    return per.reshape(per.shape[0], -1).sum(1).mean()


@dataclass
class AvaeLosses:
    rec: Tensor
    adv: Tensor
    kl: Tensor
    total: Tensor
    disc: Tensor

    def items(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "adv", "kl", "total", "disc")}


def avae_losses(model: Avae, x: Tensor, eps: Tensor, lam: float = 0.1, gamma: float = 1e-6,
                adv_enabled: bool = True) -> AvaeLosses:
    if x.numel() == 0:
        raise ContractError("empty batch")
    if lam < 0 or gamma < 0:
        raise ContractError("loss weights must be non-negative")
    x = _as_batch(model, x)
    code = encode(model, x)
    z = reparameterize(code, eps)
    x_hat = model.decoder(z)
    rec = ((x - x_hat) ** 2).reshape(x.shape[0], -1).sum(1).mean()
    kl = kl_term(code.mu, code.sigma)
    zero = x.new_zeros(())
    if adv_enabled:
        # generator term: discriminator should call reconstructions real
        adv = F.binary_cross_entropy_with_logits(model.discriminator(x_hat), torch.ones(x.shape[0]))
        real = model.discriminator(x)
        fake = model.discriminator(x_hat.detach())
        disc = (F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
                + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake)))
    else:
        adv = disc = zero
    total = rec + lam * adv + gamma * kl
    for name, value in (("rec", rec), ("adv", adv), ("kl", kl), ("disc", disc)):
        if not torch.isfinite(value):
            raise TrainingDivergence(name, float(value))
    return AvaeLosses(rec, adv, kl, total, disc)


@dataclass
class AvaeTrainConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 1e-3
    lam: float = 0.1
    gamma: float = 1e-6
    warmup_frac: float = 0.3
    seed: int = 0


def train_avae(model: Avae, frames: np.ndarray, cfg: AvaeTrainConfig) -> list[dict]:
    """Train on single frames (N, H, W); the adversarial term starts after the warmup."""
    gen = torch.Generator().manual_seed(cfg.seed)
    data = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    vae_opt = Adam(model.vae_parameters(), lr=cfg.lr)
    disc_opt = Adam(model.disc_parameters(), lr=cfg.lr)
    warmup = int(cfg.warmup_frac * cfg.steps)
    k, h = model.args.latent_channels, model.args.latent_size
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, data.shape[0], (cfg.batch,), generator=gen)
        x = data[idx]
        eps = torch.randn(cfg.batch, k, h, h, generator=gen)
        adv_on = step >= warmup
        try:
            losses = avae_losses(model, x, eps, cfg.lam, cfg.gamma, adv_on)
        except TrainingDivergence as exc:
            exc.step = step
            raise
        vae_opt.step(losses.total)
        if adv_on:
            disc_opt.step(losses.disc)
        if step % 100 == 0 or step == cfg.steps - 1:
            rec = losses.items()
            rec["step"] = step
            history.append(rec)
            log.info("avae step %d rec %.4f adv %.4f kl %.1f", step, rec["rec"], rec["adv"], rec["kl"])
    model.eval()
    return history


@torch.no_grad()
def encode_frames(model: Avae, frames: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Encoder means and sigmas for (N, H, W) frames, as (N, K, h, w) arrays."""
    mus, sigmas = [], []
    for i in range(0, len(frames), batch):
        code = encode(model, torch.from_numpy(np.ascontiguousarray(frames[i:i + batch], dtype=np.float32)))
        mus.append(code.mu.numpy())
        sigmas.append(code.sigma.numpy())
    k, h = model.args.latent_channels, model.args.latent_size
    if not mus:
        return np.zeros((0, k, h, h), np.float32), np.zeros((0, k, h, h), np.float32)
    return np.concatenate(mus), np.concatenate(sigmas)


@torch.no_grad()
def decode_latents(model: Avae, z: np.ndarray, batch: int = 256) -> np.ndarray:
    """Decode (N, K, h, w) latents to (N, H, W) images."""
    out = []
    for i in range(0, len(z), batch):
        out.append(decode(model, torch.from_numpy(np.ascontiguousarray(z[i:i + batch], dtype=np.float32)))[:, 0].numpy())
    n = model.args.image_size
    return np.concatenate(out) if out else np.zeros((0, n, n), np.float32)


def reconstruction_mse(model: Avae, frames: np.ndarray) -> float:
    mu, _ = encode_frames(model, frames)
    return float(np.mean((decode_latents(model, mu) - frames) ** 2))


# ---------------------------------------------------------------------------
# channel-wise latent normalisation

@dataclass
class LatentStats:
    mean: np.ndarray  # (K,)
    std: np.ndarray  # (K,)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


def latent_stats_from(latents: np.ndarray) -> LatentStats:
    """Per-channel mean and population std of (N, K, h, w) latents."""
    lat = np.asarray(latents, np.float64)
    axes = (0,) + tuple(range(2, lat.ndim))
    mean = lat.mean(axis=axes)
    std = lat.std(axis=axes)
    dead = np.flatnonzero(std < 1e-8)
    if dead.size:
        raise DegenerateChannelError(f"latent channel(s) {dead.tolist()} are constant over the training set")
    return LatentStats(mean, std)


def compute_latent_stats(model: Avae, train_frames: np.ndarray) -> LatentStats:
    mu, _ = encode_frames(model, train_frames)
    return latent_stats_from(mu)


def _channel_view(stat: np.ndarray, z: np.ndarray | Tensor, channel_axis: int):
    shape = [1] * z.ndim
    shape[channel_axis] = -1
    if isinstance(z, Tensor):
        return torch.as_tensor(stat, dtype=z.dtype).reshape(shape)
    return stat.reshape(shape).astype(z.dtype, copy=False)


def normalize(z, stats: LatentStats, channel_axis: int = -3):
    return (z - _channel_view(stats.mean, z, channel_axis)) / _channel_view(stats.std, z, channel_axis)


def denormalize(z_hat, stats: LatentStats, channel_axis: int = -3):
    return z_hat * _channel_view(stats.std, z_hat, channel_axis) + _channel_view(stats.mean, z_hat, channel_axis)


# ---------------------------------------------------------------------------
# entropy diagnostic

@dataclass
class Entropy:
    nats: float
    warnings: list[str] = field(default_factory=list)


def latent_entropy_gaussian(latents: np.ndarray) -> Entropy:
    """Joint differential entropy of latents under a Gaussian fit.

    ``latents`` is (N, d) or (N, ...) and is flattened per sample. The sample
    covariance gets a shrinkage ridge of 1e-6 * trace / d.
    """
    x = np.asarray(latents, np.float64).reshape(len(latents), -1)
    n, d = x.shape
    warnings = []
    if n < d + 1:
        warnings.append(f"only {n} samples for dimension {d}; covariance is rank deficient")
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if n > 1 else np.zeros((d, d))
    ridge = 1e-6 * np.trace(cov) / d
    evals = np.linalg.eigvalsh(cov)
    if evals.min() <= ridge:
        warnings.append("covariance is (near) singular; entropy is set by the regulariser floor")
    sign, logdet = np.linalg.slogdet(cov + ridge * np.eye(d))
    if sign <= 0:
        warnings.append("regularised covariance is not positive definite")
        return Entropy(float("-inf"), warnings)
    return Entropy(0.5 * (d * math.log(2 * math.pi * math.e) + logdet), warnings)
