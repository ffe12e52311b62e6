"""EF regression, regression metrics, relabelling and a feature-Frechet proxy."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .echodata import VideoSample
from .numerics import Adam, ContractError, SiLU, affine, conv, norm, temporal_mix

log = logging.getLogger(__name__)

EF_CEILING = math.nextafter(100.0, 0.0)


class RegressionDivergence(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


class EfRegressor(nn.Module):
    """Per-frame conv encoder, frame-axis mixing, temporal mean pool, affine head.

    The per-frame feature map is flattened rather than spatially pooled: pooling
    after group normalisation discards the cavity size. Predicts EF / 100;
    ``predict`` rescales to percent.
    """

    def __init__(self, frames: int = 16, width: int = 32, image_size: int = 32):
        super().__init__()
        self.frame_enc = nn.Sequential(
            conv(1, width // 2, stride=2), norm(width // 2), SiLU(),
            conv(width // 2, width, stride=2), norm(width), SiLU(),
            conv(width, width, stride=2), norm(width), SiLU(),
        )
        self.proj = affine(width * (image_size // 8) ** 2, width)
        self.mix1 = temporal_mix(frames)
        self.feat = affine(width, width)
        self.mix2 = temporal_mix(frames)
        self.head = nn.Sequential(affine(width, width), SiLU(), affine(width, 1))
        self.act = SiLU()
        self.frames = frames

    def forward(self, video: Tensor) -> Tensor:
        b, T, h, w = video.shape
        f = self.frame_enc(video.reshape(b * T, 1, h, w)).reshape(b * T, -1)
        f = self.proj(f).reshape(b, T, -1, 1, 1)
        f = self.act(self.mix1(f)).reshape(b, T, -1)
        f = self.act(self.feat(f)).reshape(b, T, -1, 1, 1)
        f = self.act(self.mix2(f)).reshape(b, T, -1)
        return self.head(f.mean(dim=1)).squeeze(-1)


@dataclass
class RegressorTrainConfig:
    epochs: int = 20
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0


def train_regressor(videos: np.ndarray, labels: np.ndarray, cfg: RegressorTrainConfig,
                    frames: int | None = None) -> tuple[EfRegressor, list[dict]]:
    """Minimise (y - y_hat)^2 on labels scaled to [0, 1]."""
    if len(videos) == 0:
        raise ContractError("cannot train on an empty split")
    torch.manual_seed(cfg.seed)
    model = EfRegressor(frames=frames or videos.shape[1], image_size=videos.shape[-1])
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.as_tensor(np.asarray(videos, np.float32))
    y = torch.as_tensor(np.asarray(labels, np.float32)) / 100.0
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    trace = []
    n = len(x)
    model.train()
    for epoch in range(cfg.epochs):
        # cosine decay keeps the last epochs from bouncing around
        opt.state.lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, cfg.batch):
            idx = perm[i:i + cfg.batch]
            loss = ((model(x[idx]) - y[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise RegressionDivergence(f"non-finite regression loss in epoch {epoch}")
            total += opt.step(loss) * len(idx)
        trace.append({"epoch": epoch, "mse": total / n})
        log.info("ef epoch %d mse %.5f", epoch, total / n)
    model.eval()
    return model, trace


@torch.no_grad()
def predict(model: Callable[[Tensor], Tensor], videos: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(videos), batch):
        out.append(model(torch.as_tensor(np.asarray(videos[i:i + batch], np.float32))).numpy())
    return np.concatenate(out).astype(np.float64) * 100.0 if out else np.zeros(0)


@dataclass
class RegressionMetrics:
    r2: float
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(y: Sequence[float], y_hat: Sequence[float]) -> RegressionMetrics:
    y = np.asarray(y, np.float64)
    y_hat = np.asarray(y_hat, np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or len(y) < 2:
        raise ContractError("metrics need two equal-length 1-d arrays of length >= 2")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ContractError("R^2 is undefined for constant targets")
    res = y - y_hat
    return RegressionMetrics(
        r2=1.0 - float((res ** 2).sum()) / ss_tot,
        mae=float(np.abs(res).mean()),
        rmse=float(np.sqrt((res ** 2).mean())),
        n=len(y),
    )


def relabel(samples: Sequence[VideoSample], model: Callable[[Tensor], Tensor]) -> list[VideoSample]:
    """Replace each EF label by the regressor's prediction, clamped to [0, 100)."""
    if not samples:
        return []
    preds = predict(model, np.stack([s.frames for s in samples]))
    return [dataclasses.replace(s, ef=float(np.clip(p, 0.0, EF_CEILING))) for s, p in zip(samples, preds)]


# ---------------------------------------------------------------------------
# Frechet distance between Gaussian fits

def _sym_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise NumericalError(f"matrix is not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, np.float64)
    n, d = x.shape
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if n > 1 else np.zeros((d, d))
    cov = cov + 1e-6 * np.trace(cov) / d * np.eye(d)
    return x.mean(0), cov


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) for row-sample sets."""
    mu_a, s_a = gaussian_fit(a)
    mu_b, s_b = gaussian_fit(b)
    tol = 1e-6 * max(np.trace(s_a), np.trace(s_b), 1e-12)
    root_a = _sym_sqrt(s_a, tol)
    cross = _sym_sqrt(root_a @ s_b @ root_a, tol)
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a) + np.trace(s_b) - 2 * np.trace(cross))
    return max(d, 0.0)


def feature_frechet(set_a: np.ndarray, set_b: np.ndarray, encoder) -> float:
    """Frechet distance between re-id embeddings of two sets of latent images."""
    from .reid import embed

    ea, eb = embed(encoder, set_a), embed(encoder, set_b)
    d = ea.shape[1]
    if len(ea) < d + 1 or len(eb) < d + 1:
        raise ContractError(f"each set needs at least {d + 1} samples")
    return frechet_distance(ea, eb)
