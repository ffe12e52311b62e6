"""Re-identification privacy filter over latent images.

A contrastive encoder maps a latent frame to an anatomy embedding. Candidates
whose maximum Pearson correlation with any training video's first-frame
embedding reaches the calibrated threshold are rejected.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .numerics import Adam, ContractError, SiLU, affine, conv, norm

log = logging.getLogger(__name__)

MAGIC = b"REID"


class UndefinedCorrelation(ValueError):
    pass


class ReIdEncoder(nn.Module):
    """Three conv blocks, global average pool and an affine map to ``dim`` features.

    ``head`` (W, b) scores absolute embedding differences during training only.
    """

    def __init__(self, latent_channels: int = 2, width: int = 64, dim: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            conv(latent_channels, width), norm(width), SiLU(),
            conv(width, width, stride=2), norm(width), SiLU(),
            conv(width, width, stride=2), norm(width), SiLU(),
        )
        self.proj = affine(width, dim)
        self.head = affine(dim, 1)
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.body(x).mean(dim=(2, 3)))

    def pair_logit(self, la: Tensor, lb: Tensor) -> Tensor:
        delta = (torch.sigmoid(la) - torch.sigmoid(lb)).abs()
        return self.head(delta).squeeze(-1)


@torch.no_grad()
def embed(encoder: ReIdEncoder, latents: np.ndarray | Tensor, batch: int = 512) -> np.ndarray:
    x = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    out = [encoder(x[i:i + batch]) for i in range(0, len(x), batch)]
    return torch.cat(out).numpy() if out else np.zeros((0, encoder.dim), np.float32)


# ---------------------------------------------------------------------------
# training

@dataclass
class PairBatch:
    loss: Tensor
    delta_pos: Tensor
    delta_neg: Tensor
    y_pos: Tensor  # probabilities
    y_neg: Tensor


def reid_loss(encoder: ReIdEncoder, a1: Tensor, a2: Tensor, b: Tensor) -> PairBatch:
    """BCE(y_pos, 1) + BCE(y_neg, 0) on sigmoid-squashed embedding differences."""
    la1, la2, lb = encoder(a1), encoder(a2), encoder(b)
    sa1, sa2, sb = torch.sigmoid(la1), torch.sigmoid(la2), torch.sigmoid(lb)
    d_pos, d_neg = (sa1 - sa2).abs(), (sa1 - sb).abs()
    logit_pos = encoder.head(d_pos).squeeze(-1)
    logit_neg = encoder.head(d_neg).squeeze(-1)
    loss = (F.binary_cross_entropy_with_logits(logit_pos, torch.ones_like(logit_pos))
            + F.binary_cross_entropy_with_logits(logit_neg, torch.zeros_like(logit_neg)))
    return PairBatch(loss, d_pos, d_neg, torch.sigmoid(logit_pos), torch.sigmoid(logit_neg))


def draw_triplets(store: Tensor, n: int, gen: torch.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Frames (I_a1, I_a2) from one video and I_b from a different one.

    ``store`` is (videos, T, K, h, w).
    """
    v, T = store.shape[0], store.shape[1]
    if v < 2:
        raise ContractError("re-identification training needs at least two videos")
    va = torch.randint(0, v, (n,), generator=gen)
    vb = (va + torch.randint(1, v, (n,), generator=gen)) % v
    fa1 = torch.randint(0, T, (n,), generator=gen)
    fa2 = torch.randint(0, T, (n,), generator=gen)
    fb = torch.randint(0, T, (n,), generator=gen)
    return store[va, fa1], store[va, fa2], store[vb, fb]


def reid_train_step(encoder: ReIdEncoder, store: Tensor, opt: Adam, gen: torch.Generator, batch: int = 32) -> float:
    a1, a2, b = draw_triplets(store, batch, gen)
    return opt.step(reid_loss(encoder, a1, a2, b).loss)


@dataclass
class ReIdTrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0


def train_reid(encoder: ReIdEncoder, store: np.ndarray, cfg: ReIdTrainConfig) -> list[dict]:
    data = torch.as_tensor(np.asarray(store, dtype=np.float32))
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = Adam(encoder.named_parameters(), lr=cfg.lr)
    history, ema = [], None
    encoder.train()
    for step in range(cfg.steps):
        loss = reid_train_step(encoder, data, opt, gen, cfg.batch)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if step % 250 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss, "loss_ema": ema})
            log.info("reid step %d loss %.4f", step, ema)
    encoder.eval()
    return history


@torch.no_grad()
def pair_accuracy(encoder: ReIdEncoder, store: np.ndarray, n_pairs: int = 2000, seed: int = 1) -> float:
    """Fraction of held-out positive and negative pairs classified correctly at 0.5."""
    data = torch.as_tensor(np.asarray(store, dtype=np.float32))
    gen = torch.Generator().manual_seed(seed)
    a1, a2, b = draw_triplets(data, n_pairs, gen)
    out = reid_loss(encoder, a1, a2, b)
    correct = (out.y_pos >= 0.5).sum() + (out.y_neg < 0.5).sum()
    return float(correct) / (2 * n_pairs)


# ---------------------------------------------------------------------------
# correlation, index, threshold

def pearson(u, v) -> float:
    u = np.asarray(u, np.float64)
    v = np.asarray(v, np.float64)
    if u.shape != v.shape or u.ndim != 1 or len(u) < 2:
        raise ContractError("pearson needs two 1-d vectors of equal length >= 2")
    du, dv = u - u.mean(), v - v.mean()
    su, sv = np.sqrt((du * du).sum()), np.sqrt((dv * dv).sum())
    if su == 0 or sv == 0:
        raise UndefinedCorrelation("correlation with a constant vector is undefined")
    return float(np.clip((du * dv).sum() / (su * sv), -1.0, 1.0))


def pearson_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlation of every row of ``a`` with every row of ``b``."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    da = a - a.mean(1, keepdims=True)
    db = b - b.mean(1, keepdims=True)
    na = np.sqrt((da * da).sum(1))
    nb = np.sqrt((db * db).sum(1))
    if (na == 0).any() or (nb == 0).any():
        raise UndefinedCorrelation("correlation with a constant embedding is undefined")
    return np.clip((da / na[:, None]) @ (db / nb[:, None]).T, -1.0, 1.0)


@dataclass
class EmbeddingIndex:
    ids: np.ndarray  # (n,) uint64
    embeddings: np.ndarray  # (n, d) float32
    split: str = "train"

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("an index holds exactly one embedding per video")

    def __len__(self) -> int:
        return len(self.ids)


def build_index(encoder: ReIdEncoder, first_frames: np.ndarray, ids: Sequence[int], split: str = "train") -> EmbeddingIndex:
    return EmbeddingIndex(np.asarray(ids, np.uint64), embed(encoder, first_frames).astype(np.float32), split)


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    n, d = index.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", d, n))
        for vid, e in zip(index.ids, index.embeddings):
            fh.write(struct.pack("<Q", int(vid)))
            fh.write(np.asarray(e, "<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad re-id index magic {data[:4]!r}")
    d, n = struct.unpack_from("<II", data, 4)
    rec = 8 + 4 * d
    if len(data) != 12 + n * rec:
        raise ValueError(f"{path}: index size {len(data)} does not match header (d={d}, n={n})")
    ids = np.empty(n, np.uint64)
    emb = np.empty((n, d), np.float32)
    for i in range(n):
        off = 12 + i * rec
        ids[i] = struct.unpack_from("<Q", data, off)[0]
        emb[i] = np.frombuffer(data, "<f4", d, off + 8)
    return EmbeddingIndex(ids, emb)


def percentile_linear(values: np.ndarray, p: float) -> float:
    """Sort, then interpolate linearly between the ranks around ``p/100 * (n - 1)``."""
    s = np.sort(np.asarray(values, np.float64).ravel())
    if len(s) == 0:
        raise ContractError("percentile of an empty set")
    pos = p / 100.0 * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return float(s[lo] + (pos - lo) * (s[hi] - s[lo]))


@dataclass
class PrivacyThreshold:
    tau: float
    percentile: float
    index_ids: list[int] = field(default_factory=list)
    val_ids: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "percentile": self.percentile,
                "index_ids": [int(i) for i in self.index_ids], "val_ids": [int(i) for i in self.val_ids]}


def calibrate_tau(index: EmbeddingIndex, val_embeddings: np.ndarray, p: float = 95.0,
                  val_ids: Sequence[int] = ()) -> PrivacyThreshold:
    """p-th percentile (linear interpolation) of each training video's best validation match."""
    if not 0 <= p <= 100:
        raise ContractError(f"percentile must be in [0, 100], got {p}")
    if len(index) == 0 or len(val_embeddings) == 0:
        raise ContractError("calibration needs a non-empty index and validation set")
    maxima = pearson_matrix(index.embeddings, val_embeddings).max(axis=1)
    tau = percentile_linear(maxima, p)
    return PrivacyThreshold(tau, float(p), [int(i) for i in index.ids], [int(i) for i in val_ids])


@dataclass
class FilterResult:
    accepted: np.ndarray  # candidate indices
    rejected: np.ndarray
    rho_max: np.ndarray  # per candidate
    matched_id: np.ndarray  # per candidate, best-matching training video


def filter_embeddings(embeddings: np.ndarray, index: EmbeddingIndex, tau: float) -> FilterResult:
    if len(index) == 0:
        raise ContractError("cannot filter against an empty index")
    corr = pearson_matrix(embeddings, index.embeddings)
    best = corr.argmax(axis=1)
    rho = corr[np.arange(len(corr)), best]
    reject = rho >= tau
    return FilterResult(np.flatnonzero(~reject), np.flatnonzero(reject), rho, index.ids[best])


def filter_candidates(encoder: ReIdEncoder, latents: np.ndarray, index: EmbeddingIndex, tau: float) -> FilterResult:
    return filter_embeddings(embed(encoder, latents), index, tau)
