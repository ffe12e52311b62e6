"""Procedural toy echocardiograms with analytically known ejection fraction.

A left ventricle is drawn as a dark ellipse inside a bright myocardial ring,
placed in an ultrasound-like sector. The ellipse minor diameter follows a
cosine cardiac cycle between the end-diastolic (ED, frame 0) and end-systolic
(ES) diameters, and the EF label comes from the Teichholz volumes of those two
diameters.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

MAGIC = b"ETD1"
VIEW_NAMES = ("A4C", "PSAX", "PLAX")


class DomainError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def teichholz_volume(d: float) -> float:
    """Teichholz volume 7 D^3 / (2.4 + D) of a ventricle with internal diameter ``d``."""
    if not d > 0:
        raise DomainError(f"diameter must be positive, got {d}")
    return 7.0 / (2.4 + d) * d ** 3


def ef_from_diameters(d_ed: float, d_es: float) -> float:
    """Ejection fraction in percent from end-diastolic and end-systolic diameters."""
    if not 0 < d_es <= d_ed:
        raise DomainError(f"need 0 < D_ES <= D_ED, got D_ED={d_ed}, D_ES={d_es}")
    edv = teichholz_volume(d_ed)
    esv = teichholz_volume(d_es)
    return (edv - esv) / edv * 100.0


@dataclass(frozen=True)
class ToyConfig:
    size: int = 32
    frames: int = 16
    heart_rate: tuple[float, float] = (1.0, 1.5)  # beats per clip
    d_ed: tuple[float, float] = (4.5, 6.0)  # model-cm
    d_es: tuple[float, float] = (2.0, 5.0)
    px_per_cm: float = 2.0
    speckle: float = 0.3
    sector_half_angle: tuple[float, float, float] = (42.0, 36.0, 30.0)  # degrees, per view
    view_orientation: tuple[float, float, float] = (0.0, 0.0, -65.0)
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (self.d_es[0] < self.d_ed[0] and self.d_es[1] < self.d_ed[1]):
            raise ValueError("D_ES range must lie strictly below the D_ED range")
        if self.frames < 4 or self.size < 16:
            raise ValueError("need frames >= 4 and size >= 16")
        if self.heart_rate[0] < 1.0 or self.heart_rate[1] < self.heart_rate[0]:
            raise ValueError("heart rate must be >= 1 beat per clip")
        if self.d_ed[0] <= 0 or self.d_es[0] <= 0:
            raise ValueError("diameters must be positive")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def split_ids(self, split: str) -> range:
        start = 0
        for name, n in self.split_sizes().items():
            if name == split:
                return range(start, start + n)
            start += n
        raise KeyError(split)


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    ef: float
    view: int
    mask: np.ndarray  # (H, W) uint8, LV interior at ED
    video_id: int
    params: dict = field(default_factory=dict, compare=False, repr=False)


def _ellipse_radius(yy, xx, cy, cx, semi_minor, semi_major, angle):
    """Normalised elliptical radius; the major axis points along ``angle`` from vertical."""
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    along = dy * c + dx * s
    across = -dy * s + dx * c
    return np.sqrt((along / semi_major) ** 2 + (across / semi_minor) ** 2)


def _soft_inside(rho, semi_minor, semi_major):
    # ~1 px wide antialiased edge
    width = np.sqrt(semi_minor * semi_major)
    return np.clip(0.5 - (rho - 1.0) * width, 0.0, 1.0)


def sector_mask(size: int, half_angle_deg: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    apex_x = (size - 1) / 2.0
    r = np.hypot(yy + 0.5, xx - apex_x)
    ang = np.degrees(np.arctan2(np.abs(xx - apex_x), yy + 0.5))
    return (ang <= half_angle_deg) & (r <= size - 0.5)


def diameter_at(d_ed: float, d_es: float, f: float, t: float, frames: int) -> float:
    return d_ed - (d_ed - d_es) * (1.0 - np.cos(2 * np.pi * f * t / frames)) / 2.0


def sample_rng(cfg: ToyConfig, sample_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, sample_seed]))


def draw_params(cfg: ToyConfig, sample_seed: int) -> dict:
    rng = sample_rng(cfg, sample_seed)
    view = int(rng.integers(0, 3))
    d_ed = float(rng.uniform(*cfg.d_ed))
    d_es = float(rng.uniform(cfg.d_es[0], min(cfg.d_es[1], 0.97 * d_ed)))
    if view == 1:  # short axis: nearly circular
        ratio = float(rng.uniform(1.0, 1.15))
    else:
        ratio = float(rng.uniform(1.3, 1.6))
    n = cfg.size
    return {
        "view": view,
        "d_ed": d_ed,
        "d_es": d_es,
        "rate": float(rng.uniform(*cfg.heart_rate)),
        "ratio": ratio,
        "angle": np.radians(cfg.view_orientation[view] + rng.uniform(-12, 12)),
        "cy": n * 0.55 + rng.uniform(-2.0, 2.0),
        "cx": (n - 1) / 2.0 + rng.uniform(-2.0, 2.0),
        "wall": float(rng.uniform(1.2, 2.4)),
        "tissue": float(rng.uniform(0.3, 0.5)),
        "blobs": [
            (rng.uniform(0.15, 0.85) * n, rng.uniform(0.2, 0.8) * n, rng.uniform(1.5, 3.0), rng.uniform(0.2, 0.45))
            for _ in range(3)
        ],
        "speckle_seed": int(rng.integers(0, 2**63 - 1)),
    }


def render(cfg: ToyConfig, p: dict, d_minor: float, noise: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Render one frame for minor diameter ``d_minor``; returns (image, binary LV mask)."""
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    sector = sector_mask(n, cfg.sector_half_angle[p["view"]])
    a = d_minor * cfg.px_per_cm / 2.0
    b = p["ratio"] * p["d_ed"] * cfg.px_per_cm / 2.0
    b = max(a, b)
    rho_in = _ellipse_radius(yy, xx, p["cy"], p["cx"], a, b, p["angle"])
    w = p["wall"]
    rho_out = _ellipse_radius(yy, xx, p["cy"], p["cx"], a + w, b + w, p["angle"])
    inner = _soft_inside(rho_in, a, b)
    outer = np.maximum(_soft_inside(rho_out, a + w, b + w), inner)

    depth = np.hypot(yy + 0.5, xx - (n - 1) / 2.0) / n
    tissue = p["tissue"] * (1.0 - 0.35 * depth)
    for by, bx, bs, amp in p["blobs"]:
        tissue = tissue + amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * bs ** 2))
    img = tissue * (1 - outer) + 0.85 * (outer - inner) + 0.06 * inner
    if noise is not None:
        img = img * (1.0 + cfg.speckle * (noise - 0.5))
    img = np.clip(img, 0.0, 1.0) * sector
    mask = (rho_in < 1.0) & sector
    return img.astype(np.float32), mask.astype(np.uint8)


def synth_video(cfg: ToyConfig, sample_seed: int) -> VideoSample:
    p = draw_params(cfg, sample_seed)
    T = cfg.frames
    noise_rng = np.random.default_rng(p["speckle_seed"])
    frames = np.empty((T, cfg.size, cfg.size), dtype=np.float32)
    mask = None
    for t in range(T):
        d = diameter_at(p["d_ed"], p["d_es"], p["rate"], t, T)
        noise = noise_rng.random((cfg.size, cfg.size)) if cfg.speckle > 0 else None
        frames[t], m = render(cfg, p, d, noise)
        if t == 0:
            mask = m
    return VideoSample(
        frames=frames,
        ef=ef_from_diameters(p["d_ed"], p["d_es"]),
        view=p["view"],
        mask=mask,
        video_id=int(sample_seed),
        params=p,
    )


def generate_split(cfg: ToyConfig, split: str) -> List[VideoSample]:
    return [synth_video(cfg, i) for i in cfg.split_ids(split)]


def generate_dataset(cfg: ToyConfig) -> dict[str, List[VideoSample]]:
    return {split: generate_split(cfg, split) for split in cfg.split_sizes()}


# ---------------------------------------------------------------------------
# ETD1 container

_HEAD = struct.Struct("<4sI")
_SAMPLE = struct.Struct("<IIIIfQ")


def dumps(samples: Sequence[VideoSample]) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, len(samples)))
    for s in samples:
        T, H, W = s.frames.shape
        buf.write(_SAMPLE.pack(T, H, W, s.view, s.ef, s.video_id))
        buf.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> List[VideoSample]:
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", len(data))
    magic, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    off = _HEAD.size
    out = []
    for _ in range(count):
        if off + _SAMPLE.size > len(data):
            raise FormatError("truncated sample header", off)
        T, H, W, view, ef, vid = _SAMPLE.unpack_from(data, off)
        off += _SAMPLE.size
        nf, nm = 4 * T * H * W, H * W
        if off + nf + nm > len(data):
            raise FormatError("truncated sample payload", off)
        frames = np.frombuffer(data, dtype="<f4", count=T * H * W, offset=off).reshape(T, H, W).astype(np.float32)
        off += nf
        mask = np.frombuffer(data, dtype=np.uint8, count=nm, offset=off).reshape(H, W).copy()
        off += nm
        out.append(VideoSample(frames=frames, ef=float(ef), view=int(view), mask=mask, video_id=int(vid)))
    if off != len(data):
        raise FormatError("trailing bytes after last sample", off)
    return out


def save_dataset(samples: Sequence[VideoSample], path: str | Path) -> None:
    Path(path).write_bytes(dumps(samples))


def load_dataset(path: str | Path) -> List[VideoSample]:
    return loads(Path(path).read_bytes())


def stack(samples: Iterable[VideoSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, T, H, W) frames and (N,) EF labels."""
    samples = list(samples)
    return np.stack([s.frames for s in samples]), np.array([s.ef for s in samples], dtype=np.float64)
