"""Stage orchestration for the synthetic-echo parity experiment.

Stages run in a fixed order and communicate only through files in the run
directory. ``manifest.json`` records, per stage, the artifacts written, the
config hash they were produced under, summary numbers and wall-clock time.

    gen-data -> train-avae -> encode -> train-lifm -> train-reid -> filter
             -> train-lvfm -> synthesize -> train-ef -> evaluate -> report
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import avae as av
from . import downstream as ds
from . import echodata as ed
from . import flowmatch as fm
from . import reid
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import PipelineConfig
from .numerics import ContractError, configure_torch

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-avae", "encode", "train-lifm", "train-reid", "filter", "train-lvfm",
          "synthesize", "train-ef", "evaluate", "report")
VARIANTS = ("real", "recon", "npc", "pc")
SPLITS = ("train", "val", "test")
SYNTH_ID_BASE = 1 << 40


class StageDependencyError(RuntimeError):
    """An upstream artifact is missing."""


class StaleArtifactError(RuntimeError):
    """An artifact was produced under a different configuration."""


class QuotaError(RuntimeError):
    """Not enough privacy-compliant anatomies could be generated."""


def derive_seed(master: int, *keys) -> int:
    """Independent 63-bit seed per (master, stage, item) key."""
    h = hashlib.sha256(repr((int(master), *keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def _gen(master: int, *keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, *keys))


# ---------------------------------------------------------------------------
# run directory and manifest

class RunDir:
    """Artifact paths, the manifest and the config hash of one run."""

    def __init__(self, root: str | Path, cfg: PipelineConfig, force: bool = False):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash()
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if self.manifest.get("config_hash") != self.hash:
                if not force:
                    raise StaleArtifactError(
                        f"{self.root} holds a run with config hash {self.manifest.get('config_hash')}, "
                        f"current config hashes to {self.hash}; use --force to start over")
                self.manifest = self._fresh()
        else:
            self.manifest = self._fresh()
        self.save()

    def _fresh(self) -> dict:
        return {"config_hash": self.hash, "config": self.cfg.to_dict(), "stages": []}

    def path(self, name: str) -> Path:
        return self.root / name

    def save(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True, default=_jsonable))
        tmp.replace(self.manifest_path)

    def record(self, stage: str, artifacts: dict[str, str], info: dict, seconds: float) -> None:
        self.manifest["stages"].append({
            "stage": stage, "config_hash": self.hash, "artifacts": artifacts,
            "info": info, "wall_clock_s": round(seconds, 3),
        })
        self.save()

    def last(self, stage: str) -> dict | None:
        for rec in reversed(self.manifest["stages"]):
            if rec["stage"] == stage:
                return rec
        return None

    def require(self, *names: str) -> list[Path]:
        """Paths of upstream artifacts; raises naming the first missing one."""
        out = []
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise StageDependencyError(f"missing upstream artifact {p} (run the stage that produces it first)")
            out.append(p)
        return out

    def check_checkpoint(self, path: Path) -> dict:
        header = read_header(path)
        if header["config_hash"] != self.hash:
            raise StaleArtifactError(f"{path} was produced under config {header['config_hash']}, expected {self.hash}")
        return header


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


# ---------------------------------------------------------------------------
# shared loaders

def _avae_args(cfg: PipelineConfig) -> av.AvaeArgs:
    return av.AvaeArgs(cfg.data.size, cfg.avae.latent_channels, cfg.avae.compression, cfg.avae.width)


def _load_avae(run: RunDir) -> av.Avae:
    (p,) = run.require("avae.ckpt")
    run.check_checkpoint(p)
    model = av.Avae(_avae_args(run.cfg))
    load_checkpoint(p, model, "avae")
    return model.eval()


def _load_split(run: RunDir, split: str) -> list[ed.VideoSample]:
    (p,) = run.require(f"data/{split}.etd")
    return ed.load_dataset(p)


def _load_latents(run: RunDir) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], av.LatentStats]:
    (p,) = run.require("latents.npz")
    z = np.load(p)
    if str(z["config_hash"]) != run.hash:
        raise StaleArtifactError(f"{p} was produced under a different config")
    mu = {s: z[f"{s}_mu"] for s in SPLITS}
    sigma = {s: z[f"{s}_sigma"] for s in SPLITS}
    return mu, sigma, av.LatentStats(z["mean"], z["std"])


def _image_net(cfg: PipelineConfig) -> fm.ImageFlowNet:
    return fm.ImageFlowNet(cfg.avae.latent_channels, cfg.data.size // cfg.avae.compression,
                           width=cfg.lifm.width, blocks=cfg.lifm.blocks)


def _video_net(cfg: PipelineConfig) -> fm.VideoFlowNet:
    return fm.VideoFlowNet(cfg.avae.latent_channels, cfg.data.size // cfg.avae.compression, frames=cfg.data.frames,
                           width=cfg.lvfm.width, blocks=cfg.lvfm.blocks)


def _reid_net(cfg: PipelineConfig) -> reid.ReIdEncoder:
    return reid.ReIdEncoder(cfg.avae.latent_channels, width=cfg.reid.width, dim=cfg.reid.dim)


def _load_model(run: RunDir, name: str, model: torch.nn.Module, kind: str) -> torch.nn.Module:
    (p,) = run.require(name)
    run.check_checkpoint(p)
    load_checkpoint(p, model, kind)
    return model.eval()


def latent_mask(mask: np.ndarray, factor: int) -> torch.Tensor:
    """LV mask (N, H, W) average-pooled to the latent grid, as (N, 1, h, w)."""
    m = torch.as_tensor(np.asarray(mask, np.float32))[:, None]
    return F.avg_pool2d(m, factor)


def _tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, np.float32))


# ---------------------------------------------------------------------------
# stages; each returns (artifacts, info)

def stage_gen_data(run: RunDir):
    data = ed.generate_dataset(run.cfg.data)
    run.path("data").mkdir(exist_ok=True)
    arts, counts = {}, {}
    for split, samples in data.items():
        p = run.path(f"data/{split}.etd")
        ed.save_dataset(samples, p)
        arts[split] = str(p.relative_to(run.root))
        counts[split] = len(samples)
    efs = [s.ef for s in data["train"]]
    return arts, {"counts": counts, "train_ef_range": [float(min(efs)), float(max(efs))]}


def stage_train_avae(run: RunDir):
    cfg = run.cfg
    frames, _ = ed.stack(_load_split(run, "train"))
    val, _ = ed.stack(_load_split(run, "val"))
    torch.manual_seed(derive_seed(cfg.seed, "avae-init"))
    model = av.Avae(_avae_args(cfg))
    a = cfg.avae
    hist = av.train_avae(model, frames.reshape(-1, cfg.data.size, cfg.data.size),
                         av.AvaeTrainConfig(a.steps, a.batch, a.lr, a.lam, a.gamma, a.warmup_frac,
                                            derive_seed(cfg.seed, "avae")))
    p = run.path("avae.ckpt")
    save_checkpoint(p, "avae", model, args=dataclasses.asdict(_avae_args(cfg)), config_hash=run.hash,
                    extra={"history": hist})
    mse = av.reconstruction_mse(model, val.reshape(-1, cfg.data.size, cfg.data.size))
    return {"avae": p.name}, {"val_recon_mse": mse, "final": hist[-1]}


def stage_encode(run: RunDir):
    model = _load_avae(run)
    cfg = run.cfg
    out = {"config_hash": np.array(run.hash)}
    k, h = cfg.avae.latent_channels, cfg.data.size // cfg.avae.compression
    for split in SPLITS:
        x, _ = ed.stack(_load_split(run, split))
        n = len(x)
        mu, sigma = av.encode_frames(model, x.reshape(-1, cfg.data.size, cfg.data.size))
        out[f"{split}_mu"] = mu.reshape(n, cfg.data.frames, k, h, h)
        out[f"{split}_sigma"] = sigma.reshape(n, cfg.data.frames, k, h, h)
    stats = av.latent_stats_from(out["train_mu"].reshape(-1, k, h, h))
    out["mean"], out["std"] = stats.mean, stats.std
    p = run.path("latents.npz")
    np.savez(p, **out)
    ent = av.latent_entropy_gaussian(av.normalize(out["train_mu"][:, 0], stats).reshape(len(out["train_mu"]), -1))
    return {"latents": p.name}, {"mean": stats.mean, "std": stats.std, "ed_latent_entropy_nats": ent.nats,
                                 "entropy_warnings": ent.warnings}


def _norm_t(x: np.ndarray | torch.Tensor, stats: av.LatentStats) -> torch.Tensor:
    return _tensor(av.normalize(np.asarray(x), stats))


def stage_train_lifm(run: RunDir):
    cfg = run.cfg
    mu, sigma, stats = _load_latents(run)
    train = _load_split(run, "train")
    ed_mu, ed_sig = _tensor(mu["train"][:, 0]), _tensor(sigma["train"][:, 0])
    view = torch.tensor([s.view for s in train])
    mask = latent_mask(np.stack([s.mask for s in train]), cfg.avae.compression)
    mean = _tensor(stats.mean).reshape(1, -1, 1, 1)
    std = _tensor(stats.std).reshape(1, -1, 1, 1)

    def draw(gen, n):
        i = torch.randint(0, len(ed_mu), (n,), generator=gen)
        z = ed_mu[i] + ed_sig[i] * torch.randn(ed_mu[i].shape, generator=gen)
        return (z - mean) / std, fm.ConditioningSet(view=view[i], mask=mask[i])

    torch.manual_seed(derive_seed(cfg.seed, "lifm-init"))
    net = _image_net(cfg)
    l = cfg.lifm
    hist = fm.train_flow(net, draw, fm.FlowTrainConfig(l.steps, l.batch, l.lr, l.p_field, l.p_all,
                                                       derive_seed(cfg.seed, "lifm"), l.cosine))
    p = run.path("lifm.ckpt")
    save_checkpoint(p, "lifm", net, args=dataclasses.asdict(l), config_hash=run.hash, extra={"history": hist})
    return {"lifm": p.name}, {"final_loss_ema": hist[-1]["loss_ema"]}


def stage_train_reid(run: RunDir):
    cfg = run.cfg
    mu, _, stats = _load_latents(run)
    store = {s: av.normalize(mu[s], stats) for s in SPLITS}
    torch.manual_seed(derive_seed(cfg.seed, "reid-init"))
    enc = _reid_net(cfg)
    r = cfg.reid
    hist = reid.train_reid(enc, store["train"], reid.ReIdTrainConfig(r.steps, r.batch, r.lr, derive_seed(cfg.seed, "reid")))
    acc_train = reid.pair_accuracy(enc, store["train"])
    acc_val = reid.pair_accuracy(enc, store["val"])
    train_ids = [s.video_id for s in _load_split(run, "train")]
    val_ids = [s.video_id for s in _load_split(run, "val")]
    index = reid.build_index(enc, store["train"][:, 0], train_ids)
    th = reid.calibrate_tau(index, reid.embed(enc, store["val"][:, 0]), r.percentile, val_ids)
    ck, ip, tp = run.path("reid.ckpt"), run.path("reid_index.bin"), run.path("threshold.json")
    save_checkpoint(ck, "reid", enc, args=dataclasses.asdict(r), config_hash=run.hash, extra={"history": hist})
    reid.save_index(index, ip)
    tp.write_text(json.dumps({**th.to_dict(), "config_hash": run.hash}, indent=1))
    return ({"reid": ck.name, "index": ip.name, "threshold": tp.name},
            {"pair_accuracy_train": acc_train, "pair_accuracy_val": acc_val, "tau": th.tau, "percentile": th.percentile})


def anatomy_quota(cfg: PipelineConfig) -> dict[str, int]:
    """Anatomies needed per split so that each split reaches its real size."""
    v = cfg.synth.videos_per_anatomy
    return {s: math.ceil(n / v) for s, n in cfg.data.split_sizes().items()}


def _load_threshold(run: RunDir) -> dict:
    (p,) = run.require("threshold.json")
    th = json.loads(p.read_text())
    if th.get("config_hash") != run.hash:
        raise StaleArtifactError(f"{p} was produced under a different config")
    return th


def stage_filter(run: RunDir):
    """Draw LIFM candidates in batches until enough pass the re-id filter."""
    cfg = run.cfg
    lifm = _load_model(run, "lifm.ckpt", _image_net(cfg), "lifm")
    enc = _load_model(run, "reid.ckpt", _reid_net(cfg), "reid")
    th = _load_threshold(run)
    (ip,) = run.require("reid_index.bin")
    index = reid.load_index(ip)
    train = _load_split(run, "train")
    views = torch.tensor([s.view for s in train])
    masks = latent_mask(np.stack([s.mask for s in train]), cfg.avae.compression)
    need = sum(anatomy_quota(cfg).values())
    spec = fm.SamplerSpec(cfg.sampler.steps, cfg.sampler.cfg_scale, cfg.sampler.negative)
    lat, src, rho, matched, accepted = [], [], [], [], []
    n_acc = 0
    b = 0
    while n_acc < need or sum(map(len, src)) < need:
        done = sum(map(len, src))
        if done >= cfg.synth.max_candidates:
            raise QuotaError(f"only {n_acc} of {need} required anatomies passed the privacy filter after "
                             f"{done} candidates (shortfall {need - n_acc})")
        n = min(cfg.synth.candidate_batch, cfg.synth.max_candidates - done)
        g = _gen(cfg.seed, "filter", b)
        pick = torch.randint(0, len(train), (n,), generator=g)
        x1 = torch.randn((n, *lifm.geometry), generator=g)
        z = fm.sample_images(lifm, spec, views[pick], masks[pick], x1)
        res = reid.filter_candidates(enc, z.numpy(), index, th["tau"])
        ok = np.zeros(n, bool)
        ok[res.accepted] = True
        lat.append(z.numpy())
        src.append(pick.numpy())
        rho.append(res.rho_max)
        matched.append(res.matched_id)
        accepted.append(ok)
        n_acc += int(ok.sum())
        b += 1
        log.info("filter batch %d: %d/%d accepted so far", b, n_acc, need)
    p = run.path("candidates.npz")
    cat = lambda xs: np.concatenate(xs)
    src_idx = cat(src)
    np.savez(p, latents=cat(lat), source=src_idx, view=views.numpy()[src_idx], rho_max=cat(rho),
             matched_id=cat(matched), accepted=cat(accepted), config_hash=np.array(run.hash))
    total = len(src_idx)
    return {"candidates": p.name}, {
        "tau": th["tau"], "percentile": th["percentile"], "candidates": total, "accepted": n_acc,
        "rejection_rate": 1 - n_acc / total, "required": need,
    }


def stage_train_lvfm(run: RunDir):
    cfg = run.cfg
    mu, sigma, stats = _load_latents(run)
    train = _load_split(run, "train")
    m, s = _tensor(mu["train"]), _tensor(sigma["train"])
    ef = torch.tensor([x.ef for x in train], dtype=torch.float32)
    mean = _tensor(stats.mean).reshape(1, -1, 1, 1)
    std = _tensor(stats.std).reshape(1, -1, 1, 1)

    def draw(gen, n):
        i = torch.randint(0, len(m), (n,), generator=gen)
        z = m[i] + s[i] * torch.randn(m[i].shape, generator=gen)
        # the anatomy is the ED frame under its own independent noise draw
        a = m[i, 0] + s[i, 0] * torch.randn(m[i, 0].shape, generator=gen)
        return (z - mean) / std, fm.ConditioningSet(anatomy=(a - mean) / std, ef=ef[i])

    torch.manual_seed(derive_seed(cfg.seed, "lvfm-init"))
    net = _video_net(cfg)
    l = cfg.lvfm
    hist = fm.train_flow(net, draw, fm.FlowTrainConfig(l.steps, l.batch, l.lr, l.p_field, l.p_all,
                                                       derive_seed(cfg.seed, "lvfm"), l.cosine))
    p = run.path("lvfm.ckpt")
    save_checkpoint(p, "lvfm", net, args=dataclasses.asdict(l), config_hash=run.hash, extra={"history": hist})
    return {"lvfm": p.name}, {"final_loss_ema": hist[-1]["loss_ema"]}


def _regressor_cfg(cfg: PipelineConfig, variant: str) -> ds.RegressorTrainConfig:
    return ds.RegressorTrainConfig(cfg.ef.epochs, cfg.ef.batch, cfg.ef.lr, derive_seed(cfg.seed, "ef", variant) % 2 ** 32)


def _train_and_save(run: RunDir, variant: str, videos: np.ndarray, labels: np.ndarray) -> tuple[ds.EfRegressor, list]:
    cfg = run.cfg
    model, trace = ds.train_regressor(videos, labels, _regressor_cfg(cfg, variant))
    save_checkpoint(run.path(f"ef_{variant}.ckpt"), "ef", model,
                    args={"frames": cfg.data.frames, "image_size": cfg.data.size, "variant": variant},
                    config_hash=run.hash, extra={"trace": trace})
    return model, trace


def _load_regressor(run: RunDir, variant: str) -> ds.EfRegressor:
    cfg = run.cfg
    return _load_model(run, f"ef_{variant}.ckpt", ds.EfRegressor(cfg.data.frames, image_size=cfg.data.size), "ef")


@dataclass
class SyntheticPlan:
    """Which candidate each synthetic video animates, per variant and split."""

    anatomies: dict[str, dict[str, np.ndarray]]  # variant -> split -> candidate indices (one per video)
    replicate: dict[str, dict[str, np.ndarray]]  # replicate number within the anatomy


def plan_synthetic(accepted: np.ndarray, cfg: PipelineConfig) -> SyntheticPlan:
    """NPC takes candidates in draw order; PC takes accepted candidates in draw order.

    PC is thus NPC with each rejected anatomy replaced by the next unused
    accepted one. Anatomies fill train, then val, then test.
    """
    quota = anatomy_quota(cfg)
    need = sum(quota.values())
    pools = {"npc": np.arange(len(accepted)), "pc": np.flatnonzero(accepted)}
    v = cfg.synth.videos_per_anatomy
    plan = SyntheticPlan({}, {})
    for variant, pool in pools.items():
        if len(pool) < need:
            raise QuotaError(f"{variant}: need {need} anatomies, have {len(pool)} (shortfall {need - len(pool)})")
        plan.anatomies[variant], plan.replicate[variant] = {}, {}
        start = 0
        for split, n in cfg.data.split_sizes().items():
            ids = pool[start:start + quota[split]]
            start += quota[split]
            plan.anatomies[variant][split] = np.repeat(ids, v)[:n]
            plan.replicate[variant][split] = np.tile(np.arange(v), len(ids))[:n]
    return plan


def draw_ef(cfg: PipelineConfig, candidate: int, replicate: int) -> float:
    g = np.random.default_rng(derive_seed(cfg.seed, "ef-cond", int(candidate), int(replicate)))
    return float(g.uniform(cfg.synth.ef_low, cfg.synth.ef_high))


def animate_keys(lvfm: fm.VideoFlowNet, keys: list[tuple[int, int]], anat: np.ndarray, cfg: PipelineConfig,
                 spec: fm.SamplerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Latent clips for (candidate, replicate) keys, each with its own noise and EF seed."""
    efs = np.array([draw_ef(cfg, c, r) for c, r in keys], np.float32)
    out = []
    bs = cfg.sampler.batch
    for i in range(0, len(keys), bs):
        chunk = keys[i:i + bs]
        x1 = torch.stack([torch.randn(lvfm.geometry, generator=_gen(cfg.seed, "video-noise", c, r)) for c, r in chunk])
        a = _tensor(anat[[c for c, _ in chunk]])
        out.append(fm.animate(lvfm, a, torch.from_numpy(efs[i:i + bs]), spec, x1).numpy())
        log.info("animated %d/%d", min(i + bs, len(keys)), len(keys))
    shape = (0, *lvfm.geometry)
    return (np.concatenate(out) if out else np.zeros(shape, np.float32)), efs


def stage_synthesize(run: RunDir):
    cfg = run.cfg
    avae = _load_avae(run)
    _, _, stats = _load_latents(run)
    lvfm = _load_model(run, "lvfm.ckpt", _video_net(cfg), "lvfm")
    (cp,) = run.require("candidates.npz")
    cand = np.load(cp)
    if str(cand["config_hash"]) != run.hash:
        raise StaleArtifactError(f"{cp} was produced under a different config")
    train = _load_split(run, "train")

    # the relabelling regressor is the real-trained one from this run
    real_x, real_y = ed.stack(train)
    relabeller, _ = _train_and_save(run, "real", real_x, real_y)

    plan = plan_synthetic(cand["accepted"], cfg)
    keys = sorted({(int(c), int(r)) for v in plan.anatomies for s in SPLITS
                   for c, r in zip(plan.anatomies[v][s], plan.replicate[v][s])})
    spec = fm.SamplerSpec(cfg.sampler.steps, cfg.sampler.cfg_scale, cfg.sampler.negative)
    clips, efs = animate_keys(lvfm, keys, cand["latents"], cfg, spec)
    k, h = cfg.avae.latent_channels, cfg.data.size // cfg.avae.compression
    z = av.denormalize(clips.reshape(-1, k, h, h), stats)
    frames = av.decode_latents(avae, z).reshape(len(keys), cfg.data.frames, cfg.data.size, cfg.data.size)
    pos = {key: i for i, key in enumerate(keys)}

    run.path("synth").mkdir(exist_ok=True)
    arts, info = {}, {"unique_videos": len(keys), "counts": {}}
    masks = np.stack([s.mask for s in train])
    for variant in ("npc", "pc"):
        for split in SPLITS:
            samples = []
            for j, (c, r) in enumerate(zip(plan.anatomies[variant][split], plan.replicate[variant][split])):
                i = pos[(int(c), int(r))]
                src = int(cand["source"][c])
                samples.append(ed.VideoSample(frames[i], float(efs[i]), int(cand["view"][c]), masks[src],
                                              SYNTH_ID_BASE + int(c) * cfg.synth.videos_per_anatomy + int(r),
                                              {"candidate": int(c), "replicate": int(r), "ef_condition": float(efs[i])}))
            samples = ds.relabel(samples, relabeller)
            p = run.path(f"synth/{variant}_{split}.etd")
            ed.save_dataset(samples, p)
            arts[f"{variant}_{split}"] = str(p.relative_to(run.root))
            info["counts"][f"{variant}_{split}"] = len(samples)
            if split == "train":
                cond = np.array([s.params["ef_condition"] for s in samples])
                lab = np.array([s.ef for s in samples])
                info[f"{variant}_ef_adherence_corr"] = float(np.corrcoef(cond, lab)[0, 1])
            np.save(run.path(f"synth/{variant}_{split}_candidates.npy"), plan.anatomies[variant][split])
    arts["relabeller"] = "ef_real.ckpt"
    return arts, info


def _variant_training_set(run: RunDir, variant: str) -> tuple[np.ndarray, np.ndarray]:
    cfg = run.cfg
    if variant == "real":
        return ed.stack(_load_split(run, "train"))
    if variant == "recon":
        avae = _load_avae(run)
        mu, _, _ = _load_latents(run)
        m = mu["train"]
        x = av.decode_latents(avae, m.reshape(-1, *m.shape[2:])).reshape(len(m), cfg.data.frames, cfg.data.size, cfg.data.size)
        return x, ed.stack(_load_split(run, "train"))[1]
    (p,) = run.require(f"synth/{variant}_train.etd")
    return ed.stack(ed.load_dataset(p))


def stage_train_ef(run: RunDir):
    arts, info = {}, {}
    for variant in VARIANTS:
        p = run.path(f"ef_{variant}.ckpt")
        if variant == "real" and p.exists():
            run.check_checkpoint(p)  # reuse the relabelling regressor trained in synthesize
            trace = read_header(p)["extra"]["trace"]
        else:
            x, y = _variant_training_set(run, variant)
            _, trace = _train_and_save(run, variant, x, y)
        arts[variant] = p.name
        info[variant] = {"final_mse": trace[-1]["mse"], "epochs": len(trace)}
    return arts, info


def _test_digest(samples: list[ed.VideoSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.uint64(s.video_id).tobytes())
        h.update(np.float64(s.ef).tobytes())
    return h.hexdigest()[:16]


def stage_evaluate(run: RunDir):
    test = _load_split(run, "test")
    x, y = ed.stack(test)
    digest = _test_digest(test)
    out = {}
    for variant in VARIANTS:
        model = _load_regressor(run, variant)
        m = ds.metrics(y, ds.predict(model, x))
        out[variant] = {**m.to_dict(), "test_set": digest}
    info = {"proxy_frechet": _proxy_frechet(run)}
    p = run.path("metrics.json")
    p.write_text(json.dumps({"config_hash": run.hash, "metrics": out, **info}, indent=1, sort_keys=True))
    return {"metrics": p.name}, {v: {k: out[v][k] for k in ("r2", "mae", "rmse")} for v in out}


def _proxy_frechet(run: RunDir) -> dict:
    """Re-id-feature Frechet distance of NPC/PC anatomies to real test ED latents."""
    cfg = run.cfg
    try:
        enc = _load_model(run, "reid.ckpt", _reid_net(cfg), "reid")
        mu, _, stats = _load_latents(run)
        cand = np.load(run.path("candidates.npz"))
    except (StageDependencyError, FileNotFoundError):
        return {}
    real = av.normalize(mu["test"][:, 0], stats)
    out = {}
    for variant in ("npc", "pc"):
        p = run.path(f"synth/{variant}_train_candidates.npy")
        if not p.exists():
            continue
        idx = np.unique(np.load(p))
        try:
            out[variant] = ds.feature_frechet(real, cand["latents"][idx], enc)
        except (ContractError, ds.NumericalError) as exc:
            out[variant] = f"unavailable: {exc}"
    return out


def parity_report(metrics: dict[str, dict], reference: str = "real") -> dict:
    """Per-variant metric rows plus the gap R2_reference - R2_variant (positive: reference better)."""
    if reference not in metrics:
        raise ContractError(f"reference variant {reference!r} missing from metrics")
    sets = {m.get("test_set") for m in metrics.values()}
    if len(sets) != 1:
        raise ContractError(f"variants were evaluated on different test sets: {sorted(map(str, sets))}")
    ns = {m["n"] for m in metrics.values() if "n" in m}
    if len(ns) > 1:
        raise ContractError("variants were evaluated on test sets of different sizes")
    rows = {v: {k: float(m[k]) for k in ("r2", "mae", "rmse")} for v, m in metrics.items()}
    gaps = {v: rows[reference]["r2"] - rows[v]["r2"] for v in rows if v != reference}
    return {"metrics": rows, "parity_gaps": gaps}


def stage_report(run: RunDir):
    (p,) = run.require("metrics.json")
    data = json.loads(p.read_text())
    if data.get("config_hash") != run.hash:
        raise StaleArtifactError(f"{p} was produced under a different config")
    rep = parity_report(data["metrics"])
    stages = [{"stage": r["stage"], "wall_clock_s": r["wall_clock_s"]} for r in run.manifest["stages"]]
    filt = run.last("filter")
    report = {"config_hash": run.hash, "stages": stages, **rep,
              "privacy": {k: filt["info"][k] for k in ("tau", "percentile", "rejection_rate")} if filt else {},
              "proxy_frechet": data.get("proxy_frechet", {})}
    jp, cp = run.path("report.json"), run.path("report.csv")
    jp.write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "value"])
        for variant, row in rep["metrics"].items():
            for metric, value in row.items():
                w.writerow([variant, metric, repr(value)])
    return {"report_json": jp.name, "report_csv": cp.name}, rep


STAGE_FUNCS: dict[str, Callable[[RunDir], tuple[dict, dict]]] = {
    "gen-data": stage_gen_data,
    "train-avae": stage_train_avae,
    "encode": stage_encode,
    "train-lifm": stage_train_lifm,
    "train-reid": stage_train_reid,
    "filter": stage_filter,
    "train-lvfm": stage_train_lvfm,
    "synthesize": stage_synthesize,
    "train-ef": stage_train_ef,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(run: RunDir, stage: str, force: bool = False) -> dict:
    """Run one stage; a stage already recorded under this config is skipped unless ``force``."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    prev = run.last(stage)
    if prev is not None and not force and all(run.path(a).exists() for a in prev["artifacts"].values()):
        log.info("stage %s is up to date", stage)
        return prev
    configure_torch(1)
    t0 = time.perf_counter()
    log.info("stage %s starting", stage)
    arts, info = STAGE_FUNCS[stage](run)
    run.record(stage, arts, info, time.perf_counter() - t0)
    log.info("stage %s done in %.1f s", stage, time.perf_counter() - t0)
    return run.last(stage)


def run_e2e(run: RunDir, force: bool = False, until: str | None = None) -> dict:
    for stage in STAGES:
        run_stage(run, stage, force)
        if stage == until:
            break
    return run.manifest


def sampler_ablation(run: RunDir, steps: list[int], scales: list[float], negatives: list[str] = ("none",),
                     n: int = 64) -> list[dict]:
    """EF adherence of LVFM samples across sampler settings.

    Animates the first ``n`` accepted anatomies once each and scores the
    relabelling regressor's EF against the requested EF (correlation and MAE).
    """
    cfg = run.cfg
    avae = _load_avae(run)
    _, _, stats = _load_latents(run)
    lvfm = _load_model(run, "lvfm.ckpt", _video_net(cfg), "lvfm")
    reg = _load_regressor(run, "real")
    (cp,) = run.require("candidates.npz")
    cand = np.load(cp)
    keys = [(int(c), 0) for c in np.flatnonzero(cand["accepted"])[:n]]
    k, h = cfg.avae.latent_channels, cfg.data.size // cfg.avae.compression
    rows = []
    for neg in negatives:
        for scale in scales:
            for st in steps:
                t0 = time.perf_counter()
                clips, efs = animate_keys(lvfm, keys, cand["latents"], cfg, fm.SamplerSpec(st, scale, neg))
                frames = av.decode_latents(avae, av.denormalize(clips.reshape(-1, k, h, h), stats))
                pred = ds.predict(reg, frames.reshape(len(keys), cfg.data.frames, cfg.data.size, cfg.data.size))
                rows.append({"steps": st, "cfg_scale": scale, "negative": neg, "n": len(keys),
                             "ef_corr": float(np.corrcoef(efs, pred)[0, 1]),
                             "ef_mae": float(np.abs(efs - pred).mean()),
                             "seconds": time.perf_counter() - t0})
                log.info("ablation %s", rows[-1])
    return rows
