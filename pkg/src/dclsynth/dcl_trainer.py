"""Alternating adversarial training over unpaired clean/noisy depth datasets,
checkpointing, and bulk synthesis of realistic depth from clean depth."""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import dcl_losses as L
from .nn_core import (Adam, ModelConfig, ModelSet, NumericError, ConfigError,
                      build_models, encode_taps, forward_synthesis,
                      denormalize_depth, normalize_depth, normalize_rgb,
                      load_dcl_checkpoint, save_dcl_checkpoint)
from .scenegen import load_manifest
from .depth_core import CameraIntrinsics, DepthMap, read_depth, read_rgb, write_depth

LOG_KEYS = ("step", "adv_d", "adv_g", "dc", "idt", "total")


@dataclass
class TrainConfig:
    alpha: float = 1.5
    beta: float = 1.0
    tau: float = 0.07
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    use_rgb: bool = False
    use_adv: bool = True
    use_dc: bool = True
    use_idt: bool = True
    gan_mode: str = "logistic"
    anchors: int = L.DEFAULT_ANCHORS
    partners: int = L.DEFAULT_PARTNERS
    local_radius: int = L.DEFAULT_LOCAL_RADIUS
    checkpoint_every: int = 1000
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch size and step budget must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        return cls(**kw)


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)   # LossBreakdown per step
    wall: list = field(default_factory=list)      # seconds per step
    rng_checkpoints: list = field(default_factory=list)

    def append(self, step: int, lb: L.LossBreakdown, seconds: float) -> None:
        if not all(np.isfinite(v) for v in lb.to_dict().values()):
            raise NumericError(f"non-finite loss at step {step}")
        self.entries.append((step, lb))
        self.wall.append(seconds)

    def write_jsonl(self, path) -> None:
        lines = []
        for step, lb in self.entries:
            row = {"step": step, **lb.to_dict()}
            lines.append(json.dumps(row, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")


class DepthDataset:
    """Manifest contents preloaded as normalized torch tensors."""

    def __init__(self, manifest_path, with_rgb: bool = False):
        manifest = load_manifest(manifest_path)
        base = Path(manifest["_dir"])
        if manifest["count"] == 0:
            raise ConfigError(f"dataset {manifest_path} is empty")
        depths, rgbs = [], []
        d_max = None
        for entry in manifest["entries"]:
            dm, _ = read_depth(base / entry["depth"])
            d_max = dm.d_max if d_max is None else d_max
            depths.append(normalize_depth(dm.values, dm.d_max))
            if with_rgb:
                rgbs.append(normalize_rgb(read_rgb(base / entry["rgb"]).values))
        self.manifest = manifest
        self.d_max = d_max
        self.depth = torch.from_numpy(np.stack(depths)[:, None])  # (N,1,H,W)
        self.rgb = (torch.from_numpy(np.stack(rgbs).transpose(0, 3, 1, 2))
                    if with_rgb else None)

    def __len__(self):
        return self.depth.shape[0]

    @property
    def res(self):
        return tuple(self.depth.shape[2:])


class EpochSampler:
    """Shuffled epoch iteration with its own rng stream.

    Permutations are drawn lazily so that (rng state, order, pos) fully
    describe the sampler for bit-exact checkpoint resume.
    """

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self.order = None
        self.pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        while len(out) < self.batch:
            if self.order is None or self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + take])
            self.pos += take
        return np.asarray(out)

    def state(self) -> dict:
        return {"order": None if self.order is None else self.order.tolist(),
                "pos": self.pos}

    def set_state(self, st: dict) -> None:
        self.order = None if st["order"] is None else np.asarray(st["order"])
        self.pos = st["pos"]


def _tap_extents(cfg: TrainConfig):
    res = cfg.model.res
    sizes = [(res, res), (res, res), (res // 2, res // 2), (res // 4, res // 4)]
    sizes += [(res // 4, res // 4)] * cfg.model.encoder_blocks
    return [sizes[i] for i in cfg.model.tap_indices]


def train_step(m: ModelSet, opt_g: Adam, opt_d: Adam, batch_s: dict,
               batch_r: dict, cfg: TrainConfig,
               rng: np.random.Generator) -> L.LossBreakdown:
    """One D update followed by one generator update on a pair of batches.

    The synth and real batches share one generator forward pass (instance
    normalization keeps batch items independent, so per-sample outputs are
    unchanged by the concatenation).
    """
    d_s, rgb_s = batch_s["depth"], batch_s.get("rgb")
    d_r, rgb_r = batch_r["depth"], batch_r.get("rgb")
    b = d_s.shape[0]

    if cfg.use_idt:
        d_in = torch.cat([d_s, d_r], dim=0)
        rgb_in = (torch.cat([rgb_s, rgb_r], dim=0)
                  if rgb_s is not None else None)
        out, taps = forward_synthesis(m, d_in, rgb_in)
        fake = out[:b]
        taps_s = [t[:b] for t in taps]
        idt = (out[b:] - d_r).abs().mean()
    else:
        fake, taps_s = forward_synthesis(m, d_s, rgb_s)
        idt = None

    adv_d_val = 0.0
    adv_g = None
    if cfg.use_adv:
        # the D graph stops at fake.detach(), so no retain_graph is needed
        adv_d = L.loss_adv_d(m.discriminator, d_r, fake, mode=cfg.gan_mode)
        opt_d.zero_grad()
        opt_g.zero_grad()
        adv_d.backward()
        opt_d.step()
        adv_d_val = float(adv_d.detach())
        adv_g = L.loss_adv_g(m.discriminator, fake, mode=cfg.gan_mode)

    dc = None
    if cfg.use_dc:
        taps_hat = encode_taps(m, fake)
        samples = L.draw_pair_samples(_tap_extents(cfg), b, rng,
                                      anchors=cfg.anchors, partners=cfg.partners,
                                      local_radius=cfg.local_radius)
        dc = L.loss_dc(taps_s, taps_hat, m.heads, samples, tau=cfg.tau)

    zero = fake.new_zeros(())
    g_loss = L.loss_total(adv_g if adv_g is not None else zero,
                          dc if dc is not None else zero,
                          idt if idt is not None else zero,
                          cfg.alpha, cfg.beta)
    opt_g.zero_grad()
    opt_d.zero_grad()
    g_loss.backward()
    opt_g.step()

    return L.LossBreakdown(
        adv_d=adv_d_val,
        adv_g=float(adv_g.detach()) if adv_g is not None else 0.0,
        dc=float(dc.detach()) if dc is not None else 0.0,
        idt=float(idt.detach()) if idt is not None else 0.0,
        total=float(g_loss.detach()))


def _rng_state(rngs: dict, sampler_s=None, sampler_r=None) -> dict:
    state = {k: v.bit_generator.state for k, v in rngs.items()}
    if sampler_s is not None:
        state["sampler_s"] = sampler_s.state()
        state["sampler_r"] = sampler_r.state()
    return state


def _make_batch(ds: DepthDataset, idx: np.ndarray, use_rgb: bool) -> dict:
    batch = {"depth": ds.depth[idx]}
    if use_rgb:
        batch["rgb"] = ds.rgb[idx]
    return batch


def train(synth_manifest, real_manifest, cfg: TrainConfig, out_dir,
          start_checkpoint=None) -> tuple:
    """Full training run; returns (final checkpoint path, TrainLog)."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ds_s = DepthDataset(synth_manifest, with_rgb=cfg.use_rgb)
    ds_r = DepthDataset(real_manifest, with_rgb=cfg.use_rgb)
    if ds_s.res != (cfg.model.res, cfg.model.res):
        raise ConfigError(f"dataset resolution {ds_s.res} does not match model "
                          f"resolution {cfg.model.res}")

    cfg.model = replace(cfg.model, use_rgb=cfg.use_rgb)
    m = build_models(cfg.model, seed=cfg.seed)
    opt_g = Adam(m.generator_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = Adam(m.discriminator_parameters(), lr=cfg.lr,
                 betas=(cfg.beta1, cfg.beta2))

    ss = np.random.SeedSequence(cfg.seed)
    kids = ss.spawn(3)
    rngs = {"synth": np.random.default_rng(kids[0]),
            "real": np.random.default_rng(kids[1]),
            "pairs": np.random.default_rng(kids[2])}
    sampler_s = EpochSampler(len(ds_s), cfg.batch_size, rngs["synth"])
    sampler_r = EpochSampler(len(ds_r), cfg.batch_size, rngs["real"])
    start_step = 0

    if start_checkpoint is not None:
        m, arrays, meta = load_dcl_checkpoint(start_checkpoint)
        opt_g = Adam(m.generator_parameters(), lr=cfg.lr,
                     betas=(cfg.beta1, cfg.beta2))
        opt_d = Adam(m.discriminator_parameters(), lr=cfg.lr,
                     betas=(cfg.beta1, cfg.beta2))
        opt_g.load_state_arrays(arrays, "opt_g", meta["opt_g_step"])
        opt_d.load_state_arrays(arrays, "opt_d", meta["opt_d_step"])
        start_step = meta["step"]
        for key in ("synth", "real", "pairs"):
            rngs[key].bit_generator.state = meta["rng"][key]
        sampler_s.set_state(meta["rng"]["sampler_s"])
        sampler_r.set_state(meta["rng"]["sampler_r"])

    log = TrainLog()
    last_good = None
    for step in range(start_step + 1, cfg.steps + 1):
        batch_s = _make_batch(ds_s, sampler_s.next_indices(), cfg.use_rgb)
        batch_r = _make_batch(ds_r, sampler_r.next_indices(), cfg.use_rgb)
        t0 = time.perf_counter()
        try:
            lb = train_step(m, opt_g, opt_d, batch_s, batch_r, cfg, rngs["pairs"])
            log.append(step, lb, time.perf_counter() - t0)
        except NumericError as err:
            raise NumericError(f"{err}; last good checkpoint: {last_good}") from err

        if step % cfg.log_every == 0 or step == cfg.steps:
            print(f"step {step:6d}  adv_d {lb.adv_d:.4f}  adv_g {lb.adv_g:.4f}  "
                  f"dc {lb.dc:.4f}  idt {lb.idt:.4f} "
                  f"({lb.idt * ds_r.d_max / 2:.4f} m)  total {lb.total:.4f}",
                  flush=True)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            state = _rng_state(rngs, sampler_s, sampler_r)
            last_good = out_dir / f"ckpt_{step:07d}.dclckpt"
            save_dcl_checkpoint(last_good, m, opt_g, opt_d, step, rng_state=state)
            log.rng_checkpoints.append((step, state))

    final = out_dir / "ckpt_final.dclckpt"
    save_dcl_checkpoint(final, m, opt_g, opt_d, cfg.steps,
                        rng_state=_rng_state(rngs, sampler_s, sampler_r),
                        meta={"train_config": cfg.to_dict()})
    log.write_jsonl(out_dir / "train_log.jsonl")
    return final, log


def synthesize_dataset(checkpoint_path, clean_manifest, out_dir,
                       batch: int = 32) -> Path:
    """Transform every clean sample; ground-truth labels are copied verbatim."""
    m, _, _ = load_dcl_checkpoint(checkpoint_path)
    m.eval()
    manifest = load_manifest(clean_manifest)
    base = Path(manifest["_dir"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = manifest["entries"]
    if not entries:
        raise ConfigError("clean manifest is empty")
    first, _ = read_depth(base / entries[0]["depth"])
    if first.values.shape != (m.config.res, m.config.res):
        raise ConfigError("manifest resolution does not match checkpoint")

    out_entries = []
    with torch.no_grad():
        for lo in range(0, len(entries), batch):
            chunk = entries[lo:lo + batch]
            depths, rgbs, d_maxes = [], [], []
            for entry in chunk:
                dm, _ = read_depth(base / entry["depth"])
                depths.append(normalize_depth(dm.values, dm.d_max))
                d_maxes.append(dm.d_max)
                if m.config.use_rgb:
                    rgbs.append(normalize_rgb(read_rgb(base / entry["rgb"]).values))
            x = torch.from_numpy(np.stack(depths)[:, None])
            rgb = (torch.from_numpy(np.stack(rgbs).transpose(0, 3, 1, 2))
                   if m.config.use_rgb else None)
            out, _ = forward_synthesis(m, x, rgb)
            out = out.numpy()[:, 0]
            for j, entry in enumerate(chunk):
                i = lo + j
                stem = f"s{i:06d}"
                meters = denormalize_depth(out[j], d_maxes[j])
                dm = DepthMap(values=meters, d_max=d_maxes[j])
                k = entry["intrinsics"]
                write_depth(out_dir / f"{stem}_depth.pgm", dm,
                            CameraIntrinsics.from_dict(k),
                            domain=manifest["domain"], seed=manifest["seed"])
                new_entry = {"depth": f"{stem}_depth.pgm",
                             "intrinsics": dict(entry["intrinsics"])}
                for key in ("clean_depth", "rgb", "normals"):
                    src = base / entry[key]
                    suffix = Path(entry[key]).suffix
                    dst_name = f"{stem}_{key}{suffix}"
                    shutil.copyfile(src, out_dir / dst_name)
                    new_entry[key] = dst_name
                    sidecar = src.with_suffix(".json")
                    if sidecar.exists():
                        shutil.copyfile(sidecar,
                                        (out_dir / dst_name).with_suffix(".json"))
                out_entries.append(new_entry)

    out_manifest = {k: v for k, v in manifest.items() if k != "_dir"}
    out_manifest.update(entries=out_entries, method="dcl",
                        checkpoint=str(checkpoint_path))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(out_manifest, indent=2, sort_keys=True))
    return path
