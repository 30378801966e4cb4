"""Downstream task training and evaluation: depth enhancement (noisy depth to
clean depth) and surface-normal estimation (depth to normals).

Both tasks share one U-shaped architecture and are trained with masked L1 on
valid ground-truth pixels, then optionally fine-tuned on a seeded fraction of
real-domain labels. Evaluation refuses manifests that overlap any manifest
the model was trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .metrics import (DepthMetricAccumulator, EvaluationError, MetricReport,
                      NormalMetricAccumulator)
from .nn_core import (Adam, ConfigError, init_weights, denormalize_depth,
                      load_archive, normalize_depth, save_archive)
from .scenegen import load_manifest
from .depth_core import DepthMap, NormalMap, read_depth, read_normals

TASK_KINDS = ("enhance", "normals")


class SplitError(ValueError):
    """Raised when evaluation data overlaps a training split."""


@dataclass
class TaskConfig:
    kind: str = "enhance"
    steps: int = 800
    batch: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    base_width: int = 32

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**d)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.InstanceNorm2d(cout), nn.ReLU(inplace=True))


class TaskUNet(nn.Module):
    """Four-scale U-Net shared by both tasks; output head differs per task."""

    def __init__(self, out_channels, width=32):
        super().__init__()
        w = width
        self.enc0 = nn.Sequential(_conv_block(1, w), _conv_block(w, w))
        self.enc1 = nn.Sequential(_conv_block(w, 2 * w, stride=2),
                                  _conv_block(2 * w, 2 * w))
        self.enc2 = nn.Sequential(_conv_block(2 * w, 4 * w, stride=2),
                                  _conv_block(4 * w, 4 * w))
        self.enc3 = nn.Sequential(_conv_block(4 * w, 8 * w, stride=2),
                                  _conv_block(8 * w, 8 * w))
        self.up3 = nn.ConvTranspose2d(8 * w, 4 * w, 3, stride=2, padding=1,
                                      output_padding=1)
        self.dec2 = _conv_block(8 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1,
                                      output_padding=1)
        self.dec1 = _conv_block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1,
                                      output_padding=1)
        self.dec0 = _conv_block(2 * w, w)
        self.head = nn.Conv2d(w, out_channels, 3, padding=1)

    def forward(self, x):
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([self.up3(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up2(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up1(d1), e0], dim=1))
        return self.head(d0)


@dataclass
class TaskModel:
    kind: str
    net: TaskUNet
    config: TaskConfig
    d_max: float
    provenance: dict = field(default_factory=dict)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Task output from a normalized depth batch (B, 1, H, W)."""
        out = self.net(x)
        if self.kind == "enhance":
            return torch.tanh(out)
        return out / (out.norm(dim=1, keepdim=True) + 1e-8)


class TaskDataset:
    """(input depth, target) tensors from a manifest, plus split identity."""

    def __init__(self, manifest_path, kind: str):
        manifest = load_manifest(manifest_path)
        base = Path(manifest["_dir"])
        if manifest["count"] == 0:
            raise ConfigError(f"dataset {manifest_path} is empty")
        inputs, targets, masks, paths = [], [], [], []
        d_max = None
        for entry in manifest["entries"]:
            depth_path = (base / entry["depth"]).resolve()
            paths.append(str(depth_path))
            dm, _ = read_depth(depth_path)
            d_max = dm.d_max if d_max is None else d_max
            inputs.append(normalize_depth(dm.values, dm.d_max))
            if kind == "enhance":
                gt, _ = read_depth(base / entry["clean_depth"])
                targets.append(normalize_depth(gt.values, gt.d_max))
                masks.append((gt.values > 0).astype(np.float32))
            else:
                gt = read_normals(base / entry["normals"])
                targets.append(gt.values.transpose(2, 0, 1).astype(np.float32))
                masks.append(np.any(gt.values != 0, axis=2).astype(np.float32))
        self.manifest = manifest
        self.method = manifest.get("method") or (
            "clean" if manifest["domain"] == "synth" else "real")
        self.d_max = d_max
        self.paths = paths
        self.inputs = torch.from_numpy(np.stack(inputs)[:, None])
        if kind == "enhance":
            self.targets = torch.from_numpy(np.stack(targets)[:, None])
        else:
            self.targets = torch.from_numpy(np.stack(targets))
        self.masks = torch.from_numpy(np.stack(masks)[:, None])

    def __len__(self):
        return self.inputs.shape[0]


def _masked_l1(pred, target, mask):
    denom = mask.sum() * pred.shape[1]
    return ((pred - target).abs() * mask).sum() / torch.clamp(denom, min=1.0)


def _train_on(model: TaskModel, ds: TaskDataset, steps: int, batch: int,
              lr: float, betas, rng: np.random.Generator) -> None:
    opt = Adam({n: p for n, p in model.net.named_parameters()}, lr=lr, betas=betas)
    n = len(ds)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        x = ds.inputs[idx]
        y = ds.targets[idx]
        mask = ds.masks[idx]
        pred = model.predict(x)
        loss = _masked_l1(pred, y, mask)
        if not torch.isfinite(loss):
            raise ConfigError("non-finite task loss")
        opt.zero_grad()
        loss.backward()
        opt.step()


def train_task(kind: str, manifest_path, cfg: TaskConfig) -> TaskModel:
    """Train a task network on a (possibly synthesized) dataset."""
    cfg.validate()
    if cfg.kind != kind:
        cfg = TaskConfig.from_dict({**cfg.to_dict(), "kind": kind})
    ds = TaskDataset(manifest_path, kind)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = TaskUNet(out_channels=1 if kind == "enhance" else 3,
                   width=cfg.base_width)
    init_weights(net, gen)
    model = TaskModel(kind=kind, net=net, config=cfg, d_max=ds.d_max,
                      provenance={"method": ds.method, "seed": cfg.seed,
                                  "train_paths": list(ds.paths),
                                  "finetune_fraction": 0.0})
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7a5c]))
    _train_on(model, ds, cfg.steps, cfg.batch, cfg.lr, (cfg.beta1, cfg.beta2), rng)
    return model


def finetune(model: TaskModel, real_manifest, fraction: float,
             cfg: TaskConfig) -> TaskModel:
    """Continue training on a seeded fraction of real labels at half lr."""
    if not 0 < fraction <= 1:
        raise ConfigError("fine-tune fraction must lie in (0, 1]")
    cfg.validate()
    ds = TaskDataset(real_manifest, model.kind)
    k = round(fraction * len(ds))
    if k == 0:
        raise ConfigError("fine-tune subset is empty after rounding")
    pick_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xf17e]))
    subset = np.sort(pick_rng.permutation(len(ds))[:k])
    ds.inputs = ds.inputs[subset]
    ds.targets = ds.targets[subset]
    ds.masks = ds.masks[subset]
    ds.paths = [ds.paths[i] for i in subset]

    model.provenance = dict(model.provenance)
    model.provenance["finetune_fraction"] = fraction
    model.provenance["train_paths"] = (list(model.provenance["train_paths"])
                                       + list(ds.paths))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xf17f]))
    _train_on(model, ds, cfg.steps, cfg.batch, cfg.lr / 2,
              (cfg.beta1, cfg.beta2), rng)
    return model


def evaluate_task(model: TaskModel, val_manifest, batch: int = 32) -> MetricReport:
    """Metrics over a validation manifest disjoint from all training splits."""
    manifest = load_manifest(val_manifest)
    base = Path(manifest["_dir"])
    val_paths = {str((base / e["depth"]).resolve()) for e in manifest["entries"]}
    overlap = val_paths & set(model.provenance.get("train_paths", ()))
    if overlap:
        raise SplitError(f"validation overlaps training data: "
                         f"{sorted(overlap)[:3]} ...")
    if not manifest["entries"]:
        raise EvaluationError("validation manifest is empty")

    acc = (DepthMetricAccumulator() if model.kind == "enhance"
           else NormalMetricAccumulator())
    entries = manifest["entries"]
    with torch.no_grad():
        for lo in range(0, len(entries), batch):
            chunk = entries[lo:lo + batch]
            inputs, gts = [], []
            for entry in chunk:
                dm, _ = read_depth(base / entry["depth"])
                inputs.append(normalize_depth(dm.values, dm.d_max))
                if model.kind == "enhance":
                    gt, _ = read_depth(base / entry["clean_depth"])
                else:
                    gt = read_normals(base / entry["normals"])
                gts.append(gt)
            x = torch.from_numpy(np.stack(inputs)[:, None])
            pred = model.predict(x).numpy()
            for j, gt in enumerate(gts):
                if model.kind == "enhance":
                    vals = denormalize_depth(pred[j, 0], model.d_max)
                    acc.add(DepthMap(values=vals, d_max=model.d_max), gt)
                else:
                    nm = NormalMap(values=pred[j].transpose(1, 2, 0))
                    acc.add(nm, gt)
    provenance = {"task": model.kind, "method": model.provenance.get("method"),
                  "seed": model.provenance.get("seed"),
                  "finetune_fraction": model.provenance.get("finetune_fraction"),
                  "validation": str(val_manifest),
                  "n_samples": len(entries)}
    return acc.report(provenance)


def save_task_model(path, model: TaskModel) -> None:
    arrays = {f"param/{n}": p.detach().cpu().numpy().astype(np.float32)
              for n, p in model.net.named_parameters()}
    config = {"task": model.config.to_dict(), "kind": model.kind,
              "d_max": model.d_max}
    save_archive(path, config, arrays, meta={"provenance": model.provenance})


def load_task_model(path) -> TaskModel:
    config, arrays, meta = load_archive(path)
    cfg = TaskConfig.from_dict(config["task"])
    kind = config["kind"]
    net = TaskUNet(out_channels=1 if kind == "enhance" else 3,
                   width=cfg.base_width)
    with torch.no_grad():
        for n, p in net.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param/{n}"].copy()))
    return TaskModel(kind=kind, net=net, config=cfg, d_max=config["d_max"],
                     provenance=meta.get("provenance", {}))
