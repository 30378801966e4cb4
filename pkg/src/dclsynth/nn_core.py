"""Trainable networks for depth synthesis and the optimizer/checkpoint plumbing.

The transformation network is a residual encoder/decoder pair; an optional
RGB encoder with the same structure feeds the decoder through channel
concatenation. A patch discriminator scores local realism, and per-tapped-layer
projection heads map features to the contrastive embedding space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"DCLCKPT1"
HOLE_LEVEL = -0.995  # normalized values below this decode to "missing"


class ConfigError(ValueError):
    """Raised for model/training configurations violating their invariants."""


class UsageError(ValueError):
    """Raised when a forward call disagrees with the built configuration."""


class NumericError(RuntimeError):
    """Raised when training produces non-finite values."""


@dataclass
class ModelConfig:
    res: int = 64
    base_width: int = 32
    res_blocks: int = 6
    tap_indices: tuple = (0, 1, 2, 3, 6)
    proj_dim: int = 128
    use_rgb: bool = False
    disc_layers: int = 3

    def __post_init__(self):
        self.tap_indices = tuple(self.tap_indices)

    @property
    def encoder_blocks(self) -> int:
        return (self.res_blocks + 1) // 2

    @property
    def decoder_blocks(self) -> int:
        return self.res_blocks // 2

    def validate(self) -> None:
        if self.res < 8 or self.res % 4 != 0:
            raise ConfigError("resolution must be >= 8 and divisible by 4")
        taps = self.tap_indices
        if len(taps) != 5:
            raise ConfigError("exactly 5 tapped layers are required")
        if taps[0] != 0:
            raise ConfigError("the first tap must be the input raster (index 0)")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError("tap indices must be strictly increasing")
        if taps[-1] > 3 + self.encoder_blocks:
            raise ConfigError("tap index beyond the last encoder stage")
        if self.base_width < 1 or self.res_blocks < 2 or self.disc_layers < 1:
            raise ConfigError("bad width/depth configuration")

    def tap_channels(self) -> list:
        """Channel count at every tap point of the depth encoder."""
        w = self.base_width
        chans = [1, w, 2 * w, 4 * w] + [4 * w] * self.encoder_blocks
        return [chans[i] for i in self.tap_indices]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_indices"] = list(self.tap_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Stem + two stride-2 downsamplers + residual trunk, with tap points."""

    def __init__(self, in_channels, width, blocks):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, padding=3),
            nn.InstanceNorm2d(width), nn.ReLU(inplace=True))
        self.down1 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * width), nn.ReLU(inplace=True))
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * width), nn.ReLU(inplace=True))
        self.blocks = nn.ModuleList(ResBlock(4 * width) for _ in range(blocks))

    def forward(self, x):
        taps = [x]
        x = self.stem(x)
        taps.append(x)
        x = self.down1(x)
        taps.append(x)
        x = self.down2(x)
        taps.append(x)
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return x, taps


class Decoder(nn.Module):
    """Residual trunk + two stride-2 upsamplers + tanh raster head."""

    def __init__(self, width, blocks, fuse_rgb=False):
        super().__init__()
        self.fuse = None
        if fuse_rgb:
            self.fuse = nn.Sequential(
                nn.Conv2d(8 * width, 4 * width, 3, padding=1),
                nn.InstanceNorm2d(4 * width), nn.ReLU(inplace=True))
        self.blocks = nn.ModuleList(ResBlock(4 * width) for _ in range(blocks))
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * width, 2 * width, 3, stride=2, padding=1,
                               output_padding=1),
            nn.InstanceNorm2d(2 * width), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(2 * width, width, 3, stride=2, padding=1,
                               output_padding=1),
            nn.InstanceNorm2d(width), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(width, 1, 7, padding=3)

    def forward(self, x):
        if self.fuse is not None:
            x = self.fuse(x)
        for block in self.blocks:
            x = block(x)
        x = self.up1(x)
        x = self.up2(x)
        return torch.tanh(self.out(x))


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack emitting a raster of per-patch logits."""

    def __init__(self, width, layers):
        super().__init__()
        mods = [nn.Conv2d(1, width, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True)]
        ch = width
        for _ in range(layers - 1):
            nxt = min(2 * ch, 8 * width)
            mods += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                     nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, inplace=True)]
            ch = nxt
        mods.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class ProjectionHead(nn.Module):
    """Two affine layers with a nonlinearity; applied per spatial location."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, out_dim), nn.ReLU(inplace=True),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, x):
        return self.net(x)


@dataclass
class ModelSet:
    config: ModelConfig
    encoder: Encoder
    decoder: Decoder
    rgb_encoder: Encoder | None
    discriminator: PatchDiscriminator
    heads: nn.ModuleList

    def components(self) -> dict:
        comps = {"enc": self.encoder, "dec": self.decoder,
                 "disc": self.discriminator, "heads": self.heads}
        if self.rgb_encoder is not None:
            comps["rgb"] = self.rgb_encoder
        return comps

    def named_parameter_dict(self) -> dict:
        out = {}
        for prefix, mod in self.components().items():
            for name, p in mod.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def generator_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameter_dict().items()
                if not k.startswith("disc.")}

    def discriminator_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameter_dict().items()
                if k.startswith("disc.")}

    def to(self, dtype) -> "ModelSet":
        for mod in self.components().values():
            mod.to(dtype)
        return self

    def eval(self) -> "ModelSet":
        for mod in self.components().values():
            mod.eval()
        return self


def init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def build_models(cfg: ModelConfig, seed: int) -> ModelSet:
    """Construct all networks with deterministic initialization."""
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed))
    w = cfg.base_width
    encoder = Encoder(1, w, cfg.encoder_blocks)
    decoder = Decoder(w, cfg.decoder_blocks, fuse_rgb=cfg.use_rgb)
    rgb_encoder = Encoder(3, w, cfg.encoder_blocks) if cfg.use_rgb else None
    disc = PatchDiscriminator(w, cfg.disc_layers)
    heads = nn.ModuleList(ProjectionHead(c, cfg.proj_dim)
                          for c in cfg.tap_channels())
    ms = ModelSet(config=cfg, encoder=encoder, decoder=decoder,
                  rgb_encoder=rgb_encoder, discriminator=disc, heads=heads)
    # fixed component order keeps initialization reproducible
    for name in ("enc", "dec", "rgb", "disc", "heads"):
        if name in ms.components():
            init_weights(ms.components()[name], gen)
    return ms


def encode_taps(m: ModelSet, d: torch.Tensor) -> list:
    """Tapped feature maps of the depth encoder at the configured indices."""
    _, taps = m.encoder(d)
    return [taps[i] for i in m.config.tap_indices]


def forward_synthesis(m: ModelSet, d: torch.Tensor, rgb: torch.Tensor | None = None):
    """Synthesize a noisy raster; returns (output, tapped encoder features)."""
    if m.config.use_rgb and rgb is None:
        raise UsageError("this model requires an rgb raster")
    if not m.config.use_rgb and rgb is not None:
        raise UsageError("this model does not take an rgb raster")
    code, taps = m.encoder(d)
    if m.config.use_rgb:
        rgb_code, _ = m.rgb_encoder(rgb)
        code = torch.cat([code, rgb_code], dim=1)
    out = m.decoder(code)
    return out, [taps[i] for i in m.config.tap_indices]


# ---------------------------------------------------------------------------
# depth <-> network range


def normalize_depth(values: np.ndarray, d_max: float) -> np.ndarray:
    """Map meters to [-1, 1]; missing pixels (0 m) land exactly at -1."""
    return (2.0 * (np.asarray(values, dtype=np.float64) / d_max) - 1.0).astype(np.float32)


def denormalize_depth(unit: np.ndarray, d_max: float) -> np.ndarray:
    """Map network range back to meters; saturated lows decode as missing."""
    u = np.asarray(unit, dtype=np.float64)
    d = (u + 1.0) / 2.0 * d_max
    d = np.clip(d, 0.0, d_max)
    d[u < HOLE_LEVEL] = 0.0
    return d


def normalize_rgb(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Named-parameter adaptive-moment optimizer with serializable state."""

    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.5, 0.999),
                 eps: float = 1e-8):
        self.names = list(params.keys())
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.opt = torch.optim.Adam(list(params.values()), lr=lr, betas=self.betas,
                                    eps=eps, foreach=False)
        self.step_count = 0

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self):
        for name in self.names:
            g = self.params[name].grad
            if g is not None and not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
        self.opt.step()
        self.step_count += 1

    def state_arrays(self, prefix: str) -> dict:
        arrays = {}
        for name in self.names:
            p = self.params[name]
            st = self.opt.state.get(p)
            if st:
                m = st["exp_avg"].detach().cpu().numpy()
                v = st["exp_avg_sq"].detach().cpu().numpy()
            else:
                m = np.zeros(p.shape, dtype=np.float32)
                v = np.zeros(p.shape, dtype=np.float32)
            arrays[f"{prefix}/{name}/m"] = m.astype(np.float32)
            arrays[f"{prefix}/{name}/v"] = v.astype(np.float32)
        return arrays

    def load_state_arrays(self, arrays: dict, prefix: str, step: int):
        for name in self.names:
            p = self.params[name]
            m = torch.from_numpy(arrays[f"{prefix}/{name}/m"].copy()).to(p.dtype)
            v = torch.from_numpy(arrays[f"{prefix}/{name}/v"].copy()).to(p.dtype)
            self.opt.state[p] = {"step": torch.tensor(float(step)),
                                 "exp_avg": m, "exp_avg_sq": v}
        self.step_count = step


def optimizer_step(opt: Adam, grads: dict) -> None:
    """Apply one update from explicit per-parameter gradients."""
    for name in opt.names:
        p = opt.params[name]
        g = grads.get(name)
        p.grad = None if g is None else g.to(p.dtype).clone()
    opt.step()


# ---------------------------------------------------------------------------
# checkpoint container: magic, length-prefixed JSON header, float32 payload


def save_archive(path, config: dict, arrays: dict, meta: dict | None = None) -> None:
    """Write named float32 arrays plus JSON config/meta in one archive."""
    names = sorted(arrays.keys())
    table = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        blobs.append(arr.tobytes())
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"format": CHECKPOINT_MAGIC.decode("ascii"), "config": config,
              "arrays": table, "meta": meta or {}}
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_archive(path):
    """Read an archive written by save_archive; returns (config, arrays, meta)."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ConfigError("not a checkpoint archive")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        data = f.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["config"], arrays, header.get("meta", {})


def model_arrays(m: ModelSet) -> dict:
    return {f"param/{name}": p.detach().cpu().numpy().astype(np.float32)
            for name, p in m.named_parameter_dict().items()}


def load_model_arrays(m: ModelSet, arrays: dict) -> None:
    with torch.no_grad():
        for name, p in m.named_parameter_dict().items():
            key = f"param/{name}"
            if key not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name}")
            src = torch.from_numpy(arrays[key].copy())
            if tuple(src.shape) != tuple(p.shape):
                raise ConfigError(f"shape mismatch for {name}")
            p.copy_(src.to(p.dtype))


def save_dcl_checkpoint(path, m: ModelSet, opt_g: Adam | None, opt_d: Adam | None,
                        step: int, rng_state: dict | None = None,
                        meta: dict | None = None) -> None:
    arrays = model_arrays(m)
    opt_meta = {}
    if opt_g is not None:
        arrays.update(opt_g.state_arrays("opt_g"))
        opt_meta["opt_g_step"] = opt_g.step_count
    if opt_d is not None:
        arrays.update(opt_d.state_arrays("opt_d"))
        opt_meta["opt_d_step"] = opt_d.step_count
    full_meta = {"kind": "dcl", "step": step, "rng": rng_state, **opt_meta,
                 **(meta or {})}
    save_archive(path, m.config.to_dict(), arrays, full_meta)


def load_dcl_checkpoint(path):
    """Rebuild a ModelSet (parameters restored); returns (model, arrays, meta)."""
    config, arrays, meta = load_archive(path)
    cfg = ModelConfig.from_dict(config)
    m = build_models(cfg, seed=0)
    load_model_arrays(m, arrays)
    return m, arrays, meta
