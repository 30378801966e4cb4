"""Procedural generation of the two unpaired depth domains.

A clean "synth" domain and a noisy "real" domain are both rendered from
random primitive scenes by an analytic ray caster; the real domain is then
corrupted by a parametric sensor-noise model (axial/lateral noise,
quantization, grazing and material dropout, occlusion shadows). The same
noise model doubles as the geometry-only simulation baseline.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .depth_core import (CameraIntrinsics, DepthMap, NormalMap, RgbImage,
                         default_intrinsics, read_depth, read_normals,
                         read_rgb, write_depth, write_normals, write_rgb)

RAY_T_NEAR = 0.05
AMBIENT = 0.15
BOX_ASPECT = np.array([1.0, 0.7, 0.45])


class GenerationError(RuntimeError):
    """Raised when rejection sampling cannot place a primitive."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_from_z(z_axis: np.ndarray) -> np.ndarray:
    """Rotation whose third column is the given (unit) direction."""
    z = np.asarray(z_axis, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


@dataclass
class Primitive:
    kind: str  # plane | box | sphere
    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)
    size: float
    albedo: np.ndarray  # (3,)
    specularity: float


@dataclass
class Scene:
    primitives: list
    background_dist: float
    background_albedo: np.ndarray


@dataclass
class DomainConfig:
    domain: str = "synth"
    res: tuple = (64, 64)
    d_max: float = 8.0
    n_primitives: tuple = (3, 7)
    kind_probs: tuple = (0.34, 0.33, 0.33)  # plane, box, sphere
    size_range: tuple = (0.25, 0.8)
    depth_range: tuple = (1.2, 3.8)
    background_range: tuple = (4.0, 6.0)
    albedo_range: tuple = (0.05, 0.95)
    bg_albedo_range: tuple = (0.3, 0.9)
    specular_prob: float = 0.25
    frustum_margin: float = 0.8

    def validate(self) -> None:
        if self.domain not in ("synth", "real"):
            raise ValueError("domain must be 'synth' or 'real'")
        if self.n_primitives[0] < 0 or self.n_primitives[1] < self.n_primitives[0]:
            raise ValueError("bad primitive-count range")
        if abs(sum(self.kind_probs) - 1.0) > 1e-9:
            raise ValueError("kind probabilities must sum to 1")
        if self.background_range[1] > self.d_max:
            raise ValueError("background must stay within d_max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["res"] = list(self.res)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        kw = dict(d)
        for key in ("res", "n_primitives", "kind_probs", "size_range", "depth_range",
                    "background_range", "albedo_range", "bg_albedo_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def synth_domain_config(**overrides) -> DomainConfig:
    return replace(DomainConfig(domain="synth"), **overrides)


def real_domain_config(**overrides) -> DomainConfig:
    base = DomainConfig(domain="real", n_primitives=(2, 6),
                        kind_probs=(0.4, 0.25, 0.35), size_range=(0.2, 1.0),
                        depth_range=(1.0, 3.4), background_range=(3.2, 5.2),
                        specular_prob=0.3)
    return replace(base, **overrides)


@dataclass
class NoiseModel:
    """Parametric Kinect-style corruption; all stages optional via zeros."""

    a0: float = 0.0012          # axial floor, meters
    a1: float = 0.0019          # axial quadratic-in-depth coefficient
    a2: float = 0.0001          # axial grazing-angle coefficient
    lateral_std: float = 0.8    # pixels
    kappa: float = 2.85e-3      # quantization step = kappa * z^2, 1/meters
    theta0_deg: float = 75.0    # grazing dropout midpoint
    slope_deg: float = 4.0      # grazing dropout softness
    shadow_k: int = 2           # occlusion-shadow width, pixels
    shadow_jump: float = 0.1    # depth discontinuity threshold, meters
    dark_thresh: float = 0.1    # luminance below which dropout applies
    dark_p: float = 0.7
    spec_thresh: float = 0.8    # specularity above which dropout applies
    spec_p: float = 0.7

    def validate(self) -> None:
        numeric = [self.a0, self.a1, self.a2, self.lateral_std, self.kappa,
                   self.slope_deg, float(self.shadow_k), self.shadow_jump]
        if any(v < 0 for v in numeric):
            raise ValueError("noise coefficients must be nonnegative")
        for p in (self.dark_p, self.spec_p):
            if not 0 <= p <= 1:
                raise ValueError("drop probabilities must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseModel":
        # theta0 at +1e9 degrees makes the grazing sigmoid exactly 0
        return cls(a0=0, a1=0, a2=0, lateral_std=0, kappa=0, theta0_deg=1e9,
                   slope_deg=4, shadow_k=0, shadow_jump=0.1, dark_thresh=0,
                   dark_p=0, spec_thresh=2.0, spec_p=0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        return cls(**d)


@dataclass
class Sample:
    """Aligned rasters for one viewpoint; clean_depth is the supervision target."""

    depth: DepthMap
    normals: NormalMap
    rgb: RgbImage
    intrinsics: CameraIntrinsics
    clean_depth: DepthMap
    specular: np.ndarray | None = None  # in-memory only, not serialized


# ---------------------------------------------------------------------------
# scene sampling


def _frustum_half_extents(z, K: CameraIntrinsics, res, margin: float):
    h, w = res
    half_x = z * min(K.cx, w - 1 - K.cx) / K.fx * margin
    half_y = z * min(K.cy, h - 1 - K.cy) / K.fy * margin
    return half_x, half_y


def generate_scene(cfg: DomainConfig, seed) -> Scene:
    """Sample a random scene; deterministic in (cfg, seed)."""
    cfg.validate()
    rng = _rng(seed)
    K = default_intrinsics(*cfg.res)
    bg = rng.uniform(*cfg.background_range)
    bg_albedo = rng.uniform(*cfg.bg_albedo_range, size=3)
    count = int(rng.integers(cfg.n_primitives[0], cfg.n_primitives[1] + 1))
    kinds = ("plane", "box", "sphere")

    prims = []
    for _ in range(count):
        kind = kinds[rng.choice(3, p=np.asarray(cfg.kind_probs))]
        size = rng.uniform(*cfg.size_range)
        for _attempt in range(64):
            z = rng.uniform(cfg.depth_range[0], min(cfg.depth_range[1], bg - 0.15))
            hx, hy = _frustum_half_extents(z, K, cfg.res, cfg.frustum_margin)
            x = rng.uniform(-hx, hx)
            y = rng.uniform(-hy, hy)
            if abs(x) <= hx and abs(y) <= hy and RAY_T_NEAR < z < bg:
                break
        else:
            raise GenerationError("could not place primitive inside the frustum")
        rot = rotation_from_quat(rng.normal(size=4))
        albedo = rng.uniform(*cfg.albedo_range, size=3)
        if rng.uniform() < cfg.specular_prob:
            spec = rng.uniform(0.5, 1.0)
        else:
            spec = rng.uniform(0.0, 0.25)
        prims.append(Primitive(kind=kind, rotation=rot,
                               translation=np.array([x, y, z]), size=size,
                               albedo=albedo, specularity=spec))
    return Scene(primitives=prims, background_dist=bg, background_albedo=bg_albedo)


# ---------------------------------------------------------------------------
# analytic ray casting


def _ray_grid(K: CameraIntrinsics, res):
    h, w = res
    v, u = np.mgrid[0:h, 0:w]
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones((h, w))], axis=2)
    return d  # unnormalized; z component is 1, so ray parameter t equals depth z


def _intersect_plane(prim: Primitive, d: np.ndarray):
    n = prim.rotation[:, 2]
    c = prim.translation
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-9, (c @ n) / denom, np.inf)
    p = t[..., None] * d
    q = (p - c) @ prim.rotation  # local coordinates
    hit = ((t > RAY_T_NEAR) & np.isfinite(t)
           & (np.abs(q[..., 0]) <= prim.size) & (np.abs(q[..., 1]) <= prim.size))
    t = np.where(hit, t, np.inf)
    normal = np.broadcast_to(n, d.shape)
    return t, normal


def _intersect_sphere(prim: Primitive, d: np.ndarray):
    c = prim.translation
    r = prim.size
    a = np.sum(d * d, axis=2)
    b = -2.0 * (d @ c)
    disc = b * b - 4 * a * (c @ c - r * r)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - sq) / (2 * a)
    t_far = (-b + sq) / (2 * a)
    t = np.where(t_near > RAY_T_NEAR, t_near, t_far)
    hit = (disc > 0) & (t > RAY_T_NEAR)
    t = np.where(hit, t, np.inf)
    p = t[..., None] * d
    normal = np.where(hit[..., None], (p - c) / r, 0.0)
    return t, normal


def _intersect_box(prim: Primitive, d: np.ndarray):
    he = prim.size * BOX_ASPECT
    ro = -(prim.rotation.T @ prim.translation)
    rd = d @ prim.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rd
    t1 = (-he - ro) * inv
    t2 = (he - ro) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    tmin = np.max(t_lo, axis=2)
    tmax = np.min(t_hi, axis=2)
    hit = (tmax >= tmin) & (tmin > RAY_T_NEAR)
    t = np.where(hit, tmin, np.inf)
    axis = np.argmax(t_lo, axis=2)
    sign = -np.sign(np.take_along_axis(rd, axis[..., None], axis=2)[..., 0])
    n_local = np.zeros(d.shape)
    np.put_along_axis(n_local, axis[..., None], sign[..., None], axis=2)
    normal = n_local @ prim.rotation.T
    return t, normal


_INTERSECTORS = {"plane": _intersect_plane, "sphere": _intersect_sphere,
                 "box": _intersect_box}


def render(scene: Scene, K: CameraIntrinsics, res, d_max: float = 8.0) -> Sample:
    """Ray-cast a clean sample: depth, analytic normals, headlight shading."""
    h, w = res
    d = _ray_grid(K, res)
    d_unit = d / np.linalg.norm(d, axis=2, keepdims=True)

    # background: fronto-parallel plane
    depth = np.full((h, w), scene.background_dist)
    normals = np.zeros((h, w, 3))
    normals[:, :, 2] = -1.0
    albedo = np.broadcast_to(scene.background_albedo, (h, w, 3)).copy()
    specular = np.zeros((h, w))

    for prim in scene.primitives:
        t, n = _INTERSECTORS[prim.kind](prim, d)
        closer = t < depth
        # orient normals toward the camera
        flip = np.sum(n * d_unit, axis=2) > 0
        n = np.where(flip[..., None], -n, n)
        depth = np.where(closer, t, depth)
        normals = np.where(closer[..., None], n, normals)
        albedo = np.where(closer[..., None], prim.albedo, albedo)
        specular = np.where(closer, prim.specularity, specular)

    cos = np.clip(-np.sum(normals * d_unit, axis=2), 0.0, 1.0)
    rgb = np.clip(albedo * (AMBIENT + (1 - AMBIENT) * cos)[..., None], 0.0, 1.0)

    dm = DepthMap(values=depth, d_max=d_max)
    return Sample(depth=dm, normals=NormalMap(values=normals.astype(np.float32)),
                  rgb=RgbImage(values=rgb), intrinsics=K,
                  clean_depth=DepthMap(values=depth.copy(), d_max=d_max),
                  specular=specular)


# ---------------------------------------------------------------------------
# sensor noise


def _view_angle(normals: np.ndarray, K: CameraIntrinsics, res) -> np.ndarray:
    """Angle in radians between surface normal and view ray; 0 where unknown."""
    d = _ray_grid(K, res)
    d_unit = d / np.linalg.norm(d, axis=2, keepdims=True)
    cos = np.abs(np.sum(normals * d_unit, axis=2))
    known = np.any(normals != 0, axis=2)
    theta = np.arccos(np.clip(cos, 0.0, 1.0))
    return np.where(known, theta, 0.0)


def _shadow_mask(z: np.ndarray, jump: float, k: int) -> np.ndarray:
    """Occlusion shadows: k-px strip on the far side of horizontal depth edges.

    Edges are jumps between two valid measurements; holes do not cast shadows.
    The strip extends leftward (fixed emitter parallax direction).
    """
    h, w = z.shape
    mask = np.zeros((h, w), dtype=bool)
    far_left = ((z[:, :-1] - z[:, 1:]) > jump) & (z[:, 1:] > 0)
    for i in range(k):
        mask[:, :w - 1 - i] |= far_left[:, i:]
    return mask


def apply_sensor_noise(sample: Sample, nm: NoiseModel, seed) -> Sample:
    """Corrupt a clean sample; deterministic in (sample, nm, seed).

    Stage order is fixed: lateral jitter, axial noise, quantization, grazing
    dropout, occlusion shadows, material dropout. Ground-truth rasters
    (clean_depth, normals, rgb) pass through untouched.
    """
    nm.validate()
    rng = _rng(seed)
    K = sample.intrinsics
    clean = sample.clean_depth.values
    res = clean.shape
    h, w = res
    d_max = sample.clean_depth.d_max

    z = sample.depth.values.copy()
    surf_normals = sample.normals.values.astype(np.float64)
    lum = (0.299 * sample.rgb.values[:, :, 0] + 0.587 * sample.rgb.values[:, :, 1]
           + 0.114 * sample.rgb.values[:, :, 2])
    spec = sample.specular

    # 1) lateral jitter: resample the surface at a perturbed pixel position
    if nm.lateral_std > 0:
        du = rng.normal(0.0, nm.lateral_std, size=res)
        dv = rng.normal(0.0, nm.lateral_std, size=res)
        v, u = np.mgrid[0:h, 0:w]
        su = np.clip(np.rint(u + du), 0, w - 1).astype(np.intp)
        sv = np.clip(np.rint(v + dv), 0, h - 1).astype(np.intp)
        z = z[sv, su]
        surf_normals = surf_normals[sv, su]
        lum = lum[sv, su]
        if spec is not None:
            spec = spec[sv, su]

    theta = _view_angle(surf_normals, K, res)

    # 2) axial noise with depth- and angle-dependent std
    if nm.a0 > 0 or nm.a1 > 0 or nm.a2 > 0:
        th = np.minimum(theta, np.pi / 2 - 1e-3)
        sigma = nm.a0 + nm.a1 * (z - 0.4) ** 2 + nm.a2 * th ** 2 / (np.pi / 2 - th) ** 2
        z = np.where(z > 0, z + rng.normal(size=res) * sigma, z)

    # 3) quantization to a depth-dependent step
    if nm.kappa > 0:
        step = nm.kappa * z ** 2
        quantizable = z > 1e-6
        z = np.where(quantizable, np.rint(z / np.where(quantizable, step, 1.0))
                     * step, z)

    # 4) grazing-angle dropout; slope 0 degenerates to a hard threshold
    slope = max(nm.slope_deg, 1e-9)
    with np.errstate(over="ignore"):
        p_drop = 1.0 / (1.0 + np.exp(-(np.degrees(theta) - nm.theta0_deg) / slope))
    z = np.where(rng.uniform(size=res) < p_drop, 0.0, z)

    # 5) occlusion shadows at depth discontinuities
    if nm.shadow_k > 0:
        z = np.where(_shadow_mask(z, nm.shadow_jump, nm.shadow_k), 0.0, z)

    # 6) material dropout: dark or highly specular surfaces
    if nm.dark_p > 0:
        drop = (lum < nm.dark_thresh) & (rng.uniform(size=res) < nm.dark_p)
        z = np.where(drop, 0.0, z)
    if nm.spec_p > 0 and spec is not None:
        drop = (spec > nm.spec_thresh) & (rng.uniform(size=res) < nm.spec_p)
        z = np.where(drop, 0.0, z)

    # noise never invents geometry, and values stay within range
    z = np.where(clean == 0, 0.0, np.clip(z, 0.0, d_max))

    return Sample(depth=DepthMap(values=z, d_max=d_max), normals=sample.normals,
                  rgb=sample.rgb, intrinsics=K, clean_depth=sample.clean_depth,
                  specular=sample.specular)


# ---------------------------------------------------------------------------
# dataset construction


SPLIT_NAMES = ("train", "task", "val")


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode("ascii"))


def sample_seeds(master_seed: int, split: str, index: int) -> tuple[int, int]:
    """Disjoint, deterministic (scene, noise) seeds per (seed, split, index)."""
    ss = np.random.SeedSequence([int(master_seed), _split_code(split), int(index)])
    state = ss.generate_state(4)
    return (int(state[0]) << 32 | int(state[1]),
            int(state[2]) << 32 | int(state[3]))


def generate_sample(cfg: DomainConfig, nm: NoiseModel, master_seed: int,
                    split: str, index: int) -> Sample:
    """Render (and for the real domain, corrupt) one sample."""
    scene_seed, noise_seed = sample_seeds(master_seed, split, index)
    scene = generate_scene(cfg, scene_seed)
    K = default_intrinsics(*cfg.res)
    sample = render(scene, K, cfg.res, d_max=cfg.d_max)
    if cfg.domain == "real":
        sample = apply_sensor_noise(sample, nm, noise_seed)
    return sample


def write_sample(out_dir: Path, stem: str, sample: Sample, domain: str,
                 seed: int) -> dict:
    paths = {
        "depth": f"{stem}_depth.pgm",
        "rgb": f"{stem}_rgb.ppm",
        "normals": f"{stem}_normals.nrm",
        "clean_depth": f"{stem}_clean.pgm",
    }
    write_depth(out_dir / paths["depth"], sample.depth, sample.intrinsics,
                domain=domain, seed=seed)
    write_depth(out_dir / paths["clean_depth"], sample.clean_depth,
                sample.intrinsics, domain=domain, seed=seed)
    write_rgb(out_dir / paths["rgb"], sample.rgb)
    write_normals(out_dir / paths["normals"], sample.normals)
    entry = dict(paths)
    entry["intrinsics"] = dict(sample.intrinsics.to_dict(),
                               d_max_m=sample.depth.d_max)
    return entry


def build_dataset(cfg: DomainConfig, nm: NoiseModel, count: int, seed: int,
                  out_dir, split: str = "train") -> Path:
    """Write `count` samples plus a manifest; returns the manifest path."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        sample = generate_sample(cfg, nm, seed, split, i)
        entries.append(write_sample(out_dir, f"s{i:06d}", sample, cfg.domain, seed))
    manifest = {
        "domain": cfg.domain,
        "count": count,
        "seed": seed,
        "split": split,
        "res": list(cfg.res),
        "noise_model": nm.to_dict() if cfg.domain == "real" else None,
        "entries": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    manifest["_dir"] = str(Path(path).parent)
    return manifest


def load_sample(manifest: dict, index: int) -> Sample:
    base = Path(manifest["_dir"])
    entry = manifest["entries"][index]
    depth, K = read_depth(base / entry["depth"])
    clean, _ = read_depth(base / entry["clean_depth"])
    normals = read_normals(base / entry["normals"])
    rgb = read_rgb(base / entry["rgb"])
    return Sample(depth=depth, normals=normals, rgb=rgb, intrinsics=K,
                  clean_depth=clean, specular=None)


def noisify_manifest(manifest_path, nm: NoiseModel, seed: int, out_dir) -> Path:
    """Simulation baseline: corrupt the clean depth of an existing dataset.

    Specular dropout is skipped (the per-pixel specularity raster is not part
    of the on-disk format); all other stages apply.
    """
    manifest = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(manifest["count"]):
        src = load_sample(manifest, i)
        clean_sample = Sample(depth=src.clean_depth, normals=src.normals,
                              rgb=src.rgb, intrinsics=src.intrinsics,
                              clean_depth=src.clean_depth, specular=None)
        _, noise_seed = sample_seeds(seed, manifest.get("split", "train"), i)
        noisy = apply_sensor_noise(clean_sample, nm, noise_seed)
        entries.append(write_sample(out_dir, f"s{i:06d}", noisy,
                                    manifest["domain"], seed))
    out = dict(manifest)
    out.pop("_dir")
    out.update(noise_model=nm.to_dict(), entries=entries, seed=seed,
               method="simulation")
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True))
    return path
