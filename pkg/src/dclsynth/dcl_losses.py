"""Training objectives for unpaired depth synthesis.

The contrastive term operates on *differences* of projected features taken at
pairs of spatial locations: a synthesized-path differential must match the
synthetic-path differential at the same location pair (positive) and repel
differentials at mismatched pairs (negatives), which constrains the underlying
geometry while leaving absolute values free to absorb learned noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .nn_core import ModelSet, forward_synthesis

EPS_NORM = 1e-8
DEFAULT_TAU = 0.07
DEFAULT_ANCHORS = 64
DEFAULT_PARTNERS = 16
DEFAULT_LOCAL_RADIUS = 8


class SamplingError(ValueError):
    """Raised when a feature map is too small for the requested sample budget."""


@dataclass
class LossBreakdown:
    adv_d: float
    adv_g: float
    dc: float
    idt: float
    total: float

    def to_dict(self) -> dict:
        return {"adv_d": self.adv_d, "adv_g": self.adv_g, "dc": self.dc,
                "idt": self.idt, "total": self.total}


@dataclass(frozen=True)
class LocationPairSample:
    """Anchor i, positive partner j and negative partners k on one layer.

    Locations are flat row-major indices into the layer's spatial extent.
    """

    layer: int
    anchor: int
    positive: int
    negatives: tuple

    def __post_init__(self):
        if self.positive == self.anchor:
            raise ValueError("positive must differ from the anchor")
        if any(k == self.anchor or k == self.positive for k in self.negatives):
            raise ValueError("negatives must differ from anchor and positive")


def _guarded_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + EPS_NORM)


def project(features: torch.Tensor, head) -> torch.Tensor:
    """Per-location projection of a (B, C, H, W) map to unit vectors (B, N, D)."""
    b, c, h, w = features.shape
    flat = features.permute(0, 2, 3, 1).reshape(b, h * w, c)
    return _guarded_normalize(head(flat))


def sample_pairs(extent, anchors: int, partners: int, local_radius: int,
                 rng: np.random.Generator, layer: int = 0) -> list:
    """Draw anchor/partner location tuples on a spatial extent.

    Anchors are uniform without replacement. Each anchor gets `partners`
    distinct partner locations: half uniform within the Chebyshev window of
    radius `local_radius` (rejection from the offset box, so clipping at the
    border stays uniform), half uniform over the whole extent. The partner
    order is shuffled and the first one is designated the positive.
    """
    h, w = extent
    n = h * w
    if n < partners + 1:
        raise SamplingError(f"extent {extent} too small for {partners} partners")
    if anchors > n:
        raise SamplingError(f"extent {extent} too small for {anchors} anchors")
    anchor_ids = rng.choice(n, size=anchors, replace=False)
    rc = np.stack(np.divmod(anchor_ids, w), axis=1)  # (A, 2)

    n_local = partners // 2
    chosen = [[] for _ in range(anchors)]
    pending = list(range(anchors))
    rounds = 0
    # first-appearance of an iid uniform stream == draws without replacement
    while pending and rounds < 1000:
        rounds += 1
        offs = rng.integers(-local_radius, local_radius + 1,
                            size=(len(pending), 4 * max(n_local, 1), 2))
        for row, a in enumerate(pending):
            cand_rc = rc[a] + offs[row]
            ok = ((cand_rc[:, 0] >= 0) & (cand_rc[:, 0] < h)
                  & (cand_rc[:, 1] >= 0) & (cand_rc[:, 1] < w))
            flat = cand_rc[ok, 0] * w + cand_rc[ok, 1]
            got = chosen[a]
            for f in flat:
                if f != anchor_ids[a] and f not in got:
                    got.append(int(f))
                    if len(got) >= n_local:
                        break
        pending = [a for a in pending if len(chosen[a]) < n_local]

    pending = list(range(anchors))
    while pending and rounds < 2000:
        rounds += 1
        cands = rng.integers(0, n, size=(len(pending), 4 * partners))
        for row, a in enumerate(pending):
            got = chosen[a]
            for f in cands[row]:
                if f != anchor_ids[a] and f not in got:
                    got.append(int(f))
                    if len(got) >= partners:
                        break
        pending = [a for a in pending if len(chosen[a]) < partners]
    if pending:
        raise SamplingError("could not draw distinct partner locations")

    orders = rng.permuted(np.tile(np.arange(partners), (anchors, 1)), axis=1)
    samples = []
    for i, a in enumerate(anchor_ids):
        shuffled = [chosen[i][o] for o in orders[i]]
        samples.append(LocationPairSample(layer=layer, anchor=int(a),
                                          positive=shuffled[0],
                                          negatives=tuple(shuffled[1:])))
    return samples


def draw_pair_samples(tap_shapes, batch: int, rng: np.random.Generator,
                      anchors: int = DEFAULT_ANCHORS,
                      partners: int = DEFAULT_PARTNERS,
                      local_radius: int = DEFAULT_LOCAL_RADIUS) -> list:
    """Per-layer, per-batch-item location samples for one training step."""
    nested = []
    for layer, (h, w) in enumerate(tap_shapes):
        nested.append([sample_pairs((h, w), anchors, partners, local_radius,
                                    rng, layer=layer) for _ in range(batch)])
    return nested


def differential(pf: torch.Tensor, i: int, j: int) -> torch.Tensor:
    """Normalized feature difference f_i - f_j of one projected map (N, D)."""
    return _guarded_normalize(pf[i] - pf[j], dim=-1)


def infonce(q: torch.Tensor, pos: torch.Tensor, negs, tau: float) -> torch.Tensor:
    """Temperature-scaled contrastive loss of one query against its samples."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    scores = [(q * pos).sum().reshape(1)]
    for neg in negs:
        scores.append((q * neg).sum().reshape(1))
    logits = torch.cat(scores) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def _pack_indices(samples_nested, device):
    """Nested per-batch LocationPairSample lists -> index tensors."""
    anchors = torch.tensor([[s.anchor for s in row] for row in samples_nested],
                           dtype=torch.long, device=device)
    pos = torch.tensor([[s.positive for s in row] for row in samples_nested],
                       dtype=torch.long, device=device)
    negs = torch.tensor([[list(s.negatives) for s in row] for row in samples_nested],
                        dtype=torch.long, device=device)
    return anchors, pos, negs


def _gather_locations(pf: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """pf (B, N, D), idx (B, ...) -> (B, ..., D)."""
    b, _, d = pf.shape
    flat = idx.reshape(b, -1)
    out = torch.gather(pf, 1, flat.unsqueeze(-1).expand(b, flat.shape[1], d))
    return out.reshape(*idx.shape, d)


def _nce_from_vectors(q, pos, negs, tau):
    """Batched contrastive scores; q/pos (B, A, D), negs (B, A, K, D)."""
    s_pos = (q * pos).sum(-1, keepdim=True)
    s_neg = (q.unsqueeze(2) * negs).sum(-1)
    logits = torch.cat([s_pos, s_neg], dim=-1) / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def loss_dc_projected(pfs_s, pfs_hat, samples, tau: float) -> torch.Tensor:
    """Differential contrastive loss from already-projected per-layer features.

    pfs_s / pfs_hat: per-layer (B, N_l, D) unit-vector maps for the synthetic
    and synthesized paths; samples: per-layer list of per-batch-item
    LocationPairSample lists.
    """
    total = None
    count = 0
    for pf_s, pf_h, layer_samples in zip(pfs_s, pfs_hat, samples):
        a_idx, p_idx, n_idx = _pack_indices(layer_samples, pf_s.device)
        q = _guarded_normalize(_gather_locations(pf_h, a_idx)
                               - _gather_locations(pf_h, p_idx))
        pos = _guarded_normalize(_gather_locations(pf_s, a_idx)
                                 - _gather_locations(pf_s, p_idx))
        negs = _guarded_normalize(_gather_locations(pf_s, a_idx).unsqueeze(2)
                                  - _gather_locations(pf_s, n_idx))
        nce = _nce_from_vectors(q, pos, negs, tau)
        total = nce.sum() if total is None else total + nce.sum()
        count += nce.numel()
    if count == 0:
        raise SamplingError("no location samples supplied")
    return total / count


def loss_dc(taps_s, taps_hat, heads, samples, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Differential contrastive loss over tapped feature maps of both paths.

    Only the sampled locations are projected (the heads act per location, so
    gathering first is exact); the synthesized path needs just anchors and
    positives since negatives are synthetic-path differentials.
    """
    total = None
    count = 0
    for f_s, f_hat, head, layer_samples in zip(taps_s, taps_hat, heads, samples):
        b, c, h, w = f_s.shape
        a_idx, p_idx, n_idx = _pack_indices(layer_samples, f_s.device)
        flat_s = f_s.permute(0, 2, 3, 1).reshape(b, h * w, c)
        flat_h = f_hat.permute(0, 2, 3, 1).reshape(b, h * w, c)
        pa = _guarded_normalize(head(_gather_locations(flat_s, a_idx)))
        pp = _guarded_normalize(head(_gather_locations(flat_s, p_idx)))
        pn = _guarded_normalize(head(_gather_locations(flat_s, n_idx)))
        qa = _guarded_normalize(head(_gather_locations(flat_h, a_idx)))
        qp = _guarded_normalize(head(_gather_locations(flat_h, p_idx)))
        q = _guarded_normalize(qa - qp)
        pos = _guarded_normalize(pa - pp)
        negs = _guarded_normalize(pa.unsqueeze(2) - pn)
        nce = _nce_from_vectors(q, pos, negs, tau)
        total = nce.sum() if total is None else total + nce.sum()
        count += nce.numel()
    if count == 0:
        raise SamplingError("no location samples supplied")
    return total / count


def loss_adv_d(disc, real: torch.Tensor, fake: torch.Tensor,
               mode: str = "logistic") -> torch.Tensor:
    """Discriminator loss; the synthesized raster is detached."""
    logits_real = disc(real)
    logits_fake = disc(fake.detach())
    if mode == "logistic":
        return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
    if mode == "lsgan":
        return ((logits_real - 1.0) ** 2).mean() + (logits_fake ** 2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def loss_adv_g(disc, fake: torch.Tensor, mode: str = "logistic") -> torch.Tensor:
    """Non-saturating generator loss."""
    logits_fake = disc(fake)
    if mode == "logistic":
        return F.softplus(-logits_fake).mean()
    if mode == "lsgan":
        return ((logits_fake - 1.0) ** 2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def loss_adv(disc, real: torch.Tensor, fake: torch.Tensor,
             mode: str = "logistic"):
    """Discriminator and (non-saturating) generator adversarial losses."""
    return loss_adv_d(disc, real, fake, mode), loss_adv_g(disc, fake, mode)


def loss_idt(m: ModelSet, d_real: torch.Tensor,
             rgb_real: torch.Tensor | None = None) -> torch.Tensor:
    """L1 between a real raster and its own transformation."""
    out, _ = forward_synthesis(m, d_real, rgb_real)
    return (out - d_real).abs().mean()


def loss_total(adv_g, dc, idt, alpha: float, beta: float):
    """Weighted generator objective."""
    return adv_g + alpha * dc + beta * idt
