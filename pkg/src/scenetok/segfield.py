"""Three-scale contrastive segment field with per-scale label heads.

One shared grid feeds three decoders (small / medium / large). Each decoder
produces a hidden code; a linear layer maps it to the segment embedding and a
label head maps the same hidden code to a label embedding. Rays of one image
are paired per scale: same-mask pairs are pulled together by their distance,
different-mask pairs are pushed apart up to the margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import pixel_grid, pixel_rays
from .fields import GridField, NumericalError, make_optimizer, parameter_norms

logger = logging.getLogger(__name__)

N_SCALES = 3


@dataclass
class SegConfig:
    steps: int = 1500
    images_per_batch: int = 8
    rays_per_image: int = 48
    margin: float = 1.0
    d_seg: int = 16
    hidden: int = 64
    resolutions: tuple = (16, 32, 64, 128)
    features_per_level: int = 4
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    w_label: float = 1.0
    divergence: float = 1e6
    seed: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    @classmethod
    def desk(cls, **overrides) -> "SegConfig":
        """CPU preset: coarser grid, longer schedule (about 70 s on a 5-object scene)."""
        return cls(**{**dict(steps=3000, resolutions=(16, 32, 64)), **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class SegFieldSet(nn.Module):
    def __init__(self, cfg: SegConfig, bounds, d_lab: int):
        super().__init__()
        self.cfg = cfg
        self.d_lab = d_lab
        gen = torch.Generator().manual_seed(cfg.seed + 11)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 11)
            self.grid = GridField(bounds, cfg.resolutions, cfg.features_per_level, generator=gen)
            g = self.grid.out_dim
            self.trunks = nn.ModuleList([nn.Sequential(nn.Linear(g, cfg.hidden), nn.ReLU()) for _ in range(N_SCALES)])
            self.embed = nn.ModuleList([nn.Linear(cfg.hidden, cfg.d_seg) for _ in range(N_SCALES)])
            self.label_heads = nn.ModuleList([
                nn.Sequential(nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, d_lab))
                for _ in range(N_SCALES)
            ])

    def forward(self, x: torch.Tensor):
        """Segment embeddings (3, ..., D_seg) and label embeddings (3, ..., D_lab)."""
        feats = self.grid(x)
        hidden = [trunk(feats) for trunk in self.trunks]
        e = torch.stack([head(h) for head, h in zip(self.embed, hidden)])
        lab = torch.stack([head(h) for head, h in zip(self.label_heads, hidden)])
        return e, lab


def stable_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm accumulated in log space: exp(0.5 * logsumexp(2 log|x|))."""
    logabs = torch.log(x.abs().clamp_min(1e-30))
    return torch.exp(0.5 * torch.logsumexp(2.0 * logabs, dim=dim))


def contrastive_pair_loss(e_a, e_b, same, margin: float):
    """Pull: |e_a - e_b|. Push: relu(margin - |e_a - e_b|). Works on tensors or arrays."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    if not torch.is_tensor(e_a):
        dist = float(np.linalg.norm(np.asarray(e_a, dtype=np.float64) - np.asarray(e_b, dtype=np.float64)))
        return dist if same else max(0.0, margin - dist)
    dist = stable_norm(e_a - e_b)
    same = torch.as_tensor(same, dtype=torch.bool)
    return torch.where(same, dist, F.relu(margin - dist))


@dataclass
class MaskPairBatch:
    view: np.ndarray  # (n,) source image of every ray
    pixel: np.ndarray  # (n,) flat pixel index
    mask_ids: np.ndarray  # (n, 3) mask assigned per scale, -1 where none
    pairs: list  # per scale: (P, 2) ray index pairs, same image
    same: list  # per scale: (P,) bool

    def pair_counts(self, scale: int) -> dict:
        counts = {}
        for i, _ in self.pairs[scale]:
            counts[int(self.view[i])] = counts.get(int(self.view[i]), 0) + 1
        return counts


def sample_training_pairs(ids: np.ndarray, n_rays: int, seed, rays_per_image: int = 48) -> MaskPairBatch:
    """Seeded ray sampling across images and all within-image pairs per scale.

    ``ids`` is (V, 3, H, W) with -1 where no mask covers a pixel at that scale.
    Images are drawn with replacement-free order per batch; each contributes
    ``rays_per_image`` distinct pixels.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v, _, h, w = ids.shape
    n_images = max(1, int(np.ceil(n_rays / rays_per_image)))
    per = min(rays_per_image, h * w)
    views = rng.choice(v, size=n_images, replace=n_images > v)
    view_list, pix_list = [], []
    for img in views:
        view_list.append(np.full(per, img))
        pix_list.append(rng.choice(h * w, size=per, replace=False))
    view = np.concatenate(view_list)
    pixel = np.concatenate(pix_list)
    flat = ids.reshape(v, 3, h * w)
    mask_ids = flat[view, :, pixel]
    iu, ju = np.triu_indices(per, 1)
    pairs, same = [], []
    for s in range(N_SCALES):
        ps, ss = [], []
        for b in range(n_images):
            off = b * per
            m = mask_ids[off:off + per, s]
            ok = (m[iu] >= 0) & (m[ju] >= 0)
            ps.append(np.stack([iu[ok] + off, ju[ok] + off], axis=1))
            ss.append(m[iu[ok]] == m[ju[ok]])
        pairs.append(np.concatenate(ps) if ps else np.zeros((0, 2), dtype=np.int64))
        same.append(np.concatenate(ss) if ss else np.zeros(0, dtype=bool))
    return MaskPairBatch(view, pixel, mask_ids, pairs, same)


def seg_losses(sf: SegFieldSet, positions, weights, batch: MaskPairBatch, label_targets: torch.Tensor,
               label_valid: torch.Tensor, cfg: SegConfig) -> dict:
    e, lab = sf(positions)
    w = weights[None, ..., None]
    e_r = (w * e).sum(2)  # (3, n, D)
    lab_r = (w * lab).sum(2)
    losses = {}
    total = 0.0
    for s in range(N_SCALES):
        pairs = torch.as_tensor(np.ascontiguousarray(batch.pairs[s]))
        if len(pairs):
            pl = contrastive_pair_loss(e_r[s, pairs[:, 0]], e_r[s, pairs[:, 1]], batch.same[s], cfg.margin)
            losses[f"pair{s}"] = pl.mean()
            total = total + losses[f"pair{s}"]
        valid = label_valid[s]
        if valid.any():
            losses[f"label{s}"] = F.mse_loss(lab_r[s, valid], label_targets[s, valid])
            total = total + cfg.w_label * losses[f"label{s}"]
    losses["total"] = total
    return losses


def fit_seg_field(fs, teacher, cfg: SegConfig, views=None, log_every: int = 0):
    """Train a SegFieldSet against the teacher masks; geometry of ``fs`` stays frozen.

    Returns (fs with ``fs.seg`` attached, loss curve).
    """
    views = list(range(teacher.n_views)) if views is None else list(views)
    sub = teacher.subset(views)
    d_lab = sub.label_embeddings["large"].shape[1]
    sf = SegFieldSet(cfg, fs.bounds, d_lab)
    h, w = sub.poses[0].resolution
    o_all, d_all = [], []
    for pose in sub.poses:
        o, d = pixel_rays(pose, pixel_grid(h, w))
        o_all.append(o)
        d_all.append(d)
    pos, wts, _, _ = fs.surface_samples(np.concatenate(o_all), np.concatenate(d_all))
    pos = torch.as_tensor(pos).view(len(views), h * w, -1, 3)
    wts = torch.as_tensor(wts).view(len(views), h * w, -1)
    lookups = [sub.label_lookup(s) for s in ("small", "medium", "large")]
    table = []
    for s in range(N_SCALES):
        ids = np.array(sorted(lookups[s]))
        table.append((ids, np.stack([lookups[s][i] for i in ids]) if len(ids) else np.zeros((0, d_lab))))
    opt = make_optimizer(list(sf.grid.parameters()),
                         [p for n, p in sf.named_parameters() if not n.startswith("grid.")], cfg)
    rng = np.random.default_rng(cfg.seed + 3)
    curve = []
    n_rays = cfg.images_per_batch * cfg.rays_per_image
    for step in range(cfg.steps):
        batch = sample_training_pairs(sub.ids, n_rays, rng, cfg.rays_per_image)
        vi = torch.as_tensor(batch.view)
        pi = torch.as_tensor(batch.pixel)
        targets = torch.zeros(N_SCALES, len(vi), d_lab)
        valid = torch.zeros(N_SCALES, len(vi), dtype=torch.bool)
        for s in range(N_SCALES):
            ids, emb = table[s]
            m = batch.mask_ids[:, s]
            ok = np.isin(m, ids) & (m >= 0)
            if ok.any():
                targets[s, ok] = torch.as_tensor(emb[np.searchsorted(ids, m[ok])], dtype=torch.float32)
            valid[s] = torch.as_tensor(ok)
        losses = seg_losses(sf, pos[vi, pi], wts[vi, pi], batch, targets, valid, cfg)
        total = losses["total"]
        if not torch.is_tensor(total):
            continue
        if not torch.isfinite(total) or float(total.detach()) > cfg.divergence:
            raise NumericalError(f"segmentation training failed at step {step}", parameter_norms(sf))
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        curve.append({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()})
        if log_every and step % log_every == 0:
            logger.info("seg step %d loss %.4f", step, float(total))
    fs.seg = sf
    return fs, curve
