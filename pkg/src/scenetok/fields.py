"""Grid radiance field with a view-invariant / view-dependent token branch.

Layout of a FieldSet::

    geometry grid -> density decoder (softplus)     -> sigma
                  -> color decoder (+ dir encoding) -> rgb
    token grid    -> VI decoder                     -> f_vi
                  -> VD decoder (+ dir encoding)    -> delta_vd
    f_vd = f_vi + delta_vd
    shared token decoder: s * f / |f|               -> t (D_tok)

Geometry is fit first (rgb loss against random backgrounds), then the token
branch is fit on the 27 x 27 grid rays of the supervision views with the
geometry frozen. ``joint=True`` trains both in one loop.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import cell_centers, pixel_grid, pixel_rays, ray_box
from .render import composite_weights_torch, stratified_t_torch
from .tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite or diverging loss; carries parameter norm diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    steps: int = 2000
    geometry_steps: int = 1500
    rays_per_batch: int = 512
    samples_per_ray: int = 64
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    vd_decay: float = 1.0  # decoupled weight decay on the direction head
    w_rgb: float = 1.0
    w_vi: float = 1.0
    w_vd: float = 1.0
    latent_dim: int = 16
    resolutions: tuple = (16, 32, 64, 128)
    token_resolutions: tuple | None = None  # token grid levels; None = same as ``resolutions``
    features_per_level: int = 4
    hidden: int = 64
    density_scale: float = 20.0
    surface_samples: int = 8
    joint: bool = False
    divergence: float = 1e6
    seed: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if self.token_resolutions is not None:
            self.token_resolutions = tuple(int(r) for r in self.token_resolutions)
        counts = (self.rays_per_batch, self.samples_per_ray, self.latent_dim, self.features_per_level,
                  self.hidden, self.surface_samples)
        if any(c < 1 for c in counts) or self.steps < 0 or self.geometry_steps < 0 or not self.resolutions:
            raise ValueError("train config counts must be positive")
        if min(self.w_rgb, self.w_vi, self.w_vd) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Preset tuned for CPU runs of about 90 s on two-object scenes with 48 views."""
        base = dict(geometry_steps=2000, rays_per_batch=256, samples_per_ray=96, resolutions=(16, 32, 64),
                    token_resolutions=(16, 32))
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def sh_encoding(d: torch.Tensor) -> torch.Tensor:
    """Raw unit direction followed by the 9 real spherical harmonics up to degree 2."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    sh = [
        torch.full_like(x, 0.28209479177387814),
        0.4886025119029199 * y, 0.4886025119029199 * z, 0.4886025119029199 * x,
        1.0925484305920792 * x * y, 1.0925484305920792 * y * z,
        0.31539156525252005 * (3 * z * z - 1),
        1.0925484305920792 * x * z, 0.5462742152960396 * (x * x - y * y),
    ]
    return torch.cat([d, torch.stack(sh, dim=-1)], dim=-1)


DIR_DIM = 12


class GridField(nn.Module):
    """Dense multi-level 3D feature grids, trilinear per level, concatenated."""

    def __init__(self, bounds, resolutions, features: int, init_scale: float = 1e-4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.register_buffer("lo", torch.as_tensor(np.asarray(bounds)[0], dtype=torch.float32))
        self.register_buffer("hi", torch.as_tensor(np.asarray(bounds)[1], dtype=torch.float32))
        self.resolutions = tuple(resolutions)
        self.features = features
        self.levels = nn.ParameterList([
            nn.Parameter((torch.rand(1, features, r, r, r, generator=generator) * 2 - 1) * init_scale)
            for r in self.resolutions
        ])

    @property
    def out_dim(self) -> int:
        return self.features * len(self.resolutions)

    def normalize(self, x: torch.Tensor):
        u = 2 * (x - self.lo.to(x.dtype)) / (self.hi - self.lo).to(x.dtype) - 1
        outside = (u.abs() > 1).any(dim=-1)
        return u.clamp(-1, 1), outside

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape[:-1]
        u, _ = self.normalize(x.reshape(-1, 3))
        g = u.view(1, -1, 1, 1, 3)
        feats = [F.grid_sample(lv, g.to(lv.dtype), mode="bilinear", align_corners=True).view(self.features, -1).T
                 for lv in self.levels]
        return torch.cat(feats, dim=-1).view(*shape, -1)


def mlp(inp: int, hidden: int, out: int, zero_last: bool = False) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(inp, hidden), nn.ReLU(), nn.Linear(hidden, out))
    if zero_last:
        nn.init.zeros_(net[2].weight)
        nn.init.zeros_(net[2].bias)
    return net


class FieldSet(nn.Module):
    def __init__(self, cfg: TrainConfig, bounds, d_tok: int):
        super().__init__()
        self.cfg = cfg
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.d_tok = d_tok
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.geo = GridField(self.bounds, cfg.resolutions, cfg.features_per_level, generator=gen)
            g = self.geo.out_dim
            self.density_head = mlp(g, 32, 1)
            self.color_head = mlp(g + DIR_DIM, 32, 3)
            self.tok = GridField(self.bounds, cfg.token_resolutions or cfg.resolutions, cfg.features_per_level,
                                 generator=gen)
            gt = self.tok.out_dim
            self.vi_head = mlp(gt, cfg.hidden, cfg.latent_dim)
            self.vd_head = mlp(gt + DIR_DIM, cfg.hidden, cfg.latent_dim, zero_last=True)
            self.log_scale = nn.Parameter(torch.zeros(()))
            self.token_decoder = mlp(cfg.latent_dim, cfg.hidden, d_tok)
        self.seg = None  # optional SegFieldSet attached after segmentation training

    # parameter groups -------------------------------------------------
    def geometry_parameters(self):
        return list(self.geo.parameters()) + list(self.density_head.parameters()) + list(self.color_head.parameters())

    def token_parameters(self):
        return (list(self.tok.parameters()) + list(self.vi_head.parameters()) + list(self.vd_head.parameters())
                + [self.log_scale] + list(self.token_decoder.parameters()))

    # queries ------------------------------------------------------------
    def density_and_features(self, x: torch.Tensor):
        feats = self.geo(x)
        raw = self.density_head(feats).squeeze(-1)
        return self.cfg.density_scale * F.softplus(raw - 1.0), feats

    def density(self, x: torch.Tensor) -> torch.Tensor:
        return self.density_and_features(x)[0]

    def color(self, feats: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        denc = sh_encoding(d).expand(*feats.shape[:-1], DIR_DIM)
        return torch.sigmoid(self.color_head(torch.cat([feats, denc], dim=-1)))

    def latents(self, x: torch.Tensor, d: torch.Tensor):
        """(f_vi, delta_vd) at points x seen along d."""
        feats = self.tok(x)
        f_vi = self.vi_head(feats)
        denc = sh_encoding(d).expand(*feats.shape[:-1], DIR_DIM)
        delta = self.vd_head(torch.cat([feats, denc], dim=-1))
        return f_vi, delta

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        f = f / f.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        return self.token_decoder(self.log_scale.exp() * f)

    def tokens(self, x: torch.Tensor, d: torch.Tensor):
        f_vi, delta = self.latents(x, d)
        return self.decode(f_vi), self.decode(f_vi + delta)

    # rendering ------------------------------------------------------------
    @torch.no_grad()
    def surface_samples(self, origins, dirs, n_samples: int | None = None, k: int | None = None,
                        chunk: int = 4096):
        """Top-k weight samples per ray from the frozen geometry.

        Returns positions (N, k, 3), weights (N, k), opacity (N,), depth (N,)
        with depth = sum(w t) / sum(w) (inf where nothing is hit). The k
        weights are rescaled to sum to the ray opacity.
        """
        n_samples = n_samples or self.cfg.samples_per_ray
        k = min(k or self.cfg.surface_samples, n_samples)
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        near, far = ray_box(origins, dirs, *self.bounds)
        n = len(origins)
        pos = np.zeros((n, k, 3), dtype=np.float32)
        wk = np.zeros((n, k), dtype=np.float32)
        opacity = np.zeros(n)
        depth = np.full(n, np.inf)
        valid = np.nonzero(far > near + 1e-9)[0]
        dtype = next(self.parameters()).dtype
        for s in range(0, len(valid), chunk):
            idx = valid[s:s + chunk]
            o = torch.as_tensor(origins[idx], dtype=dtype)
            d = torch.as_tensor(dirs[idx], dtype=dtype)
            t, delta = stratified_t_torch(torch.as_tensor(near[idx], dtype=dtype),
                                          torch.as_tensor(far[idx], dtype=dtype), n_samples, jitter=False)
            p = o[:, None] + t[..., None] * d[:, None]
            w = composite_weights_torch(self.density(p), delta)
            acc = w.sum(-1)
            top = torch.topk(w, k, dim=-1).indices.sort(dim=-1).values
            pos[idx] = torch.gather(p, 1, top[..., None].expand(-1, -1, 3)).numpy()
            wt = torch.gather(w, 1, top)
            # rescale so the kept weights carry the full opacity of the ray
            wk[idx] = (wt * (acc / wt.sum(-1).clamp_min(1e-10))[:, None]).numpy()
            opacity[idx] = acc.double().numpy()
            dep = ((w * t).sum(-1) / acc.clamp_min(1e-10)).double().numpy()
            depth[idx] = np.where(acc.numpy() > 1e-4, dep, np.inf)
        return pos, wk, opacity, depth

    @torch.no_grad()
    def render(self, origins, dirs, tokens: bool = True, seg: bool = True, chunk: int = 4096):
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        pos, w, opacity, depth = self.surface_samples(origins, dirs, n_samples=max(self.cfg.samples_per_ray, 64))
        out = RayRender(opacity=opacity, depth=depth)
        n = len(origins)
        dtype = next(self.parameters()).dtype
        if tokens:
            out.t_vi = np.zeros((n, self.d_tok))
            out.t_vd = np.zeros((n, self.d_tok))
        if seg and self.seg is not None:
            out.seg = np.zeros((3, n, self.seg.cfg.d_seg))
            out.label = np.zeros((3, n, self.seg.d_lab))
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            p = torch.as_tensor(pos[sl], dtype=dtype)
            ww = torch.as_tensor(w[sl], dtype=dtype)[..., None]
            if tokens:
                d = torch.as_tensor(dirs[sl], dtype=dtype)[:, None]
                t_vi, t_vd = self.tokens(p, d)
                out.t_vi[sl] = (ww * t_vi).sum(1).double().numpy()
                out.t_vd[sl] = (ww * t_vd).sum(1).double().numpy()
            if seg and self.seg is not None:
                e, lab = self.seg(p)
                out.seg[:, sl] = (ww[None] * e).sum(2).double().numpy()
                out.label[:, sl] = (ww[None] * lab).sum(2).double().numpy()
        return out

    @torch.no_grad()
    def embed_points(self, x, scale: int) -> np.ndarray:
        """Segment embeddings at 3D points for scale index 0 (small) .. 2 (large)."""
        if self.seg is None:
            raise RuntimeError("no segmentation field attached")
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        e, _ = self.seg(torch.as_tensor(x, dtype=next(self.parameters()).dtype))
        return e[scale].double().numpy()

    @torch.no_grad()
    def label_points(self, x, scale: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        _, lab = self.seg(torch.as_tensor(x, dtype=next(self.parameters()).dtype))
        return lab[scale].double().numpy()

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return np.any((x < self.bounds[0] - 1e-9) | (x > self.bounds[1] + 1e-9), axis=1)


@dataclass
class RayRender:
    opacity: np.ndarray
    depth: np.ndarray
    t_vi: np.ndarray | None = None
    t_vd: np.ndarray | None = None
    seg: np.ndarray | None = None  # (3, N, D_seg)
    label: np.ndarray | None = None  # (3, N, D_lab)

    def surface_points(self, origins, dirs) -> np.ndarray:
        depth = np.where(np.isfinite(self.depth), self.depth, 0.0)
        return np.asarray(origins) + depth[:, None] * np.asarray(dirs)


def init_fields(cfg: TrainConfig, bounds, d_tok: int = 32) -> FieldSet:
    return FieldSet(cfg, bounds, d_tok)


def forward_token(fs: FieldSet, x, d):
    """Point query of (t_vi, t_vd); third output flags points clamped to the bounds."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    clamped = fs.outside(x)
    xc = np.clip(x, fs.bounds[0], fs.bounds[1])
    dtype = next(fs.parameters()).dtype
    with torch.no_grad():
        t_vi, t_vd = fs.tokens(torch.as_tensor(xc, dtype=dtype), torch.as_tensor(d, dtype=dtype))
    return t_vi.double().numpy(), t_vd.double().numpy(), clamped


# ---------------------------------------------------------------------------
# training


@dataclass
class RayBatch:
    """Rays with fixed sample distances so the loss is a pure function of parameters."""
    origins: torch.Tensor
    dirs: torch.Tensor
    t: torch.Tensor  # (B, n)
    deltas: torch.Tensor  # (B, n)
    rgb: torch.Tensor | None = None  # premultiplied target
    alpha: torch.Tensor | None = None
    background: torch.Tensor | None = None
    tokens: torch.Tensor | None = None


@dataclass
class SurfaceBatch:
    """Token rays with precomputed top-k samples from frozen geometry."""
    positions: torch.Tensor  # (B, k, 3)
    weights: torch.Tensor  # (B, k)
    dirs: torch.Tensor
    tokens: torch.Tensor


def _composite(w, values):
    return (w[..., None] * values).sum(-2)


def compute_losses(fs: FieldSet, cfg: TrainConfig, rgb_batch: RayBatch | None = None,
                   token_batch=None) -> dict:
    losses = {}
    if rgb_batch is not None and cfg.w_rgb > 0:
        b = rgb_batch
        p = b.origins[:, None] + b.t[..., None] * b.dirs[:, None]
        sigma, feats = fs.density_and_features(p)
        w = composite_weights_torch(sigma, b.deltas)
        c = fs.color(feats, b.dirs[:, None])
        pred = _composite(w, c) + (1 - w.sum(-1, keepdim=True)) * b.background
        target = b.rgb + (1 - b.alpha[:, None]) * b.background
        losses["rgb"] = F.mse_loss(pred, target)
    if token_batch is not None and (cfg.w_vi > 0 or cfg.w_vd > 0):
        b = token_batch
        if isinstance(b, SurfaceBatch):
            p, w = b.positions, b.weights
        else:
            p = b.origins[:, None] + b.t[..., None] * b.dirs[:, None]
            w = composite_weights_torch(fs.density(p), b.deltas)
        t_vi, t_vd = fs.tokens(p, b.dirs[:, None])
        losses["vi"] = F.mse_loss(_composite(w, t_vi), b.tokens)
        losses["vd"] = F.mse_loss(_composite(w, t_vd), b.tokens)
    total = 0.0
    for name, weight in (("rgb", cfg.w_rgb), ("vi", cfg.w_vi), ("vd", cfg.w_vd)):
        if name in losses:
            total = total + weight * losses[name]
    losses["total"] = total if torch.is_tensor(total) else None
    return losses


def parameter_norms(module: nn.Module) -> dict:
    return {name: float(p.detach().norm()) for name, p in module.named_parameters()}


def make_optimizer(params_grid, params_dec, cfg, params_decay=()) -> torch.optim.Optimizer:
    """Adam with decoupled weight decay applied only to ``params_decay`` (decoder lr)."""
    groups = [{"params": list(params_grid), "lr": cfg.lr_grid, "weight_decay": 0.0},
              {"params": list(params_dec), "lr": cfg.lr_decoder, "weight_decay": 0.0},
              {"params": list(params_decay), "lr": cfg.lr_decoder, "weight_decay": getattr(cfg, "vd_decay", 0.0)}]
    return torch.optim.AdamW([g for g in groups if g["params"]], eps=1e-15)


def train_step(fs: FieldSet, optimizer: torch.optim.Optimizer, cfg: TrainConfig, rgb_batch=None,
               token_batch=None) -> dict:
    losses = compute_losses(fs, cfg, rgb_batch, token_batch)
    total = losses["total"]
    if total is None:
        return {}
    if not torch.isfinite(total):
        raise NumericalError("non-finite loss, step aborted", parameter_norms(fs))
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


class RayPool:
    """Every pixel ray of a set of views with its rgb / alpha target, clipped to the bounds."""

    def __init__(self, teacher, bounds, views=None):
        views = range(teacher.n_views) if views is None else views
        o_all, d_all, rgb, alpha, vid, pix = [], [], [], [], [], []
        for v in views:
            pose = teacher.poses[v]
            h, w = pose.resolution
            o, d = pixel_rays(pose, pixel_grid(h, w))
            o_all.append(o)
            d_all.append(d)
            rgb.append(teacher.rgb[v].reshape(-1, 3))
            alpha.append(teacher.alpha[v].reshape(-1))
            vid.append(np.full(h * w, v))
            pix.append(np.arange(h * w))
        self.origins = np.concatenate(o_all)
        self.dirs = np.concatenate(d_all)
        self.rgb = np.concatenate(rgb)
        self.alpha = np.concatenate(alpha)
        self.view = np.concatenate(vid)
        self.pixel = np.concatenate(pix)
        self.near, self.far = ray_box(self.origins, self.dirs, *np.asarray(bounds))
        keep = self.far > self.near + 1e-6
        for name in ("origins", "dirs", "rgb", "alpha", "view", "pixel", "near", "far"):
            setattr(self, name, getattr(self, name)[keep])

    def __len__(self):
        return len(self.origins)

    def batch(self, idx, n_samples, generator, dtype=torch.float32, jitter=True) -> RayBatch:
        t, deltas = stratified_t_torch(torch.as_tensor(self.near[idx], dtype=dtype),
                                       torch.as_tensor(self.far[idx], dtype=dtype), n_samples, generator, jitter)
        return RayBatch(
            origins=torch.as_tensor(self.origins[idx], dtype=dtype), dirs=torch.as_tensor(self.dirs[idx], dtype=dtype),
            t=t, deltas=deltas, rgb=torch.as_tensor(self.rgb[idx], dtype=dtype),
            alpha=torch.as_tensor(self.alpha[idx], dtype=dtype),
            background=torch.rand(len(idx), 3, generator=generator, dtype=dtype),
        )


def token_rays(teacher, views=None):
    """Rays through the token-grid cell centers of each view, with token targets."""
    views = range(teacher.n_views) if views is None else views
    o_all, d_all, tk = [], [], []
    n = teacher.token_res
    for v in views:
        o, d = pixel_rays(teacher.poses[v], cell_centers(teacher.poses[v], n))
        o_all.append(o)
        d_all.append(d)
        tk.append(teacher.tokens[v].reshape(-1, teacher.tokens.shape[-1]))
    return np.concatenate(o_all), np.concatenate(d_all), np.concatenate(tk)


def _check_divergence(loss: dict, fs, cfg, step):
    if loss and loss.get("total", 0.0) > cfg.divergence:
        raise NumericalError(f"training diverged at step {step} (loss {loss['total']:.3g})", parameter_norms(fs))


def fit_geometry(fs: FieldSet, teacher, cfg: TrainConfig, views=None, log_every: int = 0) -> list:
    pool = RayPool(teacher, fs.bounds, views)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = make_optimizer(list(fs.geo.parameters()),
                         list(fs.density_head.parameters()) + list(fs.color_head.parameters()), cfg)
    gcfg = TrainConfig(**{**asdict(cfg), "w_vi": 0.0, "w_vd": 0.0})
    curve = []
    for step in range(cfg.geometry_steps):
        idx = rng.integers(0, len(pool), cfg.rays_per_batch)
        loss = train_step(fs, opt, gcfg, rgb_batch=pool.batch(idx, cfg.samples_per_ray, gen))
        _check_divergence(loss, fs, cfg, step)
        curve.append(loss)
        if log_every and step % log_every == 0:
            logger.info("geometry step %d rgb %.5f", step, loss.get("rgb", float("nan")))
    return curve


def fit_token_field(fs: FieldSet, teacher, cfg: TrainConfig, feature_views=None, geometry_views=None,
                    log_every: int = 0):
    """Geometry on all views, tokens on ``feature_views``. Returns (fs, loss curve)."""
    curve = []
    o, d, tk = token_rays(teacher, feature_views)
    rng = np.random.default_rng(cfg.seed + 2)
    if cfg.joint:
        pool = RayPool(teacher, fs.bounds, geometry_views)
        near, far = ray_box(o, d, *fs.bounds)
        keep = far > near + 1e-6
        o, d, tk, near, far = o[keep], d[keep], tk[keep], near[keep], far[keep]
        gen = torch.Generator().manual_seed(cfg.seed + 2)
        opt = make_optimizer(list(fs.geo.parameters()) + list(fs.tok.parameters()),
                             [p for n, p in fs.named_parameters() if not n.startswith(("geo.", "tok.", "vd_head."))], cfg,
                             fs.vd_head.parameters())
        for step in range(cfg.steps):
            ridx = rng.integers(0, len(pool), cfg.rays_per_batch)
            tidx = rng.integers(0, len(o), cfg.rays_per_batch)
            t, deltas = stratified_t_torch(torch.as_tensor(near[tidx], dtype=torch.float32),
                                           torch.as_tensor(far[tidx], dtype=torch.float32), cfg.samples_per_ray, gen)
            tb = RayBatch(torch.as_tensor(o[tidx], dtype=torch.float32), torch.as_tensor(d[tidx], dtype=torch.float32),
                          t, deltas, tokens=torch.as_tensor(tk[tidx], dtype=torch.float32))
            loss = train_step(fs, opt, cfg, pool.batch(ridx, cfg.samples_per_ray, gen), tb)
            _check_divergence(loss, fs, cfg, step)
            curve.append(loss)
        return fs, curve
    curve.extend(fit_geometry(fs, teacher, cfg, geometry_views, log_every))
    pos, w, _, _ = fs.surface_samples(o, d)
    pos_t = torch.as_tensor(pos)
    w_t = torch.as_tensor(w)
    d_t = torch.as_tensor(d, dtype=torch.float32)
    tk_t = torch.as_tensor(tk, dtype=torch.float32)
    opt = make_optimizer(list(fs.tok.parameters()),
                         list(fs.vi_head.parameters()) + [fs.log_scale] + list(fs.token_decoder.parameters()), cfg,
                         fs.vd_head.parameters())
    tcfg = TrainConfig(**{**asdict(cfg), "w_rgb": 0.0})
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.integers(0, len(o), cfg.rays_per_batch))
        batch = SurfaceBatch(pos_t[idx], w_t[idx], d_t[idx], tk_t[idx])
        loss = train_step(fs, opt, tcfg, token_batch=batch)
        _check_divergence(loss, fs, cfg, step)
        curve.append(loss)
        if log_every and step % log_every == 0:
            logger.info("token step %d vi %.5f vd %.5f", step, loss.get("vi", float("nan")), loss.get("vd", float("nan")))
    return fs, curve


# ---------------------------------------------------------------------------
# checkpoints


def token_map_errors(fs: FieldSet, oracle, pose, n: int = 27) -> dict:
    """Held-out token map error of a fitted FieldSet against the analytic scene.

    Rays through the n x n cell centres of ``pose``; the target is the first-hit
    teacher token (zero on misses). ``rel_vi``/``rel_vd`` are MSE divided by the
    mean squared target norm. ``delta_ratio`` is mean |delta| / mean |f_vi| at
    the hit points seen from this view.
    """
    o, d = pixel_rays(pose, cell_centers(pose, n))
    cast = oracle.cast(o, d)
    hit = cast.hit
    target = np.zeros((len(o), fs.d_tok))
    x = o[hit] + cast.t_hit[hit, None] * d[hit]
    target[hit] = oracle.token(x, d[hit], cast.obj[hit])
    r = fs.render(o, d, seg=False)
    energy = float(np.mean(np.sum(target ** 2, axis=1)))
    mse = lambda t: float(np.mean(np.sum((t - target) ** 2, axis=1)))
    dtype = next(fs.parameters()).dtype
    with torch.no_grad():
        f_vi, delta = fs.latents(torch.as_tensor(x, dtype=dtype), torch.as_tensor(d[hit], dtype=dtype))
    return {"mse_vi": mse(r.t_vi), "mse_vd": mse(r.t_vd), "energy": energy,
            "rel_vi": mse(r.t_vi) / energy, "rel_vd": mse(r.t_vd) / energy,
            "delta_ratio": float(delta.norm(dim=1).mean() / f_vi.norm(dim=1).mean())}


def delta_ratio(fs: FieldSet, n: int = 2000, seed: int = 0) -> float:
    """mean |delta_VD| / mean |f_VI| over uniform points in the bounds and uniform directions."""
    rng = np.random.default_rng(seed)
    dtype = next(fs.parameters()).dtype
    x = torch.as_tensor(rng.uniform(fs.bounds[0], fs.bounds[1], (n, 3)), dtype=dtype)
    d = F.normalize(torch.as_tensor(rng.normal(size=(n, 3)), dtype=dtype), dim=1)
    with torch.no_grad():
        f_vi, delta = fs.latents(x, d)
    return float(delta.norm(dim=1).mean() / f_vi.norm(dim=1).mean())


def save_fieldset(fs: FieldSet, directory) -> Path:
    directory = Path(directory)
    tensors = {f"fields/{k}": v.detach().cpu().numpy() for k, v in fs.state_dict().items()
               if not k.startswith("seg.")}
    desc = {"train": asdict(fs.cfg), "bounds": fs.bounds.tolist(), "d_tok": fs.d_tok}
    if fs.seg is not None:
        tensors.update({f"seg/{k}": v.detach().cpu().numpy() for k, v in fs.seg.state_dict().items()})
        desc["seg"] = {**asdict(fs.seg.cfg), "d_lab": fs.seg.d_lab}
    save_tensors(directory, tensors, {"fieldset": "fieldset.json"})
    (directory / "fieldset.json").write_text(json.dumps(desc, indent=1, sort_keys=True))
    return directory


def load_fieldset(directory) -> FieldSet:
    from .segfield import SegConfig, SegFieldSet

    directory = Path(directory)
    desc = json.loads((directory / "fieldset.json").read_text())
    tensors = load_tensors(directory)
    fs = FieldSet(TrainConfig.from_dict(desc["train"]), np.asarray(desc["bounds"]), desc["d_tok"])
    state = {k[len("fields/"):]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("fields/")}
    fs.load_state_dict(state, strict=False)
    if "seg" in desc:
        seg_desc = dict(desc["seg"])
        d_lab = seg_desc.pop("d_lab")
        fs.seg = SegFieldSet(SegConfig.from_dict(seg_desc), fs.bounds, d_lab)
        fs.seg.load_state_dict({k[len("seg/"):]: torch.as_tensor(v) for k, v in tensors.items()
                                if k.startswith("seg/")})
    return fs
