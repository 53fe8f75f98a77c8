"""Shared scene constructions and independent oracles for the test suite."""

import numpy as np
import torch

from scenetok.fields import RayBatch, RayPool, SurfaceBatch, TrainConfig, compute_losses, init_fields, token_rays
from scenetok.scenegen import SCALES, ObjectSpec, PartSpec, Primitive, SceneSpec, SubPartSpec, build_scene, \
    make_trajectory, render_teacher_views


def one_sphere_scene(vd=0.0, d_tok=8, center=(0.0, 0.0, 0.0), radius=0.3):
    rng = np.random.default_rng(0)
    sub = SubPartSpec(0, Primitive.sphere(center, radius / 2), np.eye(4)[0])
    part = PartSpec(0, Primitive.sphere(center, radius / 2), [sub], np.eye(4)[0])
    obj = ObjectSpec(0, Primitive.sphere(center, radius), [part], rng.normal(size=d_tok),
                     vd * rng.normal(size=d_tok), np.array([1.0, 0.0, 0.0]), np.eye(4)[0], np.array([0.5, 0.5, 0.5]))
    return SceneSpec([obj])


def _probe_loss(fs, cfg, rgb, tok):
    return compute_losses(fs, cfg, rgb, tok)["total"]


def gradient_check(seed: int, n_probe: int = 5, eps: float = 1e-6) -> float:
    """Worst relative gap between autograd and central differences over probe parameters.

    Runs in float64 on a one-sphere scene with fixed sample positions so the
    loss is a deterministic function of the parameters. Probes are the largest
    gradient entries of five parameter tensors spanning grids, decoders and the
    direction head.
    """
    spec = one_sphere_scene(vd=0.5)
    teacher = render_teacher_views(build_scene(spec), make_trajectory(spec, 2, seed=seed))
    cfg = TrainConfig(resolutions=(4, 8), hidden=16, latent_dim=8, samples_per_ray=24, seed=seed)
    fs = init_fields(cfg, spec.bounds, spec.d_tok).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # move away from the flat initialization so every term has curvature
        for p in fs.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    rng = np.random.default_rng(seed)
    pool = RayPool(teacher, fs.bounds)
    rgb = pool.batch(rng.integers(0, len(pool), 32), 24, gen, dtype=torch.float64)
    o, d, tk = token_rays(teacher)
    hit = np.abs(tk).sum(1) > 0
    idx = rng.choice(np.nonzero(hit)[0], 16, replace=False)
    pos = torch.as_tensor(o[idx, None] + np.linspace(1.5, 2.5, 8)[None, :, None] * d[idx, None])
    w = torch.as_tensor(rng.dirichlet(np.ones(8), 16) * 0.9)
    tok = SurfaceBatch(pos, w, torch.as_tensor(d[idx]), torch.as_tensor(tk[idx]))
    # a second token batch through the density path exercises compositing gradients
    tb = RayBatch(torch.as_tensor(o[idx]), torch.as_tensor(d[idx]), torch.linspace(1.0, 3.0, 24).repeat(16, 1),
                  torch.full((16, 24), 2.0 / 24, dtype=torch.float64), tokens=torch.as_tensor(tk[idx]))
    worst = 0.0
    for batch in (tok, tb):
        fs.zero_grad()
        loss = _probe_loss(fs, cfg, rgb, batch)
        loss.backward()
        names = ["geo.levels.1", "density_head.0.weight", "tok.levels.0", "vd_head.2.weight", "token_decoder.0.weight"]
        params = dict(fs.named_parameters())
        for name in names[:n_probe]:
            p = params[name]
            flat = p.grad.reshape(-1)
            j = int(torch.argmax(flat.abs()))
            analytic = float(flat[j])
            with torch.no_grad():
                pv = p.view(-1)
                orig = float(pv[j])
                pv[j] = orig + eps
                up = float(_probe_loss(fs, cfg, rgb, batch))
                pv[j] = orig - eps
                down = float(_probe_loss(fs, cfg, rgb, batch))
                pv[j] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


# refinement constructions -------------------------------------------------

D_LAB, D_SEG = 8, 6


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def with_cos(a, c, rng):
    """Unit vector at cosine c to unit vector a."""
    r = rng.normal(size=a.shape)
    r -= (r @ a) * a
    return c * a + np.sqrt(1 - c * c) * unit(r)


def construct(groups, rng, noise=0.01):
    """Rays from leaf groups: each group gives (count, (small, medium, large) ids, per-scale label vectors)."""
    labels = {s: [] for s in SCALES}
    lab = {s: [] for s in SCALES}
    codes = {}
    for count, ids, vecs in groups:
        for si, s in enumerate(SCALES):
            labels[s] += [ids[si]] * count
            lab[s].append(vecs[si] + noise * rng.normal(size=(count, D_LAB)))
            key = (s, ids[si])
            if key not in codes:
                codes[key] = 3.0 * unit(rng.normal(size=D_SEG))
    seg = {s: np.concatenate([np.tile(codes[(s, i)], (1, 1)) for i in labels[s]]) for s in SCALES}
    seg = {s: seg[s] + 0.01 * rng.normal(size=seg[s].shape) for s in SCALES}
    return ({s: np.array(labels[s]) for s in SCALES}, {s: np.concatenate(lab[s]) for s in SCALES}, seg,
            {s: np.ones(len(labels[s])) for s in SCALES})


def basis(rng, n):
    q, _ = np.linalg.qr(rng.normal(size=(D_LAB, D_LAB)))
    return [q[:, i] for i in range(n)]


def n_segments(lbl):
    return len(np.unique(lbl[lbl >= 0]))
