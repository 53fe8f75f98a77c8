"""Synthetic scenes with an object / part / sub-part hierarchy and analytic teachers.

The oracle stands in for the pretrained encoders: it answers density, a
direction-dependent teacher token, per-scale instance ids and label embeddings
for any point. Teacher token inside object ``o`` seen along ``d`` is::

    t(X, d) = base_token + (d . vd_axis) * vd_amplitude

Parts partition their object by nearest signed distance among the part
primitives; sub-parts partition their part the same way.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPose, cell_centers, look_at, pixel_grid, pixel_rays
from .tensorio import load_manifest, load_tensors, save_tensors

logger = logging.getLogger(__name__)

SCALES = ("small", "medium", "large")
SIGMA_IN = 40.0
TOKEN_RES = 27


class SceneError(ValueError):
    pass


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    extent: np.ndarray  # radius (sphere, stored x3) or half sizes (box)

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise SceneError(f"unknown primitive {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        ext = np.asarray(self.extent, dtype=np.float64).reshape(-1)
        self.extent = np.full(3, ext[0]) if ext.size == 1 else ext.reshape(3)
        if np.any(self.extent <= 0):
            raise SceneError("primitive extent must be positive")

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", center, [radius])

    @classmethod
    def box(cls, center, half):
        return cls("box", center, half)

    @property
    def radius(self) -> float:
        return float(self.extent[0])

    def aabb(self):
        return self.center - self.extent, self.center + self.extent

    def sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3) - self.center
        if self.kind == "sphere":
            return np.linalg.norm(x, axis=1) - self.radius
        q = np.abs(x) - self.extent
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def intersect(self, origins, dirs):
        """Entry/exit distances along each ray; inf where the ray misses."""
        oc = origins - self.center
        n = len(origins)
        if self.kind == "sphere":
            b = np.einsum("ij,ij->i", dirs, oc)
            c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
            disc = b * b - c
            hit = disc >= 0
            s = np.sqrt(np.where(hit, disc, 0.0))
            t0, t1 = -b - s, -b + s
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                a = (-self.extent - oc) * inv
                bb = (self.extent - oc) * inv
            lo = np.nan_to_num(np.minimum(a, bb), nan=-np.inf).max(axis=1)
            hi = np.nan_to_num(np.maximum(a, bb), nan=np.inf).min(axis=1)
            hit = lo <= hi
            t0, t1 = lo, hi
        t0 = np.maximum(t0, 0.0)
        hit &= t1 > t0
        inf = np.full(n, np.inf)
        return np.where(hit, t0, inf), np.where(hit, t1, inf)

    def to_dict(self):
        ext = [self.radius] if self.kind == "sphere" else [float(v) for v in self.extent]
        return {"kind": self.kind, "center": [float(v) for v in self.center], "extent": ext}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["center"], d["extent"])


@dataclass
class SubPartSpec:
    id: int
    primitive: Primitive
    label_embedding: np.ndarray | None = None


@dataclass
class PartSpec:
    id: int
    primitive: Primitive
    subparts: list
    label_embedding: np.ndarray | None = None


@dataclass
class ObjectSpec:
    id: int
    primitive: Primitive
    parts: list
    base_token: np.ndarray
    vd_amplitude: np.ndarray
    vd_axis: np.ndarray
    label_embedding: np.ndarray
    color: np.ndarray
    label: int = 0
    assembled: bool = False  # geometry is the union of the sub-part primitives, not ``primitive``

    @property
    def pieces(self) -> list:
        if self.assembled:
            return [s.primitive for p in self.parts for s in p.subparts]
        return [self.primitive]

    def sdf(self, x) -> np.ndarray:
        return np.min(np.stack([q.sdf(x) for q in self.pieces], axis=1), axis=1)


@dataclass
class SceneSpec:
    objects: list
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -1.0, -0.5], [1.0, 1.0, 0.5]]))
    seed: int = 0
    sigma_in: float = SIGMA_IN

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    @property
    def d_tok(self) -> int:
        return len(self.objects[0].base_token)

    @property
    def d_lab(self) -> int:
        return len(self.objects[0].label_embedding)

    @property
    def center(self) -> np.ndarray:
        return self.bounds.mean(axis=0)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else [float(x) for x in v]

        objs = []
        for o in self.objects:
            objs.append({
                "id": o.id, "label": o.label, "primitive": o.primitive.to_dict(),
                "base_token": vec(o.base_token), "vd_amplitude": vec(o.vd_amplitude),
                "vd_axis": vec(o.vd_axis), "label_embedding": vec(o.label_embedding),
                "color": vec(o.color), "assembled": o.assembled,
                "parts": [{
                    "id": p.id, "primitive": p.primitive.to_dict(), "label_embedding": vec(p.label_embedding),
                    "subparts": [{"id": s.id, "primitive": s.primitive.to_dict(),
                                  "label_embedding": vec(s.label_embedding)} for s in p.subparts],
                } for p in o.parts],
            })
        return {"bounds": self.bounds.tolist(), "seed": self.seed, "sigma_in": self.sigma_in, "objects": objs}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)

        objs = []
        for o in d["objects"]:
            parts = [PartSpec(
                p["id"], Primitive.from_dict(p["primitive"]),
                [SubPartSpec(s["id"], Primitive.from_dict(s["primitive"]), arr(s.get("label_embedding")))
                 for s in p["subparts"]],
                arr(p.get("label_embedding")),
            ) for p in o["parts"]]
            objs.append(ObjectSpec(
                o["id"], Primitive.from_dict(o["primitive"]), parts, arr(o["base_token"]),
                arr(o["vd_amplitude"]), arr(o["vd_axis"]), arr(o["label_embedding"]), arr(o["color"]),
                int(o.get("label", 0)), bool(o.get("assembled", False)),
            ))
        return cls(objs, np.asarray(d["bounds"]), int(d.get("seed", 0)), float(d.get("sigma_in", SIGMA_IN)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _inside(prim: Primitive, point) -> bool:
    return bool(prim.sdf(point)[0] <= 1e-9)


def _overlap(a: Primitive, b: Primitive) -> bool:
    if a.kind == "sphere" and b.kind == "sphere":
        return np.linalg.norm(a.center - b.center) < a.radius + b.radius
    if a.kind == "box" and b.kind == "box":
        return bool(np.all(np.abs(a.center - b.center) < a.extent + b.extent))
    sphere, box = (a, b) if a.kind == "sphere" else (b, a)
    return bool(box.sdf(sphere.center)[0] < sphere.radius)


def validate_scene(spec: SceneSpec) -> None:
    if not spec.objects:
        raise SceneError("scene has no objects")
    lo, hi = spec.bounds
    seen = {s: set() for s in SCALES}
    for o in spec.objects:
        for scale, ident in (("large", o.id),):
            if ident in seen[scale]:
                raise SceneError(f"duplicate object id {ident}")
            seen[scale].add(ident)
        blo, bhi = o.primitive.aabb()
        if np.any(blo < lo - 1e-9) or np.any(bhi > hi + 1e-9):
            raise SceneError(f"object {o.id} leaves the scene bounds")
        if not o.parts:
            raise SceneError(f"object {o.id} has no parts")
        if abs(np.linalg.norm(o.vd_axis) - 1.0) > 1e-6:
            raise SceneError(f"object {o.id}: vd_axis must be unit length")
        if len(o.base_token) != len(o.vd_amplitude):
            raise SceneError(f"object {o.id}: token and amplitude widths differ")
        for p in o.parts:
            if p.id in seen["medium"]:
                raise SceneError(f"duplicate part id {p.id}")
            seen["medium"].add(p.id)
            if not _inside(o.primitive, p.primitive.center):
                raise SceneError(f"part {p.id} is not nested in object {o.id}")
            if not p.subparts:
                raise SceneError(f"part {p.id} has no sub-parts")
            for s in p.subparts:
                if s.id in seen["small"]:
                    raise SceneError(f"duplicate sub-part id {s.id}")
                seen["small"].add(s.id)
                if not _inside(p.primitive, s.primitive.center):
                    raise SceneError(f"sub-part {s.id} is not nested in part {p.id}")
        if o.assembled:
            pieces = o.pieces
            for i, a in enumerate(pieces):
                if any(_overlap(a, b) for b in pieces[i + 1:]):
                    raise SceneError(f"object {o.id}: assembled sub-parts must not overlap")
                if not _inside(o.primitive, a.center):
                    raise SceneError(f"object {o.id}: assembled sub-part outside the object")
    for i, a in enumerate(spec.objects):
        for b in spec.objects[i + 1:]:
            if _overlap(a.primitive, b.primitive):
                raise SceneError(f"objects {a.id} and {b.id} overlap; instance ground truth would be ambiguous")


@dataclass
class CastResult:
    t_hit: np.ndarray  # first sigma>0 crossing, inf on a miss
    obj: np.ndarray  # index into spec.objects, -1 on a miss
    rgb: np.ndarray  # premultiplied (black background)
    alpha: np.ndarray
    token: np.ndarray | None = None  # composited like rgb
    token_vi: np.ndarray | None = None

    @property
    def hit(self):
        return self.obj >= 0


class SceneOracle:
    """Immutable analytic query structure over a validated SceneSpec."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.objects = list(spec.objects)
        self._label_table = {s: {} for s in SCALES}
        for o in self.objects:
            self._label_table["large"][o.id] = np.asarray(o.label_embedding, dtype=np.float64)
            for p in o.parts:
                pe = o.label_embedding if p.label_embedding is None else p.label_embedding
                self._label_table["medium"][p.id] = np.asarray(pe, dtype=np.float64)
                for s in p.subparts:
                    se = pe if s.label_embedding is None else s.label_embedding
                    self._label_table["small"][s.id] = np.asarray(se, dtype=np.float64)
        self.parent = {"small": {}, "medium": {}}
        for o in self.objects:
            for p in o.parts:
                self.parent["medium"][p.id] = o.id
                for s in p.subparts:
                    self.parent["small"][s.id] = p.id

    @property
    def bounds(self):
        return self.spec.bounds

    @property
    def d_tok(self):
        return self.spec.d_tok

    def label_table(self, scale: str) -> dict:
        return self._label_table[scale]

    def object_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(x), -1)
        for k, o in enumerate(self.objects):
            out[o.sdf(x) <= 0] = k
        return out

    def nearest_object(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.stack([o.sdf(x) for o in self.objects], axis=1)
        return d.argmin(axis=1)

    def density(self, x) -> np.ndarray:
        return np.where(self.object_index(x) >= 0, self.spec.sigma_in, 0.0)

    def instance_ids(self, x, obj=None) -> np.ndarray:
        """(N, 3) ids ordered (small, medium, large); -1 outside every object."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        obj = self.object_index(x) if obj is None else np.asarray(obj)
        ids = np.full((len(x), 3), -1, dtype=np.int64)
        for k, o in enumerate(self.objects):
            sel = np.nonzero(obj == k)[0]
            if not len(sel):
                continue
            xs = x[sel]
            ids[sel, 2] = o.id
            if o.assembled:
                owners = [(p.id, sp.id) for p in o.parts for sp in p.subparts]
                near = np.stack([q.sdf(xs) for q in o.pieces], axis=1).argmin(axis=1)
                ids[sel, 1] = np.array([a for a, _ in owners])[near]
                ids[sel, 0] = np.array([b for _, b in owners])[near]
                continue
            pd = np.stack([p.primitive.sdf(xs) for p in o.parts], axis=1)
            pk = pd.argmin(axis=1)
            for j, p in enumerate(o.parts):
                psel = sel[pk == j]
                ids[psel, 1] = p.id
                if not len(psel):
                    continue
                sd = np.stack([s.primitive.sdf(x[psel]) for s in p.subparts], axis=1)
                ids[psel, 0] = np.array([s.id for s in p.subparts])[sd.argmin(axis=1)]
        return ids

    def token(self, x, d, obj=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        d = np.broadcast_to(d, x.shape)
        obj = self.object_index(x) if obj is None else np.asarray(obj)
        out = np.zeros((len(x), self.d_tok))
        for k, o in enumerate(self.objects):
            sel = obj == k
            if np.any(sel):
                out[sel] = o.base_token + (d[sel] @ o.vd_axis)[:, None] * o.vd_amplitude
        return out

    def token_vi(self, x, obj=None) -> np.ndarray:
        """Direction-averaged teacher token (the affine term averages out)."""
        obj = self.object_index(x) if obj is None else np.asarray(obj)
        out = np.zeros((len(obj), self.d_tok))
        for k, o in enumerate(self.objects):
            out[obj == k] = o.base_token
        return out

    def cast(self, origins, dirs) -> CastResult:
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = len(origins)
        # disjoint convex pieces, each crossed in one interval, composited front to back
        pieces = [(k, q) for k, o in enumerate(self.objects) for q in o.pieces]
        owner = np.array([k for k, _ in pieces])
        t_in = np.empty((n, len(pieces)))
        t_out = np.empty_like(t_in)
        for j, (_, q) in enumerate(pieces):
            t_in[:, j], t_out[:, j] = q.intersect(origins, dirs)
        order = np.argsort(t_in, axis=1, kind="stable")
        trans = np.ones(n)
        rgb = np.zeros((n, 3))
        tok = np.zeros((n, self.d_tok))
        tok_vi = np.zeros((n, self.d_tok))
        colors = np.stack([o.color for o in self.objects])
        base = np.stack([o.base_token for o in self.objects])
        amp = np.stack([o.vd_amplitude for o in self.objects])
        axis = np.stack([o.vd_axis for o in self.objects])
        for j in range(len(pieces)):
            a, b = t_in[np.arange(n), order[:, j]], t_out[np.arange(n), order[:, j]]
            k = owner[order[:, j]]
            with np.errstate(invalid="ignore"):
                seg = np.where(np.isfinite(a), b - a, 0.0)
            alpha = 1.0 - np.exp(-self.spec.sigma_in * seg)
            w = (trans * alpha)[:, None]
            rgb += w * colors[k]
            tok_vi += w * base[k]
            tok += w * (base[k] + np.sum(dirs * axis[k], axis=1, keepdims=True) * amp[k])
            trans = trans * (1.0 - alpha)
        first = order[:, 0]
        t_hit = t_in[np.arange(n), first]
        obj = np.where(np.isfinite(t_hit), owner[first], -1)
        return CastResult(t_hit, obj, rgb, 1.0 - trans, tok, tok_vi)


def build_scene(spec: SceneSpec) -> SceneOracle:
    validate_scene(spec)
    return SceneOracle(spec)


def make_trajectory(spec: SceneSpec, n: int, seed: int | None = None, elevation_deg: float = 30.0,
                    jitter_deg: float = 6.0, distance: float | None = None,
                    vertical_fov: float = np.deg2rad(40.0), resolution=(64, 64)) -> list:
    """Inward-facing orbit around the bounds center with seeded elevation jitter."""
    if n < 1:
        raise ValueError("trajectory needs n >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    center = spec.center
    if distance is None:
        distance = 0.8 * spec.diagonal
    phase = rng.uniform(0, 2 * np.pi)
    elev = np.deg2rad(elevation_deg + rng.uniform(-jitter_deg, jitter_deg, size=n))
    poses = []
    for i in range(n):
        az = phase + 2 * np.pi * i / n
        pos = center + distance * np.array([np.cos(az) * np.cos(elev[i]), np.sin(az) * np.cos(elev[i]), np.sin(elev[i])])
        poses.append(look_at(pos, center, vertical_fov, resolution))
    return poses


@dataclass
class TeacherOutputs:
    poses: list
    rgb: np.ndarray  # (V, H, W, 3), premultiplied on black
    alpha: np.ndarray  # (V, H, W)
    depth: np.ndarray  # (V, H, W), inf where nothing is hit
    tokens: np.ndarray  # (V, n, n, D)
    ids: np.ndarray  # (V, 3, H, W) instance ids per scale, -1 = no mask
    label_ids: dict  # scale -> (K,) instance ids with a label embedding
    label_embeddings: dict  # scale -> (K, D_lab)

    @property
    def n_views(self):
        return len(self.poses)

    @property
    def token_res(self):
        return self.tokens.shape[1]

    def masks(self, view: int, scale: str) -> list:
        """Binary masks at one scale for one view, as (instance id, bool H x W)."""
        img = self.ids[view, SCALES.index(scale)]
        return [(int(i), img == i) for i in np.unique(img) if i >= 0]

    def label_lookup(self, scale: str) -> dict:
        return {int(i): e for i, e in zip(self.label_ids[scale], self.label_embeddings[scale])}

    def subset(self, views) -> "TeacherOutputs":
        views = list(views)
        return TeacherOutputs([self.poses[v] for v in views], self.rgb[views], self.alpha[views],
                              self.depth[views], self.tokens[views], self.ids[views],
                              self.label_ids, self.label_embeddings)

    def save(self, directory):
        tensors = {"rgb": self.rgb, "alpha": self.alpha, "depth": self.depth, "tokens": self.tokens,
                   "ids": self.ids}
        for s in SCALES:
            tensors[f"label_ids_{s}"] = self.label_ids[s]
            tensors[f"label_emb_{s}"] = self.label_embeddings[s]
        return save_tensors(directory, tensors, {"poses": [p.to_dict() for p in self.poses]})

    @classmethod
    def load(cls, directory) -> "TeacherOutputs":
        t = load_tensors(directory)
        poses = [CameraPose.from_dict(p) for p in load_manifest(directory)["meta"]["poses"]]
        return cls(poses, t["rgb"], t["alpha"], t["depth"], t["tokens"], t["ids"].astype(np.int64),
                   {s: t[f"label_ids_{s}"].astype(np.int64) for s in SCALES},
                   {s: t[f"label_emb_{s}"] for s in SCALES})


def _boundary(img: np.ndarray) -> np.ndarray:
    edge = np.zeros(img.shape, dtype=bool)
    edge[1:, :] |= img[1:, :] != img[:-1, :]
    edge[:-1, :] |= img[1:, :] != img[:-1, :]
    edge[:, 1:] |= img[:, 1:] != img[:, :-1]
    edge[:, :-1] |= img[:, 1:] != img[:, :-1]
    return edge


def render_teacher_views(oracle: SceneOracle, poses: list, token_res: int = TOKEN_RES,
                         mask_noise: float = 0.0, mask_dropout: float = 0.0, seed: int = 0) -> TeacherOutputs:
    """Exact ray casting of rgb, depth, token maps and per-scale instance masks.

    Token maps hold the teacher token at the first surface hit of each cell
    center ray, seen along that ray's direction.

    ``mask_noise`` erodes mask boundary pixels with that probability.
    ``mask_dropout`` removes an instance from every view at one scale with that
    probability, mimicking a segmenter that misses a granularity.
    """
    if not poses:
        raise ValueError("need at least one pose")
    rng = np.random.default_rng(seed)
    h, w = poses[0].resolution
    v = len(poses)
    rgb = np.zeros((v, h, w, 3))
    alpha = np.zeros((v, h, w))
    depth = np.full((v, h, w), np.inf)
    ids = np.full((v, 3, h, w), -1, dtype=np.int64)
    tokens = np.zeros((v, token_res, token_res, oracle.d_tok))
    for i, pose in enumerate(poses):
        if pose.resolution != (h, w):
            raise ValueError("all teacher views must share one resolution")
        o, d = pixel_rays(pose, pixel_grid(h, w))
        cast = oracle.cast(o, d)
        rgb[i] = cast.rgb.reshape(h, w, 3)
        alpha[i] = cast.alpha.reshape(h, w)
        depth[i] = cast.t_hit.reshape(h, w)
        hit = cast.hit
        pts = o[hit] + cast.t_hit[hit, None] * d[hit]
        inst = np.full((h * w, 3), -1, dtype=np.int64)
        inst[hit] = oracle.instance_ids(pts, cast.obj[hit])
        ids[i] = inst.T.reshape(3, h, w)
        o, d = pixel_rays(pose, cell_centers(pose, token_res))
        cast = oracle.cast(o, d)
        hit = cast.hit
        tk = np.zeros((len(o), oracle.d_tok))
        tk[hit] = oracle.token(o[hit] + cast.t_hit[hit, None] * d[hit], d[hit], cast.obj[hit])
        tokens[i] = tk.reshape(token_res, token_res, -1)
    if mask_dropout > 0:
        for si, s in enumerate(SCALES):
            for ident in sorted(oracle.label_table(s)):
                if rng.random() < mask_dropout:
                    ids[:, si][ids[:, si] == ident] = -1
    if mask_noise > 0:
        for i in range(v):
            for si in range(3):
                edge = _boundary(ids[i, si]) & (rng.random((h, w)) < mask_noise)
                ids[i, si][edge] = -1
    label_ids, label_emb = {}, {}
    for s in SCALES:
        table = oracle.label_table(s)
        keys = sorted(table)
        label_ids[s] = np.array(keys, dtype=np.int64)
        label_emb[s] = np.stack([table[k] for k in keys])
    return TeacherOutputs(list(poses), rgb, alpha, depth, tokens, ids, label_ids, label_emb)


def _orthonormal(rng, n, d):
    m = rng.normal(size=(d, max(n, 1)))
    q, _ = np.linalg.qr(m)
    return q[:, :n].T


def random_scene(n_objects: int = 2, seed: int = 0, d_tok: int = 32, d_lab: int = 16, n_parts: int = 2,
                 n_subparts: int = 2, vd_strength: float = 0.0, token_scale: float = 1.0,
                 label_spread: float = 0.5, ring_radius: float | None = None, classes=None,
                 kinds=("sphere", "box"), part_gap: float = 0.0) -> SceneSpec:
    """Objects on a ring in the z=0 plane, each split top/bottom into parts and
    left/right into sub-parts.

    Base tokens are mutually orthogonal when ``n_objects <= d_tok``. Label
    embeddings: each object class gets an orthonormal direction ``c``; part
    ``i`` is ``normalize(c + label_spread * u_i)`` and sub-parts repeat the rule
    from their part, with every ``u``/``v`` orthogonal inside one object. With
    the default spread, siblings have label cosine 0.8.

    ``part_gap`` in (0, 1) builds each object from its sub-part primitives
    alone, shrunk by that fraction, so neighbouring sub-parts and parts are
    separated by empty space instead of sharing a surface.
    """
    if not 0.0 <= part_gap < 1.0:
        raise ValueError("part_gap must be in [0, 1)")
    rng = np.random.default_rng(seed)
    bounds = np.array([[-1.0, -1.0, -0.5], [1.0, 1.0, 0.5]])
    if ring_radius is None:
        ring_radius = 0.0 if n_objects == 1 else (0.45 if n_objects == 2 else 0.62)
    if n_objects > 1:
        rmax = min(0.3, 0.9 * ring_radius * np.sin(np.pi / n_objects))
    else:
        rmax = 0.35
    classes = list(range(n_objects)) if classes is None else list(classes)
    n_cls = max(classes) + 1
    cls_dirs = _orthonormal(rng, n_cls, d_lab) if n_cls <= d_lab else rng.normal(size=(n_cls, d_lab))
    cls_dirs /= np.linalg.norm(cls_dirs, axis=1, keepdims=True)
    if n_objects <= d_tok:
        base = _orthonormal(rng, n_objects, d_tok) * np.sqrt(d_tok) * token_scale
    else:
        base = rng.normal(size=(n_objects, d_tok)) * token_scale
    phase = rng.uniform(0, 2 * np.pi)
    objects = []
    pid = sid = 0
    for k in range(n_objects):
        ang = phase + 2 * np.pi * k / n_objects
        r = rng.uniform(0.8, 1.0) * rmax
        kind = kinds[k % len(kinds)]
        center = np.array([ring_radius * np.cos(ang), ring_radius * np.sin(ang), 0.0])
        c = cls_dirs[classes[k]]
        frame = rng.normal(size=(d_lab, d_lab))
        frame[:, 0] = c
        q, _ = np.linalg.qr(frame)
        basis = q.T[1:]  # orthonormal, orthogonal to c
        bi = 0
        parts = []
        half = r / np.sqrt(3) if kind == "box" else r
        tangent = np.array([np.cos(ang + np.pi / 2), np.sin(ang + np.pi / 2), 0.0])
        if part_gap > 0:
            # grid of separated pieces (parts along z, sub-parts along the tangent) inside radius r
            corner = 0.5 * np.hypot(n_subparts - 1, n_parts - 1)
            pitch = r / (corner + 0.5 * (1.0 - part_gap) * (np.sqrt(3) if kind == "box" else 1.0))
            piece = 0.5 * pitch * (1.0 - part_gap)
            if kind == "box":
                # boxes are axis-aligned: lay sibling pieces along the nearest horizontal axis
                axis_k = int(np.argmax(np.abs(tangent[:2])))
                tangent = np.sign(tangent[axis_k]) * np.eye(3)[axis_k]
        for j in range(n_parts):
            off = (j + 0.5) / n_parts * 2 - 1  # spread along z
            pc = center + np.array([0.0, 0.0, off * half])
            pr = half / n_parts
            if part_gap > 0:
                pc = center + np.array([0.0, 0.0, (j - (n_parts - 1) / 2) * pitch])
            u = basis[bi % len(basis)]
            bi += 1
            pemb = c + label_spread * u
            pemb /= np.linalg.norm(pemb)
            subs = []
            for m in range(n_subparts):
                soff = (m + 0.5) / n_subparts * 2 - 1
                sc = pc + 0.5 * soff * half * tangent
                sr = pr / max(n_subparts, 1)
                if part_gap > 0:
                    sc, sr = pc + (m - (n_subparts - 1) / 2) * pitch * tangent, piece
                vv = basis[bi % len(basis)]
                bi += 1
                semb = pemb + label_spread * vv
                semb /= np.linalg.norm(semb)
                sprim = Primitive.sphere(sc, sr) if kind == "sphere" else Primitive.box(sc, np.full(3, sr))
                subs.append(SubPartSpec(sid, sprim, semb))
                sid += 1
            if part_gap > 0:
                pprim = Primitive.sphere(pc, (n_subparts - 1) / 2 * pitch + piece)
            else:
                pprim = Primitive.sphere(pc, pr) if kind == "sphere" else Primitive.box(pc, [half, half, pr])
            parts.append(PartSpec(pid, pprim, subs, pemb))
            pid += 1
        if part_gap > 0:
            prim = Primitive.sphere(center, r)  # bounding sphere; the geometry is the pieces
        else:
            prim = Primitive.sphere(center, r) if kind == "sphere" else Primitive.box(center, np.full(3, half))
        axis = rng.normal(size=3)
        axis[2] *= 0.2
        axis /= np.linalg.norm(axis)
        objects.append(ObjectSpec(
            id=k, primitive=prim, parts=parts, base_token=base[k],
            vd_amplitude=rng.normal(size=d_tok) * vd_strength * token_scale, vd_axis=axis,
            label_embedding=c.copy(), color=rng.uniform(0.15, 0.95, size=3), label=classes[k],
            assembled=part_gap > 0,
        ))
    spec = SceneSpec(objects, bounds, seed)
    validate_scene(spec)
    return spec
