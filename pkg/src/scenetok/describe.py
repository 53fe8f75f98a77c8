"""Per-object token descriptions and the radar-ordered scene prompt.

Each object receives the same number of tokens, spread evenly over its parts
and then over each part's sub-parts. Tokens are rendered from seeded rays cast
through the supervision views; in adaptive mode rays seen close to the
object's canonical direction carry the view-dependent token.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import project, pixel_rays
from .decomp import SegmentGraph, nearest_centroid
from .scenegen import SCALES

logger = logging.getLogger(__name__)

MODES = ("all_vi", "all_vd", "even_split", "adaptive")
WIRE_VERSION = 1

PREAMBLE = (
    "The following images all belong to one 3D scene. Each image shows a single object of that scene, "
    "given as a set of feature tokens seen from many directions. Images are listed in a sweep around "
    "the scene center."
)


@dataclass
class DescribeConfig:
    W: int = 30000
    angular_threshold: float = np.pi / 4
    lam: float = 0.05
    bins: int = 20
    mode: str = "adaptive"
    ray_cap: int = 50  # rays cast per object, as a multiple of its quota
    batch: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")
        if not 0.0 < self.angular_threshold < np.pi + 1e-12:
            raise ValueError("angular threshold must lie in (0, pi]")
        if self.W < 1 or self.bins < 1 or self.ray_cap < 1:
            raise ValueError("W, bins and ray_cap must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DescribeConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# budget


def balanced_split(total: int, ids) -> dict:
    """Integer split as even as possible; remainders go to the lowest ids."""
    ids = sorted(ids)
    if not ids:
        return {}
    base, rem = divmod(total, len(ids))
    return {k: base + (1 if j < rem else 0) for j, k in enumerate(ids)}


@dataclass
class Quota:
    total: int
    parts: dict  # part id -> count
    subparts: dict  # part id -> {sub-part id -> count}

    def slots(self) -> list:
        """(part, sub-part, count) with None where a level has no segments."""
        if not self.parts:
            return [(None, None, self.total)]
        out = []
        for p, n in sorted(self.parts.items()):
            subs = self.subparts.get(p, {})
            if subs:
                out += [(p, s, m) for s, m in sorted(subs.items())]
            else:
                out.append((p, None, n))
        return out


def allocate_budget(W: int, graph: SegmentGraph) -> dict:
    objects = graph.ids("large")
    if not objects:
        raise ValueError("graph has no objects")
    if W < len(objects):
        raise ValueError(f"budget W={W} smaller than the number of objects {len(objects)}")
    per = W // len(objects)
    out = {}
    for o in objects:
        parts = balanced_split(per, graph.children("large", o))
        subs = {p: balanced_split(n, graph.children("medium", p)) for p, n in parts.items()}
        out[o] = Quota(per, parts, subs)
    return out


# ---------------------------------------------------------------------------
# canonical direction


def icosahedron_faces() -> np.ndarray:
    """Unit centers of the 20 faces, in a fixed lexicographic face order."""
    phi = (1.0 + 5 ** 0.5) / 2.0
    verts = []
    for a, b in itertools.product((-1.0, 1.0), repeat=2):
        verts += [(0.0, a, b * phi), (a, b * phi, 0.0), (b * phi, 0.0, a)]
    verts = np.array(sorted(verts))
    faces = [f for f in itertools.combinations(range(12), 3)
             if all(abs(np.linalg.norm(verts[i] - verts[j]) - 2.0) < 1e-9 for i, j in itertools.combinations(f, 2))]
    centers = np.stack([verts[list(f)].mean(axis=0) for f in faces])
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def bin_centers(bins: int) -> np.ndarray:
    if bins == 20:
        return icosahedron_faces()
    k = np.arange(bins) + 0.5
    z = 1.0 - 2.0 * k / bins
    th = np.pi * (1.0 + 5 ** 0.5) * k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def canonical_direction(dirs, bins: int = 20) -> np.ndarray:
    """Normalized mean of the fullest direction bin; lowest bin index on ties."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if not len(d):
        raise ValueError("object was never observed: no rays to bin")
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    idx = np.argmax(d @ bin_centers(bins).T, axis=1)
    best = int(np.argmax(np.bincount(idx, minlength=bins)))
    m = d[idx == best].mean(axis=0)
    return m / np.linalg.norm(m)


def angle_between(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = (a @ b) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b))
    return np.arccos(np.clip(c, -1.0, 1.0))


# ---------------------------------------------------------------------------
# descriptions


@dataclass
class DescToken:
    vector: np.ndarray  # float32
    tag: str  # "VI" | "VD"
    direction: np.ndarray
    part: int | None
    subpart: int | None
    point: np.ndarray | None = None  # surface point the token was rendered at; not serialized


@dataclass
class ObjectDescription:
    object_id: int
    tokens: list
    canonical: np.ndarray
    centroid: np.ndarray
    quota: int = 0
    fill_ratio: float = 1.0

    @property
    def complete(self) -> bool:
        return len(self.tokens) == self.quota


def _object_rays(fieldset, graph, obj, poses, rng, n):
    """n seeded rays aimed at the object's projected bounding disk."""
    seg = graph.segment("large", obj)
    view = rng.integers(0, len(poses), n)
    uv = np.empty((n, 2))
    for v in np.unique(view):
        pose = poses[v]
        m = view == v
        h, w = pose.resolution
        c_uv, z = project(pose, seg.position[None])
        rad = 1.2 * pose.focal * (seg.radius or 0.0) / max(float(z[0]), 1e-6) + 1.0
        ang = rng.uniform(0.0, 2.0 * np.pi, m.sum())
        r = rad * np.sqrt(rng.uniform(0.0, 1.0, m.sum()))
        pts = c_uv[0] + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        uv[m] = np.clip(pts, [0.0, 0.0], [w, h])
    o = np.empty((n, 3))
    d = np.empty((n, 3))
    for v in np.unique(view):
        m = view == v
        o[m], d[m] = pixel_rays(poses[v], uv[m])
    return o, d


def _observe(fieldset, graph, obj, poses, rng, n):
    """Render n rays; returns the ones whose object-scale assignment is ``obj``."""
    o, d = _object_rays(fieldset, graph, obj, poses, rng, n)
    r = fieldset.render(o, d, tokens=True, seg=False)
    keep = (r.opacity >= 0.5) & np.isfinite(r.depth)
    pts = r.surface_points(o, d)
    sel = np.zeros(n, dtype=bool)
    if keep.any():
        sel[keep] = nearest_centroid(graph, fieldset.embed_points(pts[keep], 2), "large") == obj
    return d[sel], pts[sel], r.t_vi[sel], r.t_vd[sel]


def _restricted(graph, fieldset, pts, scale, candidates):
    """Nearest centroid among ``candidates`` only (lowest id on ties)."""
    cands = sorted(candidates)
    cents = np.stack([graph.segment(scale, c).centroid for c in cands])
    e = fieldset.embed_points(pts, SCALES.index(scale))
    return np.array(cands)[((e[:, None] - cents[None]) ** 2).sum(-1).argmin(axis=1)]


def sample_object_description(fieldset, graph: SegmentGraph, obj: int, quota: Quota, poses,
                              cfg: DescribeConfig, canonical=None) -> ObjectDescription:
    rng = np.random.default_rng([cfg.seed, int(obj)])
    slots = quota.slots()
    want = {(p, s): n for p, s, n in slots}
    filled = {(p, s): [] for p, s, _ in slots}
    cap = cfg.ray_cap * max(quota.total, 1)
    seen_dirs, cast = [], 0
    while cast < cap and any(len(filled[k]) < want[k] for k in want):
        n = min(cfg.batch, cap - cast)
        d, pts, t_vi, t_vd = _observe(fieldset, graph, obj, poses, rng, n)
        cast += n
        if not len(d):
            continue
        seen_dirs.append(d)
        parts = graph.children("large", obj)
        p_ids = _restricted(graph, fieldset, pts, "medium", parts) if parts else np.full(len(d), None)
        s_ids = np.full(len(d), None, dtype=object)
        for p in set(p_ids.tolist()) - {None}:
            kids = graph.children("medium", p)
            m = p_ids == p
            if kids:
                s_ids[m] = _restricted(graph, fieldset, pts[m], "small", kids)
        if canonical is None and cfg.mode == "adaptive":
            # canonical direction from the first batch that observes the object
            canonical = canonical_direction(d, cfg.bins)
        for i in range(len(d)):
            key = (None if p_ids[i] is None else int(p_ids[i]), None if s_ids[i] is None else int(s_ids[i]))
            if key not in want or len(filled[key]) >= want[key]:
                continue
            slot = len(filled[key])
            if cfg.mode == "all_vi":
                tag = "VI"
            elif cfg.mode == "all_vd":
                tag = "VD"
            elif cfg.mode == "even_split":
                tag = "VI" if slot % 2 == 0 else "VD"
            else:
                tag = "VD" if angle_between(d[i], canonical) <= cfg.angular_threshold else "VI"
            vec = (t_vd if tag == "VD" else t_vi)[i].astype(np.float32)
            filled[key].append(DescToken(vec, tag, d[i].copy(), key[0], key[1], pts[i].copy()))
    if canonical is None:
        if not seen_dirs:
            raise ValueError(f"object {obj} was never observed")
        canonical = canonical_direction(np.concatenate(seen_dirs), cfg.bins)
    tokens = [t for p, s, _ in slots for t in filled[(p, s)]]
    fill = len(tokens) / max(quota.total, 1)
    if fill < 1.0:
        logger.warning("object %d description only %.0f%% filled after %d rays", obj, 100 * fill, cast)
    seg = graph.segment("large", obj)
    return ObjectDescription(int(obj), tokens, canonical, np.asarray(seg.position, dtype=np.float64),
                             quota.total, fill)


# ---------------------------------------------------------------------------
# ordering and prompt


def radar_keys(centroids, center, lam: float) -> np.ndarray:
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 3) - np.asarray(center, dtype=np.float64)
    r = np.hypot(c[:, 0], c[:, 1])
    ang = np.where(r > 0, np.mod(np.arctan2(c[:, 1], c[:, 0]), 2.0 * np.pi), 0.0)
    if np.any(r == 0):
        logger.warning("object centroid on the sweep axis; polar angle set to 0")
    rmax = r.max()
    return ang + lam * (r / rmax if rmax > 0 else r)


def radar_order(centroids, center, lam: float = 0.05) -> list:
    """Permutation sorting objects by polar angle around +z, radius as a light secondary key."""
    keys = radar_keys(centroids, center, lam)
    if not len(keys):
        raise ValueError("nothing to order")
    return np.argsort(keys, kind="stable").tolist()


@dataclass
class ScenePrompt:
    objects: list  # [(virtual id, ObjectDescription)] in sweep order
    question: str
    scene_id: str = "scene"
    meta: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "scene_id": self.scene_id,
            "question": self.question,
            "objects": [{
                "virtual_id": vid,
                "object_id": int(desc.object_id),
                "centroid": [float(x) for x in desc.centroid],
                "tokens": [{"v": [float(x) for x in t.vector], "tag": t.tag} for t in desc.tokens],
            } for vid, desc in self.objects],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_wire(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_wire(cls, d: dict) -> "ScenePrompt":
        if d.get("v") != WIRE_VERSION:
            raise ValueError(f"unsupported prompt wire version {d.get('v')!r}")
        objs = []
        for o in d["objects"]:
            toks = [DescToken(np.asarray(t["v"], dtype=np.float32), t["tag"], None, None, None) for t in o["tokens"]]
            desc = ObjectDescription(int(o["object_id"]), toks, None, np.asarray(o["centroid"], dtype=np.float64),
                                     len(toks), 1.0)
            objs.append((int(o["virtual_id"]), desc))
        return cls(objs, d["question"], d.get("scene_id", "scene"))

    @classmethod
    def loads(cls, s: str) -> "ScenePrompt":
        return cls.from_wire(json.loads(s))

    def object_for(self, virtual_id: int) -> ObjectDescription:
        for vid, desc in self.objects:
            if vid == virtual_id:
                return desc
        raise KeyError(f"unknown virtual id {virtual_id}")

    def text(self) -> str:
        """Text skeleton with one image placeholder per object, for a chat-style model."""
        lines = [PREAMBLE, ""]
        for vid, desc in self.objects:
            lines.append(f"Image {vid}: <image>  ({len(desc.tokens)} tokens)")
        lines += ["", f"Question: {self.question}"]
        return "\n".join(lines)


def assemble_prompt(descriptions, question: str, scene_id: str = "scene") -> ScenePrompt:
    descriptions = list(descriptions)
    if not descriptions:
        raise ValueError("prompt needs at least one object description")
    return ScenePrompt([(k + 1, d) for k, d in enumerate(descriptions)], question, scene_id)


def describe_scene(fieldset, graph: SegmentGraph, poses, cfg: DescribeConfig, question: str = "",
                   scene_id: str = "scene") -> ScenePrompt:
    quotas = allocate_budget(cfg.W, graph)
    descs = [sample_object_description(fieldset, graph, o, q, poses, cfg) for o, q in quotas.items()]
    cents = np.stack([d.centroid for d in descs])
    order = radar_order(cents, cents.mean(axis=0), cfg.lam)
    for d in descs:
        graph.objects[d.object_id] = {"canonical_direction": [float(x) for x in d.canonical],
                                      "centroid": [float(x) for x in d.centroid], "fill_ratio": float(d.fill_ratio)}
    return assemble_prompt([descs[i] for i in order], question, scene_id)
