"""From segment embeddings to a three-level segment graph.

Pipeline: render a shared batch of rays at all scales, cluster each scale with
HDBSCAN, refine (drop / split / merge), link every fine segment to the coarse
segment it co-occurs with most, then store confidence-weighted centroids so
arbitrary 3D points can be assigned by nearest centroid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.cluster import HDBSCAN

from .camera import pixel_grid, pixel_rays
from .scenegen import SCALES

logger = logging.getLogger(__name__)

UNASSIGNED = -1
CLUSTER_RAYS = 3 * 8192


@dataclass(frozen=True)
class ClusterParams:
    min_cluster_size: int
    min_samples: int
    cluster_selection_epsilon: float

    def __post_init__(self):
        if self.min_cluster_size < 2 or self.min_samples < 1 or self.cluster_selection_epsilon <= 0:
            raise ValueError(f"cluster parameters must be positive (min_cluster_size >= 2): {self}")


DEFAULT_PARAMS = {
    "small": ClusterParams(10, 3, 0.01),
    "medium": ClusterParams(30, 5, 0.05),
    "large": ClusterParams(50, 10, 0.1),
}


@dataclass(frozen=True)
class RefineParams:
    min_members: int = 10
    variance_percentile: float = 85.0
    merge_cosine: float = 0.85
    split_cosine: float = 0.75
    margin: float = 1.0  # contrastive margin, scales embedding-centroid similarity


@dataclass
class ClusterResult:
    labels: np.ndarray
    confidence: np.ndarray


def cluster_scale(embeddings, params: ClusterParams) -> ClusterResult:
    """HDBSCAN labels (noise -1) and membership probabilities.

    Cluster ids are renumbered in order of first appearance so they depend
    only on the input order, not on library internals.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n < params.min_cluster_size:
        return ClusterResult(np.full(n, -1), np.zeros(n))
    hd = HDBSCAN(min_cluster_size=params.min_cluster_size, min_samples=min(params.min_samples, n),
                 cluster_selection_epsilon=params.cluster_selection_epsilon, allow_single_cluster=True,
                 copy=True)
    raw = hd.fit_predict(x)
    labels = np.full(n, -1)
    remap = {}
    for i, r in enumerate(raw):
        if r >= 0:
            labels[i] = remap.setdefault(int(r), len(remap))
    conf = np.where(labels >= 0, np.nan_to_num(hd.probabilities_), 0.0)
    return ClusterResult(labels, conf)


def compute_centroids(values, labels, confidences):
    """Confidence-weighted means per non-noise label.

    Returns (ids, centroids, flagged) where ``flagged`` lists ids whose member
    confidences summed to zero and fell back to the plain mean.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    conf = np.asarray(confidences, dtype=np.float64)
    ids = np.unique(labels[labels >= 0])
    if not len(ids):
        raise ValueError("no non-noise labels to take centroids of")
    cents = np.empty((len(ids), values.shape[1]))
    flagged = []
    for j, c in enumerate(ids):
        m = labels == c
        wsum = conf[m].sum()
        if wsum > 0:
            cents[j] = conf[m] @ values[m] / wsum
        else:
            cents[j] = values[m].mean(axis=0)
            flagged.append(int(c))
    return ids, cents, flagged


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# hierarchy


def parent_map(fine, coarse, coarse_sizes: dict | None = None) -> dict:
    """parent[f] = coarse label co-occurring most with f (noise excluded).

    Ties go to the larger coarse segment, then the lower id. Fine segments
    without any co-occurring coarse label map to UNASSIGNED.
    """
    fine = np.asarray(fine)
    coarse = np.asarray(coarse)
    if coarse_sizes is None:
        cids, counts = np.unique(coarse[coarse >= 0], return_counts=True)
        coarse_sizes = dict(zip(cids.tolist(), counts.tolist()))
    out = {}
    for f in np.unique(fine[fine >= 0]).tolist():
        c = coarse[(fine == f) & (coarse >= 0)]
        if not len(c):
            out[f] = UNASSIGNED
            continue
        ids, counts = np.unique(c, return_counts=True)
        best = max(zip(ids.tolist(), counts.tolist()), key=lambda t: (t[1], coarse_sizes.get(t[0], 0), -t[0]))
        out[f] = best[0]
    return out


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefineResult:
    labels: dict  # scale -> (N,) labels after refinement
    variance_threshold: dict  # scale -> frozen threshold used by rule (i)
    log: list = field(default_factory=list)


def _sqdev(lab, members_mask, conf):
    vals = lab[members_mask]
    w = conf[members_mask]
    cent = (w @ vals / w.sum()) if w.sum() > 0 else vals.mean(axis=0)
    return np.sum((vals - cent) ** 2, axis=1)


def _trimmed_variance(dev: np.ndarray, pct: float) -> float:
    return float(dev[dev <= np.percentile(dev, pct)].mean())


def _variance_threshold(labels, lab, conf, pct) -> float:
    devs = [_sqdev(lab, labels == c, conf) for c in np.unique(labels[labels >= 0])]
    if not devs:
        return np.inf
    return float(np.percentile(np.concatenate(devs), pct))


def _segment_ok(mask, lab, conf, thr, p: RefineParams) -> bool:
    if mask.sum() < p.min_members:
        return False
    return _trimmed_variance(_sqdev(lab, mask, conf), p.variance_percentile) <= thr


def _label_centroid(lab, mask, conf):
    w = conf[mask]
    return (w @ lab[mask] / w.sum()) if w.sum() > 0 else lab[mask].mean(axis=0)


def _components(n: int, edges) -> list:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def _split_groups(coarse_id, fine, coarse, fine_lab, conf, p: RefineParams):
    """Children of ``coarse_id`` grouped by label-cosine linkage (>= split_cosine)."""
    pm = parent_map(fine, coarse)
    kids = sorted(f for f, c in pm.items() if c == coarse_id)
    if len(kids) < 2:
        return [kids]
    cents = [_label_centroid(fine_lab, fine == k, conf) for k in kids]
    edges = [(i, j) for i in range(len(kids)) for j in range(i + 1, len(kids))
             if _cos(cents[i], cents[j]) >= p.split_cosine]
    return [[kids[i] for i in comp] for comp in _components(len(kids), edges)]


def _try_split(s, c, labels, lab, emb, confs, thr, p, next_id):
    """Split coarse segment c at scale index s if its children fall apart. Returns new labels or None."""
    fine, coarse = labels[s - 1], labels[s]
    conf = confs[s]
    groups = _split_groups(c, fine, coarse, lab[s - 1], confs[s - 1], p)
    if len(groups) < 2:
        return None
    members = coarse == c
    piece = np.full(len(coarse), -1)
    for g, kids in enumerate(groups):
        piece[members & np.isin(fine, kids)] = g
    # members without a grouped child join the piece with the nearest embedding centroid
    cents = np.stack([emb[s][piece == g].mean(axis=0) for g in range(len(groups))])
    rest = np.nonzero(members & (piece < 0))[0]
    if len(rest):
        d = np.linalg.norm(emb[s][rest, None] - cents[None], axis=-1)
        piece[rest] = d.argmin(axis=1)
    for g in range(len(groups)):
        if not _segment_ok(piece == g, lab[s], conf, thr, p):
            return None
    out = coarse.copy()
    for g in range(1, len(groups)):
        out[piece == g] = next_id + g - 1
    return out


def _similarity(a, b, labels_s, lab_s, emb_s, conf, p: RefineParams) -> float:
    ma, mb = labels_s == a, labels_s == b
    lc = _cos(_label_centroid(lab_s, ma, conf), _label_centroid(lab_s, mb, conf))
    ea = _label_centroid(emb_s, ma, conf)
    eb = _label_centroid(emb_s, mb, conf)
    # contrastive embeddings are unnormalized: similarity is 1 - distance / margin
    es = 1.0 - float(np.linalg.norm(ea - eb)) / p.margin
    return max(lc, es)


def _merge_scale(s, labels, lab, emb, confs, thr, p: RefineParams, log) -> bool:
    conf = confs[s]
    changed = False
    rejected = set()
    while True:
        ids = np.unique(labels[s][labels[s] >= 0]).tolist()
        cands = []
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if (a, b) in rejected:
                    continue
                sim = _similarity(a, b, labels[s], lab[s], emb[s], conf, p)
                if sim > p.merge_cosine:
                    cands.append((-sim, a, b))
        if not cands:
            return changed
        cands.sort()
        done = False
        for _, a, b in cands:
            trial = labels[s].copy()
            trial[trial == b] = a
            ok = _segment_ok(trial == a, lab[s], conf, thr, p)
            if ok and s > 0:
                ok = len(_split_groups(a, labels[s - 1], trial, lab[s - 1], confs[s - 1], p)) < 2
            if ok:
                labels[s] = trial
                log.append(("merge", SCALES[s], a, b))
                changed = done = True
                break
            rejected.add((a, b))
        if not done:
            return changed


def refine_segments(labels: dict, label_emb: dict, seg_emb: dict, confidences: dict,
                    params: RefineParams = RefineParams(), variance_threshold: dict | None = None) -> RefineResult:
    """Drop noisy or tiny segments, split under-segmented ones, merge duplicates.

    ``labels``, ``label_emb``, ``seg_emb`` and ``confidences`` are keyed by
    scale name over one shared ray set. Rule (i) thresholds are computed on the
    input unless given; pass the returned ones back to re-run with the same
    thresholds. Splits and merges are guarded so they never produce a segment
    rule (i) would drop, and are repeated until nothing changes.
    """
    lab = [np.asarray(label_emb[s], dtype=np.float64) for s in SCALES]
    emb = [np.asarray(seg_emb[s], dtype=np.float64) for s in SCALES]
    cur = [np.asarray(labels[s]).copy() for s in SCALES]
    conf_s = [np.asarray(confidences[s], dtype=np.float64) for s in SCALES]
    if variance_threshold is None:
        variance_threshold = {s: _variance_threshold(cur[i], lab[i], conf_s[i], params.variance_percentile)
                              for i, s in enumerate(SCALES)}
    thr = [variance_threshold[s] for s in SCALES]
    log = []
    # (i) discard
    for i, s in enumerate(SCALES):
        for c in np.unique(cur[i][cur[i] >= 0]).tolist():
            if not _segment_ok(cur[i] == c, lab[i], conf_s[i], thr[i], params):
                cur[i][cur[i] == c] = -1
                log.append(("drop", s, c))
    if all(not np.any(c >= 0) for c in cur):
        logger.warning("refinement would remove every segment; returning input labels")
        return RefineResult({s: np.asarray(labels[s]).copy() for s in SCALES}, variance_threshold,
                            [("abort",)])
    # (ii) split, (iii) merge, to a fixed point
    for _ in range(10):
        changed = False
        for i in (1, 2):
            for c in np.unique(cur[i][cur[i] >= 0]).tolist():
                nxt = int(cur[i].max()) + 1
                out = _try_split(i, c, cur, lab, emb, conf_s, thr[i], params, nxt)
                if out is not None:
                    cur[i] = out
                    log.append(("split", SCALES[i], c))
                    changed = True
        for i in range(3):
            changed |= _merge_scale(i, cur, lab, emb, conf_s, thr[i], params, log)
        if not changed:
            break
    return RefineResult({s: cur[i] for i, s in enumerate(SCALES)}, variance_threshold, log)


# ---------------------------------------------------------------------------
# graph


@dataclass
class Segment:
    id: int
    centroid: np.ndarray  # segment-embedding centroid
    label_centroid: np.ndarray
    count: int
    confidence_mean: float
    confidence_min: float
    position: np.ndarray | None = None  # mean surface point of member rays
    radius: float | None = None  # max member distance from ``position``

    def to_dict(self) -> dict:
        d = {"id": int(self.id), "centroid": [float(v) for v in self.centroid],
             "label_centroid": [float(v) for v in self.label_centroid], "count": int(self.count),
             "confidence": {"mean": float(self.confidence_mean), "min": float(self.confidence_min)}}
        if self.position is not None:
            d["position"] = [float(v) for v in self.position]
            d["radius"] = float(self.radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        pos = d.get("position")
        return cls(int(d["id"]), np.asarray(d["centroid"], dtype=np.float64),
                   np.asarray(d["label_centroid"], dtype=np.float64), int(d["count"]),
                   float(d["confidence"]["mean"]), float(d["confidence"]["min"]),
                   None if pos is None else np.asarray(pos, dtype=np.float64), d.get("radius"))


@dataclass
class SegmentGraph:
    segments: dict  # scale -> list[Segment] sorted by id
    parents: dict  # "small" / "medium" -> {id: parent id}
    objects: dict = field(default_factory=dict)  # large id -> metadata filled by later stages
    flags: list = field(default_factory=list)

    def ids(self, scale: str) -> list:
        return [s.id for s in self.segments[scale]]

    def segment(self, scale: str, ident: int) -> Segment:
        for s in self.segments[scale]:
            if s.id == ident:
                return s
        raise KeyError(f"no {scale} segment {ident}")

    def centroids(self, scale: str) -> np.ndarray:
        return np.stack([s.centroid for s in self.segments[scale]])

    def children(self, scale: str, ident: int) -> list:
        finer = SCALES[SCALES.index(scale) - 1]
        return sorted(f for f, c in self.parents[finer].items() if c == ident)

    def object_of(self, scale: str, ident: int) -> int:
        while scale != "large":
            ident = self.parents[scale][ident]
            scale = SCALES[SCALES.index(scale) + 1]
            if ident == UNASSIGNED:
                return UNASSIGNED
        return ident

    def validate(self) -> None:
        for i, scale in enumerate(SCALES):
            ids = self.ids(scale)
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {scale} ids")
            if scale == "large":
                continue
            coarse = set(self.ids(SCALES[i + 1])) | {UNASSIGNED}
            if set(self.parents[scale]) != set(ids):
                raise ValueError(f"{scale} segments without exactly one parent")
            if not set(self.parents[scale].values()) <= coarse:
                raise ValueError(f"{scale} parent outside the next coarser scale")

    def to_dict(self) -> dict:
        return {
            "format": "segment-graph", "version": 1,
            "nodes": {s: [seg.to_dict() for seg in self.segments[s]] for s in SCALES},
            "edges": {s: [[int(f), int(c)] for f, c in sorted(self.parents[s].items())] for s in ("small", "medium")},
            "objects": {str(k): v for k, v in sorted(self.objects.items())},
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentGraph":
        segs = {s: [Segment.from_dict(x) for x in d["nodes"][s]] for s in SCALES}
        parents = {s: {int(f): int(c) for f, c in d["edges"][s]} for s in ("small", "medium")}
        return cls(segs, parents, {int(k): v for k, v in d.get("objects", {}).items()}, list(d.get("flags", [])))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "SegmentGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_hierarchy(labels: dict, seg_emb: dict, label_emb: dict, confidences: dict,
                    points: np.ndarray | None = None) -> SegmentGraph:
    """Segments with centroids per scale plus co-occurrence parent edges."""
    segments, flags = {}, []
    for s in SCALES:
        lab = np.asarray(labels[s])
        conf = np.asarray(confidences[s], dtype=np.float64)
        segs = []
        if np.any(lab >= 0):
            ids, cents, flagged = compute_centroids(seg_emb[s], lab, conf)
            _, lcents, _ = compute_centroids(label_emb[s], lab, conf)
            flags += [{"kind": "zero-confidence", "scale": s, "id": int(f)} for f in flagged]
            for j, c in enumerate(ids.tolist()):
                m = lab == c
                pos = rad = None
                if points is not None:
                    pts = np.asarray(points, dtype=np.float64)[m]
                    pos = pts.mean(axis=0)
                    rad = float(np.linalg.norm(pts - pos, axis=1).max())
                segs.append(Segment(c, cents[j], lcents[j], int(m.sum()), float(conf[m].mean()),
                                    float(conf[m].min()), pos, rad))
        segments[s] = segs
    parents = {}
    for i, s in enumerate(SCALES[:2]):
        coarse = np.asarray(labels[SCALES[i + 1]])
        sizes = {seg.id: seg.count for seg in segments[SCALES[i + 1]]}
        parents[s] = parent_map(labels[s], coarse, sizes)
        flags += [{"kind": "unassigned", "scale": s, "id": int(f)} for f, c in parents[s].items() if c == UNASSIGNED]
    graph = SegmentGraph(segments, parents, {}, flags)
    graph.validate()
    return graph


def nearest_centroid(graph: SegmentGraph, embeddings, scale: str) -> np.ndarray:
    """Segment id of the nearest centroid; argmin picks the lower id on exact ties."""
    segs = graph.segments[scale]
    if not segs:
        raise ValueError(f"graph has no {scale} segments")
    order = np.argsort([s.id for s in segs], kind="stable")
    cents = np.stack([segs[k].centroid for k in order])
    e = np.asarray(embeddings, dtype=np.float64).reshape(-1, cents.shape[1])
    d2 = ((e[:, None, :] - cents[None]) ** 2).sum(-1)
    return np.array([segs[k].id for k in order])[d2.argmin(axis=1)]


def assign_points(graph: SegmentGraph, fieldset, x, scale: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = fieldset.outside(x)
    if np.any(out):
        logger.warning("%d query points outside the scene bounds were clamped", int(out.sum()))
    return nearest_centroid(graph, fieldset.embed_points(x, SCALES.index(scale)), scale)


def assign_point(graph: SegmentGraph, fieldset, x, scale: str) -> int:
    return int(assign_points(graph, fieldset, x, scale)[0])


# ---------------------------------------------------------------------------
# end to end


@dataclass
class RaySet:
    origins: np.ndarray
    dirs: np.ndarray
    points: np.ndarray  # expected-depth surface points
    seg: np.ndarray  # (3, N, D_seg)
    label: np.ndarray  # (3, N, D_lab)


def sample_rays(fieldset, poses, n_rays: int, seed: int = 0, min_opacity: float = 0.5) -> RaySet:
    """Seeded pixel rays across views, rendered, keeping those that hit a surface."""
    if getattr(fieldset, "seg", True) is None:
        raise ValueError("fieldset has no segmentation field; train it with the seg stage first")
    rng = np.random.default_rng(seed)
    h, w = poses[0].resolution
    view = rng.integers(0, len(poses), n_rays)
    pix = rng.integers(0, h * w, n_rays)
    grid = pixel_grid(h, w)
    o = np.empty((n_rays, 3))
    d = np.empty((n_rays, 3))
    for v in np.unique(view):
        m = view == v
        o[m], d[m] = pixel_rays(poses[v], grid[pix[m]])
    r = fieldset.render(o, d, tokens=False, seg=True)
    keep = (r.opacity >= min_opacity) & np.isfinite(r.depth)
    return RaySet(o[keep], d[keep], r.surface_points(o, d)[keep], r.seg[:, keep], r.label[:, keep])


def decompose(fieldset, poses, n_rays: int = CLUSTER_RAYS, seed: int = 0, params: dict | None = None,
              refine: RefineParams | None = RefineParams(), rays: RaySet | None = None) -> SegmentGraph:
    params = params or DEFAULT_PARAMS
    rays = rays if rays is not None else sample_rays(fieldset, poses, n_rays, seed)
    labels, conf = {}, {}
    for i, s in enumerate(SCALES):
        res = cluster_scale(rays.seg[i], params[s])
        labels[s], conf[s] = res.labels, res.confidence
    seg = {s: rays.seg[i] for i, s in enumerate(SCALES)}
    lab = {s: rays.label[i] for i, s in enumerate(SCALES)}
    thresholds = None
    if refine is not None:
        rr = refine_segments(labels, lab, seg, conf, refine)
        labels, thresholds = rr.labels, rr.variance_threshold
    graph = build_hierarchy(labels, seg, lab, conf, rays.points)
    if thresholds is not None:
        graph.flags.append({"kind": "variance-threshold", **{s: float(v) for s, v in thresholds.items()}})
    return graph
