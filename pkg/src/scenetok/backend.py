"""Answer backends over a ScenePrompt, plus grounding and point-cloud export.

``answer_oracle`` is a cosine-similarity stand-in for a vision-language model
that makes grounding measurable; ``remote_answer`` posts the same prompt to an
HTTP endpoint serving a real model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .camera import pixel_grid, pixel_rays
from .decomp import SegmentGraph, nearest_centroid
from .describe import ScenePrompt

logger = logging.getLogger(__name__)

QUERY_KINDS = ("find_object_by_feature", "count_objects_by_feature", "nearest_object_to", "exists")
VOXEL = 1e-2


# ---------------------------------------------------------------------------
# structured oracle


@dataclass
class StructuredQuery:
    kind: str
    embedding: np.ndarray | None = None
    reference: int | None = None  # object id, for nearest_object_to
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.kind == "nearest_object_to":
            if self.reference is None:
                raise ValueError("nearest_object_to needs a reference object id")
        elif self.embedding is None:
            raise ValueError(f"{self.kind} needs a query embedding")
        else:
            self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def to_wire(self) -> dict:
        d = {"kind": self.kind, "threshold": float(self.threshold)}
        if self.embedding is not None:
            d["embedding"] = [float(x) for x in self.embedding]
        if self.reference is not None:
            d["reference"] = int(self.reference)
        return d


@dataclass
class Answer:
    kind: str
    value: object  # object id, count or bool
    virtual_id: int | None = None


def object_feature(desc) -> np.ndarray:
    """Mean token, VI-tagged tokens preferred; rows are sorted first so token order cannot matter."""
    toks = [t for t in desc.tokens if t.tag == "VI"] or list(desc.tokens)
    if not toks:
        raise ValueError(f"object {desc.object_id} has no tokens")
    m = np.stack([np.asarray(t.vector, dtype=np.float64) for t in toks])
    m = m[np.lexsort(m.T[::-1])]
    return m.sum(axis=0) / len(m)


def _cosines(feats: np.ndarray, q: np.ndarray) -> np.ndarray:
    denom = np.linalg.norm(feats, axis=1) * np.linalg.norm(q)
    return np.where(denom > 0, feats @ q / np.where(denom > 0, denom, 1.0), 0.0)


def answer_oracle(prompt: ScenePrompt, q: StructuredQuery) -> Answer:
    if not prompt.objects:
        raise ValueError("empty prompt")
    vids = [v for v, _ in prompt.objects]
    descs = [d for _, d in prompt.objects]
    if q.kind == "nearest_object_to":
        ref = [k for k, d in enumerate(descs) if d.object_id == q.reference]
        if not ref:
            raise ValueError(f"reference object {q.reference} not in prompt")
        c = np.stack([d.centroid for d in descs])
        dist = np.linalg.norm(c - c[ref[0]], axis=1)
        dist[ref[0]] = np.inf
        k = int(np.argmin(dist))
        return Answer(q.kind, descs[k].object_id, vids[k])
    cos = _cosines(np.stack([object_feature(d) for d in descs]), q.embedding)
    if q.kind == "find_object_by_feature":
        k = int(np.argmax(cos))
        return Answer(q.kind, descs[k].object_id, vids[k])
    hits = cos >= q.threshold
    if q.kind == "count_objects_by_feature":
        return Answer(q.kind, int(hits.sum()))
    return Answer(q.kind, bool(hits.any()))


# ---------------------------------------------------------------------------
# remote endpoint


class TransportError(RuntimeError):
    """Base class for failures talking to a remote answer endpoint."""


class EndpointTimeout(TransportError):
    pass


class EndpointNotFound(TransportError):
    pass


class EndpointStatusError(TransportError):
    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint answered HTTP {status}")
        self.status = status
        self.body = body


class ProtocolError(TransportError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class ConnectError(TransportError):
    pass


@dataclass
class RemoteAnswer:
    answer: str
    chosen_virtual_id: int | None = None


def request_body(prompt: ScenePrompt, query: StructuredQuery | None = None) -> bytes:
    if query is None:
        return prompt.dumps().encode()
    wire = prompt.to_wire()
    wire["query"] = query.to_wire()
    return json.dumps(wire, sort_keys=True, separators=(",", ":")).encode()


def remote_answer(prompt: ScenePrompt, endpoint: str, timeout: float = 30.0, query: StructuredQuery | None = None,
                  client: httpx.Client | None = None) -> RemoteAnswer:
    """POST the wire-format prompt; no retries. Raises a TransportError subclass on failure."""
    body = request_body(prompt, query)
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(endpoint, content=body, headers={"content-type": "application/json"}, timeout=timeout)
    except httpx.TimeoutException as exc:
        raise EndpointTimeout(f"no reply from {endpoint} within {timeout}s") from exc
    except httpx.TransportError as exc:
        raise ConnectError(f"could not reach {endpoint}: {exc}") from exc
    finally:
        if own:
            client.close()
    if resp.status_code == 404:
        raise EndpointNotFound(f"{endpoint} returned 404")
    if not 200 <= resp.status_code < 300:
        raise EndpointStatusError(resp.status_code, resp.text)
    raw = resp.text
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"reply is not JSON: {exc}", raw) from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("answer"), str):
        raise ProtocolError("reply lacks a string 'answer' field", raw)
    vid = payload.get("chosen_virtual_id")
    if vid is not None and (isinstance(vid, bool) or not isinstance(vid, int)):
        raise ProtocolError("chosen_virtual_id must be an integer", raw)
    return RemoteAnswer(payload["answer"], vid)


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class ViewCloud:
    """Expected-depth surface points of all views, merged on a voxel grid."""
    points: np.ndarray  # (P, 3) per-voxel mean
    pixel_point: list  # per view: (H*W,) point index, -1 where the pixel saw nothing
    renders: list  # per view RayRender
    shape: tuple


def surface_cloud(fieldset, poses, voxel: float = VOXEL, min_opacity: float = 0.5, seg: bool = True) -> ViewCloud:
    h, w = poses[0].resolution
    grid = pixel_grid(h, w)
    renders, pts, owner = [], [], []
    for v, pose in enumerate(poses):
        o, d = pixel_rays(pose, grid)
        r = fieldset.render(o, d, tokens=False, seg=seg)
        renders.append(r)
        ok = (r.opacity >= min_opacity) & np.isfinite(r.depth)
        p = r.surface_points(o, d)
        pts.append(np.where(ok[:, None], p, np.nan))
        owner.append(ok)
    allp = np.concatenate(pts)
    ok = np.concatenate(owner)
    keys = np.floor(allp[ok] / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, allp[ok])
    counts = np.bincount(inv, minlength=len(uniq))
    idx = np.full(len(allp), -1)
    idx[ok] = inv
    per_view = [idx[k * h * w:(k + 1) * h * w] for k in range(len(poses))]
    return ViewCloud(sums / counts[:, None], per_view, renders, (h, w))


def _pool(cloud: ViewCloud, values: list, dim: int) -> np.ndarray:
    """Average per-pixel values over all pixels that landed in each point."""
    acc = np.zeros((len(cloud.points), dim))
    cnt = np.zeros(len(cloud.points))
    for idx, val in zip(cloud.pixel_point, values):
        ok = idx >= 0
        np.add.at(acc, idx[ok], val[ok])
        np.add.at(cnt, idx[ok], 1.0)
    return acc / np.maximum(cnt, 1.0)[:, None]


@dataclass
class GroundingResult:
    virtual_id: int
    object_id: int
    points: np.ndarray
    labels: np.ndarray  # (P,) bool
    point_objects: np.ndarray  # (P,) object id per point
    masks: list = field(default_factory=list)  # per view (H, W) bool


def ground(graph: SegmentGraph, fieldset, virtual_id: int, prompt: ScenePrompt, poses,
           rule: str = "feature", cloud: ViewCloud | None = None) -> GroundingResult:
    """Binary point cloud for the object a backend picked.

    ``rule="feature"`` averages each point's object-scale embedding over the
    views that see it, then assigns the nearest centroid; ``"majority"`` takes
    the most frequent per-view label (lowest id on ties).
    """
    obj = prompt.object_for(virtual_id).object_id
    if obj not in graph.ids("large"):
        raise ValueError(f"object {obj} not in the segment graph")
    cloud = cloud or surface_cloud(fieldset, poses)
    h, w = cloud.shape
    masks, view_labels = [], []
    for idx, r in zip(cloud.pixel_point, cloud.renders):
        lab = np.full(len(idx), -1)
        ok = idx >= 0
        if ok.any():
            lab[ok] = nearest_centroid(graph, r.seg[2][ok], "large")
        view_labels.append(lab)
        masks.append((lab == obj).reshape(h, w))
    if rule == "feature":
        pooled = _pool(cloud, [r.seg[2] for r in cloud.renders], cloud.renders[0].seg.shape[2])
        point_obj = nearest_centroid(graph, pooled, "large")
    elif rule == "majority":
        ids = graph.ids("large")
        votes = np.zeros((len(cloud.points), len(ids)))
        col = {o: k for k, o in enumerate(sorted(ids))}
        for idx, lab in zip(cloud.pixel_point, view_labels):
            ok = idx >= 0
            np.add.at(votes, (idx[ok], [col[x] for x in lab[ok]]), 1.0)
        point_obj = np.array(sorted(ids))[votes.argmax(axis=1)]
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return GroundingResult(virtual_id, obj, cloud.points, point_obj == obj, point_obj, masks)


@dataclass
class LabeledCloud:
    points: np.ndarray
    labels: np.ndarray  # (P,) index into the dictionary keys
    names: list  # dictionary keys in index order
    scale: np.ndarray  # (P,) scale index that won (all-scale mode) or the requested one


def export_segmentation_pointcloud(graph: SegmentGraph | None, fieldset, poses, scale, dictionary: dict,
                                   cloud: ViewCloud | None = None) -> LabeledCloud:
    """Per-point label by cosine against ``dictionary``; ``scale`` is 0..2 or "all"."""
    if not dictionary:
        raise ValueError("label dictionary is empty")
    names = list(dictionary)
    table = np.stack([np.asarray(dictionary[k], dtype=np.float64) for k in names])
    table = table / np.linalg.norm(table, axis=1, keepdims=True)
    cloud = cloud or surface_cloud(fieldset, poses)
    scales = [0, 1, 2] if scale == "all" else [int(scale)]
    best = np.full(len(cloud.points), -np.inf)
    labels = np.zeros(len(cloud.points), dtype=np.int64)
    won = np.zeros(len(cloud.points), dtype=np.int64)
    for s in scales:
        emb = _pool(cloud, [r.label[s] for r in cloud.renders], table.shape[1])
        n = np.linalg.norm(emb, axis=1, keepdims=True)
        cos = (emb / np.where(n > 0, n, 1.0)) @ table.T
        top = cos.max(axis=1)
        better = top > best
        labels[better] = cos.argmax(axis=1)[better]
        won[better] = s
        best = np.maximum(best, top)
    return LabeledCloud(cloud.points, labels, names, won)


def write_ply(path, points, labels) -> Path:
    """ASCII PLY with float xyz and an integer ``label`` per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}", "property float x", "property float y",
              "property float z", "property int label", "end_header"]
    rows = [f"{x:.6f} {y:.6f} {z:.6f} {int(lab)}" for (x, y, z), lab in zip(points, labels)]
    path = Path(path)
    path.write_text("\n".join(header + rows) + "\n")
    return path


def read_ply(path):
    lines = Path(path).read_text().splitlines()
    start = lines.index("end_header") + 1
    n = int(next(line.split()[-1] for line in lines if line.startswith("element vertex")))
    rows = np.array([line.split() for line in lines[start:start + n]], dtype=np.float64).reshape(-1, 4)
    return rows[:, :3], rows[:, 3].astype(np.int64)
