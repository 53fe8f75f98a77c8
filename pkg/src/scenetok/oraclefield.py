"""Analytic stand-in for a fitted FieldSet.

Exposes the query surface used downstream of training (render, embed_points,
label_points, outside) but answers from the SceneOracle, so decomposition,
description and grounding can be checked at "oracle-mask quality".
"""

from __future__ import annotations

import numpy as np

from .fields import RayRender
from .scenegen import SCALES, SceneOracle


class OracleField:
    def __init__(self, oracle: SceneOracle, d_seg: int = 16, margin: float = 1.0, seed: int = 0):
        self.oracle = oracle
        self.bounds = np.asarray(oracle.bounds, dtype=np.float64).reshape(2, 3)
        self.d_tok = oracle.d_tok
        self.d_seg = d_seg
        self.margin = margin
        self.seed = seed
        self.d_lab = len(next(iter(oracle.label_table("large").values())))
        self._codes = {}

    def _code(self, scale: int, ident: int) -> np.ndarray:
        key = (scale, int(ident))
        if key not in self._codes:
            v = np.random.default_rng([self.seed, scale, int(ident) + 1]).normal(size=self.d_seg)
            # random directions at radius 2m: distinct ids sit about 2.8m apart
            self._codes[key] = 2.0 * self.margin * v / np.linalg.norm(v)
        return self._codes[key]

    def _ids(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return self.oracle.instance_ids(x, self.oracle.nearest_object(x))

    def embed_points(self, x, scale: int) -> np.ndarray:
        ids = self._ids(x)[:, scale]
        return np.stack([self._code(scale, i) for i in ids]) if len(ids) else np.zeros((0, self.d_seg))

    def label_points(self, x, scale: int) -> np.ndarray:
        table = self.oracle.label_table(SCALES[scale])
        ids = self._ids(x)[:, scale]
        return np.stack([table[int(i)] for i in ids]) if len(ids) else np.zeros((0, self.d_lab))

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return np.any((x < self.bounds[0] - 1e-9) | (x > self.bounds[1] + 1e-9), axis=1)

    def render(self, origins, dirs, tokens: bool = True, seg: bool = True, chunk: int = 0):
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        c = self.oracle.cast(origins, dirs)
        hit = c.hit
        out = RayRender(opacity=c.alpha, depth=np.where(hit, c.t_hit, np.inf))
        n = len(origins)
        pts = origins[hit] + c.t_hit[hit, None] * dirs[hit]
        if tokens:
            out.t_vi = c.token_vi
            out.t_vd = c.token
        if seg:
            out.seg = np.zeros((3, n, self.d_seg))
            out.label = np.zeros((3, n, self.d_lab))
            if hit.any():
                ids = self.oracle.instance_ids(pts, c.obj[hit])
                for s in range(3):
                    table = self.oracle.label_table(SCALES[s])
                    out.seg[s, hit] = np.stack([self._code(s, i) for i in ids[:, s]])
                    out.label[s, hit] = np.stack([table[int(i)] for i in ids[:, s]])
        return out
