"""Held-out token error of desk-scale token fields across seeded scenes.

    python scripts/pilot_tokens.py --scenes 3 0 1 --vd 0 0.5 --out results/tokens.json
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from scenetok.fields import TrainConfig, delta_ratio, fit_token_field, init_fields, token_map_errors
from scenetok.scenegen import build_scene, make_trajectory, random_scene, render_teacher_views


@dataclass
class TokenPilot:
    scenes: list = field(default_factory=lambda: [3])
    vd: list = field(default_factory=lambda: [0.0, 0.5])
    objects: int = 2
    views: int = 48
    held_out: tuple = (7, 5, 3)  # trajectory length, seed, index
    steps: int | None = None


def run_one(p: TokenPilot, scene: int, vd: float) -> dict:
    spec = random_scene(p.objects, seed=scene, vd_strength=vd)
    orc = build_scene(spec)
    teacher = render_teacher_views(orc, make_trajectory(spec, p.views, seed=0))
    cfg = TrainConfig.desk(**({"steps": p.steps} if p.steps else {}))
    t0 = time.perf_counter()
    fs, _ = fit_token_field(init_fields(cfg, spec.bounds, spec.d_tok), teacher, cfg)
    n, seed, idx = p.held_out
    err = token_map_errors(fs, orc, make_trajectory(spec, n, seed=seed)[idx])
    return {"scene": scene, "vd": vd, "seconds": time.perf_counter() - t0, "delta_ratio_uniform": delta_ratio(fs),
            **err}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, nargs="+", default=[3])
    ap.add_argument("--vd", type=float, nargs="+", default=[0.0, 0.5])
    ap.add_argument("--views", type=int, default=48)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="results/tokens.json")
    a = ap.parse_args()
    p = TokenPilot(scenes=a.scenes, vd=a.vd, views=a.views, steps=a.steps)
    rows = []
    for scene in p.scenes:
        for vd in p.vd:
            r = run_one(p, scene, vd)
            rows.append(r)
            print(f"scene {scene} vd {vd}: rel VD {r['rel_vd']:.4f} rel VI {r['rel_vi']:.4f} "
                  f"delta {r['delta_ratio_uniform']:.4f} ({r['seconds']:.0f} s)", flush=True)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"config": asdict(p), "runs": rows}, indent=1))


if __name__ == "__main__":
    main()
