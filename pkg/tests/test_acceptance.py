"""Acceptance criteria 1-10, one test each.

Every test records a single ``ACCEPTANCE C<n> PASS|FAIL`` line; the lines are
printed as they happen and repeated in the terminal summary.
"""

import copy
import itertools
import json
import time

import numpy as np
import pytest

from scenetok.backend import StructuredQuery, answer_oracle, export_segmentation_pointcloud, ground, surface_cloud
from scenetok.camera import CameraPose, look_at
from scenetok.decomp import assign_points, decompose, refine_segments, sample_rays
from scenetok.describe import DescribeConfig, allocate_budget, angle_between, describe_scene, radar_order
from scenetok.fields import delta_ratio, token_map_errors
from scenetok.frames import dissimilarity_matrix, min_pairwise, select_frames
from scenetok.metrics import acc_at, ari, hierarchy_errors, iou, semantic_scores
from scenetok.oraclefield import OracleField
from scenetok.render import RaySamples, composite_weights, render_along_ray
from scenetok.scenegen import SCALES, build_scene, make_trajectory, random_scene

from .helpers import basis, construct, gradient_check, n_segments, with_cos

RESULTS = []


def record(n, ok, detail):
    line = f"ACCEPTANCE C{n} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def _front_to_back(sigma, delta, values):
    trans, acc, out = 1.0, 0.0, np.zeros(values.shape[1])
    for s, dl, v in zip(sigma, delta, values):
        a = 1.0 - np.exp(-s * dl)
        out += trans * a * v
        acc += trans * a
        trans *= 1.0 - a
    return out, acc


def test_c1_compositing_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, max_sum = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 96))
        sigma = rng.exponential(rng.uniform(0.1, 50), n) * (rng.random(n) < 0.8)
        delta = rng.uniform(1e-3, 0.3, n)
        vals = rng.normal(size=(n, 3))
        ref, acc = _front_to_back(sigma, delta, vals)
        v, op, _ = render_along_ray(RaySamples(np.cumsum(delta), np.zeros((n, 3)), delta, sigma, vals))
        w, _ = composite_weights(sigma, delta)
        worst = max(worst, np.abs(v - ref).max(), abs(op - acc))
        max_sum = max(max_sum, w.sum())
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-12 and max_sum <= 1.0 and dt < 1.0,
           f"max |diff| {worst:.1e} on 1000 rays, max sum w {max_sum:.15f}, {dt:.2f} s")


def test_c2_gradients():
    t0 = time.perf_counter()
    worst = [gradient_check(seed) for seed in (0, 1, 2)]
    dt = time.perf_counter() - t0
    record(2, max(worst) < 1e-4 and dt < 30, f"worst relative FD error per seed {np.round(worst, 8).tolist()}, "
                                             f"{dt:.1f} s")


def test_c3_vi_vd(vi_fit, vd_fit):
    vd = token_map_errors(vd_fit["fs"], vd_fit["oracle"], vd_fit["held_out"])
    ratio = delta_ratio(vi_fit["fs"])
    ok = vd["mse_vd"] < vd["mse_vi"] and ratio < 0.05 and max(vi_fit["seconds"], vd_fit["seconds"]) < 300
    record(3, ok, f"direction-dependent teacher held-out MSE VD {vd['mse_vd']:.4f} < VI {vd['mse_vi']:.4f}; "
                  f"view-independent teacher |delta|/|f_VI| {ratio:.4f} < 0.05; "
                  f"fits {vi_fit['seconds']:.0f} s / {vd_fit['seconds']:.0f} s")


def test_c4_decomposition(seg_fit_2, seg_fit_5, seg_fit_touching_2, seg_fit_touching_5):
    parts, ok = [], True
    fits = (("2 objects touching parts", seg_fit_touching_2, False), ("5 objects touching parts", seg_fit_touching_5,
            False), ("2 objects separated parts", seg_fit_2, True), ("5 objects separated parts", seg_fit_5, True))
    for name, fit, check_tree in fits:
        rays = sample_rays(fit["fs"], fit["poses"], 8192, seed=1)
        orc, g = fit["oracle"], fit["graph"]
        gt = orc.instance_ids(rays.points, orc.nearest_object(rays.points))
        pred = np.stack([assign_points(g, fit["fs"], rays.points, s) for s in SCALES], axis=1)
        a = ari(pred[:, 2], gt[:, 2])
        ok &= a >= 0.9 and fit["seconds"] < 300
        line = f"{name}: object ARI {a:.3f}"
        if check_tree:
            errs = hierarchy_errors(pred, gt, {0: g.parents["small"], 1: g.parents["medium"]})
            ok &= not errs
            line += f", hierarchy errors {len(errs)}"
        parts.append(line + f" ({fit['seconds']:.0f} s)")
    record(4, ok, "; ".join(parts))


def test_c5_refinement_rules():
    rng = np.random.default_rng(5)
    b = basis(rng, 4)
    outcomes = {}
    # (i) cardinality
    lab, le, seg, conf = construct([(40, (0, 0, 0), (b[0],) * 3), (40, (1, 0, 0), (b[1], b[0], b[0])),
                                    (5, (2, 0, 0), (b[2], b[0], b[0]))], rng)
    out = refine_segments(lab, le, seg, conf)
    outcomes["drop 5 members"] = np.all(out.labels["small"][80:] == -1)
    # (i) variance
    b8 = basis(rng, 8)
    lab, le, seg, conf = construct([(30, (i, 0, 0), (b8[i % 8], b8[0], b8[0])) for i in range(8)], rng)
    noisy = lab["small"] == 3
    le["small"][noisy] += 0.3 * rng.normal(size=(noisy.sum(), le["small"].shape[1]))
    out = refine_segments(lab, le, seg, conf)
    outcomes["drop high variance"] = [e for e in out.log if e[0] == "drop"] == [("drop", "small", 3)]
    # (iii) merge at cosine 0.95
    lab, le, seg, conf = construct([(40, (0, 0, 0), (b[0],) * 3), (40, (1, 0, 0), (with_cos(b[0], 0.95, rng),
                                    b[0], b[0])), (40, (2, 1, 1), (b[2], b[1], b[1]))], rng, noise=0.1)
    out = refine_segments(lab, le, seg, conf)
    outcomes["merge cos 0.95"] = len(set(out.labels["small"][:80])) == 1 and n_segments(out.labels["small"]) == 2
    lab, le, seg, conf = construct([(40, (0, 0, 0), (b[0],) * 3), (40, (1, 0, 0), (with_cos(b[0], 0.8, rng),
                                    b[0], b[0]))], rng)
    outcomes["no merge cos 0.8"] = n_segments(refine_segments(lab, le, seg, conf).labels["small"]) == 2
    # (ii) split at child cosine 0.3, not at 0.8
    lab, le, seg, conf = construct([(40, (0, 0, 0), (b[0], b[1], b[2])), (40, (1, 0, 0), (with_cos(b[0], 0.3, rng),
                                    b[1], b[2]))], rng)
    med = refine_segments(lab, le, seg, conf).labels["medium"]
    outcomes["split cos 0.3"] = n_segments(med) == 2 and med[0] != med[40]
    lab, le, seg, conf = construct([(40, (0, 0, 0), (b[0], b[1], b[2])), (40, (1, 0, 0), (with_cos(b[0], 0.8, rng),
                                    b[1], b[2]))], rng)
    outcomes["no split cos 0.8"] = n_segments(refine_segments(lab, le, seg, conf).labels["medium"]) == 1
    # idempotence over random mixed instances
    idem = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        bb = basis(r, 8)
        groups, sid = [], 0
        for obj, part in itertools.product(range(2), range(2)):
            for _ in range(2):
                vec = with_cos(bb[obj * 4 + part], r.choice([0.3, 0.8, 0.95, 1.0]), r)
                groups.append((int(r.integers(5, 40)), (sid, obj * 2 + part, obj), (vec, bb[obj * 4 + part], bb[obj])))
                sid += 1
        lab, le, seg, conf = construct(groups, r, noise=float(r.uniform(0.005, 0.05)))
        once = refine_segments(lab, le, seg, conf)
        twice = refine_segments(once.labels, le, seg, conf, variance_threshold=once.variance_threshold)
        idem &= all(np.array_equal(once.labels[s], twice.labels[s]) for s in SCALES)
    outcomes["idempotent x20"] = idem
    record(5, all(outcomes.values()), ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in outcomes.items()))


def test_c6_description_invariants(oracle_scene):
    g, f, poses = oracle_scene["graph"], oracle_scene["field"], oracle_scene["poses"]
    W = 61
    quotas = allocate_budget(W, g)
    n_obj = len(g.ids("large"))
    budget = all(q.total == W // n_obj for q in quotas.values())
    balance = True
    for q in quotas.values():
        if q.parts:
            balance &= max(q.parts.values()) - min(q.parts.values()) <= 1
        for subs in q.subparts.values():
            if subs:
                balance &= max(subs.values()) - min(subs.values()) <= 1
    cfg = DescribeConfig(W=W, mode="adaptive")
    prompt = describe_scene(f, copy.deepcopy(g), poses, cfg, "q")
    filled = all(len(d.tokens) == W // n_obj for _, d in prompt.objects)
    vd_ok, n_vd = True, 0
    for _, d in prompt.objects:
        for t in d.tokens:
            if t.tag == "VD":
                n_vd += 1
                vd_ok &= angle_between(t.direction, d.canonical) <= cfg.angular_threshold
    rng = np.random.default_rng(6)
    radar = True
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        cents = rng.normal(size=(n, 3))
        center = cents.mean(0)
        rel = cents - center
        r = np.hypot(rel[:, 0], rel[:, 1])
        key = [np.arctan2(y, x) % (2 * np.pi) + 0.05 * ri / r.max() for (x, y, _), ri in zip(rel, r)]
        radar &= radar_order(cents, center, 0.05) == sorted(range(n), key=lambda i: (key[i], i))
    record(6, budget and balance and filled and vd_ok and n_vd > 0 and radar,
           f"budget floor(W/O)={W // n_obj} per object {budget and filled}, part/sub-part spread <= 1 {balance}, "
           f"{n_vd} adaptive VD tokens inside threshold {vd_ok}, radar == brute force on 1000 layouts {radar}")


def test_c7_grounding(oracle_scene, grounded_fit):
    # 50 seeded queries on oracle fields with orthogonal object features
    correct, oracle_ious = 0, []
    for seed in range(50):
        spec = random_scene(int(2 + seed % 3), seed=100 + seed)
        orc = build_scene(spec)
        field = OracleField(orc)
        poses = make_trajectory(spec, 8, seed=seed)
        g = decompose(field, poses, rays=sample_rays(field, poses, 2048, seed=seed))
        prompt = describe_scene(field, g, poses, DescribeConfig(W=6 * len(spec.objects), mode="all_vi"), "q")
        k = seed % len(spec.objects)
        noise = np.random.default_rng(seed).normal(size=spec.d_tok) * 0.1
        a = answer_oracle(prompt, StructuredQuery("find_object_by_feature", spec.objects[k].base_token + noise))
        centroid = prompt.object_for(a.virtual_id).centroid
        correct += int(orc.nearest_object(centroid[None])[0]) == k
        if seed < 5:
            res = ground(g, field, a.virtual_id, prompt, poses)
            oracle_ious.append(iou(res.labels, orc.nearest_object(res.points) == k))
    # fitted fields
    fs, spec, orc, poses = grounded_fit["fs"], grounded_fit["spec"], grounded_fit["oracle"], grounded_fit["poses"]
    prompt = describe_scene(fs, copy.deepcopy(grounded_fit["graph"]), poses, DescribeConfig(W=60), "q")
    cloud = surface_cloud(fs, poses)
    truth = orc.nearest_object(cloud.points)
    fitted = []
    for k, o in enumerate(spec.objects):
        a = answer_oracle(prompt, StructuredQuery("find_object_by_feature", o.base_token))
        fitted.append(iou(ground(grounded_fit["graph"], fs, a.virtual_id, prompt, poses, cloud=cloud).labels,
                          truth == k))
    ok = correct == 50 and min(fitted) >= 0.5 and all(v == 1.0 for v in oracle_ious)
    record(7, ok, f"correct object {correct}/50; oracle-field IoU {np.round(oracle_ious, 4).tolist()}; "
                  f"fitted IoU {np.round(fitted, 4).tolist()}; fitted Acc@0.1 {acc_at(fitted, 0.1):.2f} "
                  f"Acc@0.25 {acc_at(fitted, 0.25):.2f}")


def test_c8_semantic_trend(grounded_fit, seg_fit_touching_2, seg_fit_touching_5):
    ok, parts = True, []
    for name, fit in (("2 obj seed 3", grounded_fit), ("2 obj seed 1", seg_fit_touching_2),
                      ("5 obj seed 1", seg_fit_touching_5)):
        spec, orc = fit["spec"], fit["oracle"]
        cloud = surface_cloud(fit["fs"], fit["poses"])
        gt = np.array([spec.objects[k].label for k in orc.nearest_object(cloud.points)])
        classes = {o.label: o.label_embedding for o in spec.objects}
        miou = {}
        for scale in (0, 1, 2, "all"):
            lc = export_segmentation_pointcloud(fit["graph"], fit["fs"], fit["poses"], scale, classes, cloud=cloud)
            miou[scale] = semantic_scores(np.array(lc.names)[lc.labels], gt)[0]
        best = max(miou[s] for s in (0, 1, 2))
        ok &= miou["all"] >= best
        parts.append(f"{name}: all {miou['all']:.4f} vs best single {best:.4f}")
    record(8, ok, "; ".join(parts))


def _orbit(rng, n):
    poses = []
    for _ in range(n):
        az, el = rng.uniform(0, 2 * np.pi), rng.uniform(0.1, 0.8)
        pos = 2.5 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(look_at(pos, rng.normal(0, 0.2, 3)))
    return poses


def test_c9_frame_selection():
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(100):
        poses = _orbit(rng, 40)
        dist = dissimilarity_matrix(poses)
        wins += min_pairwise(dist, select_frames(poses, 8)) >= min_pairwise(dist, range(0, 40, 5))
    q = look_at([0, -3, 0], [0, 0, 0]).orientation
    endpoints = True
    for _ in range(20):
        xs = np.sort(rng.uniform(-2, 2, 7))
        endpoints &= sorted(select_frames([CameraPose([x, -3.0, 0.0], q) for x in xs], 2)) == [0, 6]
    record(9, wins >= 95 and endpoints, f"greedy >= stride on {wins}/100 orbits; collinear endpoints {endpoints}")


def test_c10_determinism():
    from scenetok.fields import TrainConfig, fit_token_field, init_fields
    from scenetok.scenegen import render_teacher_views
    from scenetok.segfield import SegConfig, fit_seg_field

    def run(fitted):
        spec = random_scene(3, seed=10)
        orc = build_scene(spec)
        poses = make_trajectory(spec, 12, seed=10)
        if fitted:
            teacher = render_teacher_views(orc, poses)
            cfg = TrainConfig(seed=10, geometry_steps=60, steps=30, rays_per_batch=64, samples_per_ray=24,
                              resolutions=(8, 16), token_resolutions=(8,), hidden=16)
            field, _ = fit_token_field(init_fields(cfg, spec.bounds, spec.d_tok), teacher, cfg)
            field, _ = fit_seg_field(field, teacher, SegConfig(seed=10, steps=40, resolutions=(8, 16), hidden=16))
        else:
            field = OracleField(orc)
        g = decompose(field, poses, n_rays=4096, seed=10)
        graph_json = g.dumps()
        prompt = describe_scene(field, g, poses, DescribeConfig(W=30, mode="adaptive", seed=10, ray_cap=8), "q")
        return graph_json, prompt.dumps()

    same = {}
    for fitted in (False, True):
        a, b = run(fitted), run(fitted)
        same["fitted" if fitted else "oracle"] = (a[0] == b[0], a[1] == b[1], len(a[0]), len(a[1]))
    ok = all(x[0] and x[1] for x in same.values())
    record(10, ok, "; ".join(f"{k} fields: graph JSON identical {v[0]} ({v[2]} bytes), prompt JSON identical "
                             f"{v[1]} ({v[3]} bytes)" for k, v in same.items()))
