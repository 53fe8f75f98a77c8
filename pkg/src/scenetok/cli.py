"""Command-line entry point: ``scenetok <command> ...``.

Every command writes ``<output>.manifest.json`` (or ``run_manifest.json``
inside an output directory, beside any tensor ``manifest.json``) recording arguments, seed, config and library versions.
Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 transport failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .backend import (StructuredQuery, TransportError, answer_oracle, export_segmentation_pointcloud, ground,
                      remote_answer, surface_cloud, write_ply)
from .camera import CameraPose
from .decomp import DEFAULT_PARAMS, CLUSTER_RAYS, RefineParams, SegmentGraph, assign_points, decompose, sample_rays
from .describe import DescribeConfig, ScenePrompt, describe_scene
from .fields import NumericalError, TrainConfig, fit_token_field, init_fields, load_fieldset, save_fieldset
from .frames import filter_blurred, select_frames
from .metrics import ari, semantic_scores
from .oraclefield import OracleField
from .scenegen import SCALES, SceneError, SceneSpec, TeacherOutputs, build_scene, make_trajectory, \
    random_scene, render_teacher_views
from .segfield import SegConfig, fit_seg_field

logger = logging.getLogger("scenetok")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_TRANSPORT = 0, 2, 3, 4


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("scenetok", "numpy", "scipy", "scikit-learn", "torch", "httpx"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _digest(path: Path) -> str | None:
    path = Path(path)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != "run_manifest.json" and not p.name.endswith(".manifest.json")):
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
        return h.hexdigest()
    return None


def write_manifest(out: Path, args, config: dict, inputs: dict) -> Path:
    out = Path(out)
    target = out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    record = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": _digest(Path(v))} for k, v in inputs.items() if v is not None},
        "versions": _versions(),
    }
    target.write_text(json.dumps(record, indent=1, sort_keys=True, default=str))
    return target


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    """Flat keys plus an optional named section, the section winning."""
    flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    return {**flat, **cfg.get(name, {})}


def _poses(path) -> list:
    return [CameraPose.from_dict(p) for p in json.loads(Path(path).read_text())]


def _fields_and_poses(path):
    """A trained fieldset directory, or a scene directory for analytic oracle fields."""
    path = Path(path)
    if (path / "fieldset.json").exists():
        return load_fieldset(path), _poses(path / "poses.json")
    if (path / "scene.json").exists():
        spec = SceneSpec.load(path / "scene.json")
        teacher = TeacherOutputs.load(path / "teacher")
        return OracleField(build_scene(spec)), teacher.poses
    raise FileNotFoundError(f"{path} is neither a fieldset nor a scene directory")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args, cfg):
    sc = _section(cfg, "scene")
    spec = random_scene(n_objects=args.objects, seed=args.seed, vd_strength=args.vd_strength,
                        part_gap=args.part_gap,
                        **{k: sc[k] for k in ("d_tok", "d_lab", "n_parts", "n_subparts", "token_scale") if k in sc})
    oracle = build_scene(spec)
    poses = make_trajectory(spec, args.views, seed=args.seed)
    teacher = render_teacher_views(oracle, poses, mask_noise=args.mask_noise, mask_dropout=args.mask_dropout,
                                   seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "scene.json")
    teacher.save(out / "teacher")
    print(f"scene with {len(spec.objects)} objects and {len(poses)} views written to {out}")
    return out, {"scene": sc}, {}


def cmd_select_frames(args, cfg):
    teacher = TeacherOutputs.load(Path(args.scene) / "teacher")
    spec = SceneSpec.load(Path(args.scene) / "scene.json")
    kept = filter_blurred(teacher.rgb, args.blur_fraction)
    chosen = select_frames([teacher.poses[i] for i in kept], args.k, beta=args.beta, bounds=spec.bounds)
    frames = sorted(kept[i] for i in chosen)
    out = Path(args.out)
    out.write_text(json.dumps({"frames": frames, "beta": args.beta, "blur_fraction": args.blur_fraction}))
    print(f"selected {len(frames)} of {teacher.n_views} frames")
    return out, {}, {"scene": args.scene}


def cmd_train(args, cfg):
    tc = TrainConfig.from_dict({**_section(cfg, "train"), "seed": args.seed,
                                **({"steps": args.steps} if args.steps else {})})
    teacher = TeacherOutputs.load(Path(args.scene) / "teacher")
    spec = SceneSpec.load(Path(args.scene) / "scene.json")
    frames = json.loads(Path(args.frames).read_text())["frames"] if args.frames else None
    fs = init_fields(tc, spec.bounds, spec.d_tok)
    fs, curve = fit_token_field(fs, teacher, tc, feature_views=frames)
    config = {"train": asdict(tc)}
    if args.with_segfield:
        sc = SegConfig.from_dict({**_section(cfg, "seg"), "seed": args.seed})
        fs, seg_curve = fit_seg_field(fs, teacher, sc, views=frames)
        config["seg"] = asdict(sc)
        curve += seg_curve
    out = Path(args.out)
    save_fieldset(fs, out)
    (out / "poses.json").write_text(json.dumps([p.to_dict() for p in teacher.poses]))
    (out / "curve.json").write_text(json.dumps(curve))
    print(f"fieldset written to {out}; final loss {curve[-1].get('total', float('nan')):.5f}" if curve else str(out))
    return out, config, {"scene": args.scene, "frames": args.frames}


def cmd_segment(args, cfg):
    fs, poses = _fields_and_poses(args.fieldset)
    rp = RefineParams(**{k: v for k, v in _section(cfg, "refine").items() if k in RefineParams.__dataclass_fields__})
    graph = decompose(fs, poses, n_rays=args.rays, seed=args.seed, params=DEFAULT_PARAMS, refine=rp)
    out = graph.save(args.out)
    print("segments per scale: " + ", ".join(f"{s} {len(graph.segments[s])}" for s in SCALES))
    return out, {"refine": asdict(rp), "rays": args.rays}, {"fieldset": args.fieldset}


def cmd_describe(args, cfg):
    fs, poses = _fields_and_poses(args.fieldset)
    graph = SegmentGraph.load(args.graph)
    dc = DescribeConfig.from_dict({**_section(cfg, "describe"), "W": args.w, "seed": args.seed,
                                   **({"mode": args.mode} if args.mode else {})})
    prompt = describe_scene(fs, graph, poses, dc, question=args.question)
    out = Path(args.out)
    out.write_text(prompt.dumps())
    print(f"prompt with {len(prompt.objects)} objects written to {out}")
    return out, {"describe": asdict(dc)}, {"graph": args.graph, "fieldset": args.fieldset}


def cmd_ask(args, cfg):
    prompt = ScenePrompt.loads(Path(args.prompt).read_text())
    query = None
    if args.query:
        q = json.loads(Path(args.query).read_text())
        query = StructuredQuery(q["kind"], q.get("embedding"), q.get("reference"), q.get("threshold", 0.5))
    if args.endpoint:
        ans = remote_answer(prompt, args.endpoint, timeout=args.timeout, query=query)
        result = {"answer": ans.answer, "chosen_virtual_id": ans.chosen_virtual_id}
    else:
        if query is None:
            raise ValueError("the oracle backend needs --query")
        a = answer_oracle(prompt, query)
        result = {"kind": a.kind, "value": a.value, "virtual_id": a.virtual_id}
    out = Path(args.out)
    out.write_text(json.dumps(result, sort_keys=True))
    print(json.dumps(result))
    return out, {}, {"prompt": args.prompt, "query": args.query}


def cmd_ground(args, cfg):
    fs, poses = _fields_and_poses(args.fieldset)
    graph = SegmentGraph.load(args.graph)
    prompt = ScenePrompt.loads(Path(args.prompt).read_text())
    res = ground(graph, fs, args.virtual_id, prompt, poses, rule=args.rule)
    out = write_ply(args.out, res.points, res.labels.astype(int))
    print(f"object {res.object_id}: {int(res.labels.sum())} of {len(res.points)} points")
    return out, {"rule": args.rule}, {"graph": args.graph, "fieldset": args.fieldset, "prompt": args.prompt}


def cmd_eval(args, cfg):
    spec = SceneSpec.load(Path(args.scene) / "scene.json")
    oracle = build_scene(spec)
    fs, poses = _fields_and_poses(args.fieldset)
    graph = SegmentGraph.load(args.graph)
    rays = sample_rays(fs, poses, args.rays, seed=args.seed + 1)
    gt = oracle.instance_ids(rays.points, oracle.nearest_object(rays.points))
    report = {"rays": len(rays.points), "ari": {}}
    for i, s in enumerate(SCALES):
        report["ari"][s] = ari(assign_points(graph, fs, rays.points, s), gt[:, i])
    cloud = surface_cloud(fs, poses)
    truth = oracle.nearest_object(cloud.points)
    classes = {o.label: o.label_embedding for o in spec.objects}
    gt_cls = np.array([spec.objects[k].label for k in truth])
    report["semantic"] = {}
    for scale in (0, 1, 2, "all"):
        lc = export_segmentation_pointcloud(graph, fs, poses, scale, classes, cloud=cloud)
        pred = np.array(lc.names)[lc.labels]
        miou, macc = semantic_scores(pred, gt_cls)
        report["semantic"][str(scale)] = {"mIoU": miou, "mAcc": macc}
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, sort_keys=True))
    return out, {"rays": args.rays}, {"scene": args.scene, "fieldset": args.fieldset, "graph": args.graph}


COMMANDS = {
    "gen-scene": cmd_gen_scene, "select-frames": cmd_select_frames, "train": cmd_train, "segment": cmd_segment,
    "describe": cmd_describe, "ask": cmd_ask, "ground": cmd_ground, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file; keys match the config dataclass fields")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="scenetok", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common])
    s.add_argument("--out", required=True)
    s.add_argument("--objects", type=int, default=2)
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--vd-strength", type=float, default=0.0)
    s.add_argument("--mask-noise", type=float, default=0.0)
    s.add_argument("--mask-dropout", type=float, default=0.0)
    s.add_argument("--part-gap", type=float, default=0.0, help="gap fraction between sub-parts; 0 = touching parts")

    s = sub.add_parser("select-frames", parents=[common])
    s.add_argument("--scene", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--blur-fraction", type=float, default=0.2)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common])
    s.add_argument("--scene", required=True)
    s.add_argument("--frames")
    s.add_argument("--steps", type=int, help="token steps; overrides the config")
    s.add_argument("--with-segfield", action="store_true")
    s.add_argument("--out", required=True)

    s = sub.add_parser("segment", parents=[common])
    s.add_argument("--fieldset", required=True, help="fieldset directory, or a scene directory for oracle fields")
    s.add_argument("--rays", type=int, default=CLUSTER_RAYS)
    s.add_argument("--out", required=True)

    s = sub.add_parser("describe", parents=[common])
    s.add_argument("--graph", required=True)
    s.add_argument("--fieldset", required=True)
    s.add_argument("--w", type=int, default=30000)
    s.add_argument("--mode", choices=("all_vi", "all_vd", "even_split", "adaptive"))
    s.add_argument("--question", default="")
    s.add_argument("--out", required=True)

    s = sub.add_parser("ask", parents=[common])
    s.add_argument("--prompt", required=True)
    s.add_argument("--query", help="StructuredQuery JSON (oracle backend, optional for remote)")
    s.add_argument("--endpoint", help="answer over HTTP instead of the oracle")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ground", parents=[common])
    s.add_argument("--graph", required=True)
    s.add_argument("--fieldset", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--virtual-id", type=int, required=True)
    s.add_argument("--rule", choices=("feature", "majority"), default="feature")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common])
    s.add_argument("--scene", required=True)
    s.add_argument("--fieldset", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--rays", type=int, default=4096)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        out, config, inputs = COMMANDS[args.command](args, cfg)
        write_manifest(out, args, config, {"config": args.config, **inputs})
    except NumericalError as exc:
        logger.error("numerical failure: %s %s", exc, getattr(exc, "diagnostics", ""))
        return EXIT_NUMERIC
    except TransportError as exc:
        logger.error("transport failure: %s", exc)
        return EXIT_TRANSPORT
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError, SceneError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
