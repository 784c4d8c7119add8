"""Command line front end.

    partmesh generate --template hinged_box --seed 3 --out data/obj3
    partmesh fit      --data data/obj3 --out runs/obj3 [--config cfg.txt]
    partmesh eval     --pred runs/obj3 --gt data/obj3 --out runs/obj3
    partmesh export   --pred runs/obj3 --out runs/obj3/urdf

Config files are flat "key=value" lines ('#' starts a comment); keys are
TrainConfig fields, with loss weights and remesh settings reachable as
weights_<field> and remesh_<field>.  Exit codes: 0 success, 1 failure
(one-line "error: ..." on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np

from . import dataset as ds
from . import synth, urdf
from .losses import LossWeights
from .metrics import evaluate_object, write_report
from .remesh import RemeshConfig
from .trainer import TrainConfig, Trainer


def read_config_file(path: str) -> dict:
    data = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (want key=value): {raw.strip()!r}")
            key, value = line.split("=", 1)
            data[key.strip()] = value.strip()
    return data


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(x)) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_mapping(cfg: TrainConfig) -> dict:
    out = {}
    for f in dataclass_fields(TrainConfig):
        if f.name in ("weights", "remesh"):
            continue
        out[f.name] = _format_value(getattr(cfg, f.name))
    for f in dataclass_fields(LossWeights):
        val = getattr(cfg.weights, f.name)
        if val is not None:
            out[f"weights_{f.name}"] = _format_value(val)
    for f in dataclass_fields(RemeshConfig):
        val = getattr(cfg.remesh, f.name)
        if val is not None:
            out[f"remesh_{f.name}"] = _format_value(val)
    return out


def write_config_file(path: str, cfg: TrainConfig) -> None:
    with open(path, "w") as fh:
        for key, value in config_to_mapping(cfg).items():
            fh.write(f"{key}={value}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    expected = synth.template_part_count(args.template)
    if args.parts is not None and args.parts != expected:
        raise ValueError(
            f"part-count mismatch: template {args.template!r} has {expected} parts"
        )
    spec = synth.SceneSpec(
        template=args.template,
        seed=args.seed,
        q_start=args.q_start,
        q_end=args.q_end,
        image_size=args.image_size,
        n_train=args.train_views,
        n_test=args.test_views,
    )
    scene = synth.generate_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    ds.save_dataset(args.out, scene.views, scene.init_mesh, gt=scene.gt)
    print(
        f"generated {args.template} ({expected} parts, seed {args.seed}) "
        f"with {len(scene.views)} views -> {args.out}"
    )
    return 0


def cmd_fit(args) -> int:
    data = ds.load_dataset(args.data)
    mapping = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    cfg = TrainConfig.from_mapping(mapping)
    result = Trainer(data.init_mesh, data.views, cfg).fit()

    os.makedirs(args.out, exist_ok=True)
    ds.write_mesh_obj(os.path.join(args.out, "mesh_first.obj"), result.mesh_first)
    ds.write_mesh_obj(os.path.join(args.out, "mesh_second.obj"), result.mesh_second)
    if result.recon_first is not None:
        ds.write_mesh_obj(os.path.join(args.out, "recon_first.obj"), result.recon_first)
        ds.write_mesh_obj(os.path.join(args.out, "recon_second.obj"), result.recon_second)
    ds.write_joints_json(
        os.path.join(args.out, "joints.json"),
        result.joints,
        extra={
            "active_parts": result.active_parts,
            "bake_off": _jsonable(result.bake_off),
            "seconds": result.seconds,
        },
    )
    ds.write_loss_log_csv(os.path.join(args.out, "loss_log.csv"), result.loss_log)
    with open(os.path.join(args.out, "mesh_hashes.csv"), "w") as fh:
        fh.write("iteration,first,second\n")
        for it, h1, h2 in result.mesh_hashes:
            fh.write(f"{it},{h1},{h2}\n")
    write_config_file(os.path.join(args.out, "config_used.txt"), cfg)
    types = ",".join(j.joint_type for j in result.joints) or "none"
    print(
        f"fit finished in {result.seconds:.1f}s "
        f"({cfg.total_iterations} iterations, joints: {types}) -> {args.out}"
    )
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _load_prediction(pred_dir: str):
    mesh = ds.read_mesh_obj(os.path.join(pred_dir, "mesh_first.obj"))
    joints, payload = ds.read_joints_json(os.path.join(pred_dir, "joints.json"))
    return mesh, joints, payload


def cmd_eval(args) -> int:
    mesh, joints, _ = _load_prediction(args.pred)
    data = ds.load_dataset(args.gt)
    if data.gt is None:
        raise ValueError(f"dataset at {args.gt} has no ground truth")
    report = evaluate_object(
        mesh, joints, data.gt, n_samples=args.samples, seed=args.seed or 0
    )
    os.makedirs(args.out, exist_ok=True)
    write_report(
        report,
        os.path.join(args.out, "report.json"),
        os.path.join(args.out, "report.csv"),
    )
    worst_axis = max((j["axis_ang_deg"] for j in report.joints), default=0.0)
    print(
        f"eval {report.template} [{report.bucket}]: "
        f"worst axis {worst_axis:.2f} deg, CD-s {report.cd_s_mm:.2f} mm, "
        f"CD-m {report.cd_m_mm:.2f} mm -> {args.out}"
    )
    return 0


def cmd_export(args) -> int:
    mesh, joints, _ = _load_prediction(args.pred)
    model = urdf.export_urdf(mesh, joints, args.out, name=args.name)
    problems = urdf.validate_urdf(model.path)
    if problems:
        raise ValueError("URDF validation failed: " + "; ".join(problems))
    print(f"exported {len(model.links)} links, {len(model.joints)} joints -> {model.path}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partmesh",
        description="articulated-object reconstruction from two-state RGB-D views",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic two-state dataset")
    g.add_argument("--template", required=True, choices=synth.TEMPLATES)
    g.add_argument("--parts", type=int, default=None,
                   help="expected part count (validated against the template)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--q-start", type=float, default=None)
    g.add_argument("--q-end", type=float, default=None)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--train-views", type=int, default=16)
    g.add_argument("--test-views", type=int, default=4)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit meshes and joints to a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", default=None, help="key=value config file")
    f.add_argument("--seed", type=int, default=None)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a fit against dataset ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--samples", type=int, default=2000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write a URDF model from a fit")
    x.add_argument("--pred", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--name", default="object")
    x.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface one parsable line, keep exit codes stable
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
