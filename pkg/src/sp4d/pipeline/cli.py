"""Command-line entry point.

Every subcommand writes only inside its ``--out`` directory and records the
config hash and seed in ``run.json`` there. Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConfigError, DomainError, SP4DError
from .config import RunConfig, load_config

log = logging.getLogger("sp4d")

IMAGE_RE = re.compile(r"v(\d+)_f(\d+)\.sp4t$")


# ---------------------------------------------------------------------------
# helpers


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _record(out: Path, command: str, cfg: RunConfig, **fields) -> None:
    doc = {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed, "version": __version__}
    doc.update(fields)
    _dump(out / "run.json", doc)


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "dataset.jsonl" if p.is_dir() else p


def _kept_rows(data) -> list[dict]:
    from ..metrics import load_dataset_manifest
    path = _manifest_path(data)
    if not path.exists():
        raise DomainError(f"dataset manifest {path} not found")
    rows = [r for r in load_dataset_manifest(path) if r.get("status", "kept") == "kept"]
    if not rows:
        raise DomainError(f"dataset {path} lists no kept objects")
    return sorted(rows, key=lambda r: r["object"])


def _image_grid(obj_dir: Path, sub: str) -> dict:
    """(view, frame) -> path for every ``<sub>/vVV_fFF.sp4t`` file."""
    out = {}
    for p in sorted((obj_dir / sub).glob("*.sp4t")):
        m = IMAGE_RE.match(p.name)
        if m:
            out[(int(m.group(1)), int(m.group(2)))] = p
    return out


def _threads(arg) -> int | None:
    raw = arg if arg is not None else os.environ.get("SP4D_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a, cfg: RunConfig) -> None:
    from ..synth import LinkageSpec, write_dataset
    spec = LinkageSpec(segments=a.segments, views=a.views, frames=a.frames, size=a.size,
                       bones_per_segment=a.bones_per_segment, smooth=a.smooth)
    if not 2 <= spec.segments <= 5:
        raise DomainError("segments must be between 2 and 5")
    if min(spec.views, spec.frames, spec.size, a.count) < 1:
        raise DomainError("views, frames, size and count must be >= 1")
    seed = cfg.seed if a.seed is None else a.seed
    write_dataset(a.out, [(spec, seed + i) for i in range(a.count)], prefix=a.prefix)
    _record(a.out, "synth", cfg, spec=asdict(spec), first_seed=seed, count=a.count)


def _load_training_data(data):
    from ..fusion.train import ObjectData
    from ..synth import load
    objs = []
    for row in _kept_rows(data):
        b = load(row["_dir"])
        objs.append(ObjectData(b.rgb, b.encoded.astype(np.float32), b.labels))
    return objs


def cmd_train(a, cfg: RunConfig) -> None:
    from ..fusion.train import load_checkpoint, save_checkpoint, train
    over = {"stage": a.stage}
    if a.steps is not None:
        over["steps"] = a.steps
    tcfg = cfg.train_config(**over)
    init, init_stage = None, None
    if a.init:
        init, meta, _ = load_checkpoint(a.init)
        if meta.get("model") != cfg.model.to_dict():
            raise ConfigError(f"--init checkpoint model config differs from the run config: {meta.get('model')}")
        init_stage = meta.get("stage")
    elif tcfg.stage == "joint":
        log.warning("joint stage without --init: training from scratch")
    data = _load_training_data(a.data)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    res = train(data, cfg.model, tcfg, init=init, init_stage=init_stage, callback=rows.append)
    with open(out / "train_log.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    meta = {"stage": tcfg.stage, "steps": tcfg.steps, "seed": tcfg.seed, "config_hash": cfg.hash(),
            "model": cfg.model.to_dict(), "train": asdict(tcfg), "init_stage": init_stage}
    save_checkpoint(out / "checkpoint", res.params, res.optimizer, meta)
    _record(out, "train", cfg, stage=tcfg.stage, steps=tcfg.steps, objects=len(data))


def cmd_sample(a, cfg: RunConfig) -> None:
    from ..fusion.model import ModelConfig
    from ..fusion.sampler import sample
    from ..fusion.train import load_checkpoint
    from ..synth import image_name, load
    from ..tensorio import write_tensor
    params, meta, _ = load_checkpoint(a.ckpt)
    mcfg = ModelConfig(**meta["model"])
    steps = a.steps if a.steps is not None else cfg.sample.steps
    out = Path(a.out)
    rows = _kept_rows(a.data)
    if a.objects:
        want = set(a.objects.split(","))
        rows = [r for r in rows if r["object"] in want]
    listing = []
    for i, row in enumerate(rows):
        b = load(row["_dir"])
        V, F, H, W, _ = b.rgb.shape
        vv, ff = np.meshgrid(np.arange(V), np.arange(F), indexing="ij")
        gen = sample(params, mcfg, b.rgb.reshape(-1, H, W, 3), vv.ravel(), ff.ravel(), steps=steps,
                     seed=cfg.seed * 100003 + i, sigma_max=cfg.sample.sigma_max,
                     sigma_min=cfg.sample.sigma_min, rho=cfg.sample.rho)
        for k, (v, f) in enumerate(zip(vv.ravel(), ff.ravel())):
            write_tensor(gen["rgb"][k], out / row["object"] / "rgb" / image_name(v, f, "sp4t"))
            write_tensor(gen["part"][k], out / row["object"] / "encoded" / image_name(v, f, "sp4t"))
        listing.append({"object": row["object"], "views": V, "frames": F})
    _dump(out / "samples.json", {"objects": listing, "steps": steps, "checkpoint_hash": meta.get("config_hash")})
    _record(out, "sample", cfg, steps=steps, objects=len(listing))


def cmd_backmap(a, cfg: RunConfig) -> None:
    from ..encoding import backmap
    from ..metrics import label_path
    from ..tensorio import read_tensor, write_labelmap
    src = Path(a.pred)
    objs = sorted(d for d in src.iterdir() if d.is_dir() and (d / "encoded").is_dir()) if src.is_dir() else []
    if not objs:
        raise DomainError(f"no <object>/encoded/ image folders under {src}")
    bm = cfg.backmap
    out = Path(a.out)
    summary = {}
    for d in objs:
        grid = _image_grid(d, "encoded")
        keys = sorted(grid)
        res = backmap([read_tensor(grid[k]) for k in keys], None, bm.min_cluster_size, bm.color_tol,
                      bm.min_area, bm.bg_tol)
        for (v, f), lab in zip(keys, res.labels):
            write_labelmap(lab, label_path(out / d.name, v, f))
        pal = {str(k): [float(x) for x in c] for k, c in sorted(res.palette.items())}
        _dump(out / d.name / "palette.json", pal)
        summary[d.name] = {"parts": len(pal), "noise_segments": res.n_noise_segments}
    _dump(out / "backmap.json", summary)
    _record(out, "backmap", cfg, objects=len(objs))


def cmd_lift(a, cfg: RunConfig) -> None:
    from ..skinning import lift_vertex_parts
    from ..tensorio import read_mesh, write_mesh
    m = lift_vertex_parts(read_mesh(a.mesh), cfg.skinning.min_cluster_size)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(m, out / "mesh_parts.obj")
    ids, counts = np.unique(m.vertex_parts, return_counts=True)
    _dump(out / "lift.json", {"parts": {str(int(i)): int(c) for i, c in zip(ids, counts)}})
    _record(out, "lift", cfg, parts=len(ids))


def cmd_skin(a, cfg: RunConfig) -> None:
    from ..skinning import build_laplacian, export_skin_weights, skin_weights
    from ..tensorio import read_mesh
    m = read_mesh(a.mesh)
    if m.vertex_parts is None:
        raise DomainError(f"{a.mesh} carries no vertex parts; run `sp4d lift` first")
    sk = cfg.skinning
    sw = skin_weights(m, sk.weighting, sk.tol, sk.solver)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    export_skin_weights(sw, out / "weights.sp4t")
    _dump(out / "skin.json", {
        "weighting": sk.weighting, "solver": sk.solver, "parts": [int(p) for p in sw.parts],
        "skipped_faces": build_laplacian(m, sk.weighting).skipped_faces,
        "max_partition_error": float(np.max(np.abs(sw.W.sum(axis=1) - 1))),
        "min_weight": float(sw.W.min()), "max_weight": float(sw.W.max()),
    })
    _record(out, "skin", cfg, parts=len(sw.parts))


def cmd_merge_bones(a, cfg: RunConfig) -> None:
    from ..curation import BoneGraph, MergePolicy, load_bonegraph, merge_bones, save_bonegraph
    c = cfg.curation
    g = load_bonegraph(a.bones)
    res, steps = merge_bones(g, MergePolicy(c.motion_tol, c.feature_tol, c.max_bones), return_log=True)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(res, BoneGraph):
        save_bonegraph(res, out / "bones.json")
        status = {"status": "kept", "bones_in": len(g.bones), "bones_out": len(res.bones)}
    else:
        status = {"status": "discarded", "bones_in": len(g.bones), "bones_out": res.n_bones,
                  "reason": res.reason}
    status["merges"] = steps
    _dump(out / "curation.json", status)
    _record(out, "merge-bones", cfg, status=status["status"])


def cmd_labelgen(a, cfg: RunConfig) -> None:
    from ..curation import labels_from_weights, load_bonegraph
    from ..metrics import label_path
    from ..tensorio import write_labelmap
    g = load_bonegraph(a.bones)
    if g.weight_maps is None:
        raise DomainError(f"{a.bones} has no weight maps")
    lab = labels_from_weights(g.weight_maps, eps=cfg.curation.bg_eps)
    out = Path(a.out)
    V, F = lab.shape[:2]
    for v in range(V):
        for f in range(F):
            write_labelmap(lab[v, f], label_path(out, v, f))
    _dump(out / "labelgen.json", {"views": V, "frames": F, "parts": sorted(int(x) for x in np.unique(lab) if x)})
    _record(out, "labelgen", cfg, views=V, frames=F)


def cmd_eval(a, cfg: RunConfig) -> None:
    from ..metrics import SETTINGS, evaluate_suite, write_suite_report
    settings = SETTINGS if a.setting == "both" else (a.setting,)
    manifest = _manifest_path(a.data)
    if not manifest.exists():
        raise DomainError(f"dataset manifest {manifest} not found")
    out = Path(a.out)
    summary = {}
    for s in settings:
        rep = evaluate_suite(manifest, a.pred, s, cfg.eval.first_image_filter)
        write_suite_report(rep, out, extra={"config_hash": cfg.hash()})
        summary[s] = None if rep.aggregate is None else rep.aggregate.to_dict()
    _record(out, "eval", cfg, settings=list(settings))
    if all(v is None for v in summary.values()):
        raise DomainError(f"no object in {manifest} has a complete set of predictions under {a.pred}")
    print(json.dumps(summary, indent=1, sort_keys=True))


def cmd_report(a, cfg: RunConfig) -> None:
    from .report import build_report
    idx = build_report(a.run, a.out)
    _record(Path(a.out), "report", cfg)
    print(idx)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sp4d", description="Joint RGB / kinematic-part toolkit.")
    p.add_argument("--version", action="version", version=f"sp4d {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    common.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/numeric worker threads (fallback: SP4D_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic linkage dataset")
    s.add_argument("--segments", type=int, default=3, help="segments per arm (2-5)")
    s.add_argument("--views", type=int, default=8, help="azimuthal views")
    s.add_argument("--frames", type=int, default=4, help="animation frames")
    s.add_argument("--size", type=int, default=32, help="image side length in pixels")
    s.add_argument("--seed", type=int, default=None, help="first object seed (default: config seed)")
    s.add_argument("--count", type=int, default=1, help="number of objects (seeds seed..seed+count-1)")
    s.add_argument("--prefix", default="obj", help="object directory prefix")
    s.add_argument("--bones-per-segment", type=int, default=1, help="bones per segment")
    s.add_argument("--smooth", action="store_true", help="smooth weight falloff at joints")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train the dual-branch denoiser")
    s.add_argument("--data", required=True, help="dataset directory or dataset.jsonl")
    s.add_argument("--stage", choices=["rgb-only", "joint"], default="joint",
                   help="rgb-only: RGB branch alone, fusion bypassed; joint: both branches with fusion")
    s.add_argument("--init", help="checkpoint directory to initialize from")
    s.add_argument("--steps", type=int, help="override train.steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="generate RGB and part images")
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--data", required=True, help="dataset providing the conditioning RGB images")
    s.add_argument("--steps", type=int, help="override sample.steps")
    s.add_argument("--objects", help="comma-separated object names (default: all kept)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("backmap", parents=[common], help="recover label maps from encoded part images")
    s.add_argument("--pred", required=True, help="directory of <object>/encoded/vVV_fFF.sp4t images")
    s.set_defaults(func=cmd_backmap)

    s = sub.add_parser("lift", parents=[common], help="cluster mesh vertex colors into parts")
    s.add_argument("--mesh", required=True, help="OBJ mesh with vertex colors")
    s.set_defaults(func=cmd_lift)

    s = sub.add_parser("skin", parents=[common], help="harmonic skinning weights for a part-labeled mesh")
    s.add_argument("--mesh", required=True, help="OBJ mesh with #vp vertex-part lines")
    s.set_defaults(func=cmd_skin)

    s = sub.add_parser("merge-bones", parents=[common], help="merge co-moving similar bones, cap the count")
    s.add_argument("--bones", required=True, help="bone graph JSON")
    s.set_defaults(func=cmd_merge_bones)

    s = sub.add_parser("labelgen", parents=[common], help="part labels from per-bone weight maps")
    s.add_argument("--bones", required=True, help="bone graph JSON with weight maps")
    s.set_defaults(func=cmd_labelgen)

    s = sub.add_parser("eval", parents=[common], help="score predicted label maps against ground truth")
    s.add_argument("--data", required=True, help="ground-truth dataset directory or dataset.jsonl")
    s.add_argument("--pred", required=True, help="directory of <object>/labels/vVV_fFF.png predictions")
    s.add_argument("--setting", choices=["multi-view", "multi-frame", "both"], default="both",
                   help="multi-view: views of each fixed frame; multi-frame: frames of each fixed view")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="static HTML report with PNG figures")
    s.add_argument("--run", required=True, help="run directory to summarize (searched recursively)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _threads(a.threads)
        cfg = load_config(a.config)
        a.out = Path(a.out)
        if n is None:
            a.func(a, cfg)
        else:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=n):
                a.func(a, cfg)
    except SP4DError as exc:
        print(f"sp4d {a.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, KeyError) as exc:
        print(f"sp4d {a.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
