"""Desk-scale experiments on synthetic linkages.

``quality``: one two-stage training run, then sample -> backmap -> mIoU on
held-out objects. ``ablation``: full model vs. fusion bypassed vs. no
contrastive term, over several seeds. Both run in-process (no files between
stages) and write one JSON result document.

    python -m sp4d.pipeline.experiment quality --out res/ [--config cfg.json]
    python -m sp4d.pipeline.experiment ablation --out res/ --seeds 0,1,2,3,4
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..encoding import backmap
from ..errors import SP4DError
from ..fusion.sampler import sample
from ..fusion.train import ObjectData, train
from ..metrics import evaluate, mean_report
from ..synth import LinkageSpec, generate
from .config import RunConfig, load_config

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-fusion", "no-contrast")


@dataclass
class Benchmark:
    """Synthetic benchmark layout. Seed ``s`` draws its own training and
    held-out objects, disjoint from every other seed's."""
    segments: int = 3
    views: int = 8
    frames: int = 4
    size: int = 32
    n_train: int = 16
    n_test: int = 5
    stage1_steps: int = 100

    def spec(self) -> LinkageSpec:
        return LinkageSpec(segments=self.segments, views=self.views, frames=self.frames, size=self.size)

    def train_seeds(self, seed: int) -> list[int]:
        return [1_000_000 + 10_000 * seed + i for i in range(self.n_train)]

    def test_seeds(self, seed: int) -> list[int]:
        return [2_000_000 + 10_000 * seed + i for i in range(self.n_test)]


def _objects(spec: LinkageSpec, seeds):
    return [generate(spec, s) for s in seeds]


def _data(bundles):
    return [ObjectData(b.rgb, b.encoded.astype(np.float32), b.labels) for b in bundles]


def variant_config(cfg: RunConfig, variant: str) -> tuple:
    """(model config, train overrides) for one ablation arm."""
    if variant == "full":
        return cfg.model, {}
    if variant == "no-fusion":
        return dataclasses.replace(cfg.model, fusion="none"), {}
    if variant == "no-contrast":
        return cfg.model, {"lambda_contrast": 0.0}
    raise SP4DError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def score_object(params, mcfg, cfg: RunConfig, bundle, seed: int) -> dict:
    """Sample part images for every (view, frame), backmap them jointly and
    score multi-view (per frame, across views) and multi-frame mIoU."""
    V, F, H, W, _ = bundle.rgb.shape
    vv, ff = np.meshgrid(np.arange(V), np.arange(F), indexing="ij")
    s = cfg.sample
    gen = sample(params, mcfg, bundle.rgb.reshape(-1, H, W, 3), vv.ravel(), ff.ravel(), steps=s.steps,
                 seed=seed, sigma_max=s.sigma_max, sigma_min=s.sigma_min, rho=s.rho)
    bm = cfg.backmap
    try:
        res = backmap(list(gen["part"]), None, bm.min_cluster_size, bm.color_tol, bm.min_area, bm.bg_tol)
        pred = np.stack(res.labels).reshape(V, F, H, W)
        n_parts = len(res.palette)
    except SP4DError as exc:        # nothing recoverable: every part scores 0
        log.warning("backmap failed: %s", exc)
        pred = np.zeros((V, F, H, W), dtype=np.int32)
        n_parts = 0
    fif = cfg.eval.first_image_filter
    mv = mean_report([evaluate(list(pred[:, f]), list(bundle.labels[:, f]), fif) for f in range(F)])
    mf = mean_report([evaluate(list(pred[v]), list(bundle.labels[v]), fif) for v in range(V)])
    return {"miou_mv": mv.miou, "ari_mv": mv.ari, "miou_mf": mf.miou, "ari_mf": mf.ari, "parts": n_parts}


def run_quality(cfg: RunConfig, bench: Benchmark, seed: int = 0, variant: str = "full",
                stage1=None) -> dict:
    """Train one variant for ``seed`` and score it on that seed's held-out
    objects. ``stage1`` reuses rgb-only parameters (identical across variants)."""
    spec = bench.spec()
    data = _data(_objects(spec, bench.train_seeds(seed)))
    test = _objects(spec, bench.test_seeds(seed))
    mcfg, over = variant_config(cfg, variant)
    t0 = time.perf_counter()
    if stage1 is None:
        stage1 = train(data, mcfg, cfg.train_config(stage="rgb-only", steps=bench.stage1_steps,
                                                    seed=seed)).params
    t1 = time.perf_counter()
    res = train(data, mcfg, cfg.train_config(stage="joint", seed=seed, **over), init=stage1,
                init_stage="rgb-only")
    t2 = time.perf_counter()
    scores = [score_object(res.params, mcfg, cfg, b, seed * 1000 + i) for i, b in enumerate(test)]
    t3 = time.perf_counter()
    tail = res.log[-max(1, len(res.log) // 10):]
    return {
        "seed": seed, "variant": variant, "objects": scores,
        "miou": float(np.mean([s["miou_mv"] for s in scores])),
        "final_loss": {k: float(np.mean([r[k] for r in tail])) for k in ("loss_rgb", "loss_part", "loss_contrast")},
        "seconds": {"stage1": t1 - t0, "joint": t2 - t1, "train": t2 - t0, "eval": t3 - t2},
        "stage1": stage1,
    }


def run_ablation(cfg: RunConfig, bench: Benchmark, seeds, variants=VARIANTS, callback=None) -> dict:
    t0 = time.perf_counter()
    runs = []
    for seed in seeds:
        stage1 = None
        for v in variants:
            r = run_quality(cfg, bench, seed, v, stage1)
            stage1 = r.pop("stage1")
            runs.append(r)
            if callback:
                callback(r)
    means = {v: float(np.mean([r["miou"] for r in runs if r["variant"] == v])) for v in variants}
    return {"runs": runs, "mean_miou": means, "seconds": time.perf_counter() - t0}


def ablation_verdict(means: dict, min_gap: float = 0.02) -> tuple[bool, list]:
    """Ordering full > no-fusion > no-contrast with each gap >= ``min_gap``."""
    gaps = [means["full"] - means["no-fusion"], means["no-fusion"] - means["no-contrast"]]
    return all(g >= min_gap for g in gaps), gaps


def _jsonable(doc):
    return json.loads(json.dumps(doc, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m sp4d.pipeline.experiment", description=__doc__.split("\n\n")[0])
    p.add_argument("kind", choices=("quality", "ablation"))
    p.add_argument("--config", help="run config JSON (defaults otherwise)")
    p.add_argument("--out", required=True, help="directory for result.json")
    p.add_argument("--seeds", default="0", help="comma-separated seeds (ablation: one run per seed and variant)")
    for f in dataclasses.fields(Benchmark):
        p.add_argument("--" + f.name.replace("_", "-"), type=int, default=f.default)
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(a.config)
        bench = Benchmark(**{f.name: getattr(a, f.name) for f in dataclasses.fields(Benchmark)})
        seeds = [int(s) for s in a.seeds.split(",") if s.strip()]
        show = lambda r: print(f"seed {r['seed']} {r['variant']}: miou {r['miou']:.3f} "
                               f"train {r['seconds']['train']:.0f}s", flush=True)
        if a.kind == "quality":
            runs = []
            for s in seeds:
                r = run_quality(cfg, bench, s)
                r.pop("stage1")
                show(r)
                runs.append(r)
            doc = {"runs": runs}
        else:
            doc = run_ablation(cfg, bench, seeds, callback=show)
            ok, gaps = ablation_verdict(doc["mean_miou"])
            doc.update(ordering_holds=ok, gaps=gaps)
            print("mean miou", {k: round(v, 3) for k, v in doc["mean_miou"].items()}, "ordering", ok)
        doc.update(config=cfg.to_dict(), config_hash=cfg.hash(), benchmark=dataclasses.asdict(bench))
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    except SP4DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
