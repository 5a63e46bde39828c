"""Static report: PNG figures and an index.html, built from whatever a run
directory contains (training logs, sampled images, label maps, metrics).
Rendering is deterministic, so identical run directories give byte-identical
files."""

from __future__ import annotations

import html
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..fusion.train import smoothed  # noqa: E402
from ..tensorio import read_labelmap, read_tensor  # noqa: E402
from .cli import IMAGE_RE  # noqa: E402

PNG_META = {"Software": None}
MAX_STRIPS = 4
LOSS_KEYS = ("loss", "loss_rgb", "loss_part", "loss_contrast")
METRIC_KEYS = ("miou", "ari", "f1", "macc")


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=80, metadata=PNG_META)
    plt.close(fig)


def _rel(p: Path, root: Path) -> str:
    return p.relative_to(root).as_posix()


def find_inputs(run: Path) -> dict:
    files = sorted(p for p in run.rglob("*") if p.is_file())
    logs = [p for p in files if p.name == "train_log.jsonl"]
    metrics = [p for p in files if p.name.startswith("metrics_") and p.suffix == ".json"]
    samples, labels = [], {}
    for d in sorted({p.parent.parent for p in files if p.parent.name == "encoded"}):
        if any(IMAGE_RE.match(q.name) for q in (d / "encoded").glob("*.sp4t")):
            samples.append(d)
    for p in files:
        if p.parent.name == "labels" and p.suffix == ".png":
            labels.setdefault(p.parent.parent.name, []).append(p.parent.parent)
    labels = {k: sorted(set(v)) for k, v in labels.items()}
    return {"logs": logs, "metrics": metrics, "samples": samples, "labels": labels}


def loss_figure(logs, run: Path, path: Path) -> None:
    fig, axes = plt.subplots(1, len(logs), figsize=(5 * len(logs), 3.2), squeeze=False)
    for ax, lp in zip(axes[0], logs):
        rows = [json.loads(x) for x in lp.read_text().splitlines() if x.strip()]
        for k in LOSS_KEYS:
            vals = [r[k] for r in rows if k in r]
            if not vals or not np.any(vals):
                continue
            sm = smoothed(vals, max(1, min(20, len(vals) // 5)))
            ax.plot(np.arange(len(sm)) + (len(vals) - len(sm)), sm, label=k, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(_rel(lp.parent, run) or ".", fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def metrics_figure(docs, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / max(len(docs), 1)
    for i, (name, doc) in enumerate(docs):
        agg = doc.get("aggregate") or {}
        vals = [agg.get(k, 0.0) for k in METRIC_KEYS]
        ax.bar(np.arange(len(METRIC_KEYS)) + i * width, vals, width, label=name)
    ax.set_xticks(np.arange(len(METRIC_KEYS)) + width * (len(docs) - 1) / 2)
    ax.set_xticklabels(METRIC_KEYS)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def _label_rgb(lab: np.ndarray) -> np.ndarray:
    cmap = plt.get_cmap("tab20")
    img = np.ones(lab.shape + (3,))
    for p in np.unique(lab):
        if p:
            img[lab == p] = cmap((int(p) - 1) % 20)[:3]
    return img


def strip_figure(obj_dir: Path, label_dirs, path: Path) -> None:
    """One column per view at frame 0: generated RGB, generated parts and any
    label maps found for the same object."""
    rgb = {k: p for k, p in ((IMAGE_RE.match(p.name), p) for p in sorted((obj_dir / "rgb").glob("*.sp4t")))
           if k} if (obj_dir / "rgb").is_dir() else {}
    enc = sorted((obj_dir / "encoded").glob("*.sp4t"))
    views = sorted({int(IMAGE_RE.match(p.name).group(1)) for p in enc if IMAGE_RE.match(p.name)})
    rows = [("parts", obj_dir / "encoded", "tensor")]
    if rgb:
        rows.insert(0, ("rgb", obj_dir / "rgb", "tensor"))
    rows += [(f"labels ({d.parent.name})", d / "labels", "labels") for d in label_dirs]
    fig, axes = plt.subplots(len(rows), len(views), figsize=(1.2 * len(views), 1.25 * len(rows)), squeeze=False)
    for r, (title, d, kind) in enumerate(rows):
        for c, v in enumerate(views):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if kind == "tensor":
                p = d / f"v{v:02d}_f00.sp4t"
                img = np.clip(read_tensor(p), 0, 1) if p.exists() else None
            else:
                p = d / f"v{v:02d}_f00.png"
                img = _label_rgb(read_labelmap(p)) if p.exists() else None
            if img is not None:
                ax.imshow(img, interpolation="nearest")
            if c == 0:
                ax.set_ylabel(title, fontsize=6)
            if r == 0:
                ax.set_title(f"view {v}", fontsize=6)
    fig.suptitle(obj_dir.name, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _table(doc) -> str:
    head = "".join(f"<th>{k}</th>" for k in ("object",) + METRIC_KEYS)
    rows = []
    objs = dict(sorted((doc.get("objects") or {}).items()))
    if doc.get("aggregate"):
        objs["mean"] = doc["aggregate"]
    for name, r in objs.items():
        cells = "".join(f"<td>{r.get(k, float('nan')):.4f}</td>" for k in METRIC_KEYS)
        rows.append(f"<tr><td>{html.escape(name)}</td>{cells}</tr>")
    return f"<table><tr>{head}</tr>{''.join(rows)}</table>"


def build_report(run, out) -> Path:
    run, out = Path(run), Path(out)
    if not run.is_dir():
        from ..errors import DomainError
        raise DomainError(f"run directory {run} not found")
    out.mkdir(parents=True, exist_ok=True)
    found = find_inputs(run)
    body, missing = [], []

    if found["logs"]:
        loss_figure(found["logs"], run, out / "loss_curves.png")
        body.append('<h2>Training loss</h2><img src="loss_curves.png" alt="loss curves">')
    else:
        missing.append("training logs (train_log.jsonl)")

    docs = []
    for p in found["metrics"]:
        try:
            docs.append((_rel(p, run), json.loads(p.read_text())))
        except ValueError:
            missing.append(f"unreadable metrics file {_rel(p, run)}")
    if docs:
        metrics_figure(docs, out / "metrics.png")
        body.append('<h2>Metrics</h2><img src="metrics.png" alt="metric bars">')
        for name, doc in docs:
            note = html.escape(doc.get("note", ""))
            body.append(f"<h3>{html.escape(name)}</h3><p>{note}</p>{_table(doc)}")
            if doc.get("missing"):
                items = "".join(f"<li>{html.escape(m['object'])}: {len(m['files'])} file(s)</li>"
                                for m in doc["missing"])
                body.append(f"<p>Objects without predictions:</p><ul>{items}</ul>")
    else:
        missing.append("metrics (metrics_*.json)")

    if found["samples"]:
        body.append("<h2>Samples (frame 0)</h2>")
        for i, d in enumerate(found["samples"][:MAX_STRIPS]):
            name = f"strip_{i:02d}.png"
            strip_figure(d, [x for x in found["labels"].get(d.name, []) if x != d], out / name)
            body.append(f'<h3>{html.escape(_rel(d, run))}</h3><img src="{name}" alt="image strip">')
    else:
        missing.append("sampled images (<object>/encoded/*.sp4t)")

    if missing:
        body.append("<h2>Missing inputs</h2><ul>" + "".join(f"<li>{html.escape(m)}</li>" for m in missing)
                    + "</ul>")
    page = ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>sp4d report</title>"
            "<style>body{font-family:sans-serif}td,th{padding:2px 8px;text-align:right}</style></head>"
            f"<body><h1>Run report: {html.escape(run.name)}</h1>\n" + "\n".join(body) + "\n</body></html>\n")
    idx = out / "index.html"
    idx.write_text(page)
    return idx
