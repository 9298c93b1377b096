"""PSNR evaluation of checkpoints, model comparison tables and per-kernel plots."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .degrade import DatasetManifest, kernel_bank
from .errors import InvalidArgument
from .image import load_image, psnr

MODEL_ORDER = ("none", "cgan", "cyclegan")
TASK_LABELS = {
    "background": "Background removal",
    "blur": "Deblurring",
    "watermark": "Watermark removal",
    "fade": "Defading",
}


def _finite_mean(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    task: str
    model: str
    per_image: list[dict] = field(default_factory=list)
    manifest: str | None = None  # digest of the evaluated manifest
    mean_psnr_db: float | None = None
    excluded_infinite_count: int = 0
    per_group_mean: dict[str, float | None] = field(default_factory=dict)

    @classmethod
    def from_images(cls, task, model, per_image, manifest=None) -> "EvalReport":
        """Build a report and its aggregates; infinite PSNRs are left out of every mean."""
        rep = cls(task, model, list(per_image), manifest)
        vals = [r["psnr_db"] for r in rep.per_image]
        rep.excluded_infinite_count = sum(1 for v in vals if v == math.inf)
        rep.mean_psnr_db = _finite_mean(vals)
        groups: dict[str, list] = {}
        for r in rep.per_image:
            if r.get("group") is not None:
                groups.setdefault(r["group"], []).append(r["psnr_db"])
        rep.per_group_mean = {g: _finite_mean(v) for g, v in sorted(groups.items())}
        return rep

    def to_json(self) -> dict:
        def enc(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "task": self.task,
            "model": self.model,
            "manifest": self.manifest,
            "mean_psnr_db": self.mean_psnr_db,
            "excluded_infinite_count": self.excluded_infinite_count,
            "per_group_mean": self.per_group_mean,
            "per_image": [
                {**r, "psnr_db": enc(r["psnr_db"]), "infinite": r["psnr_db"] == math.inf} for r in self.per_image
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        per_image = []
        for r in d.get("per_image", []):
            r = dict(r)
            if r.pop("infinite", False):
                r["psnr_db"] = math.inf
            per_image.append(r)
        return cls(d["task"], d["model"], per_image, d.get("manifest"), d.get("mean_psnr_db"),
                   d.get("excluded_infinite_count", 0), d.get("per_group_mean", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def manifest_digest(manifest: DatasetManifest) -> str:
    body = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in manifest.records)
    return hashlib.sha256(f"{manifest.task}/{manifest.split}\n{body}".encode()).hexdigest()[:16]


def evaluate(manifest: DatasetManifest, ckpt=None, mode: str = "standard") -> EvalReport:
    """PSNR of every test record after cleaning with ``ckpt``.

    Without a checkpoint the noisy image itself is scored, which gives the
    degradation baseline (model ``"none"``).
    """
    if manifest.pairing != "paired":
        raise InvalidArgument("evaluation needs a paired manifest")
    from .train import clean_image

    rows = []
    for rec in manifest.records:
        noisy = load_image(manifest.resolve(rec.noisy))
        clean = load_image(manifest.resolve(rec.clean))
        out = noisy if ckpt is None else clean_image(noisy, ckpt)
        res = psnr(clean, out, mode)
        rows.append({"noisy": rec.noisy, "clean": rec.clean, "group": rec.group, "mse": res.mse,
                     "psnr_db": res.psnr_db})
    model = "none" if ckpt is None else ckpt.config.model
    return EvalReport.from_images(manifest.task, model, rows, manifest_digest(manifest))


# -- comparison ----------------------------------------------------------------


@dataclass
class ComparisonRow:
    task: str
    values: dict[str, float | None]
    winner: str | None
    margin_db: float | None


@dataclass
class ComparisonTable:
    models: list[str]
    rows: list[ComparisonRow]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", *self.models, "winner", "margin_db"])
        for r in self.rows:
            cells = ["" if r.values.get(m) is None else f"{r.values[m]:.3f}" for m in self.models]
            margin = "" if r.margin_db is None else f"{r.margin_db:.3f}"
            w.writerow([r.task, *cells, r.winner or "", margin])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        header = ["Task", *self.models]
        body = []
        for r in self.rows:
            cells = []
            for m in self.models:
                v = r.values.get(m)
                cell = "-" if v is None else f"{v:.3f}"
                cells.append(cell + (" *" if m == r.winner else ""))
            body.append([TASK_LABELS.get(r.task, r.task), *cells])
        widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
        fmt = lambda row: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)  # noqa: E731
                                    for i, (c, w) in enumerate(zip(row, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]
        return "\n".join(lines) + "\n\n* best mean PSNR (dB) in the row\n"

    def plot(self, path):
        fig, ax = plotting.new_figure()
        n = len(self.models)
        x = np.arange(len(self.rows))
        width = 0.8 / max(n, 1)
        for i, m in enumerate(self.models):
            vals = [np.nan if r.values.get(m) is None else r.values[m] for r in self.rows]
            ax.bar(x + (i - (n - 1) / 2) * width, vals, width, label=m, color=plotting.color_for(m, i))
        ax.set_xticks(x)
        ax.set_xticklabels([TASK_LABELS.get(r.task, r.task) for r in self.rows])
        ax.set_ylabel("mean PSNR (dB)")
        ax.legend(frameon=False)
        plotting.save_svg(fig, path)


def _model_key(m):
    return (MODEL_ORDER.index(m) if m in MODEL_ORDER else len(MODEL_ORDER), m)


def compare(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Tasks as rows, models as columns; the best mean PSNR per row is the winner.

    Reports for the same task must come from the same manifest.
    """
    if not reports:
        raise InvalidArgument("nothing to compare")
    by_task: dict[str, dict[str, EvalReport]] = {}
    for r in reports:
        row = by_task.setdefault(r.task, {})
        if r.model in row:
            raise InvalidArgument(f"two reports for task {r.task} / model {r.model}")
        if any(o.manifest != r.manifest for o in row.values()):
            raise InvalidArgument(f"reports for task {r.task} were computed on different manifests")
        row[r.model] = r
    models = sorted({r.model for r in reports}, key=_model_key)
    task_order = [t for t in TASK_LABELS if t in by_task] + sorted(t for t in by_task if t not in TASK_LABELS)
    rows = []
    for t in task_order:
        values = {m: rep.mean_psnr_db for m, rep in by_task[t].items()}
        ranked = sorted(((v, m) for m, v in values.items() if v is not None), reverse=True)
        winner = margin = None
        if len(ranked) >= 2:
            winner, margin = ranked[0][1], ranked[0][0] - ranked[1][0]
        rows.append(ComparisonRow(t, values, winner, margin))
    return ComparisonTable(models, rows)


# -- per-kernel plot -----------------------------------------------------------


def group_order(tags) -> list[str]:
    """Kernel-bank order for ``kNN`` tags, anything else sorted after."""
    bank = [f"k{i:02d}" for i in range(len(kernel_bank()))]
    known = [t for t in bank if t in tags]
    return known + sorted(t for t in tags if t not in bank)


def per_kernel_plot(reports: EvalReport | Sequence[EvalReport], out_dir, stem: str = "per_kernel") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` of mean PSNR per kernel group and model, and ``<stem>.svg`` drawn from it."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    tags = set()
    for r in reports:
        tags.update(r.per_group_mean)
    if len(tags) < 2:
        raise InvalidArgument("per-kernel plot needs at least two group tags")
    order = group_order(tags)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_index", "group", "model", "mean_psnr_db"])
        for r in sorted(reports, key=lambda r: _model_key(r.model)):
            for i, g in enumerate(order):
                v = r.per_group_mean.get(g)
                w.writerow([i, g, r.model, "" if v is None else repr(float(v))])
    render_per_kernel(csv_path, svg_path)
    return csv_path, svg_path


def render_per_kernel(csv_path, svg_path) -> Path:
    series: dict[str, list[tuple[int, float]]] = {}
    labels: dict[int, str] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["group_index"])
            labels[i] = row["group"]
            v = float(row["mean_psnr_db"]) if row["mean_psnr_db"] else np.nan
            series.setdefault(row["model"], []).append((i, v))
    fig, ax = plotting.new_figure()
    for k, (model, pts) in enumerate(series.items()):
        xs, ys = zip(*pts)
        ax.plot(np.array(xs) + 1, ys, marker="o", label=model, color=plotting.color_for(model, k))
    ax.set_xticks([i + 1 for i in sorted(labels)])
    ax.set_xlabel("blur kernel set")
    ax.set_ylabel("mean PSNR (dB)")
    ax.legend(frameon=False)
    plotting.save_svg(fig, svg_path)
    return Path(svg_path)
