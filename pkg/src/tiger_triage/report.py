"""Error-analysis sampling, training curves and the static HTML report."""

from __future__ import annotations

import csv
import html
import json
import os
import random
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .dataset import CLASS_NAMES, ImageRecord  # noqa: E402
from .errors import MissingHeatmap, SampleTooLarge  # noqa: E402
from .gradcam import Heatmap, upsample_overlay  # noqa: E402
from .preprocess import INPUT_SIZE, load_resized  # noqa: E402
from .train import HISTORY_COLUMNS, EpochRecord  # noqa: E402

CATEGORIES = ("clear", "damaged_or_occluded")


def sample_error_set(records: Sequence[ImageRecord], n: int, seed: int = 42) -> list[ImageRecord]:
    """Seeded sample without replacement, split as evenly as possible between classes.

    When one class is too small for its half, the other class makes up the
    difference.
    """
    if n > len(records):
        raise SampleTooLarge(f"cannot sample {n} from {len(records)} records")
    by_class: dict[int, list[ImageRecord]] = defaultdict(list)
    for r in sorted(records, key=lambda r: r.id):
        by_class[r.target].append(r)
    classes = sorted(by_class)
    quota = {c: n // len(classes) for c in classes}
    for c in sorted(classes, reverse=True)[: n % len(classes)]:
        quota[c] += 1  # odd remainder goes to the positive class first
    for c in classes:
        spill = quota[c] - len(by_class[c])
        if spill > 0:
            quota[c] -= spill
            for other in classes:
                if other != c:
                    quota[other] += spill
    rng = random.Random(seed)
    out: list[ImageRecord] = []
    for c in classes:
        out.extend(rng.sample(by_class[c], quota[c]))
    return out


@dataclass
class ErrorCase:
    record: ImageRecord
    predicted: int
    probability: float
    heatmaps: list[Heatmap] = field(default_factory=list)
    category: str | None = None

    def __post_init__(self):
        if self.category is None:
            self.category = self.record.category
        if self.predicted == self.record.target:
            raise ValueError(f"record {self.record.id} was classified correctly")

    @property
    def kind(self) -> str:
        # tiger predicted as non-tiger is a false negative
        return "false_negative" if self.record.target == 1 else "false_positive"


def _rel(path: Path, start: Path) -> str:
    return Path(os.path.relpath(path, start)).as_posix()


def _fmt(v, digits: int = 4) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return html.escape(str(v))


def build_gallery(cases: Sequence[ErrorCase], out_dir, *, summary: dict | None = None,
                  curves: dict | None = None, image_size=INPUT_SIZE) -> Path:
    """Write ``index.html`` grouping misclassifications, plus gallery images.

    Each row shows the input and one overlay per captured layer.
    """
    out_dir = Path(out_dir)
    gallery = out_dir / "gallery"
    gallery.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[dict]] = {"false_negative": [], "false_positive": []}
    case_rows = []
    for case in cases:
        if not case.heatmaps:
            raise MissingHeatmap(f"case {case.record.id} has no heatmaps", row_id=case.record.id)
        img = load_resized(case.record.path, image_size, case.record.id)
        original = gallery / f"{case.record.id}_original.png"
        Image.fromarray(np.round(img.data.transpose(1, 2, 0) * 255).astype(np.uint8)).save(original)
        overlays = []
        for hm in case.heatmaps:
            p = gallery / f"{case.record.id}_{hm.layer}_{CLASS_NAMES[hm.class_index]}.png"
            Image.fromarray(upsample_overlay(hm, img)).save(p)
            overlays.append({"layer": hm.layer, "path": _rel(p, out_dir)})
        row = {
            "id": case.record.id,
            "label": CLASS_NAMES[case.record.target],
            "predicted": CLASS_NAMES[case.predicted],
            "probability": case.probability,
            "category": case.category,
            "kind": case.kind,
            "original": _rel(original, out_dir),
            "overlays": overlays,
        }
        groups[case.kind].append(row)
        case_rows.append(row)

    summary = dict(summary or {})
    summary["error_counts"] = {k: len(v) for k, v in groups.items()}
    summary["cases"] = case_rows
    if curves:
        summary["curves"] = {k: _rel(Path(v), out_dir) for k, v in curves.items()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    (out_dir / "index.html").write_text(_render_html(summary, groups))
    return out_dir / "index.html"


def _metrics_table(summary: dict) -> str:
    parts = []
    for phase in ("train", "test"):
        block = summary.get("metrics", {}).get(phase)
        if not isinstance(block, dict):
            continue
        cells = "".join(f"<tr><td>{html.escape(k)}</td><td>{_fmt(v)}</td></tr>"
                        for k, v in block.items() if not isinstance(v, (dict, list)))
        parts.append(f"<h3>{phase}</h3><table>{cells}</table>")
    table2 = summary.get("table2")
    if table2:
        head = "".join(f"<th>{html.escape(k)}</th>" for k in table2)
        body = "".join(f"<td>{_fmt(v)}</td>" for v in table2.values())
        parts.append(f"<h3>Confusion counts</h3><table><tr>{head}</tr><tr>{body}</tr></table>")
    return "\n".join(parts)


def _render_html(summary: dict, groups: dict[str, list[dict]]) -> str:
    counts = summary["error_counts"]
    out = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>Tiger triage report</title>",
           "<style>body{font-family:sans-serif}td,th{border:1px solid #ccc;padding:4px}"
           "img{width:160px}</style></head><body>",
           "<h1>Tiger triage report</h1>"]
    if summary.get("config_hash"):
        out.append(f"<p>config hash: <code>{html.escape(summary['config_hash'])}</code></p>")
    out.append("<h2>Metrics</h2>")
    out.append(_metrics_table(summary))
    out.append("<h2>Error counts</h2><table><tr><th>group</th><th>cases</th></tr>")
    for kind, n in counts.items():
        out.append(f"<tr><td>{kind}</td><td>{n}</td></tr>")
    out.append("</table>")
    for name, rel in summary.get("curves", {}).items():
        if rel.endswith(".png"):
            out.append(f"<h3>{html.escape(name)}</h3><img style='width:640px' src='{html.escape(rel)}'>")
    titles = {"false_negative": "Tiger images predicted as non-tiger",
              "false_positive": "Non-tiger images predicted as tiger"}
    for kind, rows in groups.items():
        out.append(f"<h2 id='{kind}'>{titles[kind]} ({len(rows)})</h2>")
        out.append("<table><tr><th>id</th><th>input</th><th>layers</th>"
                   "<th>probability</th><th>category</th></tr>")
        for r in rows:
            imgs = "".join(f"<figure><img src='{html.escape(o['path'])}'>"
                           f"<figcaption>{html.escape(o['layer'])}</figcaption></figure>"
                           for o in r["overlays"])
            out.append(f"<tr class='case'><td>{html.escape(r['id'])}</td>"
                       f"<td><img src='{html.escape(r['original'])}'></td>"
                       f"<td style='display:flex'>{imgs}</td>"
                       f"<td>{_fmt(r['probability'])}</td><td>{_fmt(r['category'])}</td></tr>")
        out.append("</table>")
    out.append("</body></html>")
    return "\n".join(out)


def plot_histories(histories: Sequence[EpochRecord], out_dir) -> dict[str, Path]:
    """Per-fold accuracy and loss curves for both phases, plus the CSV they were drawn from."""
    if not histories:
        raise ValueError("no history to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [row for rec in histories for row in rec.rows()]
    csv_path = out_dir / "history.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    series: dict[tuple[str, str, int], list[tuple[int, float]]] = defaultdict(list)
    for row in rows:
        for metric in ("accuracy", "loss"):
            series[(metric, row["phase"], row["fold"])].append((row["epoch"], row[metric]))

    paths = {"history_csv": csv_path}
    for metric in ("accuracy", "loss"):
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
        for ax, phase in zip(axes, ("train", "val")):
            for (m, ph, fold), pts in sorted(series.items()):
                if m == metric and ph == phase:
                    xs, ys = zip(*sorted(pts))
                    ax.plot(xs, ys, marker="o" if len(xs) == 1 else None, label=f"fold {fold}")
            ax.set_title(f"{phase} {metric}")
            ax.set_xlabel("epoch")
            if ax.lines:
                ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths[metric] = path
    return paths
