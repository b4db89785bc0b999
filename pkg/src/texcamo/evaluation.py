"""Camouflage evaluation: AP@0.5 and mean target confidence over a pose grid.

Textures are always rendered by the scene oracle here; the neural renderer is
only used while generating an attack.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Box, iou
from .scene import CameraPose, SceneTransformation, object_box, render, segment

CSV_COLUMNS = ("texture", "distance_m", "pitch_deg", "yaw_deg", "n_images", "ap50", "mean_conf")
ALL = "all"


class EvaluationError(ValueError):
    pass


def average_precision(detections, gt_boxes, iou_thr: float = 0.5, class_id: int | None = None) -> float:
    """All-points interpolated AP over a set of images.

    ``detections[i]`` and ``gt_boxes[i]`` hold the detections and ground-truth
    boxes of image ``i``.  Detections are ranked by score across the whole set
    and greedily matched to the best still-unmatched ground truth of their image.
    """
    if len(detections) != len(gt_boxes):
        raise EvaluationError("detections and ground truth cover different image counts")
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        raise EvaluationError("average precision needs at least one ground-truth box")
    ranked = [(d.score, img, d) for img, dets in enumerate(detections) for d in dets
              if class_id is None or d.class_id == class_id]
    if not ranked:
        return 0.0
    ranked.sort(key=lambda r: -r[0])
    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(ranked))
    for k, (_, img, det) in enumerate(ranked):
        best, best_iou = -1, iou_thr
        for g, box in enumerate(gt_boxes[img]):
            if matched[img][g]:
                continue
            o = iou(det.box, box)
            if o >= best_iou:
                best, best_iou = g, o
        if best >= 0:
            matched[img][best] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(ranked) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass(frozen=True)
class PoseGrid:
    distances: tuple[float, ...] = (5.0, 10.0, 15.0)
    pitches: tuple[float, ...] = (0.0, 15.0, 30.0)
    yaw_step: float = 30.0

    def cells(self) -> list[CameraPose]:
        if not self.distances or not self.pitches or not self.yaw_step > 0:
            raise EvaluationError("empty pose grid")
        yaws = np.arange(0.0, 360.0, self.yaw_step)
        return [CameraPose(float(d), float(p), float(y)) for d in self.distances for p in self.pitches for y in yaws]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, dict]:
        return {r["texture"]: r for r in self.rows if r["distance_m"] == ALL}

    def cell_rows(self) -> list[dict]:
        return [r for r in self.rows if r["distance_m"] != ALL]


def _default_renderer(scene, texture, N):
    return render(scene, texture, N)


def pose_grid_eval(textures: dict, grid: PoseGrid, scenes, det, N: int = 64,
                   renderer=None, batch_size: int = 256) -> EvalReport:
    """Render every texture on every scene at every grid pose, detect, score.

    ``scenes`` supply lighting, background and placement; their own camera is
    replaced by each grid pose.  ``renderer(scene, texture, N)`` defaults to the
    oracle.
    """
    cells = grid.cells()
    scenes = list(scenes)
    if not scenes:
        raise EvaluationError("no scenes to evaluate")
    if not textures:
        raise EvaluationError("no textures to evaluate")
    renderer = renderer or _default_renderer
    target = det.target_class_id
    posed = [[s.with_camera(c) for s in scenes] for c in cells]
    gts = [[[object_box(segment(s, N))] for s in row] for row in posed]
    report = EvalReport(config={"grid": asdict(grid), "n_scenes": len(scenes), "N": N,
                                "scene_ids": [s.scene_id for s in scenes], "textures": sorted(textures)})
    for name, tex in textures.items():
        all_dets, all_gts, all_conf = [], [], []
        cell_rows = []
        for cell, row, gt in zip(cells, posed, gts):
            imgs = np.stack([renderer(s, tex, N) for s in row])
            dets = det.detect_many(imgs)
            conf = [max((d.score for d in ds if d.class_id == target), default=0.0) for ds in dets]
            cell_rows.append({
                "texture": name, "distance_m": cell.distance, "pitch_deg": cell.pitch, "yaw_deg": cell.yaw,
                "n_images": len(row), "ap50": average_precision(dets, gt, class_id=target),
                "mean_conf": float(np.mean(conf)),
            })
            all_dets += dets
            all_gts += gt
            all_conf += conf
        report.rows += cell_rows
        report.rows.append({
            "texture": name, "distance_m": ALL, "pitch_deg": ALL, "yaw_deg": ALL,
            "n_images": len(all_dets), "ap50": average_precision(all_dets, all_gts, class_id=target),
            "mean_conf": float(np.mean(all_conf)),
        })
    return report


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def plot_data(report: EvalReport) -> dict:
    """Per-texture AP and confidence vs yaw for each (distance, pitch) panel."""
    panels: dict[str, dict] = {}
    for r in report.cell_rows():
        key = f"d{r['distance_m']:g}_p{r['pitch_deg']:g}"
        panel = panels.setdefault(key, {"distance_m": r["distance_m"], "pitch_deg": r["pitch_deg"], "series": {}})
        s = panel["series"].setdefault(r["texture"], {"yaw_deg": [], "ap50": [], "mean_conf": []})
        s["yaw_deg"].append(r["yaw_deg"])
        s["ap50"].append(r["ap50"])
        s["mean_conf"].append(r["mean_conf"])
    return {"panels": panels, "aggregates": report.aggregates()}


def emit_report(report: EvalReport, directory, provenance: dict | None = None) -> list[Path]:
    """Write ``eval.csv``, ``eval.json`` and ``plot_data.json``."""
    if not report.rows:
        raise EvaluationError("empty report")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / "eval.csv", d / "eval.json", d / "plot_data.json"]
    paths[0].write_text(report_csv(report))
    paths[1].write_text(json.dumps({"aggregates": report.aggregates(), "config": report.config,
                                    "provenance": provenance or {}}, indent=2, sort_keys=True) + "\n")
    paths[2].write_text(json.dumps(plot_data(report), indent=2, sort_keys=True) + "\n")
    return paths


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for c in ("distance_m", "pitch_deg", "yaw_deg"):
            if r[c] != ALL:
                r[c] = float(r[c])
        r["n_images"] = int(r["n_images"])
        r["ap50"] = float(r["ap50"])
        r["mean_conf"] = float(r["mean_conf"])
    return rows
