"""Dataset-level evaluation and report files."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from cosalkit import metrics
from cosalkit.data import list_groups
from cosalkit.errors import ValidationError
from cosalkit.io import IMAGE_SUFFIXES, read_gray, write_json, write_text
from cosalkit.segmentation import binarize, resize_bilinear

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
AGGREGATE_KEYS = ("SR", "IoU", "MAE", "maxF", "Emax", "Sm")
ROW_COLUMNS = ("image_id", "group", "iou", "mae", "s_measure", "max_f", "max_e", "flags")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    beta_sq: float = 0.3
    n_thresholds: int = 256

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold {self.threshold} outside [0, 1]")
        if self.n_thresholds < 1:
            raise ValidationError("n_thresholds must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageScores:
    image_id: str
    group: str
    iou: float
    mae: float
    s_measure: float
    f_curve: np.ndarray
    e_curve: np.ndarray
    flags: tuple = ()

    @property
    def max_f(self) -> float:
        return float(self.f_curve.max())

    @property
    def max_e(self) -> float:
        return float(self.e_curve.max())


@dataclass
class MetricReport:
    per_image: list
    aggregate: dict
    per_image_max: dict
    config: EvalConfig
    issues: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "aggregates": dict(self.aggregate),
            "per_image_max_means": dict(self.per_image_max),
            "config": self.config.to_dict(),
            "n_images": len(self.per_image),
            "issues": self.issues,
        }


def score_image(image_id: str, group: str, pred, gt, cfg: EvalConfig = EvalConfig(),
                flags=()) -> ImageScores:
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    gt = np.asarray(gt).astype(bool)
    flags = tuple(flags)
    if not gt.any():
        flags += ("empty_gt",)
    return ImageScores(
        image_id=image_id,
        group=group,
        iou=metrics.iou(binarize(pred, cfg.threshold), gt),
        mae=metrics.mae(pred, gt),
        s_measure=metrics.s_measure(pred, gt),
        f_curve=metrics.f_curve(pred, gt, cfg.beta_sq, cfg.n_thresholds),
        e_curve=metrics.e_curve(pred, gt, cfg.n_thresholds),
        flags=flags,
    )


def aggregate(rows: list) -> tuple:
    """Six dataset aggregates, plus means of per-image maxima."""
    if not rows:
        raise ValidationError("no images to aggregate")
    ious = [r.iou for r in rows]
    f_mean = np.mean(np.stack([r.f_curve for r in rows]), axis=0)
    e_mean = np.mean(np.stack([r.e_curve for r in rows]), axis=0)
    agg = {
        "SR": metrics.success_rate(ious),
        "IoU": float(np.mean(ious)),
        "MAE": float(np.mean([r.mae for r in rows])),
        "maxF": float(f_mean.max()),
        "Emax": float(e_mean.max()),
        "Sm": float(np.mean([r.s_measure for r in rows])),
    }
    per_image_max = {
        "maxF": float(np.mean([r.max_f for r in rows])),
        "Emax": float(np.mean([r.max_e for r in rows])),
    }
    return agg, per_image_max


def evaluate_pairs(items: Iterable, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    """Evaluate ``(image_id, group, pred, gt)`` tuples held in memory."""
    rows = [score_image(i, g, p, m, cfg) for i, g, p, m in items]
    agg, per_max = aggregate(rows)
    return MetricReport(rows, agg, per_max, cfg)


def _find_prediction(folder: Path, stem: str) -> Optional[Path]:
    for suffix in (".png",) + tuple(s for s in IMAGE_SUFFIXES if s != ".png"):
        candidate = folder / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def evaluate_dataset(pred_root, gt_root, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    """Score ``pred_root/<group>/<stem>.png`` against ``gt_root/<group>/<stem>.png``.

    Predictions are resized to the mask's native resolution. A missing
    prediction is scored as an all-zero map and listed in ``issues``.
    """
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    if not pred_root.is_dir():
        raise ValidationError(f"prediction directory {pred_root} does not exist")
    rows, missing = [], []
    for folder in list_groups(gt_root):
        masks = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for mask_path in masks:
            gt = read_gray(mask_path) >= 128 / 255
            image_id = f"{folder.name}/{mask_path.stem}"
            pred_path = _find_prediction(pred_root / folder.name, mask_path.stem)
            flags = ()
            if pred_path is None:
                pred = np.zeros(gt.shape)
                flags = ("missing_prediction",)
                missing.append(image_id)
            else:
                pred = read_gray(pred_path)
                if pred.shape != gt.shape:
                    pred = resize_bilinear(pred, gt.shape)
            rows.append(score_image(mask_path.stem, folder.name, pred, gt, cfg, flags))
    if missing:
        log.warning("%d ground-truth images have no prediction", len(missing))
    agg, per_max = aggregate(rows)
    issues = {"missing_predictions": missing,
              "empty_gt": [f"{r.group}/{r.image_id}" for r in rows if "empty_gt" in r.flags]}
    return MetricReport(rows, agg, per_max, cfg, issues)


def _csv_text(header, records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(records)
    return buf.getvalue()


def write_report(report: MetricReport, out_dir, run_config: Optional[dict] = None) -> dict:
    """Write ``per_image.csv``, ``curves.csv`` and ``summary.json``."""
    out = Path(out_dir)
    n = report.config.n_thresholds
    rows = [(r.image_id, r.group, repr(r.iou), repr(r.mae), repr(r.s_measure), repr(r.max_f),
             repr(r.max_e), ";".join(r.flags)) for r in report.per_image]
    header = ["image_id", "group"] + [f"f@{k}" for k in range(n)] + [f"e@{k}" for k in range(n)]
    curves = [[r.image_id, r.group] + [repr(float(v)) for v in r.f_curve] +
              [repr(float(v)) for v in r.e_curve] for r in report.per_image]
    paths = {
        "per_image": write_text(out / "per_image.csv", _csv_text(ROW_COLUMNS, rows)),
        "curves": write_text(out / "curves.csv", _csv_text(header, curves)),
    }
    summary = report.summary()
    if run_config is not None:
        summary["run_config"] = run_config
    paths["summary"] = write_json(out / "summary.json", summary)
    return paths


def read_report_rows(out_dir) -> list:
    """Rebuild :class:`ImageScores` rows from a written report."""
    out = Path(out_dir)
    with open(out / "per_image.csv", newline="") as fh:
        base = list(csv.DictReader(fh))
    with open(out / "curves.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = (len(header) - 2) // 2
        curves = {(rec[1], rec[0]): rec[2:] for rec in reader}
    rows = []
    for rec in base:
        c = curves[(rec["group"], rec["image_id"])]
        rows.append(ImageScores(
            image_id=rec["image_id"], group=rec["group"], iou=float(rec["iou"]),
            mae=float(rec["mae"]), s_measure=float(rec["s_measure"]),
            f_curve=np.array([float(v) for v in c[:n]]),
            e_curve=np.array([float(v) for v in c[n:]]),
            flags=tuple(f for f in rec["flags"].split(";") if f)))
    return rows
