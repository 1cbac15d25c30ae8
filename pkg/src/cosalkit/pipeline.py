"""End-to-end runs: learn a concept per group, segment, write maps, evaluate."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from cosalkit.backend import Backend, make_backend
from cosalkit.concept import CONCEPT_SUFFIX, Concept, LearnConfig, learn_concept
from cosalkit.data import GroupDataset, ImageGroup
from cosalkit.errors import ConfigurationError, ValidationError
from cosalkit.evaluation import EvalConfig, evaluate_dataset, write_report
from cosalkit.io import write_image, write_json
from cosalkit.segmentation import SegmentConfig, make_head, resize_image, segment_group

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    backend: dict = field(default_factory=lambda: {"kind": "toy", "model_id": None, "seed": 0})
    learn: LearnConfig = field(default_factory=LearnConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    threshold: float = 0.5
    beta_sq: float = 0.3
    n_thresholds: int = 256
    workers: int = 1
    fail_fast: bool = False
    figures: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold {self.threshold} outside [0, 1]")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.segment.threshold != self.threshold:
            object.__setattr__(self, "segment", replace(self.segment, threshold=self.threshold))

    @property
    def eval(self) -> EvalConfig:
        return EvalConfig(self.threshold, self.beta_sq, self.n_thresholds)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "backend": dict(self.backend),
            "learn": self.learn.to_dict(),
            "segment": self.segment.to_dict(),
            "threshold": self.threshold,
            "beta_sq": self.beta_sq,
            "n_thresholds": self.n_thresholds,
            "workers": self.workers,
            "fail_fast": self.fail_fast,
            "figures": self.figures,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        data.pop("format_version", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown run config fields: {sorted(unknown)}")
        kwargs = dict(data)
        try:
            if "backend" in kwargs:
                kwargs["backend"] = {"kind": "toy", "model_id": None, "seed": 0, **kwargs["backend"]}
            if "learn" in kwargs:
                kwargs["learn"] = LearnConfig.from_dict({**LearnConfig().to_dict(), **kwargs["learn"]})
            if "segment" in kwargs:
                seg = {**SegmentConfig().to_dict(), **kwargs["segment"]}
                kwargs["segment"] = SegmentConfig.from_dict(seg)
            return cls(**kwargs)
        except (TypeError, AttributeError) as exc:
            raise ConfigurationError(f"invalid run config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

    def make_backend(self) -> Backend:
        b = self.backend
        return make_backend(b.get("kind", "toy"), b.get("model_id"), seed=b.get("seed", 0))


@dataclass
class PipelineResult:
    out_dir: Path
    concepts: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    report: Optional[object] = None

    @property
    def ok(self) -> bool:
        return not self.failures


def cache_key(group: ImageGroup, learn: LearnConfig, backend: Backend, working_size) -> str:
    blob = json.dumps([group.content_hash(), learn.digest(), backend.descriptor.model_id,
                       working_size], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _working_group(group: ImageGroup, size) -> list:
    if not size:
        return list(group.images())
    return [resize_image(img, size) for img in group.images()]


def obtain_concept(group: ImageGroup, cfg: RunConfig, backend: Backend, concept_dir: Path,
                   run_snapshot: dict) -> Concept:
    """Load the cached concept for ``group`` when its key matches, else learn it."""
    path = concept_dir / f"{group.name}{CONCEPT_SUFFIX}"
    key = cache_key(group, cfg.learn, backend, cfg.segment.working_size)
    if path.is_file():
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("cache_key") == key:
            log.info("group %s: using cached concept", group.name)
            return Concept.from_dict(payload)
    losses = []
    concept = learn_concept(_working_group(group, cfg.segment.working_size), cfg.learn, backend,
                            on_step=lambda step, loss: losses.append(loss))
    concept.save(path, extra={"cache_key": key, "group": group.name, "run_config": run_snapshot})
    if cfg.figures and losses:
        from cosalkit.plotting import plot_loss

        plot_loss(losses, concept_dir / f"{group.name}.loss.png")
    return concept


def process_group(group: ImageGroup, cfg: RunConfig, backend: Backend, out: Path,
                  snapshot: dict) -> Concept:
    concept = obtain_concept(group, cfg, backend, out / "concepts", snapshot)
    seg_cfg = replace(cfg.segment, fail_fast=True)
    results = segment_group(group, concept, seg_cfg, backend, make_head(seg_cfg, backend))
    meta = {"format_version": str(FORMAT_VERSION), "run_config": snapshot}
    for rec, (soft, binary) in zip(group.records, results):
        write_image(out / "soft" / group.name / f"{rec.stem}.png", soft, {**meta, "kind": "soft"})
        write_image(out / "binary" / group.name / f"{rec.stem}.png", binary.astype(float),
                    {**meta, "kind": "binary"})
    return concept


def run_pipeline(dataset: GroupDataset, cfg: RunConfig, out_dir,
                 backend: Optional[Backend] = None) -> PipelineResult:
    """Concept learning, segmentation and (with masks) evaluation for every group."""
    out = Path(out_dir)
    for src in (dataset.root, dataset.gt_root):
        if src is not None and out.resolve() == Path(src).resolve():
            raise ConfigurationError("output directory must not be an input directory")
    backend = backend or cfg.make_backend()
    snapshot = cfg.to_dict()
    result = PipelineResult(out)

    def work(group):
        try:
            return group.name, process_group(group, cfg, backend, out, snapshot), None
        except Exception as exc:
            if cfg.fail_fast:
                raise
            log.error("group %s failed: %s", group.name, exc)
            return group.name, None, exc

    workers = cfg.workers if backend.descriptor.thread_safe else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, dataset.groups))
    else:
        outcomes = [work(g) for g in dataset.groups]
    for name, concept, exc in outcomes:
        if exc is None:
            result.concepts[name] = out / "concepts" / f"{name}{CONCEPT_SUFFIX}"
        else:
            result.failures[name] = f"{type(exc).__name__}: {exc}"

    if dataset.gt_root is not None:
        report = evaluate_dataset(out / "soft", dataset.gt_root, cfg.eval)
        write_report(report, out / "report", run_config=snapshot)
        if cfg.figures:
            from cosalkit.plotting import plot_metric_curves

            plot_metric_curves(report, out / "report" / "curves.png")
        result.report = report

    write_json(out / "run_manifest.json", {
        "format_version": FORMAT_VERSION,
        "run_config": snapshot,
        "groups": {g.name: ("failed" if g.name in result.failures else "ok") for g in dataset.groups},
        "failures": result.failures,
    })
    return result
