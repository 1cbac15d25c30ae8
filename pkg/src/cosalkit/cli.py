"""Command line entry point: ``cosalkit <subcommand> ...``.

Exit codes: 0 success, 1 some groups failed, 2 invalid configuration or input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from cosalkit.errors import BackendUnavailableError, ConfigurationError, CosalError, ValidationError

log = logging.getLogger("cosalkit")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _learn_config(args, base=None):
    from cosalkit.concept import LearnConfig
    from cosalkit.resampling import ResamplingConfig

    cfg = base or LearnConfig()
    changes = {}
    for flag, name in (("lr", "learning_rate"), ("batch", "batch_size"), ("steps", "max_steps"),
                       ("init_token", "init_token"), ("seed", "seed"), ("prompt", "prompt_template")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "uniform", False):
        changes["resampling"] = None
    elif getattr(args, "alpha", None) is not None:
        changes["resampling"] = replace(cfg.resampling or ResamplingConfig(), alpha=args.alpha)
    return replace(cfg, **changes)


def _backend(args):
    from cosalkit.backend import make_backend

    return make_backend(args.backend, getattr(args, "model_id", None),
                        seed=getattr(args, "backend_seed", 0) or 0)


def _group_from_dir(path):
    from cosalkit.data import ImageGroup, ImageRecord, _image_files

    folder = Path(path)
    if not folder.is_dir():
        raise ValidationError(f"group directory {folder} does not exist")
    files = _image_files(folder)
    if not files:
        raise ValidationError(f"group {folder} contains no images")
    return ImageGroup(folder.name, [ImageRecord(f.name, path=f) for f in files])


def cmd_learn(args) -> int:
    from cosalkit.concept import learn_concept
    from cosalkit.pipeline import _working_group

    cfg = _learn_config(args)
    backend = _backend(args)
    group = _group_from_dir(args.group)
    losses = []
    concept = learn_concept(_working_group(group, args.working_size), cfg, backend,
                            on_step=lambda step, loss: losses.append(loss))
    out = Path(args.out)
    concept.save(out, extra={"group": group.name, "learn_config": cfg.to_dict(),
                             "working_size": args.working_size})
    if args.plot and losses:
        from cosalkit.plotting import plot_loss

        plot_loss(losses, out.with_name(out.name.replace(".concept.json", "") + ".loss.png"))
    print(f"{group.name}: {len(group)} images, final loss {concept.training_meta['final_loss']:.6g} -> {out}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from cosalkit.backend import backend_for
    from cosalkit.concept import Concept, concept_from_token
    from cosalkit.io import write_image
    from cosalkit.segmentation import SegmentConfig, segment_group

    if args.concept:
        concept = Concept.load(args.concept)
        backend = backend_for(concept.backend)
    else:
        backend = _backend(args)
        concept = concept_from_token(args.token, backend)
    cfg = SegmentConfig(t=args.t, threshold=args.threshold, head=args.head,
                        head_factory=args.head_factory, working_size=args.working_size,
                        fail_fast=not args.keep_going)
    group = _group_from_dir(args.group)
    errors = {}
    results = segment_group(group, concept, cfg, backend, errors=errors)
    out = Path(args.out)
    meta = {"format_version": "1", "segment_config": cfg.to_dict()}
    for rec, (soft, binary) in zip(group.records, results):
        if soft is None:
            continue
        write_image(out / f"{rec.stem}.png", binary.astype(float), {**meta, "kind": "binary"})
        if args.save_soft:
            write_image(out / "soft" / f"{rec.stem}.png", soft, {**meta, "kind": "soft"})
    print(f"{group.name}: {len(group) - len(errors)}/{len(group)} maps -> {out}")
    for name, msg in errors.items():
        print(f"  failed {name}: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def _run_config(args):
    from cosalkit.pipeline import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    backend = dict(cfg.backend)
    if args.backend is not None:
        backend["kind"] = args.backend
    if args.model_id is not None:
        backend["model_id"] = args.model_id
    if args.backend_seed is not None:
        backend["seed"] = args.backend_seed
    seg_changes = {k: v for k, v in (("t", args.t), ("head", args.head),
                                     ("head_factory", args.head_factory),
                                     ("working_size", args.working_size)) if v is not None}
    changes = {"backend": backend, "learn": _learn_config(args, cfg.learn),
               "segment": replace(cfg.segment, **seg_changes)}
    for flag in ("threshold", "workers"):
        if getattr(args, flag) is not None:
            changes[flag] = getattr(args, flag)
    if args.fail_fast:
        changes["fail_fast"] = True
    if args.no_figures:
        changes["figures"] = False
    return replace(cfg, **changes)


def cmd_run(args) -> int:
    from cosalkit.data import load_dataset
    from cosalkit.pipeline import run_pipeline

    cfg = _run_config(args)
    dataset = load_dataset(args.dataset, args.gt)
    result = run_pipeline(dataset, cfg, args.out)
    print(f"{len(result.concepts)}/{len(dataset)} groups processed -> {args.out}")
    if result.report is not None:
        _print_aggregates(result.report.aggregate)
    for name, msg in result.failures.items():
        print(f"  failed {name}: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_PARTIAL


def _print_aggregates(agg):
    print("  ".join(f"{k}={agg[k]:.4f}" for k in ("SR", "IoU", "MAE", "maxF", "Emax", "Sm")))


def cmd_eval(args) -> int:
    from cosalkit.evaluation import EvalConfig, evaluate_dataset, write_report
    from cosalkit.plotting import plot_metric_curves

    cfg = EvalConfig(args.threshold, args.beta_sq, args.n_thresholds)
    report = evaluate_dataset(args.pred, args.gt, cfg)
    write_report(report, args.report)
    if not args.no_figures:
        plot_metric_curves(report, Path(args.report) / "curves.png")
    _print_aggregates(report.aggregate)
    if report.issues.get("missing_predictions"):
        print(f"  {len(report.issues['missing_predictions'])} missing predictions scored as empty",
              file=sys.stderr)
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from cosalkit.corruption import CorruptionSpec, corrupt_dataset, load_params

    spec = CorruptionSpec(args.kind, args.severity, args.seed, args.fraction)
    params = load_params(args.params) if args.params else None
    manifest = corrupt_dataset(args.dataset, args.out, spec, params)
    n = sum(len(v) for v in manifest["groups"].values())
    print(f"{spec.kind} (severity {spec.severity}): corrupted {n} images in "
          f"{len(manifest['groups'])} groups -> {args.out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    from cosalkit.data import load_dataset
    from cosalkit.evaluation import _find_prediction
    from cosalkit.io import read_gray
    from cosalkit.plotting import montage
    from cosalkit.segmentation import binarize, resize_bilinear

    dataset = load_dataset(args.images, args.gt)
    out = Path(args.out)
    for group in dataset.groups:
        rows = []
        for rec in group.records[: args.max_per_group]:
            image, gt = rec.image(), rec.mask()
            path = _find_prediction(Path(args.pred) / group.name, rec.stem)
            soft = binary = None
            if path is not None:
                soft = read_gray(path)
                if soft.shape != image.shape[:2]:
                    soft = resize_bilinear(soft, image.shape[:2])
                binary = binarize(soft, args.threshold).astype(float)
            rows.append((rec.stem, image, None if gt is None else gt.astype(float), soft, binary))
        montage(rows, out / f"{group.name}.png")
    print(f"{len(dataset)} montages -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosalkit", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_flags(p, default="toy"):
        p.add_argument("--backend", choices=("toy", "sd"), default=default)
        p.add_argument("--model-id", default=None)
        p.add_argument("--backend-seed", type=int, default=None)

    def learn_flags(p, defaults=True):
        d = (lambda v: v) if defaults else (lambda v: None)
        p.add_argument("--alpha", type=float, default=d(1.5))
        p.add_argument("--uniform", action="store_true", help="uniform timesteps (no resampling)")
        p.add_argument("--steps", type=int, default=d(2000))
        p.add_argument("--lr", type=float, default=d(5e-4))
        p.add_argument("--batch", type=int, default=d(4))
        p.add_argument("--init-token", default=d("object"))
        p.add_argument("--prompt", default=None)
        p.add_argument("--seed", type=int, default=d(0))

    p = sub.add_parser("learn", help="learn a concept from one image group")
    p.add_argument("--group", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--working-size", type=int, default=512)
    p.add_argument("--plot", action="store_true", help="also write the loss curve")
    learn_flags(p)
    backend_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("segment", help="segment a group with a concept")
    p.add_argument("--group", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--concept")
    src.add_argument("--token", help="use a vocabulary token instead of a learned concept")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--t", type=int, default=400)
    p.add_argument("--head", choices=("passthrough", "pretrained"), default="passthrough")
    p.add_argument("--head-factory", default=None, help="module:callable building the pretrained head")
    p.add_argument("--working-size", type=int, default=512)
    p.add_argument("--save-soft", action="store_true")
    p.add_argument("--keep-going", action="store_true", help="skip failing images instead of stopping")
    backend_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("run", help="learn, segment and evaluate a whole dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON RunConfig; flags override it")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--head", choices=("passthrough", "pretrained"), default=None)
    p.add_argument("--head-factory", default=None)
    p.add_argument("--working-size", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--fail-fast", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    learn_flags(p, defaults=False)
    backend_flags(p, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score predicted maps against masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--beta-sq", type=float, default=0.3)
    p.add_argument("--n-thresholds", type=int, default=256)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corrupt", help="corrupt the first part of every group")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True,
                   choices=("frost", "motion_blur", "defocus_blur", "gaussian_noise"))
    p.add_argument("--severity", type=int, default=3)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", default=None, help="JSON severity table overriding the packaged one")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("viz", help="side-by-side montages of images, masks and predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-per-group", type=int, default=8)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, BackendUnavailableError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CosalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
