"""Command-line interface: stage-by-stage subcommands plus the full
manifest-driven pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import nifti
from .fusion import FusionConfig, RegisteredAtlas, fuse, majority_vote
from .metrics import (EvalRow, asd, dice, render_report_csv,
                      render_report_text, report, volume_and_density)
from .phantom import PhantomSpec, deform_phantom, make_phantom
from .pipeline import load_manifest, run_pipeline
from .postprocess import (instance_from_mask, levelset_refine, morph_cleanup,
                          resolve_collisions)
from .registration import (RegistrationConfig, register_affine, register_ffd,
                           warp_atlas)
from .transform import save_transform
from .volume import LabelVolume, ScalarVolume


def _add_registration_args(p):
    p.add_argument("--alpha", type=float, default=0.005)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--control-spacing", type=float, default=5.0,
                   help="final control-point spacing in mm")
    p.add_argument("--max-iters", type=int, default=100)


def _registration_config(args):
    return RegistrationConfig(alpha=args.alpha, pyramid_levels=args.levels,
                              control_spacing_mm=args.control_spacing,
                              max_iters_per_level=args.max_iters)


def cmd_phantom(args):
    spec = PhantomSpec(
        n_vertebrae=args.n_vertebrae,
        noise_sd=args.noise_sd,
        seed=args.seed,
        height_scale=(tuple(float(h) for h in args.height_scale.split(","))
                      if args.height_scale else None),
    )
    img, lbl, boxes = make_phantom(spec)
    os.makedirs(args.output, exist_ok=True)
    nifti.write_volume(os.path.join(args.output, "image.nii"), img)
    nifti.write_volume(os.path.join(args.output, "labels.nii"), lbl)
    with open(os.path.join(args.output, "boxes.json"), "w") as f:
        json.dump([{"label": i + 1, "min": list(b.min_index),
                    "max": list(b.max_index)}
                   for i, b in enumerate(boxes)], f, indent=2)
    if args.deform:
        wimg, wlbl, truth = deform_phantom(img, lbl, kind=args.deform,
                                           magnitude=args.magnitude,
                                           seed=args.seed)
        nifti.write_volume(os.path.join(args.output, "deformed_image.nii"),
                           wimg)
        nifti.write_volume(os.path.join(args.output, "deformed_labels.nii"),
                           wlbl)
        save_transform(os.path.join(args.output, "truth_transform.json"),
                       truth)
    print(f"phantom written to {args.output}")


def cmd_register(args):
    target = nifti.read_volume(args.target, "scalar")
    floating = nifti.read_volume(args.floating, "scalar")
    cfg = _registration_config(args)
    affine = register_affine(target, floating, cfg)
    result = register_ffd(target, floating, affine, cfg)
    save_transform(args.output_transform, result.transform)
    if args.trace_csv:
        with open(args.trace_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "level", "C", "NMI", "P"])
            for it, level, c, nmi_val, p in result.per_level_trace:
                w.writerow([it, level, f"{c:.8f}", f"{nmi_val:.8f}",
                            f"{p:.8f}"])
    print(f"final objective {result.final_objective:.6f}")


def cmd_fuse(args):
    target = nifti.read_volume(args.target, "scalar")
    atlases = []
    for pair in args.atlas:
        img_path, lbl_path = pair.split(",")
        atlases.append(RegisteredAtlas(
            nifti.read_volume(img_path, "scalar"),
            nifti.read_volume(lbl_path, "label"),
            atlas_id=img_path))
    cfg = FusionConfig(patch_radius=args.patch_radius, beta=args.beta,
                       epsilon=args.epsilon,
                       search_radius=args.search_radius)
    if args.majority:
        out = majority_vote(atlases)
    else:
        out = fuse(target, atlases, cfg)
    nifti.write_volume(args.output_labels, out.consensus)
    if args.output_probability:
        prob = ScalarVolume(out.consensus.geometry,
                            np.round(out.probability * 1000.0))
        nifti.write_volume(args.output_probability, prob)
    print(f"consensus written to {args.output_labels}")


def cmd_refine(args):
    lbl = nifti.read_volume(args.labels, "label")
    intensity = nifti.read_volume(args.intensity, "scalar")
    cleaned = morph_cleanup(lbl, args.min_island_voxels)
    masks, instances = [], []
    for lv in cleaned.labels():
        binary = LabelVolume(cleaned.geometry,
                             (cleaned.data == lv).astype(np.int32))
        refined = levelset_refine(binary, intensity, iters=args.iters,
                                  step=args.step)
        masks.append(refined)
        instances.append(instance_from_mask(lv, refined.data != 0, intensity))
    final = resolve_collisions(masks, intensity, instances)
    nifti.write_volume(args.output, final)
    print(f"refined labels written to {args.output}")


def cmd_evaluate(args):
    gt = nifti.read_volume(args.gt, "label")
    seg = nifti.read_volume(args.seg, "label")
    intensity = (nifti.read_volume(args.intensity, "scalar")
                 if args.intensity else None)
    tags_by_label = {}
    if args.tags:
        with open(args.tags) as f:
            tags_by_label = {int(k): v for k, v in json.load(f).items()}
    rows = []
    for lv in sorted(set(gt.labels()) | set(seg.labels())):
        g = gt.data == lv
        s = seg.data == lv
        vol_cm3, den = 0.0, 0.0
        if intensity is not None and s.any():
            vol_cm3, den = volume_and_density(s, intensity)
        rows.append(EvalRow(
            case_id=args.case_id, vertebra_id=str(lv),
            tags=tags_by_label.get(lv, {}),
            volume_cm3=vol_cm3, density_hu=den,
            dice_pct=dice(g, s),
            asd_mm=(asd(g, s, gt.geometry, symmetric=args.symmetric)
                    if g.any() and s.any() else float("nan")),
        ))
    summaries = report(rows, args.group_by)
    prefix = args.output_prefix
    with open(prefix + ".csv", "w") as f:
        f.write(render_report_csv(rows, summaries))
    with open(prefix + ".txt", "w") as f:
        f.write(render_report_text(summaries))
    print(render_report_text(summaries), end="")


def cmd_run(args):
    manifest = load_manifest(args.manifest)
    if args.workers is not None:
        manifest.workers = args.workers
    env_workers = os.environ.get("VERTSEG_WORKERS")
    if args.workers is None and env_workers:
        manifest.workers = int(env_workers)
    outdir = args.output or manifest.output_dir or "."
    os.makedirs(outdir, exist_ok=True)

    run = run_pipeline(manifest)
    nifti.write_volume(os.path.join(outdir, "final_labels.nii"),
                       run.final_labels)
    for vid, res in run.per_vertebra.items():
        for case_id, comp in res.transforms:
            save_transform(os.path.join(
                outdir, f"transform_{vid}_{case_id}.json"), comp)
        nifti.write_volume(os.path.join(outdir, f"refined_{vid}.nii"),
                           res.refined_mask)
    with open(os.path.join(outdir, "timing.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["vertebra", "atlas", "seconds"])
        for vid, case_id, sec in run.timing:
            w.writerow([vid, case_id, f"{sec:.2f}"])
    if run.rows is not None:
        with open(os.path.join(outdir, "report.csv"), "w") as f:
            f.write(render_report_csv(run.rows, run.summaries))
        with open(os.path.join(outdir, "report.txt"), "w") as f:
            f.write(render_report_text(run.summaries))
        print(render_report_text(run.summaries), end="")
    print(f"pipeline outputs written to {outdir}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vertseg",
        description="Multi-atlas vertebra segmentation pipeline")
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic spine phantom")
    p.add_argument("--output", required=True)
    p.add_argument("--n-vertebrae", type=int, default=5)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height-scale", default=None,
                   help="comma-separated per-vertebra factors")
    p.add_argument("--deform", choices=["translation", "affine",
                                        "smooth_ffd"], default=None)
    p.add_argument("--magnitude", type=float, default=3.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="register floating onto target")
    p.add_argument("--target", required=True)
    p.add_argument("--floating", required=True)
    p.add_argument("--output-transform", required=True)
    p.add_argument("--trace-csv", default=None)
    _add_registration_args(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("fuse", help="joint label fusion of warped atlases")
    p.add_argument("--target", required=True)
    p.add_argument("--atlas", action="append", required=True,
                   metavar="IMAGE,LABELS")
    p.add_argument("--output-labels", required=True)
    p.add_argument("--output-probability", default=None,
                   help="probability x1000 as int16 NIfTI")
    p.add_argument("--patch-radius", type=int, default=2)
    p.add_argument("--search-radius", type=int, default=0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--majority", action="store_true")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", help="morphological label correction")
    p.add_argument("--labels", required=True)
    p.add_argument("--intensity", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-island-voxels", type=int, default=50)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--step", type=float, default=0.25)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="Dice/ASD report against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--intensity", default=None)
    p.add_argument("--tags", default=None,
                   help="JSON mapping label value -> tag dict")
    p.add_argument("--case-id", default="case")
    p.add_argument("--group-by", default=None)
    p.add_argument("--symmetric", action="store_true")
    p.add_argument("--output-prefix", default="report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run the full manifest-driven pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(),
                                      logging.WARNING))
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
