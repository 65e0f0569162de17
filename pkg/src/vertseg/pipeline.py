"""Manifest-driven per-vertebra pipeline: crop, register every eligible
atlas, fuse labels, clean up and refine each vertebra, resolve collisions
across vertebrae, and (optionally) evaluate against ground truth.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nifti
from .fusion import FusionConfig, RegisteredAtlas, fuse
from .metrics import EvalRow, asd, dice, report, volume_and_density
from .postprocess import (CollisionPolicy, instance_from_mask, levelset_refine,
                          morph_cleanup, resolve_collisions)
from .registration import (RegistrationConfig, register_affine, register_ffd,
                           warp_atlas)
from .similarity import IntensityWindow
from .volume import BoundingBox, LabelVolume, bounding_box_of, crop

log = logging.getLogger(__name__)


@dataclass
class VertebraEntry:
    vertebra_id: str
    label: int
    box: BoundingBox
    tags: dict = field(default_factory=dict)


@dataclass
class AtlasEntry:
    case_id: str
    image_path: str
    labels_path: str
    vertebra_labels: dict  # vertebra id -> label value
    order: list  # column order of vertebra ids, superior to inferior
    cohort: str = ""


@dataclass
class AtlasManifest:
    target_image_path: str
    target_case_id: str
    vertebrae: list
    atlases: list
    mode: str = "single"
    leave_one_out: bool = False
    target_labels_path: str = None
    crop_margin_mm: float = 10.0
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    collision: CollisionPolicy = field(default_factory=CollisionPolicy)
    min_island_voxels: int = 50
    levelset_iters: int = 10
    levelset_step: float = 0.25
    group_by: str = None
    workers: int = 1
    output_dir: str = None

    def __post_init__(self):
        if self.mode not in ("single", "bundle3"):
            raise ValueError(f"unknown mode {self.mode!r}")


def load_manifest(path):
    """Parse the JSON manifest (schema documented in the README)."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    with open(path) as f:
        doc = json.load(f)

    tgt = doc["target"]
    vertebrae = [VertebraEntry(
        vertebra_id=v["id"], label=int(v["label"]),
        box=BoundingBox(tuple(v["box"]["min"]), tuple(v["box"]["max"])),
        tags=dict(v.get("tags", {})),
    ) for v in tgt["vertebrae"]]

    atlases = [AtlasEntry(
        case_id=a["case_id"],
        image_path=resolve(a["image"]),
        labels_path=resolve(a["labels"]),
        vertebra_labels={k: int(v) for k, v in a["vertebra_labels"].items()},
        order=list(a.get("order", list(a["vertebra_labels"]))),
        cohort=a.get("cohort", ""),
    ) for a in doc["atlases"]]

    reg_kwargs = dict(doc.get("registration", {}))
    window_kwargs = reg_kwargs.pop("window", None)
    if window_kwargs:
        reg_kwargs["window"] = IntensityWindow(**window_kwargs)
    post = doc.get("postprocess", {})

    return AtlasManifest(
        target_image_path=resolve(tgt["image"]),
        target_case_id=tgt.get("case_id", "target"),
        vertebrae=vertebrae,
        atlases=atlases,
        mode=doc.get("mode", "single"),
        leave_one_out=bool(doc.get("leave_one_out", False)),
        target_labels_path=(resolve(tgt["labels"])
                            if tgt.get("labels") else None),
        crop_margin_mm=float(doc.get("crop_margin_mm", 10.0)),
        registration=RegistrationConfig(**reg_kwargs),
        fusion=FusionConfig(**doc.get("fusion", {})),
        collision=CollisionPolicy(**doc.get("collision", {})),
        min_island_voxels=int(post.get("min_island_voxels", 50)),
        levelset_iters=int(post.get("levelset_iters", 10)),
        levelset_step=float(post.get("levelset_step", 0.25)),
        group_by=doc.get("group_by"),
        workers=int(doc.get("workers", 1)),
        output_dir=doc.get("output_dir"),
    )


@dataclass
class VertebraResult:
    vertebra_id: str
    crop_geometry: "GridGeometry"
    transforms: list  # (atlas case_id, ComposedTransform)
    warped: list  # RegisteredAtlas per eligible atlas
    fusion_probability: np.ndarray
    fused_mask: LabelVolume
    refined_mask: LabelVolume
    contested_before_collisions: int = 0


@dataclass
class PipelineRun:
    final_labels: LabelVolume
    per_vertebra: dict  # vertebra id -> VertebraResult
    rows: list = None
    summaries: list = None
    timing: list = field(default_factory=list)  # (vertebra, atlas, seconds)


def _bundle_ids(vertebra_id, order, mode):
    """Vertebra ids to include from an atlas: the vertebra itself, or the
    three-vertebra bundle (neighbors above and below; at column ends the
    nearest two same-side neighbors)."""
    if mode == "single":
        return [vertebra_id]
    i = order.index(vertebra_id)
    n = len(order)
    if n <= 3:
        return list(order)
    if i == 0:
        return order[0:3]
    if i == n - 1:
        return order[n - 3:n]
    return [order[i - 1], order[i], order[i + 1]]


def _eligible_atlases(manifest, vertebra):
    out = []
    for atlas in manifest.atlases:
        if manifest.leave_one_out \
                and atlas.case_id == manifest.target_case_id:
            continue
        if vertebra.vertebra_id not in atlas.vertebra_labels:
            continue
        if vertebra.vertebra_id not in atlas.order:
            continue
        ids = _bundle_ids(vertebra.vertebra_id, atlas.order, manifest.mode)
        if any(v not in atlas.vertebra_labels for v in ids):
            continue
        out.append((atlas, ids))
    return out


def _margin_voxels(geometry, margin_mm):
    return tuple(int(round(margin_mm / s)) for s in geometry.spacing)


def _register_one(tcrop, atlas_entry, bundle_ids, center_label_value,
                  manifest, atlas_cache):
    img, lbl = atlas_cache[atlas_entry.case_id]
    keep = [atlas_entry.vertebra_labels[v] for v in bundle_ids]
    sub = np.where(np.isin(lbl.data, keep), lbl.data, 0)
    abox = bounding_box_of(sub)
    margin = _margin_voxels(img.geometry, manifest.crop_margin_mm)
    acrop_img = crop(img, abox, margin)
    acrop_lbl = crop(LabelVolume(lbl.geometry, sub), abox, margin)

    t0 = time.perf_counter()
    affine = register_affine(tcrop, acrop_img, manifest.registration)
    result = register_ffd(tcrop, acrop_img, affine, manifest.registration)
    elapsed = time.perf_counter() - t0

    warped_img, warped_lbl = warp_atlas(acrop_img, acrop_lbl,
                                        result.transform, tcrop.geometry)
    center = (warped_lbl.data
              == atlas_entry.vertebra_labels[bundle_ids_center(bundle_ids)])
    center_lbl = LabelVolume(tcrop.geometry,
                             np.where(center, center_label_value, 0))
    registered = RegisteredAtlas(warped_img, center_lbl, atlas_entry.case_id)
    return registered, result.transform, elapsed


def bundle_ids_center(ids):
    return ids[len(ids) // 2] if len(ids) == 3 else ids[0]


def run_pipeline(manifest):
    """Execute the full pipeline described by a manifest."""
    target_img = nifti.read_volume(manifest.target_image_path, "scalar")
    target_lbl = None
    if manifest.target_labels_path:
        target_lbl = nifti.read_volume(manifest.target_labels_path, "label")

    atlas_cache = {}
    for a in manifest.atlases:
        if a.case_id not in atlas_cache:
            atlas_cache[a.case_id] = (
                nifti.read_volume(a.image_path, "scalar"),
                nifti.read_volume(a.labels_path, "label"),
            )

    timing = []
    per_vertebra = {}
    full_masks = []
    instances = []

    for vert in manifest.vertebrae:
        eligible = _eligible_atlases(manifest, vert)
        if not eligible:
            raise RuntimeError(
                f"[registration] no eligible atlas for vertebra "
                f"{vert.vertebra_id}")
        margin = _margin_voxels(target_img.geometry, manifest.crop_margin_mm)
        tcrop = crop(target_img, vert.box, margin)

        def work(item):
            atlas_entry, ids = item
            return _register_one(tcrop, atlas_entry, ids, vert.label,
                                 manifest, atlas_cache)

        if manifest.workers > 1 and len(eligible) > 1:
            with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
                results = list(pool.map(work, eligible))
        else:
            results = [work(item) for item in eligible]

        registered = [r[0] for r in results]
        transforms = [(e[0].case_id, r[1])
                      for e, r in zip(eligible, results)]
        for (entry, _ids), r in zip(eligible, results):
            timing.append((vert.vertebra_id, entry.case_id, r[2]))

        try:
            fused = fuse(tcrop, registered, manifest.fusion)
        except Exception as exc:
            raise RuntimeError(f"[fusion] vertebra {vert.vertebra_id}: {exc}")

        try:
            cleaned = morph_cleanup(fused.consensus,
                                    manifest.min_island_voxels)
            binary = LabelVolume(cleaned.geometry,
                                 (cleaned.data == vert.label).astype(np.int32))
            refined = levelset_refine(binary, tcrop,
                                      iters=manifest.levelset_iters,
                                      step=manifest.levelset_step)
        except Exception as exc:
            raise RuntimeError(
                f"[postprocess] vertebra {vert.vertebra_id}: {exc}")

        per_vertebra[vert.vertebra_id] = VertebraResult(
            vertebra_id=vert.vertebra_id,
            crop_geometry=tcrop.geometry,
            transforms=transforms,
            warped=registered,
            fusion_probability=fused.probability,
            fused_mask=fused.consensus,
            refined_mask=refined,
        )

        # paste the refined crop-space mask back onto the full grid
        full = np.zeros(target_img.geometry.dims, dtype=np.int32)
        off = np.round(target_img.geometry.world_to_voxel(
            np.array(refined.geometry.origin))).astype(int)
        sl = tuple(slice(off[a], off[a] + refined.geometry.dims[a])
                   for a in range(3))
        full[sl] = np.where(refined.data != 0, vert.label, 0)
        mask_vol = LabelVolume(target_img.geometry, full)
        full_masks.append(mask_vol)
        instances.append(instance_from_mask(vert.label, full != 0,
                                            target_img))

    contested = np.zeros(target_img.geometry.dims, dtype=np.int32)
    for m in full_masks:
        contested += (m.data != 0)
    n_contested = int((contested >= 2).sum())
    for vert, res in zip(manifest.vertebrae, per_vertebra.values()):
        res.contested_before_collisions = n_contested

    final = resolve_collisions(full_masks, target_img, instances,
                               manifest.collision)

    rows = summaries = None
    if target_lbl is not None:
        rows = []
        for vert in manifest.vertebrae:
            gt = target_lbl.data == vert.label
            seg = final.data == vert.label
            vol_cm3, den = volume_and_density(seg, target_img)
            rows.append(EvalRow(
                case_id=manifest.target_case_id,
                vertebra_id=vert.vertebra_id,
                tags=dict(vert.tags),
                volume_cm3=vol_cm3,
                density_hu=den,
                dice_pct=dice(gt, seg),
                asd_mm=asd(gt, seg, target_img.geometry),
            ))
        summaries = report(rows, manifest.group_by)

    return PipelineRun(final_labels=final, per_vertebra=per_vertebra,
                       rows=rows, summaries=summaries, timing=timing)
