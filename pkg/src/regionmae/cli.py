"""Command-line entry point.

Each subcommand is thin plumbing over the library modules. Every run
resolves its configuration (defaults < --config file < --set overrides <
flags), executes, and leaves two provenance files beside its outputs:
``resolved_config.yaml`` (re-runnable snapshot) and ``inputs.json``
(sha256 of every input file consumed). Exit codes: 0 success, 2 bad
configuration or validation, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import stats as st
from .atlas import PatchSets, RegionMap, classify_patches, patch_set_report, \
    render_report
from .attribution import AttributionConfig, aggregate_group, ig_sq, \
    threshold_and_project, write_roi_csv
from .autodiff import Tensor
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import data_path, load_config, require_data_path, \
    write_input_hashes, write_snapshot
from .errors import ConfigurationError, DegenerateDataError, ValidationError
from .masking import MaskSpec, build_mask, save_mask
from .model import HybridModel, ModelConfig
from .nifti import LabelVolume, Volume4D, read_nifti, write_nifti
from .preprocess import preprocess_volume, read_manifest, write_manifest, \
    write_qc_csv
from .synth import SynthConfig, write_cohort
from .training import FINETUNE, PRETRAIN, RunConfig, finetune, pretrain, \
    split_subjects, write_metrics_csv

SUBCOMMANDS = ("preprocess", "classify-patches", "build-mask", "pretrain",
               "finetune", "attribute", "stats", "synth")


def _add_common(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps subparser defaults from clobbering values already
    # parsed by the root parser, so the flags work in either position.
    parser.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override run.seed")
    parser.add_argument("--out-dir", default=argparse.SUPPRESS,
                        help="override run.out_dir")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="BLAS thread cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionmae",
        description="Region-aware masked pretraining pipeline")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "synth":
            p.add_argument("--subjects", type=int,
                           help="override synth.n_subjects")
            p.add_argument("--shape", type=int,
                           help="cubic side length, overrides synth.shape")
    return parser


def _apply_threads(n: int) -> None:
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        embed_dim=int(m["embed_dim"]),
        stage_depths=tuple(int(d) for d in m["stage_depths"]),
        heads=int(m["heads"]),
        window=tuple(int(w) for w in m["window"]),
        ssm_state_dim=int(m["ssm_state_dim"]),
        configuration=str(m["configuration"]),
        patch_size=tuple(int(p) for p in m["patch_size"]),
        t_patch=int(m["t_patch"]),
        mlp_ratio=float(m["mlp_ratio"]),
        ssm_expand=int(m["ssm_expand"]),
        scan_order=str(m["scan_order"]),
        seed=int(m["seed"]),
    )


def _mask_spec(cfg: dict) -> MaskSpec:
    m = cfg["mask"]
    return MaskSpec(
        strategy=str(m["strategy"]),
        region=str(m["region"]) or None,
        ratio=float(m["ratio"]),
        temporal_mode=str(m["temporal_mode"]),
        seed=int(m["seed"]),
        window_block=tuple(int(b) for b in m["window_block"]),
    )


def _attr_config(cfg: dict) -> AttributionConfig:
    a = cfg["attribution"]
    return AttributionConfig(
        ig_steps=int(a["ig_steps"]),
        baseline=str(a["baseline"]),
        sg_samples=int(a["sg_samples"]),
        sg_noise_std=float(a["sg_noise_std"]),
        gauss_sigma=float(a["gauss_sigma"]),
        top_percentile=float(a["top_percentile"]),
        min_roi_voxels=int(a["min_roi_voxels"]),
    )


def _run_config(cfg: dict, section: str, phase: str,
                mask_spec: MaskSpec | None = None) -> RunConfig:
    s = cfg[section]
    return RunConfig(
        phase=phase,
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        lr=float(s["lr"]),
        seed=int(s["seed"]),
        mask_spec=mask_spec,
        split=tuple(float(r) for r in s["split"]),
        clip_norm=float(s["clip_norm"]),
        weight_decay=float(s["weight_decay"]),
        freeze_encoder=bool(s.get("freeze_encoder", False)),
    )


def _load_labeled(cfg: dict):
    manifest = require_data_path(cfg, "manifest")
    records = read_manifest(manifest)
    inputs = [manifest] + [Path(r.path) for r in records]
    volumes = {r.subject_id: read_nifti(r.path, kind="volume") for r in records}
    return records, volumes, inputs


def cmd_synth(cfg: dict, args, out: Path) -> list:
    s = cfg["synth"]
    if getattr(args, "subjects", None):
        s["n_subjects"] = int(args.subjects)
    if getattr(args, "shape", None):
        s["shape"] = [int(args.shape)] * 3
    synth_cfg = SynthConfig(
        n_subjects=int(s["n_subjects"]),
        shape=tuple(int(v) for v in s["shape"]),
        n_timepoints=int(s["n_timepoints"]),
        tr_seconds=float(s["tr_seconds"]),
        seed=int(s["seed"]),
        signal_region=str(s["signal_region"]),
        signal_amplitude=float(s["signal_amplitude"]),
        noise_amplitude=float(s["noise_amplitude"]),
        smooth_amplitude=float(s["smooth_amplitude"]),
        temporal_amplitude=float(s["temporal_amplitude"]),
        voxel_mm=float(s["voxel_mm"]),
    )
    manifest = write_cohort(synth_cfg, out)
    print(f"wrote {synth_cfg.n_subjects} subjects to {out} "
          f"(manifest {manifest.name})")
    return []


def cmd_preprocess(cfg: dict, args, out: Path) -> list:
    p = cfg["preprocess"]
    manifest = require_data_path(cfg, "manifest")
    records = read_manifest(manifest)
    inputs = [manifest] + [Path(r.path) for r in records]

    template_mask = None
    mask_path = data_path(cfg, "template_mask")
    if mask_path is not None and mask_path.exists():
        template_mask = read_nifti(mask_path, kind="labels").labels > 0
        inputs.append(mask_path)

    reports, kept = [], []
    for rec in records:
        vol = read_nifti(rec.path, kind="volume")
        normalized, _, report = preprocess_volume(
            vol,
            target_tr=float(p["target_tr"]),
            fov=tuple(int(v) for v in p["fov"]),
            template_mask=template_mask,
            mask_fraction=float(p["mask_fraction"]),
            clip=tuple(float(c) for c in p["clip"]),
            dice_thresh=float(p["dice_thresh"]),
            p99_thresh=float(p["p99_thresh"]),
            subject_id=rec.subject_id,
        )
        reports.append(report)
        if report.excluded and p["drop_excluded"]:
            continue
        out_path = out / f"{rec.subject_id}_preproc.nii.gz"
        write_nifti(normalized, out_path)
        rec.path = str(out_path)
        kept.append(rec)

    write_qc_csv(reports, out / "qc.csv")
    if not kept:
        raise DegenerateDataError("every subject was excluded by QC")
    write_manifest(kept, out / "manifest.csv")
    n_excluded = len(records) - len(kept)
    print(f"preprocessed {len(kept)} subjects ({n_excluded} excluded) -> {out}")
    return inputs


def cmd_classify(cfg: dict, args, out: Path) -> list:
    atlas_path = require_data_path(cfg, "atlas")
    map_path = require_data_path(cfg, "region_map")
    atlas = read_nifti(atlas_path, kind="labels")
    regions = RegionMap.from_csv(map_path)
    sets = classify_patches(
        atlas, regions,
        purity_threshold=float(cfg["atlas"]["purity_threshold"]),
        majority_threshold=float(cfg["atlas"]["majority_threshold"]),
    )
    sets.save(out / "patch_sets.json")
    rows = patch_set_report(sets)
    with open(out / "patch_report.csv", "w") as fh:
        fh.write("region,criterion,n_patches,n_voxels\n")
        for r in rows:
            fh.write(f"{r['region']},{r['criterion']},"
                     f"{r['n_patches']},{r['n_voxels']}\n")
    print(render_report(rows))
    return [atlas_path, map_path]


def cmd_build_mask(cfg: dict, args, out: Path) -> list:
    sets_path = require_data_path(cfg, "patch_sets")
    sets = PatchSets.load(sets_path)
    spec = _mask_spec(cfg)
    t_patches = int(cfg["mask"]["t_patches"])
    t_patch_len = int(cfg["model"]["t_patch"])
    tensor = build_mask(spec, sets, t_patches, t_patch_len=t_patch_len)
    save_mask(tensor, spec, out / "mask.bits")
    print(f"mask: {tensor.masked_slots}/{tensor.mask.size} slots "
          f"({tensor.masked_voxels} voxels) -> {out / 'mask.bits'}")
    return [sets_path]


def cmd_pretrain(cfg: dict, args, out: Path) -> list:
    sets_path = require_data_path(cfg, "patch_sets")
    sets = PatchSets.load(sets_path)
    records, volumes, inputs = _load_labeled(cfg)
    inputs.append(sets_path)

    model = HybridModel(_model_config(cfg))
    run = _run_config(cfg, "pretrain", PRETRAIN, mask_spec=_mask_spec(cfg))
    train, val, _ = split_subjects(records, run.split, seed=int(cfg["run"]["seed"]))
    as_pairs = lambda recs: [(r.subject_id, volumes[r.subject_id].data)
                             for r in recs]
    result = pretrain(model, as_pairs(train), as_pairs(val), run, sets)

    write_metrics_csv(out / "metrics.csv", result.metrics)
    best = {k: Tensor(v) for k, v in result.best_state.items()}
    save_checkpoint(best, out / "model.ckpt", model.config.config_hash(),
                    extra={"phase": "pretrain", "best_epoch": result.best_epoch,
                           "best_val_loss": result.best_val_loss})
    print(f"pretrain done: best val loss {result.best_val_loss:.6g} "
          f"at epoch {result.best_epoch}")
    return inputs


def cmd_finetune(cfg: dict, args, out: Path) -> list:
    records, volumes, inputs = _load_labeled(cfg)
    if any(r.label is None for r in records):
        raise ConfigurationError("finetune needs a label for every subject "
                                 "in data.manifest")
    model = HybridModel(_model_config(cfg))
    init_from = cfg["finetune"]["init_from"]
    if init_from:
        ckpt = Path(init_from)
        if not ckpt.is_absolute():
            ckpt = Path(cfg["data"]["root"]) / ckpt
        arrays, _ = load_checkpoint(ckpt, model.config.config_hash())
        restore_params(model.params, arrays)
        inputs.append(ckpt)

    run = _run_config(cfg, "finetune", FINETUNE)
    train, val, test = split_subjects(records, run.split,
                                      seed=int(cfg["run"]["seed"]))
    triple = lambda recs: [(r.subject_id, volumes[r.subject_id].data,
                            int(r.label)) for r in recs]
    result = finetune(model, triple(train), triple(val), triple(test), run)

    write_metrics_csv(out / "metrics.csv", result.metrics)
    best = {k: Tensor(v) for k, v in result.best_state.items()}
    save_checkpoint(best, out / "model.ckpt", model.config.config_hash(),
                    extra={"phase": "finetune", "best_epoch": result.best_epoch})
    summary = {"test_acc": result.test_acc, "test_auroc": result.test_auroc,
               "test_loss": result.test_loss, "best_epoch": result.best_epoch}
    (out / "test_metrics.json").write_text(json.dumps(summary, indent=2))
    auc = ("n/a" if result.test_auroc is None
           else f"{result.test_auroc:.3f}")
    print(f"finetune done: test acc {result.test_acc:.3f} auroc {auc}")
    return inputs


def cmd_attribute(cfg: dict, args, out: Path) -> list:
    ckpt_path = require_data_path(cfg, "checkpoint")
    atlas_path = require_data_path(cfg, "atlas")
    map_path = require_data_path(cfg, "region_map")
    records, volumes, inputs = _load_labeled(cfg)
    inputs += [ckpt_path, atlas_path, map_path]

    model = HybridModel(_model_config(cfg))
    arrays, _ = load_checkpoint(ckpt_path, model.config.config_hash())
    restore_params(model.params, arrays)
    atlas = read_nifti(atlas_path, kind="labels")
    regions = RegionMap.from_csv(map_path)
    acfg = _attr_config(cfg)

    maps = []
    for rec in records:
        vol = volumes[rec.subject_id]
        if cfg["attribution"]["only_correct"] and rec.label is not None:
            logit = float(model.forward_classify(vol.data).data)
            if int(logit > 0) != int(rec.label):
                continue
        maps.append(ig_sq(model, vol.data, acfg, subject_id=rec.subject_id,
                          seed=int(cfg["run"]["seed"])))
    if not maps:
        raise DegenerateDataError("no subjects left to attribute "
                                  "(all misclassified?)")

    group = aggregate_group(maps)
    names = {label: f"{regions.mapping[label]}_{label}"
             for label in regions.mapping}
    rows, displayed = threshold_and_project(group, atlas, acfg, names)

    write_nifti(Volume4D(data=group.map3d.astype(np.float32)[..., None],
                         affine=atlas.affine), out / "group_map.nii.gz")
    write_nifti(Volume4D(data=displayed.astype(np.float32)[..., None],
                         affine=atlas.affine), out / "thresholded_map.nii.gz")
    write_roi_csv(out / "roi_table.csv", rows)
    print(f"attributed {len(maps)} subjects; top ROI: "
          f"{rows[0].roi_name} ({rows[0].mean_attr:.3e})")
    return inputs


def cmd_stats(cfg: dict, args, out: Path) -> list:
    input_path = Path(cfg["stats"]["input"] or "")
    if not cfg["stats"]["input"]:
        raise ConfigurationError("config field stats.input is required")
    if not input_path.is_absolute():
        input_path = Path(cfg["data"]["root"]) / input_path
    if not input_path.exists():
        raise ConfigurationError(f"stats.input points at missing file "
                                 f"{input_path}")
    with open(input_path) as fh:
        header = fh.readline().strip().split(",")
        matrix = np.loadtxt(fh, delimiter=",", ndmin=2)
    if matrix.shape[1] != len(header):
        raise ValidationError("stats.input rows do not match its header")

    fr_stat, fr_p = st.friedman_test(matrix)
    raw = {}
    for i, j in itertools.combinations(range(len(header)), 2):
        _, p = st.wilcoxon_signed_rank(matrix[:, i], matrix[:, j])
        raw[f"{header[i]}_vs_{header[j]}"] = p
    rows = st.correct_and_tier(raw)
    st.write_stats_csv(out / "stats.csv", rows)
    (out / "friedman.json").write_text(json.dumps(
        {"statistic": fr_stat, "p_value": fr_p, "conditions": header,
         "n_rows": int(matrix.shape[0])}, indent=2))
    print(f"Friedman chi2 {fr_stat:.4f} (p {fr_p:.4g}); "
          f"{len(rows)} pairwise comparisons -> {out / 'stats.csv'}")
    return [input_path]


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "classify-patches": cmd_classify,
    "build-mask": cmd_build_mask,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "attribute": cmd_attribute,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config_file = getattr(args, "config", None)
    try:
        cfg = load_config(config_file,
                          getattr(args, "overrides", None) or [],
                          seed=getattr(args, "seed", None),
                          out_dir=getattr(args, "out_dir", None),
                          threads=getattr(args, "threads", None))
        _apply_threads(int(cfg["run"]["threads"]))
        out = Path(cfg["run"]["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](cfg, args, out)
        if config_file:
            inputs = [Path(config_file)] + list(inputs)
        write_snapshot(cfg, out)
        write_input_hashes(inputs, out)
        return 0
    except (ValidationError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
