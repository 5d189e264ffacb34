import json
from pathlib import Path

import numpy as np
import pytest

from regionmae.cli import main
from regionmae.masking import load_mask
from regionmae.preprocess import read_manifest
from regionmae.training import read_metrics_csv

SMALL_MODEL = [
    "--set", "model.embed_dim=8",
    "--set", "model.heads=2",
    "--set", "model.stage_depths=[1, 1]",
    "--set", "model.ssm_state_dim=4",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole CLI chain once on a tiny synthetic cohort."""
    root = tmp_path_factory.mktemp("pipeline")
    synth = root / "synth"
    prep = root / "prep"
    patches = root / "patches"
    maskdir = root / "mask"
    pre = root / "pretrain"
    ft = root / "finetune"
    attr = root / "attr"

    assert main(["--out-dir", str(synth), "synth",
                 "--subjects", "14", "--shape", "24"]) == 0

    assert main(["--out-dir", str(prep),
                 "--set", f"data.manifest={synth / 'manifest.csv'}",
                 "--set", "preprocess.fov=[24, 24, 24]",
                 "preprocess"]) == 0

    assert main(["--out-dir", str(patches),
                 "--set", f"data.atlas={synth / 'atlas.nii.gz'}",
                 "--set", f"data.region_map={synth / 'region_map.csv'}",
                 "classify-patches"]) == 0

    assert main(["--out-dir", str(maskdir),
                 "--set", f"data.patch_sets={patches / 'patch_sets.json'}",
                 "build-mask"]) == 0

    assert main(["--out-dir", str(pre),
                 "--set", f"data.manifest={prep / 'manifest.csv'}",
                 "--set", f"data.patch_sets={patches / 'patch_sets.json'}",
                 "--set", "pretrain.epochs=2",
                 *SMALL_MODEL,
                 "pretrain"]) == 0

    assert main(["--out-dir", str(ft),
                 "--set", f"data.manifest={prep / 'manifest.csv'}",
                 "--set", f"finetune.init_from={pre / 'model.ckpt'}",
                 "--set", "finetune.epochs=2",
                 *SMALL_MODEL,
                 "finetune"]) == 0

    assert main(["--out-dir", str(attr),
                 "--set", f"data.manifest={prep / 'manifest.csv'}",
                 "--set", f"data.checkpoint={ft / 'model.ckpt'}",
                 "--set", f"data.atlas={synth / 'atlas.nii.gz'}",
                 "--set", f"data.region_map={synth / 'region_map.csv'}",
                 "--set", "attribution.ig_steps=2",
                 "--set", "attribution.sg_samples=1",
                 "--set", "attribution.only_correct=false",
                 *SMALL_MODEL,
                 "attribute"]) == 0

    return root


def test_synth_quickstart(tmp_path):
    out = tmp_path / "cohort"
    assert main(["--out-dir", str(out), "synth",
                 "--subjects", "4", "--shape", "48"]) == 0
    bolds = sorted(out.glob("sub-*_bold.nii.gz"))
    assert len(bolds) == 4
    for name in ("atlas.nii.gz", "brain_mask.nii.gz", "region_map.csv",
                 "manifest.csv", "resolved_config.yaml", "inputs.json"):
        assert (out / name).exists()
    # the snapshot records what the convenience flags resolved to
    snapshot = (out / "resolved_config.yaml").read_text()
    assert "n_subjects: 4" in snapshot
    records = read_manifest(out / "manifest.csv")
    assert [r.label for r in records] == [0, 1, 0, 1]


def test_global_flags_accepted_after_subcommand(tmp_path):
    out = tmp_path / "cohort"
    assert main(["synth", "--out-dir", str(out), "--subjects", "2",
                 "--set", "synth.shape=[12, 12, 12]"]) == 0
    assert len(list(out.glob("sub-*_bold.nii.gz"))) == 2


def test_unknown_set_key_exits_2(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "--set", "run.sneed=3", "synth"])
    assert rc == 2
    assert "run.sneed" in capsys.readouterr().err


def test_unknown_config_file_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("pretrain:\n  epocks: 5\n")
    rc = main(["--config", str(cfg), "--out-dir", str(tmp_path / "o"), "synth"])
    assert rc == 2
    assert "pretrain.epocks" in capsys.readouterr().err


def test_missing_required_input_exits_2(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path / "o"), "preprocess"])
    assert rc == 2
    assert "data.manifest" in capsys.readouterr().err


def test_unreadable_volume_exits_1(tmp_path, capsys):
    manifest = tmp_path / "manifest.csv"
    bogus = tmp_path / "nope.nii.gz"
    bogus.write_bytes(b"not a nifti")
    manifest.write_text(f"subject_id,path,label\ns0,{bogus},0\n")
    rc = main(["--out-dir", str(tmp_path / "o"),
               "--set", f"data.manifest={manifest}", "preprocess"])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_invalid_synth_config_exits_2(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path), "synth", "--shape", "4"])
    assert rc == 2


def test_preprocess_outputs(pipeline):
    prep = pipeline / "prep"
    records = read_manifest(prep / "manifest.csv")
    assert len(records) == 14  # synthetic cohort passes its own QC gate
    assert all(Path(r.path).exists() for r in records)
    assert all(r.label in (0, 1) for r in records)
    qc = (prep / "qc.csv").read_text().splitlines()
    assert qc[0] == "subject_id,dice,p99,excluded,reasons"
    assert len(qc) == 15


def test_classify_outputs(pipeline):
    patches = pipeline / "patches"
    sets = json.loads((patches / "patch_sets.json").read_text())
    report = (patches / "patch_report.csv").read_text().splitlines()
    assert report[0] == "region,criterion,n_patches,n_voxels"
    assert len(report) > 1
    assert sets["grid_dims"] == [4, 4, 4]


def test_mask_artifact_loads(pipeline):
    tensor, spec = load_mask(pipeline / "mask" / "mask.bits")
    assert spec.strategy == "REGION_ANY"
    assert tensor.mask.shape[1] == 2  # eight timepoints / t_patch 4
    assert 0 < tensor.masked_slots < tensor.mask.size


def test_build_mask_idempotent(pipeline, tmp_path):
    again = tmp_path / "mask2"
    assert main(["--out-dir", str(again),
                 "--set",
                 f"data.patch_sets={pipeline / 'patches' / 'patch_sets.json'}",
                 "build-mask"]) == 0
    first = (pipeline / "mask" / "mask.bits").read_bytes()
    assert (again / "mask.bits").read_bytes() == first


def test_pretrain_outputs(pipeline):
    pre = pipeline / "pretrain"
    rows = read_metrics_csv(pre / "metrics.csv")
    assert {r.split for r in rows} == {"train", "val"}
    assert max(r.epoch for r in rows) == 1
    assert (pre / "model.ckpt").exists()
    assert (pre / "model.ckpt.manifest.json").exists()
    hashes = json.loads((pre / "inputs.json").read_text())
    assert len(hashes) >= 15  # manifest + 14 volumes + patch sets


def test_finetune_outputs(pipeline):
    ft = pipeline / "finetune"
    summary = json.loads((ft / "test_metrics.json").read_text())
    assert set(summary) == {"test_acc", "test_auroc", "test_loss",
                            "best_epoch"}
    assert 0.0 <= summary["test_acc"] <= 1.0
    rows = read_metrics_csv(ft / "metrics.csv")
    assert {r.split for r in rows} == {"train", "val", "test"}


def test_attribute_outputs(pipeline):
    attr = pipeline / "attr"
    rois = (attr / "roi_table.csv").read_text().splitlines()
    assert rois[0] == "roi_label,roi_name,voxels,mean_attr,rank"
    assert len(rois) > 1
    assert "frontal" in rois[1] or "temporal" in rois[1] or \
        "parietal" in rois[1] or "occipital" in rois[1] or \
        "limbic" in rois[1] or "subcortical" in rois[1] or \
        "cerebellum" in rois[1]
    for name in ("group_map.nii.gz", "thresholded_map.nii.gz"):
        assert (attr / name).exists()


def test_snapshot_reproduces_run(pipeline, tmp_path):
    # re-running build-mask from the snapshot alone gives the same artifact
    snapshot = pipeline / "mask" / "resolved_config.yaml"
    out = tmp_path / "replay"
    assert main(["--config", str(snapshot), "--out-dir", str(out),
                 "build-mask"]) == 0
    assert (out / "mask.bits").read_bytes() == \
        (pipeline / "mask" / "mask.bits").read_bytes()


def test_stats_command(tmp_path):
    rng = np.random.default_rng(0)
    matrix = rng.normal(size=(9, 3)) + np.array([0.0, 0.3, 0.6])
    src = tmp_path / "scores.csv"
    with open(src, "w") as fh:
        fh.write("mamba,alternate,am\n")
        for row in matrix:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
    out = tmp_path / "stats"
    assert main(["--out-dir", str(out),
                 "--set", f"stats.input={src}", "stats"]) == 0
    lines = (out / "stats.csv").read_text().splitlines()
    assert lines[0] == "comparison,raw_p,corrected_p,tier"
    assert len(lines) == 4  # three pairwise comparisons
    fried = json.loads((out / "friedman.json").read_text())
    assert 0.0 <= fried["p_value"] <= 1.0
    assert fried["conditions"] == ["mamba", "alternate", "am"]


def test_stats_missing_input_exits_2(tmp_path, capsys):
    rc = main(["--out-dir", str(tmp_path / "o"), "stats"])
    assert rc == 2
    assert "stats.input" in capsys.readouterr().err
