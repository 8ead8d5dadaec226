import csv
import json

import numpy as np
import pytest
from PIL import Image

from onnseg.cli import main
from onnseg.data import SyntheticSpec, synth_dataset
from onnseg.nifti import Volume, write_volume


def write_config(path, **kw):
    doc = {"synthetic": {"n_patients": 6, "slices_per_patient": 3, "size": 16},
           "modality_mode": "dwi_adc", "image_size": 16, "epochs": 2, "batch_size": 3,
           "out_dir": str(path.parent / "out"), "folds": 3}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert main(["prepare", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    return root, cfg


def test_prepare_outputs(run):
    root, _ = run
    out = root / "out"
    split = json.loads((out / "split.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [4, 1, 1]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["patients"] == 6 and summary["slices"] == 18
    assert 0 < summary["lesion_pixel_fraction"] < 1
    folds = json.loads((out / "folds.json").read_text())
    assert sorted(p for f in folds["folds"] for p in f) == sorted(split["train"] + split["val"] + split["test"])
    index = json.loads((out / "cache" / "dwi_adc" / "index.json").read_text())
    first = next(iter(index["patients"].values()))
    assert np.load(out / "cache" / "dwi_adc" / first["image"]).shape == (3, 2, 16, 16)


def test_prepare_is_deterministic(run, tmp_path):
    root, _ = run
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["prepare", "--config", cfg]) == 0
    a = json.loads((root / "out" / "cache" / "dwi_adc" / "index.json").read_text())
    b = json.loads((tmp_path / "out" / "cache" / "dwi_adc" / "index.json").read_text())
    assert a["patients"] == b["patients"]


def test_ten_patients_split_7_1_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json",
                       synthetic={"n_patients": 10, "slices_per_patient": 1, "size": 16})
    assert main(["prepare", "--config", cfg]) == 0
    split = json.loads((tmp_path / "out" / "split.json").read_text())
    assert [len(split[k]) for k in ("train", "val", "test")] == [7, 1, 2]
    assert "7/1/2" in capsys.readouterr().out


def test_train_outputs(run):
    out = run[0] / "out"
    rows = list(csv.reader((out / "train_log.csv").open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_soft_dsc"]
    assert len(rows) == 3
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    split = json.loads((out / "split.json").read_text())
    assert json.loads((out / "train_patients.json").read_text()) == sorted(split["train"])
    assert json.loads((out / "config.json").read_text())["optimizer"]["lr"] == 1e-4


def test_train_is_deterministic(run, tmp_path):
    root, _ = run
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["prepare", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    for name in ("train_log.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "out" / name).read_bytes() == (root / "out" / name).read_bytes(), name


def test_eval_outputs(run, capsys):
    root, cfg = run
    assert main(["eval", "--config", cfg, "--split", "val"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["DSC", "/", "IoU", "/", "Precision", "/", "Recall"]
    assert table[1].startswith("mean-over-slices") and table[2].startswith("pooled-counts")
    out = root / "out"
    doc = json.loads((out / "metrics_val.json").read_text())
    assert {"mean-over-slices", "pooled-counts"} <= set(doc)
    rows = list(csv.DictReader((out / "per_slice_val.csv").open()))
    assert len(rows) == doc["slices"] == 3


def test_eval_refuses_leakage(run, capsys):
    _, cfg = run
    assert main(["eval", "--config", cfg, "--split", "train"]) == 2
    assert "LeakageError" in capsys.readouterr().err


def test_eval_digest_mismatch(run, capsys):
    root, _ = run
    ck = str(root / "out" / "best.ckpt")
    alt = write_config(root / "alt.json", Q=2)
    assert main(["eval", "--config", alt, "--checkpoint", ck]) == 2
    assert "DigestMismatchError" in capsys.readouterr().err


def test_predict_pngs(run):
    root, cfg = run
    assert main(["predict", "--config", cfg, "--split", "test"]) == 0
    pred = root / "out" / "predictions"
    probs = sorted(pred.glob("*_prob.png"))
    assert len(probs) == 3
    first = probs[0].read_bytes()
    for p in probs:
        assert p.name.split("_z")[1][:3].isdigit()
        prob = np.asarray(Image.open(p))
        mask = np.asarray(Image.open(str(p).replace("_prob", "_mask")))
        assert set(np.unique(mask)) <= {0, 255}
        # byte = floor(255 p + 0.5), so p >= 0.5 exactly when byte >= 128
        np.testing.assert_array_equal(mask == 255, prob >= 128)
    assert main(["predict", "--config", cfg, "--split", "test"]) == 0
    assert probs[0].read_bytes() == first


def test_predict_modality_mismatch(run, capsys):
    _, cfg = run
    assert main(["predict", "--config", cfg, "--modality", "dwi"]) == 2
    err = capsys.readouterr().err
    assert "ConfigurationError" in err and "dwi_adc" in err


def test_missing_config(capsys):
    assert main(["train"]) == 2
    assert "--config" in capsys.readouterr().err


def test_train_before_prepare(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["train", "--config", cfg]) == 2
    assert "prepare" in capsys.readouterr().err


def _manifest_dataset(tmp_path, drop_adc=False, bad_mask=False):
    recs = synth_dataset(SyntheticSpec(n_patients=3, slices_per_patient=2, size=16, seed=1))
    entries = {}
    for r in recs:
        files = {}
        for key in ("dwi", "adc", "mask"):
            if key == "adc" and drop_adc and r.patient_id == "synth001":
                continue
            vol = getattr(r, key)
            if key == "mask" and bad_mask and r.patient_id == "synth002":
                vol = Volume.from_array(np.zeros((2, 8, 8)))
            write_volume(tmp_path / f"{r.patient_id}_{key}.nii", vol)
            files[key] = f"{r.patient_id}_{key}.nii"
        entries[r.patient_id] = files
    (tmp_path / "manifest.json").write_text(json.dumps({"patients": entries}))
    doc = {"manifest": "manifest.json", "modality_mode": "dwi_adc", "image_size": 16,
           "out_dir": str(tmp_path / "out"), "folds": 3}
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    return str(tmp_path / "cfg.json")


def test_manifest_prepare(tmp_path):
    assert main(["prepare", "--config", _manifest_dataset(tmp_path)]) == 0


def test_manifest_missing_adc(tmp_path, capsys):
    cfg = _manifest_dataset(tmp_path, drop_adc=True)
    assert main(["prepare", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "synth001" in err and "ADC" in err
    assert main(["prepare", "--config", cfg, "--modality", "dwi"]) == 0


def test_manifest_extent_mismatch(tmp_path, capsys):
    assert main(["prepare", "--config", _manifest_dataset(tmp_path, bad_mask=True)]) == 2
    err = capsys.readouterr().err
    assert "ValidationError" in err and "synth002" in err


def test_gradcheck_scope(capsys):
    assert main(["gradcheck", "objectives"]) == 0
    out = capsys.readouterr().out
    assert "combined_loss" in out and "5/5 passed" in out


def test_gradcheck_injected_fault(capsys):
    assert main(["gradcheck", "tensor-core", "--inject-fault", "tanh"]) == 1
    out = capsys.readouterr().out
    assert "culprit ops: tanh" in out


def test_gradcheck_unknown_scope(capsys):
    assert main(["gradcheck", "nonsense"]) == 2
