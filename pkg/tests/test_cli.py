import json
from pathlib import Path

import numpy as np
import pytest

from sdrnn.audio_frontend import write_manifest
from sdrnn.cli import main
from sdrnn.synthetic import CLASSES, generate_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny synthetic dataset + features + trained model shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    manifest = generate_dataset(root / "data", n_train=16, n_test=8, seed=3)
    features = root / "cache"
    assert main(["features", "--manifest", str(manifest),
                 "--features", str(features)]) == 0
    model = root / "run" / "model.npz"
    assert main(["train", "--features", str(features), "--out", str(model),
                 "--hidden", "8", "8", "--alpha", "0.6", "0.6", "0.6",
                 "--epochs", "4", "--lr", "0.02", "--seed", "1"]) == 0
    net = root / "run" / "net.npz"
    assert main(["convert", "--model", str(model), "--out", str(net),
                 "--t-snn", "0.001", "--features", str(features),
                 "--probes", "2"]) == 0
    return {"root": root, "manifest": manifest, "features": features,
            "model": model, "net": net}


class TestFeatures:
    def test_rerun_hits_cache(self, workspace, capsys):
        code = main(["features", "--manifest", str(workspace["manifest"]),
                     "--features", str(workspace["features"])])
        assert code == 0
        out = capsys.readouterr().out
        assert "(24 cache hits)" in out

    def test_empty_manifest_succeeds(self, tmp_path):
        manifest = tmp_path / "empty.csv"
        write_manifest(manifest, [])
        code = main(["features", "--manifest", str(manifest),
                     "--features", str(tmp_path / "cache")])
        assert code == 0
        index = json.loads((tmp_path / "cache" / "features_index.json").read_text())
        assert index["entries"] == []

    def test_corrupted_wav_reports_and_fails(self, tmp_path, capsys):
        wav_dir = tmp_path / "wav"
        wav_dir.mkdir()
        (wav_dir / "bad.wav").write_bytes(b"not audio")
        manifest = tmp_path / "manifest.csv"
        write_manifest(manifest, [{"path": "wav/bad.wav", "label": "up",
                                   "split": "train"}])
        code = main(["features", "--manifest", str(manifest),
                     "--features", str(tmp_path / "cache")])
        assert code == 3
        err = capsys.readouterr().err
        assert "bad.wav" in err

    def test_missing_file_is_data_error(self, tmp_path):
        manifest = tmp_path / "manifest.csv"
        write_manifest(manifest, [{"path": "wav/ghost.wav", "label": "up",
                                   "split": "train"}])
        assert main(["features", "--manifest", str(manifest),
                     "--features", str(tmp_path / "cache")]) == 3


class TestTrainCommand:
    def test_artifacts_written(self, workspace):
        assert workspace["model"].exists()
        config = json.loads(Path(str(workspace["model"]) + ".config.json").read_text())
        assert config["command"] == "train" and config["epochs"] == 4

    def test_config_file_overrides_defaults(self, workspace, tmp_path):
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps({"epochs": 1, "hidden": [6, 6],
                                        "alpha": [0.5, 0.5, 0.5]}))
        out = tmp_path / "m.npz"
        assert main(["train", "--features", str(workspace["features"]),
                     "--out", str(out), "--config", str(cfg_path)]) == 0
        resolved = json.loads(Path(str(out) + ".config.json").read_text())
        assert resolved["epochs"] == 1 and resolved["hidden"] == [6, 6]

    def test_unknown_config_key_rejected(self, workspace, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"nonsense": 1}))
        assert main(["train", "--features", str(workspace["features"]),
                     "--out", str(tmp_path / "m.npz"),
                     "--config", str(cfg_path)]) == 2


class TestConvertCommand:
    def test_report_written(self, workspace):
        report = Path(str(workspace["net"]) + ".report.txt").read_text()
        assert "scale factor" in report and "histogram" in report

    def test_explicit_f_skips_probes(self, workspace, tmp_path):
        out = tmp_path / "net.npz"
        assert main(["convert", "--model", str(workspace["model"]),
                     "--out", str(out), "--t-snn", "0.001", "--f", "5e4"]) == 0

    def test_missing_probe_source_is_config_error(self, workspace, tmp_path):
        assert main(["convert", "--model", str(workspace["model"]),
                     "--out", str(tmp_path / "net.npz"),
                     "--t-snn", "0.001"]) == 2


class TestEvaluateCommand:
    def test_ann_metrics(self, workspace, tmp_path):
        out = tmp_path / "ann.json"
        assert main(["evaluate", "--input", str(workspace["model"]),
                     "--features", str(workspace["features"]),
                     "--split", "test", "--out", str(out)]) == 0
        metrics = json.loads(out.read_text())
        assert metrics["mode"] == "ann"
        assert set(metrics["per_class_accuracy"]) == set(CLASSES)
        assert Path(str(out) + ".samples.csv").read_text().startswith(
            "index,label,prediction")

    def test_spiking_metrics_include_agreement_and_tracking(self, workspace, tmp_path):
        out = tmp_path / "snn.json"
        assert main(["evaluate", "--input", str(workspace["net"]),
                     "--features", str(workspace["features"]),
                     "--split", "test", "--mode", "fixed",
                     "--out", str(out)]) == 0
        metrics = json.loads(out.read_text())
        assert 0.0 <= metrics["ann_agreement"] <= 1.0
        assert len(metrics["tracking_relative_mse_mean"]) == 3
        assert metrics["saturation_events"] == 0
        assert metrics["mean_spikes_per_sample"] > 0

    def test_deterministic_metrics(self, workspace, tmp_path):
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        for out in (out1, out2):
            assert main(["evaluate", "--input", str(workspace["net"]),
                         "--features", str(workspace["features"]),
                         "--split", "test", "--mode", "reference",
                         "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_split_is_data_error(self, workspace, tmp_path):
        assert main(["evaluate", "--input", str(workspace["model"]),
                     "--features", str(workspace["features"]),
                     "--split", "dev", "--out", str(tmp_path / "x.json")]) == 3

    def test_mode_mismatch_is_config_error(self, workspace, tmp_path):
        assert main(["evaluate", "--input", str(workspace["model"]),
                     "--features", str(workspace["features"]),
                     "--mode", "fixed", "--out", str(tmp_path / "x.json")]) == 2
        assert main(["evaluate", "--input", str(workspace["net"]),
                     "--features", str(workspace["features"]),
                     "--mode", "ann", "--out", str(tmp_path / "x.json")]) == 2


class TestCompareCommand:
    def test_outputs(self, workspace, tmp_path):
        out_dir = tmp_path / "cmp"
        assert main(["compare", "--net", str(workspace["net"]),
                     "--features", str(workspace["features"]),
                     "--sample-index", "1", "--out-dir", str(out_dir)]) == 0
        report = json.loads((out_dir / "compare.json").read_text())
        assert len(report["per_layer"]) == 3
        lines = (out_dir / "traces.csv").read_text().splitlines()
        assert lines[0] == "frame,layer,unit,ann,snn"
        assert len(lines) > 100

    def test_bad_index_is_config_error(self, workspace, tmp_path):
        assert main(["compare", "--net", str(workspace["net"]),
                     "--features", str(workspace["features"]),
                     "--sample-index", "999",
                     "--out-dir", str(tmp_path / "cmp")]) == 2


class TestSyntheticDataset:
    def test_deterministic_generation(self, tmp_path):
        m1 = generate_dataset(tmp_path / "a", n_train=8, n_test=4, seed=5)
        m2 = generate_dataset(tmp_path / "b", n_train=8, n_test=4, seed=5)
        assert m1.read_text() == m2.read_text()
        w1 = sorted((tmp_path / "a" / "wav").iterdir())
        w2 = sorted((tmp_path / "b" / "wav").iterdir())
        assert [p.read_bytes() for p in w1] == [p.read_bytes() for p in w2]

    def test_balanced_classes(self, tmp_path):
        from sdrnn.audio_frontend import read_manifest

        manifest = generate_dataset(tmp_path / "c", n_train=20, n_test=8, seed=1)
        rows = read_manifest(manifest)
        train = [r for r in rows if r["split"] == "train"]
        counts = {c: sum(1 for r in train if r["label"] == c) for c in CLASSES}
        assert set(counts.values()) == {5}
