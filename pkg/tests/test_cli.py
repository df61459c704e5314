import hashlib
import json
import os

import numpy as np
import pytest

from meda_lude.cli import main, resolve_config
from meda_lude.config import default_config, from_dict, save_config, to_dict
from meda_lude.baselines import ros
from meda_lude.datasets import (
    LabeledImageSet,
    load_idx,
    load_image_archive,
    save_idx,
)

TINY = {
    "data": {
        "class_count": 3,
        "per_class": 40,
        "height": 10,
        "width": 10,
        "n_min": 4,
        "n_maj": 20,
        "n_val": 10,
        "minority_classes": [0],
    },
    "model": {
        "latent_dim": 4,
        "encoder_hidden": [16],
        "decoder_hidden": [16],
        "latent_hidden": [8],
        "image_hidden": [16, 8],
    },
    "train": {"batch_size": 16, "max_epochs": 2},
    "evolution": {
        "pop_per_class": 16,
        "max_iterations": 2,
        "real_batch_per_class": 4,
        "outer_iterations": 1,
    },
    "final_classifier": {"max_epochs": 5},
}


def write_tiny_config(directory, **extra) -> str:
    mapping = json.loads(json.dumps(TINY))
    mapping["run_dir"] = str(directory / "run")
    mapping.update(extra)
    path = str(directory / "config.json")
    save_config(from_dict(mapping), path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One prepared and trained tiny run shared by the read-only tests."""
    base = tmp_path_factory.mktemp("trained")
    cfg_path = write_tiny_config(base)
    assert main(["prepare", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    return cfg_path, str(base / "run")


def sha(path: str) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestPrepare:
    def test_emit_default_config(self, capsys) -> None:
        assert main(["prepare", "--emit-default-config"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == to_dict(default_config())

    def test_split_counts_and_manifest(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        run_dir = str(tmp_path / "run")
        manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
        assert manifest["train_counts"] == [4, 20, 20]
        assert manifest["val_counts"] == [10, 10, 10]
        assert len(manifest["config_hash"]) == 16
        for name, digest in manifest["files"].items():
            assert sha(os.path.join(run_dir, name)) == digest

    def test_rerun_identical_manifest(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        first = open(tmp_path / "run" / "manifest.json", "rb").read()
        assert main(["prepare", "--config", cfg_path]) == 0
        assert open(tmp_path / "run" / "manifest.json", "rb").read() == first

    def test_idx_source(self, tmp_path) -> None:
        donor_cfg = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", donor_cfg]) == 0
        full = load_idx(
            str(tmp_path / "run" / "train_images.idx"),
            str(tmp_path / "run" / "train_labels.idx"),
        )
        images_path = str(tmp_path / "full_images.idx")
        labels_path = str(tmp_path / "full_labels.idx")
        save_idx(full, images_path, labels_path)
        mapping = json.loads(json.dumps(TINY))
        mapping["run_dir"] = str(tmp_path / "run2")
        mapping["data"].update(
            {
                "source": "idx",
                "idx_images": images_path,
                "idx_labels": labels_path,
                "n_min": 2,
                "n_maj": 3,
                "n_val": 1,
            }
        )
        cfg2 = str(tmp_path / "cfg2.json")
        save_config(from_dict(mapping), cfg2)
        assert main(["prepare", "--config", cfg2]) == 0
        manifest = json.load(open(tmp_path / "run2" / "manifest.json"))
        assert manifest["train_counts"] == [2, 3, 3]

    def test_missing_idx_exits_2(self, tmp_path, capsys) -> None:
        mapping = json.loads(json.dumps(TINY))
        mapping["run_dir"] = str(tmp_path / "run")
        mapping["data"].update(
            {
                "source": "idx",
                "idx_images": str(tmp_path / "absent_images.idx"),
                "idx_labels": str(tmp_path / "absent_labels.idx"),
            }
        )
        cfg = str(tmp_path / "cfg.json")
        save_config(from_dict(mapping), cfg)
        assert main(["prepare", "--config", cfg]) == 2
        assert "absent_images.idx" in capsys.readouterr().err

    def test_seed_override_changes_config_hash(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        base_hash = json.load(open(tmp_path / "run" / "manifest.json"))[
            "config_hash"
        ]
        assert main(["prepare", "--config", cfg_path, "--seed", "5"]) == 0
        new_hash = json.load(open(tmp_path / "run" / "manifest.json"))[
            "config_hash"
        ]
        assert new_hash != base_hash


class TestTrain:
    def test_artifacts_and_run_json(self, trained) -> None:
        _, run_dir = trained
        names = [
            "models.bin",
            "gmm_init.bin",
            "gmm_opti.bin",
            "loss_trace.csv",
            "evolution_trace.csv",
        ]
        for name in names:
            assert os.path.exists(os.path.join(run_dir, name))
        summary = json.load(open(os.path.join(run_dir, "run.json")))
        for name, digest in summary["artifacts"].items():
            assert sha(os.path.join(run_dir, name)) == digest

    def test_loss_trace_bookkeeping(self, trained) -> None:
        _, run_dir = trained
        lines = open(os.path.join(run_dir, "loss_trace.csv")).read().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "iteration,phase,component,value"
        per_phase_components = {"1": 5, "2": 3, "3": 3}
        seen: dict[tuple[str, str], int] = {}
        for line in lines[2:]:
            iteration, phase, component, value = line.split(",")
            float(value)
            seen[(phase, iteration)] = seen.get((phase, iteration), 0) + 1
        for (phase, _), count in seen.items():
            assert count == per_phase_components[phase]

    def test_rerun_byte_identical_mixture(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        assert main(["train", "--config", cfg_path]) == 0
        run_dir = tmp_path / "run"
        first = {
            name: sha(str(run_dir / name))
            for name in ("models.bin", "gmm_init.bin", "gmm_opti.bin")
        }
        assert main(["train", "--config", cfg_path]) == 0
        for name, digest in first.items():
            assert sha(str(run_dir / name)) == digest, name

    def test_divergence_exits_3_with_partial_artifacts(self, tmp_path, capsys) -> None:
        cfg_path = write_tiny_config(
            tmp_path, train={"batch_size": 16, "max_epochs": 2, "learning_rate": 1e12}
        )
        assert main(["prepare", "--config", cfg_path]) == 0
        with np.errstate(all="ignore"):
            code = main(["train", "--config", cfg_path])
        assert code == 3
        assert "error" in capsys.readouterr().err
        assert os.path.exists(tmp_path / "run" / "models.bin")
        assert os.path.exists(tmp_path / "run" / "loss_trace.csv")

    def test_train_before_prepare_exits_2(self, tmp_path, capsys) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["train", "--config", cfg_path]) == 2
        assert "train_images.idx" in capsys.readouterr().err


class TestGenerate:
    def test_archive_contents(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(
            ["generate", "--config", cfg_path, "--label", "0", "--count", "5"]
        ) == 0
        data = load_image_archive(
            os.path.join(run_dir, "generated_c0.img"),
            os.path.join(run_dir, "generated_c0.lbl"),
        )
        assert len(data) == 5
        assert data.image_shape == (10, 10)
        np.testing.assert_array_equal(data.labels, np.zeros(5, dtype=np.int64))
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_count_zero_valid_header(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(
            ["generate", "--config", cfg_path, "--label", "1", "--count", "0"]
        ) == 0
        data = load_image_archive(
            os.path.join(run_dir, "generated_c1.img"),
            os.path.join(run_dir, "generated_c1.lbl"),
        )
        assert len(data) == 0
        assert data.image_shape == (10, 10)

    def test_label_out_of_range_exits_2(self, trained, capsys) -> None:
        cfg_path, _ = trained
        assert main(
            ["generate", "--config", cfg_path, "--label", "7", "--count", "1"]
        ) == 2
        assert "label 7" in capsys.readouterr().err

    def test_negative_count_exits_2(self, trained) -> None:
        cfg_path, _ = trained
        assert main(
            ["generate", "--config", cfg_path, "--label", "0", "--count", "-1"]
        ) == 2


class TestBalance:
    @pytest.mark.parametrize("method", ["meda_lude", "ros", "smote", "adasyn"])
    def test_histogram_uniform(self, trained, method) -> None:
        cfg_path, run_dir = trained
        assert main(["balance", "--config", cfg_path, "--method", method]) == 0
        balanced = load_idx(
            os.path.join(run_dir, f"balanced_{method}_images.idx"),
            os.path.join(run_dir, f"balanced_{method}_labels.idx"),
        )
        np.testing.assert_array_equal(balanced.class_counts(3), [20, 20, 20])

    def test_ros_matches_library_call(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(["balance", "--config", cfg_path, "--method", "ros"]) == 0
        cfg = resolve_config(_args(config=cfg_path))
        train = load_idx(
            os.path.join(run_dir, "train_images.idx"),
            os.path.join(run_dir, "train_labels.idx"),
        )
        expected = ros(train, seed=cfg.sampler.seed)
        loaded = load_idx(
            os.path.join(run_dir, "balanced_ros_images.idx"),
            os.path.join(run_dir, "balanced_ros_labels.idx"),
        )
        np.testing.assert_array_equal(loaded.labels, expected.labels)
        np.testing.assert_allclose(loaded.images, expected.images, atol=1 / 510)

    def test_unknown_method_rejected_by_parser(self, trained) -> None:
        cfg_path, _ = trained
        with pytest.raises(SystemExit) as exc_info:
            main(["balance", "--config", cfg_path, "--method", "mixup"])
        assert exc_info.value.code == 2


class _args:
    """Minimal stand-in for the parsed argparse namespace."""

    def __init__(self, config=None, seed=None, run_dir=None) -> None:
        self.config = config
        self.seed = seed
        self.run_dir = run_dir


class TestResolveConfig:
    def test_explicit_config_wins(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        cfg = resolve_config(_args(config=cfg_path))
        assert cfg.data.class_count == 3

    def test_snapshot_fallback(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        cfg = resolve_config(_args(run_dir=str(tmp_path / "run")))
        assert cfg.data.class_count == 3
        assert cfg.run_dir == str(tmp_path / "run")

    def test_defaults_without_any_source(self, tmp_path) -> None:
        cfg = resolve_config(_args(run_dir=str(tmp_path / "nowhere")))
        assert cfg.data.class_count == default_config().data.class_count

    def test_seed_override(self, tmp_path) -> None:
        cfg_path = write_tiny_config(tmp_path)
        cfg = resolve_config(_args(config=cfg_path, seed=42))
        assert cfg.seed == 42


class TestEvaluate:
    def test_row_reproducible_and_bounded(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(["evaluate", "--config", cfg_path, "--method", "imbalanced"]) == 0
        report_path = os.path.join(run_dir, "eval_report.csv")
        first = open(report_path, "rb").read()
        assert main(["evaluate", "--config", cfg_path, "--method", "imbalanced"]) == 0
        assert open(report_path, "rb").read() == first
        lines = first.decode().splitlines()
        assert lines[0] == (
            "method,config_hash,accuracy,macro_precision,macro_recall,"
            "macro_specificity,macro_f1,g_mean,auc"
        )
        row = next(l for l in lines[1:] if l.startswith("imbalanced,"))
        for cell in row.split(",")[2:]:
            assert 0.0 <= float(cell) <= 1.0

    def test_missing_balanced_set_exits_2(self, tmp_path, capsys) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        assert main(["evaluate", "--config", cfg_path, "--method", "adasyn"]) == 2
        assert "balanced_adasyn" in capsys.readouterr().err

    def test_separable_toy_reaches_full_accuracy(self, tmp_path) -> None:
        rng = np.random.default_rng(0)
        def block(label: int, n: int) -> LabeledImageSet:
            base = np.full((n, 4, 4), 0.9 * label + 0.05)
            noise = rng.uniform(-0.05, 0.05, size=base.shape)
            return LabeledImageSet(base + noise, np.full(n, label))

        train = LabeledImageSet(
            np.concatenate([block(0, 20).images, block(1, 20).images]),
            np.repeat([0, 1], 20),
        )
        val = LabeledImageSet(
            np.concatenate([block(0, 10).images, block(1, 10).images]),
            np.repeat([0, 1], 10),
        )
        run_dir = tmp_path / "run"
        os.makedirs(run_dir)
        save_idx(
            train,
            str(run_dir / "train_images.idx"),
            str(run_dir / "train_labels.idx"),
        )
        save_idx(
            val, str(run_dir / "val_images.idx"), str(run_dir / "val_labels.idx")
        )
        mapping = {
            "run_dir": str(run_dir),
            "data": {
                "class_count": 2,
                "height": 4,
                "width": 4,
                "per_class": 40,
                "n_min": 10,
                "n_maj": 20,
                "n_val": 10,
                "minority_classes": [0],
            },
            "model": {"image_hidden": [16, 8]},
            "final_classifier": {"max_epochs": 60},
        }
        cfg_path = str(tmp_path / "cfg.json")
        save_config(from_dict(mapping), cfg_path)
        assert main(["evaluate", "--config", cfg_path, "--method", "imbalanced"]) == 0
        lines = open(run_dir / "eval_report.csv").read().splitlines()
        row = next(l for l in lines[1:] if l.startswith("imbalanced,"))
        cells = row.split(",")
        assert float(cells[2]) == 1.0  # accuracy
        assert float(cells[6]) == 1.0  # macro F1


class TestCompare:
    def test_table_shape_and_control(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(
            ["compare", "--config", cfg_path, "--methods", "meda_lude", "ros"]
        ) == 0
        lines = open(os.path.join(run_dir, "compare.csv")).read().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "criterion,imbalanced,meda_lude,ros"
        assert len(lines) == 2 + 7
        for line in lines[2:]:
            cells = line.split(",")
            assert len(cells) == 4
            for cell in cells[1:]:
                float(cell)

    def test_control_not_duplicated(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(
            ["compare", "--config", cfg_path, "--methods", "imbalanced", "ros"]
        ) == 0
        header = open(os.path.join(run_dir, "compare.csv")).read().splitlines()[1]
        assert header == "criterion,imbalanced,ros"

    def test_rerun_byte_identical(self, trained) -> None:
        cfg_path, run_dir = trained
        args = ["compare", "--config", cfg_path, "--methods", "ros"]
        assert main(args) == 0
        first = open(os.path.join(run_dir, "compare.csv"), "rb").read()
        assert main(args) == 0
        assert open(os.path.join(run_dir, "compare.csv"), "rb").read() == first


class TestExportFeatures:
    def test_shape_and_reexport_identical(self, trained) -> None:
        cfg_path, run_dir = trained
        assert main(["export-features", "--config", cfg_path, "--split", "val"]) == 0
        feat_path = os.path.join(run_dir, "features_val.csv")
        label_path = os.path.join(run_dir, "features_val_labels.csv")
        lines = open(feat_path).read().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert len(lines) == 1 + 30
        widths = {len(line.split(",")) for line in lines[1:]}
        assert widths == {8}
        label_lines = open(label_path).read().splitlines()
        assert len(label_lines) == 1 + 30
        first = open(feat_path, "rb").read()
        assert main(["export-features", "--config", cfg_path, "--split", "val"]) == 0
        assert open(feat_path, "rb").read() == first

    def test_before_train_exits_2(self, tmp_path, capsys) -> None:
        cfg_path = write_tiny_config(tmp_path)
        assert main(["prepare", "--config", cfg_path]) == 0
        assert main(["export-features", "--config", cfg_path, "--split", "val"]) == 2
        assert "models.bin" in capsys.readouterr().err
