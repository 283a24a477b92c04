import csv
import json

import numpy as np
import pytest

from chl.checkpoint import file_hash, load_checkpoint, save_checkpoint
from chl.cli import build_parser, main
from chl.config import load_config
from chl.data import write_png
from chl.errors import DataError
from chl.pipeline import run_pipeline, verify_chain


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tiny_config, capsys):
        assert main(["run", "--config", str(tiny_config("[extra]\nfoo = 1\n"))]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_manifest_is_data_error(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(f"[run]\nmanifest = {tmp_path / 'none.csv'}\nout_dir = {tmp_path / 'o'}\n")
        assert main(["run", "--config", str(path)]) == 3

    def test_eval_rejects_wrong_stage(self, tmp_path, tiny_manifest):
        from chl.checkpoint import Checkpoint
        from chl.encoder import EncoderConfig

        ckpt = tmp_path / "p.ckpt"
        save_checkpoint(ckpt, Checkpoint("pretrain", 0, 0, EncoderConfig(16, (4,), 4), {}))
        args = ["eval", "--checkpoint", str(ckpt), "--manifest", str(tiny_manifest), "--out", str(tmp_path / "r.csv")]
        assert main(args) == 2

    def test_help_documents_config_keys(self):
        text = build_parser().format_help()
        assert "relax_threshold" in text and "CHL_SEED" in text


class TestStages:
    def test_stagewise_commands(self, tiny_config, tmp_path, tiny_manifest):
        cfg = str(tiny_config())
        pre = tmp_path / "pre.ckpt"
        assert main(["pretrain", "--config", cfg, "--out", str(pre)]) == 0
        assert (tmp_path / "pre.resolved.ini").is_file()
        pairs = tmp_path / "pairs.json"
        rel = tmp_path / "rel.ckpt"
        assert main(["relax", "--checkpoint", str(pre), "--config", cfg, "--threshold", "0.3",
                     "--out", str(pairs), "--ckpt-out", str(rel)]) == 0
        assert json.loads(pairs.read_text())["threshold"] == 0.3
        assert (tmp_path / "pairs.sim").is_file()
        ft = tmp_path / "ft.ckpt"
        assert main(["finetune", "--checkpoint", str(rel), "--config", cfg, "--out", str(ft)]) == 0
        assert (tmp_path / "ft_epochs.csv").is_file()
        verify_chain([pre, rel, ft])
        report = tmp_path / "report.csv"
        assert main(["eval", "--checkpoint", str(ft), "--manifest", str(tiny_manifest), "--out", str(report)]) == 0
        rows = read_rows(report)
        assert rows[0] == ["Fold", "Precision", "Recall", "Weight-F1", "Acc", "Balance-Acc", "Kappa", "Dice"]
        assert read_rows(tmp_path / "report_patient.csv")[0] == ["Fold", "Image-Acc", "Patient-Acc"]

    def test_finetune_rejects_pretrain_checkpoint(self, tiny_config, tmp_path):
        cfg = str(tiny_config())
        pre = tmp_path / "pre.ckpt"
        main(["pretrain", "--config", cfg, "--out", str(pre)])
        assert main(["finetune", "--checkpoint", str(pre), "--config", cfg, "--out", str(tmp_path / "f.ckpt")]) == 2


class TestRun:
    def test_run_writes_chain_and_reports(self, tiny_config, tmp_path):
        assert main(["run", "--config", str(tiny_config())]) == 0
        out = tmp_path / "out"
        fold = out / "fold0"
        for name in ("pretrain.ckpt", "similarity.bin", "pairs.json", "relax.ckpt", "finetune.ckpt", "predictions.csv"):
            assert (fold / name).is_file(), name
        assert (out / "resolved_config.ini").is_file()
        assert len(read_rows(out / "report.csv")) == 3  # header, fold 0, mean
        verify_chain([fold / "pretrain.ckpt", fold / "relax.ckpt", fold / "finetune.ckpt"])

    def test_determinism_and_resume(self, tiny_config, tmp_path):
        cfg = load_config(tiny_config(), apply_env=False)
        run_pipeline(cfg)
        fold = tmp_path / "out" / "fold0"
        first = {p.name: file_hash(p) for p in fold.glob("*.ckpt")}
        report = (tmp_path / "out" / "report.csv").read_bytes()
        run_pipeline(cfg)
        assert {p.name: file_hash(p) for p in fold.glob("*.ckpt")} == first
        assert (tmp_path / "out" / "report.csv").read_bytes() == report
        # Resume with everything on disk recomputes nothing.
        stamps = {p.name: p.stat().st_mtime_ns for p in fold.glob("*.ckpt")}
        run_pipeline(cfg, resume=True)
        assert {p.name: p.stat().st_mtime_ns for p in fold.glob("*.ckpt")} == stamps

    def test_resume_recomputes_after_broken_link(self, tiny_config, tmp_path):
        cfg = load_config(tiny_config(), apply_env=False)
        run_pipeline(cfg)
        fold = tmp_path / "out" / "fold0"
        relax_hash = file_hash(fold / "relax.ckpt")
        ckpt = load_checkpoint(fold / "pretrain.ckpt")
        ckpt.metadata["note"] = "edited"
        save_checkpoint(fold / "pretrain.ckpt", ckpt)
        with pytest.raises(DataError, match="hash chain broken"):
            verify_chain([fold / "pretrain.ckpt", fold / "relax.ckpt"])
        run_pipeline(cfg, resume=True)
        assert file_hash(fold / "relax.ckpt") != relax_hash
        verify_chain([fold / "pretrain.ckpt", fold / "relax.ckpt", fold / "finetune.ckpt"])

    def test_skip_relax_omits_pairs(self, tiny_config, tmp_path):
        assert main(["run", "--config", str(tiny_config()), "--skip-relax", "--out-dir", str(tmp_path / "b")]) == 0
        assert not (tmp_path / "b" / "fold0" / "pairs.json").exists()
        assert load_checkpoint(tmp_path / "b" / "fold0" / "relax.ckpt").metadata["skip_relax"] is True


class TestAblate:
    def test_table_shape(self, tiny_config, tmp_path):
        out = tmp_path / "table.csv"
        assert main(["ablate", "--config", str(tiny_config()), "--combos", "comb1,comb7", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert rows[0] == ["Term", "Comb1", "Comb7"]
        assert rows[1] == ["Sup", "x", "x"]
        assert rows[2] == ["Elim", "", "x"]
        assert rows[3] == ["Self", "", "x"]
        assert rows[4][0] == "Accuracy"

    def test_unknown_combo(self, tiny_config):
        assert main(["ablate", "--config", str(tiny_config()), "--combos", "comb9"]) == 2


class TestImageTools:
    @pytest.fixture
    def image(self, tmp_path):
        path = tmp_path / "tile.png"
        write_png(path, np.random.default_rng(0).uniform(60, 230, (12, 12, 3)))
        return path

    def test_stain_separate(self, image, tmp_path):
        out = tmp_path / "sep"
        assert main(["stain", "separate", str(image), "--out", str(out), "--max-iterations", "50"]) == 0
        for name in ("hematoxylin.png", "eosin.png", "reconstruction.png"):
            assert (out / name).is_file()
        summary = json.loads((out / "stain.json").read_text())
        assert len(summary["w_row_major"]) == 6

    def test_augment_preview(self, image, tmp_path):
        out = tmp_path / "aug.png"
        assert main(["augment-preview", str(image), "--strength", "0.2", "--pipeline", "--out", str(out)]) == 0
        assert out.is_file()

    def test_blank_image_is_data_error(self, tmp_path):
        path = tmp_path / "white.png"
        write_png(path, np.full((8, 8, 3), 255.0))
        assert main(["stain", "separate", str(path), "--out", str(tmp_path / "s")]) == 3

    def test_synth_data(self, tmp_path):
        assert main(["synth-data", "--out", str(tmp_path / "d"), "--n-per-class", "2", "--size", "8"]) == 0
        assert len(read_rows(tmp_path / "d" / "manifest.csv")) == 5
