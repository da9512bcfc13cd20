import csv
import json
from pathlib import Path

import numpy as np
import pytest

from caplab.cli import main
from caplab.model import load_checkpoint


MICRO_CONFIG = {
    "seed": 13,
    "dataset": {
        "n_train": 24, "n_val": 6, "n_test": 6, "refs_per_image": 3,
        "feature_dim": 6, "n_common": 5, "n_rare": 10, "n_generic": 2,
        "common_per_image": 2, "rare_per_image": 2, "zipf_exponent": 1.0,
        "rare_mention_rate": 0.7, "noise_std": 0.02, "min_count": 1,
    },
    "model": {"hidden_dim": 8, "max_len": 12, "init_scale": 0.1},
    "ce": {"epochs": 2, "lr": 0.3, "batch_size": 8},
    "rl": {"epochs": 1, "lr": 0.02, "batch_size": 8, "samples_per_image": 2},
    "joint": {"lam": 0.5, "epochs": 1, "lr": 0.02, "batch_size": 8, "samples_per_image": 2},
    "finetune": {"lr_grid": [0.01, 0.001], "beta_prime_grid": [0.1, 1.0],
                 "batch_size": 8, "epochs": 1, "gamma": 1.0, "alpha": 1.0},
    "decode": {"method": "beam", "beam_size": 3, "nucleus_p": 0.95, "beta": 1.0,
               "beta_prime": 1.0},
    "metrics": {"recall_ks": [1, 5], "repetition_n": 4, "histogram_bins": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    data_dir = root / "data"
    assert main(["gen-data", "--config", str(config_path), "--out", str(data_dir)]) == 0
    return root, config_path, data_dir


@pytest.fixture(scope="module")
def ce_checkpoint(workdir):
    root, config_path, data_dir = workdir
    run_dir = root / "run"
    code = main(["train", "--stage", "ce", "--config", str(config_path),
                 "--data", str(data_dir), "--out", str(run_dir)])
    assert code == 0
    return run_dir / "ce.npz"


class TestGenData:
    def test_deterministic_files(self, workdir, tmp_path):
        root, config_path, data_dir = workdir
        other = tmp_path / "data2"
        assert main(["gen-data", "--config", str(config_path), "--out", str(other)]) == 0
        for split in ("train", "val", "test"):
            assert (data_dir / f"{split}.jsonl").read_bytes() == \
                (other / f"{split}.jsonl").read_bytes()

    def test_missing_config_usage_error(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 2

    def test_zero_images_validation_error(self, tmp_path, capsys):
        bad = dict(MICRO_CONFIG)
        bad["dataset"] = dict(MICRO_CONFIG["dataset"], n_train=0)
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(bad))
        assert main(["gen-data", "--config", str(config_path),
                     "--out", str(tmp_path / "d")]) == 2
        assert "split" in capsys.readouterr().err

    def test_sidecars_carry_config_hash(self, workdir):
        _, _, data_dir = workdir
        sidecar = json.loads((data_dir / "train.jsonl.meta.json").read_text())
        assert sidecar["config_hash"]
        assert sidecar["seed"] == MICRO_CONFIG["seed"]


class TestTrain:
    def test_ce_zero_epochs_equals_initialization(self, workdir, tmp_path):
        root, config_path, data_dir = workdir
        frozen_cfg = json.loads(config_path.read_text())
        frozen_cfg["ce"]["epochs"] = 0
        cfg2 = tmp_path / "cfg0.json"
        cfg2.write_text(json.dumps(frozen_cfg))
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--stage", "ce", "--config", str(cfg2),
                     "--data", str(data_dir), "--out", str(out1)]) == 0
        assert main(["train", "--stage", "ce", "--config", str(cfg2),
                     "--data", str(data_dir), "--out", str(out2)]) == 0
        p1, _ = load_checkpoint(out1 / "ce.npz")
        p2, _ = load_checkpoint(out2 / "ce.npz")
        assert p1.full_hash() == p2.full_hash()

    def test_rl_requires_init(self, workdir, tmp_path):
        root, config_path, data_dir = workdir
        assert main(["train", "--stage", "rl", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 2

    def test_rl_stage_runs_and_logs(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "rl_run"
        assert main(["train", "--stage", "rl", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(out),
                     "--init", str(ce_checkpoint)]) == 0
        with open(out / "rl_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and set(rows[0]) == {"epoch", "mean_reward", "mean_greedy_reward"}

    def test_joint_lambda_validated(self, workdir, ce_checkpoint, tmp_path):
        root, config_path, data_dir = workdir
        assert main(["train", "--stage", "joint", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(tmp_path / "j"),
                     "--init", str(ce_checkpoint), "--lam", "1.5"]) == 2


class TestDecodeEval:
    def test_decode_default_beam_and_line_count(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "caps.jsonl"
        assert main(["decode", "--checkpoint", str(ce_checkpoint),
                     "--config", str(config_path), "--data", str(data_dir),
                     "--split", "test", "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == MICRO_CONFIG["dataset"]["n_test"]
        first = json.loads(lines[0])
        assert set(first) == {"id", "caption", "logprob"}

    def test_bp_without_frozen_names_flag(self, workdir, ce_checkpoint, capsys):
        root, config_path, data_dir = workdir
        code = main(["decode", "--checkpoint", str(ce_checkpoint),
                     "--config", str(config_path), "--data", str(data_dir),
                     "--method", "bp", "--out", str(root / "x.jsonl")])
        assert code == 2
        assert "--frozen" in capsys.readouterr().err

    def test_eval_deterministic_bytes_and_schema(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        caps = root / "caps.jsonl"
        if not caps.exists():
            main(["decode", "--checkpoint", str(ce_checkpoint), "--config", str(config_path),
                  "--data", str(data_dir), "--split", "test", "--out", str(caps)])
        out1, out2 = root / "rep1", root / "rep2"
        for out in (out1, out2):
            assert main(["eval", "--captions", str(caps), "--config", str(config_path),
                         "--data", str(data_dir), "--split", "test",
                         "--out", str(out), "--run-id", "same"]) == 0
        assert (Path(str(out1) + ".csv")).read_bytes() == (Path(str(out2) + ".csv")).read_bytes()
        with open(str(out1) + ".csv") as fh:
            row = next(csv.DictReader(fh))
        for column in ("rep", "oor_count", "oor_mean_rank", "r_at_1", "unique_1", "cider"):
            assert column in row

    def test_eval_references_self_scores_zero_oor(self, workdir):
        root, config_path, data_dir = workdir
        # craft a caption file that copies each test image's first reference
        refs_file = root / "ref_caps.jsonl"
        with open(data_dir / "test.jsonl") as fh, open(refs_file, "w") as out:
            for line in fh:
                rec = json.loads(line)
                out.write(json.dumps({"id": rec["id"],
                                      "caption": " ".join(rec["references"][0]),
                                      "logprob": 0.0}) + "\n")
        assert main(["eval", "--captions", str(refs_file), "--config", str(config_path),
                     "--data", str(data_dir), "--split", "test",
                     "--out", str(root / "selfrep")]) == 0
        with open(str(root / "selfrep") + ".csv") as fh:
            row = next(csv.DictReader(fh))
        assert row["oor_count"] == "0"


class TestFinetuneCommand:
    def test_sft_fixed_lr(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "ft_sft"
        assert main(["finetune", "--method", "sft", "--config", str(config_path),
                     "--data", str(data_dir), "--checkpoint", str(ce_checkpoint),
                     "--out", str(out), "--lr", "0.01"]) == 0
        ft, _ = load_checkpoint(out / "sft.npz")
        base, _ = load_checkpoint(ce_checkpoint)
        assert ft.encoder_hash() == base.encoder_hash()
        assert ft.classifier_hash() != base.classifier_hash()

    def test_wft_sweep_writes_rows_and_frozen(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "ft_wft"
        assert main(["finetune", "--method", "wft", "--config", str(config_path),
                     "--data", str(data_dir), "--checkpoint", str(ce_checkpoint),
                     "--out", str(out), "--sweep"]) == 0
        with open(out / "wft_plain_sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        grids = MICRO_CONFIG["finetune"]
        assert len(rows) == len(grids["lr_grid"]) * len(grids["beta_prime_grid"])
        updated, _ = load_checkpoint(out / "wft.npz")
        frozen, meta = load_checkpoint(out / "wft_frozen.npz")
        assert updated.full_hash() != frozen.full_hash()
        assert "beta_prime" in meta["extra"]

    def test_lr_required_without_sweep(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        assert main(["finetune", "--method", "sft", "--config", str(config_path),
                     "--data", str(data_dir), "--checkpoint", str(ce_checkpoint),
                     "--out", str(root / "x")]) == 2

    def test_bp_decoded_captions_from_wft(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "ft_wft"
        if not (out / "wft.npz").exists():
            main(["finetune", "--method", "wft", "--config", str(config_path),
                  "--data", str(data_dir), "--checkpoint", str(ce_checkpoint),
                  "--out", str(out), "--lr", "0.01", "--beta-prime", "1.0"])
        caps = root / "bp_caps.jsonl"
        assert main(["decode", "--checkpoint", str(out / "wft.npz"),
                     "--config", str(config_path), "--data", str(data_dir),
                     "--method", "bp", "--frozen", str(out / "wft_frozen.npz"),
                     "--split", "val", "--out", str(caps)]) == 0
        assert len(caps.read_text().strip().splitlines()) == MICRO_CONFIG["dataset"]["n_val"]


class TestAnalyze:
    def test_histogram_of_references_matches_corpus(self, workdir):
        root, config_path, data_dir = workdir
        out = root / "hist.csv"
        assert main(["analyze", "--what", "histogram", "--config", str(config_path),
                     "--data", str(data_dir), "--references", "--split", "train",
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "bin_index,relative_frequency"
        assert lines[-1].startswith("tail,")
        bins = [float(line.split(",")[1]) for line in lines[1:-1]]
        tail = float(lines[-1].split(",")[1])
        assert sum(bins) + tail == pytest.approx(1.0, abs=1e-9)

    def test_loss_surface_schema(self, workdir):
        root, config_path, _ = workdir
        out = root / "surface.csv"
        assert main(["analyze", "--what", "loss-surface", "--config", str(config_path),
                     "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["p1", "ce", "bp", "fl", "afl"]

    def test_sample_freq_requires_checkpoint(self, workdir):
        root, config_path, data_dir = workdir
        assert main(["analyze", "--what", "sample-freq", "--config", str(config_path),
                     "--data", str(data_dir), "--out", str(root / "sf.csv")]) == 2

    def test_sample_freq_runs(self, workdir, ce_checkpoint):
        root, config_path, data_dir = workdir
        out = root / "sf.csv"
        assert main(["analyze", "--what", "sample-freq", "--config", str(config_path),
                     "--data", str(data_dir), "--checkpoint", str(ce_checkpoint),
                     "--samples", "2", "--out", str(out)]) == 0
        assert out.exists()
