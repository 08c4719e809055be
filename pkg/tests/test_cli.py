import csv
import hashlib
import json
import re

import numpy as np
import pytest

from abswift.cli import main, parse_run_config
from abswift.dataset import points_in_box, read_sample


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def dir_digest(path):
    h = hashlib.sha256()
    for p in sorted(path.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(
        ["gen-data", "--out", str(out), "--n-samples", "12", "--seed", "1",
         "--buildings", "3"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def train_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "cfg.txt"
    p.write_text(
        "# fast settings for tests\n"
        "train.epochs = 2\n"
        "train.n_vol_per_step = 256\n"
    )
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset, train_cfg):
    out = tmp_path_factory.mktemp("run")
    code = main(
        ["train", "--data", str(dataset), "--config", str(train_cfg),
         "--out", str(out)]
    )
    assert code == 0
    return out


class TestRunConfig:
    def test_defaults(self):
        model_cfg, train_cfg = parse_run_config(None)
        assert model_cfg.d == 48
        assert train_cfg.epochs == 500

    def test_overrides_and_comments(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("preset=desk\nmodel.d=24 # small\ntrain.epochs=3\n")
        model_cfg, train_cfg = parse_run_config(p)
        assert model_cfg.d == 24
        assert train_cfg.epochs == 3

    def test_unknown_key_rejected(self, tmp_path, capsys):
        p = tmp_path / "c.txt"
        p.write_text("model.bogus=1\n")
        code, _, err = run(capsys, "train", "--data", "x", "--config", str(p),
                           "--out", str(tmp_path / "o"))
        assert code == 1
        assert "bogus" in err


class TestGenData:
    def test_identical_digests_for_same_seed(self, tmp_path, capsys):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, _, _ = run(
                capsys, "gen-data", "--out", str(out), "--n-samples", "20",
                "--seed", "1", "--buildings", "3",
            )
            assert code == 0
            digests.append(dir_digest(out))
        assert digests[0] == digests[1]

    def test_zero_buildings_usage_error(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "gen-data", "--out", str(tmp_path / "o"),
            "--n-samples", "10", "--buildings", "0",
        )
        assert code == 1
        assert "buildings" in err

    def test_manifests_sorted_and_partition(self, dataset):
        rels = []
        for split in ("train", "valid", "test"):
            lines = (dataset / f"manifest_{split}.txt").read_text().split()
            assert lines == sorted(lines)
            rels += lines
        assert sorted(rels) == sorted(
            p.name for p in dataset.glob("sample_*.bin")
        )

    def test_histogram_printed(self, tmp_path, capsys):
        code, out, _ = run(
            capsys, "gen-data", "--out", str(tmp_path / "h"),
            "--n-samples", "10", "--seed", "3", "--buildings", "2",
        )
        assert code == 0
        assert "stability histogram" in out
        assert re.search(r"unstable=\d+ neutral=\d+ stable=\d+", out)


class TestTrain:
    def test_outputs_and_trace(self, trained):
        assert (trained / "weights.bin").exists()
        with open(trained / "loss_trace.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "lr", "loss"]
        assert len(rows) > 1
        assert (trained / "run_config_echo.txt").exists()

    def test_missing_manifest_names_path(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(
            capsys, "train", "--data", str(empty), "--out", str(tmp_path / "o")
        )
        assert code == 2
        assert "manifest_train.txt" in err

    def test_resume_reloads_bit_exactly(self, tmp_path, dataset, train_cfg,
                                        trained, capsys):
        # the resumed run's initial validation loss must equal the final
        # validation loss reported by the run that produced the weights
        code, out, _ = run(
            capsys, "train", "--data", str(dataset), "--config", str(train_cfg),
            "--out", str(trained),
        )
        assert code == 0
        prior_final = float(
            re.search(r"validation loss: initial \S+ final (\S+)", out).group(1)
        )
        code, out2, _ = run(
            capsys, "train", "--data", str(dataset), "--config", str(train_cfg),
            "--out", str(tmp_path / "resumed"),
            "--resume", str(trained / "weights.bin"),
        )
        assert code == 0
        resumed_initial = float(
            re.search(r"validation loss: initial (\S+)", out2).group(1)
        )
        assert resumed_initial == prior_final


class TestEval:
    def test_mean_baseline_nmse_one(self, tmp_path, dataset, trained, capsys):
        out = tmp_path / "eval"
        code, _, _ = run(
            capsys, "eval", "--data", str(dataset),
            "--weights", str(trained / "weights.bin"),
            "--split", "test", "--out", str(out), "--mean-baseline",
        )
        assert code == 0
        with open(out / "metrics.jsonl") as f:
            lines = [json.loads(line) for line in f]
        for entry in lines:
            if entry["metric"] == "nmse" and entry["value"] is not None:
                assert entry["value"] == pytest.approx(1.0, abs=1e-9)

    def test_aggregate_matches_hand_aggregation(self, tmp_path, dataset,
                                                trained, capsys):
        out = tmp_path / "eval2"
        code, _, _ = run(
            capsys, "eval", "--data", str(dataset),
            "--weights", str(trained / "weights.bin"),
            "--split", "valid", "--out", str(out),
        )
        assert code == 0
        with open(out / "metrics.jsonl") as f:
            lines = [json.loads(line) for line in f]
        agg = json.loads((out / "aggregate.json").read_text())
        for field in ("v", "p", "theta", "log_k", "log_eps"):
            for metric in ("nmse", "l1_err", "l2_err"):
                vals = [
                    e["value"] for e in lines
                    if e["field"] == field and e["metric"] == metric
                    and e["value"] is not None
                ]
                cell = agg[field][metric]
                assert cell["count"] == len(vals)
                if vals:
                    assert cell["mean"] == pytest.approx(np.mean(vals), rel=1e-9)
                    assert cell["std"] == pytest.approx(np.std(vals), abs=1e-12)

    def test_missing_split_rejected(self, tmp_path, dataset, trained, capsys):
        code, _, err = run(
            capsys, "eval", "--data", str(dataset),
            "--weights", str(trained / "weights.bin"),
            "--split", "bogus", "--out", str(tmp_path / "o"),
        )
        assert code == 2
        assert "manifest_bogus.txt" in err


class TestPredict:
    def test_slice_excludes_building_footprints(self, tmp_path, dataset,
                                                trained, capsys):
        sample_path = next(dataset.glob("sample_*.bin"))
        out = tmp_path / "slice.csv"
        code, _, _ = run(
            capsys, "predict", "--weights", str(trained / "weights.bin"),
            "--sample", str(sample_path), "--slice", "z=2", "--out", str(out),
        )
        assert code == 0
        sample = read_sample(sample_path)
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert rows
        coords = np.array(
            [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]
        )
        for box in sample.geometry.boxes:
            assert not points_in_box(coords, box).any()
        ks = np.array([float(r["k"]) for r in rows])
        eps = np.array([float(r["eps"]) for r in rows])
        assert np.all(ks > 0) and np.all(eps > 0)

    def test_points_mode_idempotent(self, tmp_path, dataset, trained, capsys):
        sample_path = next(dataset.glob("sample_*.bin"))
        pts = tmp_path / "pts.csv"
        pts.write_text("300,50,10\n390,90,45\n")
        outs = []
        for name in ("p1.csv", "p2.csv"):
            out = tmp_path / name
            code, _, _ = run(
                capsys, "predict", "--weights", str(trained / "weights.bin"),
                "--sample", str(sample_path), "--points", str(pts),
                "--out", str(out), "--seed", "4",
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_out_of_domain_points_usage_error(self, tmp_path, dataset,
                                              trained, capsys):
        sample_path = next(dataset.glob("sample_*.bin"))
        pts = tmp_path / "pts.csv"
        pts.write_text("10,10,200\n")
        code, _, err = run(
            capsys, "predict", "--weights", str(trained / "weights.bin"),
            "--sample", str(sample_path), "--points", str(pts),
            "--out", str(tmp_path / "o.csv"),
        )
        assert code == 1
        assert "outside the domain" in err


class TestAblate:
    def test_step0_unsupported(self, tmp_path, dataset, capsys):
        code, _, err = run(
            capsys, "ablate", "--data", str(dataset), "--steps", "0",
            "--out", str(tmp_path / "o"),
        )
        assert code == 1
        assert "unsupported" in err

    def test_single_step_matches_train_plus_eval(self, tmp_path, dataset,
                                                 train_cfg, trained, capsys):
        out = tmp_path / "abl"
        code, _, _ = run(
            capsys, "ablate", "--data", str(dataset), "--config", str(train_cfg),
            "--steps", "4", "--out", str(out),
        )
        assert code == 0
        eval_out = tmp_path / "ev"
        code, _, _ = run(
            capsys, "eval", "--data", str(dataset),
            "--weights", str(trained / "weights.bin"),
            "--split", "test", "--out", str(eval_out),
        )
        assert code == 0
        abl = json.loads((out / "ablation_table.json").read_text())["step4"]
        ev = json.loads((eval_out / "aggregate.json").read_text())
        assert abl == ev

    def test_config_echo_documents_shared_seed(self, tmp_path, dataset,
                                               train_cfg, capsys):
        out = tmp_path / "abl2"
        code, _, _ = run(
            capsys, "ablate", "--data", str(dataset), "--config", str(train_cfg),
            "--steps", "1", "--out", str(out),
        )
        assert code == 0
        echo = (out / "run_config_echo.txt").read_text()
        assert "ablate.shared_seed=0" in echo
        assert "ablate.steps=1" in echo
