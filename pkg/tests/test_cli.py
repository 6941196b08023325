import json

import numpy as np
import pytest

from dsthcn import data as D
from dsthcn import hypergraph as hg
from dsthcn.cli import main, read_scores
from dsthcn.skeleton import NTU25

TINY = {"model": {"channels": [4, 8], "k_spatial": 2}, "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 4},
        "seed": 3}


def call(*argv):
    return main([str(a) for a in argv])


def run(capsys, *argv):
    code = call(*argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert call("gen-data", "--out", root / "train.skl", "--val-out", root / "val.skl", "--classes", 3,
                "--per-class", 4, "--val-per-class", 2, "--frames", 8, "--seed", 1) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert call("train", "--config", root / "cfg.json", "--data", root / "train.skl", "--val", root / "val.skl",
                "--out-dir", root / "run") == 0
    return root


class TestGenData:
    def test_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--out", tmp_path / f"{name}.skl", "--seed", 4, "--frames", 6)[0] == 0
        assert (tmp_path / "a.skl").read_bytes() == (tmp_path / "b.skl").read_bytes()

    def test_one_class(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path / "a.skl", "--classes", 1)
        assert code == 2 and "error" in err and len(err.strip().splitlines()) == 1
        assert not (tmp_path / "a.skl").exists()

    def test_split_sizes(self, trained):
        assert len(D.read_skl(trained / "train.skl")) == 12
        assert len(D.read_skl(trained / "val.skl")) == 6


class TestTrain:
    def test_outputs(self, trained):
        run_dir = trained / "run"
        for name in ("model.json", "model.bin", "last.json", "last.bin", "metrics.csv", "config.json",
                     "metrics.png"):
            assert (run_dir / name).exists(), name
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc,val_acc" and len(lines) == 4
        resolved = json.loads((run_dir / "config.json").read_text())
        assert resolved["seed"] == 3 and resolved["model"]["channels"] == [4, 8]

    def test_rerun_identical(self, trained, capsys):
        code, _, _ = run(capsys, "train", "--config", trained / "cfg.json", "--data", trained / "train.skl",
                         "--val", trained / "val.skl", "--out-dir", trained / "again", "--no-plots")
        assert code == 0
        assert (trained / "again" / "metrics.csv").read_bytes() == (trained / "run" / "metrics.csv").read_bytes()
        assert (trained / "again" / "last.bin").read_bytes() == (trained / "run" / "last.bin").read_bytes()

    def test_seed_flag_changes_run(self, trained, capsys):
        code, _, _ = run(capsys, "train", "--config", trained / "cfg.json", "--data", trained / "train.skl",
                         "--out-dir", trained / "other", "--seed", 11, "--no-plots")
        assert code == 0
        assert json.loads((trained / "other" / "config.json").read_text())["seed"] == 11
        assert (trained / "other" / "last.bin").read_bytes() != (trained / "run" / "last.bin").read_bytes()

    def test_bad_config(self, tmp_path, trained, capsys):
        (tmp_path / "c.json").write_text('{"model": {"depth": 3}}')
        code, _, err = run(capsys, "train", "--config", tmp_path / "c.json", "--data", trained / "train.skl",
                           "--out-dir", tmp_path / "o")
        assert code == 2 and "depth" in err

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path / "nope.skl", "--out-dir", tmp_path)
        assert code == 2 and "nope.skl" in err


class TestEval:
    def test_matches_last_epoch_train_acc(self, trained, capsys):
        code, out, _ = run(capsys, "eval", "--model", trained / "run" / "last.json", "--data", trained / "train.skl")
        assert code == 0
        hits, total = map(int, out.split("(")[1].rstrip(")\n").split("/"))
        last = (trained / "run" / "metrics.csv").read_text().splitlines()[-1].split(",")
        assert hits / total == pytest.approx(float(last[3]), abs=1e-12)

    def test_scores_file(self, trained, capsys):
        path = trained / "scores.csv"
        run(capsys, "eval", "--model", trained / "run" / "model.json", "--data", trained / "val.skl",
            "--scores-out", path)
        assert path.read_text().splitlines()[0] == "sample,score_0,score_1,score_2"
        np.testing.assert_allclose(read_scores(path).sum(axis=1), 1.0, atol=1e-6)

    def test_empty_data(self, trained, tmp_path, capsys):
        D.write_skl(tmp_path / "e.skl", D.Dataset("ntu25", 3, []))
        code, _, err = run(capsys, "eval", "--model", trained / "run" / "model.json", "--data", tmp_path / "e.skl")
        assert code == 2 and "no samples" in err


def write_scores(path, s):
    lines = ["sample," + ",".join(f"score_{j}" for j in range(s.shape[1]))]
    lines += [f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(s)]
    path.write_text("\n".join(lines) + "\n")


class TestFuse:
    def test_single_file_equals_eval(self, trained, capsys):
        path = trained / "val_scores.csv"
        _, ev, _ = run(capsys, "eval", "--model", trained / "run" / "model.json", "--data", trained / "val.skl",
                       "--scores-out", path)
        code, fu, _ = run(capsys, "fuse", "--scores", path, "--weights", "1", "--data", trained / "val.skl")
        assert code == 0 and fu == ev

    def test_two_stream_toy(self, tmp_path, capsys):
        write_scores(tmp_path / "a.csv", np.array([[0.9, 0.1], [0.2, 0.8]]))
        write_scores(tmp_path / "b.csv", np.array([[0.1, 0.9], [0.9, 0.1]]))
        code, _, _ = run(capsys, "fuse", "--scores", tmp_path / "a.csv", tmp_path / "b.csv",
                         "--weights", "0.6,0.4", "--out", tmp_path / "p.csv")
        assert code == 0
        assert (tmp_path / "p.csv").read_text() == "sample,prediction\n0,0\n1,1\n"

    def test_row_mismatch(self, tmp_path, capsys):
        write_scores(tmp_path / "a.csv", np.ones((2, 3)))
        write_scores(tmp_path / "b.csv", np.ones((3, 3)))
        code, _, err = run(capsys, "fuse", "--scores", tmp_path / "a.csv", tmp_path / "b.csv")
        assert code == 2 and "shape" in err

    def test_not_a_scores_file(self, tmp_path, capsys):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        assert run(capsys, "fuse", "--scores", tmp_path / "x.csv")[0] == 2


class TestInspect:
    def read(self, path):
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1:]

    def test_kmeans_identity(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "inspect", "--data", trained / "train.skl", "--what", "spatial-kmeans",
                         "--clusters", 25, "--out", tmp_path)
        assert code == 0
        np.testing.assert_array_equal(self.read(tmp_path / "H.csv"), np.eye(25))
        assert (tmp_path / "H.png").exists() and (tmp_path / "Htilde.png").exists()
        assert (tmp_path / "W.csv").read_text().startswith("edge,weight\n0,1\n")

    def test_constant_sample_tph(self, tmp_path, capsys):
        x = np.repeat(NTU25.rest_pose.T[:, None, :], 6, axis=1).astype(np.float32)
        D.write_skl(tmp_path / "c.skl", D.Dataset("ntu25", 2, [D.SkeletonSample(0, x)]))
        code, _, _ = run(capsys, "inspect", "--data", tmp_path / "c.skl", "--what", "tph", "--k", 1,
                         "--out", tmp_path / "o", "--no-plots")
        assert code == 0
        np.testing.assert_array_equal(self.read(tmp_path / "o" / "H.csv"), np.eye(6))

    def test_knn_matches_library(self, trained, tmp_path, capsys):
        run(capsys, "inspect", "--data", trained / "train.skl", "--what", "spatial-knn", "--k", 3,
            "--out", tmp_path, "--no-plots")
        H = hg.spatial_knn(NTU25, 3).H
        np.testing.assert_array_equal(self.read(tmp_path / "H.csv"), H)
        np.testing.assert_allclose(self.read(tmp_path / "Htilde.csv"), hg.normalize(H).matrix, atol=1e-8)

    @pytest.mark.parametrize("with_model", [False, True])
    def test_cross(self, trained, tmp_path, capsys, with_model):
        extra = ["--model", trained / "run" / "model.json", "--block", 1] if with_model else []
        code, _, _ = run(capsys, "inspect", "--data", trained / "train.skl", "--what", "cross",
                         "--out", tmp_path, "--topology", "parts", *extra)
        assert code == 0
        t = 8  # block 1 sees the full clip; only its temporal fusion strides
        st = self.read(tmp_path / "st_H.csv")
        assert st.shape == (25, t) and np.all(np.abs(st) < 1)
        assert self.read(tmp_path / "ts_H.csv").shape == (t, 25)
        assert (tmp_path / "st_Htilde.png").exists()

    def test_bad_sample(self, trained, tmp_path, capsys):
        code, _, err = run(capsys, "inspect", "--data", trained / "train.skl", "--what", "tph", "--sample", 99,
                           "--out", tmp_path)
        assert code == 2 and "sample" in err


class TestExport:
    @pytest.mark.parametrize("feature,block,shape", [
        ("concat", 0, (12, 8, 25)), ("out", 0, (4, 8, 25)),
        ("F_out", 1, (8, 8, 25)), ("Z_out", 1, (8, 4, 25)),
    ])
    def test_features(self, trained, tmp_path, capsys, feature, block, shape):
        code, _, _ = run(capsys, "export-features", "--model", trained / "run" / "model.json",
                         "--data", trained / "val.skl", "--feature", feature, "--out", tmp_path / "f.csv",
                         "--block", block)
        assert code == 0
        assert D.read_feature_csv(tmp_path / "f.csv").shape == shape
        assert (tmp_path / "f.png").exists()

    def test_sample_round_trip(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "export-sample", "--data", trained / "val.skl", "--sample", 2,
                         "--out", tmp_path / "s.csv", "--no-plots")
        assert code == 0
        want = D.read_skl(trained / "val.skl").samples[2].tensor
        np.testing.assert_allclose(D.read_feature_csv(tmp_path / "s.csv"), want, atol=1e-9)

    def test_preprocessed_sample(self, trained, tmp_path, capsys):
        run(capsys, "export-sample", "--data", trained / "val.skl", "--preprocess", "--out", tmp_path / "s.csv")
        got = D.read_feature_csv(tmp_path / "s.csv")
        assert np.allclose(got[:, :, NTU25.center_joint], 0)


class TestParams:
    def test_default_count_stable(self, capsys):
        _, a, _ = run(capsys, "params")
        _, b, _ = run(capsys, "params")
        assert a == b and 2_000_000 <= int(a) <= 4_500_000

    def test_threads_env(self, monkeypatch, capsys, tmp_path):
        monkeypatch.setenv("DSTHCN_THREADS", "zero")
        code, _, err = run(capsys, "eval", "--model", tmp_path / "m.json", "--data", tmp_path / "d.skl")
        assert code == 2 and "thread" in err
