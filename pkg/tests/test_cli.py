import hashlib

import numpy as np
import pytest

from formanttcn import cli
from formanttcn import model as M
from formanttcn.io import read_manifest


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["synth", "--train", "3", "--val", "1", "--test", "1", "--seed", "7",
                     "--out", str(out)]) == 0
    return out


def manifest(corpus, split):
    return corpus / f"{split}.manifest"


def test_synth_deterministic(corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--train", 3, "--val", 1, "--test", 1, "--seed", 7,
                       "--out", tmp_path)
    assert code == 0 and "train" in out
    assert digest(tmp_path) == digest(corpus)


def test_eval_pred_equal_ref(corpus, tmp_path, capsys):
    _, labels = read_manifest(manifest(corpus, "test"))[0]
    code, out, _ = run(capsys, "eval", "--pred", labels, "--ref", labels, "--out", tmp_path / "r.csv")
    assert code == 0 and "MAE" in out
    rows = (tmp_path / "r.csv").read_text().splitlines()[1:]
    assert rows and all(float(r.split(",")[3]) == 0.0 for r in rows)


def test_baseline_then_eval(corpus, tmp_path, capsys):
    audio, labels = read_manifest(manifest(corpus, "test"))[0]
    assert run(capsys, "baseline", "--in", audio, "--out", tmp_path / "b.csv")[0] == 0
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "b.csv", "--ref", labels)
    assert code == 0 and "overall" in out


def test_features_and_norm(corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "features", "--manifest", manifest(corpus, "train"),
                       "--out", tmp_path / "f", "--fit-norm", tmp_path / "n.bin")
    assert code == 0 and len(list((tmp_path / "f").glob("*.feat"))) == 3
    assert (tmp_path / "n.bin").is_file()


def test_train_and_track(corpus, tmp_path, capsys):
    model = tmp_path / "m.bin"
    code, out, _ = run(capsys, "train", "--train-manifest", manifest(corpus, "train"),
                       "--val-manifest", manifest(corpus, "val"), "--out", model,
                       "--log", tmp_path / "log.csv", "--epochs", 1, "--seed", 2,
                       "--set", "channels=4", "--set", "head_width=8")
    assert code == 0, out
    assert M.load(model).config.channels == 4
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 2
    audio, _ = read_manifest(manifest(corpus, "test"))[0]
    code, _, err = run(capsys, "track", "--model", model, "--norm", f"{model}.norm",
                       "--in", audio, "--out", tmp_path / "t.csv")
    assert code == 0, err
    assert (tmp_path / "t.csv").read_text().startswith("frame_index,time_s,f1_hz")


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["baseline", "--bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert err.startswith("formanttcn: error: code=2 kind=usage") and len(err.splitlines()) == 1


def test_unknown_setting_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--train-manifest", "a", "--val-manifest", "b",
                       "--out", "c", "--set", "colour=blue")
    assert code == 2 and "colour" in err


def test_missing_file_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "track", "--model", tmp_path / "none.bin", "--norm", "x",
                       "--in", "y", "--out", tmp_path / "o.csv")
    assert code == 3 and "kind=data" in err and "none.bin" in err


def test_corrupt_model_is_data_error(tmp_path, capsys):
    (tmp_path / "bad.bin").write_bytes(b"garbage!" * 4)
    (tmp_path / "n").write_bytes(b"")
    (tmp_path / "a.wav").write_bytes(b"")
    code, _, err = run(capsys, "track", "--model", tmp_path / "bad.bin", "--norm", tmp_path / "n",
                       "--in", tmp_path / "a.wav", "--out", tmp_path / "o.csv")
    assert code == 3 and "magic" in err


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--train-manifest", "--epochs", "--set", "--checkpoint", "--seed"):
        assert flag in out


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert "network" in out and "FAIL" not in out
    assert np.all([line.endswith("PASS") for line in out.splitlines()])
