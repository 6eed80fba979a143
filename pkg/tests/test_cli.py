import numpy as np
import pytest

from textmatch import cli, training
from textmatch.datagen import read_manifest
from textmatch.evaluation import score_entries
from textmatch.metrics import confusion_metrics, select_threshold

TOY = ["--s-i", "8", "--d-i", "16", "--d-t", "16", "--d-att", "8", "--channels", "4,4,6", "--batch-size", "8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated manifest plus a two-epoch checkpoint, shared by read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--profile", "synthetic", "--pairs", "20", "--seed", "2", "--out", str(root / "data")]) == 0
    ckpt = root / "m.ckpt"
    assert cli.main(["train", "--manifest", str(root / "data"), "--checkpoint", str(ckpt), "--epochs", "2", "--lr", "0.05", *TOY]) == 0
    return root


def test_gen_summary_and_split(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--profile", "date", "--pairs", 100, "--seed", 7, "--out", tmp_path / "d")
    assert code == 0
    assert "200 samples" in out and "train=160 val=20 test=20" in out
    m = read_manifest(tmp_path / "d")
    assert len(m.entries) == 200


def test_gen_is_reproducible_and_guards_output(tmp_path, capsys):
    args = ["gen", "--profile", "date", "--pairs", 10, "--seed", 1, "--out"]
    run(capsys, *args, tmp_path / "a")
    first = (tmp_path / "a" / "manifest.tsv").read_bytes()
    code, _, err = run(capsys, *args, tmp_path / "a")
    assert code == 2 and "--force" in err
    assert run(capsys, *args, tmp_path / "a", "--force")[0] == 0
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == first


def test_unknown_profile_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--profile", "cheques", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_seed_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TEXTMATCH_SEED", "7")
    run(capsys, "gen", "--profile", "date", "--pairs", 5, "--out", tmp_path / "env")
    assert read_manifest(tmp_path / "env").seed == 7
    monkeypatch.setenv("TEXTMATCH_SEED", "seven")
    assert run(capsys, "gen", "--profile", "date", "--pairs", 5, "--out", tmp_path / "bad")[0] == 2


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# dates\nprofile=date\npairs=5  # small\nseed=3\n", encoding="utf-8")
    run(capsys, "gen", "--config", cfg, "--seed", 4, "--out", tmp_path / "g")
    echo = (tmp_path / "g" / "run_config.txt").read_text()
    assert "profile=date\n" in echo and "pairs=5\n" in echo and "seed=4\n" in echo
    parsed = cli.parse_config_text(echo)
    assert cli.RunConfig(**parsed).canonical() == echo


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("profil=date\n", encoding="utf-8")
    code, _, err = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "g")
    assert code == 2 and "profil" in err


def test_train_outputs_and_progress(workspace, tmp_path, capsys):
    ckpt = tmp_path / "t.ckpt"
    code, out, _ = run(capsys, "train", "--manifest", workspace / "data", "--checkpoint", ckpt, "--epochs", 2, *TOY)
    assert code == 0
    assert "epoch 1/2 loss=" in out and "val_f1=" in out and "tau=" in out
    assert ckpt.exists() and (tmp_path / "t.ckpt.history.tsv").exists() and (tmp_path / "t.ckpt.config.txt").exists()
    twin = tmp_path / "u.ckpt"
    run(capsys, "train", "--manifest", workspace / "data", "--checkpoint", twin, "--epochs", 2, *TOY)
    assert (tmp_path / "t.ckpt.history.tsv").read_bytes() == (tmp_path / "u.ckpt.history.tsv").read_bytes()
    assert ckpt.read_bytes() == twin.read_bytes()


def test_train_with_zero_lr_keeps_initial_params(workspace, tmp_path, capsys):
    from textmatch.matcher import init_params

    ckpt = tmp_path / "z.ckpt"
    run(capsys, "train", "--manifest", workspace / "data", "--checkpoint", ckpt, "--epochs", 1, "--lr", 0, "--seed", 5, *TOY)
    params, _, _ = training.load_checkpoint(ckpt)
    fresh = init_params(params.config, 5)
    for (n, a), (_, b) in zip(params.named_tensors(), fresh.named_tensors()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)


def test_train_rejects_bad_dims_before_training(workspace, tmp_path, capsys):
    code, out, err = run(capsys, "train", "--manifest", workspace / "data", "--checkpoint", tmp_path / "x", *TOY, "--s-i", 5)
    assert code == 2 and "epoch" not in out and "s_i" in err


def test_train_missing_manifest(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", tmp_path / "none.tsv", "--checkpoint", tmp_path / "c")
    assert code == 2 and "none.tsv" in err


def test_score_prints_label_from_stored_tau(workspace, tmp_path, capsys):
    image = workspace / "data" / "images" / "000000.pgm"
    code, out, _ = run(capsys, "score", "--image", image, "--text", "1234", "--checkpoint", workspace / "m.ckpt", "--dump-attention", tmp_path / "a.csv")
    assert code == 0
    fields = dict(line.split("=", 1) for line in out.strip().splitlines())
    score, tau = float(fields["score"]), float(fields["tau"])
    assert fields["label"] == str(int(score >= tau))
    rows = (tmp_path / "a.csv").read_text().strip().split("\n")
    assert len(rows) == 8 and len(rows[0].split(",")) == 8


def test_score_threshold_override(workspace, capsys):
    image = workspace / "data" / "images" / "000000.pgm"
    _, out, _ = run(capsys, "score", "--image", image, "--text", "1234", "--checkpoint", workspace / "m.ckpt", "--tau", -5)
    assert "label=1" in out


def test_score_sum_is_four_times_mean(workspace, capsys):
    image = workspace / "data" / "images" / "000000.pgm"
    base = ["score", "--image", image, "--text", "1234", "--checkpoint", workspace / "m.ckpt", "--reduction"]
    mean = float(run(capsys, *base, "mean")[1].splitlines()[0].split("=")[1])
    total = float(run(capsys, *base, "sum")[1].splitlines()[0].split("=")[1])
    assert total == pytest.approx(4 * mean, abs=1e-12)


def test_score_errors(workspace, capsys):
    image = workspace / "data" / "images" / "000000.pgm"
    code, _, err = run(capsys, "score", "--image", image, "--text", "12x4", "--checkpoint", workspace / "m.ckpt")
    assert code == 2 and "'x'" in err
    code, _, err = run(capsys, "score", "--image", image, "--text", "1", "--checkpoint", workspace / "missing.ckpt")
    assert code == 2 and "missing.ckpt" in err


def test_eval_reports_are_reproducible(workspace, tmp_path, capsys):
    args = ["eval", "--manifest", workspace / "data", "--checkpoint", workspace / "m.ckpt", "--report"]
    code, out, _ = run(capsys, *args, tmp_path / "r1")
    assert code == 0 and "tau" in out and "F1" in out
    run(capsys, *args, tmp_path / "r2")
    for ext in (".txt", ".kv"):
        assert (tmp_path / f"r1{ext}").read_bytes() == (tmp_path / f"r2{ext}").read_bytes()


def test_eval_cost_criterion_matches_oracle(workspace, tmp_path, capsys):
    run(capsys, "eval", "--manifest", workspace / "data", "--checkpoint", workspace / "m.ckpt", "--report", tmp_path / "c", "--criterion", "cost")
    kv = dict(l.split("=", 1) for l in (tmp_path / "c.kv").read_text().splitlines())
    params, _, _ = training.load_checkpoint(workspace / "m.ckpt")
    m = read_manifest(workspace / "data")
    val = score_entries(params, m, m.split("val"))
    assert float(kv["tau"]) == select_threshold(val, "cost")
    test = score_entries(params, m, m.split("test"))
    assert int(kv["fp"]) == confusion_metrics(test, float(kv["tau"])).fp


def test_eval_naive_baseline_dispatch(workspace, tmp_path, capsys):
    base = ["eval", "--manifest", workspace / "data", "--checkpoint", workspace / "m.ckpt", "--report"]
    _, out, _ = run(capsys, *base, tmp_path / "n", "--baseline", "naive")
    assert out.startswith("naive")
    run(capsys, *base, tmp_path / "t")
    assert (tmp_path / "n.kv").read_text() != (tmp_path / "t.kv").read_text()


def test_eval_recognition_baseline(workspace, tmp_path, capsys):
    m = read_manifest(workspace / "data")
    lines = sorted({f"{e.path}\t{e.text}" for e in m.entries if e.label == 1})
    (tmp_path / "tr.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    code, _, _ = run(capsys, "eval", "--manifest", workspace / "data", "--report", tmp_path / "rec", "--baseline", "recognition", "--transcripts", tmp_path / "tr.tsv")
    assert code == 0
    kv = dict(l.split("=", 1) for l in (tmp_path / "rec.kv").read_text().splitlines())
    assert float(kv["f1"]) == 1.0


def test_eval_alphabet_mismatch_is_configuration_error(workspace, tmp_path, capsys):
    run(capsys, "gen", "--profile", "date", "--pairs", 10, "--out", tmp_path / "d")
    ckpt = tmp_path / "iam.ckpt"
    from conftest import toy_config
    from textmatch.matcher import init_params

    training.save_checkpoint(init_params(toy_config(alphabet="abc*"), 0), [], ckpt)
    code, _, err = run(capsys, "eval", "--manifest", tmp_path / "d", "--checkpoint", ckpt, "--report", tmp_path / "r")
    assert code == 2 and "alphabet" in err
