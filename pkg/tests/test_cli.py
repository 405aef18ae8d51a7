import csv
import json

import pytest

from apsnet.cli import build_parser, parse_config, run

COMMANDS = ["synth", "manifest", "entropy", "train", "eval", "ablate-prior", "gradcam", "export-features", "project"]
QUICK = "image_size=64\nepochs=1\nearly_stop_patience=1\nbatch_size=6\nbackbone=tiny\n"


def test_parse_config_defaults(tmp_path):
    (tmp_path / "empty.cfg").write_text("")
    cfg = parse_config(tmp_path / "empty.cfg", desk=True)
    assert (cfg.image_size, cfg.epochs, cfg.early_stop_patience, cfg.lr, cfg.weight_decay, cfg.batch_size) == (
        128, 200, 30, 1e-3, 5e-4, 16)
    assert cfg.backbone == "tiny"
    full = parse_config(None)
    assert full.image_size == 512 and full.backbone == "resnet50"


def test_parse_config_values(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nkappa=0.2\n\nwith_spe = false  # trailing\ncutoff_radius=none\nprior_kind=edge\n")
    cfg = parse_config(path)
    assert cfg.contrastive.kappa == 0.2 and cfg.with_spe is False and cfg.cutoff_radius is None
    assert cfg.prior_kind == "edge"


@pytest.mark.parametrize("text,match", [
    ("batch_size=0", "batch_size"),
    ("lr=fast", "'lr'"),
    ("momentum_x=0.9", "momentum_x"),
    ("with_spe=maybe", "with_spe"),
    ("epochs", "key=value"),
])
def test_parse_config_rejects(tmp_path, text, match):
    (tmp_path / "c.cfg").write_text(text + "\n")
    with pytest.raises(ValueError, match=match):
        parse_config(tmp_path / "c.cfg")


@pytest.mark.parametrize("command", COMMANDS)
def test_help_lists_flags(command, capsys):
    assert run([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["entropy", "--data", str(tmp_path), "--out", "x.csv", "--bogus"]) == 1
    (tmp_path / "bad.cfg").write_text("nonsense_key=1\n")
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r"), "--config",
                str(tmp_path / "bad.cfg")]) == 1
    err = capsys.readouterr().err
    assert "nonsense_key" in err


def test_runtime_error_exits_2(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path),
                "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("apsnet eval: error:") and "\n" not in err


def test_entropy_twice_identical(size_only_corpus, tmp_path):
    args = ["entropy", "--data", str(size_only_corpus.root), "--kinds", "all", "--n", "10", "--seed", "1"]
    assert run(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert run(args[:3] + ["--kinds", "hf,wavelet", "--out", str(tmp_path / "c.csv")]) == 1


def test_synth_and_manifest(tmp_path):
    assert run(["synth", "--out", str(tmp_path / "c"), "--preset", "long-tail", "--classes", "3",
                "--head", "8", "--tail", "3", "--image-size", "32"]) == 0
    rows = list(csv.reader(open(tmp_path / "c" / "histogram.csv")))
    assert rows[0] == ["class", "train", "test"] and len(rows) == 4
    assert run(["manifest", "--data", str(tmp_path / "c"), "--out", str(tmp_path / "m.tsv"),
                "--histogram", str(tmp_path / "h.csv")]) == 0
    assert (tmp_path / "m.tsv").exists() and (tmp_path / "h.csv").exists()


@pytest.fixture(scope="module")
def trained_run(size_only_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    (root / "quick.cfg").write_text(QUICK)
    code = run(["train", "--data", str(size_only_corpus.root), "--out", str(root / "run"),
                "--config", str(root / "quick.cfg"), "--seed", "3"])
    assert code == 0
    return root


def test_train_run_directory(trained_run):
    run_dir = trained_run / "run"
    for name in ("config.snapshot", "train_log.csv", "best.ckpt", "metrics.json", "per_class.csv"):
        assert (run_dir / name).exists(), name
    assert "rng_seed=3\n" in (run_dir / "config.snapshot").read_text()
    report = json.loads((run_dir / "metrics.json").read_text())
    assert 0 <= report["accuracy"] <= 1 and report["best_epoch"] == 1


def test_eval_export_project_gradcam(trained_run, size_only_corpus):
    ckpt = str(trained_run / "run" / "best.ckpt")
    data = str(size_only_corpus.root)
    out = trained_run / "post"
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--out", str(out / "eval")]) == 0
    first = json.loads((trained_run / "run" / "metrics.json").read_text())
    again = json.loads((out / "eval" / "metrics.json").read_text())
    assert again["accuracy"] == first["accuracy"]

    assert run(["export-features", "--checkpoint", ckpt, "--data", data, "--out", str(out / "f.csv")]) == 0
    assert run(["project", "--features", str(out / "f.csv"), "--out", str(out / "p.csv")]) == 0
    rows = list(csv.reader(open(out / "p.csv")))
    assert rows[0] == ["id", "label", "x", "y"] and len(rows) == 1 + len(size_only_corpus.ids("test"))

    assert run(["gradcam", "--checkpoint", ckpt, "--data", data, "--out", str(out / "cam"), "--n", "2"]) == 0
    assert len(list((out / "cam").glob("*_cam.png"))) == 2
    assert len(list((out / "cam").glob("*_cam.csv"))) == 2


def test_ablate_prior_subset(size_only_corpus, tmp_path):
    (tmp_path / "quick.cfg").write_text(QUICK)
    assert run(["ablate-prior", "--data", str(size_only_corpus.root), "--out", str(tmp_path / "abl"),
                "--config", str(tmp_path / "quick.cfg"), "--kinds", "edge,mask", "--entropy-n", "6"]) == 0
    rows = list(csv.reader(open(tmp_path / "abl" / "ablation.csv")))
    assert rows[0] == ["kind", "entropy_bits", "accuracy", "precision", "recall", "f1"]
    assert [r[0] for r in rows[1:]] == ["edge", "mask"]
    assert float(rows[1][1]) < float(rows[2][1])
