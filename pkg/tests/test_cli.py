import csv

import pytest

from burstkit import analysis, cli, data
from burstkit.objectives import harmonic_mean_score


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--preset", "informative", "--n-train", 96, "--n-val", 48, "--seed", 3, "--out", root) == 0
    cfg = root / "fast.cfg"
    cfg.write_text("max_steps = 15\neval_every = 5\nbatch_size = 32\nlearning_rate = 0.003\n")
    return root, cfg


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_smoke(tmp_path):
    d = tmp_path / "d"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_steps = 10\neval_every = 5\n")
    assert run("synth", "--preset", "null", "--out", d) == 0
    assert run("permtest", "--mode", "true", "--trials", 2, "--config", cfg, "--out", d) == 0
    assert len(_rows(d / "trials_true.csv")) == 2
    prov = (d / "provenance.txt").read_text()
    assert "command = permtest" in prov and "config_sha256 = " in prov and "seed = 0" in prov


def test_missing_split_is_a_validation_error(corpus, tmp_path, capsys):
    root, _ = corpus
    code = run("evaluate", "--manifest", root / "manifest.csv", "--model", tmp_path / "none.bkpt", "--split", "test", "--out", tmp_path)
    assert code == 1
    assert "'test'" in capsys.readouterr().err


def test_unknown_flag_exits_one_with_usage(capsys):
    assert run("train", "--bogus") == 1
    assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["synth", "featurize", "train", "evaluate", "predict", "ensemble", "permtest", "resplit", "report"])
def test_every_subcommand_has_help(cmd, capsys):
    assert run(cmd, "--help") == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out"):
        assert flag in text


def test_report_table1_from_csv(tmp_path):
    src = tmp_path / "metrics.csv"
    with open(src, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mtl", "mean_ccc", "uar", "mae", "harmonic_mean"])
        for m, mtl, c, u, a, h in analysis.TABLE1:
            w.writerow([m, "YES" if mtl else "NO", c, u, a, h])
    assert run("report", "--table1", src, "--out", tmp_path / "r") == 0
    rows = _rows(tmp_path / "r" / "report.csv")
    assert len(rows) == 13
    for r in rows:
        assert abs(float(r["harmonic_mean"]) - float(r["printed_harmonic_mean"])) <= 0.010
        assert float(r["harmonic_mean"]) == harmonic_mean_score(float(r["mean_ccc"]), float(r["uar"]), float(r["mae"]))


def test_report_rejects_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("model,mtl,uar\nx,YES,0.5\n")
    assert run("report", "--table1", bad, "--out", tmp_path) == 1


def test_train_evaluate_predict_ensemble(corpus, tmp_path):
    root, cfg = corpus
    m = root / "manifest.csv"
    for task in ("emotion", "country"):
        c = tmp_path / f"{task}.cfg"
        c.write_text(cfg.read_text() + f"tasks = {task}\n")
        assert run("train", "--manifest", m, "--config", c, "--out", tmp_path / task) == 0
        assert (tmp_path / task / "model.bkpt").exists()
        assert (tmp_path / task / "train_log.csv").exists()
    assert run("evaluate", "--manifest", m, "--model", tmp_path / "emotion" / "model.bkpt", "--const-age", 26, "--out", tmp_path / "ev") == 0
    row = _rows(tmp_path / "ev" / "metrics.csv")[0]
    assert row["split"] == "val" and row["mean_ccc"] and row["mae"]
    assert run("predict", "--manifest", m, "--model", tmp_path / "country" / "model.bkpt", "--out", tmp_path / "pr") == 0
    preds = _rows(tmp_path / "pr" / "predictions.csv")
    assert len(preds) == 48 and all(p["country"] in data.COUNTRIES for p in preds)
    assert run(
        "ensemble", "--manifest", m,
        "--emotion-model", tmp_path / "emotion" / "model.bkpt",
        "--country-model", tmp_path / "country" / "model.bkpt",
        "--out", tmp_path / "ens",
    ) == 0
    ens = _rows(tmp_path / "ens" / "predictions.csv")
    assert {p["age"] for p in ens} == {"26.0"}
    assert run(
        "ensemble", "--manifest", m,
        "--emotion-model", tmp_path / "country" / "model.bkpt",
        "--country-model", tmp_path / "country" / "model.bkpt",
        "--out", tmp_path / "bad",
    ) == 1


def test_identical_runs_are_byte_identical(corpus, tmp_path):
    root, cfg = corpus
    for name in ("a", "b"):
        assert run("train", "--manifest", root / "manifest.csv", "--config", cfg, "--seed", 7, "--out", tmp_path / name) == 0
    for f in ("metrics.csv", "train_log.csv", "model.bkpt", "provenance.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_featurize_and_spectrogram_training(tmp_path, monkeypatch):
    monkeypatch.setenv("BURSTKIT_THREADS", "2")
    d = tmp_path / "audio"
    assert run("synth", "--preset", "audio", "--n-train", 8, "--n-val", 4, "--out", d) == 0
    assert run("featurize", "--manifest", d / "manifest.csv", "--jobs", 8, "--out", d) == 0
    assert len(list((d / "features").glob("*.bkml"))) == 12
    cfg = tmp_path / "r.cfg"
    cfg.write_text("family = resnet\ntasks = country\nmax_steps = 2\nbatch_size = 4\n")
    code = run("train", "--manifest", d / "manifest.csv", "--features", d / "features", "--config", cfg, "--out", tmp_path / "m")
    assert code == 0


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("BURSTKIT_THREADS", raising=False)
    assert cli.thread_cap(None) == 1 and cli.thread_cap(6) == 6
    monkeypatch.setenv("BURSTKIT_THREADS", "2")
    assert cli.thread_cap(6) == 2 and cli.thread_cap(1) == 1
    monkeypatch.setenv("BURSTKIT_THREADS", "many")
    with pytest.raises(ValueError):
        cli.thread_cap(2)


def test_resplit(tmp_path):
    d = tmp_path / "d"
    assert run("synth", "--preset", "null", "--n-train", 20, "--n-val", 40, "--out", d) == 0
    assert run("resplit", "--manifest", d / "manifest.csv", "--speakers", 5, "--seed", 1, "--out", tmp_path / "r") == 0
    moved = data.load_manifest(tmp_path / "r" / "manifest.csv")
    assert sum(s.split == "val" for s in moved) == 30
    before = _rows(tmp_path / "r" / "split_report_before.csv")
    assert {r["split"] for r in before} == {"train", "val"}
    # media paths still resolve from the new manifest location
    ds = data.dataset_from_samples(moved[:3], "embedding", tmp_path / "r")
    assert len(ds) == 3
    assert run("resplit", "--manifest", d / "manifest.csv", "--speakers", 999, "--out", tmp_path / "x") == 1


def test_report_naive(corpus, tmp_path):
    root, _ = corpus
    assert run("report", "--naive", "--manifest", root / "manifest.csv", "--out", tmp_path) == 0
    row = _rows(tmp_path / "naive.csv")[0]
    assert row["mean_ccc"] == "" and float(row["uar"]) > 0
    assert run("report", "--out", tmp_path) == 1
