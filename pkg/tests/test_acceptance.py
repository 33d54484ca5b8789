"""End-to-end acceptance checks, one test per criterion.

Each test records PASS/FAIL in ``RESULTS``; ``conftest.py`` prints the table
at the end of the session.
"""

import csv
import math
import time
import zlib

import numpy as np
import pytest

from burstkit import analysis as A
from burstkit import cli, data, dsp, models, objectives
from burstkit import tensor as T
from burstkit.data import Batch, ClipDataset
from burstkit.dsp import SpectrogramConfig, Waveform
from burstkit.gradcheck import check_gradients
from burstkit.objectives import harmonic_mean_score
from burstkit.tensor import Tensor
from burstkit.training import RunConfig, train

from test_tensor import PRIMITIVES

RESULTS: dict[int, tuple[bool, str]] = {}


class Criterion:
    def __init__(self, number: int):
        self.number = number
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        took = time.perf_counter() - self.t0
        msg = f"{self.detail} ({took:.1f}s)".strip()
        if exc_type is not None:
            msg = f"{exc_type.__name__}: {exc} ({took:.1f}s)"
        RESULTS[self.number] = (exc_type is None, msg)
        return False


# ---------------------------------------------------------------------------

def test_criterion_01_table1_harmonic_means():
    with Criterion(1) as c:
        worst = 0.0
        for model, mtl, ccc, u, mae, printed in A.TABLE1:
            worst = max(worst, abs(harmonic_mean_score(ccc, u, mae) - printed))
        assert len(A.TABLE1) == 13
        assert worst <= 0.010, worst
        c.detail = f"13 rows, worst |diff| {worst:.4f}"


# ---------------------------------------------------------------------------

def _head_case(head, rng):
    model = models.MultitaskModel(models.ModelConfig(tasks=("emotion",), n_emotions=2, emb_dim=3, head=head), seed=int(rng.integers(1 << 30)))
    if head == "lstm128":
        model.trunk.lstm = models.LSTM(3, 4, rng)
        model.trunk.out_dim = 4
        model.heads = {"emotion": models.Dense(4, 2, rng)}
    if head == "autopool":
        model.trunk.autopool.alpha.data[...] = rng.uniform(-2, 2, 3)
    n, t = 4, 3
    mask = np.ones((n, t))
    mask[1, 2:] = 0
    batch = Batch(rng.standard_normal((n, t, 3)), mask, rng.uniform(size=(n, 2)), rng.integers(0, 4, n), rng.uniform(20, 30, n))
    return (lambda: objectives.task_losses(model(batch), batch)["emotion"]), model.parameters()


def _resnet_case(rng):
    model = models.MultitaskModel(models.ModelConfig(family="resnet", tasks=("emotion",), n_emotions=2, dropout_rate=0.0), seed=int(rng.integers(1 << 30)))
    batch = Batch(rng.standard_normal((3, 1, 8, 8)), None, rng.uniform(size=(3, 2)), np.zeros(3, int), np.zeros(3))
    return (lambda: objectives.task_losses(model(batch), batch)["emotion"]), model.parameters()


def test_criterion_02_gradients():
    with Criterion(2) as c, T.precision(np.float64):
        instances = 20
        worst = 0.0
        for name in sorted(PRIMITIVES):
            rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
            for _ in range(instances):
                res = check_gradients(*PRIMITIVES[name](rng), step=1e-5, rtol=1e-3)
                assert res.passed, f"{name}: {res}"
                worst = max(worst, res.max_abs_error)
        rng = np.random.default_rng(11)
        for head in ("netvlad5", "autopool", "lstm128"):
            for _ in range(instances):
                loss, params = _head_case(head, rng)
                res = check_gradients(loss, params, step=1e-5, rtol=1e-3, max_entries=12, rng=rng)
                assert res.passed, f"{head}: {res}"
                worst = max(worst, res.max_abs_error)
        for _ in range(instances):
            loss, params = _resnet_case(rng)
            res = check_gradients(loss, params, step=1e-5, rtol=1e-3, max_entries=6, rng=rng)
            assert res.passed, f"mini resnet: {res}"
            worst = max(worst, res.max_abs_error)
        c.detail = f"{len(PRIMITIVES)} primitives + 4 models x {instances} instances, worst abs diff {worst:.1e}"


# ---------------------------------------------------------------------------

def _netvlad_oracle(e, centers, w, b):
    k, d = centers.shape
    v = np.zeros((k, d))
    for x in e:
        logits = np.array([w[j] @ x + b[j] for j in range(k)])
        a = np.exp(logits - logits.max())
        a /= a.sum()
        for j in range(k):
            v[j] += a[j] * (x - centers[j])
    for j in range(k):
        v[j] /= max(math.sqrt((v[j] ** 2).sum()), 1e-12)
    flat = v.reshape(-1)
    return flat / max(math.sqrt((flat**2).sum()), 1e-12)


def test_criterion_03_pooling_identities():
    with Criterion(3) as c, T.precision(np.float64):
        rng = np.random.default_rng(3)
        for _ in range(50):
            e = rng.standard_normal((3, int(rng.integers(1, 9)), 5))
            out = models.autopool_forward(Tensor(e), Tensor(np.zeros(5))).data
            assert np.max(np.abs(out - e.mean(axis=1))) <= 1e-12
        for _ in range(50):
            t = int(rng.integers(2, 9))
            base = rng.permutation(t).astype(float)  # distinct integers: gap >= 1
            e = np.stack([rng.permutation(base) for _ in range(4)], axis=1)[None]
            out = models.autopool_forward(Tensor(e), Tensor(np.full(4, 50.0))).data
            assert np.max(np.abs(out - e.max(axis=1))) <= 1e-3
        worst = 0.0
        for _ in range(200):
            t, d, k = (int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 4)))
            e = rng.standard_normal((t, d))
            centers, w, b = rng.standard_normal((k, d)), rng.standard_normal((k, d)), rng.standard_normal(k)
            got = models.netvlad_forward(Tensor(e[None]), Tensor(centers), Tensor(w), Tensor(b)).data[0]
            worst = max(worst, float(np.max(np.abs(got - _netvlad_oracle(e, centers, w, b)))))
        assert worst <= 1e-6, worst
        c.detail = f"NetVLAD worst |diff| {worst:.1e}"


# ---------------------------------------------------------------------------

def test_criterion_04_dsp_contract():
    with Criterion(4) as c:
        cfg = SpectrogramConfig()
        rng = np.random.default_rng(4)
        spec = dsp.log_mel(Waveform(rng.uniform(-1, 1, 32000), 16000), cfg)
        assert spec.values.shape == (81, 128)
        silent = dsp.log_mel(Waveform(np.zeros(32000), 16000), cfg)
        assert np.all(silent.values == math.log(1e-6))
        t = np.arange(32000) / 16000
        tone = dsp.log_mel(Waveform(np.sin(2 * np.pi * 1000 * t), 16000), cfg)
        expected = int(np.argmin(np.abs(dsp.mel_center_frequencies(cfg) - 1000)))
        assert np.all(tone.values.argmax(axis=1) == expected)
        c.detail = f"81x128, silence {math.log(1e-6):.4f}, 1 kHz -> bin {expected}"


# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_audio_learning():
    with Criterion(5) as c:
        corpus = data.synth_dataset(data.preset("audio"), seed=0)
        tr, va = corpus.dataset("train", "spectrogram"), corpus.dataset("val", "spectrogram")
        base = dict(family="resnet", depth="mini", batch_size=32, learning_rate=1e-3, dropout_rate=0.0, eval_every=20, max_steps=2000)
        emo = train(RunConfig(tasks=("emotion",), **base), tr, va, stop_at=0.7)
        cty = train(RunConfig(tasks=("country",), **base), tr, va, stop_at=0.9)
        ccc, u = emo.best_scores.mean_ccc, cty.best_scores.uar
        c.detail = f"meanCCC {ccc:.3f} @ step {emo.best_step}, UAR {u:.3f} @ step {cty.best_step}"
        assert ccc >= 0.7 and emo.best_step <= 2000
        assert u >= 0.9 and cty.best_step <= 2000


# ---------------------------------------------------------------------------

def test_criterion_06_embedding_heads():
    with Criterion(6) as c:
        corpus = data.synth_dataset(data.preset("clean", n_train=256, n_val=128, n_emotions=4), seed=1)
        tr, va = corpus.dataset("train"), corpus.dataset("val")
        res = train(RunConfig(tasks=("emotion",), max_steps=600, eval_every=100, batch_size=64, learning_rate=3e-3), tr, va)
        assert res.best_scores.mean_ccc >= 0.95
        for head in models.HEAD_KINDS:
            r = train(RunConfig(head=head, max_steps=30, eval_every=10, batch_size=32, learning_rate=1e-3), tr, va)
            assert all(np.isfinite(row["loss"]) for row in r.log_rows[1:]), head
        c.detail = f"mean head meanCCC {res.best_scores.mean_ccc:.3f}; {len(models.HEAD_KINDS)} heads finite"


# ---------------------------------------------------------------------------

PERM_RUN = RunConfig(head="mean", max_steps=300, eval_every=50, batch_size=128, learning_rate=3e-3)


def _perm_pvalues(preset_name, other_mode, reps=10, trials=10):
    out = []
    for rep in range(reps):
        corpus = data.synth_dataset(data.preset(preset_name), seed=100 + rep)
        tr, va = corpus.dataset("train"), corpus.dataset("val")
        dists = {m: A.permutation_experiment(A.PermutationPlan(m, trials, 1000 * rep), tr, va, PERM_RUN) for m in ("true", other_mode)}
        out.append(A.two_sample_t_test(dists["true"].scores, dists[other_mode].scores).p)
    return out


@pytest.mark.slow
def test_criterion_07_permutation_protocol():
    with Criterion(7) as c:
        null_p = _perm_pvalues("null", "shuffled")
        info_p = _perm_pvalues("informative", "incorrect")
        n_null = sum(p > 0.05 for p in null_p)
        n_info = sum(p < 0.01 for p in info_p)
        c.detail = f"null p>0.05 in {n_null}/10, informative p<0.01 in {n_info}/10"
        assert n_null >= 8 and n_info >= 9


# ---------------------------------------------------------------------------

def test_criterion_08_shuffle_statistics():
    with Criterion(8) as c:
        rng = np.random.default_rng(8)
        worst = 0.0
        for p in ([0.25] * 4, [0.45, 0.2, 0.2, 0.15], [0.7, 0.1, 0.1, 0.1]):
            country = rng.choice(4, size=2000, p=p)
            age = rng.integers(18, 60, size=2000).astype(float)
            emp = np.bincount(country, minlength=4) / len(country)
            fracs = [A.fixed_point_fraction(country, A.shuffle_aux_labels(country, age, s)[0]) for s in range(300)]
            worst = max(worst, abs(float(np.mean(fracs)) - float((emp**2).sum())))
            for s in range(300):
                cc, aa = A.incorrect_assignment(country, age, 4, s)
                assert A.fixed_point_fraction(country, cc) == 0.0
                assert np.all(aa != age)
        assert worst <= 0.02, worst
        c.detail = f"worst |MC - sum p^2| {worst:.4f}; incorrect fixed points 0"


# ---------------------------------------------------------------------------

def test_criterion_09_naive_baselines():
    with Criterion(9) as c:
        rng = np.random.default_rng(9)
        for seed in range(20):
            corpus = data.synth_dataset(data.preset("null", n_train=int(rng.integers(20, 200)), n_val=int(rng.integers(20, 100))), seed=seed)
            tr, va = corpus.dataset("train"), corpus.dataset("val")
            s = A.naive_baselines(tr, va)
            ages = sorted(tr.age)
            median = ages[(len(ages) - 1) // 2]
            assert s.mae == sum(abs(median - a) for a in va.age) / len(va)
            counts = np.bincount(tr.country, minlength=4)
            majority = int(np.argmax(counts))
            present = sorted(set(va.country.tolist()))
            recalls = [1.0 if k == majority else 0.0 for k in present]
            assert s.uar == sum(recalls) / len(present)
        balanced = ClipDataset("embedding", [np.zeros((1, 2))] * 12, np.zeros((12, 2)), np.tile(np.arange(4), 3), np.full(12, 26.0))
        s = A.naive_baselines(balanced, balanced)
        assert s.uar == 0.250
        c.detail = "20 synthetic splits exact; balanced UAR 0.250"


# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path, monkeypatch):
    with Criterion(10) as c:
        monkeypatch.setenv("BURSTKIT_THREADS", "1")
        d = tmp_path / "d"
        assert cli.main(["synth", "--preset", "informative", "--n-train", "128", "--n-val", "64", "--seed", "5", "--out", str(d)]) == 0
        cfg = tmp_path / "r.cfg"
        cfg.write_text("head = fc128\nmax_steps = 40\neval_every = 10\nbatch_size = 32\n")
        perm_cfg = tmp_path / "p.cfg"
        perm_cfg.write_text("max_steps = 20\neval_every = 10\nbatch_size = 32\n")
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["train", "--manifest", str(d / "manifest.csv"), "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
            assert cli.main(["evaluate", "--manifest", str(d / "manifest.csv"), "--model", str(out / "model.bkpt"), "--out", str(out / "ev")]) == 0
            assert cli.main(["permtest", "--manifest", str(d / "manifest.csv"), "--mode", "shuffled", "--trials", "2", "--config", str(perm_cfg), "--out", str(out / "pt")]) == 0
            outputs.append(out)
        files = ("metrics.csv", "train_log.csv", "ev/metrics.csv", "pt/trials_shuffled.csv")
        for f in files:
            assert (outputs[0] / f).read_bytes() == (outputs[1] / f).read_bytes(), f
        with open(outputs[0] / "metrics.csv", newline="") as fh:
            assert list(csv.DictReader(fh))
        c.detail = "train, evaluate and permtest CSVs byte-identical"
