"""Permutation testing of auxiliary labels, t-tests, KDE curves, naive baselines, MTL reports."""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .data import ClipDataset
from .objectives import TaskScores, harmonic_mean_score, mae, uar
from .training import RunConfig, train

MODES = ("true", "shuffled", "incorrect")

# (model, MTL?, meanCCC, UAR, MAE, printed harmonic mean)
TABLE1 = (
    ("Baseline", True, 0.416, 0.506, 4.422, 0.349),
    ("ResNet50", True, 0.569, 0.513, 4.093, 0.385),
    ("ResNet50", False, 0.620, 0.540, 3.818, 0.412),
    ("ResNet34", True, 0.587, 0.483, 4.140, 0.379),
    ("ResNet34", False, 0.645, 0.528, 3.799, 0.414),
    ("ResNet18", True, 0.583, 0.495, 4.220, 0.377),
    ("ResNet18", False, 0.642, 0.539, 3.806, 0.416),
    ("Conformer", True, 0.647, 0.572, 3.780, 0.424),
    ("Conformer", False, 0.648, 0.596, 3.722, 0.432),
    ("Conformer + FC (128)", True, 0.647, 0.586, 3.874, 0.421),
    ("Conformer + LSTM", True, 0.601, 0.536, 4.121, 0.392),
    ("Conformer + NetVLAD", True, 0.640, 0.594, 3.910, 0.419),
    ("Conformer + AutoPool", True, 0.652, 0.587, 3.954, 0.417),
)
# Naive row: majority-class UAR and median-age MAE, no emotion score
TABLE1_NAIVE = ("Naive", None, None, 0.250, 3.778, None)


# ---------------------------------------------------------------------------
# label perturbations


def shuffle_aux_labels(country, age, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Permute country with ``seed`` and age independently with ``seed + 1``."""
    country = np.asarray(country)
    age = np.asarray(age)
    return (
        country[np.random.default_rng(seed).permutation(len(country))],
        age[np.random.default_rng(seed + 1).permutation(len(age))],
    )


def incorrect_assignment(country, age, n_countries: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Relabel every sample with a different country and a different observed age."""
    country = np.asarray(country, dtype=int)
    age = np.asarray(age, dtype=float)
    if n_countries < 2:
        raise ValueError("incorrect assignment needs at least two countries")
    distinct = np.unique(age)
    if len(distinct) < 2:
        raise ValueError("incorrect assignment needs at least two distinct age values")
    rng = np.random.default_rng(seed)
    new_country = (country + rng.integers(1, n_countries, size=len(country))) % n_countries
    own = np.searchsorted(distinct, age)
    pick = rng.integers(0, len(distinct) - 1, size=len(age))
    new_age = distinct[pick + (pick >= own)]
    return new_country, new_age


def fixed_point_fraction(before, after) -> float:
    return float(np.mean(np.asarray(before) == np.asarray(after)))


# ---------------------------------------------------------------------------
# permutation experiment


@dataclass
class PermutationPlan:
    mode: str = "true"
    n_trials: int = 50
    base_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")

    def trial_seed(self, trial: int) -> int:
        return self.base_seed + trial


@dataclass
class TrialDistribution:
    mode: str
    scores: list[float]
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def _label_digest(ds: ClipDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.emotions, ds.country, ds.age):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def permuted_train_set(train_ds: ClipDataset, mode: str, seed: int) -> ClipDataset:
    """Training view whose auxiliary inputs follow ``mode``; targets are untouched."""
    if mode == "true":
        return train_ds.with_aux(train_ds.country, train_ds.age)
    if mode == "shuffled":
        c, a = shuffle_aux_labels(train_ds.country, train_ds.age, seed)
    else:
        c, a = incorrect_assignment(train_ds.country, train_ds.age, train_ds.n_countries, seed)
    return train_ds.with_aux(c, a)


def run_trial(mode: str, seed: int, train_ds: ClipDataset, val_ds: ClipDataset, run: RunConfig) -> float:
    trial_run = replace(run, seed=seed, tasks=("emotion",), aux_inputs=True, family="embedding", checkpoint="")
    view = permuted_train_set(train_ds, mode, seed)
    result = train(trial_run, view, val_ds.with_aux(val_ds.country, val_ds.age))
    return float(result.best_scores.mean_ccc)


def _run_trial_safe(args):
    trial, mode, seed, train_ds, val_ds, run = args
    try:
        return run_trial(mode, seed, train_ds, val_ds, run)
    except ValueError as exc:
        raise ValueError(f"permutation trial {trial} (seed {seed}) failed: {exc}") from exc
    except Exception as exc:
        raise RuntimeError(f"permutation trial {trial} (seed {seed}) failed: {exc}") from exc


def permutation_experiment(
    plan: PermutationPlan,
    train_ds: ClipDataset,
    val_ds: ClipDataset,
    run: RunConfig | None = None,
    jobs: int = 1,
) -> TrialDistribution:
    """Train ``plan.n_trials`` emotion models on [embedding | country one-hot | age] inputs.

    Validation always sees the true auxiliary labels. Trials share nothing and
    results are ordered by trial index.
    """
    if train_ds.kind != "embedding":
        raise ValueError("permutation experiments run on embedding features")
    run = run or RunConfig(head="mean")
    if run.head != "mean":
        raise ValueError("permutation experiments use the mean-aggregation head")
    digest = (_label_digest(train_ds), _label_digest(val_ds))
    seeds = [plan.trial_seed(i) for i in range(plan.n_trials)]
    work = [(i, plan.mode, s, train_ds, val_ds, run) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(_run_trial_safe, work))
    else:
        scores = [_run_trial_safe(w) for w in work]
    if (_label_digest(train_ds), _label_digest(val_ds)) != digest:
        raise RuntimeError("permutation experiment mutated dataset labels")
    return TrialDistribution(plan.mode, scores, seeds)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class TTestResult:
    t: float
    p: float
    df: float


def two_sample_t_test(a, b) -> TTestResult:
    """Welch's unequal-variance t-test, two-sided."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return TTestResult(0.0, 1.0, float(len(a) + len(b) - 2))
        return TTestResult(math.copysign(math.inf, diff), 0.0, float(len(a) + len(b) - 2))
    t = diff / math.sqrt(se2)
    # Welch-Satterthwaite, written in variance shares so tiny variances do not underflow
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra**2 / (len(a) - 1) + rb**2 / (len(b) - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return TTestResult(float(t), float(min(p, 1.0)), float(df))


def scott_bandwidth(scores) -> float:
    x = np.asarray(scores, dtype=np.float64)
    return float(x.std(ddof=1) * len(x) ** (-1.0 / 5.0))


def kde_curve(scores, n_points: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Scott's bandwidth on a grid over [min - 3h, max + 3h]."""
    x = np.asarray(scores, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("KDE needs at least two scores")
    h = scott_bandwidth(x)
    if h == 0:
        raise ValueError("scores have zero variance; plot a Dirac marker at the common value instead")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_points)
    z = (grid[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * math.sqrt(2 * math.pi))
    return grid, density


# ---------------------------------------------------------------------------
# baselines and reports


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("median of an empty set")
    return float(v[(len(v) - 1) // 2])


def majority_class(labels, n_classes: int) -> int:
    return int(np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).argmax())


def naive_baselines(train_ds: ClipDataset, val_ds: ClipDataset) -> TaskScores:
    """Majority-class country and median-age predictions; no emotion score."""
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("naive baselines need non-empty train and validation splits")
    c = majority_class(train_ds.country, train_ds.n_countries)
    age = lower_median(train_ds.age)
    return TaskScores(
        None,
        uar(np.full(len(val_ds), c), val_ds.country, val_ds.n_countries),
        mae(np.full(len(val_ds), age), val_ds.age),
    )


REPORT_FIELDS = (
    "model", "mtl", "mean_ccc", "uar", "mae", "harmonic_mean",
    "printed_harmonic_mean", "delta_mean_ccc", "delta_uar", "delta_mae", "delta_harmonic_mean",
)


def mtl_comparison_report(results: Sequence[dict]) -> list[dict]:
    """Table-1-shaped rows; deltas are single-task minus MTL for the same model."""
    by_key = {}
    for r in results:
        by_key[(r["model"], bool(r["mtl"]))] = r
    rows = []
    for (model, mtl) in sorted(by_key, key=lambda k: (k[0], not k[1])):
        r = by_key[(model, mtl)]
        hm = harmonic_mean_score(r["mean_ccc"], r["uar"], r["mae"])
        row = {
            "model": model,
            "mtl": "YES" if mtl else "NO",
            "mean_ccc": r["mean_ccc"],
            "uar": r["uar"],
            "mae": r["mae"],
            "harmonic_mean": hm,
            "printed_harmonic_mean": r.get("harmonic_mean_printed"),
        }
        single = by_key.get((model, False))
        multi = by_key.get((model, True))
        if single is not None and multi is not None:
            for key in ("mean_ccc", "uar", "mae"):
                row[f"delta_{key}"] = single[key] - multi[key]
            hs = harmonic_mean_score(single["mean_ccc"], single["uar"], single["mae"])
            hmt = harmonic_mean_score(multi["mean_ccc"], multi["uar"], multi["mae"])
            row["delta_harmonic_mean"] = None if hs is None or hmt is None else hs - hmt
        rows.append(row)
    return rows


def table1_results() -> list[dict]:
    return [
        {"model": m, "mtl": mtl, "mean_ccc": c, "uar": u, "mae": a, "harmonic_mean_printed": h}
        for m, mtl, c, u, a, h in TABLE1
    ]


# ---------------------------------------------------------------------------
# CSV emitters


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_fmt(r.get(f)) for f in fields])


def write_trials_csv(path, dists: Sequence[TrialDistribution]) -> None:
    rows = [
        {"mode": d.mode, "trial": i, "seed": s, "mean_ccc": score}
        for d in dists
        for i, (s, score) in enumerate(zip(d.seeds, d.scores))
    ]
    _write(path, ("mode", "trial", "seed", "mean_ccc"), rows)


def read_trials_csv(path) -> list[TrialDistribution]:
    dists: dict[str, TrialDistribution] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = dists.setdefault(row["mode"], TrialDistribution(row["mode"], [], []))
            d.scores.append(float(row["mean_ccc"]))
            d.seeds.append(int(row["seed"]))
    return list(dists.values())


def write_ttest_csv(path, results: dict[str, TTestResult]) -> None:
    rows = [{"pair": k, "t": r.t, "df": r.df, "p": r.p} for k, r in results.items()]
    _write(path, ("pair", "t", "df", "p"), rows)


def write_kde_csv(path, dists: Sequence[TrialDistribution], n_points: int = 200) -> None:
    rows = []
    for d in dists:
        x, dens = kde_curve(d.scores, n_points)
        rows.extend({"mode": d.mode, "x": xi, "density": yi} for xi, yi in zip(x, dens))
    _write(path, ("mode", "x", "density"), rows)


def write_report_csv(path, rows: Sequence[dict]) -> None:
    _write(path, REPORT_FIELDS, rows)
