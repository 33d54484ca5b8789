"""Task losses, task weighting and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAE_FLOOR = 1e-6
CCC_DENOM_FLOOR = 1e-12
PROB_FLOOR = 1e-12


@dataclass
class TaskWeights:
    emotion: float = 5.0
    country: float = 0.05
    age: float = 0.05

    def __post_init__(self):
        vals = (self.emotion, self.country, self.age)
        if any(w < 0 for w in vals):
            raise ValueError("task weights must be non-negative")
        if not any(w > 0 for w in vals):
            raise ValueError("at least one task weight must be positive")

    def get(self, task: str) -> float:
        return getattr(self, task)


@dataclass
class TaskScores:
    mean_ccc: float | None
    uar: float | None
    mae: float | None
    harmonic_mean: float | None = field(init=False)
    per_emotion_ccc: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.harmonic_mean = harmonic_mean_score(self.mean_ccc, self.uar, self.mae)


# ---------------------------------------------------------------------------
# metrics (numpy)


def ccc(pred, target) -> float:
    """Lin's concordance correlation coefficient with population moments."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"ccc: shapes {p.shape} and {t.shape} differ")
    if p.size < 2:
        raise ValueError("ccc needs at least two values")
    mp, mt = p.mean(), t.mean()
    cov = ((p - mp) * (t - mt)).mean()
    denom = p.var() + t.var() + (mp - mt) ** 2
    if denom < CCC_DENOM_FLOOR:
        return 0.0
    return float(2.0 * cov / denom)


def per_dim_ccc(pred, target) -> list[float]:
    p, t = np.asarray(pred), np.asarray(target)
    if p.shape != t.shape or p.ndim != 2:
        raise ValueError(f"mean_ccc: expected matching n x K arrays, got {p.shape} and {t.shape}")
    return [ccc(p[:, k], t[:, k]) for k in range(p.shape[1])]


def mean_ccc(pred, target) -> float:
    return float(np.mean(per_dim_ccc(pred, target)))


def uar(pred_labels, true_labels, n_classes: int) -> float:
    """Mean per-class recall over classes present in ``true_labels``."""
    pred = np.asarray(pred_labels, dtype=int)
    true = np.asarray(true_labels, dtype=int)
    if true.size == 0:
        raise ValueError("uar of an empty label set is undefined")
    if pred.shape != true.shape:
        raise ValueError(f"uar: {pred.shape} predictions for {true.shape} labels")
    if true.min() < 0 or true.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    recalls = [np.mean(pred[true == c] == c) for c in range(n_classes) if np.any(true == c)]
    return float(np.mean(recalls))


def mae(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if t.size == 0:
        raise ValueError("mae of an empty set is undefined")
    if p.shape != t.shape:
        p = np.broadcast_to(p, t.shape)
    return float(np.abs(p - t).mean())


def harmonic_mean_score(mean_ccc: float | None, uar: float | None, mae: float | None) -> float | None:
    """3 / (1/meanCCC + 1/UAR + MAE); ``None`` when any input is missing or non-positive."""
    if mean_ccc is None or uar is None or mae is None:
        return None
    if mean_ccc <= 0 or uar <= 0 or math.isnan(mean_ccc) or math.isnan(uar):
        return None
    return 3.0 / (1.0 / mean_ccc + 1.0 / uar + max(mae, MAE_FLOOR))


# ---------------------------------------------------------------------------
# differentiable losses


def loss_emotion(pred: Tensor, target) -> Tensor:
    """Negative mean CCC over the minibatch (statistics per column)."""
    if pred.shape[0] < 2:
        raise ValueError("the CCC loss needs a minibatch of at least two samples")
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise T.ShapeError(f"loss_emotion: prediction {pred.shape} vs target {t.shape}")
    mp = T.mean(pred, axis=0)
    mt = t.mean(axis=0)
    dp = pred - mp
    dt = t - mt
    cov = T.mean(dp * dt, axis=0)
    vp = T.mean(dp * dp, axis=0)
    denom = vp + (dt * dt).mean(axis=0) + (mp - mt) * (mp - mt)
    per_dim = 2.0 * cov / T.clamp_min(denom, CCC_DENOM_FLOOR)
    return -T.mean(per_dim)


def loss_age(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred - t
    return T.mean(diff * diff)


def loss_country(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    n, c = probs.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"country label out of range for {c} classes")
    picked = probs[np.arange(n), labels]
    return -T.mean(T.log(T.clamp_min(picked, PROB_FLOOR)))


def loss_multitask(components: Mapping[str, Tensor], weights, tasks=None) -> Tensor:
    """Weighted sum of per-task losses over the attached tasks.

    ``weights`` is a TaskWeights or a plain mapping; a mapping may only name
    tasks that have a loss component.
    """
    tasks = tuple(components) if tasks is None else tuple(tasks)
    for name in components:
        if name not in ("emotion", "country", "age"):
            raise ValueError(f"unknown loss component {name!r}")
        if name not in tasks:
            raise ValueError(f"loss component for {name!r} has no attached head")
    if isinstance(weights, Mapping):
        absent = [k for k in weights if k not in components]
        if absent:
            raise ValueError(f"weight given for absent task(s) {absent}")
        weights = TaskWeights(**{k: 0.0 for k in ("emotion", "country", "age") if k not in weights}, **weights)
    if not components:
        raise ValueError("no loss components given")
    total = None
    for name, loss in components.items():
        term = loss * weights.get(name)
        total = term if total is None else total + term
    return total


def task_losses(outputs: Mapping[str, Tensor], batch) -> dict[str, Tensor]:
    losses = {}
    if "emotion" in outputs:
        losses["emotion"] = loss_emotion(outputs["emotion"], batch.emotions)
    if "country" in outputs:
        losses["country"] = loss_country(outputs["country"], batch.country)
    if "age" in outputs:
        losses["age"] = loss_age(outputs["age"], batch.age)
    return losses


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    clip_ids: list[str]
    emotion: np.ndarray | None = None
    country_probs: np.ndarray | None = None
    age: np.ndarray | None = None

    @property
    def country(self) -> np.ndarray | None:
        return None if self.country_probs is None else self.country_probs.argmax(axis=1)


def predict(model, dataset, batch_size: int = 128, const_age: float | None = None) -> Predictions:
    """Run ``model`` in inference mode over the whole dataset, in order."""
    tasks = model.tasks if model is not None else ()
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    collected: dict[str, list[np.ndarray]] = {t: [] for t in tasks}
    try:
        if tasks:
            with_aux = getattr(model.cfg, "aux_inputs", False)
            for start in range(0, len(dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(dataset)))
                out = model(dataset.batch(idx, with_aux=with_aux))
                for t in tasks:
                    collected[t].append(out[t].data.astype(np.float64))
    finally:
        if model is not None:
            model.train(was_training)
    pred = Predictions(list(dataset.clip_ids))
    if "emotion" in collected:
        pred.emotion = np.concatenate(collected["emotion"])
    if "country" in collected:
        pred.country_probs = np.concatenate(collected["country"])
    if "age" in collected:
        pred.age = np.concatenate(collected["age"])
    if const_age is not None:
        pred.age = np.full(len(dataset), float(const_age))
    return pred


def score_predictions(pred: Predictions, dataset) -> TaskScores:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    per = per_dim_ccc(pred.emotion, dataset.emotions) if pred.emotion is not None else []
    return TaskScores(
        float(np.mean(per)) if per else None,
        uar(pred.country, dataset.country, dataset.n_countries) if pred.country_probs is not None else None,
        mae(pred.age, dataset.age) if pred.age is not None else None,
        per,
    )


def evaluate(model, dataset, batch_size: int = 128, const_age: float | None = None) -> TaskScores:
    """Metrics over the full split in one pass; ``const_age`` fills the age slot with a constant."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return score_predictions(predict(model, dataset, batch_size, const_age), dataset)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_row(model_id: str, split: str, scores: TaskScores) -> dict:
    row = {
        "model_id": model_id,
        "split": split,
        "mean_ccc": _fmt(scores.mean_ccc),
        "uar": _fmt(scores.uar),
        "mae": _fmt(scores.mae),
        "harmonic_mean": _fmt(scores.harmonic_mean),
    }
    row.update({f"ccc_emo_{i + 1}": _fmt(v) for i, v in enumerate(scores.per_emotion_ccc)})
    return row


def write_metrics_csv(path, rows: list[dict]) -> None:
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
