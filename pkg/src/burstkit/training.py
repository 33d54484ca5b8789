"""Adam, the minibatch training loop, run configs and the submission ensemble."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .models import ModelConfig, MultitaskModel, save_model, load_model
from .objectives import (
    Predictions,
    TaskScores,
    TaskWeights,
    evaluate,
    loss_multitask,
    predict,
    score_predictions,
    task_losses,
)

log = logging.getLogger(__name__)

NAIVE_AGE = 26.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-4
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the CCC loss")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[T.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, cfg: OptimizerConfig, names=None) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    names = names or [f"param[{i}]" for i in range(len(params))]
    for name, g in zip(names, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything that determines a training run. Serialised as ``key = value`` lines."""

    family: str = "embedding"
    head: str = "mean"
    depth: str = "mini"
    tasks: tuple[str, ...] = ("emotion", "country", "age")
    weight_emotion: float = 5.0
    weight_country: float = 0.05
    weight_age: float = 0.05
    learning_rate: float = 3e-4
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 128
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    dropout_rate: float = 0.5
    aux_inputs: bool = False
    checkpoint: str = ""

    def __post_init__(self):
        if isinstance(self.tasks, str):
            self.tasks = tuple(t.strip() for t in self.tasks.split(",") if t.strip())
        self.tasks = tuple(self.tasks)
        self.depth = str(self.depth)
        TaskWeights(self.weight_emotion, self.weight_country, self.weight_age)
        OptimizerConfig(self.learning_rate, self.epsilon, self.beta1, self.beta2, self.batch_size)
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")

    @property
    def single_task(self) -> bool:
        return len(self.tasks) == 1

    @property
    def weights(self) -> TaskWeights:
        return TaskWeights(self.weight_emotion, self.weight_country, self.weight_age)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.epsilon, self.beta1, self.beta2, self.batch_size)

    def model_config(self, n_emotions: int, n_countries: int, emb_dim: int) -> ModelConfig:
        return ModelConfig(
            family=self.family,
            tasks=self.tasks,
            n_emotions=n_emotions,
            n_countries=n_countries,
            head=self.head,
            emb_dim=emb_dim,
            depth=self.depth,
            dropout_rate=self.dropout_rate,
            aux_inputs=self.aux_inputs,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            values[key] = _coerce(types[key], value, key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(type_name: str, value: str, key: str):
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        if type_name == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {type_name}") from None
    return value


# ---------------------------------------------------------------------------
# training loop


METRIC_FIELDS = (
    "step", "split", "mean_ccc", "uar", "mae", "harmonic_mean",
    "loss", "loss_emotion", "loss_country", "loss_age",
)


@dataclass
class TrainResult:
    model: MultitaskModel
    best_step: int
    best_scores: TaskScores
    log_rows: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        write_log(path, self.log_rows)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in METRIC_FIELDS})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def selection_score(scores: TaskScores, tasks: Sequence[str]) -> float:
    """Higher is better: harmonic mean for MTL, the task metric for single-task runs."""
    if len(tasks) == 1:
        task = tasks[0]
        if task == "emotion":
            return scores.mean_ccc
        if task == "country":
            return scores.uar
        return -scores.mae
    if scores.harmonic_mean is not None:
        return scores.harmonic_mean
    # harmonic mean undefined (e.g. non-positive CCC early on): fall back to a sum of task metrics
    total = 0.0
    if scores.mean_ccc is not None:
        total += scores.mean_ccc
    if scores.uar is not None:
        total += scores.uar
    if scores.mae is not None:
        total -= scores.mae
    return total - 10.0


def train(
    run: RunConfig,
    train_data,
    val_data,
    model: MultitaskModel | None = None,
    stop_at: float | None = None,
) -> TrainResult:
    """Minibatch Adam training with periodic validation and best-checkpoint retention.

    Data order, dropout masks and initialisation all derive from ``run.seed``.
    ``stop_at`` ends training early once the selection metric reaches it.
    """
    if len(train_data) < 2:
        raise ValueError("training split needs at least two clips")
    if run.batch_size > len(train_data):
        raise ValueError(f"batch_size {run.batch_size} exceeds training split size {len(train_data)}")
    if len(val_data) == 0:
        raise ValueError("validation split is empty")
    emb_dim = train_data.features[0].shape[1]
    if model is None:
        model = MultitaskModel(run.model_config(train_data.n_emotions, train_data.n_countries, emb_dim), run.seed)
        model.data_init(train_data, np.random.default_rng([run.seed, 2]))
    model.set_seed(run.seed)
    params = list(model.named_parameters())
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    state = AdamState.zeros(tensors)
    opt = run.optimizer
    weights = run.weights
    order_rng = np.random.default_rng([run.seed, 3])
    with_aux = run.aux_inputs

    rows: list[dict] = []

    def validate(step: int, losses: dict | None):
        scores = evaluate(model, val_data)
        row = {"step": step, "split": "val", "mean_ccc": scores.mean_ccc, "uar": scores.uar,
               "mae": scores.mae, "harmonic_mean": scores.harmonic_mean}
        if losses:
            row.update(losses)
        rows.append(row)
        return scores

    best_scores = validate(0, None)
    best_state = model.state_dict()
    best_step = 0
    best_value = selection_score(best_scores, run.tasks)

    step = 0
    model.train()
    n = len(train_data)
    running: dict[str, list[float]] = {}
    while step < run.max_steps:
        perm = order_rng.permutation(n)
        for start in range(0, n, run.batch_size):
            idx = perm[start : start + run.batch_size]
            if len(idx) < 2:
                break
            batch = train_data.batch(idx, dtype=T.get_default_dtype(), with_aux=with_aux)
            outputs = model(batch)
            comps = task_losses(outputs, batch)
            loss = loss_multitask(comps, weights, run.tasks)
            if not math.isfinite(float(loss.data)):
                _save_best(run, model, best_state)
                raise TrainingDiverged(f"loss became non-finite at step {step + 1}")
            model.zero_grad()
            loss.backward()
            try:
                adam_step(tensors, [p.grad for p in tensors], state, opt, names)
            except TrainingDiverged:
                _save_best(run, model, best_state)
                raise
            step += 1
            running.setdefault("loss", []).append(float(loss.data))
            for k, v in comps.items():
                running.setdefault(f"loss_{k}", []).append(float(v.data))
            if step % run.eval_every == 0 or step == run.max_steps:
                means = {k: float(np.mean(v)) for k, v in running.items()}
                running = {}
                scores = validate(step, means)
                model.train()
                value = selection_score(scores, run.tasks)
                if value > best_value:
                    best_value, best_scores, best_step = value, scores, step
                    best_state = model.state_dict()
                if stop_at is not None and best_value >= stop_at:
                    step = run.max_steps
            if step >= run.max_steps:
                break

    model.load_state_dict(best_state)
    model.eval()
    _save_best(run, model, best_state)
    return TrainResult(model, best_step, best_scores, rows)


def _save_best(run: RunConfig, model: MultitaskModel, state: dict) -> None:
    if not run.checkpoint:
        return
    current = model.state_dict()
    model.load_state_dict(state)
    save_model(model, run.checkpoint)
    model.load_state_dict(current)


# ---------------------------------------------------------------------------
# ensemble


def ensemble_predict(emotion_model, country_model, dataset, const_age: float = NAIVE_AGE) -> Predictions:
    """Emotion from one single-task model, country from another, age fixed."""
    if isinstance(emotion_model, (str, Path)):
        emotion_model = load_model(emotion_model)
    if isinstance(country_model, (str, Path)):
        country_model = load_model(country_model)
    for model, task in ((emotion_model, "emotion"), (country_model, "country")):
        if task not in model.tasks:
            raise ValueError(f"{task} checkpoint has heads {list(model.tasks)}, expected {task!r}")
    emo = predict(emotion_model, dataset)
    cty = predict(country_model, dataset)
    return Predictions(list(dataset.clip_ids), emo.emotion, cty.country_probs, np.full(len(dataset), float(const_age)))


def write_predictions(path, pred: Predictions, countries: Sequence[str]) -> None:
    k = 0 if pred.emotion is None else pred.emotion.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "country", "age", *(f"emo_{i + 1}" for i in range(k))])
        for i, cid in enumerate(pred.clip_ids):
            country = "" if pred.country_probs is None else countries[int(pred.country[i])]
            age = "" if pred.age is None else repr(float(pred.age[i]))
            emo = [] if pred.emotion is None else [repr(float(v)) for v in pred.emotion[i]]
            writer.writerow([cid, country, age, *emo])
