"""``burstkit`` command line: one binary, one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, analysis, data, dsp, models, objectives, training
from .training import RunConfig

log = logging.getLogger("burstkit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def env_thread_cap() -> int | None:
    raw = os.environ.get("BURSTKIT_THREADS", "").strip()
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"BURSTKIT_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ValueError("BURSTKIT_THREADS must be >= 1")
    return cap


def thread_cap(requested: int | None = None) -> int:
    """Worker count after applying the BURSTKIT_THREADS ceiling (default 1)."""
    n = 1 if requested is None else requested
    if n < 1:
        raise ValueError("--jobs must be >= 1")
    cap = env_thread_cap()
    return min(n, cap) if cap else n


def _read_kv(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _dataclass_from_kv(cls, values: dict[str, str], **base):
    """Build ``cls`` from string values, coercing by each field's default type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(base)
    for k, v in values.items():
        if k not in fields:
            raise ValueError(f"unknown config key {k!r} for {cls.__name__}")
        default = fields[k].default
        if isinstance(default, bool):
            kwargs[k] = v.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kwargs[k] = int(v)
        elif isinstance(default, float):
            kwargs[k] = float(v)
        elif isinstance(default, tuple):
            parts = [p.strip() for p in v.split(",") if p.strip()]
            kwargs[k] = tuple(float(p) for p in parts) if default and isinstance(default[0], float) else tuple(parts)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def _config_bytes(args) -> bytes:
    return Path(args.config).read_bytes() if args.config else b""


def write_provenance(out: Path, args, extra: dict | None = None, seed: int | None = None) -> None:
    """Stamp ``out/provenance.txt`` with version, effective seed and config hash."""
    out.mkdir(parents=True, exist_ok=True)
    seed = seed if seed is not None else (args.seed if args.seed is not None else 0)
    lines = [
        f"burstkit_version = {__version__}",
        f"command = {args.command}",
        f"seed = {seed}",
        f"config = {args.config or ''}",
        f"config_sha256 = {hashlib.sha256(_config_bytes(args)).hexdigest()}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    (out / "provenance.txt").write_text("\n".join(lines) + "\n")


def _run_config(args, **overrides) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        overrides.setdefault("seed", args.seed)
    return dataclasses.replace(run, **overrides) if overrides else run


def _spec_config(args) -> dsp.SpectrogramConfig:
    if args.command == "featurize" and args.config:
        return _dataclass_from_kv(dsp.SpectrogramConfig, _read_kv(args.config))
    return dsp.SpectrogramConfig()


def _load_split(manifest, split: str, kind: str, features=None, jobs: int = 1) -> data.ClipDataset:
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest {manifest} does not exist")
    samples = [s for s in data.load_manifest(manifest) if s.split == split]
    if not samples:
        raise ValueError(f"manifest {manifest} has no clips in split {split!r}")
    return data.dataset_from_samples(samples, kind, manifest.parent, feature_dir=features, jobs=jobs)


def _require_split(manifest, split: str) -> None:
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest {manifest} does not exist")
    if not any(s.split == split for s in data.load_manifest(manifest)):
        raise ValueError(f"manifest {manifest} has no clips in split {split!r}")


def _kind(family: str) -> str:
    return "spectrogram" if family == "resnet" else "embedding"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    overrides = _read_kv(args.config) if args.config else {}
    spec = _dataclass_from_kv(data.SynthSpec, overrides, **data.PRESETS[args.preset])
    if args.n_train is not None or args.n_val is not None:
        spec = dataclasses.replace(
            spec,
            n_train=spec.n_train if args.n_train is None else args.n_train,
            n_val=spec.n_val if args.n_val is None else args.n_val,
        )
    corpus = data.synth_dataset(spec, seed=args.seed or 0)
    manifest = data.write_synth(corpus, args.out)
    write_provenance(Path(args.out), args, {"preset": args.preset})
    print(manifest)


def cmd_featurize(args) -> None:
    cfg = _spec_config(args)
    samples = [s for s in data.load_manifest(args.manifest) if s.wav_path]
    if args.split:
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise ValueError("no clips with audio to featurize")
    root = Path(args.manifest).parent
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    specs = dsp.featurize_many([root / s.wav_path for s in samples], cfg, thread_cap(args.jobs))
    for s, m in zip(samples, specs):
        dsp.save_features(out / "features" / f"{s.clip_id}.bkml", m.values)
    write_provenance(out, args, {"n_clips": len(samples)})


def cmd_train(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _run_config(args, checkpoint=str(out / "model.bkpt"))
    kind = _kind(run.family)
    jobs = thread_cap(None)
    tr = _load_split(args.manifest, args.train_split, kind, args.features, jobs)
    va = _load_split(args.manifest, args.val_split, kind, args.features, jobs)
    result = training.train(run, tr, va)
    result.write_log(out / "train_log.csv")
    run.save(out / "run.cfg")
    objectives.write_metrics_csv(out / "metrics.csv", [objectives.metrics_row("model", args.val_split, result.best_scores)])
    write_provenance(out, args, {"best_step": result.best_step}, seed=run.seed)


def cmd_evaluate(args) -> None:
    _require_split(args.manifest, args.split)
    model = models.load_model(args.model)
    ds = _load_split(args.manifest, args.split, _kind(model.cfg.family), args.features, thread_cap(None))
    scores = objectives.evaluate(model, ds, const_age=args.const_age)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    objectives.write_metrics_csv(out / "metrics.csv", [objectives.metrics_row(Path(args.model).stem, args.split, scores)])
    write_provenance(out, args)


def cmd_predict(args) -> None:
    _require_split(args.manifest, args.split)
    model = models.load_model(args.model)
    ds = _load_split(args.manifest, args.split, _kind(model.cfg.family), args.features, thread_cap(None))
    pred = objectives.predict(model, ds, const_age=args.const_age)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.write_predictions(out / "predictions.csv", pred, data.COUNTRIES)
    write_provenance(out, args)


def cmd_ensemble(args) -> None:
    _require_split(args.manifest, args.split)
    emo = models.load_model(args.emotion_model)
    cty = models.load_model(args.country_model)
    if emo.cfg.family != cty.cfg.family:
        raise ValueError("ensemble members must share a model family")
    ds = _load_split(args.manifest, args.split, _kind(emo.cfg.family), args.features, thread_cap(None))
    pred = training.ensemble_predict(emo, cty, ds, args.const_age)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.write_predictions(out / "predictions.csv", pred, data.COUNTRIES)
    scores = objectives.score_predictions(pred, ds)
    objectives.write_metrics_csv(out / "metrics.csv", [objectives.metrics_row("ensemble", args.split, scores)])
    write_provenance(out, args)


def cmd_permtest(args) -> None:
    out = Path(args.out)
    manifest = Path(args.manifest) if args.manifest else out / "manifest.csv"
    run = _run_config(args, checkpoint="")
    tr = _load_split(manifest, args.train_split, "embedding")
    va = _load_split(manifest, args.val_split, "embedding")
    plan = analysis.PermutationPlan(args.mode, args.trials, run.seed)
    dist = analysis.permutation_experiment(plan, tr, va, run, jobs=thread_cap(args.jobs))
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_trials_csv(out / f"trials_{args.mode}.csv", [dist])
    # summarise against whichever other arms already exist in the output directory
    dists = {}
    for mode in analysis.MODES:
        path = out / f"trials_{mode}.csv"
        if path.exists():
            dists[mode] = analysis.read_trials_csv(path)[0]
    if "true" in dists and len(dists) > 1:
        tests = {
            f"true_vs_{m}": analysis.two_sample_t_test(dists["true"].scores, d.scores)
            for m, d in dists.items()
            if m != "true"
        }
        analysis.write_ttest_csv(out / "ttest.csv", tests)
    kde_ready = [d for d in dists.values() if len(d.scores) >= 2 and np.std(d.scores) > 0]
    if kde_ready:
        analysis.write_kde_csv(out / "kde.csv", kde_ready)
    write_provenance(out, args, {"mode": args.mode, "trials": args.trials}, seed=run.seed)


def cmd_resplit(args) -> None:
    samples = data.load_manifest(args.manifest)
    moved, before, after = data.speaker_resplit(samples, args.speakers, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # media paths are relative to the manifest, so re-anchor them at the new location
    root = Path(args.manifest).resolve().parent
    here = out.resolve()
    for s in moved:
        if s.wav_path:
            s.wav_path = os.path.relpath(root / s.wav_path, here)
        if s.emb_path:
            s.emb_path = os.path.relpath(root / s.emb_path, here)
    data.save_manifest(out / "manifest.csv", moved)
    before.to_csv(out / "split_report_before.csv")
    after.to_csv(out / "split_report_after.csv")
    write_provenance(out, args, {"speakers": args.speakers})


def _read_results(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"model", "mtl", "mean_ccc", "uar", "mae"}
        missing = need - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for n, r in enumerate(reader, start=2):
            try:
                rows.append({
                    "model": r["model"],
                    "mtl": r["mtl"].strip().lower() in ("yes", "true", "1"),
                    "mean_ccc": float(r["mean_ccc"]),
                    "uar": float(r["uar"]),
                    "mae": float(r["mae"]),
                    "harmonic_mean_printed": float(r["harmonic_mean"]) if r.get("harmonic_mean") else None,
                })
            except ValueError as exc:
                raise ValueError(f"{path}: row {n}: {exc}") from None
    return rows


def cmd_report(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.table1 is None and not args.naive:
        raise ValueError("report needs --table1 [CSV] and/or --naive")
    if args.table1 is not None:
        results = analysis.table1_results() if args.table1 == "-" else _read_results(args.table1)
        rows = analysis.mtl_comparison_report(results)
        analysis.write_report_csv(out / "report.csv", rows)
        for r in rows:
            hm = "" if r["harmonic_mean"] is None else f"{r['harmonic_mean']:.3f}"
            print(f"{r['model']:<24} {r['mtl']:<3} {hm}")
    if args.naive:
        if not args.manifest:
            raise ValueError("--naive needs --manifest")
        tr = _load_split(args.manifest, "train", "embedding")
        va = _load_split(args.manifest, "val", "embedding")
        scores = analysis.naive_baselines(tr, va)
        objectives.write_metrics_csv(out / "naive.csv", [objectives.metrics_row("naive", "val", scores)])
    write_provenance(out, args)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="burstkit", description="Vocal-burst multitask modelling toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--preset", choices=sorted(data.PRESETS), default="null")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("featurize", parents=[common], help="cache log-mel features for every clip")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--jobs", type=int)
    s.set_defaults(fn=cmd_featurize)

    def data_flags(s, split=True):
        s.add_argument("--manifest", required=True)
        s.add_argument("--features", help="directory of cached .bkml features")
        if split:
            s.add_argument("--split", default="val")

    s = sub.add_parser("train", parents=[common], help="train one model")
    data_flags(s, split=False)
    s.add_argument("--train-split", default="train")
    s.add_argument("--val-split", default="val")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    data_flags(s)
    s.add_argument("--model", required=True)
    s.add_argument("--const-age", type=float)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("predict", parents=[common], help="write per-clip predictions")
    data_flags(s)
    s.add_argument("--model", required=True)
    s.add_argument("--const-age", type=float)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("ensemble", parents=[common], help="combine single-task emotion and country models")
    data_flags(s)
    s.add_argument("--emotion-model", required=True)
    s.add_argument("--country-model", required=True)
    s.add_argument("--const-age", type=float, default=training.NAIVE_AGE)
    s.set_defaults(fn=cmd_ensemble)

    s = sub.add_parser("permtest", parents=[common], help="run one arm of the auxiliary-label permutation test")
    s.add_argument("--manifest", help="defaults to OUT/manifest.csv")
    s.add_argument("--mode", choices=analysis.MODES, required=True)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--jobs", type=int)
    s.add_argument("--train-split", default="train")
    s.add_argument("--val-split", default="val")
    s.set_defaults(fn=cmd_permtest)

    s = sub.add_parser("resplit", parents=[common], help="move validation speakers into train")
    s.add_argument("--manifest", required=True)
    s.add_argument("--speakers", type=int, default=250)
    s.set_defaults(fn=cmd_resplit)

    s = sub.add_parser("report", parents=[common], help="comparison tables and naive baselines")
    s.add_argument("--table1", nargs="?", const="-", help="results CSV (model,mtl,mean_ccc,uar,mae); built-in table if omitted")
    s.add_argument("--naive", action="store_true", help="majority-class / median-age baselines")
    s.add_argument("--manifest")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=env_thread_cap()):
            args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"burstkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"burstkit {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
