"""Single-task MiniResNet runs on the synthetic audio corpus."""

import argparse
from pathlib import Path

from burstkit import data
from burstkit.objectives import metrics_row, write_metrics_csv
from burstkit.training import RunConfig, train

TARGETS = {"emotion": 0.7, "country": 0.9}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tasks", default="emotion,country")
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--no-early-stop", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/audio")
    args = ap.parse_args()

    corpus = data.synth_dataset(data.preset("audio"), seed=args.seed)
    tr, va = corpus.dataset("train", "spectrogram"), corpus.dataset("val", "spectrogram")
    print(f"{len(tr)} train / {len(va)} val clips, spectrogram {tr.features[0].shape}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for task in args.tasks.split(","):
        run = RunConfig(family="resnet", depth="mini", tasks=(task,), batch_size=32, learning_rate=1e-3,
                        dropout_rate=0.0, eval_every=20, max_steps=args.max_steps, seed=args.seed)
        res = train(run, tr, va, stop_at=None if args.no_early_stop else TARGETS[task])
        res.write_log(out / f"log_{task}.csv")
        rows.append(metrics_row(f"mini_{task}", "val", res.best_scores))
        s = res.best_scores
        metric = s.mean_ccc if task == "emotion" else s.uar
        print(f"{task:<8} best {metric:.3f} at step {res.best_step} (target {TARGETS[task]})")
    write_metrics_csv(out / "metrics.csv", rows)


if __name__ == "__main__":
    main()
