"""Long training runs behind the end-to-end, ablation and pruning checks.

Each run trains through the CLI, evaluates its best checkpoint on the
held-out split and writes runs/<name>/results.json.  Finished runs are
skipped, so the script can be restarted.

    OPENBLAS_NUM_THREADS=1 python scripts/acceptance_runs.py [--epochs N] [--only NAME ...]
"""

import argparse
import json
import time
from pathlib import Path

from nams import cli
from nams.persistence import load
from nams.dataset import load_corpus, split
from nams.trainer import evaluate_loss

ROOT = Path(__file__).resolve().parent.parent / "runs"

# name -> (epochs, extra config, flags).  The dense runs use the short 150 epoch
# schedule with the prune schedule halved to match (every 10 epochs from 50).
DENSE_EPOCHS = 150
DENSE_PRUNE = {"prune_start": 50, "prune_interval": 10}
SPARSE_EPOCHS = 100
RUNS = {
    "dense_prune": (DENSE_EPOCHS, DENSE_PRUNE, ["--init", "dense", "--sh-order", "3"]),
    "dense_noprune": (DENSE_EPOCHS, {}, ["--init", "dense", "--sh-order", "3", "--no-prune"]),
}
for _seed in range(3):
    for _order in (3, 0):
        RUNS[f"sparse_n{_order}_s{_seed}"] = (
            SPARSE_EPOCHS,
            {},
            ["--init", "sparse:8", "--sh-order", str(_order), "--no-prune", "--seed", str(_seed)],
        )


def ensure_corpus(root: Path) -> Path:
    corpus = root / "corpus"
    if not (corpus / "manifest.json").exists():
        assert cli.main(["generate", "--out", str(corpus)]) == 0
    return corpus


def run(name: str, flags, extra: dict, epochs: int, root: Path) -> dict:
    out = root / name
    result_path = out / "results.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    corpus = ensure_corpus(root)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "run_config.json"
    config.write_text(json.dumps(extra, sort_keys=True) + "\n")
    t0 = time.time()
    args = ["train", "--config", str(config), "--corpus", str(corpus), "--out", str(out), "--epochs", str(epochs)]
    code = cli.main([*args, "--quiet", *flags])
    if code != 0:
        raise SystemExit(f"{name}: train exited with {code}")
    train_seconds = time.time() - t0
    code = cli.main(["eval", "--checkpoint", str(out / "best.ckpt"), "--corpus", str(corpus), "--out", str(out / "eval")])
    if code != 0:
        raise SystemExit(f"{name}: eval exited with {code}")
    ckpt = load(out / "best.ckpt")
    _, test_set = split(load_corpus(corpus))
    summary = json.loads((out / "eval" / "summary.json").read_text())
    result = {
        "name": name,
        "flags": list(flags),
        "epochs": epochs,
        "config": extra,
        "train_seconds": train_seconds,
        "best_epoch": ckpt.best_epoch,
        "best_test_loss": ckpt.best_test_loss,
        "recomputed_test_loss": evaluate_loss(ckpt.to_model(), test_set),
        "final_test_loss": ckpt.meta.get("final_test_loss"),
        "final_poles": ckpt.meta.get("final_poles"),
        "initial_poles": ckpt.total_poles,
        "metrics": summary["columns"],
        "inference_ms_per_rir": summary["inference_ms_per_rir"],
    }
    result_path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, help="override every run's epoch count")
    parser.add_argument("--only", nargs="*")
    parser.add_argument("--root", default=str(ROOT))
    args = parser.parse_args()
    root = Path(args.root)
    for name, (epochs, extra, flags) in RUNS.items():
        if args.only and name not in args.only:
            continue
        print(f"== {name}", flush=True)
        result = run(name, flags, extra, args.epochs or epochs, root)
        print(json.dumps(result, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
