"""Fill the MCD table (floor, direct, two-step per feature set) on synthetic corpora.

Each feature set gets its own corpus whose EEG already has the set's dimension;
pass ``--reduce`` to generate 93-dim EEG and reduce it with KPCA instead.
"""

import argparse
import json
import sys
from pathlib import Path

from nvx.cli import main as nvx
from nvx.train import render_table


def run(argv):
    code = nvx([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/tables")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--mfcc", type=int, choices=(13, 128), default=13)
    ap.add_argument("--sets", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--model", choices=("attention", "baseline"), default="attention")
    ap.add_argument("--reduce", action="store_true")
    ap.add_argument("--paper-ref", default="subject1")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rate = 100 if args.mfcc == 13 else 32
    out = Path(args.out)
    dims = {1: 30, 2: 50, 3: 93}
    ckpts = []
    for fs in args.sets:
        eeg_dim = 93 if args.reduce else dims[fs]
        data = out / f"data-eeg{eeg_dim}-mfcc{args.mfcc}"
        if not (data / "manifest.json").exists():
            run(["gen", "--out", data, "--n", args.n, "--eeg-dim", eeg_dim, "--mfcc", args.mfcc, "--rate", rate,
                 "--seed", args.seed])
        for approach in ("direct", "two-step"):
            ck = out / f"set{fs}-{approach}-{args.model}.ckpt"
            flags = [] if args.reduce else ["--no-reduce"]
            run(["train", "--data", data, "--approach", approach, "--feature-set", fs, "--mfcc", args.mfcc,
                 "--rate", rate, "--model", args.model, "--epochs", args.epochs, "--seed", args.seed,
                 "--out", ck, *flags])
            ckpts.append((data, ck))
    # one eval per corpus keeps the data/checkpoint pairs consistent
    cells = {}
    for data in sorted({d for d, _ in ckpts}):
        flags = []
        for d, ck in ckpts:
            if d == data:
                flags += ["--ckpt", ck]
        report = out / f"report-{data.name}.json"
        run(["eval", *flags, "--data", data, "--report", report, "--paper-ref", args.paper_ref])
        doc = json.loads(report.read_text())
        for r in doc.get("runs", [doc]):
            cfg = r["config"]
            cell = cells.setdefault(cfg["feature_set"], {})
            cell["floor"] = r["baseline_mean_predictor_mcd"]
            cell["first" if cfg["approach"] == "direct" else "second"] = r["average_mcd"]
    table = render_table(cells, args.paper_ref)
    (out / "table.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
