#!/usr/bin/env python3
"""Train the desk-scale model and score it against the zero-filled baseline.

Writes a checkpoint, the per-step history and a JSON summary to --out.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from dunmri import experiment as E
from dunmri import io


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=E.DeskSetup.epochs)
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = E.DeskSetup(epochs=args.epochs)

    def progress(state, row):
        if args.verbose and row["step"] % 32 == 0:
            print(f"epoch {state.epoch} step {row['step']} L_d {row['L_d']:.5f}", flush=True)

    res = E.run_training(setup, progress)
    io.save_checkpoint(out / "model.dunt", res.params)
    io.write_history_csv(res.history, out / "history.csv")

    rows = {"zero-filled": E.zero_filled(res), "full input": E.full_input(res),
            "rho=0.5 partition": E.partitioned_input(res)}
    print(f"trained {len(res.history)} steps in {res.train_seconds:.0f} s")
    print(f"{'input':<20}{'PSNR dB':>16}{'SSIM':>18}")
    for name, (p, s) in rows.items():
        print(f"{name:<20}{p.mean():>8.2f} +- {p.std():<5.2f}{s.mean():>10.4f} +- {s.std():.4f}")
    wins = int(np.sum(rows["full input"][0] >= rows["rho=0.5 partition"][0]))
    print(f"full >= partition on {wins}/{setup.test_count} slices")
    summary = {name: {"psnr": p.tolist(), "ssim": s.tolist()} for name, (p, s) in rows.items()}
    summary["train_seconds"] = res.train_seconds
    (out / "summary.json").write_text(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
