#!/usr/bin/env python3
"""Noise robustness of a trained desk-scale model, with and without data consistency."""

import argparse

from dunmri import experiment as E
from dunmri import io


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default="runs/desk/model.dunt")
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.01, 0.02, 0.05, 0.1])
    args = ap.parse_args()
    setup = E.DeskSetup()
    state, _ = io.load_checkpoint(args.checkpoint, E.model_config(setup))
    res = E.held_out(setup, state.params)
    zf = E.zero_filled(res)
    print(f"zero-filled (clean): {zf[0].mean():.2f} dB / {zf[1].mean():.4f}")
    print(f"{'sigma_n':>8}{'protocol':>14}{'dc on':>16}{'dc off':>16}")
    for sigma in args.sigmas:
        proto = E.noisy_input(res, sigma)[0]
        on = E.noisy_input(res, sigma, dc=True)[0]
        off = E.noisy_input(res, sigma, dc=False)[0]
        print(f"{sigma:>8.3f}{proto[0].mean():>14.2f}{on[0].mean():>16.2f}{off[0].mean():>16.2f}")


if __name__ == "__main__":
    main()
