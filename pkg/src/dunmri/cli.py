"""Command line entry points.

Every command exits 0 on success and 2 with a one-line ``error:`` message
otherwise.  Datasets are directories of tensor containers: ``phantom``
writes images (record ``image``), ``simulate`` turns them into measured
k-space (records ``kspace`` and ``mask``) which is all ``train`` ever sees.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from dunmri import io
from dunmri.cppa import CPPAConfig, solve
from dunmri.metrics import evaluate_volume
from dunmri.network import init_params
from dunmri.physics import (CoilSensitivities, add_kspace_noise, estimate_sensitivities, forward_multi,
                            make_coil_maps, make_mask, make_phantom)
from dunmri.ssl import TrainState, check_model_gradients, reconstruct, train

TOY_GRADCHECK = io.RunConfig(stages=2, base_channels=4, levels=4, height=16, width=16,
                             final_init="random")


def _files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.dunt"))
        if not found:
            raise ValueError(f"{path}: no .dunt files")
        return found
    if not path.exists():
        raise ValueError(f"{path}: no such file or directory")
    return [path]


def _sens_for(k) -> CoilSensitivities | None:
    return estimate_sensitivities(k) if k.coil_count > 1 else None


def _load_images(path) -> list[np.ndarray]:
    out = []
    for f in _files(path):
        rec = io.read_container(f)
        if "image" not in rec:
            raise ValueError(f"{f}: no 'image' record")
        out.append(rec["image"])
    return out


def _load_dataset(path):
    data = [io.load_kspace(f) for f in _files(path)]
    sens = [_sens_for(k) for k in data]
    return data, (None if all(s is None for s in sens) else
                  [s or CoilSensitivities(np.ones((1,) + k.shape, np.complex128), 0, np.ones(k.shape, bool))
                   for s, k in zip(sens, data)])


def cmd_phantom(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(args.count):
        img = make_phantom(args.size, args.size, args.kind, args.seed + i, phase=args.phase)
        name = f"phantom_{i:04d}.dunt"
        io.write_container(out / name, {"image": img})
        manifest.append(f"{name} {args.seed + i}\n")
    (out / "manifest.txt").write_text("".join(manifest))
    print(f"wrote {args.count} phantoms to {out}")


def cmd_simulate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = _load_images(args.images)
    manifest = []
    for i, img in enumerate(images):
        h, w = img.shape
        mask = make_mask(w, args.accel, args.pattern, args.seed + i)
        maps = make_coil_maps(args.coils, h, w, args.seed + i) if args.coils > 1 else np.ones((1, h, w))
        k = forward_multi(img, CoilSensitivities(maps.astype(np.complex128), 0, np.ones((h, w), bool)), mask)
        if args.noise > 0:
            k = add_kspace_noise(k, args.noise, args.seed + 10_000 + i)
        name = f"kspace_{i:04d}.dunt"
        io.save_kspace(out / name, k)
        manifest.append(f"{name} {args.seed + i}\n")
    (out / "manifest.txt").write_text("".join(manifest))
    print(f"wrote {len(images)} k-space files to {out}")


def cmd_mask(args) -> None:
    mask = make_mask(args.width, args.accel, args.pattern, args.seed)
    Path(args.out).write_text(mask.to_text())
    print(f"{len(mask)} of {args.width} lines ({mask.center_count} center)")


def cmd_train(args) -> None:
    cfg = io.RunConfig.load(args.config)
    data, sens = _load_dataset(args.data)
    if args.resume:
        state, _ = io.load_checkpoint(args.resume, cfg.model_config())
    else:
        state = TrainState(init_params(cfg.model_config()))
    t0 = time.perf_counter()

    def report(st, row):
        if args.verbose:
            print(f"epoch {st.epoch} step {row['step']} L_d {row['L_d']:.5f}", flush=True)

    _, history, state = train(data, state, cfg.loss_weights(), epochs=cfg.epochs, batch=cfg.batch,
                              lr=cfg.lr, seed=cfg.seed, rho_min=cfg.rho_min, rho_max=cfg.rho_max,
                              sens=sens, max_steps=args.max_steps, callback=report)
    io.save_checkpoint(args.out_checkpoint, state, cfg)
    if args.history:
        io.write_history_csv(history, args.history)
    last = history[-1]["L_d"] if history else float("nan")
    print(f"{len(history)} steps, final L_d {last:.5f}, {time.perf_counter() - t0:.1f} s")


def _write_image(path: Path, img: np.ndarray) -> None:
    if path.suffix == ".pgm":
        io.export_pgm(img, path)
    else:
        io.write_container(path, {"image": img})


def cmd_reconstruct(args) -> None:
    state, _ = io.load_checkpoint(args.checkpoint)
    files = _files(args.kspace)
    data = [io.load_kspace(f) for f in files]
    sens = [_sens_for(k) for k in data]
    dc = {"on": True, "off": False, "config": None}[args.dc]
    out = Path(args.out_image)
    if len(files) > 1 or Path(args.kspace).is_dir():
        out.mkdir(parents=True, exist_ok=True)
    for f, k, s in zip(files, data, sens):
        img = reconstruct([k], state.params, None if s is None else [s], dc=dc)[0]
        _write_image(out / (f.stem.replace("kspace", "recon") + ".dunt") if out.is_dir() else out, img)
    print(f"reconstructed {len(files)} slices")


def cmd_eval(args) -> None:
    refs, tests = _load_images(args.ref), _load_images(args.test)
    if len(refs) != len(tests):
        raise ValueError(f"{len(refs)} reference slices but {len(tests)} test slices")
    ids = [f.stem for f in _files(args.ref)]
    kw = {}
    if args.config:
        cfg = io.RunConfig.load(args.config)
        kw = dict(window=cfg.ssim_window, sigma=cfg.ssim_sigma, k1=cfg.ssim_k1, k2=cfg.ssim_k2)
    report = evaluate_volume(refs, tests, ids, **kw)
    report.to_csv(args.out_csv)
    print(f"PSNR {report.psnr_mean:.2f} +- {report.psnr_std:.2f} dB, "
          f"SSIM {report.ssim_mean:.4f} +- {report.ssim_std:.4f}")


def cmd_gradcheck(args) -> bool:
    cfg = io.RunConfig.load(args.config) if args.config else TOY_GRADCHECK
    t0 = time.perf_counter()
    report = check_model_gradients(cfg.model_config(), cfg.loss_weights(), step=cfg.gradcheck_step,
                                   tolerance=cfg.gradcheck_tol, max_entries=cfg.gradcheck_entries,
                                   seed=cfg.seed)
    print(report.summary())
    for name in report.flagged:
        print(f"  {name}: {report.errors[name]:.3e}")
    print(f"{time.perf_counter() - t0:.1f} s")
    return report.passed


def cmd_classical(args) -> None:
    k = io.load_kspace(args.kspace)
    cfg = CPPAConfig(args.tau, args.sigma, 1.0, args.threshold, args.iters, args.tol)
    x, trace = solve(k, cfg, _sens_for(k))
    _write_image(Path(args.out), x)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"{len(trace)} iterations, residual {trace.residual[-1]:.3e}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dunmri", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic phantom images")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--kind", default="random-ellipses", choices=["random-ellipses", "shepp-logan-like"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phase", action="store_true", help="add a smooth random phase")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="undersample phantom images into k-space")
    p.add_argument("--images", required=True)
    p.add_argument("--accel", type=int, default=4)
    p.add_argument("--pattern", default="random", choices=["random", "equispaced"])
    p.add_argument("--seed", type=int, default=1000, help="mask seed of the first slice")
    p.add_argument("--coils", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mask", help="write a sampling mask")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--accel", type=int, required=True)
    p.add_argument("--pattern", default="random", choices=["random", "equispaced"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="self-supervised training on measured k-space")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--resume")
    p.add_argument("--history", help="CSV of per-step losses")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="run a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kspace", required=True)
    p.add_argument("--out-image", required=True, help=".dunt container or .pgm")
    p.add_argument("--dc", default="config", choices=["on", "off", "config"])
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR / SSIM of test images against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--config", help="run config pinning the SSIM window and constants")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--config", help="defaults to the built-in toy model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("classical", help="CP-PPA reconstruction")
    p.add_argument("--kspace", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--trace", help="CSV of residual per iteration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classical)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ok = args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 1 if ok is False else 0


if __name__ == "__main__":
    sys.exit(main())
