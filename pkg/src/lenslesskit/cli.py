"""``lenslesskit`` command line.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numerical
failure.  Relative output paths are resolved against ``$LENSLESSKIT_OUTPUT_ROOT``
when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .config import RunConfig, load_run_config
from .errors import ConfigError, LenslessError

log = logging.getLogger("lenslesskit")

OUTPUT_ROOT_ENV = "LENSLESSKIT_OUTPUT_ROOT"


def out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))


def parse_grid(text: str):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 5x5, got {text!r}")
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return rows, cols


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    from .data import ingest

    manifest = ingest(args.directory, seed=args.seed, ratios=tuple(args.ratios), skip_bad=args.skip_bad,
                      seed_psf=args.seed_psf, resolution=args.resolution)
    path = manifest.save(out_path(args.out))
    sizes = manifest.sizes()
    print(f"wrote {path}: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


def cmd_scenes(args) -> int:
    from .data import write_scene_corpus

    paths = write_scene_corpus(out_path(args.out_dir), args.count, args.size, args.seed)
    print(f"wrote {len(paths)} scenes to {out_path(args.out_dir)}")
    return 0


def cmd_psf_seed(args) -> int:
    from .io import save_psf
    from .psf import caustic_psf, psf_sparsity

    k = caustic_psf(args.size, args.rng_seed)
    path = save_psf(out_path(args.out), k, normalized=True)
    print(f"wrote {path} ({args.size}x{args.size}, {psf_sparsity(k):.1%} of pixels above 1% of peak)")
    return 0


def cmd_psf_shuffle(args) -> int:
    from .io import load_psf, save_psf
    from .psf import random_permutation, shuffle_psf, split_sections

    seed_psf = load_psf(args.seed_psf)
    rows, cols = args.grid
    grid = split_sections(seed_psf, rows, cols)
    rng = np.random.default_rng(args.rng_seed)
    out_dir = out_path(args.out_dir)
    entries = []
    for i in range(args.count):
        perm = random_permutation(grid.n, rng)
        name = f"psf_{i:05d}.psf"
        save_psf(out_dir / name, shuffle_psf(grid, perm), normalized=True)
        entries.append({"file": name, "permutation": perm.to_list()})
    manifest = {
        "seed_psf": str(Path(args.seed_psf).resolve()),
        "grid": [rows, cols],
        "rng_seed": args.rng_seed,
        "count": args.count,
        "psfs": entries,
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"wrote {args.count} PSFs and manifest.json to {out_dir}")
    return 0


def cmd_synthesize(args) -> int:
    from .data import DatasetManifest, LensedImages
    from .io import load_psf, save_image, save_psf
    from .physics import NoiseSpec, apply_forward
    from .psf import fit_psf, random_permutation, shuffle_psf, split_sections

    manifest = DatasetManifest.load(args.manifest, verify=True)
    seed_psf = load_psf(args.seed_psf or manifest.seed_psf)
    rows, cols = args.grid
    grid = split_sections(seed_psf, rows, cols)
    images = LensedImages(manifest, args.split, args.resolution, cache=False)
    rng = np.random.default_rng(args.rng_seed)
    gen = torch.Generator().manual_seed(args.rng_seed)
    out_dir = out_path(args.out_dir)
    limit = len(images) if args.limit is None else min(args.limit, len(images))
    records = []
    for i in range(limit):
        perm = random_permutation(grid.n, rng)
        k = fit_psf(shuffle_psf(grid, perm), args.resolution)[0]
        x = images[i]
        y = apply_forward(x, k, NoiseSpec(args.sigma), generator=gen)
        stem = Path(images.records[i].path).stem
        save_image(out_dir / "lensed" / f"{stem}.png", x)
        save_image(out_dir / "lensless" / f"{stem}.png", y, bits=16, seed=args.rng_seed,
                   extra={"sigma": args.sigma, "permutation": perm.to_list()})
        save_psf(out_dir / "psf" / f"{stem}.psf", k[0])
        records.append({"image": images.records[i].path, "permutation": perm.to_list()})
    _write_json(out_dir / "synthesis.json", {
        "manifest": str(Path(args.manifest).resolve()), "split": args.split, "grid": [rows, cols],
        "sigma": args.sigma, "rng_seed": args.rng_seed, "resolution": args.resolution, "records": records,
    })
    print(f"synthesized {limit} lensless images into {out_dir}")
    return 0


def cmd_config(args) -> int:
    cfg = RunConfig.toy(args.manifest, args.seed_psf, output_dir=args.output_dir)
    path = out_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(path)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    config = load_run_config(args.config)
    out_dir = out_path(args.out_dir or config.output_dir)

    def progress(state, v):
        print(
            f"iter {state.iteration:6d}  seen PSNR {v.get('seen_psnr', float('nan')):.2f} dB "
            f"(lensless {v.get('seen_psnr_lensless', float('nan')):.2f})  "
            f"cycle {v.get('seen_cycle_residual', float('nan')):.4f}",
            flush=True,
        )

    state = train(config, out_dir, resume=args.resume, max_iters=args.max_iters, progress=progress)
    print(f"finished at iteration {state.iteration}; artifacts in {out_dir}")
    return 0


def cmd_reconstruct(args) -> int:
    from .io import load_image, load_psf, save_image
    from .metrics import psnr, ssim
    from .training import load_generator, reconstruct

    if not args.psf:
        raise ConfigError("reconstruction is non-blind: --psf is required (pass the PSF the measurement was taken with)")
    G, _ = load_generator(args.checkpoint)
    y = load_image(args.input)
    res = G.spec.input_resolution
    if tuple(y.shape[-2:]) != (res, res) or y.shape[0] != G.spec.in_channels:
        raise ConfigError(f"input is {tuple(y.shape)}, model expects ({G.spec.in_channels}, {res}, {res})")
    k = torch.as_tensor(load_psf(args.psf), dtype=torch.float32)
    x_bar = reconstruct(G, y, k)
    out = out_path(args.out)
    save_image(out, x_bar)
    result = {"input": args.input, "psf": args.psf, "output": str(out)}
    if args.ground_truth:
        gt = load_image(args.ground_truth)
        result.update(psnr=psnr(x_bar, gt), ssim=ssim(x_bar, gt))
        print(f"PSNR {result['psnr']:.2f} dB  SSIM {result['ssim']:.4f}")
    _write_json(out.with_suffix(".metrics.json"), result)
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import DatasetManifest, LensedImages
    from .io import save_image
    from .metrics import config_fingerprint, format_table
    from .psf import Permutation, fit_psf, shuffle_psf, split_sections
    from .training import contact_sheet, evaluate_generator, load_generator

    G, ckpt = load_generator(args.checkpoint)
    cfg = ckpt["config"]
    t = cfg["training"]
    manifest = DatasetManifest.load(args.manifest or cfg["data"]["manifest"])
    images = LensedImages(manifest, args.split, t["resolution"], G.spec.in_channels)
    n = len(images) if args.limit is None else min(args.limit, len(images))
    batch = images.batch(range(n))

    grid = split_sections(np.asarray(ckpt["seed_psf"]), t["grid_rows"], t["grid_cols"])
    if args.psf_mode == "single":
        perm = Permutation.identity(grid.n)
    else:
        stored = ckpt["val_perms"].get(args.psf_mode)
        if stored is None:
            raise ConfigError(f"checkpoint has no {args.psf_mode!r} PSF (single-PSF run?)")
        perm = Permutation(np.array(stored))
    k = fit_psf(shuffle_psf(grid, perm), t["resolution"])[0]
    res = evaluate_generator(G, batch, k, t["noise_sigma"], seed=args.seed)
    report = res["report"]
    report.fingerprint = {"config": config_fingerprint(cfg), "checkpoint": str(args.checkpoint),
                          "split": args.split, "psf_mode": args.psf_mode, "permutation": perm.to_list(),
                          "peak": 1.0, "ssim": "gaussian window 11, sigma 1.5, per-channel mean"}
    stem = out_path(args.out)
    report.write(stem)
    summary = {**report.summary(), "psnr_lensless_db": res["psnr_lensless"], "cycle_residual": res["cycle_residual"]}
    _write_json(stem.with_name(stem.name + ".summary.json"), summary)
    if args.sheet:
        save_image(out_path(args.sheet), contact_sheet(batch, res["lensless"], res["reconstructions"]))
    rows = [{"metric": k, "value": v} for k, v in summary.items() if isinstance(v, (int, float))]
    print(format_table(rows))
    return 0


def cmd_bench(args) -> int:
    from .metrics import convolution_ops, format_table, runtime_benchmark, shuffle_ops

    rows = runtime_benchmark(
        convolution_ops(batch=args.batch, psf_size=args.psf_size), args.sizes, args.repeats
    )
    rows += runtime_benchmark(shuffle_ops(), [args.shuffle_size], max(args.repeats, 20))
    print(format_table(rows))
    for size in args.sizes:
        fft = next(r["median_s"] for r in rows if r["op"] == "fft" and r["size"] == size)
        direct = next(r["median_s"] for r in rows if r["op"] == "direct" and r["size"] == size)
        print(f"size {size}: direct / fft = {direct / fft:.1f}x")
    _write_json(out_path(args.out), {"batch": args.batch, "psf_size": args.psf_size, "rows": rows})
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lenslesskit", description="Multi-PSF lensless imaging toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add_ingest(sp):
        sp.add_argument("directory", help="directory of lensed RGB images")
        sp.add_argument("--out", default="manifest.json", help="manifest path")
        sp.add_argument("--seed", type=int, default=0, help="split hashing seed")
        sp.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "VAL", "TEST"))
        sp.add_argument("--skip-bad", action="store_true", help="drop undecodable files instead of aborting")
        sp.add_argument("--seed-psf", help="seed PSF file recorded in the manifest")
        sp.add_argument("--resolution", type=int, help="working resolution recorded in the manifest")
        sp.set_defaults(func=cmd_ingest)

    def add_synthesize(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--seed-psf", help="defaults to the manifest's seed PSF")
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        sp.add_argument("--grid", type=parse_grid, default=(5, 5), help="section grid, e.g. 5x5")
        sp.add_argument("--sigma", type=float, default=0.01, help="Gaussian noise std")
        sp.add_argument("--resolution", type=int, default=128)
        sp.add_argument("--rng-seed", type=int, default=0)
        sp.add_argument("--limit", type=int, help="synthesize at most this many images")
        sp.add_argument("--out-dir", default="synth")
        sp.set_defaults(func=cmd_synthesize)

    def add_scenes(sp):
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--count", type=int, default=250)
        sp.add_argument("--size", type=int, default=64)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=cmd_scenes)

    add_ingest(sub.add_parser("ingest", help="build a dataset manifest"))
    add_synthesize(sub.add_parser("synthesize", help="write synthetic lensless measurements"))

    data = sub.add_parser("data", help="dataset commands").add_subparsers(dest="data_command", required=True)
    add_ingest(data.add_parser("ingest", help="build a dataset manifest"))
    add_synthesize(data.add_parser("synthesize", help="write synthetic lensless measurements"))
    add_scenes(data.add_parser("scenes", help="write a procedural stand-in corpus"))

    psf = sub.add_parser("psf", help="PSF generation").add_subparsers(dest="psf_command", required=True)
    sh = psf.add_parser("shuffle", help="generate permuted PSFs from a seed PSF")
    sh.add_argument("--seed-psf", required=True)
    sh.add_argument("--grid", type=parse_grid, default=(5, 5))
    sh.add_argument("--count", type=int, default=10)
    sh.add_argument("--rng-seed", type=int, default=0)
    sh.add_argument("--out-dir", default="psfs")
    sh.set_defaults(func=cmd_psf_shuffle)
    sd = psf.add_parser("seed", help="write a synthetic caustic seed PSF")
    sd.add_argument("--size", type=int, default=128)
    sd.add_argument("--rng-seed", type=int, default=0)
    sd.add_argument("--out", default="seed.psf")
    sd.set_defaults(func=cmd_psf_seed)

    cf = sub.add_parser("config", help="write a desk-scale run config template")
    cf.add_argument("--manifest", required=True)
    cf.add_argument("--seed-psf", required=True)
    cf.add_argument("--output-dir", default="runs/toy")
    cf.add_argument("--out", default="config.yaml")
    cf.set_defaults(func=cmd_config)

    tr = sub.add_parser("train", help="run adversarial training from a config file")
    tr.add_argument("config", help="run config (JSON or YAML)")
    tr.add_argument("--out-dir", help="override config output_dir")
    tr.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/latest.pt")
    tr.add_argument("--max-iters", type=int, help="stop after this many loop iterations")
    tr.set_defaults(func=cmd_train)

    rc = sub.add_parser("reconstruct", help="reconstruct one lensless image with its PSF")
    rc.add_argument("--checkpoint", required=True)
    rc.add_argument("--input", required=True, help="lensless PNG")
    rc.add_argument("--psf", help="PSF file (required: reconstruction is non-blind)")
    rc.add_argument("--out", default="reconstruction.png")
    rc.add_argument("--ground-truth", help="lensed PNG for PSNR/SSIM")
    rc.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("eval", help="PSNR/SSIM over a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", help="defaults to the manifest in the checkpoint config")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--psf-mode", default="seen", choices=["seen", "unseen", "single"])
    ev.add_argument("--limit", type=int)
    ev.add_argument("--seed", type=int, default=0, help="noise seed")
    ev.add_argument("--out", default="eval_report", help="report stem (.json and .csv are written)")
    ev.add_argument("--sheet", help="optional contact-sheet PNG")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="forward-model and PSF-shuffle runtimes")
    be.add_argument("--sizes", type=int, nargs="+", default=[256])
    be.add_argument("--batch", type=int, default=32)
    be.add_argument("--psf-size", type=int, default=32)
    be.add_argument("--shuffle-size", type=int, default=128)
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--out", default="bench.json")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (LenslessError, RuntimeError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
