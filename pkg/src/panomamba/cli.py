"""Command-line entry points: project, train, generate, verify, bench.

Exit codes: 0 success, 1 contract/usage error, 2 I/O error. Flags win over
config-file values; all randomness flows from --seed (or the config's seed).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import images, pano, ssm
from .config import RunConfig, apply_overrides, config_to_text, load_config
from .pipeline import (
    SynthDataset,
    generate_panorama,
    make_models,
    train_loop,
)
from .rng import Rng
from .tensor import ContractError, DomainError, ShapeError
from .text import Tokenizer
from .verify import run_suite

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    """argparse flavor that honors the exit-code contract (usage errors -> 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONTRACT)


def _build_parser():
    p = _Parser(prog="panomamba", description="360-degree out-painting toolbox")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    pr = sub.add_parser("project", help="convert between panorama representations")
    pr.add_argument("--in", dest="infile", required=True, help="input image (PNG/PPM); for cubemap input use a {face} placeholder")
    pr.add_argument("--to", dest="target", required=True, choices=["cubemap", "equirect", "nfov"])
    pr.add_argument("--out", required=True, help="output path; cubemap output expands {face} (or adds _F.. suffixes)")
    pr.add_argument("--lon", type=float, default=0.0)
    pr.add_argument("--lat", type=float, default=0.0)
    pr.add_argument("--fov", type=float, default=90.0)
    pr.add_argument("--face-size", type=int, default=64)
    pr.add_argument("--size", type=int, default=64, help="NFoV output extent")
    pr.add_argument("--width", type=int, default=None, help="equirect output width (default 2*face-size*2)")

    tr = sub.add_parser("train", help="train the toy system on a synthetic corpus")
    tr.add_argument("--config", default=None)
    tr.add_argument("--data-dir", required=True)
    tr.add_argument("--steps", type=int, required=True)
    tr.add_argument("--ckpt-out", required=True)
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.add_argument("--loss-csv", default=None, help="default: <ckpt-out dir>/loss.csv")
    tr.add_argument("--seed", type=int, default=None)

    ge = sub.add_parser("generate", help="grow a panorama from a seed view and/or text")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--seed-image", default=None, help="NFoV seed image (PNG/PPM)")
    ge.add_argument("--text", default=None)
    ge.add_argument("--config", default=None)
    ge.add_argument("--out-dir", required=True)
    ge.add_argument("--lon", type=float, default=0.0, help="seed view longitude")
    ge.add_argument("--lat", type=float, default=0.0, help="seed view latitude")
    ge.add_argument("--seed", type=int, default=None)
    ge.add_argument("--dump-every", type=int, default=0,
                    help="write every k-th denoised view snapshot to <out-dir>/trajectory/")

    ve = sub.add_parser("verify", help="run property suites")
    ve.add_argument("--suite", required=True,
                    choices=["scan", "grad", "geometry", "diffusion", "vcr", "gma", "all"])
    ve.add_argument("--jobs", type=int, default=1)

    be = sub.add_parser("bench", help="benchmark the scan kernels")
    be.add_argument("--kernel", default="scan", choices=["scan"])
    be.add_argument("--L", type=int, required=True)
    be.add_argument("--N", type=int, required=True)
    be.add_argument("--D", type=int, required=True)
    be.add_argument("--variant", default="both", choices=["seq", "parallel", "both"])
    be.add_argument("--dtype", default="f64", choices=["f64", "f32"])
    be.add_argument("--csv", default=None, help="append rows here (default: stdout)")
    return p


def _load_cfg(path, overrides):
    cfg = load_config(path) if path else RunConfig()
    return apply_overrides(cfg, overrides)


# --- project -------------------------------------------------------------------


def _read_equirect(path):
    arr = images.read_image(path)
    return pano.EquirectImage(arr)


def cmd_project(args):
    if args.target == "equirect":
        if "{face}" not in args.infile:
            raise ContractError("equirect output needs a cubemap input pattern containing {face}")
        faces = {}
        for name in pano.FACE_ORDER:
            faces[name] = images.read_image(args.infile.replace("{face}", name))
        cube = pano.CubeMap({k: np.asarray(v) for k, v in faces.items()})
        w = args.width if args.width else cube.face_size * 4
        out = pano.cubemap_to_equirect(cube, w, w // 2)
        images.write_image(args.out, out.rgb)
        return EXIT_OK
    img = _read_equirect(args.infile)
    if args.target == "cubemap":
        cube = pano.equirect_to_cubemap(img, args.face_size)
        base, ext = os.path.splitext(args.out)
        for name in pano.FACE_ORDER:
            path = args.out.replace("{face}", name) if "{face}" in args.out else f"{base}_{name}{ext}"
            images.write_image(path, cube.face(name)[:, :, :3])
        return EXIT_OK
    view = pano.extract_nfov(img, pano.ViewCoords(args.lon, args.lat, args.fov), args.size)
    images.write_image(args.out, view.rgb)
    return EXIT_OK


# --- train ----------------------------------------------------------------------


def _prepare_corpus(data_dir, cfg):
    """Materialize the synthetic corpus (PNGs + captions) for inspection."""
    os.makedirs(data_dir, exist_ok=True)
    listing = os.path.join(data_dir, "captions.txt")
    ds = SynthDataset(cfg)
    if not os.path.exists(listing):
        with open(listing, "w", encoding="utf-8") as f:
            for i, (img, cap) in enumerate(ds.items):
                name = f"pano_{i:04d}.png"
                images.write_png(os.path.join(data_dir, name), img.rgb)
                f.write(f"{name}\t{cap}\n")
    vocab_path = os.path.join(data_dir, "vocab.txt")
    if not os.path.exists(vocab_path):
        Tokenizer.default().save(vocab_path)
    return ds


def cmd_train(args):
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = _load_cfg(args.config, overrides)
    models = make_models(cfg)
    start_step = 0
    opt = None
    if args.resume:
        blob = models.load(args.resume)
        from .nn import AdamW

        opt = AdamW(models.trainable_named_parameters(include_encoders=True),
                    lr=cfg.lr, weight_decay=cfg.weight_decay)
        opt.load_state_tensors(blob)
        if "train.step" in blob:
            start_step = int(round(float(blob["train.step"][0])))
    ds = _prepare_corpus(args.data_dir, cfg)
    loss_csv = args.loss_csv or os.path.join(os.path.dirname(os.path.abspath(args.ckpt_out)) or ".", "loss.csv")
    os.makedirs(os.path.dirname(os.path.abspath(args.ckpt_out)) or ".", exist_ok=True)
    new_file = start_step == 0 or not os.path.exists(loss_csv)
    f = open(loss_csv, "w" if new_file else "a", newline="", encoding="utf-8")
    with f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["step", "loss", "lr"])
        opt, _ = train_loop(
            models, ds, args.steps, start_step=start_step, opt=opt,
            on_step=lambda step, loss: writer.writerow([step, f"{loss:.6f}", cfg.lr]),
        )
    extra = dict(opt.state_tensors())
    extra["train.step"] = np.array([float(start_step + args.steps)])
    models.save(args.ckpt_out, extra=extra)
    return EXIT_OK


# --- generate --------------------------------------------------------------------


def cmd_generate(args):
    if args.seed_image is None and not args.text:
        raise ContractError("need --seed-image, --text, or both")
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = _load_cfg(args.config, overrides)
    models = make_models(cfg)
    models.load(args.ckpt)
    seed_view = None
    if args.seed_image:
        arr = images.read_image(args.seed_image)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise ContractError(f"seed image must be square RGB, got {arr.shape}")
        if arr.shape[0] != cfg.view_size:
            raise ContractError(f"seed image extent {arr.shape[0]} != view_size {cfg.view_size}")
        seed_view = pano.NFoVView(pano.ViewCoords(args.lon, args.lat, cfg.view_fov), arr)
    os.makedirs(args.out_dir, exist_ok=True)
    dump_dir = None
    if args.dump_every:
        dump_dir = os.path.join(args.out_dir, "trajectory")
        os.makedirs(dump_dir, exist_ok=True)
    rng = Rng(cfg.seed)
    log = []
    t0 = time.time()
    out = generate_panorama(models, seed_view, args.text or "", rng, log=log,
                            dump_every=args.dump_every, dump_dir=dump_dir)
    images.write_png(os.path.join(args.out_dir, "panorama.png"), out.rgb)
    images.write_mask_png(os.path.join(args.out_dir, "mask.png"), out.mask)
    with open(os.path.join(args.out_dir, "meta.txt"), "w", encoding="utf-8") as f:
        f.write("# run configuration\n")
        f.write(config_to_text(cfg))
        f.write(f"seed = {cfg.seed}\n")
        f.write(f"text = {args.text or ''}\n")
        f.write(f"seed_image = {args.seed_image or ''}\n")
        f.write("# step log\n")
        for line in log:
            f.write(line + "\n")
        f.write(f"# wall_seconds (timestamp, informational only) = {time.time() - t0:.2f}\n")
    return EXIT_OK


# --- verify / bench ----------------------------------------------------------------


def cmd_verify(args):
    results = run_suite(args.suite, jobs=max(1, args.jobs))
    width = max(len(f"{r.suite}.{r.name}") for r in results)
    failed = 0
    for r in results:
        tag = "PASS" if r.ok else "FAIL"
        print(f"{tag}  {f'{r.suite}.{r.name}':<{width}}  {r.detail}")
        failed += 0 if r.ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CONTRACT


BENCH_COLUMNS = ["L", "N", "D", "variant", "wall_ns", "max_abs_err"]


def cmd_bench(args):
    dtype = np.float64 if args.dtype == "f64" else np.float32
    variants = ["seq", "parallel"] if args.variant == "both" else [args.variant]
    rows = [ssm.bench_scan(args.L, args.N, args.D, v, dtype=dtype) for v in variants]
    out = open(args.csv, "a", newline="", encoding="utf-8") if args.csv else sys.stdout
    try:
        writer = csv.writer(out)
        if not args.csv or out.tell() == 0:
            writer.writerow(BENCH_COLUMNS)
        for r in rows:
            writer.writerow([r[c] for c in BENCH_COLUMNS])
    finally:
        if args.csv:
            out.close()
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONTRACT
    handlers = {
        "project": cmd_project,
        "train": cmd_train,
        "generate": cmd_generate,
        "verify": cmd_verify,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except (ContractError, ShapeError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
