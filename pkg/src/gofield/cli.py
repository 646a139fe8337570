"""Command-line entry point: ``gofield <command> [options]``.

Commands:
    synth    generate the synthetic toy dataset
    train    train and encode a dataset into ``.gof`` files plus CSV logs
    decode   decode a ``.gof`` into an ``.npz`` archive or rendered images
    render   render one frame from one camera of a ``.gof`` or ``.npz``
    eval     score ``.gof`` files against a dataset (PSNR, SSIM, size)
    rdcurve  sweep q, write an RD CSV and an SVG plot; or compare CSVs

Exit codes: 0 success, 1 missing input file, 2 invalid arguments or data.
The default thread count comes from ``--threads``, else the
``GOFIELD_THREADS`` environment variable, else the number of cores.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .codec import GofBitstream, GofReader, decode_gof, read_gof, write_gof
from .decoded import load_decoded, save_decoded
from .errors import FormatError, UsageError
from .metrics import RdPoint, bd_metrics
from .render import Camera, RenderConfig, render_image
from .scene import Dataset, generate_scene, load_dataset, orbit_cameras, save_image, toy_scene, write_dataset
from .train import DEFAULT_Q_SWEEP, TrainConfig, evaluate_gof, train_sequence

THREADS_ENV = "GOFIELD_THREADS"
log = logging.getLogger("gofield")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return _positive_int(env)
        except (ValueError, argparse.ArgumentTypeError):
            raise CliError(f"{THREADS_ENV} must be a positive integer, got {env!r}", 2)
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gofield", description="Compact dynamic radiance fields with GOF coding.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"torch threads (default: ${THREADS_ENV} or all cores; 1 for bit-reproducible runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic toy dataset")
    s.add_argument("out", type=Path, help="output directory")
    s.add_argument("--frames", type=_positive_int, default=10)
    s.add_argument("--train-cams", type=_positive_int, default=20)
    s.add_argument("--test-cams", type=int, default=4)
    s.add_argument("--size", type=_positive_int, default=128, help="image width and height")
    s.add_argument("--samples", type=_positive_int, default=256, help="quadrature samples per ray")
    s.add_argument("--speed", type=float, default=0.06, help="motion per frame of the moving sphere")

    t = sub.add_parser("train", help="train and encode a dataset")
    t.add_argument("dataset", type=Path)
    t.add_argument("--out", type=Path, required=True, help="output directory for .gof files and logs")
    t.add_argument("--config", type=Path, help="YAML training config")
    t.add_argument("--gof-len", type=_positive_int, default=None, help="frames per GOF (default 10)")
    t.add_argument("--q", type=_positive_float, default=None, help="quantization parameter (default 10)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--frames", type=_positive_int, default=None, help="train only the first N frames")
    t.add_argument("--no-joint", action="store_true", help="train without quantization noise and rate term")

    d = sub.add_parser("decode", help="decode a .gof")
    d.add_argument("gof", type=Path)
    d.add_argument("--out", type=Path, required=True, help=".npz archive, or a directory with --render")
    d.add_argument("--render", type=Path, metavar="DATASET", help="render every camera of DATASET instead")
    d.add_argument("--samples", type=_positive_int, default=128)

    r = sub.add_parser("render", help="render one view")
    r.add_argument("source", type=Path, help=".gof file or decoded .npz archive")
    r.add_argument("--dataset", type=Path, required=True, help="dataset providing the cameras")
    r.add_argument("--frame", type=int, default=None, help="global frame index (default: first in the GOF)")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--samples", type=_positive_int, default=128)
    r.add_argument("--out", type=Path, required=True, help="image path (.png or .ppm)")

    e = sub.add_parser("eval", help="score .gof files against a dataset")
    e.add_argument("dataset", type=Path)
    e.add_argument("gofs", type=Path, nargs="+")
    e.add_argument("--samples", type=_positive_int, default=128)
    e.add_argument("--csv", type=Path, help="write per-frame results here")

    c = sub.add_parser("rdcurve", help="rate-distortion sweep over q")
    c.add_argument("dataset", type=Path, nargs="?")
    c.add_argument("--out", type=Path, required=True, help="output directory")
    c.add_argument("--q", type=_positive_float, nargs="+", default=list(DEFAULT_Q_SWEEP))
    c.add_argument("--config", type=Path)
    c.add_argument("--gof-len", type=_positive_int, default=None)
    c.add_argument("--frames", type=_positive_int, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--name", default="gofield", help="curve name used in the plot")
    c.add_argument("--compare", type=Path, nargs="+", metavar="CSV",
                   help="plot existing RD CSVs (and BD metrics vs the first) instead of training")
    return p


def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"no such file or directory: {path}", 1)
    return path


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(_require(args.config)) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    if getattr(args, "gof_len", None) is not None:
        overrides["gof_length"] = args.gof_len
    if getattr(args, "q", None) is not None and not isinstance(args.q, list):
        overrides["q"] = args.q
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_joint", False):
        overrides["joint"] = False
    return replace(cfg, **overrides)


def _dataset(path: Path, frames: int | None = None) -> Dataset:
    ds = load_dataset(_require(path))
    if frames is not None:
        if frames > ds.frame_count:
            raise CliError(f"dataset has {ds.frame_count} frames, asked for {frames}", 2)
        ds = ds.subset_frames(range(frames))
    return ds


def cmd_synth(args) -> int:
    scene = toy_scene(frames=args.frames, speed=args.speed)
    cams, splits = orbit_cameras(args.train_cams, args.test_cams, args.size, args.size)
    ds = generate_scene(scene, cams, splits, args.frames, args.samples)
    path = write_dataset(ds, args.out)
    print(f"wrote {path} ({args.frames} frames, {len(cams)} cameras)")
    return 0


REPORT_FIELDS = ("frame", "gof", "kind", "bytes", "psnr_train", "psnr_test", "ssim_test")
LOG_FIELDS = ("stage", "frame", "iteration", "mse", "rate_bits", "l1", "psnr", "loss")


def _write_csv(path: Path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _train(ds: Dataset, cfg: TrainConfig, out: Path, tag: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    result = train_sequence(ds, cfg)
    for i, bs in enumerate(result.bitstreams):
        write_gof(out / f"{tag}gof_{i:03d}.gof", bs)
    _write_csv(out / f"{tag}train_log.csv", LOG_FIELDS, result.log.rows)
    _write_csv(out / f"{tag}frames.csv", REPORT_FIELDS, [r.__dict__ for r in result.reports])
    return result


def _print_reports(reports):
    print(f"{'frame':>5} {'gof':>3} {'kind':>8} {'bytes':>9} {'psnr_train':>11} {'psnr_test':>10} {'ssim_test':>9}")
    for r in reports:
        print(f"{r.frame:5d} {r.gof:3d} {r.kind:>8} {r.bytes:9d} {r.psnr_train:11.6f} {r.psnr_test:10.6f} "
              f"{r.ssim_test:9.4f}")


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args.dataset, args.frames)
    result = _train(ds, cfg, args.out)
    _print_reports(result.reports)
    print(f"total {result.total_bytes} bytes in {len(result.gofs)} GOF file(s) under {args.out}")
    return 0


def cmd_decode(args) -> int:
    gof = read_gof(_require(args.gof))
    if args.render is None:
        with open(args.gof, "rb") as f:
            q = GofReader(f).header.q
        save_decoded(gof, args.out, q)
        print(f"wrote {args.out}")
        return 0
    ds = _dataset(args.render)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = RenderConfig(n_samples=args.samples, background=tuple(ds.background))
    for pos, frame in enumerate(gof.frames):
        for c, cam in enumerate(ds.cameras):
            img = render_image(frame, gof.keyframe.basis, gof.net, cam, cfg)
            save_image(img.clamp(0, 1), args.out / f"f{gof.first_frame + pos:03d}_c{c:03d}.png")
    print(f"rendered {len(gof)} frame(s) x {len(ds.cameras)} camera(s) into {args.out}")
    return 0


def _frame_position(first: int, count: int, frame: int | None) -> int:
    pos = 0 if frame is None else frame - first
    if not 0 <= pos < count:
        raise CliError(f"frame {frame} is not in this GOF (frames {first}..{first + count - 1})", 2)
    return pos


def render_view(source: Path, camera: Camera, frame: int | None, samples: int, background) -> torch.Tensor:
    """Render one view from a decoded archive, or from a ``.gof`` reading only the chunks it needs."""
    cfg = RenderConfig(n_samples=samples, background=tuple(background))
    if source.suffix == ".npz":
        gof = load_decoded(source)
        pos = _frame_position(gof.first_frame, len(gof), frame)
        return render_image(gof.frames[pos], gof.keyframe.basis, gof.net, camera, cfg)
    with open(source, "rb") as f:
        reader = GofReader(f)
        pos = _frame_position(reader.header.first_frame, len(reader), frame)
        fr, key_basis = reader.frame(pos)
        return render_image(fr, key_basis, reader.net, camera, cfg)


def cmd_render(args) -> int:
    _require(args.source)
    ds = load_dataset(_require(args.dataset))
    if not 0 <= args.camera < len(ds.cameras):
        raise CliError(f"camera {args.camera} out of range (dataset has {len(ds.cameras)})", 2)
    img = render_view(args.source, ds.cameras[args.camera], args.frame, args.samples, ds.background)
    save_image(img.clamp(0, 1), args.out)
    print(f"wrote {args.out}")
    return 0


def evaluate_files(ds: Dataset, paths, samples: int) -> list[dict]:
    rows = []
    for path in paths:
        bitstream = GofBitstream.from_bytes(_require(path).read_bytes())
        gof = decode_gof(bitstream)
        sizes = bitstream.frame_sizes()
        if gof.first_frame + len(gof) > ds.frame_count:
            raise CliError(f"{path} covers frames beyond the dataset", 2)
        train = evaluate_gof(gof, ds, "train", samples)
        test = evaluate_gof(gof, ds, "test", samples, with_ssim=True) if ds.indices("test") else None
        for i, fr in enumerate(gof.frames):
            rows.append({
                "file": str(path), "frame": gof.first_frame + i, "kind": fr.kind, "bytes": sizes[i],
                "psnr_train": train[i][0],
                "psnr_test": test[i][0] if test else float("nan"),
                "ssim_test": test[i][1] if test else float("nan"),
            })
    return rows


def cmd_eval(args) -> int:
    ds = load_dataset(_require(args.dataset))
    rows = evaluate_files(ds, args.gofs, args.samples)
    print(f"{'frame':>5} {'kind':>8} {'bytes':>9} {'psnr_train':>11} {'psnr_test':>10} {'ssim_test':>9}")
    for r in rows:
        print(f"{r['frame']:5d} {r['kind']:>8} {r['bytes']:9d} {r['psnr_train']:11.6f} {r['psnr_test']:10.6f} "
              f"{r['ssim_test']:9.4f}")
    if args.csv:
        _write_csv(args.csv, ("file", "frame", "kind", "bytes", "psnr_train", "psnr_test", "ssim_test"), rows)
    return 0


RD_FIELDS = ("label", "bytes", "psnr", "ssim")


def read_rd_csv(path: Path) -> list[RdPoint]:
    with open(_require(path), newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or not set(RD_FIELDS) <= set(rows[0]):
        raise CliError(f"{path}: expected columns {', '.join(RD_FIELDS)}", 2)
    return [RdPoint(float(r["bytes"]), float(r["psnr"]), float(r["ssim"]), r["label"]) for r in rows]


def write_rd_csv(path: Path, points) -> None:
    _write_csv(path, RD_FIELDS, [{"label": p.label, "bytes": int(p.rate), "psnr": p.psnr, "ssim": p.ssim}
                                 for p in points])


def plot_rd(curves: dict[str, list[RdPoint]], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in curves.items():
        pts = sorted(pts, key=lambda p: p.rate)
        ax.plot([p.rate / 1024 for p in pts], [p.psnr for p in pts], marker="o", label=name)
        for p in pts:
            ax.annotate(p.label, (p.rate / 1024, p.psnr), fontsize=7, textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel("size (KiB)")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def rd_sweep(ds: Dataset, cfg: TrainConfig, qs, out: Path) -> list[RdPoint]:
    points = []
    for q in qs:
        res = _train(ds, replace(cfg, q=q), out, tag=f"q{q:g}_")
        reports = res.reports
        quality = [r.psnr_test if ds.indices("test") else r.psnr_train for r in reports]
        sims = [r.ssim_test for r in reports]
        points.append(RdPoint(float(res.total_bytes), float(np.mean(quality)), float(np.mean(sims)), f"q={q:g}"))
        print(f"q={q:g}: {res.total_bytes} bytes, PSNR {points[-1].psnr:.3f} dB")
    return points


def cmd_rdcurve(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.compare:
        curves = {p.stem: read_rd_csv(p) for p in args.compare}
        names = list(curves)
        for other in names[1:]:
            d_psnr, d_rate = bd_metrics(curves[names[0]], curves[other])
            print(f"{other} vs {names[0]}: BD-PSNR {d_psnr:+.3f} dB, BD-rate {d_rate:+.2f} %")
    else:
        if args.dataset is None:
            raise CliError("rdcurve needs a dataset unless --compare is given", 2)
        cfg = _config(args)
        ds = _dataset(args.dataset, args.frames)
        points = rd_sweep(ds, cfg, args.q, args.out)
        write_rd_csv(args.out / "rd.csv", points)
        curves = {args.name: points}
    plot_rd(curves, args.out / "rd.svg")
    print(f"wrote {args.out / 'rd.svg'}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "decode": cmd_decode,
    "render": cmd_render, "eval": cmd_eval, "rdcurve": cmd_rdcurve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        torch.set_num_threads(args.threads if args.threads is not None else default_threads())
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"gofield: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"gofield: {e}", file=sys.stderr)
        return 1
    except (ValueError, FormatError, UsageError) as e:
        print(f"gofield: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
