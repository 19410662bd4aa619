"""Command-line entry point: ``idf <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 validation failure
(bad shapes, CRC, config).
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import io
from .engine import denoise, dump_trace, iteration_stats
from .metrics import evaluate, psnr, ssim, table_rows_markdown, write_report_csv
from .modules import param_count
from .noise import NoiseSpec
from .trainer import train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4

STOP_FLAGS = {"fixed": "fixed", "kernel-dic": "kernel_dic", "image-dic": "image_dic"}


class UsageError(Exception):
    pass


def _set_pair(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, value


def _resolve(args, extra=()):
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    return cfgmod.apply_overrides(cfg, list(extra) + list(getattr(args, "set", None) or []))


def _print_config(cfg):
    for line in cfgmod.render(cfg).splitlines():
        print(f"# {line}")


def _to_model_channels(img, w):
    if img.shape[0] == w.channels:
        return img, False
    if img.shape[0] == 1 and w.channels == 3:
        return np.repeat(img, 3, axis=0), True
    raise ValueError(f"image has {img.shape[0]} channels, weights expect {w.channels}")


def denoise_image(img, w, engine_cfg):
    """Denoise an image of any supported channel count; returns (estimate, result)."""
    x, gray = _to_model_channels(img, w)
    res = denoise(x, w, engine_cfg)
    est = res.estimate.mean(axis=0, keepdims=True) if gray else res.estimate
    return est, res


def cmd_add_noise(args):
    cfg = _resolve(args, [("noise", args.noise), ("seed", str(args.seed))])
    _print_config(cfg)
    img = io.load_image(args.input)
    spec = NoiseSpec.parse(args.noise, args.seed)
    io.save_image(spec.apply(img), args.output)
    return EXIT_OK


def cmd_denoise(args):
    extra = []
    if args.stop:
        extra.append(("engine.stop_mode", STOP_FLAGS[args.stop]))
    if args.kappa is not None:
        extra.append(("engine.kappa", str(args.kappa)))
    if args.T is not None:
        extra.append(("engine.max_iterations", str(args.T)))
    if args.trace:
        extra.append(("engine.trace_level", "full"))
    cfg = _resolve(args, extra)
    _print_config(cfg)
    w = io.load_weights(args.weights)
    img = io.load_image(args.input)
    est, res = denoise_image(img, w, cfg.engine)
    io.save_image(est, args.output)
    if args.trace:
        dump_trace(res, args.trace, io.save_image)
    print(f"iterations_used {res.iterations_used}")
    print(f"stop_reason {res.stop_reason}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args)
    _print_config(cfg)
    tc = cfg.train
    out = args.out

    def checkpoint(w, step):
        io.save_weights(w, f"{out}.step{step}")

    init = io.load_weights(args.init) if args.init else None
    result = train(args.data, tc, weights=init, checkpoint=checkpoint)
    io.save_weights(result.weights, out)
    log_path = args.log or os.path.splitext(out)[0] + "_log.csv"
    with open(log_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "loss", "wall_ms"])
        for step, loss, ms in result.log:
            wr.writerow([step, f"{loss:.8f}", f"{ms:.1f}"])
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def _collect(path):
    if os.path.isdir(path):
        return {name: os.path.join(path, name) for name in io.list_pngs(path)}
    return {os.path.basename(path): path}


def cmd_eval(args):
    preds, refs = _collect(args.pred), _collect(args.ref)
    if os.path.isfile(args.pred) and os.path.isfile(args.ref):
        pairs = [(os.path.basename(args.pred), args.pred, args.ref)]
    else:
        common = sorted(set(preds) & set(refs))
        if not common:
            raise ValueError("no prediction/reference files share a name")
        pairs = [(n, preds[n], refs[n]) for n in common]
    report = evaluate((n, io.load_image(p), io.load_image(r)) for n, p, r in pairs)
    write_report_csv(report, args.report)
    for name, p, s in report.rows:
        print(f"{name}\tPSNR {p:.4f}\tSSIM {s:.6f}")
    print(f"mean\tPSNR {report.psnr_db:.4f}\tSSIM {report.ssim:.6f}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _resolve(args)
    _print_config(cfg)
    w = io.load_weights(args.weights)
    images = io.load_dataset(args.data)
    if not images:
        raise ValueError(f"{args.data}: no PNG images found")
    dataset = os.path.basename(os.path.normpath(args.data))
    rows, csv_rows = [], []
    for noise_text in cfg.suite:
        spec = NoiseSpec.parse(noise_text, cfg.seed)
        results, ps, ss, ps_in = [], [], [], []
        for i, (name, img) in enumerate(images):
            noisy = spec.apply(img, stream=i)
            est, res = denoise_image(noisy, w, cfg.engine)
            results.append(res)
            ps.append(psnr(est, img))
            ss.append(ssim(est, img))
            ps_in.append(psnr(noisy, img))
        stats = iteration_stats(results)
        rows.append((str(spec), dataset, float(np.mean(ps)), float(np.mean(ss))))
        csv_rows.append([str(spec), dataset, f"{np.mean(ps):.4f}", f"{np.mean(ss):.6f}",
                         f"{np.mean(ps_in):.4f}", f"{stats['mean']:.3f}", stats["min"], stats["max"],
                         stats["stop_reasons"].get("confidence_converged", 0),
                         stats["stop_reasons"].get("max_reached", 0)])
        print(f"{spec}: PSNR {np.mean(ps):.2f} SSIM {np.mean(ss):.4f} "
              f"(noisy {np.mean(ps_in):.2f}) iterations mean {stats['mean']:.2f} "
              f"[{stats['min']}, {stats['max']}] {stats['stop_reasons']}")
    report = args.report or "bench_report.csv"
    with open(report, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["noise", "dataset", "psnr_db", "ssim", "noisy_psnr_db", "iterations_mean",
                     "iterations_min", "iterations_max", "converged", "max_reached"])
        wr.writerows(csv_rows)
    md = os.path.splitext(report)[0] + ".md"
    with open(md, "w") as fh:
        fh.write(table_rows_markdown(rows))
    print(f"wrote {report} and {md}")
    return EXIT_OK


def cmd_param_count(args):
    cfg = _resolve(args)
    _print_config(cfg)
    print(param_count(cfg.train.hidden_width, cfg.train.kernel_size, 3))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="idf", description="Iterative per-pixel kernel denoiser")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", type=_set_pair, metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("add-noise", help="corrupt an image with synthetic noise")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--noise", required=True, help="kind:value, e.g. gaussian:25")
    sp.add_argument("--seed", type=int, default=0)
    common(sp, config=False)
    sp.set_defaults(func=cmd_add_noise)

    sp = sub.add_parser("denoise", help="denoise one PNG")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--stop", choices=sorted(STOP_FLAGS))
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--T", type=int)
    sp.add_argument("--trace", help="directory for per-iteration dumps")
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("train", help="train weights on a directory of clean PNGs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="training log CSV (default <out>_log.csv)")
    sp.add_argument("--init", help="start from these weights")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM of predictions against references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--report", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="noise-suite sweep with iteration statistics")
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--suite", dest="config", help="suite/run config file")
    sp.add_argument("--report", help="CSV path (a .md table is written alongside)")
    sp.add_argument("--set", action="append", type=_set_pair, metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("param-count", help="print the trainable parameter count")
    common(sp)
    sp.set_defaults(func=cmd_param_count)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, io.ImageFormatError) as e:
        # an unreadable or unsupported image file is an I/O failure
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
