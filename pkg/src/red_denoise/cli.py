"""``red-denoise`` command line: simulate, train, denoise, eval, sweep-depth.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every subcommand prints its resolved configuration as ``key=value`` lines on
stdout before doing any work.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import plotting
from .checkpoint import checkpoint_id, load_checkpoint
from .ct_sim import DEFAULT_FIELD_OF_VIEW, make_pair
from .errors import DivergedError, InvalidConfig
from .fileio import ManifestEntry, load_rtf, read_pgm, save_rtf, sniff_format, write_manifest, write_pgm
from .metrics import Evaluation, evaluate, worker_count
from .model import denoise
from .training import load_config, train

log = logging.getLogger("red_denoise")

SWEEP_COLUMNS = ("layers", "SSIM", "RMSE", "PSNR", "seconds")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _print_config(pairs) -> None:
    for key, value in pairs:
        print(f"{key}={'' if value is None else value}")
    sys.stdout.flush()


def _file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _load_train_config(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return load_config(path)
    except InvalidConfig as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> None:
    if args.count < 0 or args.size < 1 or args.views < 1 or not args.photons > 0:
        raise UsageError("count must be >= 0; size, views and photons must be positive")
    _print_config(
        [("out", args.out), ("count", args.count), ("size", args.size), ("views", args.views),
         ("photons", args.photons), ("seed", args.seed), ("field_of_view", args.field_of_view)]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, first = [], None
    for i in range(args.count):
        seed = args.seed + i
        clean, noisy = make_pair(seed, args.size, args.views, args.photons, field_of_view=args.field_of_view)
        paths = []
        for kind, img in (("clean", clean), ("noisy", noisy)):
            stem = out / f"pair_{i:04d}_{kind}"
            # the manifest points at the float originals; the PGMs are for viewing and interchange
            save_rtf(stem.with_suffix(".rtf"), img)
            write_pgm(stem.with_suffix(".pgm"), img)
            paths.append(stem.with_suffix(".rtf"))
        entries.append(ManifestEntry(seed, args.photons, args.views, *paths))
        first = first or (clean, noisy)
    write_manifest(out / "manifest.tsv", entries)
    if first is not None:
        plotting.image_strip(first, ["clean", "low dose"], out / "preview.png")
    log.info("wrote %d pairs to %s", args.count, out)


def _report_text(evaluation: Evaluation, ckpt_id: str, manifest_id: str) -> str:
    return evaluation.format() + f"#checkpoint\t{ckpt_id}\n#manifest\t{manifest_id}\n"


def _evaluate_checkpoint(model_path, manifest, out_path) -> Evaluation:
    model = load_checkpoint(model_path)
    ckpt_id = checkpoint_id(Path(model_path).read_bytes())
    ev = evaluate(manifest, lambda x: denoise(model, x), {"checkpoint": ckpt_id})
    out_path = Path(out_path)
    _write_text(out_path, _report_text(ev, ckpt_id, _file_id(manifest)))
    plotting.evaluation_figure(ev, out_path.with_suffix(".png"))
    return ev


def _train_into(config, out_dir):
    def progress(rec):
        if rec.iteration % 100 == 0 or rec.iteration == config.iterations:
            log.info("iter %d  total %.6g  mse %.6g  per %.6g", rec.iteration, rec.total, rec.mse, rec.perceptual)

    _, history = train(config, out_dir, progress=progress)
    plotting.loss_curve(history, Path(out_dir) / "loss.png")
    return history


def cmd_train(args) -> None:
    config = _load_train_config(args.config)
    if config.manifest is None:
        raise UsageError(f"{args.config}: no manifest= entry")
    _print_config([("out", args.out)] + config.items())
    _train_into(config, args.out)


def cmd_denoise(args) -> None:
    _print_config([("model", args.model), ("in", args.input), ("out", args.output)])
    model = load_checkpoint(args.model)
    if sniff_format(args.input) == "pgm":
        image, maxval = read_pgm(args.input)
        write_pgm(args.output, denoise(model, image), maxval)
    else:
        image = load_rtf(args.input)
        squeeze = image.ndim == 2
        out = denoise(model, image[None] if squeeze else image)
        save_rtf(args.output, out[0] if squeeze else out)


def cmd_eval(args) -> None:
    _print_config([("model", args.model), ("manifest", args.manifest), ("out", args.out), ("workers", worker_count())])
    ev = _evaluate_checkpoint(args.model, args.manifest, args.out)
    _summarise(ev)


def _summarise(ev: Evaluation) -> None:
    for name, report in (("denoised", ev.denoised), ("noisy", ev.noisy)):
        mean = report.mean()
        if mean is not None:
            log.info("%s: SSIM %.4f  RMSE %.5f  PSNR %.2f dB", name, mean["ssim"], mean["rmse"], mean["psnr_db"])


def parse_layers(text: str) -> list[int]:
    try:
        layers = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--layers expects comma-separated integers, got {text!r}") from None
    if not layers:
        raise UsageError("--layers is empty")
    bad = [n for n in layers if n < 2 or n % 2]
    if bad:
        raise UsageError(f"layer counts must be even and >= 2, got {bad}")
    return layers


def _fmt(x: float) -> str:
    return repr(float(x))


def sweep_table(rows, baseline) -> str:
    lines = ["\t".join(SWEEP_COLUMNS)]
    for layers, ssim, rmse, psnr, seconds in rows:
        lines.append(f"{layers}\t{_fmt(ssim)}\t{_fmt(rmse)}\t{_fmt(psnr)}\t{seconds:.1f}")
    if baseline is not None:
        lines.append(f"#noisy\t{_fmt(baseline['ssim'])}\t{_fmt(baseline['rmse'])}\t{_fmt(baseline['psnr_db'])}\t")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> None:
    layers = parse_layers(args.layers)
    base = _load_train_config(args.config)
    eval_manifest = Path(args.eval_manifest) if args.eval_manifest else base.manifest
    if eval_manifest is None:
        raise UsageError("no evaluation manifest: pass --eval-manifest or set manifest= in the config")
    try:
        configs = [base.replace(num_layers=n) for n in layers]
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None
    _print_config(
        [("out", args.out), ("layers", ",".join(map(str, layers))), ("eval_manifest", eval_manifest),
         ("parallel", args.parallel)] + [kv for kv in base.items() if kv[0] != "num_layers"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(config):
        run_dir = out / f"layers_{config.red.num_layers:02d}"
        start = time.perf_counter()
        history = _train_into(config, run_dir)
        seconds = time.perf_counter() - start
        ev = _evaluate_checkpoint(run_dir / "model.rdck", eval_manifest, run_dir / "report.tsv")
        log.info("layers %d done in %.1fs", config.red.num_layers, seconds)
        return ev, seconds, history.patch_digest

    if args.parallel and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=min(len(configs), worker_count())) as pool:
            results = list(pool.map(one, configs))
    else:
        results = [one(c) for c in configs]

    digests = {d for _, _, d in results}
    if len(digests) != 1:
        raise RuntimeError(f"depths saw different patch sequences: {sorted(digests)}")
    rows = []
    for n, (ev, seconds, _) in zip(layers, results):
        mean = ev.denoised.mean()
        if mean is None:
            raise RuntimeError(f"layers {n}: no image could be evaluated")
        rows.append((n, mean["ssim"], mean["rmse"], mean["psnr_db"], seconds))
    baseline = results[0][0].noisy.mean()
    _write_text(out / "sweep.tsv", sweep_table(rows, baseline))
    plotting.sweep_figure(rows, baseline, out / "sweep.png")
    for row in rows:
        log.info("layers %d: SSIM %.4f  RMSE %.5f  PSNR %.2f dB", *row[:4])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="red-denoise", description="Residual encoder-decoder denoising for simulated low-dose CT.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write phantom / low-dose reconstruction pairs and a manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of pairs")
    p.add_argument("--size", type=int, default=64, help="image side N (>= 32)")
    p.add_argument("--views", type=int, default=90, help="projection angles over 180 degrees")
    p.add_argument("--photons", type=float, default=1e4, help="incident photons per ray, N0")
    p.add_argument("--seed", type=int, default=0, help="seed of pair 0; pair i uses seed + i")
    p.add_argument("--field-of-view", type=float, default=DEFAULT_FIELD_OF_VIEW,
                   help="image width in attenuation lengths")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one PGM or RTF1 image")
    p.add_argument("--model", required=True, help="RDCK1 checkpoint")
    p.add_argument("--in", dest="input", required=True, help="PGM or RTF1 image")
    p.add_argument("--out", dest="output", required=True, help="written in the input's format")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--model", required=True, help="RDCK1 checkpoint")
    p.add_argument("--manifest", required=True, help="pair manifest to score")
    p.add_argument("--out", required=True, help="report TSV; the figure goes next to it as .png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-depth", help="train and evaluate one model per layer count")
    p.add_argument("--layers", default="4,8,12", help="comma-separated even layer counts")
    p.add_argument("--config", required=True, help="shared training config")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--eval-manifest", help="held-out pairs (default: the training manifest)")
    p.add_argument("--parallel", action="store_true", help="train depths concurrently")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"red-denoise: error: {exc}", file=sys.stderr)
        return 1
    except DivergedError as exc:
        where = f"; last checkpoint {exc.checkpoint}" if exc.checkpoint else ""
        print(f"red-denoise: training diverged: {exc}{where}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"red-denoise: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
