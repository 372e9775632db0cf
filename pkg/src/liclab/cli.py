"""Command-line entry point: ``liclab <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
compatibility error, 3 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import analysis as A
from . import codec as C
from . import coder
from .adapters import ConfigurationError, load_adapters, save_adapters
from .config import LabConfig, dump_config, load_config
from .datagen import DomainKind, DomainSpec, generate, load_folder, read_ppm, write_ppm
from .serialization import CompatibilityError, FormatError
from .tensor import DimensionError
from .trainer import adapt, write_history

log = logging.getLogger("liclab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_PRETRAIN_LAMBDA = 0.0067
SOURCE_COUNT, SOURCE_SIZE = 256, 128


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _claim(path, force: bool) -> Path:
    """Refuse to overwrite an existing output unless ``force``."""
    path = Path(path)
    if path.exists() and not force:
        if path.is_dir() and not any(path.iterdir()):
            return path
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".config.yaml")


def _resolve(args) -> LabConfig:
    overrides = {
        "seed": args.seed,
        "lmbda": args.lmbda,
        "n_samples": args.n_samples,
        "structure": args.structure,
        "rank": args.rank,
    }
    for key in ("data", "domain", "count", "epochs"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    cfg = load_config(args.config, overrides)
    log.info("resolved config (seed %d): %s", cfg.seed, json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _images(cfg: LabConfig, count: int, seed_offset: int = 0) -> np.ndarray:
    if cfg.data:
        imgs = load_folder(cfg.data, limit=count)
        if len(imgs) < count:
            raise FileNotFoundError(f"{cfg.data} holds {len(imgs)} images, {count} needed")
        return imgs
    spec = DomainSpec(cfg.domain, DomainKind.parse(cfg.domain), cfg.seed + seed_offset, cfg.image_size, cfg.cell)
    return generate(spec, count)


def _load_model(path) -> C.CodecModel:
    return C.CodecModel.load(path)


def _load_adapters(path, model: C.CodecModel):
    if path is None:
        return None
    return load_adapters(Path(path).read_bytes(), model=model)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    out = _claim(args.out, args.force)
    lmbda = cfg.lmbda if cfg.lmbda is not None else DEFAULT_PRETRAIN_LAMBDA
    if cfg.data:
        imgs = load_folder(cfg.data)
        size = min(min(i.shape[1:]) for i in imgs)
        images = np.stack([i[:, :size, :size] for i in imgs])
    else:
        images = generate(DomainSpec("smooth-natural", DomainKind.SMOOTH_NATURAL, cfg.seed, SOURCE_SIZE), SOURCE_COUNT)
    history: list[dict] = []
    model = C.pretrain_baseline(
        images, lmbda, cfg.pretrain_steps, seed=cfg.seed, patch=cfg.pretrain_patch, lr=cfg.pretrain_lr, history=history
    )
    model.save(out)
    if history:
        with open(out.with_name(out.name + ".history.csv"), "w") as fh:
            fh.write("step,loss,bpp,mse\n")
            for row in history:
                fh.write(f"{row['step']},{row['loss']:.9g},{row['bpp']:.9g},{row['mse']:.9g}\n")
    dump_config(_sidecar(out), cfg, {"command": "pretrain", "lambda": lmbda, "model_id": f"{model.model_id:016x}"})
    print(f"model {model.model_id:016x} -> {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    out = _claim(args.out, args.force)
    model = _load_model(args.model)
    lmbda = cfg.lmbda if cfg.lmbda is not None else model.lmbda
    if lmbda is None:
        raise ConfigurationError("model carries no lambda; pass --lambda")
    samples = _images(cfg, cfg.n_samples, seed_offset=1)
    aset, report = adapt(model, samples, cfg.n_samples, lmbda, cfg.seed, cfg.adapt_config(), domain_name=cfg.domain)
    out.write_bytes(save_adapters(aset))
    write_history(out.with_name(out.name + ".history.csv"), report.history)
    summary = report.summary() | {"adapter_id": f"{aset.adapter_id:016x}", "model_id": f"{model.model_id:016x}"}
    out.with_name(out.name + ".report.json").write_text(json.dumps(summary, indent=2))
    dump_config(_sidecar(out), cfg, {"command": "adapt", "lambda": lmbda, "model": str(args.model)})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_encode(args) -> int:
    out = _claim(args.out, args.force)
    model = _load_model(args.model)
    adapters = _load_adapters(args.adapters, model)
    img = read_ppm(args.input)
    bs = coder.encode_image(model, adapters, img)
    out.write_bytes(bs.to_bytes())
    print(f"{bs.num_bytes} bytes, {bs.bpp():.4f} bpp -> {out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    out = _claim(args.out, args.force)
    model = _load_model(args.model)
    adapters = _load_adapters(args.adapters, model)
    bs = coder.Bitstream.from_bytes(Path(args.input).read_bytes())
    x_hat = coder.decode_image(model, adapters, bs)
    write_ppm(out, np.clip(x_hat, 0.0, 1.0))
    print(f"{bs.width}x{bs.height} -> {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    out = _claim(args.out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(args.model)
    adapters = _load_adapters(args.adapters, model)
    images = _images(cfg, cfg.count, seed_offset=2)
    frozen = A.channel_stats(model, None, images)
    A.write_channel_stats_csv(out / "channels_frozen.csv", frozen)
    report = {"images": len(images), "bottom_half_energy_frozen": frozen.bottom_half_energy()}
    stats = frozen
    if adapters is not None:
        stats = A.channel_stats(model, adapters, images, reference=frozen)
        A.write_channel_stats_csv(out / "channels_adapted.csv", stats)
        report["bottom_half_energy_adapted"] = float(stats.energy[frozen.bottom_half()].sum())
    half = len(frozen.order) // 2
    for i, img in enumerate(images[: min(4, len(images))]):
        A.export_spectrum_pgm(out / f"spectrum_{i:02d}.pgm", img)
        he = A.reconstruct_from_channels(model, adapters, img, frozen.order[:half])
        le = A.reconstruct_from_channels(model, adapters, img, frozen.order[half:])
        A.export_signed_ppm(out / f"high_energy_{i:02d}.ppm", he)
        A.export_signed_ppm(out / f"low_energy_{i:02d}.ppm", le)
        report.setdefault("low_energy_mean_abs", []).append(float(np.abs(le).mean()))
    (out / "report.json").write_text(json.dumps(report, indent=2))
    dump_config(out / "config.yaml", cfg, {"command": "analyze", "model": str(args.model)})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_bdrate(args) -> int:
    anchor = A.read_rd_csv(args.anchor)
    test = A.read_rd_csv(args.test)
    value = A.bd_rate(anchor, test)
    print(f"BD-rate: {value:.2f}%")
    if args.out:
        out = _claim(args.out, args.force)
        A.write_bd_report(out, [{"anchor": anchor.label, "test": test.label, "bd_rate_percent": f"{value:.6f}"}])
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _claim(args.out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    spec = DomainSpec(cfg.domain, DomainKind.parse(cfg.domain), cfg.seed, args.size or cfg.image_size, cfg.cell)
    images = generate(spec, cfg.count)
    for i, img in enumerate(images):
        write_ppm(out / f"{spec.kind.value}_{i:04d}.ppm", img)
    dump_config(out / "config.yaml", cfg, {"command": "gen-data"})
    print(f"{len(images)} images -> {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(verbose=True) else EXIT_USAGE


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lmbda", type=float)
    common.add_argument("--n-samples", type=int)
    common.add_argument("--structure")
    common.add_argument("--rank", type=int)
    common.add_argument("--out")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = _Parser(prog="liclab", description="Few-shot domain adaptation lab for a learned image codec")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", parents=[common], help="train the base codec on source-domain images")
    p.add_argument("--data", help="folder of training images (default: generated SmoothNatural)")
    p.set_defaults(func=cmd_pretrain, need_out=True)

    p = sub.add_parser("adapt", parents=[common], help="train domain adapters for a frozen model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="folder of target-domain samples")
    p.add_argument("--domain", help="generated target domain when --data is absent")
    p.add_argument("--epochs", type=int, help="per-stage epoch budget")
    p.set_defaults(func=cmd_adapt, need_out=True)

    p = sub.add_parser("encode", parents=[common], help="compress a PPM image into a bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_encode, need_out=True)

    p = sub.add_parser("decode", parents=[common], help="reconstruct a PPM image from a bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_decode, need_out=True)

    p = sub.add_parser("analyze", parents=[common], help="channel statistics, spectra and channel reconstructions")
    p.add_argument("--model", required=True)
    p.add_argument("--adapters")
    p.add_argument("--data")
    p.add_argument("--domain")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_analyze, need_out=True)

    p = sub.add_parser("bdrate", parents=[common], help="BD-rate of a test RD curve against an anchor")
    p.add_argument("anchor")
    p.add_argument("test")
    p.set_defaults(func=cmd_bdrate, need_out=False)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic image set as PPM files")
    p.add_argument("--domain")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_gen_data, need_out=True)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    p.set_defaults(func=cmd_selftest, need_out=False)
    return parser


def _thread_limit():
    value = os.environ.get("LIC_LAB_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigurationError(f"LIC_LAB_THREADS must be an integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.need_out and not args.out:
            raise UsageError(f"{args.command} needs --out")
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except C.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        FormatError,
        CompatibilityError,
        coder.DecodeError,
        A.AnalysisError,
        DimensionError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
