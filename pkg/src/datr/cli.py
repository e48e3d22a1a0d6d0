"""Command-line entry point: gen-synth, train, evaluate, predict, transfer.

Every command accepts ``--config FILE`` (plain ``key=value`` lines whose keys
are the long option names with ``_`` for ``-``); options given on the command
line win over the file. The effective configuration is written to
``<out>/config.txt`` before any work starts.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datasets import (DataError, gen_synthetic, load_dataset, load_root, read_image,
                       save_dataset, synthetic_spec, write_labels)
from .layers import resize_bilinear
from .model import DATR, LandmarkSet, decode_batch, rescale_coords
from .numerics import ContractError, NumericError, Tensor, no_grad
from .params import SHARED
from .trainer import TrainConfig, Trainer, evaluate, transfer

__all__ = ["main", "build_parser", "read_config", "UsageError"]

log = logging.getLogger("datr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Defaults live here rather than in argparse so that "not given" is
# distinguishable from "given with the default value" when merging a config file.
DEFAULTS = {
    "common": {"seed": 0, "preset": "toy", "force": False},
    "gen-synth": {"domains": 2, "per_domain": 20, "size": 64, "landmarks": "3,5,4",
                  "val_fraction": 0.2, "test_count": 0},
    "train": {"epochs": 100, "max_steps": None, "batch_size": 8, "lr_low": 1e-4, "lr_high": 5e-3,
              "sigma": 3.0, "input_size": 64, "aux_guidance": False, "resume": False},
    "evaluate": {"split": "test"},
    "predict": {"export_heatmaps": False},
    "transfer": {"epochs": 100, "max_steps": None, "batch_size": 8, "lr_low": 1e-4, "lr_high": 5e-3,
                 "sigma": 3.0, "donor": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="datr", description="Multi-domain anatomical landmark detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key=value file; command-line options win")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=["toy", "paper"])
        sp.add_argument("--force", action="store_const", const=True, help="overwrite a non-empty --out")

    def schedule(sp):
        sp.add_argument("--epochs", type=_positive_int)
        sp.add_argument("--max-steps", type=_positive_int)
        sp.add_argument("--batch-size", type=_positive_int)
        sp.add_argument("--lr-low", type=float)
        sp.add_argument("--lr-high", type=float)
        sp.add_argument("--sigma", type=float)

    sp = sub.add_parser("gen-synth", help="write a synthetic multi-domain dataset")
    common(sp)
    sp.add_argument("--domains", type=_positive_int)
    sp.add_argument("--per-domain", type=_positive_int, help="train+val images per domain")
    sp.add_argument("--size", type=_positive_int)
    sp.add_argument("--landmarks", help="comma list of landmark counts, cycled over domains")
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--test-count", type=int)

    sp = sub.add_parser("train", help="train on every domain under --data")
    common(sp)
    schedule(sp)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--input-size", type=_positive_int)
    sp.add_argument("--aux-guidance", type=_bool, metavar="BOOL")
    sp.add_argument("--resume", action="store_const", const=True, help="continue from <out>/last.ckpt")

    sp = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    common(sp)
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--split", choices=["train", "val", "test"])

    sp = sub.add_parser("predict", help="predict landmarks for images")
    common(sp)
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--domain")
    sp.add_argument("--export-heatmaps", action="store_const", const=True)
    sp.add_argument("inputs", nargs="*", type=Path, help="image files or directories")

    sp = sub.add_parser("transfer", help="adapt a trained checkpoint to a new domain")
    common(sp)
    schedule(sp)
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--data", type=Path, help="dataset root containing the new domain")
    sp.add_argument("--domain", help="new domain name (directory under --data)")
    sp.add_argument("--donor", help="existing domain to copy initial values from")
    return p


def read_config(path: Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from --config, then from DEFAULTS."""
    file_cfg = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        file_cfg = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {**DEFAULTS["common"], **DEFAULTS[args.command]}
    for key, raw in file_cfg.items():
        if key in ("command", "verbose"):
            continue  # lets an echoed config.txt be fed back in
        if key not in actions or key in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if getattr(args, key) is not None and getattr(args, key) != []:
            continue
        action = actions[key]
        if action.const is True:
            value = _bool(raw)
        elif action.nargs == "*":
            value = [Path(v) for v in raw.split(",") if v]
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: {key}: {exc}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
        setattr(args, key, value)
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _prepare_out(args, keep_existing: bool = False) -> Path:
    out = args.out
    if out.exists() and any(out.iterdir()) and not (args.force or keep_existing):
        raise UsageError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(args, out: Path) -> None:
    skip = {"config", "verbose"}
    lines = [f"command={args.command}"]
    for key in sorted(vars(args)):
        if key in skip or key == "command":
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={'' if value is None else value}")
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _train_config(args, input_size: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_low=args.lr_low, lr_high=args.lr_high,
        max_steps=args.max_steps, seed=args.seed, sigma=args.sigma,
        input_size=input_size or args.input_size, preset=args.preset,
        aux_guidance=getattr(args, "aux_guidance", False),
    )


# ---------------------------------------------------------------- commands

def cmd_gen_synth(args) -> int:
    _require(args, "out")
    out = _prepare_out(args)
    _echo_config(args, out)
    try:
        counts = [int(v) for v in str(args.landmarks).split(",")]
    except ValueError:
        raise UsageError(f"--landmarks must be a comma list of integers, got {args.landmarks!r}") from None
    if any(c < 1 for c in counts):
        raise UsageError("--landmarks entries must be >= 1")
    offset = 0
    for k in range(args.domains):
        n = counts[k % len(counts)]
        spec = synthetic_spec(f"syn{k}", n)
        manifest = gen_synthetic(spec, args.per_domain, seed=args.seed * 1000 + k, size=args.size,
                                 val_fraction=args.val_fraction, test_count=args.test_count,
                                 motif_offset=offset)
        offset += n
        save_dataset(manifest, out)
        c = manifest.counts()
        print(f"{spec.name}: landmarks={n} train={c['train']} val={c['val']} test={c['test']}")
    return EXIT_OK


def _write_log(trainer: Trainer, path: Path) -> None:
    names = sorted({d for row in trainer.history for d in row["val_loss"]})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "train_loss", *[f"val_{n}" for n in names], "val_total"])
        for row in trainer.history:
            w.writerow([row["epoch"], row["steps"], repr(row["lr"]), repr(row["train_loss"]),
                        *[repr(row["val_loss"].get(n, float("nan"))) for n in names], repr(row["val_total"])])


def cmd_train(args) -> int:
    _require(args, "data", "out")
    out = _prepare_out(args, keep_existing=args.resume)
    _echo_config(args, out)
    manifests = load_root(args.data)
    specs = [m.spec for m in manifests]
    config = _train_config(args)
    for m in manifests:
        if not m["train"] or not m["val"]:
            raise DataError(f"domain {m.name!r} needs non-empty train and val splits")
    if args.resume:
        last_path = out / "last.ckpt"
        if not last_path.is_file():
            raise UsageError(f"--resume: {last_path} not found")
        last = load_checkpoint(last_path)
        best = load_checkpoint(out / "best.ckpt") if (out / "best.ckpt").is_file() else None
        model = last.build_model()
        trainer = Trainer(model, config, manifests)
        trainer.resume_from(last, best)
        print(f"resuming at epoch {trainer.epoch}, step {trainer.step}")
    else:
        model = DATR(config.model_config(), specs, seed=config.seed)
        trainer = Trainer(model, config, manifests)

    def on_epoch(tr: Trainer, row: dict) -> None:
        _write_log(tr, out / "log.csv")
        save_checkpoint(tr.checkpoint(specs, best=False), out / "last.ckpt")
        save_checkpoint(tr.checkpoint(specs, best=True), out / "best.ckpt")
        print(f"epoch {row['epoch']:4d}  step {row['steps']:5d}  lr {row['lr']:.2e}  "
              f"train {row['train_loss']:.5f}  val {row['val_total']:.5f}")

    trainer.fit(on_epoch)
    if not trainer.history:
        print("nothing to do: the epoch/step budget is already spent")
        return EXIT_OK
    _write_log(trainer, out / "log.csv")
    save_checkpoint(trainer.checkpoint(specs, best=True), out / "best.ckpt")
    print(f"best epoch {trainer.best['epoch']} (val loss {trainer.best['val_total']:.5f}) -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "ckpt", "data")
    ckpt = load_checkpoint(args.ckpt)
    manifests = load_root(args.data)
    known = {d.name for d in ckpt.domains}
    for m in manifests:
        if m.name not in known:
            raise DataError(f"domain {m.name!r} is in the data but not in checkpoint {args.ckpt}")
    model = ckpt.build_model()
    report = evaluate(model, manifests, args.split)
    if not report.domains:
        raise DataError(f"no samples in split {args.split!r}")
    text = report.to_text()
    print(text, end="")
    if args.out is not None:
        out = _prepare_out(args, keep_existing=True)
        _echo_config(args, out)
        (out / f"report_{args.split}.txt").write_text(text)
        (out / f"report_{args.split}.kv").write_text(report.to_kv())
    return EXIT_OK


def _collect_images(inputs: list[Path]) -> list[Path]:
    files = []
    for p in inputs:
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".pgm"))
        else:
            files.append(p)
    return files


def _export_map(arr: np.ndarray, path: Path) -> tuple[float, float]:
    """Min-max scale to 8 bits; returns the (min, max) needed to invert."""
    lo, hi = float(arr.min()), float(arr.max())
    scale = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    Image.fromarray(np.round(scale * 255).astype(np.uint8)).save(path)
    return lo, hi


def _overlay(image: np.ndarray, coords: np.ndarray, path: Path) -> None:
    g = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    H, W = g.shape
    for r, c in np.round(coords).astype(int):
        for dr in range(-2, 3):
            for rr, cc in ((r + dr, c), (r, c + dr)):
                if 0 <= rr < H and 0 <= cc < W:
                    rgb[rr, cc] = (255, 0, 0)
    Image.fromarray(rgb).save(path)


def cmd_predict(args) -> int:
    _require(args, "ckpt", "domain", "out", "inputs")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    model.check_domain(args.domain)
    out = _prepare_out(args, keep_existing=True)
    _echo_config(args, out)
    S = model.config.input_size
    dtype = next(iter(model.store.values())).dtype
    files = _collect_images(args.inputs)
    if not files:
        raise DataError("no input images found")
    for path in files:
        image = read_image(path)
        H, W = image.shape
        x = resize_bilinear(Tensor(image[None, :, :, None], dtype=np.float64), S, S).data.astype(dtype)
        with no_grad():
            fused, fine, guide = model.forward(x, args.domain, "eval")
        coords = rescale_coords(decode_batch(fused.data)[0], (S, S), (H, W))
        write_labels(LandmarkSet(coords, H, W), out / f"{path.stem}.csv")
        if args.export_heatmaps:
            lines = [f"# {path.name}: heatmaps at model geometry {S}x{S}; value = min + pixel/255 * (max - min)",
                     "file,min,max"]
            maps = {"fused": fused.data[0], "fine": fine.data[0]}
            if guide is not None:
                maps["guide"] = guide.data[0]
            for kind, stack in maps.items():
                for n in range(stack.shape[-1]):
                    name = f"{path.stem}_{kind}_{n + 1:02d}.png"
                    lo, hi = _export_map(stack[..., n], out / name)
                    lines.append(f"{name},{lo!r},{hi!r}")
            (out / f"{path.stem}_heatmaps.txt").write_text("\n".join(lines) + "\n")
            _overlay(image, coords, out / f"{path.stem}_overlay.png")
        print(f"{path.name}: {len(coords)} landmarks -> {out / (path.stem + '.csv')}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    _require(args, "ckpt", "data", "domain", "out")
    out = _prepare_out(args)
    _echo_config(args, out)
    base = load_checkpoint(args.ckpt)
    if any(d.name == args.domain for d in base.domains):
        raise UsageError(f"domain {args.domain!r} already exists in {args.ckpt}")
    manifest = load_dataset(args.data, name=args.domain)
    if not manifest["train"] or not manifest["val"]:
        raise DataError(f"domain {args.domain!r} needs non-empty train and val splits")
    config = _train_config(args, input_size=base.config.input_size)
    base_model = base.build_model()
    frozen = base_model.store.count(SHARED)
    checksum = base_model.store.checksum(SHARED)

    def on_epoch(tr: Trainer, row: dict) -> None:
        _write_log(tr, out / "log.csv")
        print(f"epoch {row['epoch']:4d}  step {row['steps']:5d}  train {row['train_loss']:.5f}  "
              f"val {row['val_total']:.5f}")

    ckpt, trainer = transfer(base, manifest.spec, manifest, config, donor=args.donor, on_epoch=on_epoch)
    trainable = trainer.model.store.count(f"domain/{args.domain}")
    print(f"frozen parameters: {frozen}  trainable parameters: {trainable}")
    after = trainer.model.store.checksum(SHARED)
    if after != checksum:
        raise NumericError("shared parameters changed during transfer")
    print(f"shared checksum {after}")
    save_checkpoint(ckpt, out / "best.ckpt")
    _write_log(trainer, out / "log.csv")
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "transfer": cmd_transfer}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args = _resolve(parser, args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ContractError, KeyError, OSError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
