"""Command-line entry point.

Subcommands: train, eval, predict, heatmap, gradcheck. Runs are driven by
an INI config file whose sections mirror RunConfig; individual values can
be overridden on the command line with repeated ``--set section.key=value``
flags (precedence: flag > file > default). Exit codes: 0 success, 1 config
validation error, 2 runtime failure, 3 gradient-check failure.

The only environment variable consulted is IDCNET_VERBOSITY
(quiet | info | debug), which controls log output.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import (PatchDataset, SplitPlan, decode_patch, make_split, normalize_image,
                   scan_dataset)
from .gradcheck import WIDE_TOLERANCE, run_layer_checks
from .heatmap import (assemble_slide, gaussian_smooth, render_overlay, render_raw_heatmap,
                      save_image, write_sidecar)
from .metrics import evaluation_report, roc_auc, write_report, write_roc_csv
from .model import MAXPOOL, InceptionBlockSpec, ModelConfig, build_model
from .optim import TrainConfig
from .tensor import Tensor
from .train import train

log = logging.getLogger("idcnet")


class ConfigError(ValueError):
    """Invalid run configuration; reported before any output is written."""


@dataclass
class RunConfig:
    # [run]
    seed: int = 0
    output_dir: str = "runs/latest"
    # [data]
    data_root: str = ""
    train_size: int | None = None
    val_size: int | None = None
    train_frac: float | None = None
    val_frac: float | None = None
    patient_level: bool = False
    cache_limit: int = 4096
    # [model]
    blocks: str = "64,64,P,128,128,P,256,256,P,512,512"
    dense_width: int = 512
    dropout: float = 0.4
    input_size: int = 50
    # [train]
    batch_size: int = 32
    lr_init: float = 1e-3
    lr_min: float = 1e-10
    plateau_patience: int = 10
    lr_factor: float = 0.5
    early_stop_patience: int = 50
    max_epochs: int = 1000
    # [metrics]
    threshold: float = 0.5
    # [heatmap]
    kernel_size: int = 25
    sigma: float | None = None
    alpha: float = 0.4

    _SECTIONS = {
        "run": ("seed", "output_dir"),
        "data": ("data_root", "train_size", "val_size", "train_frac", "val_frac",
                 "patient_level", "cache_limit"),
        "model": ("blocks", "dense_width", "dropout", "input_size"),
        "train": ("batch_size", "lr_init", "lr_min", "plateau_patience", "lr_factor",
                  "early_stop_patience", "max_epochs"),
        "metrics": ("threshold",),
        "heatmap": ("kernel_size", "sigma", "alpha"),
    }

    @classmethod
    def _field_types(cls) -> dict[str, type]:
        types = {}
        for f in fields(cls):
            t = f.type
            if "int" in str(t):
                types[f.name] = int
            elif "float" in str(t):
                types[f.name] = float
            elif "bool" in str(t):
                types[f.name] = bool
            else:
                types[f.name] = str
        return types

    def _assign(self, section: str, key: str, raw: str) -> None:
        if section not in self._SECTIONS or key not in self._SECTIONS[section]:
            raise ConfigError(f"unknown config entry [{section}] {key}")
        kind = self._field_types()[key]
        try:
            if kind is bool:
                value = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                value = kind(raw)
        except ValueError:
            raise ConfigError(f"config entry [{section}] {key}: cannot parse {raw!r} "
                              f"as {kind.__name__}") from None
        setattr(self, key, value)

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        cfg = cls()
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg._assign(section, key, raw)
        return cfg

    def apply_overrides(self, overrides: list[str]) -> None:
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            section, key = dotted.split(".", 1)
            self._assign(section.strip(), key.strip(), raw.strip())

    def parse_blocks(self) -> tuple:
        stages = []
        for token in self.blocks.split(","):
            token = token.strip()
            if token.upper() in ("P", "MAXPOOL"):
                stages.append(MAXPOOL)
                continue
            parts = token.split(":")
            try:
                if len(parts) == 1:
                    stages.append(InceptionBlockSpec.balanced(int(parts[0])))
                elif len(parts) == 3:
                    stages.append(InceptionBlockSpec(int(parts[0]), int(parts[1]), int(parts[2])))
                else:
                    raise ValueError
            except ValueError:
                raise ConfigError(
                    f"bad block entry {token!r}: use F, F:alpha:beta, or P"
                ) from None
        return tuple(stages)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            blocks=self.parse_blocks(),
            dense_width=self.dense_width,
            dropout_rate=self.dropout,
            input_size=self.input_size,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr_init=self.lr_init,
            lr_min=self.lr_min,
            plateau_patience=self.plateau_patience,
            lr_factor=self.lr_factor,
            early_stop_patience=self.early_stop_patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )

    def validate_for_training(self) -> None:
        try:
            self.model_config().validate()
            self.train_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not self.data_root:
            raise ConfigError("config entry [data] data_root is required for training")
        if not Path(self.data_root).is_dir():
            raise ConfigError(f"dataset root does not exist: {self.data_root}")
        if self.train_size is None and self.train_frac is None:
            raise ConfigError("config needs [data] train_size or train_frac")
        if self.val_size is None and self.val_frac is None:
            raise ConfigError("config needs [data] val_size or val_frac")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"[metrics] threshold must be in [0, 1], got {self.threshold}")


# ---------------------------------------------------------------------------
# shared helpers


def _predict_in_order(model, dataset, batch_size: int = 64) -> np.ndarray:
    """Positive-class probabilities aligned with dataset order."""
    scores = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        x = np.stack([dataset.load(i) for i in idx])
        scores.append(model.predict_proba(Tensor(x))[:, 1])
    return np.concatenate(scores)


def _resolve_record_paths(records, data_root) -> None:
    if not data_root:
        return
    root = Path(data_root)
    for i, record in enumerate(records):
        if not Path(record.path).exists():
            candidate = root / record.path
            if candidate.exists():
                records[i] = type(record)(record.patient_id, record.x, record.y,
                                          record.label, str(candidate))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = RunConfig.from_ini(args.config)
    cfg.apply_overrides(args.set or [])
    cfg.validate_for_training()

    out_dir = Path(args.output or cfg.output_dir)
    records, skipped = scan_dataset(cfg.data_root)
    if skipped:
        log.info("skipped %d non-patch files (first: %s)", len(skipped), skipped[0])
    if not records:
        raise ConfigError(f"no patch files under {cfg.data_root}")

    plan = make_split(records, seed=cfg.seed,
                      train_size=cfg.train_size, val_size=cfg.val_size,
                      train_frac=cfg.train_frac, val_frac=cfg.val_frac,
                      patient_level=cfg.patient_level)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan.save(out_dir / "split.json")
    (out_dir / "skipped_files.json").write_text(json.dumps(skipped, indent=1))

    cache = len(plan.train) + len(plan.val) <= cfg.cache_limit
    train_set = PatchDataset(plan.train, cache=cache)
    val_set = PatchDataset(plan.val, cache=cache)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    log.info("model has %d trainable parameters", model.param_count())

    result = train(model, train_set, val_set, cfg.train_config(),
                   checkpoint_path=out_dir / "best.ckpt",
                   log_path=out_dir / "train_log.jsonl")
    summary = {
        "epochs_run": len(result.records),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "stopped_early": result.stopped_early,
        "checkpoint": str(out_dir / "best.ckpt"),
    }
    print(json.dumps(summary, indent=1))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    plan = SplitPlan.load(args.split)
    records = {"train": plan.train, "val": plan.val, "test": plan.test}[args.part]
    if not records:
        raise ConfigError(f"split part {args.part!r} is empty")
    _resolve_record_paths(records, args.data)
    dataset = PatchDataset(records)
    scores = _predict_in_order(model, dataset)
    report = evaluation_report(scores, dataset.labels, threshold=args.threshold)
    report["part"] = args.part
    print(json.dumps(report, indent=1))
    if args.out:
        write_report(args.out, report)
    if args.roc_csv:
        write_roc_csv(args.roc_csv, roc_auc(scores, dataset.labels))
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    source = Path(args.input)
    if source.is_dir():
        paths = sorted(p for p in source.rglob("*.png") if p.is_file())
        if not paths:
            raise FileNotFoundError(f"no .png patches under {source}")
    elif source.is_file():
        paths = [source]
    else:
        raise FileNotFoundError(f"input does not exist: {source}")

    images = np.stack([
        normalize_image(decode_patch(p).astype(np.float32) / 255.0) for p in paths
    ])
    scores = []
    for start in range(0, len(images), 64):
        scores.append(model.predict_proba(Tensor(images[start:start + 64]))[:, 1])
    scores = np.concatenate(scores)

    out_fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh)
        writer.writerow(["path", "probability"])
        for path, score in zip(paths, scores):
            writer.writerow([str(path), f"{score:.6f}"])
    finally:
        if args.out:
            out_fh.close()
    return 0


def cmd_heatmap(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records, _ = scan_dataset(args.data)
    mine = [r for r in records if r.patient_id == args.patient]
    if not mine:
        available = sorted({r.patient_id for r in records})
        raise FileNotFoundError(
            f"no patches for patient {args.patient!r}; available: {available}"
        )
    dataset = PatchDataset(mine)
    probs = _predict_in_order(model, dataset)

    canvas = assemble_slide(mine, probs)
    field = np.where(canvas.data_mask(), canvas.probs, 0.0).astype(np.float32)
    smoothed = gaussian_smooth(field, kernel_size=args.kernel_size, sigma=args.sigma)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(out_dir / "original.png", canvas.image)
    render_raw_heatmap(canvas, out_dir / "heatmap_raw.png")
    render_overlay(canvas, smoothed, alpha=args.alpha, path=out_dir / "overlay.png")
    sidecar = write_sidecar(out_dir / "slide.json", mine, probs)
    print(json.dumps({"patient": args.patient, "out_dir": str(out_dir), **sidecar}, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_layer_checks()
    failed = 0
    for name, err in results.items():
        ok = err <= WIDE_TOLERANCE
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e} "
              f"(tolerance {WIDE_TOLERANCE:.0e})")
    if failed:
        print(f"{failed} gradient check(s) failed")
        return 3
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idcnet",
        description="Train and evaluate the batch-normalized Inception patch classifier.",
    )
    parser.add_argument("--version", action="version", version=f"idcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training protocol from a config file")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.add_argument("--output", help="output directory (overrides [run] output_dir)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a stored split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="split plan JSON")
    p.add_argument("--data", default="", help="dataset root for re-anchoring relative paths")
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="write the JSON report here as well as stdout")
    p.add_argument("--roc-csv", help="write ROC curve points as CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="emit per-patch probabilities as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="a patch file or a directory of patches")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("heatmap", help="reconstruct one patient's slide with a heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--patient", required=True)
    p.add_argument("--out-dir", default="heatmap_out")
    p.add_argument("--kernel-size", type=int, default=25)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.4)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("IDCNET_VERBOSITY", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as e:  # ConfigError and friends: nothing was written yet
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
