"""``scoped-dnas`` command line: search, retrain, params and plot."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import (
    AugmentSpec,
    BatchStream,
    ImageBatch,
    channel_stats,
    load_cifar10,
    resolve_data_dir,
    split_train_val,
    synthetic_dataset,
)
from ..engine import DivergenceError, Trajectory, retrain, run_search
from ..searchspace import (
    SCOPES,
    FinalArchitecture,
    build_resnet,
    build_supernet,
    count_params,
    format_millions,
)
from .config import KEYS, ConfigError, RunConfig, coerce, parse_config
from .plot import emit_plot_svg

log = logging.getLogger("scoped_dnas")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

SYNTHETIC_HW = 32


# artifacts ---------------------------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def metrics_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    lines = [",".join(header)]
    lines += [",".join(_cell(row[k]) for k in header) for row in rows]
    return "\n".join(lines) + "\n"


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input artifact: {path}")
    return path


# datasets ------------------------------------------------------------------------


def load_datasets(cfg: RunConfig) -> tuple[ImageBatch, ImageBatch]:
    """(training images, held-out test images) for the configured source."""
    if cfg.resolved_dataset() == "synthetic":
        test_size = max(cfg.synthetic_size // 5, cfg.num_classes)
        data = synthetic_dataset(
            cfg.num_classes, cfg.synthetic_size + test_size, SYNTHETIC_HW, cfg.seed, cfg.synthetic_noise
        )
        cut = np.arange(cfg.synthetic_size)
        return data.subset(cut), data.subset(np.arange(cfg.synthetic_size, len(data)))
    root = resolve_data_dir(cfg.data_dir or None)
    if root is None:
        raise FileNotFoundError("no CIFAR-10 directory: pass --data-dir or set SCOPED_DNAS_DATA")
    train = load_cifar10(root, train=True)
    test = load_cifar10(root, train=False)
    if cfg.subset and cfg.subset < len(train):
        pick = np.sort(np.random.default_rng([cfg.seed, 7]).permutation(len(train))[: cfg.subset])
        train = train.subset(pick)
    return train, test


def _augment_spec(cfg: RunConfig, images: np.ndarray) -> AugmentSpec:
    mean, std = channel_stats(images)
    return AugmentSpec(
        scale=(cfg.crop_scale_min, 1.0),
        size=cfg.image_size,
        flip_prob=cfg.flip_prob,
        mean=tuple(float(m) for m in mean),
        std=tuple(float(s) for s in std),
    )


# commands ----------------------------------------------------------------------


def cmd_search(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.resolved").write_text(cfg.to_text())
    data, _ = load_datasets(cfg)
    tr, va = split_train_val(len(data), cfg.train_fraction, cfg.seed)
    spec = _augment_spec(cfg, data.images[tr])
    train = BatchStream(data, tr, cfg.batch_size, cfg.seed * 2 + 11, spec, "train")
    val = BatchStream(data, va, cfg.batch_size, cfg.seed * 2 + 12, spec, "eval")
    search = cfg.search_config()
    result = run_search(search, train, val)
    (out / "trajectory.csv").write_text(result.trajectory.to_csv())
    (out / "final_architecture.json").write_text(result.final.to_json())
    (out / "supernet.json").write_text(search.supernet().to_json())
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out / "timing.csv").write_text(metrics_csv(result.timing))
    chosen = ", ".join(op.label for op in result.final.choices)
    print(f"searched {len(result.metrics)} epochs; final choices: {chosen}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_retrain(cfg: RunConfig, arch_path: Optional[Path]) -> int:
    out = Path(cfg.out)
    arch_path = _require(arch_path or out / "final_architecture.json")
    final = FinalArchitecture.from_json(arch_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    data, test = load_datasets(cfg)
    spec = _augment_spec(cfg, data.images)
    train = BatchStream(data, np.arange(len(data)), cfg.batch_size, cfg.seed * 2 + 21, spec, "train")
    evaluation = BatchStream(test, np.arange(len(test)), cfg.batch_size, cfg.seed * 2 + 22, spec, "eval")
    metrics, _ = retrain(final, cfg.search_config(), train, evaluation, cfg.retrain_epochs or cfg.epochs)
    (out / "retrain_metrics.csv").write_text(metrics_csv(metrics))
    print(f"retrained {len(metrics)} epochs; final eval accuracy {metrics[-1]['eval_accuracy']:.4f}")
    return EXIT_OK


def cmd_params(model: str, classes: int, scope: Optional[str], mode: str, small_stem: bool) -> int:
    desc = build_resnet(classes, small_stem)
    name = "resnet50"
    if model == "supernet":
        if scope is None:
            raise ConfigError("params --model supernet needs --scope")
        desc = build_supernet(desc, scope)
        name = f"supernet-{scope} ({mode})"
    n = count_params(desc, mode)
    print(f"{name}, {classes} classes: {n} parameters ({format_millions(n)})")
    return EXIT_OK


def cmd_plot(cfg: RunConfig, trajectory_path: Optional[Path]) -> int:
    out = Path(cfg.out)
    path = _require(trajectory_path or out / "trajectory.csv")
    traj = Trajectory.from_csv(path.read_text())
    if not traj.rows:
        raise ConfigError(f"trajectory {path} has no rows")
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    for block_id in traj.block_ids:
        svg = emit_plot_svg(traj.for_block(block_id), title=f"Search block {block_id} (0 = deepest)")
        (plots / f"block_{block_id}.svg").write_text(svg)
    print(f"wrote {len(traj.block_ids)} plot(s) to {plots}")
    return EXIT_OK


# argument parsing ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("none", "desk"))
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out")
    p.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help=f"override any configuration key ({', '.join(KEYS)})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoped-dnas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("search", help="run the architecture search"))
    p = sub.add_parser("retrain", help="train the exported architecture from scratch")
    _common(p)
    p.add_argument("--arch", type=Path, help="final_architecture.json (default: <out>/final_architecture.json)")
    p = sub.add_parser("params", help="print parameter counts")
    p.add_argument("--model", choices=("resnet50", "supernet"), default="resnet50")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--mode", choices=("single-path-max", "all-paths"), default="single-path-max")
    p.add_argument("--small-stem", action="store_true")
    p = sub.add_parser("plot", help="write one SVG per search block from trajectory.csv")
    _common(p)
    p.add_argument("--trajectory", type=Path)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    values = {k: getattr(args, k) for k in ("scope", "epochs", "seed", "preset", "data_dir", "out")}
    for item in args.sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        coerce(key.strip(), value)
        values[key.strip()] = value
    return values


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "params":
            if args.classes < 2:
                raise ConfigError("--classes must be at least 2")
            return cmd_params(args.model, args.classes, args.scope, args.mode, args.small_stem)
        cfg = parse_config(args.config, _overrides(args), command=args.command)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "retrain":
            return cmd_retrain(cfg, args.arch)
        return cmd_plot(cfg, args.trajectory)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())
