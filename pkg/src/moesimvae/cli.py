"""Command-line entry point: ``moesimvae {train,evaluate,generate,embed}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, kernels
from .config import DataConfig, TrainConfig, apply_override, from_dict, load_train_config, to_dict
from .data import file_fingerprint, load_dataset, load_embedding
from .errors import ConfigError, MoESimVAEError, ParameterError, TrainingError
from .metrics import cluster_separation_report
from .model import gate
from .trainer import evaluate, fit, model_config_for, model_from_checkpoint

OUTPUT_ENV = "MOESIMVAE_OUTPUT_DIR"
MANIFEST_NAME = "manifest.json"

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4

log = logging.getLogger("moesimvae")


@dataclass
class RunManifest:
    command: str
    config: dict
    datasets: list[dict] = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    kernel_backend: str = kernels.BACKEND
    created: float = field(default_factory=time.time)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _fingerprints(data_cfg: DataConfig, dataset) -> list[dict]:
    out = []
    for p in (data_cfg.path, data_cfg.labels_path, data_cfg.embedding_path):
        if p:
            out.append(file_fingerprint(p))
    if not out:
        out.append({"path": None, "generator": data_cfg.format})
    out[0].update(rows=len(dataset), columns=dataset.n_features)
    return out


# -- image grids ------------------------------------------------------------------

def image_grid(images: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Tile flattened images into a uint8 grid, ceil(sqrt(n)) tiles per row."""
    rows, cols = shape
    n = len(images)
    per_row = max(1, math.ceil(math.sqrt(n)))
    n_rows = max(1, math.ceil(n / per_row))
    grid = np.zeros((n_rows * rows, per_row * cols), dtype=np.uint8)
    pixels = np.rint(np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    for i, img in enumerate(pixels):
        r, c = divmod(i, per_row)
        grid[r * rows:(r + 1) * rows, c * cols:(c + 1) * cols] = img.reshape(rows, cols)
    return grid


def write_pgm(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.uint8)
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(grid.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


# -- commands ---------------------------------------------------------------------

def _load_for_checkpoint(args, config: TrainConfig, ckpt):
    """Dataset for a trained model: the checkpoint's own data section unless overridden."""
    raw = {"data": to_dict(config.data)}
    if args.config:
        raw = {"data": {**raw["data"], **to_dict(load_train_config(args.config).data)}}
    for item in args.set or ():
        if not item.startswith("data."):
            raise ConfigError(f"only data.* overrides apply to this command, got {item!r}")
        apply_override(raw, item)
    data_cfg = from_dict(DataConfig, raw["data"], prefix="data.")
    lo, hi = ckpt.extra.get("scale_min"), ckpt.extra.get("scale_max")
    dataset = load_dataset(data_cfg, scale_min=lo, scale_max=hi) if data_cfg.format == "csv" \
        else load_dataset(data_cfg)
    if dataset.n_features != config.model.input_dim:
        raise ConfigError(f"dataset has {dataset.n_features} features, checkpoint model expects "
                          f"{config.model.input_dim}")
    return dataset, data_cfg


def cmd_train(args) -> int:
    config = load_train_config(args.config, args.set or ())
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out or config.output_dir or default_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    config.output_dir = str(out)
    dataset = load_dataset(config.data)
    embedding = load_embedding(config.data.embedding_path) if config.data.embedding_path else None
    model_config_for(config, dataset)
    config.validate()
    manifest = RunManifest(
        command="train",
        config=to_dict(config),
        datasets=_fingerprints(config.data, dataset),
        outputs={"checkpoint": str(out / "checkpoint.ckpt"), "log": str(out / "train_log.jsonl"),
                 "metrics": str(out / "metrics.json")},
    )
    manifest.write(out / MANIFEST_NAME)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    model, _ = fit(dataset, config, embedding=embedding, out_dir=out)
    metrics = evaluate(model, dataset)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"trained {config.epochs} epochs: nmi={metrics['nmi']} acc={metrics['acc']} "
          f"f={metrics['f_measure']} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    model, config, ckpt = model_from_checkpoint(args.checkpoint)
    dataset, _ = _load_for_checkpoint(args, config, ckpt)
    seed = config.seed if args.seed is None else args.seed
    metrics = evaluate(model, dataset)
    z, P = model.predict(dataset.features)
    report = cluster_separation_report(z, gate(P), seed=seed)
    metrics["mmd"] = report.as_dict()
    out = Path(args.out or default_output_dir() / "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    out.with_suffix(".mmd.csv").write_text(report.to_csv())
    print(f"n={metrics['n']} nmi={metrics['nmi']} acc={metrics['acc']} f={metrics['f_measure']} -> {out}")
    return 0


def cmd_generate(args) -> int:
    model, config, ckpt = model_from_checkpoint(args.checkpoint)
    K = model.num_experts
    if args.n < 1:
        raise ParameterError(f"-n must be at least 1, got {args.n}")
    if args.cluster == "all":
        clusters = list(range(K))
    else:
        try:
            k = int(args.cluster)
        except ValueError:
            raise ParameterError(f"--cluster must be an integer or 'all', got {args.cluster!r}") from None
        if not 0 <= k < K:
            raise ParameterError(f"cluster index must lie in [0, {K}), got {k}")
        clusters = [k]
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out or default_output_dir() / "generated")
    out.mkdir(parents=True, exist_ok=True)
    shape = config.model.image_shape
    summary = []
    for k in clusters:
        x = model.generate(k, args.n, seed=np.random.default_rng([seed, k]))
        _, P = model.predict(x)
        acc = float(np.mean(gate(P) == k))
        if shape is not None:
            path = out / f"cluster_{k}.pgm"
            write_pgm(path, image_grid(x, tuple(shape)))
        else:
            path = out / f"cluster_{k}.csv"
            names = ckpt.extra.get("feature_names") or [f"f{i}" for i in range(x.shape[1])]
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(names)
                w.writerows(x.tolist())
        summary.append({"cluster": k, "n": args.n, "self_accuracy": acc, "path": str(path)})
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["cluster", "n", "self_accuracy", "path"])
        w.writeheader()
        w.writerows(summary)
    mean = float(np.mean([s["self_accuracy"] for s in summary]))
    print(f"generated {args.n} x {len(clusters)} samples, mean self-classification {mean:.4f} -> {out}")
    return 0


def cmd_embed(args) -> int:
    model, config, ckpt = model_from_checkpoint(args.checkpoint)
    dataset, _ = _load_for_checkpoint(args, config, ckpt)
    z, P = model.predict(dataset.features)
    assign = gate(P)
    out = Path(args.out or default_output_dir() / "embedding.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", *[f"z{i}" for i in range(z.shape[1])], "cluster", "max_prob"])
        for i in range(len(z)):
            w.writerow([i, *(repr(float(v)) for v in z[i]), int(assign[i]), repr(float(P[i].max()))])
    print(f"embedded {len(z)} rows -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesimvae", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output path (default from ${OUTPUT_ENV} or ./runs)")

    p = sub.add_parser("train", help="fit a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="clustering metrics and MMD separation for a checkpoint")
    p.add_argument("checkpoint")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="sample from mixture components")
    p.add_argument("checkpoint")
    p.add_argument("--cluster", default="all", help="component index or 'all'")
    p.add_argument("-n", type=int, default=16, help="samples per component")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("embed", help="export latent codes and assignments as CSV")
    p.add_argument("checkpoint")
    common(p)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MoESimVAEError) as exc:
        if isinstance(exc, TrainingError):
            print(f"training failed: {exc}", file=sys.stderr)
            return EXIT_TRAINING
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
