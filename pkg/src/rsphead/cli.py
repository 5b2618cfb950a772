"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command echoes its full effective configuration (as re-parseable
``key = value`` lines) before doing work.
"""

from __future__ import annotations

import sys
import warnings
from pathlib import Path

import numpy as np

from rsphead import data as dataio
from rsphead.config import ConfigError, RunConfig, parse_config
from rsphead.costs import count_flops, count_params
from rsphead.pyramid import PixelClassifier, SegmentationModel
from rsphead.rse import attention_window
from rsphead.tensor import Tensor, no_grad
from rsphead.training import evaluate, train_steps

__all__ = ["main", "run_cli", "USAGE"]

USAGE = """\
usage: rsphead <command> [--config FILE] [--key value ...]

commands:
  train      train a segmentation head on the marker dataset (or a data dir)
  eval       evaluate a checkpoint and print its mIoU
  gen-data   synthesize a marker dataset as PPM/PGM pairs
  count      print analytic parameter and FLOP tables for the configured head
  gradcheck  run the finite-difference gradient suite
  dump-attn  dump relation weights and query/key maps for one pixel

keys are the flat config namespace (see the config module); a few common
aliases work too: --steps, --site, --pixel, --image, --input.
"""

_ALIASES = {
    "steps": "train.steps",
    "site": "dump.site",
    "pixel": "dump.pixel",
    "image": "dump.image",
    "input": "count.input",
}


def _parse_argv(argv):
    if not argv:
        raise ConfigError("no command given")
    command = argv[0]
    rest = argv[1:]
    config_path = None
    overrides = []
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        if i + 1 >= len(rest):
            raise ConfigError(f"flag {flag} is missing a value")
        key = flag[2:]
        value = rest[i + 1]
        if key == "config":
            config_path = value
        else:
            overrides.append((_ALIASES.get(key, key), value))
        i += 2
    return command, config_path, overrides


def _echo(cfg: RunConfig, out=print) -> None:
    for line in cfg.echo_lines():
        out(line)


def _load_split(cfg: RunConfig, split: str):
    directory = cfg["data_dir"] if split == "train" else cfg["eval_dir"]
    if directory:
        return dataio.load_dataset(directory)
    return dataio.generate_marker_dataset(cfg.dataset_spec(split))


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    head = cfg.head_config()
    train_cfg = cfg.train_config()
    train_data = _load_split(cfg, "train")
    eval_data = _load_split(cfg, "eval") if train_cfg.eval_every > 0 else None
    model = SegmentationModel(head, seed=cfg["seed"])

    log_path = out_dir / "metrics.log"
    with open(log_path, "w") as log_file:
        def log(line: str) -> None:
            log_file.write(line + "\n")
            print(line)

        train_steps(model, train_data, train_cfg, eval_dataset=eval_data, log=log)

    ckpt = out_dir / "model.ckpt"
    dataio.save_checkpoint(model.state(), ckpt)
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {log_path}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = cfg["checkpoint"]
    if not ckpt:
        raise ConfigError("eval needs --checkpoint pointing at a trained model")
    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model = SegmentationModel(cfg.head_config(), seed=cfg["seed"])
    model.load_state(dataio.load_checkpoint(ckpt))
    eval_data = _load_split(cfg, "eval")
    score = evaluate(model, eval_data, cfg["num_classes"],
                     batch_size=cfg["train.batch_size"])
    print(f"miou={score:.4f}")
    return 0


def cmd_gen_data(cfg: RunConfig) -> int:
    out_dir = Path(cfg["out"])
    samples = dataio.generate_marker_dataset(cfg.dataset_spec("train"))
    dataio.save_dataset(samples, out_dir)
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def _print_cost_table(title: str, breakdown, scale: float = 1.0, unit: str = "") -> None:
    print(title)
    for name, value in breakdown.items.items():
        print(f"  {name:<14s} {value / scale:>16,.0f}{unit}")
    print(f"  {'head total':<14s} {breakdown.head_total / scale:>16,.0f}{unit}")
    print(f"  {'model total':<14s} {breakdown.model_total / scale:>16,.0f}{unit}")


def cmd_count(cfg: RunConfig) -> int:
    head = cfg.head_config()
    h, w = cfg.count_input()
    _print_cost_table("parameters", count_params(head))
    _print_cost_table(f"flops @ {h}x{w} (multiply-accumulate convention)", count_flops(head, h, w))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from rsphead.gradcheck import run_suite

    results = run_suite()
    failed = 0
    for r in sorted(results, key=lambda r: r.name):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:<24s} max_rel_err={r.max_rel_err:.3e} (tol {r.tolerance:g})")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    if failed:
        raise RuntimeError(f"{failed} gradient checks failed")
    return 0


def _scale_to_bytes(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.int64)


def cmd_dump_attn(cfg: RunConfig) -> int:
    ckpt = cfg["checkpoint"]
    image_path = cfg["dump.image"]
    if not ckpt:
        raise ConfigError("dump-attn needs --checkpoint")
    if not image_path:
        raise ConfigError("dump-attn needs --image pointing at a PPM file")
    if not Path(ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if not Path(image_path).is_file():
        raise ConfigError(f"image not found: {image_path}")
    site = cfg["dump.site"]
    pixel = cfg.dump_pixel()

    model = SegmentationModel(cfg.head_config(), seed=cfg["seed"])
    model.load_state(dataio.load_checkpoint(ckpt))
    image = dataio.read_ppm(image_path)

    trace: dict = {}
    with no_grad():
        model.forward(Tensor(image[None]), trace=trace)
    if site not in trace["sites"]:
        raise ValueError(f"site {site} is not part of head '{cfg['head']}'")
    entry = trace["sites"][site]
    if entry["mode"] != "rsp":
        raise ValueError(f"site {site} is a plain sum; it has no relation weights")

    weights, q_map, k_map = attention_window(entry["low"], entry["up"], entry["rse"], pixel)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"site{site}_r{pixel[0]}c{pixel[1]}"

    heat_path = out_dir / f"attn_{tag}.pgm"
    dataio.write_pgm(_scale_to_bytes(weights), heat_path)
    csv_path = out_dir / f"attn_{tag}.csv"
    with open(csv_path, "w") as f:
        f.write("row,col,weight\n")
        for a in range(weights.shape[0]):
            for b in range(weights.shape[1]):
                f.write(f"{a},{b},{weights[a, b]:.10g}\n")
    written = [heat_path, csv_path]
    for channel in range(min(cfg["dump.channels"], q_map.shape[0])):
        qp = out_dir / f"query_{tag}_c{channel}.pgm"
        kp = out_dir / f"key_{tag}_c{channel}.pgm"
        dataio.write_pgm(_scale_to_bytes(q_map[channel]), qp)
        dataio.write_pgm(_scale_to_bytes(k_map[channel]), kp)
        written += [qp, kp]
    for path in written:
        print(f"wrote {path}")
    print(f"weight_sum={weights.sum():.6f}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "count": cmd_count,
    "gradcheck": cmd_gradcheck,
    "dump-attn": cmd_dump_attn,
}


def run_cli(argv) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    try:
        command, config_path, overrides = _parse_argv(list(argv))
        if command in ("help", "--help", "-h"):
            print(USAGE)
            return 0
        handler = _COMMANDS.get(command)
        if handler is None:
            raise ConfigError(f"unknown command '{command}'")
        cfg = parse_config(config_path, overrides)
        cfg.head_config()  # validate topology up front
        _echo(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return handler(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
