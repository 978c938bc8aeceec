"""Command-line entry point: ``mlore <command> ...``.

Exit codes: 0 success or PASS, 1 verification FAIL (or a diverged run),
2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, accounting
from .config import ConfigError, ModelConfig, paper_config, smoke_config, toy_config
from .reparam import acceptance_grid, verify_equivalence

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
PRESETS = {"smoke": smoke_config, "toy": toy_config, "paper": paper_config}

log = logging.getLogger("mlore")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_config(spec: str | None, default: str = "smoke") -> ModelConfig:
    """A preset name or a path to a JSON config file."""
    spec = spec or default
    if spec in PRESETS:
        return PRESETS[spec]()
    try:
        return ModelConfig.load(spec)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {spec!r}: {exc}") from exc


def _read(loader, path, what):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what} {str(path)!r}: {exc}") from exc


def _load_data(path):
    from .toybench.data import ToyDataset

    return _read(ToyDataset.load, path, "dataset")


def _load_ckpt(path):
    from .toybench.train import load_checkpoint

    return _read(load_checkpoint, path, "checkpoint")


def parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(parts[0]), int(parts[0])) if len(parts) == 1 else (int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    if len(parts) > 2 or h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"expected positive HxW, got {text!r}")
    return h, w


def write_manifest(path: Path, command: str, args: argparse.Namespace, started: str, *, config=None, seed=None, artifacts=()):
    manifest = {
        "tool": "mlore",
        "version": __version__,
        "command": command,
        "argv": sys.argv[1:],
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
        "artifacts": [str(a) for a in artifacts],
        "started": started,
        "finished": _now(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .toybench.data import gen_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 16:
        raise UsageError("--size must be >= 16")
    started = _now()
    ds = gen_dataset(args.seed, args.count, args.size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", args, started, seed=args.seed, artifacts=[out])
    print(f"wrote {args.count} samples ({args.size}x{args.size}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .toybench.train import TrainSettings, TrainingDiverged, train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.lb_weight is not None:
        cfg = cfg.with_(lb_weight=args.lb_weight)
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    ds = _load_data(args.data)
    settings = TrainSettings(
        iters=args.iters,
        batch_size=args.batch_size,
        lr=args.lr,
        optimizer=args.optimizer,
        schedule=args.schedule,
        checkpoint_every=args.checkpoint_every,
        decoder=args.decoder,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    try:
        result = train(cfg, ds, settings, out)
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    losses = out / "losses.csv"
    keys = list(result.losses[0]) if result.losses else ["total"]
    lines = ["step," + ",".join(keys)]
    lines += [f"{i}," + ",".join(f"{row[k]:.9g}" for k in keys) for i, row in enumerate(result.losses)]
    losses.write_text("\n".join(lines) + "\n")
    gates = out / "gate_stats.json"
    gates.write_text(json.dumps(result.gate_log) + "\n")
    write_manifest(out / "manifest.json", "train", args, started, config=cfg, seed=cfg.seed, artifacts=[result.checkpoint, losses, gates])
    if result.losses:
        print(f"trained {args.iters} steps: loss {result.losses[0]['total']:.4f} -> {result.losses[-1]['total']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .toybench.tasks import MetricsReport
    from .toybench.train import evaluate

    model, _, _ = _load_ckpt(args.ckpt)
    if args.config is not None and load_config(args.config).to_dict() != model.cfg.to_dict():
        raise UsageError("--config does not match the configuration stored in the checkpoint")
    ds = _load_data(args.data)
    if tuple(ds.size) != tuple(model.image_size):
        raise UsageError(f"dataset images are {ds.size}, checkpoint expects {model.image_size}")
    baseline = None
    if args.baseline:
        baseline = _read(lambda p: MetricsReport.loads(Path(p).read_text()), args.baseline, "baseline report")
        missing = [t.name for t in model.tasks if t.name not in baseline.metrics]
        if missing:
            raise UsageError(f"baseline report lacks tasks {missing}")
    started = _now()
    report = evaluate(model, ds, baseline)
    text = report.to_text()
    sys.stdout.write(text)
    artifacts = []
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        artifacts.append(out)
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", args, started, config=model.cfg, seed=model.cfg.seed, artifacts=artifacts)
    return EXIT_OK


def cmd_verify_reparam(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    started = _now()
    if args.ckpt:
        model, _, _ = _load_ckpt(args.ckpt)
        modules = model.decoder.mlore_modules() if model.decoder_kind == "mlore" else []
        if not modules:
            raise UsageError("checkpoint has no MLoRE modules")
        model.eval()
        worst = None
        for m in modules:
            m.astype(np.float64 if args.precision == "double" else np.float32)
            rep = verify_equivalence(model.cfg, args.trials, args.precision, seed=args.seed, module=m, bias_corruption=args.corrupt_bias)
            worst = rep if worst is None or rep.max_rel_error > worst.max_rel_error else worst
        report = worst
        cfg = model.cfg
    else:
        configs = [load_config(args.config)] if args.config else acceptance_grid()
        cfg = configs[0] if args.config else None
        report = verify_equivalence(configs, args.trials, args.precision, seed=args.seed, bias_corruption=args.corrupt_bias)
    text = report.to_text()
    print("\n".join(text.splitlines()[:5]))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "verify-reparam", args, started, config=cfg, seed=args.seed, artifacts=[out])
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_count(args) -> int:
    cfg = load_config(args.config, default="paper")
    h, w = args.hw
    if args.report:
        for variant in accounting.VARIANTS:
            sys.stdout.write(accounting.count_flops(cfg, variant, h, w).to_text())
        sys.stdout.write(accounting.count_flops(cfg, "mlore", h, w, fused=True).to_text())
        return EXIT_OK
    rows = accounting.compare_table(cfg, (h, w))
    sys.stdout.write(accounting.format_table(rows))
    return EXIT_OK


def cmd_export_activations(args) -> int:
    from .toybench.analysis import export_activations

    model, _, _ = _load_ckpt(args.ckpt)
    if model.decoder_kind != "mlore":
        raise UsageError("checkpoint has no MLoRE modules")
    ds = _load_data(args.data)
    if tuple(ds.size) != tuple(model.image_size):
        raise UsageError(f"dataset images are {ds.size}, checkpoint expects {model.image_size}")
    started = _now()
    stats, _ = export_activations(model, ds)
    paths = stats.save(args.out)
    write_manifest(Path(args.out) / "manifest.json", "export-activations", args, started, config=model.cfg, seed=model.cfg.seed, artifacts=paths)
    print(f"wrote {paths[0]} and {paths[1]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    """Wall-clock of the multi-branch vs folded eval forward; timing output is not deterministic."""
    from .config import stream
    from .decoder import MLoREModule
    from .reparam import frozen_gate_mix, fused_mix
    from .tensor import Tensor

    cfg = load_config(args.config)
    h, w = args.hw
    rng = stream(cfg.seed, "init")
    m = MLoREModule(cfg, cfg.channels, (h, w), rng, dtype=np.float32)
    m.eval()
    x = [Tensor(rng.standard_normal((args.batch, cfg.channels, h, w)).astype(np.float32)) for _ in range(cfg.num_tasks)]
    runs = [("multi-branch", lambda: m.mix(x)), ("fused", lambda: fused_mix(m, x))]
    if args.frozen_gates:
        runs.append(("frozen-gates (batch-averaged gates, NOT equivalent)", lambda: frozen_gate_mix(m, x)))
    if args.repeats < 1 or args.batch < 1:
        raise UsageError("--repeats and --batch must be >= 1")
    for label, fn in runs:
        fn()
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            fn()
        print(f"{label}: {(time.perf_counter() - t0) / args.repeats * 1e3:.2f} ms per forward")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlore", description="Mixture of low-rank experts decoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"mlore {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-task dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64, help="square image side (>= 16)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a toy multi-task model")
    t.add_argument("--config", help="preset name (smoke, toy, paper) or JSON file; default smoke")
    t.add_argument("--data", required=True)
    t.add_argument("--iters", type=int, default=1000)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--lb-weight", type=float, help="override the load-balancing weight")
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--schedule", choices=("constant", "cosine"), default="constant")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--decoder", choices=("mlore", "linear"), default="mlore")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", help="metrics report of the reference model, enables the MTL gain")
    e.add_argument("--config", help="fail unless the checkpoint was trained with this config")
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-reparam", help="check multi-branch vs folded forward equivalence")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--precision", choices=("double", "single"), default="double")
    v.add_argument("--config", help="single config instead of the built-in grid")
    v.add_argument("--ckpt", help="verify the modules of a trained checkpoint instead")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the per-trial report here")
    v.add_argument("--corrupt-bias", type=float, default=0.0, help="test hook: offset every fused bias")
    v.set_defaults(func=cmd_verify_reparam)

    c = sub.add_parser("count", help="parameter and FLOP table, standard MoE vs MLoRE")
    c.add_argument("--config", help="preset name or JSON file; default paper")
    c.add_argument("--hw", type=parse_hw, default=(16, 16), help="feature map size, e.g. 16x16")
    c.add_argument("--report", action="store_true", help="per-component breakdown for the config itself")
    c.set_defaults(func=cmd_count)

    x = sub.add_parser("export-activations", help="per-expert activation statistics over a dataset")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_activations)

    b = sub.add_parser("bench", help="time multi-branch vs folded inference for one module")
    b.add_argument("--config")
    b.add_argument("--hw", type=parse_hw, default=(16, 16))
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--frozen-gates", action="store_true", help="also time one fold per task with batch-averaged gates")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mlore {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"mlore {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
