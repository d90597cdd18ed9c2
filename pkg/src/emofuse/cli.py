"""Command-line entry point: ``emofuse {train,eval,gradcheck,gen-data,export-embeddings}``.

Configuration precedence: built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from . import checkpoint
from .config import RunConfig, config_fields, load_config
from .dataio import (SyntheticSpec, class_histogram, default_class_names, gen_synthetic, load_fixture, load_meta,
                     write_fixture)
from .errors import CheckpointError, ConfigError, FixtureError, NumericalError, ShapeError
from .gradcheck import run_gradcheck
from .metrics import format_table
from .training import (EmotionFusionModel, LossBreakdown, evaluate, evaluate_discrimination, export_embeddings, fit,
                       make_optimizer, total_steps)

log = logging.getLogger("emofuse")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

GRADCHECK_BASE = {"d_z": 8, "M": 2, "C": 4, "d_p": 8, "d_h": 8}
GRADCHECK_INIT_SCALE = 0.3


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    """One flag per RunConfig key; unset flags do not override the config file."""
    g = p.add_argument_group("run configuration (override --config values)")
    for f in config_fields():
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else None
        help_ = f"{f.metadata['help']} [default: {default}]"
        ftype = str(f.type)
        kw = dict(dest=f.name, default=argparse.SUPPRESS, help=help_)
        if "bool" in ftype:
            g.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, **kw)
        elif "choices" in f.metadata:
            g.add_argument(_flag(f.name), choices=f.metadata["choices"], **kw)
        elif "int" in ftype:
            g.add_argument(_flag(f.name), type=int, **kw)
        elif "float" in ftype:
            g.add_argument(_flag(f.name), type=float, **kw)
        else:
            g.add_argument(_flag(f.name), type=str, **kw)


def _overrides(args: argparse.Namespace) -> dict:
    keys = {f.name for f in config_fields()}
    return {k: v for k, v in vars(args).items() if k in keys}


def _config(args, base: dict | None = None) -> RunConfig:
    start = RunConfig().replace(**base) if base else None
    return load_config(args.config, _overrides(args), base=start)


def _load_data(path: str | None, cfg: RunConfig, what: str):
    if not path:
        raise UsageError(f"no {what} dataset given")
    if not Path(path).exists():
        raise UsageError(f"{what} dataset not found: {path}")
    data = load_fixture(path, num_classes=cfg.C)
    if not data:
        raise UsageError(f"{what} dataset {path} is empty")
    if data[0].d_z != cfg.d_z:
        raise UsageError(f"{what} dataset has d_z={data[0].d_z} but the config says d_z={cfg.d_z}")
    return data


def _class_names(path: str | None, C: int):
    meta = load_meta(path) if path else None
    return meta.class_names if meta and len(meta.class_names) == C else default_class_names(C)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    train = _load_data(cfg.train_data, cfg, "training")
    val = _load_data(cfg.val_data, cfg, "validation") if cfg.val_data else None
    out = _out_dir(cfg)
    model = EmotionFusionModel(cfg)
    optim = make_optimizer(model, cfg)
    steps = total_steps(cfg, len(train))
    names = LossBreakdown.names()

    log_path = out / "loss_log.csv"
    started = time.perf_counter()
    with log_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step"] + names)

        def on_step(t, bd):
            writer.writerow([t] + [repr(v) for v in bd.as_tuple()])
            if (t + 1) % max(1, steps // 10) == 0:
                log.info("step %d/%d total=%.5f", t + 1, steps, bd.total)

        try:
            fit(model, optim, train, cfg, steps=steps, on_step=on_step)
        except NumericalError as exc:
            print(f"numerical failure at step {exc.step}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC

    checkpoint.save(out / "checkpoint.bin", model, optim, cfg)
    metrics = {"steps": steps, "train": evaluate(train, model, cfg).to_dict()}
    if val is not None:
        report = evaluate(val, model, cfg)
        metrics["val"] = report.to_dict()
        metrics["val_discrimination"] = asdict(evaluate_discrimination(val, model, cfg))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    final = metrics.get("val", metrics["train"])
    print(f"trained {steps} steps in {time.perf_counter() - started:.1f}s; "
          f"{'val' if val is not None else 'train'} WACC={final['acc_weighted']:.4f} ACC={final['acc_unweighted']:.4f}")
    print(f"wrote {log_path}, {out / 'checkpoint.bin'}, {out / 'metrics.json'}")
    return EXIT_OK


def _restored_model(args, cfg: RunConfig) -> EmotionFusionModel:
    model = EmotionFusionModel(cfg)
    checkpoint.load(args.checkpoint, model)
    return model


def cmd_eval(args) -> int:
    cfg = _config(args)
    path = args.data or cfg.val_data
    data = _load_data(path, cfg, "evaluation")
    model = _restored_model(args, cfg)
    report = evaluate(data, model, cfg)
    disc = evaluate_discrimination(data, model, cfg)
    print(format_table(report, _class_names(path, cfg.C)))
    print(f"\ndiscriminator pair accuracy {disc.accuracy:.4f} over {disc.pairs} pairs")
    if disc.ceiling is not None:
        print(f"best achievable on these pairs {disc.ceiling:.4f}; agreement with cluster truth "
              f"{disc.content_accuracy:.4f}")
    out = _out_dir(cfg)
    doc = {"metrics": report.to_dict(), "discrimination": asdict(disc), "data": str(path)}
    (out / "eval_metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args, GRADCHECK_BASE)
    if cfg.d_z > 16 or cfg.M > 2:
        raise UsageError(f"gradcheck needs d_z <= 16 and M <= 2 (got d_z={cfg.d_z}, M={cfg.M})")
    cfg = cfg.replace(ae_init_scale=args.init_scale)
    coords = None if args.full else args.coords
    ok = True
    worst: dict[str, tuple[float, str]] = {}
    offenders: dict[str, set[str]] = {}
    started = time.perf_counter()
    for seed in range(cfg.seed, cfg.seed + args.trials):
        report = run_gradcheck(cfg, seed, h=args.step, tol=args.tol, coords_per_tensor=coords)
        ok &= report.passed
        for c in report.components:
            if c.max_rel_error >= worst.get(c.name, (-1.0, ""))[0]:
                worst[c.name] = (c.max_rel_error, f"{c.worst_param} (seed {seed})")
            offenders.setdefault(c.name, set()).update(c.offenders)
    print(f"{'component':<16}{'max rel err':>12}  status  worst parameter")
    for name, (err, where) in worst.items():
        status = "PASS" if err <= args.tol else "FAIL"
        print(f"{name:<16}{err:>12.3e}  {status:<6}  {where}")
    print(f"\n{len(worst) - 1} loss components + composite, seeds {cfg.seed}..{cfg.seed + args.trials - 1}, "
          f"tol {args.tol:g}, {time.perf_counter() - started:.1f}s")
    if not ok:
        bad = sorted({p for ps in offenders.values() for p in ps})
        print("offending parameters: " + ", ".join(bad), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen_data(args) -> int:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(values) - {f.name for f in fields(SyntheticSpec)}
        if unknown:
            raise UsageError(f"unknown synthetic-data keys: {', '.join(sorted(unknown))}")
    flag_map = {"classes": "C", "dim": "d_z", "speech_len": "m", "text_len": "n", "records": "records",
                "separation": "separation", "sigma": "sigma", "inconsistency": "inconsistency_rate", "seed": "seed"}
    for flag, key in flag_map.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    spec = SyntheticSpec(**values)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.holdout < 0 or args.holdout >= spec.records:
        raise UsageError("--holdout must be in [0, records)")
    records = gen_synthetic(spec)
    out = Path(args.out)
    splits = [(out, records[:spec.records - args.holdout])]
    if args.holdout:
        splits.append((out.with_suffix(".holdout.jsonl"), records[spec.records - args.holdout:]))
    for path, recs in splits:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_fixture(path, recs, spec.C, spec.class_names or None)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from exc
        hist = class_histogram(recs, spec.C)
        mismatched = sum(not r.consistent for r in recs)
        print(f"{path}: {len(recs)} records, class histogram {hist}, inconsistent {mismatched}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _config(args)
    path = args.data or cfg.val_data or cfg.train_data
    data = _load_data(path, cfg, "export")
    model = _restored_model(args, cfg)
    target = Path(args.csv) if args.csv else _out_dir(cfg) / "embeddings.csv"
    export_embeddings(data, model, cfg, target)
    print(f"wrote {len(data)} embeddings to {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emofuse", description="Augmentation, contrastive alignment and consistency-aware fusion for "
                                     "speech/text emotion recognition on feature fixtures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config_keys=True):
        p.add_argument("--config", help="flat JSON file with run configuration keys")
        if with_config_keys:
            add_config_flags(p)

    p = sub.add_parser("train", help="train a model and write log, checkpoint and metrics")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fixture")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", help="fixture to evaluate (default: val_data from the config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    common(p)
    p.add_argument("--trials", type=int, default=5, help="number of consecutive seeds starting at --seed [5]")
    p.add_argument("--coords", type=int, default=6, help="random coordinates probed per parameter tensor [6]")
    p.add_argument("--full", action="store_true", help="probe every coordinate of every parameter (slow)")
    p.add_argument("--tol", type=float, default=1e-3, help="relative tolerance [1e-3]")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step h [1e-5]")
    p.add_argument("--init-scale", type=float, default=GRADCHECK_INIT_SCALE,
                   help=f"autoencoder init scale used while probing [{GRADCHECK_INIT_SCALE}]")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic JSONL fixture and its metadata")
    p.add_argument("--config", help="JSON file with synthetic-data keys (C, d_z, m, n, records, ...)")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--seed", type=int, help="random seed [0]")
    p.add_argument("--classes", type=int, help="number of classes [4]")
    p.add_argument("--records", type=int, help="number of records [1000]")
    p.add_argument("--dim", type=int, help="feature dimension d_z [32]")
    p.add_argument("--speech-len", type=int, help="speech tokens per record [6]")
    p.add_argument("--text-len", type=int, help="text tokens per record [5]")
    p.add_argument("--separation", type=float, help="distance of class centroids from the origin [4.0]")
    p.add_argument("--sigma", type=float, help="token noise standard deviation [1.0]")
    p.add_argument("--inconsistency", type=float, help="fraction of records whose text comes from another class [0]")
    p.add_argument("--holdout", type=int, default=0, help="also write the last N records to <out>.holdout.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-embeddings", help="write the fused vector of every record to CSV")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", help="fixture to embed (default: val_data, then train_data)")
    p.add_argument("--csv", help="output CSV path (default: <out>/embeddings.csv)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FixtureError, CheckpointError, ShapeError) as exc:
        print(f"emofuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"emofuse {args.command}: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
