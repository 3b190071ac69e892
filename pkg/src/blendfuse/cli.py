"""Command-line entry point.

Subcommands: gen-synth, aggregate, train, cv, predict, eval, analyze.
Global flags (accepted before or after the subcommand): --config, --seed,
--jobs, --out, --set key=value (repeatable), -v.

Exit codes: 0 ok, 1 usage/configuration error, 2 data error, 3 numeric error.

Seeding: one ``--seed`` feeds every component through fixed sub-streams,
    synthetic data     make_rng(seed, 21)
    model init         make_rng(model_seed, 1)
    fold assignment    make_rng(seed, 11)
    batch order        make_rng(seed, 31, epoch)
    dropout            make_rng(seed, 32, epoch)
    target batches     make_rng(seed, 33, epoch), dropout make_rng(seed, 34, epoch)
``train`` uses model_seed = seed; each ``cv`` cell uses a seed derived from
SeedSequence([seed, fold]) for both model and training streams.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import collect_embeddings, collect_log, export_analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_set
from .data import (
    EncoderSpec,
    SampleRecord,
    aggregate_frames,
    generate_synthetic,
    kfold_split,
    load_feature_pack,
    pack_checksum,
    write_feature_pack,
)
from .data.pack import FeaturePack
from .decoding import (
    AlignmentConfig,
    decode_batch,
    metrics,
    read_predictions_csv,
    truth_from_target,
    write_predictions_csv,
)
from .errors import BlendFuseError, DataError, FormatError, InputError, ParameterError
from .model import FusionModel
from .numerics import Adam
from .training import Arrays, cross_validate, fit, predict_arrays, write_cells_csv, write_epoch_csv, write_grid_csv

log = logging.getLogger("blendfuse")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so a flag given before the subcommand survives
    p = _Parser(add_help=False)
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="JSON config with flat keys")
    p.add_argument("--seed", type=int, default=d(None), help="master seed")
    p.add_argument("--jobs", type=int, default=d(None), help="parallel workers for cv")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blendfuse", parents=[_global_flags(True)], description="Multi-encoder fusion toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    g = [_global_flags(False)]

    p = sub.add_parser("gen-synth", parents=g, help="write a synthetic feature pack")
    p.add_argument("--informative", help="comma-separated informative encoder indices")
    p.add_argument("--num-encoders", type=int)
    p.add_argument("--n-source", type=int)
    p.add_argument("--n-target", type=int)
    p.add_argument("--domain-shift", type=float)

    p = sub.add_parser("aggregate", parents=g, help="frame matrices -> feature pack")
    p.add_argument("frames_dir", help="directory holding index.json and raw float32 frame files")

    p = sub.add_parser("train", parents=g, help="train one model on one fold split")
    p.add_argument("pack")
    p.add_argument("--top-n", type=int)
    p.add_argument("--uda", action="store_true", default=None)
    p.add_argument("--val-fold", type=int)
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("cv", parents=g, help="k-fold cross-validation over top-n values")
    p.add_argument("pack")
    p.add_argument("--top-n", required=True, help="comma-separated list, e.g. 2,4,8,12")
    p.add_argument("--folds", type=int)
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("predict", parents=g, help="decode predictions with a checkpoint")
    p.add_argument("pack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=("source", "target", "all"), default="all")

    p = sub.add_parser("eval", parents=g, help="score a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--truth", required=True, help="feature pack directory or predictions-format CSV")
    p.add_argument("--hidden", action="store_true", help="score against hidden targets of unlabeled samples")

    p = sub.add_parser("analyze", parents=g, help="encoder importance / CKA / co-selection exports")
    p.add_argument("pack")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat once per fold")
    return parser


# -- helpers -----------------------------------------------------------------


def _config(args, **flag_overrides) -> RunConfig:
    overrides = parse_set(args.set)
    for key, value in flag_overrides.items():
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return load_config(args.config, overrides)


def _explicit_keys(args) -> set[str]:
    keys = set(parse_set(args.set))
    if args.config is not None:
        keys |= set(json.loads(Path(args.config).read_text(encoding="utf-8")))
    return keys


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _neutral(pack: FeaturePack) -> int | None:
    return pack.metadata.get("neutral_index")


def _split(pack: FeaturePack, cfg: RunConfig):
    source = [s for s in pack.samples if s.domain == "source"]
    target = [s for s in pack.samples if s.domain == "target"]
    if not source:
        raise InputError("pack has no labeled source samples")
    folds = kfold_split(source, cfg.folds, seed=cfg.seed)
    if not 0 <= cfg.val_fold < len(folds):
        raise ParameterError(f"val_fold must lie in [0, {len(folds) - 1}]")
    tr, va = folds[cfg.val_fold]
    return [source[i] for i in tr], [source[i] for i in va], target


def _check_encoders(pack: FeaturePack, names: list[str]) -> None:
    have = [s.name for s in pack.specs]
    if have != names:
        raise InputError(f"pack encoders {have} do not match checkpoint encoders {names}")


# -- commands ----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    cfg = _config(
        args,
        informative=args.informative,
        num_encoders=args.num_encoders,
        n_source=args.n_source,
        n_target=args.n_target,
        domain_shift=args.domain_shift,
    )
    sc = cfg.synthetic()
    samples = generate_synthetic(sc)
    out = _out_dir(args, "synth_pack")
    meta = {"generator": "synthetic", "synthetic": sc.to_dict(), "neutral_index": sc.neutral_index}
    write_feature_pack(out, samples, sc.encoder_specs(), sc.num_classes, meta)
    n_src = sum(s.domain == "source" for s in samples)
    print(f"wrote {out}: {len(samples)} samples ({n_src} source, {len(samples) - n_src} target), "
          f"{sc.num_encoders} encoders, informative {list(sc.informative)}, checksum {pack_checksum(out)[:16]}")
    return 0


def _read_frames(path: Path, dim: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0 or raw.size % dim:
        raise FormatError(f"{path}: {raw.size} float32 values do not form rows of width {dim}")
    return raw.reshape(-1, dim).astype(np.float64)


def cmd_aggregate(args) -> int:
    _config(args)
    root = Path(args.frames_dir)
    try:
        index = json.loads((root / "index.json").read_text(encoding="utf-8"))
        specs = [EncoderSpec(e["name"], e["modality"], int(e["dim"])) for e in index["encoders"]]
        num_classes = int(index["num_classes"])
        entries = index["samples"]
    except OSError as exc:
        raise FormatError(f"{root}: cannot read index.json ({exc})") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{root / 'index.json'}: malformed index ({exc})") from exc

    samples, problems = [], []
    for entry in entries:
        sid = entry.get("sample_id", "?")
        feats = {}
        for spec in specs:
            rel = entry.get("frames", {}).get(spec.name)
            if rel is None:
                problems.append(f"{sid}/{spec.name}: no frame file listed")
                continue
            try:
                feats[spec.name] = aggregate_frames(_read_frames(root / rel, spec.dim))
            except (OSError, DataError) as exc:
                problems.append(f"{sid}/{spec.name}: {exc}")
        if len(feats) != len(specs):
            continue
        t = entry.get("target")
        samples.append(
            SampleRecord(
                sid,
                str(entry.get("group_id", sid)),
                entry.get("domain", "source"),
                feats,
                target=None if t is None else np.asarray(t, dtype=np.float64),
            )
        )
    for msg in problems:
        print(f"error: {msg}", file=sys.stderr)
    if problems:
        raise FormatError(f"{len(problems)} frame file(s) failed; no pack written")
    out = _out_dir(args, "aggregated_pack")
    meta = {"generator": "aggregate", "source_dir": str(root)}
    if "neutral_index" in index:
        meta["neutral_index"] = index["neutral_index"]
    write_feature_pack(out, samples, specs, num_classes, meta)
    print(f"wrote {out}: {len(samples)} samples, {len(specs)} encoders")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, top_n=args.top_n, uda=args.uda, val_fold=args.val_fold, max_epochs=args.max_epochs)
    pack = load_feature_pack(args.pack)
    train, val, target = _split(pack, cfg)
    mc = cfg.model([s.width for s in pack.specs], pack.num_classes)
    tc = cfg.train(_neutral(pack))
    model = FusionModel(mc, seed=cfg.seed)
    tgt = Arrays.from_samples(target, pack.specs) if mc.uda and target else None
    if mc.uda and tgt is None:
        log.warning("UDA enabled but the pack has no target-domain samples")
    res = fit(model, Arrays.from_samples(train, pack.specs), Arrays.from_samples(val, pack.specs), tc, target=tgt)
    out = _out_dir(args, "run")
    extra = {
        "encoders": [s.name for s in pack.specs],
        "modalities": [s.modality for s in pack.specs],
        "alignment": vars(tc.alignment),
        "folds": cfg.folds,
        "val_fold": cfg.val_fold,
        "split_seed": cfg.seed,
        "best_epoch": res.best_epoch,
        "best_metric": res.best_metric,
        "run_config": cfg.to_dict(),
    }
    save_checkpoint(out / "model.ckpt", model, Adam(model.parameters(), lr=res.reports[-1].lr), extra)
    write_epoch_csv(out / "epochs.csv", res.reports, uda=tgt is not None)
    best = next(r for r in res.reports if r.epoch == res.best_epoch) if res.best_epoch else res.reports[-1]
    summary = {
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.reports),
        "val_acc_presence": best.val_acc_presence,
        "val_acc_salience": best.val_acc_salience,
        "val_acc_average": best.val_acc_average,
    }
    _write_json(out / "train_summary.json", summary)
    print(f"trained {len(res.reports)} epochs, best epoch {res.best_epoch}: "
          f"presence {best.val_acc_presence:.3f} salience {best.val_acc_salience:.3f}; wrote {out}")
    return 0


def cmd_cv(args) -> int:
    cfg = _config(args, folds=args.folds, max_epochs=args.max_epochs)
    try:
        top_n = [int(v) for v in args.top_n.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--top-n expects integers: {args.top_n!r}") from exc
    pack = load_feature_pack(args.pack)
    mc = cfg.model([s.width for s in pack.specs], pack.num_classes)
    res = cross_validate(pack.samples, pack.specs, mc, cfg.train(_neutral(pack)), top_n, k=cfg.folds,
                         seed=cfg.seed, jobs=cfg.jobs)
    out = _out_dir(args, "cv")
    write_grid_csv(out / "cv_grid.csv", res)
    write_cells_csv(out / "cv_cells.csv", res)
    print("top_n  presence          salience          average")
    for r in res.grid:
        cells = "  ".join(f"{r.mean[m]:.3f} ± {r.std[m]:.3f}" for m in ("acc_presence", "acc_salience"))
        print(f"{r.top_n:5d}  {cells}  {r.mean['acc_average']:.3f}")
    print(f"best top_n by mean average accuracy: {res.best_top_n()}; wrote {out}")
    return 0


def _load_model(path):
    model, _, extra = load_checkpoint(path)
    if "encoders" not in extra:
        raise FormatError(f"{path}: checkpoint lacks encoder metadata")
    return model, extra


def cmd_predict(args) -> int:
    cfg = _config(args)
    pack = load_feature_pack(args.pack)
    model, extra = _load_model(args.checkpoint)
    _check_encoders(pack, extra["encoders"])
    samples = [s for s in pack.samples if args.domain == "all" or s.domain == args.domain]
    if not samples:
        raise InputError(f"no {args.domain} samples in pack")
    # decoding settings saved at training time, unless set explicitly now
    align = dict(extra.get("alignment", {}))
    explicit = _explicit_keys(args)
    for key in ("alpha", "epsilon", "tau_p", "neutral_index"):
        if key in explicit:
            align[key] = getattr(cfg, key)
    align = AlignmentConfig(**align)
    out_arr = predict_arrays(model, Arrays.from_samples(samples, pack.specs))
    preds = decode_batch(out_arr["p_p"], out_arr["p_s"], align)
    out = _out_dir(args, "predictions")
    write_predictions_csv(out / "predictions.csv", [s.sample_id for s in samples], preds)
    print(f"wrote {len(preds)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_eval(args) -> int:
    _config(args)
    preds = read_predictions_csv(args.predictions)
    truth_path = Path(args.truth)
    if truth_path.is_dir():
        pack = load_feature_pack(truth_path)
        truths = {}
        for s in pack.samples:
            t = s.hidden_target if args.hidden else s.target
            if t is not None:
                truths[s.sample_id] = truth_from_target(t)
        num_classes = pack.num_classes
    else:
        truths = read_predictions_csv(truth_path)
        num_classes = None
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise InputError(f"{len(missing)} predicted samples have no ground truth, e.g. {missing[:3]}")
    ids = sorted(preds)
    report = metrics([preds[i] for i in ids], [truths[i] for i in ids], num_classes)
    out = _out_dir(args, "eval")
    _write_json(out / "metrics.json", report.to_dict())
    print(f"presence {report.acc_presence:.4f}  salience {report.acc_salience:.4f}  "
          f"average {report.acc_average:.4f}  (n={report.n})")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    pack = load_feature_pack(args.pack)
    source = [s for s in pack.samples if s.domain == "source"]
    if not source:
        raise InputError("pack has no source samples to analyze")
    logs, first = [], None
    for path in args.checkpoint:
        model, extra = _load_model(path)
        _check_encoders(pack, extra["encoders"])
        first = first or model
        # each fold's model is read on its own validation samples when the split is known
        if "val_fold" in extra and "folds" in extra:
            folds = kfold_split(source, int(extra["folds"]), seed=int(extra.get("split_seed", cfg.seed)))
            rows = [source[i] for i in folds[int(extra["val_fold"])][1]]
        else:
            rows = source
        logs.append(collect_log(model, Arrays.from_samples(rows, pack.specs), [s.sample_id for s in rows]))
    embeddings = collect_embeddings(first, Arrays.from_samples(source, pack.specs))
    out = _out_dir(args, "analysis")
    summary = export_analysis(out, logs, embeddings, [s.name for s in pack.specs], [s.modality for s in pack.specs])
    r = summary["pearson_cka_vs_coselection"]
    print(f"analyzed {summary['num_samples']} samples over {len(logs)} fold(s); "
          f"CKA vs co-selection r = {'undefined' if r is None else f'{r:.3f}'}; wrote {out}")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "aggregate": cmd_aggregate,
    "train": cmd_train,
    "cv": cmd_cv,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("blendfuse: a subcommand is required (see --help)")
        return COMMANDS[args.command](args)
    except BlendFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
