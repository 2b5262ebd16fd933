"""Command-line entry point: ``simplekt <command> [flags]``.

Every training run lives in ``<out>/<variant>-<confighash>-seed<seed>/``
holding ``run.json`` (configs, data path, split seed), the vocab, per-fold
epoch logs, resumable state, checkpoints and ``metrics.jsonl``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as D
from . import evaluate as E
from . import synth as S
from .model import VARIANTS, ConfigError, ModelConfig, SimpleKT
from .numerics import NonFiniteError
from .train import SEARCH_GRID, NumericError, TrainConfig, TrainingError, cross_validate, expand_grid

log = logging.getLogger("simplekt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# flag name -> (type, default); None defaults mean "not given"
TUNABLES = {
    "variant": (str, "full"),
    "d": (int, 64),
    "lr": (float, 1e-3),
    "dropout": (float, 0.1),
    "blocks": (int, 1),
    "heads": (int, 4),
    "seed": (int, 42),
    "folds": (int, 5),
    "grid": (str, ""),
    "jobs": (int, 1),
    "patience": (int, 10),
    "max_epochs": (int, 200),
    "batch_size": (int, 64),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration -------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", EXIT_CONFIG) from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value", EXIT_CONFIG)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_vals) - set(TUNABLES) - {"data", "out"}
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}", EXIT_CONFIG)
    out = {}
    for key, (typ, default) in TUNABLES.items():
        flag = getattr(args, key, None)
        raw = flag if flag is not None else file_vals.get(key, default)
        try:
            out[key] = typ(raw)
        except ValueError as exc:
            raise CliError(f"bad value for {key}: {raw!r}", EXIT_CONFIG) from exc
    for key in ("data", "out"):
        out[key] = getattr(args, key, None) or file_vals.get(key)
    if out["variant"] not in VARIANTS:
        raise CliError(f"--variant must be one of {', '.join(VARIANTS)}", EXIT_CONFIG)
    return out


def parse_grid(text: str) -> dict[str, list]:
    """``full`` or ``lr=1e-3,1e-4;d=64,128`` (flag spellings accepted)."""
    if not text:
        return {}
    if text == "full":
        return dict(SEARCH_GRID)
    rename = {"blocks": "n_blocks", "heads": "n_heads"}
    grid = {}
    for part in text.split(";"):
        if "=" not in part:
            raise CliError(f"bad grid entry {part!r}; expected key=v1,v2", EXIT_CONFIG)
        key, values = part.split("=", 1)
        key = rename.get(key.strip(), key.strip())
        typ = str if key == "variant" else float if key in ("lr", "dropout") else int
        try:
            grid[key] = [typ(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise CliError(f"bad grid values for {key}: {values!r}", EXIT_CONFIG) from exc
    return grid


def build_configs(cfg: dict, vocab: D.VocabMaps) -> tuple[ModelConfig, TrainConfig]:
    try:
        mc = ModelConfig(
            n_kcs=vocab.n_kcs + 1,
            n_questions=vocab.n_questions + 1,
            d=cfg["d"],
            n_blocks=cfg["blocks"],
            n_heads=cfg["heads"],
            dropout=cfg["dropout"],
            variant=cfg["variant"],
            seed=cfg["seed"],
        ).validate()
        tc = TrainConfig(
            lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"], patience=cfg["patience"], seed=cfg["seed"]
        ).validate()
    except (ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    return mc, tc


def config_hash(configs) -> str:
    blob = json.dumps(
        [[{k: v for k, v in asdict(c).items() if k != "seed"} for c in pair] for pair in configs], sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


# -- data -------------------------------------------------------------------------


def load_prepared(path: str | Path | None):
    """A prepared directory (``interactions.csv`` + vocab) or a bare canonical file."""
    if not path:
        raise CliError("--data is required", EXIT_CONFIG)
    path = Path(path)
    if not path.exists():
        raise CliError(f"data path {path} does not exist (run `simplekt prep` or `simplekt synth` first)", EXIT_DATA)
    if path.is_dir():
        file = path / "interactions.csv"
        if not file.exists():
            raise CliError(f"{path} has no interactions.csv", EXIT_DATA)
        vocab = D.VocabMaps.load(path) if (path / "vocab_questions.tsv").exists() else None
        records, vocab = D.ingest(file, vocab=vocab)
    else:
        records, vocab = D.ingest(path)
    return records, vocab, D.preprocess(records)


def dataset_name(path) -> str:
    p = Path(path)
    return p.name if p.is_dir() else p.stem


def write_jsonl(path: Path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_tsv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- commands ----------------------------------------------------------------------


def cmd_prep(args) -> int:
    out = Path(args.out or "prepared")
    out.mkdir(parents=True, exist_ok=True)
    rows = D.adapt(args.data, args.adapter)
    D.write_canonical(out / "interactions.csv", rows)
    records, vocab = D.ingest(out / "interactions.csv")
    vocab.save(out)
    report = D.stats(D.preprocess(records), vocab.kind)
    (out / "stats.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    print(D.format_stats(dataset_name(args.data), report))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = S.SynthConfig(
        n_students=args.students, n_questions=args.questions, n_kcs=args.kcs, sigma_b=args.sigma_b, seed=args.seed
    )
    try:
        paths = S.generate(cfg, args.out or "synth")
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return EXIT_OK


def cmd_stats(args) -> int:
    _, vocab, seqs = load_prepared(args.data)
    print(D.format_stats(dataset_name(args.data), D.stats(seqs, vocab.kind)))
    return EXIT_OK


def _train(cfg: dict, records, vocab, seqs) -> Path:
    mc, tc = build_configs(cfg, vocab)
    configs = expand_grid(mc, tc, parse_grid(cfg["grid"]))
    run = Path(cfg["out"] or "runs") / f"{cfg['variant']}-{config_hash(configs)}-seed{cfg['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    vocab.save(run)
    sp = D.split([s.student_id for s in seqs], cfg["seed"], cfg["folds"])
    log.info("run directory %s", run)
    report = cross_validate(seqs, sp, configs, jobs=cfg["jobs"], out_dir=run)
    selected = next(i for i, (m, t) in enumerate(configs) if asdict(m) == report.model_config and asdict(t) == report.train_config)
    meta = {
        "data": str(Path(cfg["data"]).resolve()),
        "dataset": dataset_name(cfg["data"]),
        "split_seed": cfg["seed"],
        "folds": cfg["folds"],
        "selected": selected,
        "model_config": report.model_config,
        "train_config": report.train_config,
        "cli": cfg,
    }
    (run / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    metrics = run / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    write_jsonl(metrics, [_record(meta, f["fold"], "one-step", None, f) for f in report.folds])
    print(f"{meta['dataset']}\t{cfg['variant']}\t{report.summary()}")
    return run


def _record(meta, fold, protocol, ratio, m) -> dict:
    return {
        "dataset": meta["dataset"],
        "variant": meta["model_config"]["variant"],
        "fold": fold,
        "protocol": protocol,
        "ratio": ratio,
        "auc": m["auc"],
        "accuracy": m["accuracy"],
        "n_predictions": m["n_predictions"],
    }


def cmd_train(args) -> int:
    cfg = resolve(args)
    records, vocab, seqs = load_prepared(cfg["data"])
    _train(cfg, records, vocab, seqs)
    return EXIT_OK


def _open_run(run_dir):
    run = Path(run_dir)
    if not (run / "run.json").exists():
        raise CliError(f"{run} is not a run directory (no run.json); train first", EXIT_DATA)
    meta = json.loads((run / "run.json").read_text(encoding="utf-8"))
    vocab = D.VocabMaps.load(run)
    records, _ = D.ingest(Path(meta["data"]) / "interactions.csv" if Path(meta["data"]).is_dir() else meta["data"], vocab=vocab)
    seqs = D.preprocess(records)
    sp = D.split([s.student_id for s in seqs], meta["split_seed"], meta["folds"])
    by_id = {s.student_id: s for s in seqs}
    test = [by_id[s] for s in sp.test_students]
    ckpts = sorted((run / f"config{meta['selected']}").glob("fold*.ckpt.npz"))
    if not ckpts:
        raise CliError(f"{run} holds no checkpoints; rerun train to resume", EXIT_DATA)
    return run, meta, records, sp, by_id, test, ckpts


def _fold_of(path: Path) -> int:
    return int(path.name[len("fold") :].split(".")[0])


def cmd_eval(args) -> int:
    run, meta, _, _, _, test, ckpts = _open_run(args.run)
    recs = []
    for ck in ckpts:
        _, m = E.evaluate_one_step(SimpleKT.load(ck), test)
        recs.append(_record(meta, _fold_of(ck), "one-step", None, m))
    write_jsonl(run / "eval.jsonl", recs)
    auc = E.mean_std([r["auc"] for r in recs])
    acc = E.mean_std([r["accuracy"] for r in recs])
    print(f"{meta['dataset']}\t{meta['model_config']['variant']}\tAUC {E.format_mean_std(*auc)}\tACC {E.format_mean_std(*acc)}")
    return EXIT_OK


def cmd_multistep(args) -> int:
    run, meta, _, _, _, test, ckpts = _open_run(args.run)
    recs = []
    for ck in ckpts:
        for r in E.evaluate_multistep(SimpleKT.load(ck), test):
            recs.append({**_record(meta, _fold_of(ck), "multistep", r["ratio"], r), "skipped_chunks": r["skipped_chunks"]})
    write_jsonl(run / "multistep.jsonl", recs)
    write_tsv(run / "multistep.tsv", recs)
    for r in recs:
        print(f"fold {r['fold']}\tratio {r['ratio']:.1f}\tauc {r['auc']}\tacc {r['accuracy']}")
    return EXIT_OK


def cmd_trace(args) -> int:
    run, meta, records, sp, by_id, _, ckpts = _open_run(args.run)
    if args.student not in by_id:
        raise CliError(f"student {args.student!r} not in the prepared data", EXIT_DATA)
    train_ids = [s for f in sp.folds for s in f]
    her_map = D.her(r for s in train_ids for r in records.get(s, []))
    vocab = D.VocabMaps.load(run)
    ck = next((c for c in ckpts if _fold_of(c) == args.fold), None)
    if ck is None:
        raise CliError(f"no checkpoint for fold {args.fold}", EXIT_DATA)
    model = SimpleKT.load(ck)
    seq = by_id[args.student]
    if not 0 <= args.chunk < len(seq.chunks):
        raise CliError(f"student {args.student!r} has {len(seq.chunks)} chunks", EXIT_DATA)
    rows = E.trace(model, args.student, seq.chunks[args.chunk], her_map, vocab)
    out = run / f"trace_{args.student}_chunk{args.chunk}.tsv"
    write_tsv(out, rows)
    print(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    records, vocab, seqs = load_prepared(cfg["data"])
    if vocab.kind != D.KIND_BOTH:
        print(
            "warning: ablation needs both question and KC ids; with only one of them the difficulty "
            "variants are mathematically unidentifiable. Refusing.",
            file=sys.stderr,
        )
        raise CliError("ablation refused for data lacking question or KC ids", EXIT_DATA)
    rows = []
    for variant in VARIANTS:
        run = _train({**cfg, "variant": variant}, records, vocab, seqs)
        recs = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
        auc = E.mean_std([r["auc"] for r in recs])
        acc = E.mean_std([r["accuracy"] for r in recs])
        rows.append({"variant": variant, "auc": E.format_mean_std(*auc), "accuracy": E.format_mean_std(*acc)})
    out = Path(cfg["out"] or "runs") / f"ablation-{dataset_name(cfg['data'])}-seed{cfg['seed']}.tsv"
    write_tsv(out, rows)
    print(f"{'variant':<12} {'AUC':>15} {'ACC':>15}")
    for r in rows:
        print(f"{r['variant']:<12} {r['auc']:>15} {r['accuracy']:>15}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def _tunable_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--config", help="key=value file; flags override it")
    for key, (typ, default) in TUNABLES.items():
        kwargs = {"type": typ, "default": None, "help": f"default {default!r}"}
        if key == "variant":
            kwargs["choices"] = VARIANTS
        p.add_argument("--" + key.replace("_", "-"), dest=key, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simplekt", description="Train and evaluate simple attention-based knowledge tracing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="adapt a raw log to canonical form, build vocab, print stats")
    p.add_argument("--data", required=True)
    p.add_argument("--adapter", default="canonical")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a synthetic 1PL dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--students", type=int, default=500)
    p.add_argument("--questions", type=int, default=300)
    p.add_argument("--kcs", type=int, default=40)
    p.add_argument("--sigma-b", type=float, default=1.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics after preprocessing")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    for name, func, help_ in (
        ("train", cmd_train, "cross-validated training"),
        ("ablate", cmd_ablate, "train full, scalardiff and nodiff under one config"),
    ):
        p = sub.add_parser(name, help=help_)
        _tunable_flags(p)
        p.set_defaults(func=func)

    for name, func, help_ in (
        ("eval", cmd_eval, "one-step test metrics for a run"),
        ("multistep", cmd_multistep, "multi-step test metrics for ratios 0.2..0.9"),
        ("trace", cmd_trace, "per-step predictions for one student"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run", required=True, help="run directory written by train")
        if name == "trace":
            p.add_argument("--student", required=True)
            p.add_argument("--fold", type=int, default=0)
            p.add_argument("--chunk", type=int, default=0)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except D.DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingError as exc:
        cause = exc.__cause__
        code = EXIT_NUMERIC if isinstance(cause, (NumericError, NonFiniteError)) else EXIT_DATA
        print(f"training error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
