"""Command-line surface.

Commands: train, eval, sweep, ablate, ood-eval, gen-synthetic,
augment-preview, verify. Configuration is a flat key-value file plus
``--key value`` overrides; the fully resolved config is written next to
every run's artifacts and reproduces the run when fed back in. Exit codes:
0 success, 1 usage or configuration, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .dataio import (
    DEFAULT_SCHEMA,
    DataError,
    few_shot_sample,
    load_dataset,
    read_schema,
    split_dataset,
    synthetic_dataset,
    synthetic_lexicon_entries,
    synthetic_schema,
    synthetic_split,
    write_dataset,
    write_schema,
)
from .evalkit import (
    aggregate_reports,
    evaluate_model,
    evaluate_out_of_domain,
    render_table,
    run_variant,
    sweep_labeled_counts,
)
from .model import load_checkpoint, save_checkpoint
from .numkit import NumericalError
from .textprep import SynonymLexicon, augment, augmentation_rng, tokenize
from .trainer import VARIANTS, ConfigError, TrainConfig, train, write_trace_csv

# every run option: (key, kind, default). The resolved file and the CLI
# flags are both generated from this table, so they cannot drift apart.
CONFIG_SPEC = (
    ("data_dir", "opt_str", None),
    ("data_file", "opt_str", None),
    ("schema_file", "opt_str", None),
    ("lexicon_file", "opt_str", None),
    ("synthetic", "bool", False),
    ("synthetic_classes", "int", 4),
    ("synthetic_train", "int", 3000),
    ("synthetic_dev", "int", 375),
    ("synthetic_test", "int", 375),
    ("synthetic_label_noise", "float", 0.1),
    ("synthetic_skew", "float", 1.0),
    ("synthetic_noise_vocab", "int", 50),
    ("synthetic_token_shift", "int", 0),
    ("synthetic_seed", "int", 0),
    ("data_seed", "int", 0),
    ("variant", "str", "crisismatch"),
    ("shots", "int", 5),
    ("seeds", "ints", (0, 1, 2)),
    ("batch_size", "int", 32),
    ("unlabeled_ratio", "int", 7),
    ("num_aug", "int", 2),
    ("tau", "float", 0.75),
    ("temperature", "float", 0.5),
    ("alpha", "float", 0.75),
    ("unlabeled_weight", "float", 10.0),
    ("rampup_iters", "int", 1000),
    ("lr", "float", 2e-3),
    ("weight_decay", "float", 0.01),
    ("max_seq_len", "int", 64),
    ("embed_dim", "int", 64),
    ("num_blocks", "int", 4),
    ("mix_layers", "opt_ints", None),
    ("min_count", "int", 1),
    ("max_iters", "int", 2000),
    ("eval_every", "int", 50),
    ("use_unlabeled", "bool", True),
    ("use_consistency", "bool", True),
    ("use_textmixup", "bool", True),
    ("fixed_lambda", "opt_float", None),
    ("consistency_weight", "float", 0.0),
    ("sweep_counts", "ints", (1, 3, 5, 10, 20, 50)),
    ("sweep_variants", "strs", ("supervised", "crisismatch")),
    ("ood_target_dir", "opt_str", None),
    ("ood_token_shift", "int", 3),
    ("outdir", "str", "runs"),
    ("run_name", "opt_str", None),
    ("jobs", "int", 1),
)

CONFIG_KEYS = {key for key, _, _ in CONFIG_SPEC}

ABLATION_ROWS = (
    ("CrisisMatch", {}),
    ("- Unlabeled Data", {"use_unlabeled": False}),
    ("- Consistency Regularization", {"use_consistency": False}),
    ("- TextMixUp", {"use_textmixup": False}),
    ("- All (Supervised Baseline)", {"variant": "supervised"}),
)


def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            if not text:
                raise ValueError("empty value")
            return text
        if kind == "bool":
            low = text.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: '{text}'")
        if kind == "ints":
            return tuple(int(x) for x in text.split(",") if x.strip())
        if kind == "strs":
            return tuple(x.strip() for x in text.split(",") if x.strip())
        if kind == "opt_str":
            return text or None
        if kind == "opt_float":
            return float(text) if text else None
        if kind == "opt_ints":
            return tuple(int(x) for x in text.split(",") if x.strip()) if text else None
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {exc}") from exc
    raise AssertionError(f"unhandled kind {kind}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys rejected."""
    texts = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            texts[key] = value.strip()
    return texts


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    texts = {}
    if getattr(args, "config", None):
        texts.update(load_config_file(args.config))
    for key, _, _ in CONFIG_SPEC:
        override = getattr(args, key, None)
        if override is not None:
            texts[key] = override
    cfg = {}
    for key, kind, default in CONFIG_SPEC:
        cfg[key] = _parse_value(key, kind, texts[key]) if key in texts else default
    return cfg


def write_resolved_config(cfg: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key, _, _ in CONFIG_SPEC:
            fh.write(f"{key} = {_format_value(cfg[key])}\n")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        variant=cfg["variant"],
        batch_size=cfg["batch_size"],
        unlabeled_ratio=cfg["unlabeled_ratio"],
        num_aug=cfg["num_aug"],
        tau=cfg["tau"],
        temperature=cfg["temperature"],
        alpha=cfg["alpha"],
        unlabeled_weight=cfg["unlabeled_weight"],
        rampup_iters=cfg["rampup_iters"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        max_seq_len=cfg["max_seq_len"],
        embed_dim=cfg["embed_dim"],
        num_blocks=cfg["num_blocks"],
        mix_layers=cfg["mix_layers"],
        min_count=cfg["min_count"],
        max_iters=cfg["max_iters"],
        eval_every=cfg["eval_every"],
        use_unlabeled=cfg["use_unlabeled"],
        use_consistency=cfg["use_consistency"],
        use_textmixup=cfg["use_textmixup"],
        fixed_lambda=cfg["fixed_lambda"],
        consistency_weight=cfg["consistency_weight"],
    )


def bundled_lexicon() -> SynonymLexicon:
    text = resources.files("crisismatch").joinpath("data/synonyms.txt").read_text("utf-8")
    return SynonymLexicon.from_lines(text.splitlines(), "bundled synonyms")


@dataclass
class DataBundle:
    train: list
    dev: list
    test: list
    schema: list
    lexicon: SynonymLexicon


def load_bundle(cfg: dict) -> DataBundle:
    sources = [cfg["data_dir"] is not None, cfg["data_file"] is not None, cfg["synthetic"]]
    if sum(sources) != 1:
        raise ConfigError("exactly one data source required: data_dir, data_file, or synthetic=true")

    if cfg["synthetic"]:
        schema = synthetic_schema(cfg["synthetic_classes"])
        train, dev, test = synthetic_dataset(
            cfg["synthetic_classes"],
            cfg["synthetic_train"],
            cfg["synthetic_dev"],
            cfg["synthetic_test"],
            cfg["synthetic_seed"],
            label_noise=cfg["synthetic_label_noise"],
            skew=cfg["synthetic_skew"],
            noise_vocab=cfg["synthetic_noise_vocab"],
            token_shift=cfg["synthetic_token_shift"],
        )
        if cfg["lexicon_file"]:
            lexicon = SynonymLexicon.load(cfg["lexicon_file"])
        else:
            lexicon = SynonymLexicon(
                synthetic_lexicon_entries(cfg["synthetic_classes"], cfg["synthetic_noise_vocab"])
            )
        return DataBundle(train, dev, test, schema, lexicon)

    if cfg["data_dir"]:
        base = Path(cfg["data_dir"])
        schema_path = Path(cfg["schema_file"]) if cfg["schema_file"] else base / "schema.txt"
        schema = read_schema(schema_path) if schema_path.exists() else list(DEFAULT_SCHEMA)
        train = load_dataset(base / "train.tsv", schema)
        dev = load_dataset(base / "dev.tsv", schema)
        test = load_dataset(base / "test.tsv", schema)
        lexicon = _lexicon_for(cfg, base / "lexicon.txt")
        return DataBundle(train, dev, test, schema, lexicon)

    schema = read_schema(cfg["schema_file"]) if cfg["schema_file"] else list(DEFAULT_SCHEMA)
    data = load_dataset(cfg["data_file"], schema)
    train, dev, test = split_dataset(data, schema, cfg["data_seed"])
    return DataBundle(train, dev, test, schema, _lexicon_for(cfg, None))


def _lexicon_for(cfg, fallback_path) -> SynonymLexicon:
    if cfg["lexicon_file"]:
        return SynonymLexicon.load(cfg["lexicon_file"])
    if fallback_path is not None and Path(fallback_path).exists():
        return SynonymLexicon.load(fallback_path)
    return bundled_lexicon()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _run_dir(cfg: dict, default_name: str) -> Path:
    run_dir = Path(cfg["outdir"]) / (cfg["run_name"] or default_name)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_one_seed(bundle: DataBundle, tcfg: TrainConfig, shots: int, seed: int, seed_dir: Path):
    view = few_shot_sample(bundle.train, bundle.schema, shots, seed)
    result = train(view, bundle.dev, bundle.test, bundle.schema, bundle.lexicon, tcfg, seed)
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        seed_dir / "checkpoint",
        result.model,
        result.vocab,
        bundle.schema,
        meta={
            "seed": seed,
            "variant": tcfg.variant,
            "best_iter": result.best_iter,
            "max_seq_len": tcfg.max_seq_len,
        },
    )
    write_trace_csv(seed_dir / "trace.csv", result.trace)
    _json_dump(
        {
            "format": 1,
            "seed": seed,
            "variant": tcfg.variant,
            "best_iter": result.best_iter,
            "dev": result.best_dev.to_dict(),
            "test": result.test_report.to_dict(),
        },
        seed_dir / "metrics.json",
    )
    return result.test_report


def _train_seeds(bundle, tcfg, cfg, run_dir):
    """Per-seed runs, optionally in parallel; artifact dirs are per-seed."""
    seeds = cfg["seeds"]
    if not seeds:
        raise ConfigError("need at least one seed")
    tasks = [(bundle, tcfg, cfg["shots"], seed, run_dir / f"seed-{seed}") for seed in seeds]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            reports = list(pool.map(_train_one_seed_star, tasks))
    else:
        reports = [_train_one_seed(*t) for t in tasks]
    return aggregate_reports(seeds, reports)


def _train_one_seed_star(task):
    return _train_one_seed(*task)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    bundle = load_bundle(cfg)
    tcfg = train_config(cfg)
    tcfg.resolved().validate(len(bundle.schema))
    run_dir = _run_dir(cfg, cfg["variant"])
    write_resolved_config(cfg, run_dir / "config.resolved")
    agg = _train_seeds(bundle, tcfg, cfg, run_dir)
    _json_dump({"format": 1, "variant": cfg["variant"], "aggregate": agg.to_dict()}, run_dir / "aggregate.json")
    rows = [
        (cfg["variant"], str(seed), f"{rep.accuracy:.1f}", f"{rep.macro_f1:.1f}")
        for seed, rep in zip(agg.seeds, agg.reports)
    ]
    rows.append((cfg["variant"], "mean", agg.accuracy.formatted(), agg.macro_f1.formatted()))
    table = render_table(("variant", "seed", "accuracy", "macro-F1"), rows)
    (run_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    try:
        bundle = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from exc
    schema = bundle.labels
    if args.data_file:
        examples = load_dataset(args.data_file, schema)
    elif args.data_dir:
        examples = load_dataset(Path(args.data_dir) / f"{args.split}.tsv", schema)
    else:
        raise ConfigError("eval needs --data-file or --data-dir")
    max_seq_len = int(bundle.meta.get("max_seq_len", 64))
    report = evaluate_model(bundle.model, bundle.vocab, schema, examples, max_seq_len)
    rows = [("accuracy", f"{report.accuracy:.2f}"), ("macro-F1", f"{report.macro_f1:.2f}")]
    rows += [
        (name, f"P={m['precision']:.3f} R={m['recall']:.3f} F1={m['f1']:.3f}")
        for name, m in report.per_class.items()
    ]
    print(render_table(("metric", "value"), rows), end="")
    if args.json:
        _json_dump(report.to_dict(), args.json)
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    bundle = load_bundle(cfg)
    base = train_config(cfg)
    for variant in cfg["sweep_variants"]:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}' in sweep_variants")
    run_dir = _run_dir(cfg, "sweep")
    write_resolved_config(cfg, run_dir / "config.resolved")
    cells, warnings = sweep_labeled_counts(
        bundle.train, bundle.dev, bundle.test, bundle.schema, bundle.lexicon,
        base, cfg["sweep_variants"], cfg["sweep_counts"], cfg["seeds"],
    )
    with open(run_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("variant,count,seed,accuracy,macro_f1\n")
        for cell in cells:
            agg = cell["aggregate"]
            for seed, rep in zip(agg.seeds, agg.reports):
                fh.write(f"{cell['variant']},{cell['count']},{seed},{rep.accuracy!r},{rep.macro_f1!r}\n")
    rows = [
        (c["variant"], str(c["count"]), c["aggregate"].accuracy.formatted(), c["aggregate"].macro_f1.formatted())
        for c in cells
    ]
    table = render_table(("variant", "labeled/class", "accuracy", "macro-F1"), rows)
    if warnings:
        table += "".join(f"note: {w}\n" for w in warnings)
    (run_dir / "table.txt").write_text(table, encoding="utf-8")
    _json_dump(
        {
            "format": 1,
            "cells": [
                {"variant": c["variant"], "count": c["count"], "aggregate": c["aggregate"].to_dict()}
                for c in cells
            ],
            "warnings": warnings,
        },
        run_dir / "sweep.json",
    )
    print(table, end="")
    for w in warnings:
        print(f"note: {w}", file=sys.stderr)
    print(f"artifacts in {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if cfg["variant"] != "crisismatch":
        raise ConfigError("ablate studies the full method; set variant = crisismatch")
    bundle = load_bundle(cfg)
    base = train_config(cfg)
    run_dir = _run_dir(cfg, "ablate")
    write_resolved_config(cfg, run_dir / "config.resolved")
    results = []
    for label, mods in ABLATION_ROWS:
        tcfg = replace(base, **mods)
        agg = run_variant(
            bundle.train, bundle.dev, bundle.test, bundle.schema, bundle.lexicon,
            tcfg, cfg["seeds"], cfg["shots"],
        )
        results.append((label, agg))
    full_acc = results[0][1].accuracy.mean
    rows = []
    payload = []
    for label, agg in results:
        delta = agg.accuracy.mean - full_acc
        rows.append((label, agg.accuracy.formatted(), agg.macro_f1.formatted(), f"{delta:+.1f}"))
        payload.append(
            {"label": label, "aggregate": agg.to_dict(), "accuracy_delta_vs_full": delta}
        )
    table = render_table(("method", "accuracy", "macro-F1", "delta acc"), rows)
    (run_dir / "table.txt").write_text(table, encoding="utf-8")
    _json_dump({"format": 1, "rows": payload}, run_dir / "ablate.json")
    print(table, end="")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_ood_eval(args) -> int:
    cfg = resolve_config(args)
    bundle = load_bundle(cfg)
    if cfg["ood_target_dir"]:
        target_test = load_dataset(Path(cfg["ood_target_dir"]) / "test.tsv", bundle.schema)
    elif cfg["synthetic"]:
        target_test = synthetic_split(
            cfg["synthetic_classes"],
            cfg["synthetic_test"],
            cfg["synthetic_seed"],
            "oodtest",
            3,
            skew=cfg["synthetic_skew"],
            noise_vocab=cfg["synthetic_noise_vocab"],
            token_shift=cfg["ood_token_shift"],
        )
    else:
        raise ConfigError("ood-eval needs ood_target_dir (or a synthetic source with ood_token_shift)")
    run_dir = _run_dir(cfg, "ood")
    write_resolved_config(cfg, run_dir / "config.resolved")
    agg = evaluate_out_of_domain(
        bundle.train, bundle.dev, target_test, bundle.schema, bundle.lexicon,
        train_config(cfg), cfg["seeds"], cfg["shots"],
    )
    _json_dump({"format": 1, "variant": cfg["variant"], "aggregate": agg.to_dict()}, run_dir / "ood.json")
    table = render_table(
        ("variant", "target accuracy", "target macro-F1"),
        [(cfg["variant"], agg.accuracy.formatted(), agg.macro_f1.formatted())],
    )
    (run_dir / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"artifacts in {run_dir}")
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg = resolve_config(args)
    c = cfg["synthetic_classes"]
    if c < 2:
        raise ConfigError("synthetic_classes must be at least 2")
    if cfg["synthetic_train"] < 10 * c:
        raise ConfigError("synthetic_train must be at least 10 examples per class")
    if cfg["synthetic_dev"] < c or cfg["synthetic_test"] < c:
        raise ConfigError("synthetic_dev and synthetic_test must cover every class")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_split, dev, test = synthetic_dataset(
        c,
        cfg["synthetic_train"],
        cfg["synthetic_dev"],
        cfg["synthetic_test"],
        cfg["synthetic_seed"],
        label_noise=cfg["synthetic_label_noise"],
        skew=cfg["synthetic_skew"],
        noise_vocab=cfg["synthetic_noise_vocab"],
        token_shift=cfg["synthetic_token_shift"],
    )
    write_dataset(train_split, out / "train.tsv")
    write_dataset(dev, out / "dev.tsv")
    write_dataset(test, out / "test.tsv")
    write_schema(synthetic_schema(c), out / "schema.txt")
    entries = synthetic_lexicon_entries(c, cfg["synthetic_noise_vocab"])
    with open(out / "lexicon.txt", "w", encoding="utf-8") as fh:
        fh.write("# generated synonym pairs for the synthetic vocabulary\n")
        for word in sorted(entries):
            fh.write(f"{word}\t{','.join(entries[word])}\n")
    write_resolved_config(cfg, out / "config.resolved")
    print(f"wrote {len(train_split)}/{len(dev)}/{len(test)} examples to {out}")
    return 0


def cmd_augment_preview(args) -> int:
    lexicon = SynonymLexicon.load(args.lexicon_file) if args.lexicon_file else bundled_lexicon()
    tokens = tokenize(args.text)
    print("tokens:  " + " ".join(tokens))
    for k in range(1, args.copies + 1):
        rng = augmentation_rng(args.seed, "preview", (0, k))
        print(f"copy {k}:  " + " ".join(augment(tokens, lexicon, rng)))
    return 0


def cmd_verify(args) -> int:
    from . import selfcheck

    results = selfcheck.run_all(report=print)
    return 0 if all(r.ok for r in results) else 3


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="FILE", help="flat key-value config file")
    for key, _, _ in CONFIG_SPEC:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crisismatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    for name, fn, desc in (
        ("train", cmd_train, "train one variant across seeds and aggregate"),
        ("sweep", cmd_sweep, "grid over labeled counts and variants"),
        ("ablate", cmd_ablate, "component ablations of the full method"),
        ("ood-eval", cmd_ood_eval, "train on source data, test on a shifted target"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_config_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-file")
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--json", metavar="FILE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset to a directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("augment-preview", help="show augmented copies of a text")
    p.add_argument("--text", required=True)
    p.add_argument("--lexicon-file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--copies", type=int, default=2)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("verify", help="run the built-in verification suite")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
