"""Pipeline driver: synthetic corpus generation, vocabulary building,
stratified splitting, training, evaluation, the analysis studies, and the
review service, all under one command with a shared YAML configuration.

Precedence is flags over config file over built-in defaults. One global
seed fans out to per-module seeds through seed_for(), so a single knob
reproduces every stage while keeping their random streams independent.
Every run writes its resolved settings next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from .analysis import (
    category_study,
    depth_study,
    field_study,
    frequency_study,
    frozen_comparison,
    make_provenance,
    save_table,
    volume_sweep,
)
from .corpus import (
    Corpus,
    SECTION_NAMES,
    SyntheticConfig,
    build_input,
    generate_synthetic,
    load_corpus,
    save_corpus,
)
from .evaluation import save_report
from .model import ModelConfig, init, load_checkpoint, save_checkpoint
from .pipeline import build_dataset, evaluate_model
from .service import DecisionStore, create_app, load_bundle, save_codes
from .splitter import load_plan, save_plan, stratified_split
from .terminology import load_concept_graph
from .tokenizer import build_vocab, load_vocab, save_vocab
from .trainer import TrainConfig, save_log, train


class CliError(ValueError):
    pass


def seed_for(global_seed: int, module: str) -> int:
    """Deterministic per-module seed: the first 8 bytes of
    sha256("<global_seed>:<module>") as a big-endian integer."""
    digest = hashlib.sha256(f"{global_seed}:{module}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# --- configuration -----------------------------------------------------------
# The file is YAML with this exact key tree; unknown keys are rejected so a
# typo cannot silently fall back to a default.

_DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/run",
    "corpus": None,
    "plan": None,
    "vocab": None,
    "checkpoint": None,
    "codes": None,
    "events": None,
    "fields": ["diagnosis", "assessment"],
    "generator": {
        "n_records": 2000,
        "n_codes": 50,
        "zipf_exponent": 1.2,
        "mean_codes_per_visit": 2.0,
        "distractor_rate": 0.2,
    },
    "tokenizer": {"max_len": 256, "min_count": 1, "max_size": 50000},
    "split": {"fractions": [0.8, 0.1, 0.1]},
    "model": {
        "embed_dim": 128,
        "n_blocks": 2,
        "n_heads": 4,
        "dropout": 0.25,
        "backbone_frozen": False,
    },
    "train": {
        "batch_size": 32,
        "peak_lr": 3e-5,
        "warmup_steps": 5000,
        "max_epochs": 50,
        "patience": 5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.01,
        "threshold": 0.5,
    },
    "analysis": {
        "fractions": [0.25, 0.5, 0.75, 1.0],
        "permutations": [["diagnosis"], ["assessment"], ["diagnosis", "assessment"]],
    },
    "terminology": {
        "concepts": None,
        "relationships": None,
        "root": None,
        "mapping": None,
        "categories": None,
    },
    "serve": {"host": "127.0.0.1", "port": 8077, "top_k": 20, "threshold": 0.5},
}


def _check_keys(obj: dict, template: dict, prefix: str = "") -> None:
    for key, value in obj.items():
        if key not in template:
            raise CliError(f"config: unknown key {prefix}{key}")
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config: {prefix}{key} must be a mapping")
            _check_keys(value, template[key], f"{prefix}{key}.")


def _merged(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults overlaid with the YAML file (when given); unknown keys and
    non-mapping documents are rejected."""
    if path is None:
        return json.loads(json.dumps(_DEFAULTS))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"config: cannot read {path} ({err})") from None
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise CliError(f"config: {path} is not valid YAML ({err})") from None
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise CliError(f"config: {path} must hold a mapping at the top level")
    _check_keys(obj, _DEFAULTS)
    return _merged(_DEFAULTS, obj)


class Settings:
    """Resolved run settings: config plus flag overrides plus derived paths."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            self.cfg["seed"] = args.seed
        if getattr(args, "out", None) is not None:
            self.cfg["out"] = args.out
        self.out = Path(self.cfg["out"])
        self.seed = int(self.cfg["seed"])
        self.args = args

    def path(self, key: str, default_name: str, flag: str | None = None) -> Path:
        """Artifact path: flag > config key > <out>/<default_name>."""
        flag_value = getattr(self.args, flag or key, None)
        if flag_value is not None:
            return Path(flag_value)
        if self.cfg.get(key):
            return Path(self.cfg[key])
        return self.out / default_name

    def section(self, name: str) -> dict:
        return dict(self.cfg[name])

    def fields(self) -> tuple[str, ...]:
        raw = getattr(self.args, "fields", None)
        names = tuple(raw.split(",")) if raw else tuple(self.cfg["fields"])
        unknown = [f for f in names if f not in SECTION_NAMES]
        if unknown:
            raise CliError(f"unknown section names {unknown}; expected {SECTION_NAMES}")
        if not names:
            raise CliError("fields must name at least one section")
        return names

    def write_resolved(self, command: str, extra: dict | None = None) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        obj = {"command": command, **self.cfg}
        if extra:
            obj.update(extra)
        path = self.out / f"{command.replace(' ', '-')}-config.json"
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _override_section(values: dict, args: argparse.Namespace, keys: dict[str, str]) -> dict:
    """Replace section values with flag values that were actually supplied."""
    out = dict(values)
    for flag, key in keys.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _model_config(settings: Settings, vocab_size: int, n_classes: int, max_len: int,
                  frozen: bool | None = None) -> ModelConfig:
    section = _override_section(
        settings.section("model"), settings.args,
        {"embed_dim": "embed_dim", "n_blocks": "n_blocks",
         "n_heads": "n_heads", "dropout": "dropout"},
    )
    if frozen is None:
        frozen = bool(getattr(settings.args, "frozen", False) or section["backbone_frozen"])
    return ModelConfig(
        vocab_size=vocab_size,
        n_classes=n_classes,
        max_len=max_len,
        embed_dim=int(section["embed_dim"]),
        n_blocks=int(section["n_blocks"]),
        n_heads=int(section["n_heads"]),
        dropout=float(section["dropout"]),
        backbone_frozen=frozen,
    )


def _train_config(settings: Settings) -> TrainConfig:
    section = _override_section(
        settings.section("train"), settings.args,
        {"batch_size": "batch_size", "peak_lr": "peak_lr",
         "warmup_steps": "warmup_steps", "max_epochs": "max_epochs",
         "patience": "patience", "threshold": "threshold"},
    )
    return TrainConfig(
        batch_size=int(section["batch_size"]),
        peak_lr=float(section["peak_lr"]),
        warmup_steps=int(section["warmup_steps"]),
        max_epochs=int(section["max_epochs"]),
        patience=int(section["patience"]),
        beta1=float(section["beta1"]),
        beta2=float(section["beta2"]),
        eps=float(section["eps"]),
        weight_decay=float(section["weight_decay"]),
        threshold=float(section["threshold"]),
        seed=seed_for(settings.seed, "trainer"),
    )


def _load_graph(settings: Settings):
    section = settings.section("terminology")
    for flag in ("concepts", "relationships", "root", "mapping", "categories"):
        value = getattr(settings.args, f"terminology_{flag}", None)
        if value is not None:
            section[flag] = value
    if not section["concepts"]:
        return None
    for required in ("relationships", "root"):
        if not section[required]:
            raise CliError(f"terminology.{required} is required with terminology.concepts")
    return load_concept_graph(
        section["concepts"],
        section["relationships"],
        section["root"],
        mapping_path=section["mapping"],
        categories_path=section["categories"],
    )


def _require_graph(settings: Settings):
    graph = _load_graph(settings)
    if graph is None:
        raise CliError("this study needs terminology files (terminology.concepts, "
                       "terminology.relationships, terminology.root)")
    return graph


# --- subcommands ----------------------------------------------------------------


def cmd_gen_synthetic(settings: Settings) -> int:
    section = _override_section(
        settings.section("generator"), settings.args,
        {"n_records": "n_records", "n_codes": "n_codes"},
    )
    config = SyntheticConfig(
        n_records=int(section["n_records"]),
        n_codes=int(section["n_codes"]),
        zipf_exponent=float(section["zipf_exponent"]),
        mean_codes_per_visit=float(section["mean_codes_per_visit"]),
        distractor_rate=float(section["distractor_rate"]),
    )
    corpus = generate_synthetic(config, seed=seed_for(settings.seed, "corpus"))
    path = settings.path("corpus", "corpus.jsonl")
    settings.write_resolved("gen-synthetic", {"corpus_path": str(path)})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, path)
    print(f"wrote {len(corpus)} records, {corpus.n_codes} codes to {path}")
    return 0


def _read_corpus(settings: Settings) -> Corpus:
    path = settings.path("corpus", "corpus.jsonl")
    if not path.exists():
        raise CliError(f"corpus file {path} not found (run gen-synthetic or point "
                       f"--corpus at an existing JSONL corpus)")
    return load_corpus(path)


def cmd_build_vocab(settings: Settings) -> int:
    corpus = _read_corpus(settings)
    tok = settings.section("tokenizer")
    flag_max_len = getattr(settings.args, "max_len", None)
    max_len = int(tok["max_len"]) if flag_max_len is None else int(flag_max_len)
    fields = settings.fields()
    vocab = build_vocab(
        (build_input(r, fields) for r in corpus.records),
        min_count=int(tok["min_count"]),
        max_size=int(tok["max_size"]),
        max_len=int(max_len),
    )
    path = settings.path("vocab", "vocab.tsv")
    settings.write_resolved("build-vocab", {"vocab_path": str(path)})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, path)
    print(f"wrote {vocab.size} token ids (max_len {vocab.max_len}) to {path}")
    return 0


def cmd_split(settings: Settings) -> int:
    corpus = _read_corpus(settings)
    raw = getattr(settings.args, "fractions", None)
    if raw is not None:
        fractions = tuple(float(x) for x in raw.split(","))
    else:
        fractions = tuple(float(x) for x in settings.cfg["split"]["fractions"])
    if len(fractions) != 3:
        raise CliError(f"need train,validation,test fractions, got {fractions}")
    plan = stratified_split(corpus, fractions, seed=seed_for(settings.seed, "splitter"))
    path = settings.path("plan", "plan.jsonl")
    settings.write_resolved("split", {"plan_path": str(path)})
    path.parent.mkdir(parents=True, exist_ok=True)
    save_plan(plan, path)
    sizes = {name: len(plan.ids(name)) for name in ("train", "validation", "test")}
    print(f"wrote split plan {sizes} to {path}")
    return 0


def _load_split_artifacts(settings: Settings):
    corpus = _read_corpus(settings)
    plan_path = settings.path("plan", "plan.jsonl")
    if not plan_path.exists():
        raise CliError(f"split plan {plan_path} not found (run split first)")
    plan = load_plan(plan_path)
    vocab_path = settings.path("vocab", "vocab.tsv")
    if not vocab_path.exists():
        raise CliError(f"vocabulary {vocab_path} not found (run build-vocab first)")
    vocab = load_vocab(vocab_path)
    return corpus, plan, vocab


def cmd_train(settings: Settings) -> int:
    corpus, plan, vocab = _load_split_artifacts(settings)
    fields = settings.fields()
    splits = build_dataset(corpus, plan, vocab, fields=fields)
    model_config = _model_config(settings, vocab.size, corpus.n_codes, vocab.max_len)
    train_config = _train_config(settings)
    settings.write_resolved("train", {
        "fields": list(fields),
        "model_config": asdict(model_config),
        "train_config": asdict(train_config),
        "model_seed": seed_for(settings.seed, "model"),
    })
    state = init(model_config, seed=seed_for(settings.seed, "model"))
    best, log = train(state, splits["train"], splits["validation"], train_config)

    save_checkpoint(best, settings.path("checkpoint", "model.npz"))
    save_codes(splits["train"].codes, settings.path("codes", "codes.json"))
    save_log(log, settings.out / "train_log.csv", settings.out / "train_summary.json")
    report = evaluate_model(best, splits["test"], train_config.threshold)
    save_report(report, settings.out / "metrics.json", settings.out / "metrics.csv")
    print(
        f"trained {len(log.epochs)} epochs ({log.stop_reason}), best epoch "
        f"{log.best_epoch}; test weighted F1 {report.weighted_f1:.2f}, "
        f"exact match {report.exact_match:.2f}"
    )
    return 0


def _load_trained(settings: Settings):
    checkpoint_path = settings.path("checkpoint", "model.npz")
    if not checkpoint_path.exists():
        raise CliError(f"checkpoint {checkpoint_path} not found (run train first)")
    state = load_checkpoint(checkpoint_path)
    return state


def _evaluation_report(settings: Settings, split_name: str):
    corpus, plan, vocab = _load_split_artifacts(settings)
    state = _load_trained(settings)
    if vocab.size != state.config.vocab_size:
        raise CliError(
            f"vocabulary size {vocab.size} does not match the checkpoint's "
            f"vocab_size {state.config.vocab_size}"
        )
    if corpus.n_codes != state.config.n_classes:
        raise CliError(
            f"corpus has {corpus.n_codes} codes but the checkpoint expects "
            f"{state.config.n_classes} classes"
        )
    splits = build_dataset(corpus, plan, vocab, fields=settings.fields())
    if split_name not in splits:
        raise CliError(f"unknown split {split_name!r}")
    flag_threshold = getattr(settings.args, "threshold", None)
    threshold = float(settings.cfg["train"]["threshold"]
                      if flag_threshold is None else flag_threshold)
    report = evaluate_model(state, splits[split_name], threshold)
    return corpus, report


def cmd_evaluate(settings: Settings) -> int:
    split_name = getattr(settings.args, "split", None) or "test"
    _, report = _evaluation_report(settings, split_name)
    settings.write_resolved("evaluate", {"split": split_name})
    save_report(report, settings.out / "metrics.json", settings.out / "metrics.csv")
    print(
        f"{split_name}: weighted F1 {report.weighted_f1:.2f}, precision "
        f"{report.weighted_precision:.2f}, recall {report.weighted_recall:.2f}, "
        f"exact match {report.exact_match:.2f} over {report.n_records} records"
    )
    return 0


def cmd_analyze(settings: Settings) -> int:
    study = settings.args.study
    settings.write_resolved(f"analyze-{study}")
    csv_path = settings.out / f"{study}.csv"

    if study in ("frequency", "depth", "categories"):
        corpus, report = _evaluation_report(settings, "test")
        provenance = make_provenance(corpus, seeds=[settings.seed])
        if study == "frequency":
            table, r = frequency_study(corpus, report, provenance=provenance)
            note = f"pearson r {'undefined' if r is None else format(r, '.4f')}"
        elif study == "depth":
            table = depth_study(_require_graph(settings), report, provenance=provenance)
            note = f"{table.provenance['excluded_codes']} codes not represented"
        else:
            table = category_study(_require_graph(settings), report, provenance=provenance)
            note = f"{len(table.rows)} categories"
        save_table(table, csv_path)
        print(f"wrote {len(table.rows)} rows to {csv_path} ({note})")
        return 0

    corpus, plan, vocab = _load_split_artifacts(settings)
    template = _model_config(settings, vocab.size, corpus.n_codes, vocab.max_len)
    train_config = _train_config(settings)
    fields = settings.fields()
    if study == "volume":
        raw = getattr(settings.args, "fractions", None)
        if raw is not None:
            fractions = [float(x) for x in raw.split(",")]
        else:
            fractions = [float(x) for x in settings.cfg["analysis"]["fractions"]]
        table = volume_sweep(corpus, plan, fractions, template, train_config,
                             fields=fields, csv_path=csv_path)
    elif study == "fields":
        permutations = [tuple(p) for p in settings.cfg["analysis"]["permutations"]]
        table = field_study(corpus, plan, permutations, template, train_config)
        save_table(table, csv_path)
    elif study == "frozen":
        table = frozen_comparison(corpus, plan, template, train_config, fields=fields)
        save_table(table, csv_path)
    else:  # argparse choices make this unreachable
        raise CliError(f"unknown study {study!r}")
    print(f"wrote {len(table.rows)} rows to {csv_path}")
    return 0


def cmd_serve(settings: Settings) -> int:
    serve_cfg = _override_section(
        settings.section("serve"), settings.args,
        {"host": "host", "port": "port", "top_k": "top_k", "threshold": "threshold"},
    )
    bundle = None
    checkpoint_path = settings.path("checkpoint", "model.npz")
    if checkpoint_path.exists():
        bundle = load_bundle(
            checkpoint_path,
            settings.path("vocab", "vocab.tsv"),
            settings.path("codes", "codes.json"),
        )
    graph = _load_graph(settings)
    known = set(bundle.codes) if bundle else set()
    if graph is not None:
        known |= set(graph.concepts)
    store = DecisionStore(
        settings.path("events", "events.jsonl"),
        known_codes=frozenset(known) if known else None,
    )
    settings.write_resolved("serve", {
        "model_loaded": bundle is not None,
        "terminology_loaded": graph is not None,
    })
    app = create_app(
        store,
        bundle=bundle,
        graph=graph,
        default_top_k=int(serve_cfg["top_k"]),
        default_threshold=float(serve_cfg["threshold"]),
    )
    import uvicorn

    print(f"serving on {serve_cfg['host']}:{serve_cfg['port']} "
          f"(model_loaded={bundle is not None})")
    uvicorn.run(app, host=str(serve_cfg["host"]), port=int(serve_cfg["port"]),
                log_level="warning")
    return 0


# --- argument parsing ---------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int, help="global seed (fans out per module)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--corpus", help="corpus JSONL path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dxcoder",
        description="diagnosis-coding pipeline: generate, split, train, "
                    "evaluate, analyze, serve",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic labeled corpus")
    _add_common(p)
    p.add_argument("--n-records", dest="n_records", type=int)
    p.add_argument("--n-codes", dest="n_codes", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-vocab", help="build the token vocabulary from the corpus")
    _add_common(p)
    p.add_argument("--vocab", help="vocabulary TSV path")
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--fields", help="comma-separated section names")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("split", help="write a stratified train/validation/test plan")
    _add_common(p)
    p.add_argument("--plan", help="plan JSONL path")
    p.add_argument("--fractions", help="train,validation,test fractions")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune a model on the split corpus")
    _add_common(p)
    for flag in ("--plan", "--vocab", "--checkpoint", "--codes", "--fields"):
        p.add_argument(flag)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--frozen", action="store_true", default=None,
                   help="freeze the backbone; train only pooler and classifier")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved checkpoint on one split")
    _add_common(p)
    for flag in ("--plan", "--vocab", "--checkpoint", "--fields"):
        p.add_argument(flag)
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="run one analysis study")
    p.add_argument("study", choices=("frequency", "depth", "volume",
                                     "fields", "frozen", "categories"))
    _add_common(p)
    for flag in ("--plan", "--vocab", "--checkpoint", "--fields"):
        p.add_argument(flag)
    p.add_argument("--fractions", help="volume study fractions, comma-separated")
    p.add_argument("--threshold", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--peak-lr", dest="peak_lr", type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--dropout", type=float)
    for flag in ("concepts", "relationships", "root", "mapping", "categories"):
        p.add_argument(f"--terminology-{flag}", dest=f"terminology_{flag}")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="run the suggestion and review service")
    _add_common(p)
    for flag in ("--plan", "--vocab", "--checkpoint", "--codes", "--events"):
        p.add_argument(flag)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--threshold", type=float)
    for flag in ("concepts", "relationships", "root", "mapping", "categories"):
        p.add_argument(f"--terminology-{flag}", dest=f"terminology_{flag}")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings(args)
        return args.func(settings)
    except ValueError as err:
        message = str(err).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
