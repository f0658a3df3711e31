"""Command-line entry point: prepare, stats, train, grid, eval, errors, compare, report.

Exit codes: 0 success, 1 usage, 2 data, 3 model/config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .corpus import (
    MLMA_COLUMNS,
    CONAN_FIELDS,
    Corpus,
    SplitSpec,
    compute_stats,
    file_digest,
    parse_conan,
    parse_mlma,
    prepare_language,
    read_conan_json,
    read_jsonl,
    read_mlma_csv,
    write_jsonl,
)
from .encoding import build_feature_cache, cache_path_for, choose_max_seq_len, encoder_fingerprint, make_backbone
from .error_analysis import (
    ErrorReport,
    aggregate,
    collect_errors,
    compare,
    load_lexicons,
    render_comparison,
    render_error_report,
)
from .errors import ConfigError, DataError, UsageError, XhateError
from .evaluation import EvalReport, evaluate, language_pair, render_report
from .model import load_head
from .synthetic import synthetic_corpus
from .training import (
    SEQ_LEN_BOUNDS,
    SEQ_LEN_COVERAGE,
    GridCell,
    GridSpec,
    HyperParams,
    corpus_language,
    grid_from_manifest,
    load_grid_config,
    run_grid,
    run_id_for,
)

log = logging.getLogger("xhate")

# counts reported for the authors' snapshot of the source datasets
REPRO_TARGETS = {"en": 1374, "fr": 1174}


@dataclass
class CliConfig:
    cache_dir: Path
    run_dir: Path | None = None
    lexicon_dir: Path | None = None
    model_dir: Path | None = None
    hyperparams: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "CliConfig":
        doc = {}
        if path:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        cache = os.environ.get("XHATE_CACHE_DIR") or doc.get("cache_dir") or Path.home() / ".cache" / "xhate"
        cfg = cls(
            Path(cache).expanduser().resolve(),
            _opt_path(doc.get("run_dir")),
            _opt_path(doc.get("lexicon_dir")),
            _opt_path(doc.get("model_dir")),
            dict(doc.get("hyperparams", {})),
        )
        for p in (cfg.cache_dir, cfg.run_dir):
            if p is None:
                continue
            try:
                p.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"cannot create {p}: {exc}") from None
            if not os.access(p, os.W_OK):
                raise ConfigError(f"{p} is not writable")
        return cfg


def _opt_path(p):
    return Path(p).expanduser().resolve() if p else None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _json_arg(value: str | None, default: dict) -> dict:
    """A JSON object given inline or as a path to a file."""
    if not value:
        return dict(default)
    text = Path(value).read_text(encoding="utf-8") if Path(value).is_file() else value
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not a JSON object: {value!r} ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"expected a JSON object, got {value!r}")
    return doc


def _guard(paths, overwrite: bool) -> None:
    taken = [str(p) for p in paths if Path(p).exists()]
    if taken and not overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(taken)} (pass --overwrite)")


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=1) + "\n"


# --------------------------------------------------------------------------
# prepare / stats


def cmd_prepare(args, cfg: CliConfig) -> int:
    out = Path(args.out)
    targets = [out / "en.jsonl", out / "fr.jsonl", out / "stats.json", out / "prepare_report.json"]
    _guard(targets, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)

    if args.synthetic:
        corpora = {
            "en": synthetic_corpus("en", args.n_en, args.seed),
            "fr": synthetic_corpus("fr", args.n_fr, args.seed),
        }
        reports, problems = {}, []
    else:
        corpora, reports, problems = _prepare_real(args)

    for lang, corpus in corpora.items():
        write_jsonl(corpus, out / f"{lang}.jsonl")
    stats = {lang: compute_stats(c).to_dict() for lang, c in corpora.items()}
    (out / "stats.json").write_text(_dump(stats), encoding="utf-8")
    (out / "prepare_report.json").write_text(
        _dump({
            "toolkit_version": __version__,
            "languages": {k: r.to_dict() for k, r in reports.items()},
            "problems": [{"file": f, "row": p.row, "reason": p.reason} for f, p in problems],
        }),
        encoding="utf-8",
    )
    for f, p in problems:
        print(f"warning: {f} row {p.row}: {p.reason}", file=sys.stderr)
    for lang, corpus in corpora.items():
        r = reports.get(lang)
        if r is None:
            print(f"{lang}: {len(corpus)} samples -> {out / (lang + '.jsonl')}")
        else:
            print(
                f"{lang}: {r.n_raw} raw -> {r.n_final} prepared (shrunk by {r.shrinkage:.1%}; "
                f"{r.n_discarded} hashtag/mention, {r.n_empty} empty, "
                f"{r.n_label_conflicts} label conflicts among duplicates)"
            )
    if args.reproduction:
        _print_reproduction(reports)
    return 0


def _prepare_real(args):
    if not (args.mlma or args.mlma_en or args.mlma_fr or args.conan):
        raise UsageError("give at least one of --mlma/--mlma-en/--mlma-fr/--conan, or --synthetic")
    column_map = _json_arg(args.column_map, MLMA_COLUMNS)
    field_map = _json_arg(args.field_map, CONAN_FIELDS)
    mlma, problems, provenance = [], [], {"en": [], "fr": []}
    for path, lang in ((args.mlma, None), (args.mlma_en, "en"), (args.mlma_fr, "fr")):
        if not path:
            continue
        rows, fieldnames = read_mlma_csv(path)
        found = []
        if lang is None:
            cmap = {"language": "lang", **column_map}
        else:
            cmap = {k: v for k, v in column_map.items() if k != "language"}
        mlma += parse_mlma(
            rows, cmap, args.tag_separator,
            language=lang, fieldnames=fieldnames, problems=found,
        )
        problems += [(str(path), p) for p in found]
        for k in (provenance if lang is None else [lang]):
            provenance[k].append(file_digest(path))
    conan = []
    if args.conan:
        conan = parse_conan(read_conan_json(args.conan), field_map)
        for k in provenance:
            provenance[k].append(file_digest(args.conan))
    corpora, reports = {}, {}
    for lang in ("en", "fr"):
        corpora[lang], reports[lang] = prepare_language(lang, mlma, conan, provenance[lang])
    return corpora, reports, problems


def _print_reproduction(reports) -> None:
    print("\nreproduction check (informational; source datasets drift between releases):")
    for lang, target in REPRO_TARGETS.items():
        r = reports.get(lang)
        if r is None:
            continue
        flag = "matches" if target in (r.n_final, r.n_dedup_without_filter) else "differs (dataset drift?)"
        print(
            f"  {lang}: {r.n_final} after filter+dedup, {r.n_dedup_without_filter} after dedup only; "
            f"published {target} -> {flag}"
        )


def cmd_stats(args, cfg: CliConfig) -> int:
    corpus = read_jsonl(args.corpus)
    tokenizer, _ = make_backbone(args.backbone, 1, model_dir=cfg.model_dir)
    stats = compute_stats(corpus, tokenizer)
    doc = stats.to_dict()
    if stats.n_total:
        doc["suggested_max_seq_len"] = choose_max_seq_len(
            stats.token_length_histogram, *SEQ_LEN_BOUNDS, SEQ_LEN_COVERAGE
        )
    text = _dump(doc)
    if args.out:
        _guard([args.out], args.overwrite)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# train / grid


def _hyperparams(args, cfg: CliConfig) -> HyperParams:
    d = dict(cfg.hyperparams)
    flag_map = {
        "epochs": "epochs", "lr": "learning_rate", "batch_size": "batch_size", "optimizer": "optimizer",
        "weight_decay": "weight_decay", "seed": "seed", "max_seq_len": "max_seq_len",
        "d_hidden": "d_hidden", "dropout": "dropout_p",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            d[key] = value
    if args.extra_dense:
        d["extra_dense"] = True
    if args.no_dropout:
        d["use_dropout"] = False
    if args.no_class_weights:
        d["class_weighting"] = False
    return HyperParams.from_dict(d)


def _split_spec(text: str, seed: int, stratified: bool) -> SplitSpec:
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--split expects TRAIN:VAL parts, got {text!r}") from None
    return SplitSpec(a, b, seed, stratified)


def _print_results(results) -> None:
    reports = [r.report for r in results if r.report is not None]
    for r in results:
        status = r.status if r.error is None else f"{r.status}: {r.error}"
        print(f"{r.run_id}: {status}")
    if reports:
        print()
        print(render_report(reports, "text"), end="")


def cmd_train(args, cfg: CliConfig) -> int:
    out = Path(args.out or cfg.run_dir or "runs")
    if args.manifest:
        grid = grid_from_manifest(args.manifest, str(cfg.cache_dir), cfg.model_dir)
        if args.run_id:
            grid.cells = [GridCell(grid.cells[0].hyperparams, grid.cells[0].backbone_id, args.run_id)]
    else:
        if not (args.train and args.test):
            raise UsageError("train needs --train and --test (or --manifest)")
        hp = _hyperparams(args, cfg)
        grid = GridSpec(
            [GridCell(hp, args.backbone, args.run_id or "")],
            read_jsonl(args.train), read_jsonl(args.test),
            _split_spec(args.split, args.split_seed, not args.no_stratify),
            str(Path(args.train).resolve()), str(Path(args.test).resolve()),
            str(cfg.cache_dir), cfg.model_dir,
        )
    results = run_grid(grid, out, jobs=1, overwrite=args.overwrite)
    _print_results(results)
    for r in results:
        if r.status == "complete":
            print(f"\nrun directory: {out / r.run_id}")
    return 0 if all(r.status == "complete" for r in results) else 3


def cmd_grid(args, cfg: CliConfig) -> int:
    grid = load_grid_config(args.grid, str(cfg.cache_dir), cfg.model_dir)
    out = Path(args.out or cfg.run_dir or "runs")
    results = run_grid(grid, out, jobs=args.jobs, overwrite=args.overwrite)
    _print_results(results)
    print(f"\ngrid manifest: {out / 'grid_manifest.json'}")
    return 0 if all(r.status == "complete" for r in results) else 3


# --------------------------------------------------------------------------
# eval / errors / compare / report


def _load_run(run_dir: Path) -> dict:
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    except OSError:
        raise DataError(f"{run_dir} is not a run directory (no manifest.json)") from None
    head_path = run_dir / "head.json"
    if file_digest(head_path) != manifest["digests"]["head_file"]:
        raise DataError(f"{head_path} does not match the digest in its manifest")
    return manifest


def _eval_corpus(args, manifest: dict, run_dir: Path) -> tuple[Corpus, str]:
    if args.split == "val":
        train = read_jsonl(manifest["corpora"]["train"]["path"])
        if train.digest() != manifest["corpora"]["train"]["digest"]:
            raise DataError("training corpus changed since the run; refusing to rebuild its validation split")
        splits = json.loads((run_dir / "splits.json").read_text(encoding="utf-8"))
        return train.subset(splits["val_ids"]), "val"
    path = args.corpus or manifest["corpora"]["test"]["path"]
    return read_jsonl(path), Path(path).stem


def _predict_report(run_dir: Path, manifest: dict, corpus: Corpus, cfg: CliConfig) -> EvalReport:
    params, spec = load_head(run_dir / "head.json")
    length = manifest["max_seq_len"]
    tokenizer, encoder = make_backbone(manifest["backbone_id"], length, model_dir=cfg.model_dir)
    fp = encoder_fingerprint(replace(encoder.config, max_seq_len=length), tokenizer.spec)
    if fp != manifest["encoder_fingerprint"]:
        raise ConfigError("encoder fingerprint differs from the one the head was trained on")
    cache = cache_path_for(cfg.cache_dir, corpus.digest(), fp)
    feats = build_feature_cache(corpus, tokenizer, encoder, length, cache)
    train_lang = manifest["language_pair"].split("→")[0]
    return evaluate(
        params, spec, feats, corpus.labels, language_pair(train_lang, corpus_language(corpus)),
        manifest["run_id"], backbone_id=manifest["backbone_id"],
        cell_label=HyperParams.from_dict(manifest["hyperparams"]).cell_label,
    )


def cmd_eval(args, cfg: CliConfig) -> int:
    run_dir = Path(args.run_dir)
    manifest = _load_run(run_dir)
    corpus, name = _eval_corpus(args, manifest, run_dir)
    out = Path(args.out) if args.out else run_dir / f"eval_{name}.json"
    _guard([out], args.overwrite)
    report = _predict_report(run_dir, manifest, corpus, cfg)
    out.write_text(report.to_json(), encoding="utf-8")
    print(render_report([report], args.format), end="")
    print(f"\npair {report.language_pair}: macro {report.macro_avg_f1:.4f}, "
          f"weighted {report.weighted_avg_f1:.4f}, accuracy {report.accuracy:.4f} -> {out}")
    return 0


def cmd_errors(args, cfg: CliConfig) -> int:
    run_dir = Path(args.run_dir)
    manifest = _load_run(run_dir)
    corpus, _ = _eval_corpus(args, manifest, run_dir)
    out = Path(args.out) if args.out else run_dir / "errors.json"
    _guard([out], args.overwrite)
    report = _predict_report(run_dir, manifest, corpus, cfg)
    lexicon_dir = args.lexicon_dir or cfg.lexicon_dir
    lexicons = load_lexicons(lexicon_dir) if lexicon_dir else None
    errors = aggregate(collect_errors(report, corpus, lexicons), manifest["run_id"], corpus.digest(), len(corpus))
    out.write_text(errors.to_json(), encoding="utf-8")
    print(render_error_report(errors), end="")
    print(f"\n-> {out}")
    return 0


def _load_errors(path: str) -> ErrorReport:
    p = Path(path)
    if p.is_dir():
        p = p / "errors.json"
    try:
        return ErrorReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"cannot read error report {p}: {exc}") from None


def cmd_compare(args, cfg: CliConfig) -> int:
    a, b = _load_errors(args.a), _load_errors(args.b)
    comp = compare(a, b)
    doc = _dump(comp.to_dict())
    if args.out:
        _guard([args.out], args.overwrite)
        Path(args.out).write_text(doc, encoding="utf-8")
    print(doc if args.format == "json" else render_comparison(comp, a, b), end="")
    return 0


def _collect_reports(paths) -> list[EvalReport]:
    found = []
    for p in map(Path, paths):
        if p.is_file():
            files = [p]
        elif (p / "eval_report.json").is_file():
            files = [p / "eval_report.json"]
        else:
            files = sorted(p.glob("*/eval_report.json"))
        if not files:
            raise DataError(f"no eval_report.json under {p}")
        found += files
    return [EvalReport.from_dict(json.loads(f.read_text(encoding="utf-8"))) for f in found]


def cmd_report(args, cfg: CliConfig) -> int:
    reports = _collect_reports(args.runs)
    text = render_report(reports, args.format)
    if args.out:
        _guard([args.out], args.overwrite)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xhate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"xhate {__version__}")
    p.add_argument("--config", help="JSON config file (paths and hyperparameter defaults)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="build prepared EN/FR corpora from MLMA and CONAN exports")
    s.add_argument("--mlma", help="MLMA CSV with a language column")
    s.add_argument("--mlma-en", help="English MLMA CSV")
    s.add_argument("--mlma-fr", help="French MLMA CSV")
    s.add_argument("--conan", help="CONAN JSON / JSON Lines")
    s.add_argument("--out", required=True)
    s.add_argument("--column-map", help="MLMA column map (JSON or file)")
    s.add_argument("--field-map", help="CONAN field map (JSON or file)")
    s.add_argument("--tag-separator", default="_")
    s.add_argument("--synthetic", action="store_true", help="write the seeded toy bilingual corpus instead")
    s.add_argument("--n-en", type=int, default=500)
    s.add_argument("--n-fr", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--reproduction", action="store_true", help="compare counts with the published ones")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("stats", help="dataset statistics and a suggested max sequence length")
    s.add_argument("corpus")
    s.add_argument("--backbone", default="stub-32")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train and evaluate one head")
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--manifest", help="re-execute the run described by a manifest")
    s.add_argument("--out", help="parent directory for run directories")
    s.add_argument("--run-id")
    s.add_argument("--backbone", default="stub-32")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--optimizer", choices=["adam", "adamw"])
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-seq-len", type=int)
    s.add_argument("--d-hidden", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--extra-dense", action="store_true", help="ablation: second dense layer")
    s.add_argument("--no-dropout", action="store_true", help="ablation: no dropout layer")
    s.add_argument("--no-class-weights", action="store_true")
    s.add_argument("--split", default="3:1")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--no-stratify", action="store_true")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="run every cell of a grid file")
    s.add_argument("grid")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_grid)

    for name, func, help_ in (
        ("eval", cmd_eval, "evaluate a trained head on a corpus"),
        ("errors", cmd_errors, "tag and count a run's misclassifications"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--corpus", help="prepared JSONL (default: the run's test corpus)")
        s.add_argument("--split", choices=["val"], help="use the run's own validation split")
        s.add_argument("--out")
        s.add_argument("--overwrite", action="store_true")
        if name == "eval":
            s.add_argument("--format", choices=["text", "json", "markdown"], default="text")
        else:
            s.add_argument("--lexicon-dir")
        s.set_defaults(func=func)

    s = sub.add_parser("compare", help="compare two error reports on the same test corpus")
    s.add_argument("a", help="errors.json of the reference run (or its run directory)")
    s.add_argument("b")
    s.add_argument("--format", choices=["text", "json"], default="text")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", help="results tables across runs")
    s.add_argument("runs", nargs="+", help="run directories, grid output directories or eval report files")
    s.add_argument("--format", choices=["text", "json", "markdown"], default="text")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = CliConfig.load(args.config)
        return args.func(args, cfg)
    except XhateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
