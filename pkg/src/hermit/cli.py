"""Command-line entry point: train, tag, eval, crossval, convert.

Exit codes: 0 success, 1 usage, 2 data fault, 3 internal error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .corpus import (
    TASKS,
    CorpusError,
    kfold_split,
    parse_conll,
    parse_conll_predictions,
    read_nlubm,
    serialize_conll,
)
from .evaluation import (
    evaluate,
    format_mean_std,
    report_records,
    single_report_records,
    wilcoxon_signed_rank,
)
from .layers import EmbeddingError, PrecomputedEmbedding, read_embedding_file
from .model import ABLATIONS, CheckpointError, HermitConfig, TriPrediction, build, decode_all
from .model import load as load_checkpoint
from .model import save as save_checkpoint
from .toydata import bundled_path
from .training import TrainConfig, fit, run_crossval

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("hermit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------- config

_MODEL_KEYS = {f.name: f for f in fields(HermitConfig)
               if f.name not in ("da_labels", "fr_labels", "ar_labels", "embedding_words")}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def _convert(field, raw: str):
    kind = str(field.type)
    text = raw.strip()
    if "None" in kind and text.lower() in ("none", "null", ""):
        return None
    if kind.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise UsageError(f"{field.name}: cannot parse {raw!r}") from None
    return text


def parse_config_text(text: str) -> tuple[dict, dict]:
    """Flat ``key = value`` lines; returns (model overrides, training overrides)."""
    model, train = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"config line {lineno}: expected key = value")
        if key in _MODEL_KEYS:
            model[key] = _convert(_MODEL_KEYS[key], value)
        elif key in _TRAIN_KEYS:
            train[key] = _convert(_TRAIN_KEYS[key], value)
        else:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
    return model, train


def load_config(path) -> tuple[dict, dict]:
    if path is None:
        return {}, {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot read config: {err}") from None
    return parse_config_text(text)


def _overrides(args, model: dict, train: dict) -> None:
    for spec in getattr(args, "set", None) or []:
        m, t = parse_config_text(spec)
        model.update(m)
        train.update(t)
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "embeddings", None):
        model["embedding_mode"] = PrecomputedEmbedding.mode
        model["embedding_source"] = str(args.embeddings)


# ------------------------------------------------------------------ helpers

def _read_corpus(path):
    if str(path) == "toy":
        path = bundled_path()
    try:
        return parse_conll(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    except CorpusError as err:
        raise DataError(f"{path}: {err}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict,
                   outputs: dict, started: str) -> Path:
    def checksums(paths):
        return {k: {"path": str(p), "sha256": _sha256(p) if p and Path(p).is_file() else None}
                for k, p in paths.items()}

    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": checksums(inputs),
        "outputs": checksums(outputs),
        "started": started,
        "finished": _now(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _model_config(corpus, model_over: dict) -> HermitConfig:
    try:
        return HermitConfig.for_corpus(corpus, **model_over)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid model configuration: {err}") from None


def _train_config(train_over: dict) -> TrainConfig:
    try:
        return TrainConfig(**train_over)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training configuration: {err}") from None


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    started = _now()
    model_over, train_over = load_config(args.config)
    _overrides(args, model_over, train_over)
    data = _read_corpus(args.data)
    tcfg = _train_config(train_over)
    if args.dev:
        dev = _read_corpus(args.dev)
        train = data
    else:
        split = max(1, round(tcfg.holdout_fraction * len(data)))
        if len(data) < 2:
            raise DataError("need at least two sentences to hold out a dev slice")
        import numpy as np
        order = np.random.default_rng(tcfg.seed).permutation(len(data))
        dev = [data[i] for i in sorted(order[:split])]
        train = [data[i] for i in sorted(order[split:])]
    if not train or not dev:
        raise DataError("training and dev corpora must be non-empty")
    mcfg = _model_config(data + dev if args.dev else data, model_over)
    if args.ablation:
        mcfg = mcfg.with_ablation(args.ablation)
    try:
        model = build(mcfg, tcfg.seed)
    except EmbeddingError as err:
        raise DataError(str(err)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = out / "history.jsonl"
    try:
        result = fit(model, train, dev, tcfg, history_path=history)
    except (KeyError, EmbeddingError) as err:
        raise DataError(str(err)) from None
    ckpt = out / "model.hmt"
    save_checkpoint(ckpt, model, {"best_epoch": result.best_epoch,
                                  "best_metric": result.best_metric,
                                  "train_config": vars(tcfg)})
    config = {"model": mcfg.to_dict(), "train": vars(tcfg)}
    write_manifest(out, "train", config, tcfg.seed,
                   {"data": bundled_path() if args.data == "toy" else args.data,
                    "dev": args.dev, "config": args.config},
                   {"checkpoint": ckpt, "history": history}, started)
    print(f"best epoch {result.best_epoch}, {tcfg.dev_metric} = {result.best_metric:.4f}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _load_model(path, embeddings):
    provider = None
    if embeddings:
        provider = PrecomputedEmbedding(read_embedding_file(embeddings), source=str(embeddings))
    try:
        model, _ = load_checkpoint(path, provider)
    except OSError as err:
        raise DataError(f"cannot read checkpoint: {err}") from None
    except (CheckpointError, EmbeddingError) as err:
        raise DataError(f"{path}: {err}") from None
    return model


def cmd_tag(args) -> int:
    model = _load_model(args.model, args.embeddings)
    text = sys.stdin.read() if args.input == "-" else Path(args.input).read_text(encoding="utf-8")
    out = sys.stdout
    if args.format == "conll":
        try:
            gold = parse_conll(text)
        except CorpusError as err:
            raise DataError(str(err)) from None
        preds = _predict(model, gold)
        blocks = []
        for s, p in zip(gold, preds):
            lines = [f"# id: {s.id}"]
            for i, tok in enumerate(s.tokens):
                cols = [tok] + [s.tags(t)[i] for t in TASKS] + [p.tags(t)[i] for t in TASKS]
                lines.append(" ".join(cols))
            blocks.append("\n".join(lines))
    else:
        sents = [ln.split() for ln in text.splitlines() if ln.strip()]
        ids = [f"s{i}" for i in range(1, len(sents) + 1)]
        preds = _predict(model, sents, ids)
        blocks = []
        for toks, p in zip(sents, preds):
            blocks.append("\n".join(" ".join([tok] + [p.tags(t)[i] for t in TASKS])
                                    for i, tok in enumerate(toks)))
    if blocks:
        out.write("\n\n".join(blocks) + "\n")
    return EXIT_OK


def _predict(model, sentences, ids=None) -> list[TriPrediction]:
    try:
        if ids is None:
            return decode_all(model, sentences)
        out = []
        for i in range(0, len(sentences), 64):
            out += model.predict_batch(sentences[i:i + 64], ids[i:i + 64])
        return out
    except EmbeddingError as err:
        raise DataError(str(err)) from None


def load_aligned(gold_path, pred_path):
    gold = _read_corpus(gold_path)
    try:
        pred = parse_conll_predictions(Path(pred_path).read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read {pred_path}: {err}") from None
    except CorpusError as err:
        raise DataError(f"{pred_path}: {err}") from None
    for i, g in enumerate(gold):
        if i >= len(pred):
            raise DataError(f"prediction file ends before gold sentence {g.id!r}")
        if tuple(pred[i][1]["tokens"]) != g.tokens:
            raise DataError(f"sentence {g.id!r}: tokens differ between gold and prediction")
    if len(pred) > len(gold):
        raise DataError(f"prediction file has extra sentence {pred[len(gold)][1]['id']!r}")
    return gold, [TriPrediction(*(p[t] for t in TASKS)) for _, p in pred]


def cmd_eval(args) -> int:
    started = _now()
    gold, preds = load_aligned(args.gold, args.pred)
    report = evaluate(gold, preds)
    sys.stdout.write(report.to_text())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(single_report_records(report), encoding="utf-8")
        write_manifest(out.parent, "eval", {}, None, {"gold": args.gold, "pred": args.pred},
                       {"report": out}, started)
    return EXIT_OK


def _read_fold_file(path) -> dict[str, dict[int, float]]:
    table: dict[str, dict[int, float]] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected fold, task, metric, value")
        fold, task, metric, value = parts
        table.setdefault(f"{task}.{metric}", {})[int(fold)] = float(value)
    return table


def cmd_compare(args) -> int:
    a, b = _read_fold_file(args.compare[0]), _read_fold_file(args.compare[1])
    metric = args.metric
    if metric not in a or metric not in b:
        raise DataError(f"metric {metric!r} missing from a result file")
    folds = sorted(set(a[metric]) & set(b[metric]))
    if not folds:
        raise DataError("result files share no folds")
    res = wilcoxon_signed_rank([a[metric][f] for f in folds], [b[metric][f] for f in folds])
    stat = "undefined" if res.statistic is None else f"{res.statistic:g}"
    print(f"metric {metric}, n={res.n} non-zero pairs of {len(folds)}")
    print(f"W={stat} W+={res.w_plus:g} W-={res.w_minus:g} Z={res.z:.3f} "
          f"p={res.p:.4f} ({res.method})")
    return EXIT_OK


def cmd_crossval(args) -> int:
    if args.compare:
        return cmd_compare(args)
    if not args.data:
        raise UsageError("crossval needs --data (or --compare A B)")
    started = _now()
    model_over, train_over = load_config(args.config)
    _overrides(args, model_over, train_over)
    corpus = _read_corpus(args.data)
    tcfg = _train_config(train_over)
    mcfg = _model_config(corpus, model_over)
    try:
        kfold_split(corpus, args.k, tcfg.seed)
    except ValueError as err:
        raise DataError(str(err)) from None
    result = run_crossval(corpus, args.k, mcfg, tcfg, args.ablation, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fold_lines = []
    for f in result.folds:
        for key, value in sorted(f.report.metrics().items()):
            task, metric = key.split(".", 1)
            fold_lines.append(f"{f.fold}\t{task}\t{metric}\t{float(value):.6f}")
    folds_path = out / "folds.tsv"
    folds_path.write_text("\n".join(fold_lines) + "\n", encoding="utf-8")
    agg = result.aggregate()
    agg_path = out / "aggregate.tsv"
    agg_path.write_text(report_records(agg), encoding="utf-8")
    lines = [f"{args.k}-fold cross-validation, ablation {args.ablation or mcfg.ablation}"]
    for f in result.folds:
        m = f.report.metrics()
        lines.append(f"fold {f.fold}: combined F1 {100 * m['combined.f1']:.2f}, "
                     f"combined EM {100 * m['combined.em']:.2f}, best epoch {f.best_epoch}")
    for key in ("intent.f1", "entity.f1", "intent_entity.f1", "da.f1", "fr.f1", "ar.f1",
                "combined.f1", "da.span_f1", "fr.span_f1", "ar.span_f1", "da.em", "fr.em",
                "ar.em", "combined.em"):
        mean, std = agg[key]
        lines.append(f"{key:<18} {format_mean_std(100 * mean, 100 * std)}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    config = {"model": mcfg.to_dict(), "train": vars(tcfg), "k": args.k,
              "ablation": args.ablation}
    write_manifest(out, "crossval", config, tcfg.seed,
                   {"data": bundled_path() if args.data == "toy" else args.data,
                    "config": args.config},
                   {"folds": folds_path, "aggregate": agg_path}, started)
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        with open(args.nlubm_in, encoding="utf-8") as fh:
            corpus = read_nlubm(fh, strip_final_punct=args.strip_final_punct)
    except OSError as err:
        raise DataError(f"cannot read {args.nlubm_in}: {err}") from None
    except CorpusError as err:
        raise DataError(f"{args.nlubm_in}: {err}") from None
    text = serialize_conll(corpus)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hermit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hermit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ablations = list(ABLATIONS)

    p = sub.add_parser("train", help="train a model with early stopping")
    p.add_argument("--data", required=True, help="4-column training corpus, or 'toy'")
    p.add_argument("--dev", help="dev corpus (default: 10%% of --data held out)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=ablations)
    p.add_argument("--embeddings", help="precomputed embedding file (HEMB or text)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tag", help="tag sentences with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-", help="input file, '-' for stdin")
    p.add_argument("--format", choices=("text", "conll"), default="text")
    p.add_argument("--embeddings", help="precomputed embedding file for the input")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("eval", help="score predictions against gold annotations")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True, help="4-column predictions or 7-column tag output")
    p.add_argument("--out", help="write one metric per line to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="k-fold cross-validation, or compare two runs")
    p.add_argument("--data")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ablation", choices=ablations)
    p.add_argument("--seed", type=int)
    p.add_argument("--embeddings")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="crossval-out")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"),
                   help="Wilcoxon test between two folds.tsv files")
    p.add_argument("--metric", default="combined.f1", help="metric used by --compare")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("convert", help="convert NLU-BM style JSON lines to 4-column format")
    p.add_argument("--nlubm-in", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--strip-final-punct", action="store_true",
                   help="leave trailing punctuation outside the DA and FR spans")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:  # --help, --version and usage errors
        return stop.code if isinstance(stop.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"hermit: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"hermit: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except BrokenPipeError:
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except Exception as err:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"hermit: internal error: {err!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
