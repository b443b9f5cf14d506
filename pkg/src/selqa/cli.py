"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .corpus import CorpusError, load_dataset, load_word_list, save_squad, tokenize_example
from .metrics import write_distributions, write_predictions
from .model import ModelError, load_checkpoint
from .perturb import PERTURBATIONS, Lexicon, PerturbationKind, apply, perturbed_qa

logger = logging.getLogger("selqa")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATA_ENV = "SEL_DATA_DIR"
DEFAULT_FILES = {"train": "train-v1.1.json", "dev": "dev-v1.1.json"}


class UsageError(Exception):
    pass


def _data_path(value: Optional[str], which: str) -> Path:
    if value:
        return Path(value)
    root = os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"--{which} not given and {DATA_ENV} is not set")
    return Path(root) / DEFAULT_FILES[which]


def _lexicon(args) -> Optional[Lexicon]:
    return Lexicon.load(args.lexicon) if getattr(args, "lexicon", None) else None


def _abbreviations(args):
    path = getattr(args, "abbreviations", None)
    return load_word_list(path) if path else None


def _parse_kinds(text: str) -> tuple[PerturbationKind, ...]:
    text = text.strip().lower()
    if text in ("", "none"):
        return ()
    if text == "all":
        return PERTURBATIONS
    try:
        return tuple(PerturbationKind.parse(k) for k in text.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr_init"),
                      ("model", "model"), ("entropy_mode", "entropy_mode"), ("max_context_len", "max_context_len")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None):
        overrides["seeds"] = tuple(args.seed)
    if getattr(args, "grid", None):
        overrides["lambda_grid"] = tuple(args.grid)
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    perturb = getattr(args, "perturb", None)
    if perturb is not None:
        kinds = _parse_kinds(perturb)
        lam = dict(cfg.lambdas)
        if args.lam is not None:
            lam = {k.value: args.lam for k in kinds}
        cfg = cfg.with_perturbations(kinds, lam)
    missing = [k for k in cfg.perturbations if k not in cfg.lambdas]
    if missing:
        raise UsageError(f"no lambda for {', '.join(missing)} (use --lambda or a config file)")
    return cfg


def _load_examples(path: Path, fmt: str, strict: bool):
    return load_dataset(path, fmt, strict=strict)


# ---------------------------------------------------------------------------
# commands


def cmd_perturb(args) -> int:
    kind = PerturbationKind.parse(args.kind)
    examples = _load_examples(Path(args.inp), args.in_format, args.strict)
    lexicon = _lexicon(args)
    abbreviations = _abbreviations(args)
    out, skipped = [], []
    for ex in examples:
        tok = tokenize_example(ex, args.max_context_len, abbreviations)
        if tok.answer_span is None:
            skipped.append(ex.id)
            continue
        out.append(perturbed_qa(apply(kind, tok, args.seed, lexicon), ex))
    if skipped:
        logger.warning("%d example(s) skipped: answer not aligned within the context window", len(skipped))
    save_squad(out, args.out)
    print(f"wrote {len(out)} {kind.value} example(s) to {args.out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    examples = _load_examples(Path(args.inp), "mrqa", args.strict)
    save_squad(examples, args.out)
    print(f"wrote {len(examples)} example(s) to {args.out}")
    return EXIT_OK


def _summary_line(r) -> str:
    if r.failed:
        return f"{r.label} seed={r.seed} FAILED: {r.failed}"
    parts = [f"{k}: H={m['entropy']:.2f} F1={100 * m['f1']:.1f}" for k, m in r.metrics.items()]
    return f"{r.label} seed={r.seed}  " + "  ".join(parts)


def cmd_train(args) -> int:
    from .trainer import run_many

    cfg = _config(args)
    train_set = _load_examples(_data_path(args.train, "train"), "squad", args.strict)
    dev_set = _load_examples(_data_path(args.dev, "dev"), "squad", args.strict)
    specs = []
    for seed in cfg.seeds:
        ckpt = None
        if args.checkpoint_dir:
            Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            ckpt = str(Path(args.checkpoint_dir) / f"{cfg.label}-seed{seed}.json")
        specs.append((cfg, seed, ckpt))
    runs = run_many(specs, train_set, dev_set, jobs=args.jobs, ledger=args.ledger)
    for r in runs:
        print(_summary_line(r))
    return EXIT_FAIL if any(r.failed for r in runs) else EXIT_OK


def cmd_tune(args) -> int:
    from .trainer import tune_lambda

    cfg = _config(args)
    kinds = _parse_kinds(args.kinds) or PERTURBATIONS
    train_set = _load_examples(_data_path(args.train, "train"), "squad", args.strict)
    dev_set = _load_examples(_data_path(args.dev, "dev"), "squad", args.strict)
    result = tune_lambda(cfg, train_set, dev_set, kinds=kinds, jobs=args.jobs, retune_all=args.retune_all)
    for t in result.trials:
        print(f"{t['group']:9s} lambda={t['lambda']:<6g} clean F1={100 * t['f1']:.1f} bar={'yes' if t['clears_bar'] else 'no'}")
    for k, lam in result.lambdas.items():
        print(f"chosen {k}: {lam:g}" + ("  (fallback: entropy bar not reached)" if result.fallback[k] else ""))
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import eval_external

    params, vocab = load_checkpoint(args.checkpoint)
    records, dists = [], []
    f1, em, ent = eval_external(
        params, vocab, args.inp, fmt=args.format, ledger=args.ledger, entropy_mode=args.entropy_mode,
        label=args.label, strict=args.strict, records=records, distributions=dists,
    )
    if args.predictions:
        write_predictions(args.predictions, {r.example_id: r.pred_text for r in records})
    if args.distributions:
        write_distributions(args.distributions, dists)
    print(f"F1={100 * f1:.2f} EM={100 * em:.2f} entropy={ent:.4f}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    from .trainer import matrix_from_runs, read_ledger, run_cross_eval, standard_configs, tune_lambda

    if args.run or args.train or args.dev:
        cfg = _config(args)
        train_set = _load_examples(_data_path(args.train, "train"), "squad", args.strict)
        dev_set = _load_examples(_data_path(args.dev, "dev"), "squad", args.strict)
        if args.lambdas:
            lambdas = json.loads(Path(args.lambdas).read_text(encoding="utf-8"))
            lambdas = lambdas.get("lambdas", lambdas)
        else:
            lambdas = tune_lambda(cfg, train_set, dev_set, jobs=args.jobs).lambdas
        configs = standard_configs(cfg, lambdas)
        if args.retune_all:
            shared = tune_lambda(cfg, train_set, dev_set, jobs=args.jobs, retune_all=True).lambdas
            configs[-1] = cfg.with_perturbations(PERTURBATIONS, shared)
        matrix, _ = run_cross_eval(configs, train_set, dev_set, jobs=args.jobs, ledger=args.ledger,
                                   checkpoint_dir=args.checkpoint_dir)
    else:
        if not Path(args.ledger).exists():
            raise UsageError(f"ledger {args.ledger} does not exist")
        matrix = matrix_from_runs(read_ledger(args.ledger))
    report = matrix.render(args.format)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all(_lexicon(args))
    for c in checks:
        print(c.line())
    failed = sum(not c.ok for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args) -> int:
    from .synth import generate_splits

    train_set, dev_set = generate_splits(args.train_size, args.dev_size, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_squad(train_set, out / DEFAULT_FILES["train"])
    save_squad(dev_set, out / DEFAULT_FILES["dev"])
    print(f"wrote {len(train_set)} train and {len(dev_set)} dev examples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", help=f"training set (SQuAD JSON); default ${DATA_ENV}/{DEFAULT_FILES['train']}")
    p.add_argument("--dev", help=f"dev set (SQuAD JSON); default ${DATA_ENV}/{DEFAULT_FILES['dev']}")
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, action="append", help="training seed (repeatable; overrides the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate (linearly decayed to 0)")
    p.add_argument("--model", choices=("gated", "bilinear"))
    p.add_argument("--max-context-len", type=int)
    p.add_argument("--entropy-mode", choices=("full", "gold"))
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.add_argument("--strict", action="store_true", help="fail on invalid examples instead of skipping them")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selqa", description="Entropy-maximization training and evaluation for extractive QA.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perturb", help="write a perturbed copy of a dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True, choices=[k.value for k in PERTURBATIONS])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in-format", choices=("squad", "mrqa"), default="squad")
    p.add_argument("--max-context-len", type=int, default=384)
    p.add_argument("--lexicon", help="function-word list, one word per line")
    p.add_argument("--abbreviations", help="abbreviation list for sentence splitting")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("train", help="train one configuration for each seed")
    _add_training_flags(p)
    p.add_argument("--perturb", help="none, all, or a comma-separated list of perturbation kinds")
    p.add_argument("--lambda", dest="lam", type=float, help="entropy weight for every active perturbation")
    p.add_argument("--ledger", help="append run results to this JSON-lines file")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="choose lambda per perturbation on the dev set")
    _add_training_flags(p)
    p.add_argument("--grid", type=float, nargs="+", help="lambda grid (overrides the config)")
    p.add_argument("--kinds", default="all", help="perturbations to tune (default: all four)")
    p.add_argument("--retune-all", action="store_true", help="tune one shared lambda for the four-way configuration")
    p.add_argument("--out", help="write the chosen lambdas and all trials as JSON")
    p.set_defaults(func=cmd_tune, perturb=None, lam=None)

    p = sub.add_parser("eval", help="clean evaluation of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", choices=("squad", "mrqa"), default="squad")
    p.add_argument("--entropy-mode", choices=("full", "gold"), default="full")
    p.add_argument("--ledger")
    p.add_argument("--label", help="name recorded with the result in the ledger")
    p.add_argument("--predictions", help="write {id: answer text} JSON here")
    p.add_argument("--distributions", help="write per-example start/end distributions (JSON lines) here")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="cross-perturbation entropy/F1 report")
    _add_training_flags(p)
    p.add_argument("--ledger", required=True, help="runs ledger to read (and to append to when training)")
    p.add_argument("--run", action="store_true", help="train the six configurations first (implied by --train/--dev)")
    p.add_argument("--format", choices=("tsv", "md", "text"), default="md")
    p.add_argument("--out")
    p.add_argument("--lambdas", help="JSON file of tuned lambdas (skips tuning)")
    p.add_argument("--retune-all", action="store_true")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_matrix, perturb=None, lam=None)

    p = sub.add_parser("convert", help="convert an MRQA jsonl file to SQuAD JSON")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("selftest", help="run the embedded golden checks")
    p.add_argument("--lexicon", help="function-word list to test instead of the shipped one")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synth", help="write a synthetic SQuAD-format train/dev pair")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-size", type=int, default=3000)
    p.add_argument("--dev-size", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .trainer import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"selqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, ModelError, OSError, ValueError, RuntimeError) as exc:
        print(f"selqa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
