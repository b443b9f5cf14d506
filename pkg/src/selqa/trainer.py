"""Training loop, lambda tuning and cross-perturbation evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import MAX_CONTEXT_LEN, QAExample, TokenizedExample, build_vocab, load_dataset, tokenize_example
from .metrics import (
    ENTROPY_MODES,
    CrossMatrix,
    PredictionRecord,
    build_matrix,
    gold_entropy,
    max_span_entropy,
    span_entropy,
    squad_em,
    squad_f1,
)
from .model import (
    MAX_ANSWER_LEN,
    EncodedView,
    ModelError,
    ModelParams,
    ModelSpec,
    encode,
    forward_batch,
    init_params,
    objective,
    predict_span,
    save_checkpoint,
)
from .perturb import PERTURBATIONS, Lexicon, PerturbationKind, PerturbedExample, apply_seeded, identity

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.01, 0.1, 1.0, 5.0)
DEFAULT_SEEDS = (13, 42, 2022)
ENTROPY_BAR = 0.9
EVAL_SEED = 0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 32
    lr_init: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perturbations: tuple[str, ...] = ()
    lambdas: Mapping[str, float] = field(default_factory=dict)
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    max_context_len: int = MAX_CONTEXT_LEN
    max_answer_len: int = MAX_ANSWER_LEN
    vocab_size: int = 30000
    model: str = "gated"
    dim: int = 64
    window: int = 2
    gate_hidden: int = 16
    eval_seed: int = EVAL_SEED
    entropy_mode: str = "full"

    def __post_init__(self):
        # YAML 1.1 reads forms like "1e-8" as strings, so scalars are coerced
        for f in fields(self):
            if f.type in ("int", "float"):
                value = getattr(self, f.name)
                try:
                    coerced = float(value) if f.type == "float" else int(value)
                    if f.type == "int" and coerced != float(value):
                        raise ValueError("not an integer")
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{f.name}: expected {f.type}, got {value!r}") from exc
                object.__setattr__(self, f.name, coerced)
        object.__setattr__(self, "perturbations", tuple(PerturbationKind.parse(k).value for k in self.perturbations))
        object.__setattr__(self, "lambdas", {PerturbationKind.parse(k).value: float(v) for k, v in dict(self.lambdas).items()})
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.seeds:
            problems.append("seeds must be nonempty")
        if any(v < 0 for v in self.lambdas.values()):
            problems.append("lambda values must be >= 0")
        if any(v < 0 for v in self.lambda_grid):
            problems.append("lambda_grid values must be >= 0")
        if "none" in self.perturbations:
            problems.append("'none' is not a training perturbation")
        if self.model not in ("gated", "bilinear"):
            problems.append(f"model must be 'gated' or 'bilinear', got {self.model!r}")
        if self.entropy_mode not in ENTROPY_MODES:
            problems.append(f"entropy_mode must be one of {ENTROPY_MODES}")
        if self.lr_init < 0 or self.max_context_len < 1 or self.dim < 1 or self.vocab_size < 2:
            problems.append("lr_init, max_context_len, dim and vocab_size must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def kinds(self) -> tuple[PerturbationKind, ...]:
        return tuple(PerturbationKind(k) for k in self.perturbations)

    @property
    def label(self) -> str:
        ks = set(self.perturbations)
        if not ks:
            return "none"
        if ks == {k.value for k in PERTURBATIONS}:
            return "all"
        return "+".join(k.value for k in PERTURBATIONS if k.value in ks)

    def active_lambdas(self) -> dict[PerturbationKind, float]:
        return {k: self.lambdas.get(k.value, 0.0) for k in self.kinds}

    def model_spec(self, vocab_size: int) -> ModelSpec:
        if self.model == "bilinear":
            return ModelSpec.bilinear(vocab_size, self.dim)
        return ModelSpec(vocab_size, self.dim, self.window, self.gate_hidden, True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perturbations"] = list(self.perturbations)
        d["lambda_grid"] = list(self.lambda_grid)
        d["seeds"] = list(self.seeds)
        d["lambdas"] = dict(sorted(self.lambdas.items()))
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        """Read a YAML (or JSON) mapping of TrainConfig fields."""
        import yaml

        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a key/value mapping")
        return cls.from_dict(data)

    def with_perturbations(self, kinds: Iterable[PerturbationKind | str], lambdas: Mapping | None = None) -> "TrainConfig":
        kinds = tuple(PerturbationKind.parse(k).value for k in kinds)
        lam = dict(self.lambdas if lambdas is None else {PerturbationKind.parse(k).value: v for k, v in lambdas.items()})
        return replace(self, perturbations=kinds, lambdas=lam)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction; the update order follows torch.optim.Adam."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = lr / bc1
        sqrt_bc2 = math.sqrt(bc2)
        for name, p in params.items():
            g = grads.tensors[name]
            if p.size == 0:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            denom = np.sqrt(v) / sqrt_bc2 + self.eps
            p -= step_size * m / denom


def linear_lr(lr_init: float, step: int, total_steps: int) -> float:
    """Learning rate for 0-based optimizer step ``step`` of ``total_steps``."""
    return lr_init * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# data


@dataclass
class Item:
    qa: QAExample
    tok: TokenizedExample


def prepare(examples: Sequence[QAExample | Item], max_context_len: int = MAX_CONTEXT_LEN) -> list[Item]:
    out = []
    for ex in examples:
        if isinstance(ex, Item):
            out.append(ex)
        else:
            out.append(Item(ex, tokenize_example(ex, max_context_len)))
    return out


def perturbed_view(tok: TokenizedExample, kind: PerturbationKind, global_seed: int, epoch: int, lexicon: Optional[Lexicon] = None) -> PerturbedExample:
    if kind is PerturbationKind.NONE:
        return identity(tok)
    return apply_seeded(kind, tok, global_seed, epoch, lexicon)


def prediction_text(pex: PerturbedExample, start: int, end: int) -> str:
    """Predicted answer string; sliced from the original context when the
    predicted tokens are still contiguous there."""
    origin = pex.context_origin[start:end + 1]
    if origin == list(range(origin[0], origin[0] + len(origin))):
        base = pex.base.context_tokens
        return pex.base.context[base[origin[0]].char_start:base[origin[-1]].char_end]
    return " ".join(t.text for t in pex.context_tokens[start:end + 1])


@dataclass
class EvalStats:
    entropy: float
    f1: float
    em: float
    ceiling: float
    n: int
    flagged: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    params: ModelParams,
    vocab: Mapping[str, int],
    items: Sequence[Item],
    kinds: Sequence[PerturbationKind] = (PerturbationKind.NONE,) + PERTURBATIONS,
    eval_seed: int = EVAL_SEED,
    entropy_mode: str = "full",
    max_answer_len: int = MAX_ANSWER_LEN,
    lexicon: Optional[Lexicon] = None,
    batch_size: int = 64,
    records: Optional[list] = None,
    distributions: Optional[list] = None,
) -> dict[PerturbationKind, EvalStats]:
    """Entropy/F1/EM of the model on each perturbed version of ``items``.

    ``records`` and ``distributions``, when given, receive one
    :class:`PredictionRecord` and one (id, kind, SpanDistribution) per example
    and kind.
    """
    if not items:
        raise ValueError("evaluation set is empty")
    results = {}
    for kind in kinds:
        ents, f1s, ems, ceils = [], [], [], []
        flagged = 0
        for lo in range(0, len(items), batch_size):
            chunk = items[lo:lo + batch_size]
            pexs = [perturbed_view(it.tok, kind, eval_seed, 0, lexicon) for it in chunk]
            cache = forward_batch(params, [encode(p, vocab) for p in pexs])
            for b, (it, pex) in enumerate(zip(chunk, pexs)):
                dist = cache.dist(b)
                if pex.answer_span is None:
                    flagged += 1
                if entropy_mode == "gold" and pex.answer_span is not None:
                    ent = gold_entropy(dist, pex.answer_span)
                else:
                    ent = span_entropy(dist)
                ceils.append(max_span_entropy(len(dist)))
                s, e, conf = predict_span(dist, max_answer_len)
                text = prediction_text(pex, s, e)
                golds = it.qa.gold_texts
                f1, em = squad_f1(text, golds), squad_em(text, golds)
                ents.append(ent)
                f1s.append(f1)
                ems.append(em)
                if records is not None:
                    records.append(PredictionRecord(it.qa.id, kind, text, (s, e), conf, ent, f1, em))
                if distributions is not None:
                    distributions.append((it.qa.id, kind, dist))
        results[kind] = EvalStats(
            float(np.mean(ents)), float(np.mean(f1s)), float(np.mean(ems)), float(np.mean(ceils)), len(items), flagged
        )
    return results


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    config: dict
    label: str
    seed: int
    checkpoint: Optional[str]
    metrics: dict[str, dict]
    log: dict
    failed: Optional[str] = None

    def stats(self, kind: PerturbationKind | str) -> EvalStats:
        return EvalStats(**self.metrics[PerturbationKind.parse(kind).value])

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunResult":
        return cls(**json.loads(line))


def append_ledger(path: str | Path, record: RunResult | dict) -> None:
    line = record.to_json() if isinstance(record, RunResult) else json.dumps(record, sort_keys=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_ledger(path: str | Path) -> list[RunResult]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        if data.get("record") == "external":
            continue
        out.append(RunResult(**data))
    return out


def matrix_from_runs(runs: Iterable[RunResult]) -> CrossMatrix:
    rows = []
    for r in runs:
        if r.failed:
            continue
        for kind, m in r.metrics.items():
            rows.append((r.label, r.seed, kind, m["entropy"], m["f1"]))
    return build_matrix(rows)


def train(
    config: TrainConfig,
    train_set: Sequence[QAExample | Item],
    dev_set: Sequence[QAExample | Item],
    seed: Optional[int] = None,
    checkpoint: Optional[str | Path] = None,
    lexicon: Optional[Lexicon] = None,
    return_params: bool = False,
):
    """Train one (config, seed) run and evaluate it on ``dev_set``.

    Returns a :class:`RunResult` (and the trained parameters and vocabulary
    when ``return_params``).
    """
    seed = config.seeds[0] if seed is None else int(seed)
    train_items = prepare(train_set, config.max_context_len)
    dev_items = prepare(dev_set, config.max_context_len)
    usable = [it for it in train_items if it.tok.answer_span is not None]
    excluded = len(train_items) - len(usable)
    if excluded:
        logger.warning("%d training example(s) excluded: answer lost to truncation", excluded)
    if not usable:
        raise ValueError("no training example has an aligned answer span")
    vocab = build_vocab([it.tok for it in usable], config.vocab_size)
    params = init_params(config.model_spec(len(vocab)), seed)
    clean = [encode(it.tok, vocab) for it in usable]
    lambdas = {k: lam for k, lam in config.active_lambdas().items() if lam > 0}

    n = len(usable)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    adam = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    log: dict = {"epochs": [], "clamped": 0, "excluded": excluded, "steps": total, "train_examples": n}
    failed = None
    step = 0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, **{k.value: 0.0 for k in lambdas}}
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            views = {
                k: [encode(perturbed_view(usable[i].tok, k, seed, epoch, lexicon), vocab) for i in idx]
                for k in lambdas
            }
            try:
                breakdown, grads = objective(params, [clean[i] for i in idx], views, lambdas)
            except ModelError as exc:
                failed = str(exc)
                break
            if not math.isfinite(breakdown.total):
                failed = f"non-finite loss at step {step}"
                break
            adam.step(params, grads, linear_lr(config.lr_init, step, total))
            if not params.is_finite():
                failed = f"non-finite parameters after step {step}"
                break
            step += 1
            log["clamped"] += breakdown.clamped
            sums["loss"] += breakdown.total
            sums["ce"] += breakdown.ce
            for k, h in breakdown.ent.items():
                sums[k.value] += h
        if failed:
            break
        log["epochs"].append({"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}})
    log["seconds"] = round(time.perf_counter() - started, 3)

    metrics = {}
    if failed is None:
        stats = evaluate(
            params, vocab, dev_items, eval_seed=config.eval_seed, entropy_mode=config.entropy_mode,
            max_answer_len=config.max_answer_len, lexicon=lexicon,
        )
        metrics = {k.value: s.to_dict() for k, s in stats.items()}
        if checkpoint is not None:
            save_checkpoint(checkpoint, params, vocab)
    else:
        logger.error("run %s seed %d failed: %s", config.label, seed, failed)
    result = RunResult(
        config=config.to_dict(),
        label=config.label,
        seed=seed,
        checkpoint=str(checkpoint) if checkpoint is not None and failed is None else None,
        metrics=metrics,
        log=log,
        failed=failed,
    )
    if return_params:
        return result, params, vocab
    return result


def _train_job(args):
    config, train_items, dev_items, seed, ckpt = args
    return train(config, train_items, dev_items, seed=seed, checkpoint=ckpt)


def run_many(
    jobs_spec: Sequence[tuple[TrainConfig, int, Optional[str]]],
    train_set,
    dev_set,
    jobs: int = 1,
    ledger: Optional[str | Path] = None,
) -> list[RunResult]:
    """Run independent (config, seed, checkpoint) jobs; results keep input order."""
    train_items = prepare(train_set)
    dev_items = prepare(dev_set)
    args = [(cfg, train_items, dev_items, seed, ckpt) for cfg, seed, ckpt in jobs_spec]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = [_train_job(a) for a in args]
    if ledger is not None:
        for r in results:
            append_ledger(ledger, r)
    return results


# ---------------------------------------------------------------------------
# lambda tuning


@dataclass
class TuneResult:
    lambdas: dict[str, float]
    fallback: dict[str, bool]
    trials: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def _select(trials: list[dict]) -> tuple[float, bool]:
    passing = [t for t in trials if t["clears_bar"]]
    pool = passing or trials
    best = max(pool, key=lambda t: (t["f1"], -t["lambda"]))
    return best["lambda"], not passing


def tune_lambda(
    config: TrainConfig,
    train_set,
    dev_set,
    kinds: Sequence[PerturbationKind] = PERTURBATIONS,
    jobs: int = 1,
    retune_all: bool = False,
) -> TuneResult:
    """Pick lambda per perturbation: best clean-dev F1 among grid values whose
    seen-perturbation dev entropy reaches 90% of the per-example maximum
    (2 ln L averaged over the dev set).  Without any such value the best
    clean F1 wins and the choice is flagged as a fallback.
    """
    if not config.lambda_grid:
        raise ConfigError("lambda_grid is empty")
    seed = config.seeds[0]
    kinds = [PerturbationKind.parse(k) for k in kinds]
    groups: list[tuple[str, list[PerturbationKind]]]
    if retune_all:
        groups = [("all", kinds)]
    else:
        groups = [(k.value, [k]) for k in kinds]
    specs, keys = [], []
    for name, ks in groups:
        for lam in config.lambda_grid:
            specs.append((config.with_perturbations(ks, {k: lam for k in ks}), seed, None))
            keys.append((name, ks, lam))
    results = run_many(specs, train_set, dev_set, jobs=jobs)
    trials = []
    for (name, ks, lam), r in zip(keys, results):
        if r.failed:
            trials.append({"group": name, "lambda": lam, "f1": -1.0, "entropy": {}, "clears_bar": False, "failed": r.failed})
            continue
        ent = {k.value: r.metrics[k.value]["entropy"] for k in ks}
        ceil = {k.value: r.metrics[k.value]["ceiling"] for k in ks}
        ok = all(ent[k] >= ENTROPY_BAR * ceil[k] for k in ent)
        trials.append({
            "group": name, "lambda": lam, "f1": r.metrics["none"]["f1"],
            "entropy": ent, "ceiling": ceil, "clears_bar": ok,
        })
    lambdas, fallback = {}, {}
    for name, ks in groups:
        lam, fb = _select([t for t in trials if t["group"] == name])
        if fb:
            logger.warning("lambda tuning for %s fell back to best clean F1 (entropy bar not reached)", name)
        for k in ks:
            lambdas[k.value] = lam
            fallback[k.value] = fb
    return TuneResult(lambdas, fallback, trials)


# ---------------------------------------------------------------------------
# cross-perturbation evaluation


def standard_configs(base: TrainConfig, lambdas: Mapping[str, float]) -> list[TrainConfig]:
    """The six training rows: none, each perturbation alone, and all four."""
    lam = {PerturbationKind.parse(k).value: float(v) for k, v in lambdas.items()}
    rows = [base.with_perturbations([], {})]
    rows += [base.with_perturbations([k], {k.value: lam[k.value]}) for k in PERTURBATIONS]
    rows.append(base.with_perturbations(PERTURBATIONS, {k.value: lam[k.value] for k in PERTURBATIONS}))
    return rows


def run_cross_eval(
    configs: Sequence[TrainConfig],
    train_set,
    dev_set,
    jobs: int = 1,
    ledger: Optional[str | Path] = None,
    checkpoint_dir: Optional[str | Path] = None,
) -> tuple[CrossMatrix, list[RunResult]]:
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    specs = []
    for cfg in configs:
        for seed in cfg.seeds:
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = str(Path(checkpoint_dir) / f"{cfg.label}-seed{seed}.json")
            specs.append((cfg, seed, ckpt))
    runs = run_many(specs, train_set, dev_set, jobs=jobs, ledger=ledger)
    failed = [f"{r.label}/seed {r.seed}: {r.failed}" for r in runs if r.failed]
    if failed:
        raise RuntimeError("training failed for " + "; ".join(failed))
    return matrix_from_runs(runs), runs


def vocab_coverage(items: Sequence[Item], vocab: Mapping[str, int]) -> float:
    total = hit = 0
    for it in items:
        for t in list(it.tok.context_tokens) + list(it.tok.question_tokens):
            total += 1
            hit += t.text.lower() in vocab
    return hit / total if total else 0.0


def eval_external(
    params: ModelParams,
    vocab: Mapping[str, int],
    dataset_path: str | Path,
    fmt: str = "squad",
    ledger: Optional[str | Path] = None,
    entropy_mode: str = "full",
    max_context_len: int = MAX_CONTEXT_LEN,
    label: Optional[str] = None,
    strict: bool = False,
    records: Optional[list] = None,
    distributions: Optional[list] = None,
) -> tuple[float, float, float]:
    """Clean-input (mean F1, mean EM, dataset entropy) on an external dev set."""
    examples = load_dataset(dataset_path, fmt, strict=strict)
    if not examples:
        raise ValueError(f"{dataset_path}: dataset is empty")
    items = prepare(examples, max_context_len)
    coverage = vocab_coverage(items, vocab)
    if coverage < 0.5:
        logger.warning("vocabulary covers only %.1f%% of %s tokens; toy-model scores are not interpretable",
                       100 * coverage, dataset_path)
    stats = evaluate(
        params, vocab, items, kinds=(PerturbationKind.NONE,), entropy_mode=entropy_mode,
        records=records, distributions=distributions,
    )[PerturbationKind.NONE]
    if ledger is not None:
        append_ledger(ledger, {
            "record": "external", "dataset": str(dataset_path), "format": fmt, "label": label,
            "f1": stats.f1, "em": stats.em, "entropy": stats.entropy, "n": stats.n,
            "vocab_coverage": coverage,
        })
    return stats.f1, stats.em, stats.entropy
