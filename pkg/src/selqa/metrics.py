"""Span entropy, SQuAD F1/EM, confidence drop and cross-perturbation matrices."""

from __future__ import annotations

import math
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .perturb import PERTURBATIONS, PerturbationKind

SUM_TOL = 1e-6
ENTROPY_MODES = ("full", "gold")


class DistributionError(ValueError):
    pass


@dataclass
class SpanDistribution:
    """Independent start and end position distributions over one context."""

    p_start: np.ndarray
    p_end: np.ndarray

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=np.float64)
        self.p_end = np.asarray(self.p_end, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.p_start)

    def validate(self) -> "SpanDistribution":
        if self.p_start.ndim != 1 or self.p_start.shape != self.p_end.shape or len(self.p_start) == 0:
            raise DistributionError(
                f"p_start/p_end must be equal-length nonempty vectors, got shapes "
                f"{self.p_start.shape} and {self.p_end.shape}"
            )
        for name, vec in (("p_start", self.p_start), ("p_end", self.p_end)):
            total = float(vec.sum())
            if not np.all(np.isfinite(vec)) or np.any(vec < 0) or abs(total - 1.0) > SUM_TOL:
                raise DistributionError(f"{name} is not a probability vector (sum={total!r})")
        return self

    def span_prob(self, start: int, end: int) -> float:
        return float(self.p_start[start] * self.p_end[end])


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0  # + 0.0 turns -0.0 into 0.0


def span_entropy(dist: SpanDistribution) -> float:
    """H(start) + H(end) in nats."""
    dist.validate()
    return _entropy(dist.p_start) + _entropy(dist.p_end)


def gold_entropy(dist: SpanDistribution, gold: tuple[int, int]) -> float:
    """The gold-position-only reading: -p log p at the gold start and end."""
    dist.validate()
    total = 0.0
    for p in (dist.p_start[gold[0]], dist.p_end[gold[1]]):
        if p > 0:
            total -= float(p * math.log(p))
    return total


def max_span_entropy(length: int) -> float:
    """Entropy of uniform start and end distributions over ``length`` positions."""
    return 2.0 * math.log(length)


def dataset_entropy(records: Sequence[SpanDistribution]) -> float:
    if len(records) == 0:
        raise ValueError("dataset_entropy of an empty dataset")
    return float(np.mean([span_entropy(d) for d in records]))


# ---------------------------------------------------------------------------
# SQuAD answer metrics (same normalization as the official v1.1 script)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = frozenset(string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def squad_f1(pred: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("squad_f1 needs at least one gold answer")
    pred_tokens = normalize_answer(pred).split()
    return max(_f1(pred_tokens, normalize_answer(g).split()) for g in golds)


def squad_em(pred: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("squad_em needs at least one gold answer")
    norm = normalize_answer(pred)
    return float(any(norm == normalize_answer(g) for g in golds))


def confidence_drop(clean: SpanDistribution, perturbed: SpanDistribution) -> float:
    """p_clean(y) - p_perturbed(y) for the clean prediction y."""
    from .model import predict_span

    clean.validate()
    perturbed.validate()
    if len(clean) != len(perturbed):
        raise DistributionError(
            f"length mismatch: clean has {len(clean)} positions, perturbed has {len(perturbed)}"
        )
    start, end, conf = predict_span(clean)
    return conf - perturbed.span_prob(start, end)


@dataclass(frozen=True)
class PredictionRecord:
    example_id: str
    kind: PerturbationKind
    pred_text: str
    pred_span: tuple[int, int]
    confidence: float
    entropy: float
    f1: float
    em: float


def write_predictions(path, predictions: dict[str, str]) -> None:
    """SQuAD-style predictions file: {example_id: answer_text}."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(predictions, fh, ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")


def write_distributions(path, rows: Iterable[tuple[str, PerturbationKind, SpanDistribution]]) -> None:
    """JSON lines of {id, kind, p_start, p_end}."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for example_id, kind, dist in rows:
            fh.write(json.dumps({
                "id": example_id, "kind": PerturbationKind.parse(kind).value,
                "p_start": dist.p_start.tolist(), "p_end": dist.p_end.tolist(),
            }) + "\n")


def read_distributions(path) -> list[tuple[str, PerturbationKind, SpanDistribution]]:
    import json

    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append((d["id"], PerturbationKind.parse(d["kind"]), SpanDistribution(d["p_start"], d["p_end"]).validate()))
    return out


# ---------------------------------------------------------------------------
# cross-perturbation matrix

ROW_ORDER = ("none", "del_func", "del_que", "shuf_word", "shuf_sent", "all")
COLUMNS = (PerturbationKind.NONE,) + PERTURBATIONS
ROW_LABELS = {"none": "None", "all": "ALL", **{k.value: k.label for k in PERTURBATIONS}}
HEADER = "train↓ / test→"


@dataclass(frozen=True)
class Cell:
    entropy_mean: float
    entropy_std: float
    f1_mean: float
    f1_std: float
    n: int


@dataclass
class CrossMatrix:
    rows: list[str]
    cols: list[PerturbationKind]
    cells: dict[tuple[str, PerturbationKind], Cell]
    seeds: list[int] = field(default_factory=list)

    def cell(self, row: str, col: PerturbationKind | str) -> Cell:
        return self.cells[(row, PerturbationKind.parse(col))]

    def _grid(self, metric: str, f1_scale: float = 100.0) -> list[list[str]]:
        out = []
        for row in self.rows:
            line = [ROW_LABELS.get(row, row)]
            for col in self.cols:
                c = self.cells[(row, col)]
                if metric == "entropy":
                    line.append(f"{c.entropy_mean:.2f} ± {c.entropy_std:.2f}")
                else:
                    line.append(f"{c.f1_mean * f1_scale:.1f} ± {c.f1_std * f1_scale:.2f}")
            out.append(line)
        return out

    def _caption(self, metric: str) -> str:
        n = len(self.seeds)
        what = "Entropy (nats)" if metric == "entropy" else "F1 (x100)"
        return f"{what}: mean ± population std over {n} seed(s)"

    def to_markdown(self) -> str:
        parts = []
        for metric in ("entropy", "f1"):
            header = [HEADER] + [c.label for c in self.cols]
            lines = [f"**{self._caption(metric)}**", "", "| " + " | ".join(header) + " |"]
            lines.append("|" + "|".join("---" for _ in header) + "|")
            for row in self._grid(metric):
                lines.append("| " + " | ".join(row) + " |")
            parts.append("\n".join(lines))
        return "\n\n".join(parts) + "\n"

    def to_tsv(self) -> str:
        lines = []
        for metric in ("entropy", "f1"):
            lines.append(f"# {self._caption(metric)}")
            lines.append("\t".join([HEADER] + [c.label for c in self.cols]))
            lines.extend("\t".join(row) for row in self._grid(metric))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        blocks = []
        for metric in ("entropy", "f1"):
            table = [[HEADER] + [c.label for c in self.cols]] + self._grid(metric)
            widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
            lines = [self._caption(metric)]
            for r in table:
                lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def render(self, fmt: str = "md") -> str:
        if fmt in ("md", "markdown"):
            return self.to_markdown()
        if fmt == "tsv":
            return self.to_tsv()
        if fmt == "text":
            return self.to_text()
        raise ValueError(f"unknown report format {fmt!r}")


def build_matrix(runs: Iterable[tuple[str, int, PerturbationKind | str, float, float]]) -> CrossMatrix:
    """Fold (train_config, seed, test_kind, entropy, f1) records into a matrix."""
    values: dict[tuple[str, PerturbationKind], dict[int, tuple[float, float]]] = defaultdict(dict)
    for row, seed, kind, ent, f1 in runs:
        values[(str(row), PerturbationKind.parse(kind))][int(seed)] = (float(ent), float(f1))
    if not values:
        raise ValueError("build_matrix needs at least one run")
    present_rows = {r for r, _ in values}
    present_cols = {c for _, c in values}
    rows = [r for r in ROW_ORDER if r in present_rows] + sorted(present_rows - set(ROW_ORDER))
    cols = [c for c in COLUMNS if c in present_cols]
    all_seeds = sorted({s for per_seed in values.values() for s in per_seed})
    missing = []
    for r in rows:
        for c in cols:
            have = values.get((r, c), {})
            for s in all_seeds:
                if s not in have:
                    missing.append(f"({r}, {c.value}, seed={s})")
    if missing:
        raise ValueError(f"ragged seed coverage; missing cells: {', '.join(missing)}")
    cells = {}
    for key, per_seed in values.items():
        ents = np.array([per_seed[s][0] for s in all_seeds])
        f1s = np.array([per_seed[s][1] for s in all_seeds])
        cells[key] = Cell(float(ents.mean()), float(ents.std()), float(f1s.mean()), float(f1s.std()), len(all_seeds))
    return CrossMatrix(rows, cols, cells, all_seeds)
