"""The four answer-preserving input perturbations.

Every operator works on a :class:`~selqa.corpus.TokenizedExample` and returns
a :class:`PerturbedExample` whose context is the single-space join of the
surviving (or reordered) tokens.  Tokens inside the gold answer span are
never deleted and never separated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .corpus import (
    TERMINATORS,
    AlignmentError,
    GoldAnswer,
    QAExample,
    Token,
    TokenizedExample,
    align_answer,
    load_word_list,
)
from .rng import Xoshiro256ss, fisher_yates, stream_seed

DASHES = frozenset("-‐‑‒–—―−")
CORE_FUNCTION_WORDS = frozenset({"the", "a", "an", "at", "to", "which", "their", "of", "in", "on"})


class PerturbationKind(str, enum.Enum):
    NONE = "none"
    DEL_FUNC = "del_func"
    DEL_QUE = "del_que"
    SHUF_WORD = "shuf_word"
    SHUF_SENT = "shuf_sent"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, value: "str | PerturbationKind") -> "PerturbationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ValueError(
                f"unknown perturbation {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


_LABELS = {
    PerturbationKind.NONE: "None",
    PerturbationKind.DEL_FUNC: "Del_func",
    PerturbationKind.DEL_QUE: "Del_que",
    PerturbationKind.SHUF_WORD: "Shuf_word",
    PerturbationKind.SHUF_SENT: "Shuf_sent",
}

PERTURBATIONS = (
    PerturbationKind.DEL_FUNC,
    PerturbationKind.DEL_QUE,
    PerturbationKind.SHUF_WORD,
    PerturbationKind.SHUF_SENT,
)


@dataclass(frozen=True)
class Lexicon:
    """Function words plus the punctuation policy of function-word deletion."""

    words: frozenset[str]
    drop_number_after_dash: bool = True

    def __post_init__(self):
        if not self.words:
            raise ValueError("function-word lexicon is empty")

    @classmethod
    def load(cls, path: Optional[str | Path] = None, drop_number_after_dash: bool = True) -> "Lexicon":
        return cls(load_word_list(path, "function_words.txt"), drop_number_after_dash)

    def missing_core(self) -> set[str]:
        return set(CORE_FUNCTION_WORDS - self.words)


_DEFAULT_LEXICON: Optional[Lexicon] = None


def default_lexicon() -> Lexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = Lexicon.load()
    return _DEFAULT_LEXICON


@dataclass
class PerturbedExample:
    base: TokenizedExample
    kind: PerturbationKind
    seed: int
    context_tokens: list[Token]
    question_tokens: list[Token]
    answer_span: Optional[tuple[int, int]]
    perturbed_context: str
    perturbed_question: str
    sentence_ranges: list[tuple[int, int]] = field(default_factory=list)
    # base token index of every output token
    context_origin: list[int] = field(default_factory=list)
    question_origin: list[int] = field(default_factory=list)

    @property
    def example_id(self) -> str:
        return self.base.example_id

    @property
    def answer_text(self) -> Optional[str]:
        if self.answer_span is None:
            return None
        s, e = self.answer_span
        return " ".join(t.text for t in self.context_tokens[s:e + 1])

    def view(self) -> TokenizedExample:
        """The perturbed input as a self-consistent tokenized example."""
        return TokenizedExample(
            example_id=self.base.example_id,
            context_tokens=self.context_tokens,
            question_tokens=self.question_tokens,
            sentence_ranges=self.sentence_ranges,
            answer_span=self.answer_span,
            truncated=self.base.truncated,
            context=self.perturbed_context,
            question=self.perturbed_question,
        )


def is_word(text: str) -> bool:
    return text[:1].isalnum()


def _serialize(texts: Sequence[str]) -> tuple[str, list[Token]]:
    """Join with single spaces.  Every text is one whole token, so tokenizing
    the joined string gives back exactly these tokens at these offsets."""
    tokens, pos = [], 0
    for t in texts:
        tokens.append(Token(t, pos, pos + len(t)))
        pos += len(t) + 1
    return " ".join(texts), tokens


def _assemble(
    ex: TokenizedExample,
    kind: PerturbationKind,
    seed: int,
    ctx_order: list[int],
    q_order: list[int],
    ranges: list[tuple[int, int]],
) -> PerturbedExample:
    context, ctx_tokens = _serialize([ex.context_tokens[i].text for i in ctx_order])
    question, q_tokens = _serialize([ex.question_tokens[i].text for i in q_order])
    span = None
    if ex.answer_span is not None:
        where = {src: dst for dst, src in enumerate(ctx_order)}
        span = (where[ex.answer_span[0]], where[ex.answer_span[1]])
    return PerturbedExample(
        base=ex,
        kind=kind,
        seed=seed,
        context_tokens=ctx_tokens,
        question_tokens=q_tokens,
        answer_span=span,
        perturbed_context=context,
        perturbed_question=question,
        sentence_ranges=ranges,
        context_origin=list(ctx_order),
        question_origin=list(q_order),
    )


def _span_set(ex: TokenizedExample) -> range:
    if ex.answer_span is None:
        return range(0)
    return range(ex.answer_span[0], ex.answer_span[1] + 1)


def _groups(ex: TokenizedExample) -> list[tuple[int, int]]:
    """Sentence ranges with the ranges crossed by the answer span merged."""
    groups: list[tuple[int, int]] = []
    span = ex.answer_span
    for s, e in ex.sentence_ranges:
        if groups and span is not None and groups[-1][0] <= span[0] < groups[-1][1] and span[1] >= s:
            groups[-1] = (groups[-1][0], e)
        else:
            groups.append((s, e))
    return groups


def _ranges_from_lengths(lengths: Sequence[int]) -> list[tuple[int, int]]:
    out, pos = [], 0
    for n in lengths:
        if n:
            out.append((pos, pos + n))
            pos += n
    return out


def identity(ex: TokenizedExample, seed: int = 0) -> PerturbedExample:
    return _assemble(
        ex,
        PerturbationKind.NONE,
        seed,
        list(range(len(ex.context_tokens))),
        list(range(len(ex.question_tokens))),
        list(ex.sentence_ranges),
    )


def _keep_mask(tokens: Sequence[Token], ranges, protected, lexicon: Lexicon) -> list[bool]:
    keep = [True] * len(tokens)
    for s, e in ranges:
        for i in range(s, e):
            if i in protected:
                continue
            text = tokens[i].text
            if is_word(text):
                if text.lower() in lexicon.words:
                    keep[i] = False
            elif not (i == e - 1 and text in TERMINATORS):
                keep[i] = False
                if (
                    lexicon.drop_number_after_dash
                    and text in DASHES
                    and i + 1 < e
                    and i + 1 not in protected
                    and tokens[i + 1].char_start == tokens[i].char_end
                    and tokens[i + 1].text.isdigit()
                ):
                    keep[i + 1] = False
    return keep


def del_func(ex: TokenizedExample, seed: int = 0, lexicon: Optional[Lexicon] = None) -> PerturbedExample:
    """Delete function words and non-terminal punctuation outside the answer.

    A dash removed between two numbers also takes the number after it
    (``24–10`` becomes ``24``) unless ``lexicon.drop_number_after_dash`` is off.
    If nothing at all would survive in a context that has no answer span,
    its final token is kept so the context is never empty.
    """
    lexicon = lexicon or default_lexicon()
    protected = set(_span_set(ex))
    keep = _keep_mask(ex.context_tokens, ex.sentence_ranges, protected, lexicon)
    if ex.context_tokens and not any(keep):
        keep[-1] = True
    ctx_order = [i for i, k in enumerate(keep) if k]
    lengths = [sum(keep[s:e]) for s, e in ex.sentence_ranges]
    q_keep = _keep_mask(ex.question_tokens, [(0, len(ex.question_tokens))], set(), lexicon)
    q_order = [i for i, k in enumerate(q_keep) if k]
    return _assemble(ex, PerturbationKind.DEL_FUNC, seed, ctx_order, q_order, _ranges_from_lengths(lengths))


def del_que(ex: TokenizedExample, seed: int = 0) -> PerturbedExample:
    return _assemble(
        ex,
        PerturbationKind.DEL_QUE,
        seed,
        list(range(len(ex.context_tokens))),
        [],
        list(ex.sentence_ranges),
    )


def _permute_sentence(tokens: Sequence[Token], indices: list[int], span: range, rng: Xoshiro256ss) -> list[int]:
    units: list[list[int]] = []
    for i in indices:
        if i in span and units and units[-1][0] in span:
            units[-1].append(i)
        else:
            units.append([i])
    tail: list[list[int]] = []
    if units and units[-1][0] not in span and tokens[units[-1][0]].text in TERMINATORS:
        tail = [units.pop()]
    fisher_yates(units, rng)
    return [i for unit in units + tail for i in unit]


def shuf_word(ex: TokenizedExample, seed: int) -> PerturbedExample:
    """Shuffle word order inside every sentence and inside the question."""
    rng = Xoshiro256ss(seed)
    span = _span_set(ex)
    groups = _groups(ex)
    ctx_order: list[int] = []
    for s, e in groups:
        ctx_order.extend(_permute_sentence(ex.context_tokens, list(range(s, e)), span, rng))
    q_order = _permute_sentence(ex.question_tokens, list(range(len(ex.question_tokens))), range(0), rng)
    return _assemble(ex, PerturbationKind.SHUF_WORD, seed, ctx_order, q_order, groups)


def shuf_sent(ex: TokenizedExample, seed: int) -> PerturbedExample:
    """Shuffle the order of the context's sentences.

    Sentences crossed by the answer move as one unit but keep their own
    ranges in the output.
    """
    rng = Xoshiro256ss(seed)
    groups = _groups(ex)
    fisher_yates(groups, rng)
    ctx_order = [i for s, e in groups for i in range(s, e)]
    lengths = [e - s for gs, ge in groups for s, e in ex.sentence_ranges if gs <= s and e <= ge]
    ranges = _ranges_from_lengths(lengths)
    return _assemble(
        ex, PerturbationKind.SHUF_SENT, seed, ctx_order, list(range(len(ex.question_tokens))), ranges
    )


def apply(
    kind: PerturbationKind | str,
    ex: TokenizedExample,
    seed: int = 0,
    lexicon: Optional[Lexicon] = None,
) -> PerturbedExample:
    kind = PerturbationKind.parse(kind)
    if kind is PerturbationKind.NONE:
        return identity(ex, seed)
    if kind is PerturbationKind.DEL_FUNC:
        return del_func(ex, seed, lexicon)
    if kind is PerturbationKind.DEL_QUE:
        return del_que(ex, seed)
    if kind is PerturbationKind.SHUF_WORD:
        return shuf_word(ex, seed)
    return shuf_sent(ex, seed)


def apply_seeded(
    kind: PerturbationKind | str,
    ex: TokenizedExample,
    global_seed: int,
    epoch: int = 0,
    lexicon: Optional[Lexicon] = None,
) -> PerturbedExample:
    """``apply`` with the example's own stream seed derived from ``global_seed``."""
    kind = PerturbationKind.parse(kind)
    return apply(kind, ex, stream_seed(global_seed, ex.example_id, kind.value, epoch), lexicon)


def perturbed_qa(pex: PerturbedExample, qa: QAExample) -> QAExample:
    """SQuAD record for a perturbed example with answer offsets recomputed.

    The first gold answer is always kept.  Further answers are kept when
    their tokens survive as a contiguous ordered run.
    """
    if pex.answer_span is None:
        raise AlignmentError(f"{qa.id}: perturbed example has no answer span")
    toks = pex.context_tokens
    s, e = pex.answer_span
    answers = [GoldAnswer(pex.perturbed_context[toks[s].char_start:toks[e].char_end], toks[s].char_start)]
    where = {src: dst for dst, src in enumerate(pex.context_origin)}
    for alt in qa.answers[1:]:
        probe = QAExample(qa.id, qa.context, qa.question, [alt])
        try:
            bs, be = align_answer(probe, pex.base.context_tokens)
        except AlignmentError:
            continue
        mapped = [where.get(i) for i in range(bs, be + 1)]
        if None in mapped or mapped != list(range(mapped[0], mapped[0] + len(mapped))):
            continue
        a, b = mapped[0], mapped[-1]
        cand = GoldAnswer(pex.perturbed_context[toks[a].char_start:toks[b].char_end], toks[a].char_start)
        if cand not in answers:
            answers.append(cand)
    return QAExample(qa.id, pex.perturbed_context, pex.perturbed_question, answers, qa.title)
