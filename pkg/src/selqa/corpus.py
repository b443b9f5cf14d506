"""Dataset ingestion, offset-tracking tokenization and answer alignment.

Character offsets count codepoints (Python ``str`` indices), which is what
SQuAD's ``answer_start`` counts.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

MAX_CONTEXT_LEN = 384
PAD, UNK = "<pad>", "<unk>"
TERMINATORS = frozenset(".!?")

_TOKEN_RE = re.compile(r"[^\W_]+(?:['’\-‐][^\W_]+)*|\S")


class CorpusError(Exception):
    """Unreadable or structurally malformed dataset file."""


class ValidationError(CorpusError):
    """One or more examples violate the gold-answer invariants."""

    def __init__(self, message: str, ids: Sequence[str] = ()):
        super().__init__(message)
        self.ids = list(ids)


class AlignmentError(Exception):
    """The gold answer cannot be mapped onto the (possibly truncated) tokens."""


@dataclass(frozen=True)
class GoldAnswer:
    text: str
    char_start: int

    def matches(self, context: str) -> bool:
        return (
            self.char_start >= 0
            and context[self.char_start:self.char_start + len(self.text)] == self.text
        )


@dataclass
class QAExample:
    id: str
    context: str
    question: str
    answers: list[GoldAnswer]
    title: Optional[str] = None

    @property
    def gold_texts(self) -> list[str]:
        return [a.text for a in self.answers]


@dataclass(frozen=True)
class Token:
    text: str
    char_start: int
    char_end: int


@dataclass
class TokenizedExample:
    example_id: str
    context_tokens: list[Token]
    question_tokens: list[Token]
    sentence_ranges: list[tuple[int, int]]
    answer_span: Optional[tuple[int, int]]
    truncated: bool = False
    context: str = ""
    question: str = ""

    @property
    def answer_text(self) -> Optional[str]:
        if self.answer_span is None:
            return None
        s, e = self.answer_span
        return " ".join(t.text for t in self.context_tokens[s:e + 1])


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[Token]:
    """Split into word tokens and single-character punctuation tokens."""
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def detokenize(tokens: Sequence[Token], source: str) -> str:
    """Rebuild ``source`` from tokens plus the gaps recorded between them."""
    out, pos = [], 0
    for tok in tokens:
        out.append(source[pos:tok.char_start])
        out.append(tok.text)
        pos = tok.char_end
    out.append(source[pos:])
    return "".join(out)


def load_word_list(path: Optional[str | Path] = None, default: str = "abbreviations.txt") -> frozenset[str]:
    """Read a one-entry-per-line list; ``#`` starts a comment."""
    if path is None:
        text = resources.files("selqa").joinpath("data").joinpath(default).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            words.add(line.lower())
    return frozenset(words)


_DEFAULT_ABBREVIATIONS: Optional[frozenset[str]] = None


def default_abbreviations() -> frozenset[str]:
    global _DEFAULT_ABBREVIATIONS
    if _DEFAULT_ABBREVIATIONS is None:
        _DEFAULT_ABBREVIATIONS = load_word_list(None, "abbreviations.txt")
    return _DEFAULT_ABBREVIATIONS


def _chunk_before(context: str, end: int) -> str:
    start = end
    while start > 0 and not context[start - 1].isspace():
        start -= 1
    chunk = context[start:end]
    i = 0
    while i < len(chunk) and not chunk[i].isalnum():
        i += 1
    return chunk[i:].lower()


def split_sentences(
    context_tokens: Sequence[Token],
    context: str,
    abbreviations: Optional[frozenset[str]] = None,
) -> list[tuple[int, int]]:
    """Half-open token ranges of the sentences in ``context``.

    A sentence ends after a ``.``/``!``/``?`` token that is followed by
    whitespace and an uppercase letter, or by nothing but whitespace.
    """
    if abbreviations is None:
        abbreviations = default_abbreviations()
    n = len(context_tokens)
    if n == 0:
        return []
    ranges, start = [], 0
    for i, tok in enumerate(context_tokens[:-1]):
        if tok.text not in TERMINATORS:
            continue
        rest = context[tok.char_end:]
        stripped = rest.lstrip()
        if not stripped:
            boundary = True
        else:
            boundary = len(stripped) < len(rest) and stripped[0].isupper()
        if boundary and tok.text == "." and _chunk_before(context, tok.char_end) in abbreviations:
            boundary = False
        if boundary:
            ranges.append((start, i + 1))
            start = i + 1
    ranges.append((start, n))
    return ranges


def align_answer(example: QAExample, tokens: Sequence[Token]) -> tuple[int, int]:
    """Smallest inclusive token interval covering the first gold answer."""
    if not example.answers:
        raise AlignmentError(f"{example.id}: no gold answer")
    ans = example.answers[0]
    a_start, a_end = ans.char_start, ans.char_start + len(ans.text)
    first = last = None
    for i, tok in enumerate(tokens):
        if tok.char_end > a_start and tok.char_start < a_end:
            if first is None:
                first = i
            last = i
    if first is None:
        raise AlignmentError(
            f"{example.id}: answer at chars [{a_start}, {a_end}) not covered by "
            f"{len(tokens)} context tokens"
        )
    if example.context[tokens[last].char_end:a_end].strip():
        raise AlignmentError(f"{example.id}: answer extends past the truncated context")
    return first, last


def tokenize_example(
    example: QAExample,
    max_context_len: int = MAX_CONTEXT_LEN,
    abbreviations: Optional[frozenset[str]] = None,
) -> TokenizedExample:
    """Tokenize, sentence-split, truncate and align one example.

    Contexts longer than ``max_context_len`` tokens are cut at the last
    sentence boundary that fits, or hard-cut when none does.  When the cut
    removes the answer, ``answer_span`` is ``None``.
    """
    ctx_tokens = tokenize(example.context)
    sentences = split_sentences(ctx_tokens, example.context, abbreviations)
    truncated = False
    if len(ctx_tokens) > max_context_len:
        truncated = True
        cut = max((end for _, end in sentences if end <= max_context_len), default=0)
        if cut == 0:
            cut = max_context_len
        ctx_tokens = ctx_tokens[:cut]
        sentences = [(s, min(e, cut)) for s, e in sentences if s < cut]
    span: Optional[tuple[int, int]]
    try:
        span = align_answer(example, ctx_tokens)
    except AlignmentError as exc:
        logger.debug("%s", exc)
        span = None
    return TokenizedExample(
        example_id=example.id,
        context_tokens=ctx_tokens,
        question_tokens=tokenize(example.question),
        sentence_ranges=sentences,
        answer_span=span,
        truncated=truncated,
        context=example.context,
        question=example.question,
    )


# ---------------------------------------------------------------------------
# vocabulary


def build_vocab(examples: Iterable[TokenizedExample], size_cap: int) -> dict[str, int]:
    """Lowercased token -> id with PAD=0, UNK=1 and the top ``size_cap - 2`` types."""
    if size_cap < 2:
        raise ValueError(f"size_cap must be >= 2, got {size_cap}")
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(t.text.lower() for t in ex.context_tokens)
        counts.update(t.text.lower() for t in ex.question_tokens)
    counts.pop(PAD, None)
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: size_cap - 2]
    vocab = {PAD: 0, UNK: 1}
    for word, _ in ranked:
        vocab[word] = len(vocab)
    return vocab


# ---------------------------------------------------------------------------
# file formats


def _read_json(path: Path):
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not UTF-8 (byte {exc.start})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        byte_pos = len(text[: exc.pos].encode("utf-8"))
        raise CorpusError(f"{path}: invalid JSON at byte {byte_pos}: {exc.msg}") from exc


def _finish(examples: list[QAExample], bad: list[str], path: Path, strict: bool) -> list[QAExample]:
    seen: set[str] = set()
    unique = []
    for ex in examples:
        if ex.id in seen:
            bad.append(ex.id)
            continue
        seen.add(ex.id)
        unique.append(ex)
    if bad:
        msg = f"{path}: {len(bad)} invalid example(s): {', '.join(bad[:20])}"
        if strict:
            raise ValidationError(msg, bad)
        logger.warning("%s (skipped)", msg)
    return unique


def load_squad(path: str | Path, strict: bool = False) -> list[QAExample]:
    """Read a SQuAD v1.1 JSON file.

    Examples whose answer text does not occur at ``answer_start`` are skipped
    with a warning, or raise ``ValidationError`` when ``strict``.
    """
    path = Path(path)
    doc = _read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("data"), list):
        raise CorpusError(f"{path}: not SQuAD format (missing top-level 'data' list)")
    examples, bad = [], []
    for article in doc["data"]:
        title = article.get("title")
        for para in article.get("paragraphs", []):
            context = para["context"]
            for qa in para.get("qas", []):
                answers = [GoldAnswer(a["text"], int(a["answer_start"])) for a in qa.get("answers", [])]
                ex = QAExample(str(qa["id"]), context, qa["question"], answers, title)
                if not ex.id or not answers or not all(a.matches(context) for a in answers):
                    bad.append(ex.id or "<empty id>")
                    continue
                examples.append(ex)
    return _finish(examples, bad, path, strict)


def load_mrqa(path: str | Path, strict: bool = False) -> list[QAExample]:
    """Read an MRQA shared-task jsonl file (header line optional)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: not UTF-8 (byte {exc.start})") from exc
    examples, bad = [], []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        start_byte = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            byte_pos = start_byte + len(line[: exc.pos].encode("utf-8"))
            raise CorpusError(
                f"{path}: not MRQA jsonl format, line {lineno} is not a JSON record (byte {byte_pos}: {exc.msg})"
            ) from exc
        if not isinstance(record, dict):
            raise CorpusError(f"{path}: line {lineno} is not a JSON object")
        if "header" in record:
            continue
        if "context" not in record or "qas" not in record:
            raise CorpusError(f"{path}: line {lineno} is not MRQA format (needs 'context' and 'qas')")
        context = record["context"]
        for qa in record["qas"]:
            qid = str(qa.get("qid") or qa.get("id") or "")
            answers: list[GoldAnswer] = []
            for det in qa.get("detected_answers", []):
                spans = det.get("char_spans") or []
                if not spans:
                    continue
                s, e = int(spans[0][0]), int(spans[0][1])
                if 0 <= s <= e < len(context):
                    answers.append(GoldAnswer(context[s:e + 1], s))
                else:
                    answers = []
                    break
            if answers:
                known = {a.text for a in answers}
                for alt in qa.get("answers", []):
                    pos = context.find(alt) if alt else -1
                    if alt not in known and pos >= 0:
                        answers.append(GoldAnswer(alt, pos))
                        known.add(alt)
            if not qid or not answers:
                bad.append(qid or f"<line {lineno}>")
                continue
            examples.append(QAExample(qid, context, qa["question"], answers))
    return _finish(examples, bad, path, strict)


def load_dataset(path: str | Path, fmt: str = "squad", strict: bool = False) -> list[QAExample]:
    if fmt == "squad":
        return load_squad(path, strict)
    if fmt == "mrqa":
        return load_mrqa(path, strict)
    raise ValueError(f"unknown dataset format {fmt!r}")


def squad_document(examples: Sequence[QAExample], version: str = "1.1") -> dict:
    """SQuAD JSON tree; consecutive examples sharing title and context share a paragraph."""
    articles: list[dict] = []
    for ex in examples:
        title = ex.title if ex.title is not None else ""
        if not articles or articles[-1]["title"] != title:
            articles.append({"title": title, "paragraphs": []})
        paras = articles[-1]["paragraphs"]
        if not paras or paras[-1]["context"] != ex.context:
            paras.append({"context": ex.context, "qas": []})
        paras[-1]["qas"].append(
            {
                "id": ex.id,
                "question": ex.question,
                "answers": [{"text": a.text, "answer_start": a.char_start} for a in ex.answers],
            }
        )
    return {"version": version, "data": articles}


def save_squad(examples: Sequence[QAExample], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(squad_document(examples), ensure_ascii=False, indent=1) + "\n",
        encoding="utf-8",
    )
