"""Synthetic SQuAD-format corpus for offline runs.

Each paragraph narrates the history of one fictional organisation in seven to
eleven sentences, which puts context lengths in the range of real encyclopedic
paragraphs.  The first sentence introduces the organisation; later sentences
open with a connective that fits their place in the story ("Initially",
"Later", "Today", ...).  Questions ask about one fact and repeat its cue words.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional

from .corpus import GoldAnswer, QAExample

_SYLLABLES = (
    "bar", "cel", "dan", "dor", "fen", "gar", "hal", "kel", "lin", "lor", "mar", "mel",
    "nor", "pal", "quin", "ran", "sel", "tam", "tor", "val", "ven", "wil", "zan", "zor",
    "bel", "cor", "del", "fal", "gil", "har", "jor", "kan", "lum", "mor", "nel", "ost",
)
_ORG_SUFFIX = ("Institute", "Society", "Company", "Foundation", "Group", "Laboratories", "Union", "Guild")
_KINDS = (
    "research institute", "trading company", "charitable foundation", "engineering firm",
    "publishing house", "shipping company", "music academy", "medical society",
)
_PRIZES = ("Aurora", "Meridian", "Golden Lantern", "Silver Compass", "Horizon", "Keystone")
_CONNECTIVES = {
    1: ("Initially", "At first", "Originally"),
    2: ("Soon afterwards", "Shortly after that", "Subsequently"),
    3: ("Later", "Some years later", "Afterwards"),
    4: ("Eventually", "Ultimately", "Much later"),
    5: ("Today", "Currently", "Nowadays"),
}


def _name(rng: random.Random, parts: int = 2) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(parts)).capitalize()


@dataclass
class _Fact:
    sentence: str  # contains a single {ANS} placeholder
    answer: str
    questions: tuple[str, ...]


def _person(rng):
    return f"{_name(rng)} {_name(rng, rng.choice((2, 3)))}"


def _city(rng):
    return _name(rng, rng.choice((2, 3)))


def _year(rng):
    return str(rng.randint(1820, 2015))


def _number(rng):
    return str(rng.randint(12, 990))


def _facts(rng: random.Random, org: str) -> list[Callable[[], list[_Fact]]]:
    def founded():
        year, person = _year(rng), _person(rng)
        return [
            _Fact(f"the {org} was founded in {{ANS}} by {person}", year,
                  (f"When was the {org} founded?", f"In what year was the {org} founded?")),
            _Fact(f"the {org} was founded in {year} by {{ANS}}", person,
                  (f"Who founded the {org}?", f"By whom was the {org} founded?")),
        ]

    def moved():
        city = _city(rng)
        return [_Fact(f"it moved its headquarters to {{ANS}}", city,
                      (f"Where did the {org} move its headquarters?",
                       f"To which city did the {org} move its headquarters?"))]

    def director():
        person = _person(rng)
        return [_Fact(f"{{ANS}} became the director of the {org}", person,
                      (f"Who became the director of the {org}?",))]

    def acquired():
        other = f"{_name(rng)} {rng.choice(_ORG_SUFFIX)}"
        amount = f"{_number(rng)} million dollars"
        return [
            _Fact(f"the {org} acquired the {{ANS}} for {amount}", other,
                  (f"Which organization did the {org} acquire?",)),
            _Fact(f"the {org} acquired the {other} for {{ANS}}", amount,
                  (f"How much did the {org} pay for the {other}?",)),
        ]

    def campus():
        city, year = _city(rng), _year(rng)
        return [
            _Fact(f"it opened a new campus in {{ANS}} in {year}", city,
                  (f"Where did the {org} open a new campus?",)),
            _Fact(f"it opened a new campus in {city} in {{ANS}}", year,
                  (f"When did the {org} open a new campus?",)),
        ]

    def staff():
        n = _number(rng)
        return [_Fact(f"the {org} employed {{ANS}} people", n,
                      (f"How many people did the {org} employ?",))]

    def prize():
        award, year = rng.choice(_PRIZES), _year(rng)
        return [
            _Fact(f"the {org} won the {{ANS}} award in {year}", award,
                  (f"Which award did the {org} win?",)),
            _Fact(f"the {org} won the {award} award in {{ANS}}", year,
                  (f"When did the {org} win the {award} award?",)),
        ]

    def report():
        person = _person(rng)
        return [_Fact(f"{{ANS}} published a report criticizing the {org}", person,
                      (f"Who published a report criticizing the {org}?",))]

    def merged():
        other = f"{_name(rng)} {rng.choice(_ORG_SUFFIX)}"
        return [_Fact(f"the {org} merged with the {{ANS}}", other,
                      (f"With which organization did the {org} merge?",))]

    def budget():
        amount = f"{_number(rng)} million dollars"
        return [_Fact(f"the annual budget of the {org} reached {{ANS}}", amount,
                      (f"What annual budget did the {org} reach?",))]

    def museum():
        person, city = _person(rng), _city(rng)
        return [
            _Fact(f"{{ANS}} opened a museum about the {org} in {city}", person,
                  (f"Who opened a museum about the {org}?",)),
            _Fact(f"{person} opened a museum about the {org} in {{ANS}}", city,
                  (f"Where was a museum about the {org} opened?",)),
        ]

    def partner():
        other = f"{_name(rng)} {rng.choice(_ORG_SUFFIX)}"
        year = _year(rng)
        return [_Fact(f"the {org} signed a partnership with the {{ANS}} in {year}", other,
                      (f"With whom did the {org} sign a partnership?",))]

    return [founded, moved, director, acquired, campus, staff, prize, report, merged, budget, museum, partner]


_FILLERS = (
    "its archive holds letters, maps and photographs from many decades",
    "the work of its members attracted attention in several countries",
    "its annual meeting was held in a large hall near the river",
    "critics and supporters often disagreed about its priorities",
    "many of its early records were lost in a fire",
    "its staff published newsletters for members and friends",
    "its emblem shows a tower above two crossed keys",
    "visitors could tour its offices on the first day of each month",
)


def _sentence(core: str, connective: Optional[str]) -> str:
    if connective is None:
        return core[0].upper() + core[1:] + "."
    return f"{connective}, {core}."


def generate(n_paragraphs: int, seed: int = 0, questions_per_paragraph: int = 3, prefix: str = "syn") -> list[QAExample]:
    """Deterministic list of SQuAD-style examples."""
    rng = random.Random(seed)
    examples: list[QAExample] = []
    for pi in range(n_paragraphs):
        org = f"{_name(rng)} {rng.choice(_ORG_SUFFIX)}"
        city = _city(rng)
        kind = rng.choice(_KINDS)
        intro = _Fact(f"the {org} is a {kind} based in {{ANS}}", city,
                      (f"Where is the {org} based?", f"In which city is the {org} based?"))
        n_sent = rng.randint(7, 11)
        makers = _facts(rng, org)
        rng.shuffle(makers)
        n_fill = rng.randint(1, 3)
        body = [m() for m in makers[: n_sent - 1 - n_fill]]
        body += [[_Fact(f, "", ())] for f in rng.sample(_FILLERS, n_fill)]
        rng.shuffle(body)
        groups = [[intro]] + body
        slots = [None] + [1 + (i * 5) // (n_sent - 1) for i in range(n_sent - 1)]
        pieces: list[str] = []
        candidates: list[tuple[int, _Fact]] = []
        for group, slot in zip(groups, slots):
            connective = None if slot is None else rng.choice(_CONNECTIVES[slot])
            fact = group[0]
            text = _sentence(fact.sentence.replace("{ANS}", fact.answer), connective)
            if not fact.answer:
                text = _sentence(fact.sentence, None if rng.random() < 0.5 else connective)
            offset = sum(len(p) + 1 for p in pieces)
            for f in group:
                if not f.answer:
                    continue
                probe = _sentence(f.sentence.replace("{ANS}", "\x00"), connective)
                candidates.append((offset + probe.index("\x00"), f))
            pieces.append(text)
        context = " ".join(pieces)
        chosen = rng.sample(candidates, min(questions_per_paragraph, len(candidates)))
        for qi, (start, fact) in enumerate(chosen):
            assert context[start:start + len(fact.answer)] == fact.answer
            examples.append(
                QAExample(
                    id=f"{prefix}-{seed}-{pi}-{qi}",
                    context=context,
                    question=rng.choice(fact.questions),
                    answers=[GoldAnswer(fact.answer, start)],
                    title=org,
                )
            )
    return examples


def generate_splits(n_train: int = 3000, n_dev: int = 600, seed: int = 0) -> tuple[list[QAExample], list[QAExample]]:
    """Train and dev sets with disjoint paragraphs; sizes count questions."""
    per = 3
    train = generate(-(-n_train // per), seed=seed, questions_per_paragraph=per, prefix="train")[:n_train]
    dev = generate(-(-n_dev // per), seed=seed + 7919, questions_per_paragraph=per, prefix="dev")[:n_dev]
    return train, dev
