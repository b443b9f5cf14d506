"""Embedded golden checks that need no dataset or network."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np

from .corpus import GoldAnswer, QAExample, tokenize, tokenize_example
from .metrics import SpanDistribution, max_span_entropy, span_entropy
from .model import EncodedView, ModelSpec, init_params, objective
from .perturb import Lexicon, PerturbationKind, del_func, perturbed_qa, shuf_word

GRAD_TOL = 1e-4


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def golden_fixture() -> dict:
    text = resources.files("selqa").joinpath("data").joinpath("golden_example.json").read_text(encoding="utf-8")
    return json.loads(text)


def golden_example(fixture: Optional[dict] = None) -> QAExample:
    fx = fixture or golden_fixture()
    ans = fx["answer"]
    return QAExample(fx["id"], fx["context"], fx["question"], [GoldAnswer(ans["text"], ans["answer_start"])], fx["title"])


def single_spaced(text: str) -> str:
    """Tokens joined by single spaces, the form perturbed text is written in."""
    return " ".join(t.text for t in tokenize(text))


def check_golden(lexicon: Optional[Lexicon] = None, shuffle_seeds: int = 100) -> list[Check]:
    fx = golden_fixture()
    tok = tokenize_example(golden_example(fx))
    pex = del_func(tok, lexicon=lexicon)
    want_c = single_spaced(fx["del_func"]["context"])
    want_q = single_spaced(fx["del_func"]["question"])
    checks = [
        Check("del_func context", pex.perturbed_context == want_c, repr(pex.perturbed_context)),
        Check("del_func question", pex.perturbed_question == want_q, repr(pex.perturbed_question)),
    ]
    answer = fx["answer"]["text"]
    bad = []
    for seed in range(shuffle_seeds):
        out = shuf_word(tok, seed)
        if out.answer_text != answer or answer not in out.perturbed_context:
            bad.append(seed)
        elif perturbed_qa(out, golden_example(fx)).answers[0].text != answer:
            bad.append(seed)
    checks.append(Check(
        "shuf_word keeps the answer contiguous",
        not bad,
        f"{shuffle_seeds - len(bad)}/{shuffle_seeds} seeds" + (f", failing {bad[:5]}" if bad else ""),
    ))
    return checks


def check_entropy_constants() -> list[Check]:
    L = 384
    uniform = SpanDistribution(np.full(L, 1.0 / L), np.full(L, 1.0 / L))
    h = span_entropy(uniform)
    one_hot = np.zeros(L)
    one_hot[7] = 1.0
    h0 = span_entropy(SpanDistribution(one_hot, one_hot))
    return [
        Check("uniform entropy at L=384", abs(h - 11.90) <= 0.01, f"{h:.6f} nats"),
        Check("ceiling formula", math.isclose(h, max_span_entropy(L), rel_tol=0, abs_tol=1e-12), f"2 ln 384 = {max_span_entropy(L):.6f}"),
        Check("one-hot entropy", h0 == 0.0, f"{h0!r}"),
    ]


def gradient_check(seed: int = 0, h: float = 1e-6) -> tuple[float, float]:
    """Max relative and absolute error of the analytic gradient against central
    differences on a small random problem.  The relative error of a coordinate
    is |a - n| / max(|a|, |n|, 1e-4) so coordinates whose true gradient is zero
    are judged by absolute error."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(vocab_size=10, dim=3, window=1, gate_hidden=2, question_bias=True, sentence_features=3)
    params = init_params(spec, seed)
    for name, arr in params.items():
        arr += rng.normal(0.0, 0.5, arr.shape)

    def view(L, M):
        ctx = rng.integers(0, spec.vocab_size, L)
        s = int(rng.integers(0, L))
        return EncodedView("g", ctx, np.sort(rng.integers(0, 3, L)), rng.integers(0, spec.vocab_size, M), (s, min(L - 1, s + 1)))

    clean = [view(5, 3), view(4, 2)]
    views = {PerturbationKind.DEL_FUNC: [view(4, 2), view(3, 0)], PerturbationKind.SHUF_WORD: [view(5, 3), view(4, 2)]}
    lambdas = {PerturbationKind.DEL_FUNC: 1.0, PerturbationKind.SHUF_WORD: 5.0}
    _, grads = objective(params, clean, views, lambdas)
    worst_rel = worst_abs = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = objective(params, clean, views, lambdas, with_grad=False)[0].total
            arr[idx] = old - h
            fm = objective(params, clean, views, lambdas, with_grad=False)[0].total
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            ana = float(grads.tensors[name][idx])
            err = abs(ana - num)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(ana), abs(num), 1e-4))
    return worst_rel, worst_abs


def check_gradient(seed: int = 0) -> list[Check]:
    rel, ab = gradient_check(seed)
    return [Check("gradient vs central differences", rel < GRAD_TOL, f"max rel {rel:.2e}, max abs {ab:.2e}")]


def run_all(lexicon: Optional[Lexicon] = None) -> list[Check]:
    return check_golden(lexicon) + check_entropy_constants() + check_gradient()
