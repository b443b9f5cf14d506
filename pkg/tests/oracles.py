"""Independent reference implementations used as test oracles.

Each one is written from the definition, deliberately without reusing the code
under test: loops instead of vectorised numpy, lists instead of Counters.
"""

from __future__ import annotations

import math
import string


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def normalize(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in string.punctuation)
    # drop whole runs of word characters equal to an article
    pieces, i = [], 0
    while i < len(s):
        if _is_word_char(s[i]):
            j = i
            while j < len(s) and _is_word_char(s[j]):
                j += 1
            run = s[i:j]
            pieces.append(" " if run in ("a", "an", "the") else run)
            i = j
        else:
            pieces.append(s[i])
            i += 1
    return " ".join("".join(pieces).split())


def bag_f1(pred: str, gold: str) -> float:
    p = normalize(pred).split()
    g = normalize(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    remaining = list(g)
    overlap = 0
    for tok in p:
        if tok in remaining:
            remaining.remove(tok)
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def max_f1(pred: str, golds) -> float:
    return max(bag_f1(pred, g) for g in golds)


def exact(pred: str, golds) -> float:
    return 1.0 if any(normalize(pred) == normalize(g) for g in golds) else 0.0


def entropy_sum(p_start, p_end) -> float:
    total = 0.0
    for vec in (p_start, p_end):
        for x in vec:
            x = float(x)
            if x > 0:
                total -= x * math.log(x)
    return total


def best_span(p_start, p_end, max_len: int = 30):
    best = None
    for i in range(len(p_start)):
        for j in range(i, min(len(p_end), i + max_len)):
            score = float(p_start[i]) * float(p_end[j])
            if best is None or score > best[2]:
                best = (i, j, score)
    return best


def softmax(scores):
    m = max(scores)
    ex = [math.exp(s - m) for s in scores]
    z = sum(ex)
    return [e / z for e in ex]


def splitmix64_stream(seed: int, n: int):
    """Textbook splitmix64 output sequence."""
    mask = (1 << 64) - 1
    out = []
    x = seed & mask
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def xoshiro_stream(seed: int, n: int):
    """xoshiro256** seeded by four splitmix64 outputs."""
    mask = (1 << 64) - 1

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & mask

    s = splitmix64_stream(seed, 4)
    out = []
    for _ in range(n):
        out.append((rotl((s[1] * 5) & mask, 7) * 9) & mask)
        t = (s[1] << 17) & mask
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def is_subsequence(small, big) -> bool:
    it = iter(big)
    return all(any(x == y for y in it) for x in small)


class ScalarAdam:
    """Adam written from the published update rule (one scalar per parameter)."""

    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [0.0] * n
        self.v = [0.0] * n
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * m_hat / (math.sqrt(v_hat) + self.eps))
        return out
