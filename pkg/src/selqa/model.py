"""Question-conditioned span scorer with hand-derived gradients.

For context token ``i`` with window representation ``h_i`` (the embeddings of
tokens ``i-K .. i+K`` concatenated, zero beyond the edges) and question
vector ``q`` (mean question embedding plus an optional learned bias)::

    s_start[i] = g * h_i . (W_start q) + b_start
    s_end[i]   = g * h_i . (W_end q)   + b_end

``g`` is a sigmoid gate computed from bigram features of the context (with
their sentence index) and of the question.  With ``window=0``,
``gate_hidden=0`` and ``question_bias=False`` this reduces to the plain
bilinear scorer ``e_i . (W q) + b``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .metrics import SpanDistribution, _entropy
from .perturb import PerturbationKind

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-30
MAX_ANSWER_LEN = 30
CHECKPOINT_FORMAT = "selqa-checkpoint"
CHECKPOINT_VERSION = 1


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int
    dim: int = 64
    window: int = 2
    gate_hidden: int = 16
    question_bias: bool = True
    sentence_features: int = 8

    @classmethod
    def bilinear(cls, vocab_size: int, dim: int = 64) -> "ModelSpec":
        return cls(vocab_size, dim, window=0, gate_hidden=0, question_bias=False)

    @property
    def window_dim(self) -> int:
        return (2 * self.window + 1) * self.dim

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, m, D = self.dim, self.gate_hidden, self.window_dim
        gated = m > 0
        return {
            "emb": (self.vocab_size, d),
            "w_start": (D, d),
            "w_end": (D, d),
            "b_start": (),
            "b_end": (),
            "q_bias": (d,) if self.question_bias else (0,),
            "gate_ctx_w": (m, 2 * d + self.sentence_features) if gated else (0, 0),
            "gate_ctx_b": (m,),
            "gate_q_w": (m, 2 * d) if gated else (0, 0),
            "gate_q_b": (m,),
            "gate_out_w": (2 * m,),
            "gate_out_b": () if gated else (0,),
        }


PARAM_NAMES = tuple(ModelSpec(2).shapes())


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]

    def __getattr__(self, name):
        tensors = self.__dict__.get("tensors")
        if tensors is not None and name in tensors:
            return tensors[name]
        raise AttributeError(name)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ModelParams":
        return cls(spec, {k: np.zeros(s) for k, s in spec.shapes().items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def items(self):
        return ((k, self.tensors[k]) for k in PARAM_NAMES)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams.zeros(spec)
    t = p.tensors
    t["emb"] = rng.normal(0.0, 0.1, spec.shapes()["emb"])
    scale = 1.0 / math.sqrt(spec.window_dim)
    t["w_start"] = rng.normal(0.0, scale, t["w_start"].shape)
    t["w_end"] = rng.normal(0.0, scale, t["w_end"].shape)
    if spec.gate_hidden > 0:
        for name in ("gate_ctx_w", "gate_q_w"):
            t[name] = rng.normal(0.0, 1.0 / math.sqrt(t[name].shape[1]), t[name].shape)
        t["gate_out_w"] = rng.normal(0.0, 1.0 / math.sqrt(2 * spec.gate_hidden), t["gate_out_w"].shape)
        t["gate_out_b"] = np.array(2.0)
    return p


# ---------------------------------------------------------------------------
# inputs


@dataclass
class EncodedView:
    example_id: str
    ctx: np.ndarray
    sent: np.ndarray
    q: np.ndarray
    span: Optional[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ctx)


def encode(view, vocab: Mapping[str, int]) -> EncodedView:
    """Map a tokenized (clean or perturbed) view to id arrays."""
    unk = vocab["<unk>"]
    ctx = np.array([vocab.get(t.text.lower(), unk) for t in view.context_tokens], dtype=np.int64)
    q = np.array([vocab.get(t.text.lower(), unk) for t in view.question_tokens], dtype=np.int64)
    sent = np.zeros(len(ctx), dtype=np.int64)
    for k, (s, e) in enumerate(view.sentence_ranges):
        sent[s:e] = k
    return EncodedView(view.example_id, ctx, sent, q, view.answer_span)


@dataclass
class ForwardCache:
    views: list[EncodedView]
    ctx_ids: np.ndarray
    ctx_mask: np.ndarray
    q_ids: np.ndarray
    q_mask: np.ndarray
    ctx_len: np.ndarray
    q_len: np.ndarray
    Cp: np.ndarray  # context embeddings zero-padded by the window radius
    q: np.ndarray
    v_start: np.ndarray
    v_end: np.ndarray
    raw_start: np.ndarray
    raw_end: np.ndarray
    gate: np.ndarray
    p_start: np.ndarray
    p_end: np.ndarray
    gate_inputs: Optional[dict] = None

    def dist(self, b: int) -> SpanDistribution:
        n = int(self.ctx_len[b])
        return SpanDistribution(self.p_start[b, :n].copy(), self.p_end[b, :n].copy())

    def dists(self) -> list[SpanDistribution]:
        return [self.dist(b) for b in range(len(self.views))]


def _pad(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(a) for a in arrays), default=0)
    ids = np.zeros((len(arrays), max(width, 1)), dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for b, a in enumerate(arrays):
        ids[b, : len(a)] = a
        mask[b, : len(a)] = True
    return ids, mask


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def forward_batch(params: ModelParams, views: Sequence[EncodedView]) -> ForwardCache:
    spec = params.spec
    for v in views:
        if len(v.ctx) == 0:
            raise ModelError(f"{v.example_id}: empty context")
        if len(v.ctx) and (v.ctx.max() >= spec.vocab_size or v.ctx.min() < 0):
            raise ModelError(f"{v.example_id}: context token id outside vocabulary")
        if len(v.q) and (v.q.max() >= spec.vocab_size or v.q.min() < 0):
            raise ModelError(f"{v.example_id}: question token id outside vocabulary")
    d, K = spec.dim, spec.window
    ctx_ids, cm = _pad([v.ctx for v in views])
    q_ids, qm = _pad([v.q for v in views])
    B, L = ctx_ids.shape
    ctx_len = cm.sum(1)
    q_len = qm.sum(1)
    emb = params.emb

    C = emb[ctx_ids] * cm[..., None]
    Cp = np.zeros((B, L + 2 * K, d))
    Cp[:, K:K + L] = C

    Q = emb[q_ids] * qm[..., None]
    q_den = np.maximum(q_len, 1)[:, None]
    q = Q.sum(1) / q_den
    if spec.question_bias:
        q = q + params.q_bias

    v_start = q @ params.w_start.T
    v_end = q @ params.w_end.T
    # window scores without materialising the (B, L, (2K+1)d) window tensor
    raw_start = np.zeros((B, L))
    raw_end = np.zeros((B, L))
    for k in range(2 * K + 1):
        block = Cp[:, k:k + L]
        raw_start += np.matmul(block, v_start[:, k * d:(k + 1) * d, None])[..., 0]
        raw_end += np.matmul(block, v_end[:, k * d:(k + 1) * d, None])[..., 0]

    gate_inputs = None
    if spec.gate_hidden > 0:
        P = spec.sentence_features
        sent = np.zeros((B, L), dtype=np.int64)
        for b, v in enumerate(views):
            sent[b, : len(v.sent)] = np.minimum(v.sent, P - 1)
        onehot = np.eye(P)[sent] * cm[..., None]
        C_prev = np.zeros_like(C)
        C_prev[:, 1:] = C[:, :-1]
        Xc = np.concatenate([C_prev, C, onehot], axis=2)
        Zc = np.tanh(Xc @ params.gate_ctx_w.T + params.gate_ctx_b)
        phi = (Zc * cm[..., None]).sum(1) / ctx_len[:, None]
        Q_prev = np.zeros_like(Q)
        Q_prev[:, 1:] = Q[:, :-1]
        Xq = np.concatenate([Q_prev, Q], axis=2)
        Zq = np.tanh(Xq @ params.gate_q_w.T + params.gate_q_b)
        psi = (Zq * qm[..., None]).sum(1) / q_den
        feat = np.concatenate([phi, psi], axis=1)
        gate = _sigmoid(feat @ params.gate_out_w + params.gate_out_b)
        gate_inputs = {"Xc": Xc, "Zc": Zc, "Xq": Xq, "Zq": Zq, "feat": feat}
    else:
        gate = np.ones(B)

    s_start = gate[:, None] * raw_start + params.b_start
    s_end = gate[:, None] * raw_end + params.b_end
    return ForwardCache(
        views=list(views),
        ctx_ids=ctx_ids,
        ctx_mask=cm,
        q_ids=q_ids,
        q_mask=qm,
        ctx_len=ctx_len,
        q_len=q_len,
        Cp=Cp,
        q=q,
        v_start=v_start,
        v_end=v_end,
        raw_start=raw_start,
        raw_end=raw_end,
        gate=gate,
        p_start=_masked_softmax(s_start, cm),
        p_end=_masked_softmax(s_end, cm),
        gate_inputs=gate_inputs,
    )


def forward(params: ModelParams, view: EncodedView) -> tuple[SpanDistribution, ForwardCache]:
    cache = forward_batch(params, [view])
    return cache.dist(0), cache


def backward_scores(params: ModelParams, cache: ForwardCache, ds_start: np.ndarray, ds_end: np.ndarray, grads: ModelParams) -> None:
    """Accumulate into ``grads`` the gradient given d(loss)/d(scores)."""
    spec = params.spec
    d, K = spec.dim, spec.window
    g = cache.gate
    B, L = cache.ctx_ids.shape
    cm, qm = cache.ctx_mask, cache.q_mask
    G = grads.tensors

    G["b_start"] += ds_start.sum()
    G["b_end"] += ds_end.sum()
    dg = (ds_start * cache.raw_start).sum(1) + (ds_end * cache.raw_end).sum(1)
    dr_s = g[:, None] * ds_start
    dr_e = g[:, None] * ds_end

    dr = np.stack([dr_s, dr_e], axis=2)  # (B, L, 2)
    dv = np.empty((B, 2, (2 * K + 1) * d))
    v2 = np.stack([cache.v_start, cache.v_end], axis=1)  # (B, 2, (2K+1)d)
    dCp = np.zeros((B, L + 2 * K, d))
    for k in range(2 * K + 1):
        sl = slice(k * d, (k + 1) * d)
        block = cache.Cp[:, k:k + L]
        dv[:, :, sl] = np.matmul(dr.transpose(0, 2, 1), block)
        dCp[:, k:k + L] += np.matmul(dr, v2[:, :, sl])
    dv_s, dv_e = dv[:, 0], dv[:, 1]
    G["w_start"] += dv_s.T @ cache.q
    G["w_end"] += dv_e.T @ cache.q
    dq = dv_s @ params.w_start + dv_e @ params.w_end
    dC = dCp[:, K:K + L]
    dQ = np.zeros(cache.q_ids.shape + (d,))
    q_den = np.maximum(cache.q_len, 1)

    if spec.gate_hidden > 0:
        gi = cache.gate_inputs
        m = spec.gate_hidden
        da = dg * g * (1.0 - g)
        G["gate_out_w"] += gi["feat"].T @ da
        G["gate_out_b"] += da.sum()
        dfeat = da[:, None] * params.gate_out_w[None, :]
        dphi, dpsi = dfeat[:, :m], dfeat[:, m:]

        dZc = dphi[:, None, :] * (cm / cache.ctx_len[:, None])[..., None]
        dpre = dZc * (1.0 - gi["Zc"] ** 2)
        G["gate_ctx_w"] += np.einsum("blm,blx->mx", dpre, gi["Xc"])
        G["gate_ctx_b"] += dpre.sum((0, 1))
        dXc = dpre @ params.gate_ctx_w
        dC = dC + dXc[..., d:2 * d]
        dC[:, :-1] += dXc[:, 1:, :d]

        dZq = dpsi[:, None, :] * (qm / q_den[:, None])[..., None]
        dpre_q = dZq * (1.0 - gi["Zq"] ** 2)
        G["gate_q_w"] += np.einsum("bmh,bmx->hx", dpre_q, gi["Xq"])
        G["gate_q_b"] += dpre_q.sum((0, 1))
        dXq = dpre_q @ params.gate_q_w
        dQ += dXq[..., d:]
        dQ[:, :-1] += dXq[:, 1:, :d]

    if spec.question_bias:
        G["q_bias"] += dq.sum(0)
    dQ += dq[:, None, :] / q_den[:, None, None]

    _scatter_rows(G["emb"], np.concatenate([cache.ctx_ids[cm], cache.q_ids[qm]]), np.concatenate([dC[cm], dQ[qm]]))


def _scatter_rows(target: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """target[ids] += rows with repeated ids accumulated (a faster np.add.at)."""
    if len(ids) == 0:
        return
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    target[ids[starts]] += np.add.reduceat(rows[order], starts, axis=0)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    ce: float
    ent: dict[PerturbationKind, float] = field(default_factory=dict)
    lambdas: dict[PerturbationKind, float] = field(default_factory=dict)
    clamped: int = 0

    @property
    def total(self) -> float:
        total = self.ce
        for kind, h in self.ent.items():
            total = total - self.lambdas.get(kind, 0.0) * h
        return total


def loss_ce(dist: SpanDistribution, gold: tuple[int, int]) -> float:
    """-ln p_start[gold_start] - ln p_end[gold_end] with a 1e-30 floor."""
    s, e = gold
    if not (0 <= s < len(dist) and 0 <= e < len(dist)):
        raise ModelError(f"gold span {gold} outside context of length {len(dist)}")
    return -math.log(max(float(dist.p_start[s]), PROB_FLOOR)) - math.log(max(float(dist.p_end[e]), PROB_FLOOR))


def _row_entropy(p: np.ndarray) -> np.ndarray:
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -plogp.sum(1)


def _ce_grad(cache: ForwardCache, scale: float) -> tuple[float, int, np.ndarray, np.ndarray]:
    B = len(cache.views)
    ds_s = cache.p_start.copy()
    ds_e = cache.p_end.copy()
    total, clamped = 0.0, 0
    for b, v in enumerate(cache.views):
        if v.span is None:
            raise ModelError(f"{v.example_id}: clean view has no answer span")
        gs, ge = v.span
        for p, ds, gold in ((cache.p_start, ds_s, gs), (cache.p_end, ds_e, ge)):
            pg = p[b, gold]
            if pg < PROB_FLOOR:
                clamped += 1
                total -= math.log(PROB_FLOOR)
                ds[b] = 0.0
            else:
                total -= math.log(pg)
                ds[b, gold] -= 1.0
    return total / B, clamped, ds_s * scale / B, ds_e * scale / B


def _entropy_grad(cache: ForwardCache, lam: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean span entropy and the gradient of ``-lam * mean entropy``."""
    B = len(cache.views)
    outs = []
    total = 0.0
    for p in (cache.p_start, cache.p_end):
        h = _row_entropy(p)
        total += h.sum()
        logp = np.log(np.where(p > 0, p, 1.0))
        outs.append(np.where(p > 0, lam * p * (logp + h[:, None]), 0.0) / B)
    return total / B, outs[0], outs[1]


def objective(
    params: ModelParams,
    clean: Sequence[EncodedView],
    views: Mapping[PerturbationKind, Sequence[EncodedView]],
    lambdas: Mapping[PerturbationKind, float],
    with_grad: bool = True,
) -> tuple[LossBreakdown, Optional[ModelParams]]:
    """Batch-mean ``ce - sum_k lambda_k * H_k`` and (optionally) its gradient."""
    grads = ModelParams.zeros(params.spec) if with_grad else None
    cache = forward_batch(params, clean)
    ce, clamped, ds_s, ds_e = _ce_grad(cache, 1.0)
    if grads is not None:
        backward_scores(params, cache, ds_s, ds_e, grads)
    breakdown = LossBreakdown(ce=ce, clamped=clamped)
    for kind, batch in views.items():
        lam = float(lambdas.get(kind, 0.0))
        if lam < 0:
            raise ValueError(f"lambda for {kind.value} must be >= 0, got {lam}")
        pcache = forward_batch(params, batch)
        h, ds_s, ds_e = _entropy_grad(pcache, lam)
        breakdown.ent[kind] = h
        breakdown.lambdas[kind] = lam
        if grads is not None and lam != 0.0:
            backward_scores(params, pcache, ds_s, ds_e, grads)
    if grads is not None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = [v.example_id for v in clean]
                raise ModelError(f"non-finite gradient in {name} (batch {bad[:5]})")
    return breakdown, grads


def loss_combined(params: ModelParams, clean: EncodedView, perturbed: EncodedView, lam: float, kind: PerturbationKind = PerturbationKind.DEL_FUNC) -> LossBreakdown:
    return objective(params, [clean], {kind: [perturbed]}, {kind: lam}, with_grad=False)[0]


def loss_all(params: ModelParams, clean: EncodedView, perturbed: Mapping[PerturbationKind, EncodedView], lambdas: Mapping[PerturbationKind, float]) -> LossBreakdown:
    unknown = set(lambdas) - set(perturbed)
    if unknown:
        raise ValueError(f"lambda given for kinds without a perturbed view: {sorted(k.value for k in unknown)}")
    return objective(params, [clean], {k: [v] for k, v in perturbed.items()}, lambdas, with_grad=False)[0]


def backward(
    params: ModelParams,
    batch: Sequence[tuple[EncodedView, Mapping[PerturbationKind, EncodedView]]],
    lambdas: Mapping[PerturbationKind, float],
) -> tuple[LossBreakdown, ModelParams]:
    """Gradient of the batch-mean objective for paired (clean, perturbed) examples."""
    clean = [c for c, _ in batch]
    kinds = sorted({k for _, pv in batch for k in pv}, key=lambda k: k.value)
    views = {k: [pv[k] for _, pv in batch] for k in kinds}
    breakdown, grads = objective(params, clean, views, lambdas)
    assert grads is not None
    return breakdown, grads


# ---------------------------------------------------------------------------
# decoding


def predict_span(dist: SpanDistribution, max_answer_len: int = MAX_ANSWER_LEN) -> tuple[int, int, float]:
    """Most probable span with ``start <= end < start + max_answer_len``."""
    ps, pe = dist.p_start, dist.p_end
    n = len(ps)
    scores = np.outer(ps, pe)
    i, j = np.indices((n, n))
    scores[(j < i) | (j - i >= max_answer_len)] = -1.0
    best = int(np.argmax(scores))
    s, e = divmod(best, n)
    return s, e, float(scores[s, e])


# ---------------------------------------------------------------------------
# checkpoints


def vocab_hash(vocab: Mapping[str, int]) -> str:
    ordered = [w for w, _ in sorted(vocab.items(), key=lambda kv: kv[1])]
    return hashlib.sha256("\n".join(ordered).encode("utf-8")).hexdigest()


def save_checkpoint(path: str | Path, params: ModelParams, vocab: Mapping[str, int]) -> None:
    """JSON checkpoint: spec, vocabulary in id order, row-major float tensors."""
    ordered = [w for w, _ in sorted(vocab.items(), key=lambda kv: kv[1])]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": asdict(params.spec),
        "vocab_sha256": vocab_hash(vocab),
        "vocab": ordered,
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, int]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    vocab = {w: i for i, w in enumerate(doc["vocab"])}
    if vocab_hash(vocab) != doc["vocab_sha256"]:
        raise ModelError(f"{path}: vocabulary hash mismatch")
    spec = ModelSpec(**doc["spec"])
    tensors = {}
    for name, shape in spec.shapes().items():
        entry = doc["tensors"][name]
        if tuple(entry["shape"]) != shape:
            raise ModelError(f"{path}: tensor {name} has shape {entry['shape']}, expected {list(shape)}")
        tensors[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    return ModelParams(spec, tensors), vocab
