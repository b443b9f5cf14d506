import json
import logging
import math

import numpy as np
import pytest

from oracles import ScalarAdam
from selqa.corpus import save_squad
from selqa.model import ModelParams, ModelSpec, load_checkpoint
from selqa.perturb import PERTURBATIONS, PerturbationKind
from selqa.synth import generate_splits
from selqa.trainer import (
    Adam,
    ConfigError,
    RunResult,
    TrainConfig,
    _select,
    eval_external,
    linear_lr,
    matrix_from_runs,
    read_ledger,
    run_cross_eval,
    standard_configs,
    train,
    tune_lambda,
)

K = PerturbationKind
SMALL = dict(epochs=1, batch_size=16, lr_init=0.03, dim=8, window=1, gate_hidden=4, seeds=(3,))


@pytest.fixture(scope="module")
def data():
    return generate_splits(48, 12, seed=5)


def cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


# --- optimizer


def _three_params():
    spec = ModelSpec.bilinear(2, dim=1)
    p = ModelParams.zeros(spec)
    p.tensors["emb"] = np.array([[0.5], [-1.0]])
    p.tensors["w_start"] = np.array([[2.0]])
    return p


def _grad_at(p, t):
    g = ModelParams.zeros(p.spec)
    g.tensors["emb"] = np.array([[math.sin(t + p.emb[0, 0])], [p.emb[1, 0] * 2]])
    g.tensors["w_start"] = np.array([[math.cos(3 * t) - p.w_start[0, 0]]])
    return g


def test_adam_matches_scalar_reference():
    p = _three_params()
    adam = Adam(p)
    ref = ScalarAdam(3, lr=0.01)
    flat = [0.5, -1.0, 2.0]
    for t in range(100):
        g = _grad_at(p, t)
        gflat = [g.emb[0, 0], g.emb[1, 0], g.w_start[0, 0]]
        adam.step(p, g, 0.01)
        flat = ref.step(flat, gflat)
        assert np.allclose([p.emb[0, 0], p.emb[1, 0], p.w_start[0, 0]], flat, rtol=0, atol=1e-12)


def test_adam_matches_torch():
    torch = pytest.importorskip("torch")
    p = _three_params()
    adam = Adam(p)
    tp = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([tp], lr=0.01)
    for t in range(100):
        g = _grad_at(p, t)
        tp.grad = torch.tensor([g.emb[0, 0], g.emb[1, 0], g.w_start[0, 0]], dtype=torch.float64)
        opt.step()
        adam.step(p, g, 0.01)
    assert np.allclose([p.emb[0, 0], p.emb[1, 0], p.w_start[0, 0]], tp.detach().numpy(), rtol=0, atol=1e-12)


def test_linear_schedule():
    assert linear_lr(1e-2, 0, 10) == 1e-2
    assert linear_lr(1e-2, 5, 10) == pytest.approx(5e-3)
    assert linear_lr(1e-2, 9, 10) == pytest.approx(1e-3)


# --- config


def test_config_defaults_and_labels():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr_init, c.seeds, c.lambda_grid) == (2, 32, 1e-2, (13, 42, 2022), (0.01, 0.1, 1.0, 5.0))
    assert c.label == "none"
    assert c.with_perturbations(["Del_func"], {"del_func": 1}).label == "del_func"
    assert c.with_perturbations(PERTURBATIONS).label == "all"
    assert c.with_perturbations(["shuf_sent", "del_que"]).label == "del_que+shuf_sent"


@pytest.mark.parametrize("bad", [
    {"epochs": 0}, {"batch_size": 0}, {"seeds": []}, {"lambdas": {"del_func": -1}},
    {"model": "lstm"}, {"entropy_mode": "max"}, {"perturbations": ["none"]}, {"perturbations": ["bogus"]},
    {"epochs": "two"}, {"epochs": 2.5}, {"colour": "red"},
])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


def test_config_load_round_trip(tmp_path):
    c = cfg(perturbations=("del_que",), lambdas={"del_que": 5.0})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()), encoding="utf-8")
    assert TrainConfig.load(path) == c
    path.write_text("epochs: [1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        TrainConfig.load(path)
    with pytest.raises(ConfigError):
        TrainConfig.load(tmp_path / "missing.yaml")
    path.write_text("- 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        TrainConfig.load(path)


def test_shipped_toy_config_loads():
    from pathlib import Path

    c = TrainConfig.load(Path(__file__).parent.parent / "configs" / "toy.yaml")
    assert c.seeds == (13, 42, 2022) and c.model == "gated"


# --- training


def test_training_is_deterministic(data, tmp_path):
    train_set, dev_set = data
    c = cfg(perturbations=("shuf_word",), lambdas={"shuf_word": 1.0})
    a = train(c, train_set, dev_set, checkpoint=tmp_path / "a.json")
    b = train(c, train_set, dev_set, checkpoint=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a.metrics == b.metrics and a.failed is None
    assert set(a.metrics) == {k.value for k in K}
    c2 = train(c, train_set, dev_set, seed=4)
    assert c2.metrics != a.metrics


def test_all_with_zero_lambda_equals_plain_training(data):
    train_set, dev_set = data
    plain = train(cfg(), train_set, dev_set)
    zero = train(cfg().with_perturbations(PERTURBATIONS, {k: 0.0 for k in PERTURBATIONS}), train_set, dev_set)
    assert plain.metrics == zero.metrics


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_is_recorded(data):
    train_set, dev_set = data
    r = train(cfg(lr_init=float("inf")), train_set, dev_set)
    assert r.failed and "non-finite" in r.failed and r.metrics == {} and r.checkpoint is None


def test_training_without_aligned_answers_raises(data):
    train_set, dev_set = data
    with pytest.raises(ValueError):
        train(cfg(max_context_len=1), train_set[:3], dev_set)


# --- lambda selection


def test_select_prefers_passing_then_f1_then_smaller_lambda():
    trials = [
        {"lambda": 0.01, "f1": 0.9, "clears_bar": False},
        {"lambda": 1.0, "f1": 0.7, "clears_bar": True},
        {"lambda": 0.1, "f1": 0.7, "clears_bar": True},
        {"lambda": 5.0, "f1": 0.6, "clears_bar": True},
    ]
    assert _select(trials) == (0.1, False)
    fallback = [{"lambda": 5.0, "f1": 0.5, "clears_bar": False}, {"lambda": 1.0, "f1": 0.6, "clears_bar": False}]
    assert _select(fallback) == (1.0, True)


def test_tune_zero_grid_falls_back(data, caplog):
    train_set, dev_set = data
    with caplog.at_level(logging.WARNING):
        res = tune_lambda(cfg(lambda_grid=(0.0,)), train_set, dev_set, kinds=[K.SHUF_SENT])
    (trial,) = res.trials
    assert res.lambdas == {"shuf_sent": 0.0}
    assert res.fallback == {"shuf_sent": not trial["clears_bar"]}
    assert trial["clears_bar"] == (trial["entropy"]["shuf_sent"] >= 0.9 * trial["ceiling"]["shuf_sent"])
    assert ("fell back" in caplog.text) == res.fallback["shuf_sent"]
    with pytest.raises(ConfigError):
        tune_lambda(cfg(lambda_grid=()), train_set, dev_set)


# --- cross evaluation, ledger, external eval


def test_cross_eval_shape_and_ledger(data, tmp_path):
    train_set, dev_set = data
    configs = standard_configs(cfg(), {k.value: 1.0 for k in PERTURBATIONS})
    assert [c.label for c in configs] == ["none", "del_func", "del_que", "shuf_word", "shuf_sent", "all"]
    ledger = tmp_path / "runs.jsonl"
    matrix, runs = run_cross_eval(configs, train_set, dev_set, ledger=ledger, checkpoint_dir=tmp_path / "ck")
    assert len(matrix.rows) == 6 and len(matrix.cols) == 5
    assert len(list((tmp_path / "ck").iterdir())) == 6
    back = read_ledger(ledger)
    assert [r.to_json() for r in back] == [r.to_json() for r in runs]
    assert matrix_from_runs(back).to_markdown() == matrix.to_markdown()

    # external evaluation on the same dev set reproduces the clean cell
    dev_path = tmp_path / "dev.json"
    save_squad(dev_set, dev_path)
    params, vocab = load_checkpoint(runs[0].checkpoint)
    f1, em, ent = eval_external(params, vocab, dev_path, ledger=ledger, label="self")
    assert f1 == pytest.approx(runs[0].metrics["none"]["f1"], abs=1e-12)
    assert ent == pytest.approx(runs[0].metrics["none"]["entropy"], abs=1e-12)
    assert len(read_ledger(ledger)) == 6  # external record is skipped
    assert json.loads(ledger.read_text(encoding="utf-8").splitlines()[-1])["record"] == "external"


def test_eval_external_empty_and_low_coverage(tmp_path, caplog, data):
    _, dev_set = data
    empty = tmp_path / "e.json"
    save_squad([], empty)
    vocab = {"<pad>": 0, "<unk>": 1}
    params = ModelParams.zeros(ModelSpec.bilinear(2, dim=2))
    with pytest.raises(ValueError, match="empty"):
        eval_external(params, vocab, empty)
    dev_path = tmp_path / "d.json"
    save_squad(dev_set, dev_path)
    with caplog.at_level(logging.WARNING):
        eval_external(params, vocab, dev_path)
    assert "vocabulary covers only" in caplog.text


def test_run_result_json_round_trip():
    r = RunResult({"a": 1}, "none", 3, None, {"none": {"entropy": 1.0}}, {"steps": 2})
    assert RunResult.from_json(r.to_json()) == r
