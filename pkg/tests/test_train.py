import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctnn.autodiff import Tensor
from ctnn.errors import ConfigError, EmptyDataset, ShapeMismatch
from ctnn.models import LinearModel, TokenTransformer
from ctnn.optim import Adam, AdamW, cosine_lr
from ctnn.train import aggregate, evaluate, gen_linear_map, load_config, score, split_arrays, train
from instances import rng_for


def linear_cfg(**over):
    cfg = {
        "name": "linear",
        "dataset": {"generator": "linear-map", "seed": 0},
        "arms": [{"name": "lin", "model": {"kind": "linear"}}],
        "optimizer": {"kind": "adam", "lr": 0.01, "schedule": "cosine"},
        "epochs": 300,
        "batch_size": 8,
        "seeds": [0],
        "metric": "mse",
    }
    cfg.update(over)
    return cfg


def tiny_cc_cfg(**over):
    cfg = {
        "name": "cc-small",
        "dataset": {"generator": "cc-class", "seed": 0, "params": {"n_train": 24, "n_test": 8}},
        "arms": [
            {"name": "classic", "model": {"d": 8, "layers": 1, "heads": 2, "head_dim": 4, "positional": False}},
            {"name": "fc", "model": {"d": 8, "layers": 1, "heads": 2, "head_dim": 4, "positional": False,
                                     "family": "sheaf-fc", "condition": "h"}},
        ],
        "optimizer": {"kind": "adam", "lr": 1e-3, "schedule": "constant"},
        "epochs": 2,
        "batch_size": 8,
        "seeds": [0, 1],
        "metric": "accuracy",
    }
    cfg.update(over)
    return cfg


# optimizer


def test_adam_zero_gradient_is_noop():
    p = Tensor(rng_for(0).standard_normal((3, 2)))
    before = p.data.copy()
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        opt.step([np.zeros((3, 2))])
    np.testing.assert_array_equal(p.data, before)
    opt.step([None])
    np.testing.assert_array_equal(p.data, before)


@given(st.floats(1e-4, 1.0), st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_adam_first_step_is_minus_lr(lr, x0):
    p = Tensor(np.array(x0))
    Adam([p], lr=lr, eps=0.0).step([np.array(1.0)])
    assert p.data == pytest.approx(x0 - lr, abs=1e-15)


def test_adam_constant_gradient_keeps_unit_steps():
    p = Tensor(np.array(0.0))
    opt = Adam([p], lr=0.1, eps=0.0)
    for k in range(1, 6):
        opt.step([np.array(1.0)])
        assert p.data == pytest.approx(-0.1 * k, abs=1e-14)


def test_adamw_minus_adam_is_decay_term():
    rng = rng_for(3)
    x0 = rng.standard_normal(5)
    g = rng.standard_normal(5)
    lr, lam = 0.05, 0.3
    a, w = Tensor(x0.copy()), Tensor(x0.copy())
    Adam([a], lr=lr).step([g])
    AdamW([w], lr=lr, weight_decay=lam).step([g])
    np.testing.assert_allclose(w.data - a.data, -lr * lam * x0, rtol=0, atol=1e-15)


def test_adam_l2_decay_folds_into_gradient():
    x0 = np.array([2.0, -1.0])
    a, b = Tensor(x0.copy()), Tensor(x0.copy())
    Adam([a], lr=0.1, weight_decay=0.5).step([np.zeros(2)])
    Adam([b], lr=0.1).step([0.5 * x0])
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_shape_errors():
    p = Tensor(np.zeros(3))
    opt = Adam([p])
    with pytest.raises(ShapeMismatch):
        opt.step([np.zeros(4)])
    with pytest.raises(ShapeMismatch):
        opt.step([])
    assert opt.kind == "adam" and AdamW([p]).kind == "adamw"


def test_cosine_schedule():
    assert cosine_lr(1e-3, 0, 100) == 1e-3
    assert cosine_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert cosine_lr(1e-3, 100, 100) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1.0, 25, 100) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))


# config


def test_config_roundtrip_and_defaults():
    cfg = load_config(json.dumps(linear_cfg()))
    assert cfg.param_seeding == "independent" and cfg.optimizer.betas == (0.9, 0.999)
    assert cfg.optimizer.eps == 1e-8


@pytest.mark.parametrize("mutate, path", [
    (lambda c: c.update(epochs=0), "epochs"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["optimizer"].update(lr="fast"), "optimizer.lr"),
    (lambda c: c["optimizer"].update(kind="sgd"), "optimizer.kind"),
    (lambda c: c["arms"][0]["model"].update(hidden=3), "arms.0.model.hidden"),
    (lambda c: c["arms"][0]["model"].update(family="nope"), "arms.0.model"),
    (lambda c: c["dataset"].update(params={"n_trian": 3}), "dataset"),
    (lambda c: c.pop("arms"), "arms"),
])
def test_config_errors_carry_path(mutate, path):
    cfg = linear_cfg()
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        load_config(cfg)
    assert info.value.path == path
    assert str(info.value).startswith(path + ":")


def test_config_from_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps(linear_cfg()))
    assert load_config(str(f)).name == "linear"


# evaluation


class Constant:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def __call__(self, x):
        return Tensor(np.broadcast_to(self.value, (x.shape[0],) + self.value.shape).copy())


def test_evaluate_constant_predictor():
    x = np.zeros((7, 3, 1))
    y = np.tile([0.25, -1.0], (7, 1))
    assert evaluate(Constant([0.25, -1.0]), x, y, "mse") == 0.0


def test_evaluate_perfect_classifier():
    y = np.array([0, 1, 1, 0, 1])
    logits = np.eye(2)[y] * 3.0
    assert score(logits, y, "accuracy") == 1.0


def test_evaluate_empty():
    with pytest.raises(EmptyDataset):
        evaluate(Constant([0.0]), np.zeros((0, 2, 1)), np.zeros((0, 1)), "mse")
    with pytest.raises(EmptyDataset):
        score(np.zeros((0, 2)), np.zeros(0), "accuracy")


@pytest.mark.parametrize("seed", range(5))
def test_random_predictions_on_balanced_labels(seed):
    n = 2000
    rng = rng_for(seed)
    y = rng.permutation(np.repeat([0, 1], n // 2))
    acc = score(rng.integers(0, 2, n), y, "accuracy")
    # four binomial standard deviations around one half
    assert abs(acc - 0.5) <= 4 * math.sqrt(0.25 / n)


def test_mse_matches_hand_value():
    assert score(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]), "mse") == 2.5


# training


def test_linear_sanity():
    report = train(linear_cfg())
    assert report["arms"]["lin"]["mean"] < 1e-6


def test_linear_data_is_exact_affine():
    ds = gen_linear_map(seed=2)
    x, y = split_arrays(ds, "train")
    X = np.hstack([x[..., 0], np.ones((len(x), 1))])
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.max(np.abs(X @ coef - y)) < 1e-12


def test_report_aggregation_matches_recomputation():
    report = train(tiny_cc_cfg())
    for arm in report["arms"].values():
        v = arm["per_seed"]
        assert arm["mean"] == pytest.approx(sum(v) / len(v), abs=1e-15)
        mu = sum(v) / len(v)
        assert arm["std"] == pytest.approx(math.sqrt(sum((a - mu) ** 2 for a in v) / len(v)), abs=1e-15)
        assert len(arm["loss_traces"]) == 2 and all(len(t) == 2 for t in arm["loss_traces"])
    assert aggregate([1.0, 3.0]) == {"per_seed": [1.0, 3.0], "mean": 2.0, "std": 1.0}


def test_training_is_deterministic():
    a = train(tiny_cc_cfg())
    b = train(tiny_cc_cfg())
    assert json.dumps(a) == json.dumps(b)


def test_emitter_records():
    seen = []
    train(tiny_cc_cfg(epochs=2, seeds=[3]), emit=seen.append)
    assert [(r["arm"], r["seed"], r["epoch"]) for r in seen] == [("classic", 3, 1), ("classic", 3, 2), ("fc", 3, 1), ("fc", 3, 2)]
    assert all(set(r) == {"arm", "seed", "epoch", "train_loss", "lr"} for r in seen)


def test_param_seeding_modes():
    twins = [{"name": n, "model": {"d": 8, "layers": 1, "heads": 2, "head_dim": 4}} for n in ("a", "b")]
    ind = train(tiny_cc_cfg(epochs=1, seeds=[0], arms=twins))
    paired = train(tiny_cc_cfg(epochs=1, seeds=[0], arms=twins, param_seeding="paired"))
    assert paired["arms"]["a"]["loss_traces"] == paired["arms"]["b"]["loss_traces"]
    assert ind["arms"]["a"]["loss_traces"] != ind["arms"]["b"]["loss_traces"]


def test_seed_data_per_run_changes_data():
    shared = train(tiny_cc_cfg(epochs=1, seeds=[0, 1], param_seeding="paired"))
    fresh = train(tiny_cc_cfg(epochs=1, seeds=[0, 1], param_seeding="paired", seed_data_per_run=True))
    assert shared["arms"]["classic"]["loss_traces"][0] == fresh["arms"]["classic"]["loss_traces"][0]
    assert shared["arms"]["classic"]["loss_traces"][1] != fresh["arms"]["classic"]["loss_traces"][1]


def test_model_state_roundtrip():
    m = TokenTransformer(2, 3, d=8, layers=1, heads=2, family="sheaf-fc", seq_len=5, seed=4)
    x = Tensor(rng_for(0).standard_normal((2, 5, 2)))
    clone = TokenTransformer(2, 3, d=8, layers=1, heads=2, family="sheaf-fc", seq_len=5, seed=9)
    clone.load_state_dict(json.loads(json.dumps(m.state_dict())))
    np.testing.assert_array_equal(clone(x).data, m(x).data)
    lin = LinearModel(10, 2)
    assert lin(Tensor(np.zeros((3, 5, 2)))).shape == (3, 2)
