"""Experiment configuration, training and evaluation loops, and run reports."""

from __future__ import annotations

import inspect
import json
import sys
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .datagen import GENERATORS
from .errors import ConfigError, EmptyDataset
from .families import FAMILY_KINDS
from .models import LinearModel, TokenTransformer
from .optim import Adam, cosine_lr


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    generator: Literal["heat", "advection", "cc-class", "token-rel", "linear-map"]
    seed: int = 0
    params: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_params(self):
        if self.generator == "linear-map":
            allowed = set(inspect.signature(gen_linear_map).parameters) - {"seed"}
        else:
            allowed = set(inspect.signature(GENERATORS[self.generator]).parameters) - {"seed"}
        for k in self.params:
            if k not in allowed:
                raise ValueError(f"unknown parameter {k!r} for generator {self.generator}")
        return self


class ModelConfig(_Strict):
    kind: Literal["transformer", "linear"] = "transformer"
    d: int = 64
    layers: int = 2
    heads: int = 4
    head_dim: Optional[int] = None
    family: str = "constant-identity"
    family_options: dict[str, Any] = Field(default_factory=dict)
    wiring: Literal["split", "full"] = "split"
    condition: Literal["qk", "h"] = "qk"
    ffn_hidden: Optional[int] = None
    positional: bool = True

    @model_validator(mode="after")
    def _family_known(self):
        if self.family not in FAMILY_KINDS:
            raise ValueError(f"unknown family {self.family!r}")
        return self


class ArmConfig(_Strict):
    name: str
    model: ModelConfig


class OptimizerConfig(_Strict):
    kind: Literal["adam", "adamw"] = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: Literal["constant", "cosine"] = "cosine"


class ExperimentConfig(_Strict):
    name: str = "experiment"
    dataset: DatasetConfig
    arms: list[ArmConfig]
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(gt=0)
    batch_size: int = Field(gt=0)
    seeds: list[int] = Field(default_factory=lambda: [0])
    metric: Literal["mse", "accuracy"] = "mse"
    seed_data_per_run: bool = False
    param_seeding: Literal["independent", "paired"] = "independent"


def load_config(source) -> ExperimentConfig:
    """Parse a config from a dict, a JSON string or a path; errors carry the offending field path."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text) as fh:
                text = fh.read()
        doc = json.loads(text)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], path) from None


# data


def gen_linear_map(n_train: int = 64, n_test: int = 32, dim: int = 6, seed: int = 0):
    """Inputs ``x ~ N(0, I)`` and targets ``x A + b`` for a fixed random affine map."""
    from .datagen import RegressionDataset, MinMax, manifest, sample_rng

    rng = sample_rng(seed, 0, 7)
    A = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    b = rng.standard_normal(dim)
    x = np.stack([sample_rng(seed, i).standard_normal(dim) for i in range(n_train + n_test)])
    y = x @ A + b
    params = {"n_train": n_train, "n_test": n_test, "dim": dim}
    return RegressionDataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], MinMax(0.0, 1.0),
                             manifest("linear-map", params, seed))


def build_dataset(cfg: DatasetConfig, seed: Optional[int] = None):
    seed = cfg.seed if seed is None else seed
    if cfg.generator == "linear-map":
        return gen_linear_map(seed=seed, **cfg.params)
    return GENERATORS[cfg.generator](seed=seed, **cfg.params)


def split_arrays(ds, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready ``(inputs, targets)``: regression fields become ``(n, N, 1)`` token sequences."""
    x, y = ds.train if split == "train" else ds.test
    if ds.task == "regression":
        return np.asarray(x)[..., None], np.asarray(y)
    if ds.task == "cc-classification":
        return np.stack(x) if len(x) else np.zeros((0, 0, 2)), np.asarray(y)
    return np.asarray(x), np.asarray(y)


# models


def build_model(mc: ModelConfig, x_shape, out_dim: int, seed: int):
    _, L, in_dim = x_shape
    if mc.kind == "linear":
        return LinearModel(L * in_dim, out_dim, seed=seed)
    return TokenTransformer(
        in_dim, out_dim, d=mc.d, layers=mc.layers, heads=mc.heads, head_dim=mc.head_dim, family=mc.family,
        family_options=mc.family_options or None, wiring=mc.wiring, condition=mc.condition,
        ffn_hidden=mc.ffn_hidden, positional=mc.positional, seq_len=L, seed=seed,
    )


def output_dim(ds, y: np.ndarray) -> int:
    return y.shape[1] if ds.task == "regression" else 2


def loss_fn(metric: str, pred: Tensor, y: np.ndarray) -> Tensor:
    if metric == "mse":
        return ad.mse_loss(pred, Tensor(y))
    return ad.cross_entropy(pred, [int(v) for v in y])


def predict(model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [model(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model, x: np.ndarray, y: np.ndarray, metric: str) -> float:
    """Test mean squared error or classification accuracy."""
    if len(x) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return score(predict(model, x), y, metric)


def score(pred: np.ndarray, y: np.ndarray, metric: str) -> float:
    if len(y) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if metric == "mse":
        return float(np.mean((np.asarray(pred) - np.asarray(y)) ** 2))
    if metric == "accuracy":
        pred = np.asarray(pred)
        labels = pred.argmax(axis=-1) if pred.ndim == 2 else pred
        return float(np.mean(labels == np.asarray(y)))
    raise ValueError(f"unknown metric {metric!r}")


def make_optimizer(oc: OptimizerConfig, params) -> Adam:
    return Adam(params, oc.lr, oc.betas, oc.eps, oc.weight_decay, decoupled=(oc.kind == "adamw"))


def _param_seed(cfg: ExperimentConfig, seed: int, arm_index: int) -> int:
    return seed if cfg.param_seeding == "paired" else seed * 1000 + arm_index


def train_arm(cfg: ExperimentConfig, arm: ArmConfig, arm_index: int, seed: int, data, emit=None,
              stop_after: Optional[int] = None):
    """Train one arm for one seed; returns ``(model, final_metric, loss_trace)``.

    ``stop_after`` ends the run after that many epochs of the full schedule.
    """
    x, y = split_arrays(data, "train")
    xt, yt = split_arrays(data, "test")
    model = build_model(arm.model, x.shape, output_dim(data, y), _param_seed(cfg, seed, arm_index))
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params)
    order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 99])))
    n = len(x)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    trace = []
    for epoch in range(cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)):
        perm = order_rng.permutation(n)
        tot = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if cfg.optimizer.schedule == "cosine":
                opt.lr = cosine_lr(cfg.optimizer.lr, step, total)
            with Tape() as tape:
                loss = loss_fn(cfg.metric, model(Tensor(x[idx])), y[idx])
            g = backward(tape, loss)
            opt.step([g.get(p) for p in params])
            tot += loss.item() * len(idx)
            step += 1
        trace.append(tot / n)
        if emit is not None:
            emit({"arm": arm.name, "seed": seed, "epoch": epoch + 1, "train_loss": trace[-1], "lr": opt.lr})
    final = evaluate(model, xt, yt, cfg.metric)
    return model, final, trace


def aggregate(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"per_seed": v.tolist(), "mean": float(v.mean()), "std": float(v.std(ddof=0))}


def train(config, emit=None, keep_models: bool = False, stop_after: Optional[int] = None) -> dict:
    """Run every arm for every seed; returns per-arm traces and mean/std of the final metric."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    shared = None if cfg.seed_data_per_run else build_dataset(cfg.dataset)
    report = {"name": cfg.name, "metric": cfg.metric, "seeds": list(cfg.seeds), "arms": {}}
    models = {}
    for ai, arm in enumerate(cfg.arms):
        finals, traces = [], []
        for seed in cfg.seeds:
            data = shared if shared is not None else build_dataset(cfg.dataset, cfg.dataset.seed + seed)
            model, final, trace = train_arm(cfg, arm, ai, seed, data, emit, stop_after)
            finals.append(final)
            traces.append(trace)
            if keep_models:
                models[(arm.name, seed)] = model
        report["arms"][arm.name] = {**aggregate(finals), "loss_traces": traces}
    if keep_models:
        report["_models"] = models
    return report


def stdout_emitter(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


# model snapshots


def save_model(path, model, model_cfg: ModelConfig, x_shape, out_dim: int, seed: int) -> None:
    doc = {"model": model_cfg.model_dump(), "x_shape": list(x_shape), "out_dim": out_dim, "seed": seed,
           "state": model.state_dict()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    mc = ModelConfig.model_validate(doc["model"])
    model = build_model(mc, tuple(doc["x_shape"]), doc["out_dim"], doc["seed"])
    model.load_state_dict(doc["state"])
    return model
