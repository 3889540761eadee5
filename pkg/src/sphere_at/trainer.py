"""Outer minimization: standard training and the AT frameworks.

Per batch, the frameworks first solve the inner maximization with their
adversarial objective, then take one momentum-SGD step on their training
objective. FreeAT and FastAT use their own cheaper inner loops.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .attacks import AttackSpec, iterative_attack, project, random_start, Objective
from .datahub import Dataset, batches
from .diffcore import ContractError, NumericError
from .objectives import ObjectiveSpec, for_framework, training_loss
from .rng import split_rng
from .spherehead import ArchitectureSpec, HeadConfig, Model, ModelParams, bind, init_params, predict

FRAMEWORKS = ("standard", "pgd-at", "alp", "trades", "free-at", "fast-at")
HISTORY_HEADER = ("epoch", "clean_acc", "robust_acc", "train_loss", "wall_ms")


class TrainingAborted(NumericError):
    """Raised on a numeric failure; carries the last good parameters."""

    def __init__(self, msg, params: ModelParams, history: "TrainHistory"):
        super().__init__(msg)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class TrainSpec:
    arch: ArchitectureSpec
    framework: str = "pgd-at"
    head: HeadConfig = HeadConfig()
    attack: AttackSpec = AttackSpec()
    eval_attack: AttackSpec | None = None
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple = (0.75, 0.9)
    lr_decay_factor: float = 0.1
    free_replays: int = 4
    alpha: float = 0.5
    lam: float | None = None
    seed: int = 0
    eval_size: int | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ContractError(f"unknown framework {self.framework!r}")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.free_replays < 1:
            raise ContractError("free_replays must be >= 1")
        fr = tuple(self.lr_decay_epochs)
        if any(not 0 < f < 1 for f in fr) or any(a >= b for a, b in zip(fr, fr[1:])):
            raise ContractError("lr_decay_epochs must be strictly increasing fractions in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.arch.num_classes < 2:
            raise ContractError("need at least two classes")

    @property
    def objective(self) -> ObjectiveSpec:
        return for_framework(self.framework, self.head, self.alpha, self.lam)

    def lr_at(self, epoch: int, total: int | None = None) -> float:
        total = self.epochs if total is None else total
        passed = sum(epoch >= int(round(f * total)) for f in self.lr_decay_epochs)
        return self.lr * self.lr_decay_factor ** passed


@dataclass
class EpochRecord:
    epoch: int
    clean_acc: float
    robust_acc: float
    train_loss: float
    wall_ms: int = 0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch, repr(r.clean_acc), repr(r.robust_acc), repr(r.train_loss), r.wall_ms])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["clean_acc"]), float(r["robust_acc"]),
                                float(r["train_loss"]), int(r["wall_ms"])) for r in rows])


# -- optimizer -----------------------------------------------------------------

def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, momentum: float,
                      weight_decay: float) -> dict:
    """Heavy ball: v <- mu v + g + wd theta; theta <- theta - lr v. ``state`` holds v."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    out = dict(params)
    for k, g in grads.items():
        v = g + weight_decay * params[k]
        if k in state:
            v = momentum * state[k] + v
        state[k] = v
        out[k] = params[k] - lr * v
    return out


def _trainable(params: ModelParams, head: HeadConfig) -> list:
    return [k for k in params.named() if k != "b" or head.uses_bias]


def loss_and_grads(spec: ObjectiveSpec, params: ModelParams, x_clean, x_adv, y, names,
                   input_grad: bool = False):
    P = bind(params)
    for k in names:
        P.tensors[k].requires_grad = True
    xt = dc.tensor(x_adv, requires_grad=input_grad)
    loss = training_loss(spec, P, x_clean, xt, y)
    wrt = {k: P[k] for k in names}
    if input_grad:
        wrt["__x__"] = xt
    grads = dc.grad(loss, wrt)
    gx = grads.pop("__x__", None)
    return loss.item(), grads, gx


def _apply(params: ModelParams, grads: dict, state: dict, lr: float, spec: TrainSpec) -> ModelParams:
    arrays = params.named()
    arrays.update(sgd_momentum_step({k: arrays[k] for k in grads}, grads, state, lr,
                                    spec.momentum, spec.weight_decay))
    return params.replace_arrays(arrays)


# -- evaluation ------------------------------------------------------------------

def evaluate(model: Model, attack: AttackSpec | None, dataset: Dataset, batch_size: int = 256,
             rng: np.random.Generator | None = None, attack_fn: Callable | None = None) -> float:
    """Fraction of argmax-correct predictions, optionally after a white-box attack per batch."""
    rng = np.random.default_rng(0) if rng is None else rng
    correct = 0
    for x, y in batches(dataset, batch_size, shuffle_seed=None):
        if attack_fn is not None:
            x = attack_fn(model, x, y, rng)
        elif attack is not None:
            x = iterative_attack(model, attack, x, y, rng)
        _, pred = predict(model.params, model.head, x)
        correct += int(np.sum(pred == y))
    return correct / len(dataset)


# -- per-batch steps -----------------------------------------------------------------

def _inner_max(spec: TrainSpec, params: ModelParams, x, y, rng):
    if spec.framework == "standard" or spec.attack.eps == 0:
        return x
    atk = replace(spec.attack, objective=spec.objective)
    return iterative_attack(Model(params, spec.head), atk, x, y, rng)


def fast_at_step(spec: TrainSpec, batch, params: ModelParams, state: dict, lr: float,
                 rng: np.random.Generator, step_scale: float = 1.25):
    """Random start in the eps-ball, one signed step of ``step_scale * eps``, clip, one update."""
    x, y = batch
    atk = replace(spec.attack, objective=spec.objective)
    if atk.norm != "inf":
        raise ContractError("FastAT is defined for the l-inf threat model")
    x0 = random_start(x, atk, rng) if atk.rand_init else x.copy()
    _, g = Objective(Model(params, spec.head), spec.objective, x, y).value_and_grad(x0)
    x_adv = project(x0 + step_scale * atk.eps * np.sign(g), x, atk)
    loss, grads, _ = loss_and_grads(spec.objective, params, x, x_adv, y, _trainable(params, spec.head))
    return _apply(params, grads, state, lr, spec), loss, x_adv


def free_at_epoch(spec: TrainSpec, batch_iter, params: ModelParams, state: dict, lr: float,
                  persist: bool = True, delta_log: list | None = None):
    """Replay every batch ``free_replays`` times; each replay's single backward pass
    updates the parameters and, through the input gradient, the perturbation.

    ``delta`` carries over between batches when ``persist`` and starts at zero
    every epoch. Returns (params, mean loss).
    """
    atk = spec.attack
    lo, hi = atk.input_range
    names = _trainable(params, spec.head)
    delta = None
    losses = []
    for x, y in batch_iter:
        if delta is None or not persist:
            d = np.zeros_like(x)
        elif delta.shape[0] >= x.shape[0]:
            d = delta[:x.shape[0]]
        else:
            d = np.concatenate([delta, np.zeros((x.shape[0] - delta.shape[0],) + x.shape[1:])])
        for _ in range(spec.free_replays):
            x_adv = np.clip(x + d, lo, hi)
            loss, grads, gx = loss_and_grads(spec.objective, params, x, x_adv, y, names, input_grad=True)
            params = _apply(params, grads, state, lr, spec)
            d = np.clip(d + atk.eps * np.sign(gx), -atk.eps, atk.eps)
            d = np.clip(x + d, lo, hi) - x
            losses.append(loss)
            if delta_log is not None:
                delta_log.append(d.copy())
        delta = d
    return params, float(np.mean(losses)) if losses else 0.0


# -- main loop -------------------------------------------------------------------------

def train(spec: TrainSpec, train_data: Dataset, eval_data: Dataset | None = None,
          params: ModelParams | None = None, on_epoch: Callable | None = None):
    """Run the selected framework; returns (ModelParams, TrainHistory).

    FreeAT makes ``ceil(epochs / free_replays)`` passes so the number of
    optimizer steps matches ``epochs`` passes of the other frameworks.
    ``on_epoch(epoch, params, record)`` is called after every pass.
    """
    if len(train_data) == 0:
        raise ContractError("empty training set")
    root = spec.seed
    if params is None:
        params = init_params(spec.arch, split_rng(root, "init"))
    shuffle_rng = split_rng(root, "shuffle")
    attack_rng = split_rng(root, "attack")
    eval_rng_seed = split_rng(root, "eval").integers(2**32)
    obj = spec.objective
    names = _trainable(params, spec.head)
    state: dict = {}
    history = TrainHistory()
    passes = math.ceil(spec.epochs / spec.free_replays) if spec.framework == "free-at" else spec.epochs

    eval_set = eval_data
    if eval_data is not None and spec.eval_size is not None and spec.eval_size < len(eval_data):
        eval_set = eval_data.subset(np.arange(spec.eval_size))

    for epoch in range(passes):
        t0 = time.perf_counter()
        lr = spec.lr_at(epoch, passes)
        good = params
        try:
            if spec.framework == "free-at":
                params, mean_loss = free_at_epoch(spec, batches(train_data, spec.batch_size, shuffle_rng),
                                                  params, state, lr)
            else:
                losses = []
                for x, y in batches(train_data, spec.batch_size, shuffle_rng):
                    if spec.framework == "fast-at":
                        params, loss, _ = fast_at_step(spec, (x, y), params, state, lr, attack_rng)
                    else:
                        x_adv = _inner_max(spec, params, x, y, attack_rng)
                        loss, grads, _ = loss_and_grads(obj, params, x, x_adv, y, names)
                        params = _apply(params, grads, state, lr, spec)
                    losses.append(loss)
                mean_loss = float(np.mean(losses))
        except NumericError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", good, history) from exc

        clean = robust = float("nan")
        if eval_set is not None:
            model = Model(params, spec.head)
            clean = evaluate(model, None, eval_set)
            if spec.eval_attack is not None:
                robust = evaluate(model, spec.eval_attack, eval_set, rng=np.random.default_rng(eval_rng_seed))
        wall = int(round((time.perf_counter() - t0) * 1000)) if spec.record_wall_time else 0
        rec = EpochRecord(epoch, clean, robust, mean_loss, wall)
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, params, rec)
    return params, history
