"""First-order attacks and zeroth-order gradient estimators.

All attacks work on a batch ``x`` of shape (N, ...) and treat each row as its
own problem: steepest directions, projections and restart selection are per
example. The unified iterative attack covers BIM (no random start), PGD
(random start) and MIM (``momentum`` set).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError
from .objectives import ObjectiveSpec, adversarial_loss, clean_target, logit_margin
from .spherehead import Model, head_logits, extract_features, bind

_TINY = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "inf"
    eps: float = 8 / 255
    step: float = 2 / 255
    steps: int = 10
    rand_init: bool = True
    restarts: int = 1
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    momentum: float | None = None
    input_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("inf", "2"):
            raise ContractError(f"norm must be 'inf' or '2', got {self.norm!r}")
        if self.eps < 0:
            raise ContractError(f"eps must be non-negative, got {self.eps}")
        if self.steps < 1 or self.restarts < 1:
            raise ContractError("steps and restarts must both be >= 1")
        if self.step > self.eps > 0:
            warnings.warn(f"step {self.step} exceeds eps {self.eps}", stacklevel=3)


@dataclass(frozen=True)
class GradEstimatorSpec:
    family: str = "spsa"
    q: int = 128
    sigma: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("nes", "spsa"):
            raise ContractError(f"unknown estimator family {self.family!r}")
        if self.q < 1 or not self.sigma > 0:
            raise ContractError("need q >= 1 and sigma > 0")


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def steepest_direction(u: np.ndarray, p: str, batched: bool = True) -> np.ndarray:
    """argmax of ``u^T v`` over the unit p-ball, row-wise when ``batched``.

    p="inf" gives sign(u) with sign(0)=0; p="2" gives u/|u|, or zero when |u| < 1e-12.
    """
    u = np.asarray(u, dtype=np.float64)
    if p == "inf":
        return np.sign(u)
    if p != "2":
        raise ContractError(f"unsupported norm {p!r}")
    flat = _rows(u) if batched else u.reshape(1, -1)
    nrm = np.linalg.norm(flat, axis=1, keepdims=True)
    out = np.where(nrm >= _TINY, flat / np.where(nrm >= _TINY, nrm, 1.0), 0.0)
    return out.reshape(u.shape)


def dual_norm(u: np.ndarray, p: str) -> np.ndarray:
    """Row-wise ``|u|_q`` with 1/p + 1/q = 1."""
    flat = _rows(np.asarray(u, dtype=np.float64))
    return np.abs(flat).sum(axis=1) if p == "inf" else np.linalg.norm(flat, axis=1)


def project(x_adv: np.ndarray, x: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Back into the eps-ball around x, then into the input range."""
    delta = x_adv - x
    if spec.norm == "inf":
        delta = np.clip(delta, -spec.eps, spec.eps)
    else:
        flat = _rows(delta)
        nrm = np.linalg.norm(flat, axis=1, keepdims=True)
        scale = np.minimum(1.0, spec.eps / np.maximum(nrm, _TINY))
        delta = (flat * scale).reshape(delta.shape)
    lo, hi = spec.input_range
    return np.clip(x + delta, lo, hi)


def random_start(x: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.input_range
    if spec.eps == 0:
        return x.copy()
    if spec.norm == "inf":
        # uniform on the box (x + [-eps, eps]) intersected with [lo, hi]
        return rng.uniform(np.maximum(lo, x - spec.eps), np.minimum(hi, x + spec.eps))
    flat = _rows(x)
    d = flat.shape[1]
    g = rng.normal(size=flat.shape)
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), _TINY)
    r = spec.eps * rng.uniform(size=(flat.shape[0], 1)) ** (1.0 / d)
    return np.clip(x + (g * r).reshape(x.shape), lo, hi)


class Objective:
    """Per-example adversarial loss and its input gradient for a fixed model."""

    def __init__(self, model: Model, objective: ObjectiveSpec, x_clean: np.ndarray, y: np.ndarray):
        self.spec = replace(objective, head=model.head)
        self.params = bind(model.params)
        self.x_clean = x_clean
        self.y = np.asarray(y)
        self.target = (clean_target(self.spec, self.params, x_clean)
                       if self.spec.adversarial_kind == "ce-vs-prediction" else None)
        self.calls = 0

    def values(self, x: np.ndarray) -> np.ndarray:
        return adversarial_loss(self.spec, self.params, x, self.x_clean, self.y,
                                reduction="none", target=self.target).data

    def value_and_grad(self, x: np.ndarray):
        self.calls += 1
        xt = dc.tensor(x, requires_grad=True)
        per = adversarial_loss(self.spec, self.params, xt, self.x_clean, self.y,
                               reduction="none", target=self.target)
        g = dc.grad(dc.tsum(per), [xt])[0]
        return per.data, g


def fgsm(model: Model, spec: AttackSpec, x, y) -> np.ndarray:
    """One signed-gradient step of size eps from the clean point."""
    if spec.norm != "inf":
        raise ContractError("fgsm is defined for the l-inf threat model")
    x = np.asarray(x, dtype=np.float64)
    _, g = Objective(model, spec.objective, x, y).value_and_grad(x)
    return project(x + spec.eps * np.sign(g), x, spec)


def iterative_attack(model: Model, spec: AttackSpec, x, y, rng: np.random.Generator | None = None,
                     trace: list | None = None) -> np.ndarray:
    """BIM / PGD / MIM with best-of-restarts selection per example.

    ``trace``, when given, receives the per-example loss before every step and
    after the last one, for each restart.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    obj = Objective(model, spec.objective, x, y)
    if spec.eps == 0:
        return x.copy()
    best_x, best_val = None, None
    for _ in range(spec.restarts):
        xt = random_start(x, spec, rng) if spec.rand_init else x.copy()
        g_acc = np.zeros_like(x)
        for _ in range(spec.steps):
            val, g = obj.value_and_grad(xt)
            if trace is not None:
                trace.append(val)
            if spec.momentum is not None:
                l1 = np.abs(_rows(g)).sum(axis=1)
                l1 = np.where(l1 > 0, l1, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
                g_acc = spec.momentum * g_acc + g / l1
                g = g_acc
            xt = project(xt + spec.step * steepest_direction(g, spec.norm), x, spec)
        val = obj.values(xt)
        if trace is not None:
            trace.append(val)
        if best_x is None:
            best_x, best_val = xt, val
        else:
            better = val > best_val
            best_x = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), xt, best_x)
            best_val = np.maximum(val, best_val)
    return best_x


def fn_in_objective_toggle(spec: AttackSpec, flag: bool) -> AttackSpec:
    """Attack a standard-head model through ``softmax(W^T z/|z|)`` when ``flag`` is set."""
    return replace(spec, objective=replace(spec.objective, fn_in_objective=bool(flag)))


def pgd(eps, step, steps, objective: ObjectiveSpec | None = None, norm="inf", restarts=1, **kw) -> AttackSpec:
    """The PGD-K convention: K steps, random start."""
    return AttackSpec(norm=norm, eps=eps, step=step, steps=steps, rand_init=True,
                      restarts=restarts, objective=objective or ObjectiveSpec(), **kw)


# -- zeroth order -------------------------------------------------------------

def estimate_gradient(fn, x: np.ndarray, est: GradEstimatorSpec,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Antithetic NES/SPSA estimate ``(1/q) sum (J(x+s u) - J(x-s u)) / (2s) u``.

    ``fn`` maps a batch to one score per row; rows are estimated independently.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(est.seed) if rng is None else rng
    g = np.zeros_like(x)
    shape = (-1,) + (1,) * (x.ndim - 1)
    for _ in range(est.q):
        if est.family == "nes":
            u = rng.standard_normal(x.shape)
        else:
            u = rng.integers(0, 2, size=x.shape) * 2.0 - 1.0
        diff = (np.asarray(fn(x + est.sigma * u)) - np.asarray(fn(x - est.sigma * u))) / (2 * est.sigma)
        g += diff.reshape(shape) * u
    return g / est.q


def margin_score(model: Model, y):
    """J(x) = Z_y - max_{i != y} Z_i on the model's inference scores."""
    P = bind(model.params)

    def J(x):
        return logit_margin(head_logits(P, model.head, extract_features(P, x)), y).data

    return J


def zo_gradient(model: Model, est: GradEstimatorSpec, x, y, rng=None) -> np.ndarray:
    return estimate_gradient(margin_score(model, y), np.asarray(x, dtype=np.float64), est, rng)


def zo_attack(model: Model, spec: AttackSpec, est: GradEstimatorSpec, x, y,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterative update driven by the estimated gradient of -J (the margin is pushed down)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.eps == 0:
        return x.copy()
    rng = np.random.default_rng(est.seed) if rng is None else rng
    J = margin_score(model, y)
    xt = random_start(x, spec, rng) if spec.rand_init else x.copy()
    for _ in range(spec.steps):
        g = -estimate_gradient(J, xt, est, rng)
        xt = project(xt + spec.step * steepest_direction(g, spec.norm), x, spec)
    return xt
