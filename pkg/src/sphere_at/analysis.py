"""Executable checks of the gradient identities behind HE, plus the diagnostics.

Notation: ``W_ij = W_i - W_j`` is the residual weight between classes i and j,
``z'`` the feature of the point being differentiated at, and ``f`` the softmax
output. The exact identities checked here:

* input gradient of soft-label CE as a double sum over residual logits,
  ``grad_x' CE(f(x'), p) = -sum_{i != j} p_i f(x')_j grad_x'(W_ij^T z')``;
* extractor gradient of CE split into a norm part and an angle part,
  ``-grad_w CE = sum_{l != y} f_l |W_yl| (cos t_yl grad_w|z| + |z| grad_w cos t_yl)``,
  whose norm part disappears under feature normalization;
* batch softmax-weight gradient with sum reduction,
  ``-grad_{W_l} CE(D) = sum_{x in D_l} z - sum_{x in D} f(x)_l z``.

The first-order expansion check measures the remainder
``L(x + eps U_p(g)) - L(x) - eps |g|_q`` over a grid of eps.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .attacks import dual_norm, steepest_direction
from .diffcore import ContractError
from .objectives import _label_loss, ce_between, ce_loss, for_framework, training_loss
from .spherehead import (ArchitectureSpec, BoundParams, HeadConfig, ModelParams, bind, extract_features,
                         fn_normalize, head_logits, init_params, softmax)

_TINY = 1e-300


# -- helpers ---------------------------------------------------------------------------

def _as_batch(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _target_probs(target, n: int, L: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 1:
        if not np.issubdtype(t.dtype, np.integer):
            raise ContractError("hard targets must be integer labels")
        return np.eye(L)[t]
    if t.shape != (n, L):
        raise ContractError(f"soft target shape {t.shape}, expected {(n, L)}")
    return t.astype(np.float64)


def _require_head(params: ModelParams, head: HeadConfig | None, mode: str) -> HeadConfig:
    head = HeadConfig(mode) if head is None else head
    if head.mode != mode:
        raise ContractError(f"this identity needs a {mode} head, got {head.mode}")
    return head


def input_gradient(params: ModelParams, x, fn: Callable) -> np.ndarray:
    """Gradient w.r.t. x of ``fn(bound_params, x_tensor)`` (a scalar tensor)."""
    P = bind(params)
    xt = dc.tensor(_as_batch(x), requires_grad=True)
    return dc.grad(fn(P, xt), [xt])[0]


def _omega_grads(params: ModelParams, fn: Callable, names=None) -> dict:
    P = bind(params)
    names = list(params.omega) if names is None else names
    for k in names:
        P.tensors[k].requires_grad = True
    return dc.grad(fn(P), {k: P[k] for k in names})


def _flat(grads: dict) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


def preactivation_margin(params: ModelParams, x) -> float:
    """Smallest |pre-activation| over all hidden units and inputs; inf when there are none."""
    arch = params.arch
    P = bind(params)
    x = _as_batch(x)
    n = x.shape[0]
    names = [name for name, _, _ in arch.layer_shapes()][:-1]
    smallest = np.inf
    if arch.kind == "mlp":
        h = x.reshape(n, -1)
        for name in names:
            pre = h @ params.omega[f"{name}.w"] + params.omega[f"{name}.b"]
            smallest = min(smallest, float(np.abs(pre).min()))
            h = np.maximum(pre, 0) if arch.activation == "relu" else np.tanh(pre)
    else:
        h = dc.tensor(x.reshape((n,) + arch.input_shape))
        for name in names:
            pre = dc.conv2d(h, P[f"{name}.w"], P[f"{name}.b"])
            smallest = min(smallest, float(np.abs(pre.data).min()))
            act = dc.relu(pre) if arch.activation == "relu" else dc.tanh(pre)
            h = dc.maxpool2d(act, 2)
    return smallest


def random_probe(rng: np.random.Generator, num_classes: int | None = None, batch: int | None = None,
                 activation: str = "relu", margin: float = 1e-6, max_tries: int = 50):
    """Random small MLP and input batch whose pre-activations stay ``margin`` away from 0."""
    for _ in range(max_tries):
        L = int(rng.integers(2, 6)) if num_classes is None else num_classes
        n = int(rng.integers(1, 6)) if batch is None else batch
        arch = ArchitectureSpec(input_shape=(int(rng.integers(2, 9)),),
                                hidden=tuple(int(v) for v in rng.integers(3, 9, size=int(rng.integers(1, 3)))),
                                feature_dim=int(rng.integers(2, 7)), num_classes=L, activation=activation)
        params = init_params(arch, rng)
        params.b[:] = rng.normal(0, 0.5, L)
        for k in params.omega:
            if k.endswith(".b"):
                params.omega[k][:] = rng.normal(0, 0.1, params.omega[k].shape)
        x = rng.uniform(0, 1, size=(n,) + arch.input_shape)
        if activation != "relu" or preactivation_margin(params, x) >= margin:
            return params, x
    raise ContractError(f"no probe with pre-activation margin {margin} after {max_tries} tries")


# -- residual-logit decomposition of the input gradient ---------------------------------

def _pair_gradient(params: ModelParams, x, W_ij: np.ndarray, head_fn: Callable | None = None) -> np.ndarray:
    """Per-row gradient of ``W_ij^T z'`` (or of ``W_ij^T h(z')`` for a feature map h)."""
    def fn(P, xt):
        z = extract_features(P, xt)
        if head_fn is not None:
            z = head_fn(z)
        return dc.tsum(z @ dc.constant(W_ij))
    return input_gradient(params, x, fn)


def ce_gradient_double_sum(params: ModelParams, x_prime, target, exclude: tuple | None = None) -> np.ndarray:
    """``-sum_{i != j} p_i f(x')_j grad(W_ij^T z')``, built from one backward pass per pair.

    ``exclude=(i, j)`` leaves that single pair out (used for residuals).
    """
    x_prime = _as_batch(x_prime)
    P = bind(params)
    logits = head_logits(P, HeadConfig("standard"), extract_features(P, x_prime)).data
    n, L = logits.shape
    f = softmax(logits)
    p = _target_probs(target, n, L)
    shape = (-1,) + (1,) * (x_prime.ndim - 1)
    total = np.zeros_like(x_prime)
    for i in range(L):
        for j in range(L):
            if i == j or (i, j) == exclude:
                continue
            g = _pair_gradient(params, x_prime, params.W[:, i] - params.W[:, j])
            total -= (p[:, i] * f[:, j]).reshape(shape) * g
    return total


def verify_ce_gradient_decomposition(params: ModelParams, x_prime, target, head: HeadConfig | None = None) -> float:
    """Max abs deviation between autodiff ``grad_x' CE`` and the residual-logit double sum.

    ``target`` is either integer labels or a batch of probability rows.
    """
    _require_head(params, head, "standard")
    x_prime = _as_batch(x_prime)
    L = params.arch.num_classes
    p = _target_probs(target, x_prime.shape[0], L)

    def fn(P, xt):
        return ce_between(head_logits(P, HeadConfig("standard"), extract_features(P, xt)), p, reduction="sum")

    direct = input_gradient(params, x_prime, fn)
    return float(np.max(np.abs(direct - ce_gradient_double_sum(params, x_prime, p))))


@dataclass
class DecompositionReport:
    full_norm: np.ndarray
    dominant_norm: np.ndarray
    cosine: np.ndarray
    residual_norm: np.ndarray
    y: np.ndarray
    y_star: np.ndarray

    def aggregates(self) -> dict:
        return {"n": int(self.cosine.size),
                "cosine_mean": float(np.mean(self.cosine)),
                "cosine_min": float(np.min(self.cosine)),
                "residual_over_full_mean": float(np.mean(self.residual_norm / np.maximum(self.full_norm, _TINY)))}

    def to_dict(self) -> dict:
        rows = [{"full_norm": float(a), "dominant_norm": float(b), "cosine": float(c),
                 "residual_norm": float(d), "y": int(e), "y_star": int(g)}
                for a, b, c, d, e, g in zip(self.full_norm, self.dominant_norm, self.cosine,
                                            self.residual_norm, self.y, self.y_star)]
        return {"examples": rows, "aggregate": self.aggregates()}


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    c = np.sum(a * b, axis=1) / np.maximum(na * nb, _TINY)
    return np.clip(c, -1.0, 1.0)


def _runner_up(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    masked = probs.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def dominant_term_report(params: ModelParams, x, x_prime, y, y_star=None) -> DecompositionReport:
    """How well ``-f(x)_y f(x')_{y*} grad(W_{yy*}^T z')`` approximates the full sum.

    The target is the clean prediction ``f(x)``. ``y*`` defaults to the most
    likely class of ``f(x')`` other than ``y``.
    """
    x, x_prime = _as_batch(x), _as_batch(x_prime)
    y = np.asarray(y)
    P = bind(params)
    std = HeadConfig("standard")
    p = softmax(head_logits(P, std, extract_features(P, x)).data)
    f_adv = softmax(head_logits(P, std, extract_features(P, x_prime)).data)
    y_star = _runner_up(f_adv, y) if y_star is None else np.asarray(y_star)
    if np.any(y_star == y):
        raise ContractError("y* must differ from y for every example")
    full = ce_gradient_double_sum(params, x_prime, p)
    shape = (-1,) + (1,) * (x_prime.ndim - 1)
    dom = np.zeros_like(x_prime)
    for n in range(x_prime.shape[0]):
        g = _pair_gradient(params, x_prime[n:n + 1], params.W[:, y[n]] - params.W[:, y_star[n]])
        dom[n] = -(p[n, y[n]] * f_adv[n, y_star[n]]) * g[0]
    flat = lambda a: np.linalg.norm(a.reshape(a.shape[0], -1), axis=1)
    return DecompositionReport(flat(full), flat(dom), _cos_rows(full, dom), flat(full - dom), y, y_star)


@dataclass
class DirectionReport:
    scale_deviation: float
    fn_cosine: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {"scale_deviation": self.scale_deviation}
        if self.fn_cosine is not None:
            out["fn_cosine_min"] = float(np.nanmin(self.fn_cosine))
            out["fn_cosine_mean"] = float(np.nanmean(self.fn_cosine))
            out["undefined_rows"] = int(np.isnan(self.fn_cosine).sum())
        return out


def scale_invariance_deviation(u: np.ndarray, c: np.ndarray | float, p: str) -> float:
    """max |U_p(c u) - U_p(u)| for positive per-row factors c."""
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if np.any(c <= 0):
        raise ContractError("scale factors must be positive")
    c = c.reshape((-1,) + (1,) * (u.ndim - 1)) if c.ndim else c
    return float(np.max(np.abs(steepest_direction(c * u, p) - steepest_direction(u, p))))


def verify_direction_factorization(params: ModelParams, x_prime, y, y_star=None, p: str = "inf",
                                   head: HeadConfig | None = None) -> DirectionReport:
    """Scale invariance of the update direction, and the FN-head angular direction.

    The scale check removes the factor ``f(x)_y f(x')_{y*}`` from the dominant
    term. With an fn-only head, the cosine between the first-order attack
    direction ``U_p(grad CE)`` and ``-U_p(grad cos t'_{yy*})`` is reported per row.
    """
    x_prime = _as_batch(x_prime)
    y = np.asarray(y)
    head = HeadConfig("standard") if head is None else head
    grad_ce = input_gradient(params, x_prime,
                             lambda P, xt: ce_loss(head_logits(P, head, extract_features(P, xt)), y, "sum"))
    P = bind(params)
    f_adv = softmax(head_logits(P, head, extract_features(P, x_prime)).data)
    y_star = _runner_up(f_adv, y) if y_star is None else np.asarray(y_star)
    factor = f_adv[np.arange(len(y)), y_star] + 1e-3
    report = DirectionReport(scale_invariance_deviation(grad_ce, factor, p))
    if head.mode == "fn-only":
        cos_grad = np.zeros_like(x_prime)
        for n in range(x_prime.shape[0]):
            w = params.W[:, y[n]] - params.W[:, y_star[n]]
            w_unit = w / np.linalg.norm(w)
            cos_grad[n] = _pair_gradient(params, x_prime[n:n + 1], w_unit, fn_normalize)[0]
        cos = _cos_rows(steepest_direction(grad_ce, p), -steepest_direction(cos_grad, p))
        # rows with a vanishing gradient (all units dead) have no direction
        dead = np.linalg.norm(grad_ce.reshape(len(y), -1), axis=1) < 1e-12
        report.fn_cosine = np.where(dead, np.nan, cos)
    return report


# -- extractor-gradient forms ----------------------------------------------------------

def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), _TINY))


def _cos_pair(P, xt, w: np.ndarray) -> dc.Tensor:
    z = extract_features(P, xt)
    return dc.tsum(fn_normalize(z) @ dc.constant(w / np.linalg.norm(w)))


def _znorm(P, xt) -> dc.Tensor:
    return dc.tsum(dc.l2norm(extract_features(P, xt), axis=1))


@dataclass
class GradientFormReport:
    eq_norm_angle: float | None = None
    eq_fn: float | None = None
    fn_norm_term: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def verify_parameter_gradient_forms(params: ModelParams, x, y, modes=("standard", "fn-only")) -> GradientFormReport:
    """Rebuild ``-grad_omega CE`` from ``grad|z|`` and ``grad cos t_yl`` term by term.

    ``standard`` checks the norm-plus-angle form; ``fn-only`` checks the
    angle-only form and reports ``|grad_omega |z~||`` (zero up to rounding).
    Deviations are max-abs over all extractor parameters, relative to the
    larger side. Examples are processed one at a time.
    """
    x = _as_batch(x)
    y = np.asarray(y)
    L = params.arch.num_classes
    report = GradientFormReport()
    for mode in modes:
        head = HeadConfig(mode)
        worst, norm_term = 0.0, 0.0
        for n in range(x.shape[0]):
            xn, yn = x[n:n + 1], y[n:n + 1]
            lhs = -_flat(_omega_grads(params, lambda P: ce_loss(head_logits(P, head, extract_features(P, xn)), yn)))
            P0 = bind(params)
            z = extract_features(P0, xn).data[0]
            f = softmax(head_logits(P0, head, dc.tensor(z[None])).data)[0]
            znorm = np.linalg.norm(z)
            rhs = np.zeros_like(lhs)
            if mode == "standard":
                g_norm = _flat(_omega_grads(params, lambda P: _znorm(P, xn)))
            for l in range(L):
                if l == yn[0]:
                    continue
                w = params.W[:, yn[0]] - params.W[:, l]
                wn = np.linalg.norm(w)
                g_cos = _flat(_omega_grads(params, lambda P: _cos_pair(P, xn, w)))
                if mode == "standard":
                    cos = float(z @ w) / (znorm * wn)
                    rhs += f[l] * wn * (cos * g_norm + znorm * g_cos)
                else:
                    rhs += f[l] * wn * g_cos
            worst = max(worst, _rel_dev(lhs, rhs))
            if mode == "fn-only":
                g_unit = _flat(_omega_grads(params, lambda P: dc.tsum(dc.l2norm(fn_normalize(extract_features(P, xn)), axis=1))))
                norm_term = max(norm_term, float(np.max(np.abs(g_unit))))
        if mode == "standard":
            report.eq_norm_angle = worst
        elif mode == "fn-only":
            report.eq_fn = worst
            report.fn_norm_term = norm_term
        else:
            raise ContractError(f"no gradient form for head {mode!r}")
    return report


def verify_softmax_weight_gradient(params: ModelParams, x, y) -> float:
    """Max abs deviation of ``-grad_W`` of the summed batch CE from ``Z^T (onehot(y) - F)``."""
    x = _as_batch(x)
    y = np.asarray(y)
    head = HeadConfig("standard")
    P = bind(params)
    P.tensors["W"].requires_grad = True
    z = extract_features(P, x)
    loss = ce_loss(head_logits(P, head, z), y, reduction="sum")
    gW = dc.grad(loss, {"W": P.W})["W"]
    Z = z.data
    F = softmax(head_logits(P, head, dc.tensor(Z)).data)
    rhs = Z.T @ (np.eye(params.arch.num_classes)[y] - F)
    return float(np.max(np.abs(-gW - rhs)))


# -- gradient ratio diagnostic -----------------------------------------------------------

@dataclass
class GradRatioReport:
    blocks: list
    ratios: list
    counts: list
    label: str = ""

    def as_dict(self) -> dict:
        return dict(zip(self.blocks, self.ratios))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "ratio", "n"])
        for b, r, c in zip(self.blocks, self.ratios, self.counts):
            w.writerow([b, "" if r is None else repr(r), c])
        return buf.getvalue()


def grad_ratio(params: ModelParams, head: HeadConfig, x_clean, x_adv, y, label: str = "") -> GradRatioReport:
    """Per-block ``E(|grad_omega L(x*)| / |grad_omega L(x)|)`` of the head's training CE.

    Examples whose clean gradient vanishes on a block are left out of that
    block's mean; a block with no usable example is reported as missing.
    """
    x_clean, x_adv = _as_batch(x_clean), _as_batch(x_adv)
    y = np.asarray(y)
    blocks = params.blocks()
    names = [k for ks in blocks.values() for k in ks]
    sums = {b: 0.0 for b in blocks}
    counts = {b: 0 for b in blocks}

    def block_norms(xn, yn):
        g = _omega_grads(params, lambda P: _label_loss(head, head_logits(P, head, extract_features(P, xn)), yn),
                         names)
        return {b: float(np.sqrt(sum(np.sum(g[k] ** 2) for k in ks))) for b, ks in blocks.items()}

    for n in range(x_clean.shape[0]):
        clean = block_norms(x_clean[n:n + 1], y[n:n + 1])
        adv = block_norms(x_adv[n:n + 1], y[n:n + 1])
        for b in blocks:
            if clean[b] > 0:
                sums[b] += adv[b] / clean[b]
                counts[b] += 1
    ratios = [sums[b] / counts[b] if counts[b] else None for b in blocks]
    return GradRatioReport(list(blocks), ratios, [counts[b] for b in blocks], label)


# -- first-order expansion ----------------------------------------------------------------

@dataclass
class ExpansionReport:
    eps: np.ndarray
    remainder: np.ndarray
    slope: float
    exact_zero: bool

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "remainder": self.remainder.tolist(),
                "slope": self.slope, "exact_zero": self.exact_zero}


def first_order_remainder(value_and_grad: Callable, x, eps, p: str) -> float:
    """``|L(x + eps U_p(g)) - L(x) - eps |g|_q|`` for one point."""
    x = np.asarray(x, dtype=np.float64)
    v0, g = value_and_grad(x)
    d = steepest_direction(g, p, batched=False)
    v1, _ = value_and_grad(x + eps * d)
    return abs(v1 - v0 - eps * float(dual_norm(g.reshape(1, -1), p)[0]))


def lemma1_scaling_check(value_and_grad: Callable, x, eps_grid, p: str = "inf",
                         zero_tol: float = 1e-12) -> ExpansionReport:
    """Log-log slope of the first-order remainder against eps.

    When every remainder is below ``zero_tol`` the objective is locally
    linear; the slope is then reported as NaN and ``exact_zero`` is set.
    """
    eps = np.asarray(sorted(eps_grid, reverse=True), dtype=np.float64)
    if eps.size < 2 or np.log10(eps.max() / eps.min()) < 3 - 1e-9:
        raise ContractError("eps grid must span at least three decades")
    rem = np.array([first_order_remainder(value_and_grad, x, e, p) for e in eps])
    if np.all(rem < zero_tol):
        return ExpansionReport(eps, rem, float("nan"), True)
    keep = rem > 0
    slope = float(np.polyfit(np.log(eps[keep]), np.log(rem[keep]), 1)[0]) if keep.sum() >= 2 else float("nan")
    return ExpansionReport(eps, rem, slope, False)


def model_objective(params: ModelParams, head: HeadConfig, y) -> Callable:
    """Single-point CE of the head's raw scores, as ``x -> (value, grad)``."""
    yy = np.atleast_1d(np.asarray(y))

    def vg(x):
        P = bind(params)
        xt = dc.tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
        loss = ce_loss(head_logits(P, head, extract_features(P, xt)), yy)
        return loss.item(), dc.grad(loss, [xt])[0][0]

    return vg


def duality_deviation(u: np.ndarray, p: str) -> float:
    """``|u^T U_p(u) - |u|_q|`` for a single vector."""
    u = np.asarray(u, dtype=np.float64).ravel()
    return abs(float(u @ steepest_direction(u, p, batched=False)) - float(dual_norm(u[None], p)[0]))


# -- training-loss gradients against finite differences ------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def loss_gradient_deviation(spec, params: ModelParams, x_clean, x_adv, y, h: float = 1e-4,
                            floor: float = 1e-4) -> float:
    """Worst per-tensor relative error between tape and five-point central-difference gradients.

    Gradients whose norm is below ``floor`` (saturated losses) are compared in
    absolute terms: central differences carry roundoff near ulp(loss) / h there.
    The stencil moves a weight by at most ``2h``, well inside the probes' kink margin.
    """
    named = params.named()
    P = bind(params, requires_grad=True)
    tape = dc.grad(training_loss(spec, P, x_clean, x_adv, y), {k: P[k] for k in named})
    worst = 0.0
    for k, v in named.items():
        def f(arr, k=k):
            arrays = dict(named)
            arrays[k] = arr
            Q = BoundParams(params.arch, {n: dc.tensor(a) for n, a in arrays.items()})
            return training_loss(spec, Q, x_clean, x_adv, y).item()
        worst = max(worst, _rel_err(tape[k], dc.finite_diff_grad(f, v, h, order=4), floor))
    return worst


GRADIENT_FRAMEWORKS = ("pgd-at", "alp", "trades")
HEAD_MODES = ("standard", "fn-only", "wn-only", "he", "m-he")


def cosine_margin(params: ModelParams, x) -> float:
    """Smallest ``1 - |cos theta|`` between a feature row and a weight column.

    arccos turns float error in cos into error of size ``ulp / sqrt(1 - cos^2)``,
    so finite differences of m-he scores degrade as this approaches 0.
    """
    z = extract_features(params, _as_batch(x)).data
    Wn = params.W / np.linalg.norm(params.W, axis=0)
    cos = (z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), _TINY)) @ Wn
    return float(np.min(1.0 - np.abs(cos)))


def gradient_probe(rng: np.random.Generator, margin: float = 1e-3, max_tries: int = 50):
    """Random probe plus a perturbed copy of its inputs, both clear of relu kinks and of cos = +-1."""
    for _ in range(max_tries):
        params, x = random_probe(rng, margin=margin)
        x_adv = x + rng.uniform(-0.1, 0.1, size=x.shape)
        if preactivation_margin(params, x_adv) >= margin and \
                min(cosine_margin(params, x), cosine_margin(params, x_adv)) >= margin:
            y = rng.integers(0, params.arch.num_classes, size=x.shape[0])
            return params, x, x_adv, y
    raise ContractError(f"no gradient probe with kink and cosine margin {margin} after {max_tries} tries")


# -- suite runner ------------------------------------------------------------------------

SUITES = ("lemma1", "lemma2", "eq14", "eq15", "eq16", "directions", "gradients")


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "name": self.name, "value": self.value,
                "threshold": self.threshold, "passed": self.passed, **self.detail}


def _max_check(suite, name, values, threshold) -> CheckResult:
    worst = float(np.max(values))
    return CheckResult(suite, name, worst, threshold, bool(worst < threshold), {"trials": len(values)})


def _suite_lemma2(rng, trials):
    devs = []
    for t in range(trials):
        params, x = random_probe(rng)
        L = params.arch.num_classes
        target = (rng.integers(0, L, size=x.shape[0]) if t % 2 == 0
                  else rng.dirichlet(np.ones(L), size=x.shape[0]))
        devs.append(verify_ce_gradient_decomposition(params, x, target))
    return [_max_check("lemma2", "ce-input-gradient-double-sum", devs, 1e-10)]


def _suite_eq(rng, trials, which):
    devs = []
    mode = "standard" if which == "eq14" else "fn-only"
    for _ in range(trials):
        params, x = random_probe(rng, num_classes=int(rng.integers(3, 6)))
        y = rng.integers(0, params.arch.num_classes, size=x.shape[0])
        rep = verify_parameter_gradient_forms(params, x, y, modes=(mode,))
        devs.append(rep.eq_norm_angle if which == "eq14" else rep.eq_fn)
    name = "extractor-gradient-norm-angle" if which == "eq14" else "extractor-gradient-fn-angle"
    return [_max_check(which, name, devs, 1e-8)]


def _suite_eq16(rng, trials):
    devs = []
    for _ in range(trials):
        params, x = random_probe(rng, batch=int(rng.integers(1, 33)))
        y = rng.integers(0, params.arch.num_classes, size=x.shape[0])
        devs.append(verify_softmax_weight_gradient(params, x, y))
    return [_max_check("eq16", "softmax-weight-batch-gradient", devs, 1e-10)]


def _suite_directions(rng, trials):
    scale, fn_cos, undefined = [], [], 0
    for _ in range(trials):
        params, x = random_probe(rng, num_classes=2)
        y = rng.integers(0, 2, size=x.shape[0])
        for p in ("inf", "2"):
            rep = verify_direction_factorization(params, x, y, p=p, head=HeadConfig("fn-only"))
            scale.append(rep.scale_deviation)
            if p == "2":
                defined = rep.fn_cosine[~np.isnan(rep.fn_cosine)]
                undefined += rep.fn_cosine.size - defined.size
                fn_cos.extend(defined.tolist())
    return [_max_check("directions", "update-direction-scale-invariance", scale, 1e-12),
            CheckResult("directions", "fn-head-two-class-angular-direction", float(np.min(fn_cos)), 0.99,
                        bool(np.min(fn_cos) > 0.99),
                        {"rows": len(fn_cos), "undefined_rows": undefined, "comparison": ">"})]


def smooth_probe(rng: np.random.Generator):
    """Small tanh MLP fitted briefly to two-moons; smooth, so the remainder is second order."""
    from .datahub import make_two_moons
    from .trainer import TrainSpec, train

    arch = ArchitectureSpec(input_shape=(2,), hidden=(16,), feature_dim=8, num_classes=2, activation="tanh")
    data = make_two_moons(256, 0.1, int(rng.integers(2**31)))
    spec = TrainSpec(arch=arch, framework="standard", epochs=20, batch_size=32, lr=0.1,
                     seed=int(rng.integers(2**31)))
    params, _ = train(spec, data)
    return params, data


def _suite_lemma1(rng, trials):
    eps_grid = [1e-1, 1e-2, 1e-3, 1e-4]
    params, data = smooth_probe(rng)
    head = HeadConfig("standard")
    slopes, linear_rem, dual = [], [], []
    for i in range(trials):
        k = int(rng.integers(len(data)))
        for p in ("inf", "2"):
            rep = lemma1_scaling_check(model_objective(params, head, data.labels[k]), data.inputs[k], eps_grid, p)
            slopes.append(rep.slope)
        a = rng.normal(size=6)
        c = float(rng.normal())
        lin = lambda x, a=a, c=c: (float(a @ x) + c, a.copy())
        rep = lemma1_scaling_check(lin, rng.normal(size=6), eps_grid, "inf" if i % 2 else "2")
        linear_rem.append(float(np.max(rep.remainder)))
    for i in range(100):
        u = rng.normal(size=int(rng.integers(1, 50))) * 10 ** rng.uniform(-3, 3)
        dual.append(duality_deviation(u, "2" if i % 2 else "inf"))
    worst_slope = float(np.min(slopes))
    return [CheckResult("lemma1", "ce-remainder-slope", worst_slope, 1.8, bool(worst_slope >= 1.8),
                        {"trials": len(slopes), "comparison": ">="}),
            _max_check("lemma1", "linear-remainder-zero", linear_rem, 1e-12),
            _max_check("lemma1", "dual-norm-duality", dual, 1e-10)]


def _suite_gradients(rng, trials):
    out = []
    for framework in GRADIENT_FRAMEWORKS:
        for mode in HEAD_MODES:
            spec = for_framework(framework, HeadConfig(mode))
            errs = [loss_gradient_deviation(spec, *gradient_probe(rng)) for _ in range(trials)]
            out.append(_max_check("gradients", f"{framework}/{mode}", errs, 1e-5))
    return out


def run_suite(selector: str, seed: int = 0, trials: int = 50) -> list:
    """Run one suite (or ``all``); returns CheckResult rows."""
    if selector != "all" and selector not in SUITES:
        raise ContractError(f"unknown verify selector {selector!r}; expected one of {SUITES + ('all',)}")
    from .rng import split_rng

    chosen = SUITES if selector == "all" else (selector,)
    out = []
    for s in chosen:
        rng = split_rng(seed, f"verify/{s}")
        if s == "lemma2":
            out += _suite_lemma2(rng, trials)
        elif s in ("eq14", "eq15"):
            out += _suite_eq(rng, trials, s)
        elif s == "eq16":
            out += _suite_eq16(rng, trials)
        elif s == "directions":
            out += _suite_directions(rng, trials)
        elif s == "gradients":
            out += _suite_gradients(rng, trials)
        else:
            out += _suite_lemma1(rng, min(trials, 20))
    return out
