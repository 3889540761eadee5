"""Feature extractors and the five logit heads.

A model is a feature extractor ``z = z(x; omega)`` followed by a softmax layer
with weight matrix ``W`` (one column per class) and bias ``b``. The heads are

========  ===================================  ==========
mode      raw score per class                  reads b?
========  ===================================  ==========
standard  ``W^T z + b``                        yes
fn-only   ``W^T (z/|z|)``                      no
wn-only   ``(W_l/|W_l|)^T z``                  no
he        ``cos(theta_l)``                     no
m-he      ``-theta_l`` (arccos of the above)   no
========  ===================================  ==========

Scale ``s`` and margin ``m`` are applied only by the losses in
:mod:`sphere_at.objectives`; the scores here are what inference uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, NumericError, Tensor

HEAD_MODES = ("standard", "fn-only", "wn-only", "he", "m-he")
NORM_FLOOR = 1e-12


DEFAULT_MARGIN = {"m-he": 0.1}


@dataclass(frozen=True)
class HeadConfig:
    """``m`` defaults to 0.2 (cosine units), or 0.1 rad for ``m-he``."""

    mode: str = "standard"
    s: float = 15.0
    m: float | None = None

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ContractError(f"unknown head mode {self.mode!r}; expected one of {HEAD_MODES}")
        if self.m is None:
            object.__setattr__(self, "m", DEFAULT_MARGIN.get(self.mode, 0.2))
        if not self.s > 0:
            raise ContractError(f"head scale s must be positive, got {self.s}")
        if not 0 <= self.m < 1:
            raise ContractError(f"head margin m must lie in [0, 1), got {self.m}")

    @property
    def hypersphere(self) -> bool:
        return self.mode in ("he", "m-he")

    @property
    def uses_bias(self) -> bool:
        return self.mode == "standard"


@dataclass(frozen=True)
class ArchitectureSpec:
    """Desk-scale extractor layout.

    ``kind="mlp"``: ``hidden`` lists dense widths. ``kind="conv"``: ``hidden``
    lists conv channel counts, each conv followed by activation and 2x2 max
    pooling. Both end in a linear layer of width ``feature_dim``; with
    ``activate_features`` the activation is applied to it as well, giving
    non-negative features under relu.
    """

    input_shape: tuple = (2,)
    hidden: tuple = (32, 32)
    feature_dim: int = 16
    num_classes: int = 2
    kind: str = "mlp"
    activation: str = "relu"
    kernel: int = 5
    activate_features: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.kind not in ("mlp", "conv"):
            raise ContractError(f"unknown extractor kind {self.kind!r}")
        if self.activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.num_classes < 2 or self.feature_dim < 1:
            raise ContractError("need num_classes >= 2 and feature_dim >= 1")
        if self.kind == "conv" and (len(self.input_shape) != 3 or not self.hidden):
            raise ContractError("conv extractor needs (C, H, W) input and at least one conv layer")
        self.layer_shapes()

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_shapes(self) -> list:
        """(name, weight shape, bias shape) for every extractor layer, in order."""
        layers = []
        if self.kind == "mlp":
            width = self.input_size
            for i, h in enumerate(self.hidden, 1):
                layers.append((f"fc{i}", (width, h), (h,)))
                width = h
        else:
            c, hgt, wid = self.input_shape
            for i, ch in enumerate(self.hidden, 1):
                layers.append((f"conv{i}", (ch, c, self.kernel, self.kernel), (ch,)))
                c = ch
                hgt, wid = hgt - self.kernel + 1, wid - self.kernel + 1
                if hgt < 2 or wid < 2 or hgt % 2 or wid % 2:
                    raise ContractError(f"conv{i} output {hgt}x{wid} cannot be 2x2 max-pooled")
                hgt, wid = hgt // 2, wid // 2
            width = c * hgt * wid
        layers.append(("feat", (width, self.feature_dim), (self.feature_dim,)))
        return layers

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": ",".join(map(str, self.input_shape)),
            "hidden": ",".join(map(str, self.hidden)),
            "feature_dim": str(self.feature_dim),
            "num_classes": str(self.num_classes),
            "activation": self.activation,
            "kernel": str(self.kernel),
            "activate_features": "true" if self.activate_features else "false",
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "ArchitectureSpec":
        ints = lambda s: tuple(int(v) for v in s.split(",") if v.strip())
        return cls(input_shape=ints(d["input_shape"]), hidden=ints(d["hidden"]),
                   feature_dim=int(d["feature_dim"]), num_classes=int(d["num_classes"]),
                   kind=d["kind"], activation=d["activation"], kernel=int(d["kernel"]),
                   activate_features=d.get("activate_features", "false") == "true")


@dataclass
class ModelParams:
    """Extractor weights ``omega`` plus softmax weight ``W`` (feature_dim x L) and bias ``b``."""

    arch: ArchitectureSpec
    omega: dict = field(default_factory=dict)
    W: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        expected = {}
        for name, ws, bs in self.arch.layer_shapes():
            expected[f"{name}.w"], expected[f"{name}.b"] = ws, bs
        if set(self.omega) != set(expected):
            raise ContractError(f"omega keys {sorted(self.omega)} do not match {sorted(expected)}")
        for k, shp in expected.items():
            self.omega[k] = np.asarray(self.omega[k], dtype=np.float64)
            if self.omega[k].shape != shp:
                raise ContractError(f"{k}: shape {self.omega[k].shape}, expected {shp}")
        self.omega = {k: self.omega[k] for k in expected}
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        L = self.arch.num_classes
        if self.W.shape != (self.arch.feature_dim, L) or self.b.shape != (L,):
            raise ContractError(f"W {self.W.shape} / b {self.b.shape} do not fit the architecture")
        for k, v in self.named().items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"parameter {k} has non-finite entries")

    def named(self) -> dict:
        """All parameter arrays in declaration order (omega, then W, then b)."""
        out = dict(self.omega)
        out["W"], out["b"] = self.W, self.b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.omega.items()},
                           self.W.copy(), self.b.copy())

    def replace_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        omega = {k: arrays[k] for k in self.omega}
        return ModelParams(self.arch, omega, arrays["W"], arrays["b"])

    def blocks(self) -> dict:
        """Parameter names grouped by layer, for per-layer diagnostics."""
        groups: dict = {}
        for k in self.omega:
            groups.setdefault(k.split(".")[0], []).append(k)
        groups["softmax"] = ["W"]
        return groups


@dataclass
class BoundParams:
    """ModelParams lifted onto the tape as :class:`Tensor` leaves."""

    arch: ArchitectureSpec
    tensors: dict

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]

    @property
    def W(self) -> Tensor:
        return self.tensors["W"]

    @property
    def b(self) -> Tensor:
        return self.tensors["b"]


def bind(params: ModelParams, requires_grad: bool = False) -> BoundParams:
    return BoundParams(params.arch, {k: dc.tensor(v, requires_grad, name=k)
                                     for k, v in params.named().items()})


def _bound(params) -> BoundParams:
    return params if isinstance(params, BoundParams) else bind(params)


def init_params(arch: ArchitectureSpec, rng: np.random.Generator) -> ModelParams:
    """He (fan-in scaled Gaussian) weights, zero biases."""
    omega = {}
    for name, ws, bs in arch.layer_shapes():
        fan_in = int(np.prod(ws[1:])) if len(ws) == 4 else ws[0]
        omega[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=ws)
        omega[f"{name}.b"] = np.zeros(bs)
    W = rng.normal(0.0, np.sqrt(2.0 / arch.feature_dim), size=(arch.feature_dim, arch.num_classes))
    return ModelParams(arch, omega, W, np.zeros(arch.num_classes))


def _act(arch, t):
    return dc.relu(t) if arch.activation == "relu" else dc.tanh(t)


def extract_features(params, x) -> Tensor:
    """Batch of penultimate features ``z``, differentiable in both ``x`` and omega."""
    P = _bound(params)
    arch = P.arch
    x = dc._lift(x, "extract_features")
    if x.ndim < 2 or (tuple(x.shape[1:]) != arch.input_shape and tuple(x.shape[1:]) != (arch.input_size,)):
        raise ContractError(f"input shape {x.shape[1:]} does not match architecture {arch.input_shape}")
    n = x.shape[0]
    names = [name for name, _, _ in arch.layer_shapes()]
    if arch.kind == "mlp":
        h = dc.reshape(x, (n, arch.input_size))
        for name in names[:-1]:
            h = _act(arch, h @ P[f"{name}.w"] + P[f"{name}.b"])
    else:
        h = dc.reshape(x, (n,) + arch.input_shape)
        for name in names[:-1]:
            h = dc.maxpool2d(_act(arch, dc.conv2d(h, P[f"{name}.w"], P[f"{name}.b"])), 2)
        h = dc.reshape(h, (n, -1))
    z = h @ P["feat.w"] + P["feat.b"]
    return _act(arch, z) if arch.activate_features else z


def _row_norms(t: Tensor, axis: int, what: str) -> Tensor:
    norms = dc.l2norm(t, axis=axis, keepdims=True)
    small = np.flatnonzero(norms.data.reshape(-1) < NORM_FLOOR)
    if small.size:
        raise NumericError(f"{what} {int(small[0])} has norm below {NORM_FLOOR:g}")
    return norms


def fn_normalize(z) -> Tensor:
    """Feature normalization: each row scaled to unit l2 norm."""
    z = dc._lift(z, "fn_normalize")
    if z.ndim != 2:
        raise ContractError(f"fn_normalize expects a (batch, dim) tensor, got {z.shape}")
    return z / _row_norms(z, 1, "feature row")


def wn_normalize(W) -> Tensor:
    """Weight normalization: each column scaled to unit l2 norm."""
    W = dc._lift(W, "wn_normalize")
    if W.ndim != 2:
        raise ContractError(f"wn_normalize expects a matrix, got {W.shape}")
    return W / _row_norms(W, 0, "weight column")


def head_logits(params, cfg: HeadConfig, z) -> Tensor:
    """Raw per-class scores before any scale or margin."""
    P = _bound(params)
    z = dc._lift(z, "head_logits")
    if cfg.mode == "standard":
        return z @ P.W + P.b
    if cfg.mode == "fn-only":
        return fn_normalize(z) @ P.W
    if cfg.mode == "wn-only":
        return z @ wn_normalize(P.W)
    cos = fn_normalize(z) @ wn_normalize(P.W)
    return cos if cfg.mode == "he" else -dc.arccos(cos)


def scores(params, cfg: HeadConfig, x) -> Tensor:
    return head_logits(params, cfg, extract_features(params, x))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params, cfg: HeadConfig, x):
    """(probabilities, labels); argmax ties go to the lowest class index."""
    logits = scores(params, cfg, x).data
    return softmax(logits), np.argmax(logits, axis=1)


@dataclass
class Model:
    """Parameters paired with the head used to read them."""

    params: ModelParams
    head: HeadConfig

    def scores(self, x, params=None) -> Tensor:
        return scores(self.params if params is None else params, self.head, x)

    def predict(self, x):
        return predict(self.params, self.head, x)

    def with_head(self, **changes) -> "Model":
        return Model(self.params, replace(self.head, **changes))
