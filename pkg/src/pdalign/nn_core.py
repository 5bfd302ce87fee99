"""Dense encoder/classifier networks, Adam, and a finite-difference checker."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autograd import Tensor, as_tensor
from .errors import DimensionError, ValidityError


INIT_SCHEMES = ("he", "fan_in")
LATENT_ACTIVATIONS = ("relu", "linear")


def _check_scheme(scheme: str) -> None:
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int,
           scheme: str) -> tuple[np.ndarray, np.ndarray]:
    # "he": U(+-sqrt(6/fan_in)) weights, zero bias.
    # "fan_in": U(+-1/sqrt(fan_in)) for weights and bias alike.
    if scheme == "he":
        w = rng.uniform(-np.sqrt(6.0 / fan_in), np.sqrt(6.0 / fan_in), size=(fan_in, fan_out))
        return w, np.zeros(fan_out)
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, rng.uniform(-bound, bound, size=fan_out)


def _leaf(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64), requires_grad=True)


@dataclass
class EncoderParams:
    """Two fully-connected layers with dropout after each.

    The hidden layer is always ReLU. ``latent_activation`` picks whether the
    embedding layer is ReLU too or stays linear.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float = 0.1
    latent_activation: str = "relu"

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, _leaf(getattr(self, name)))
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise DimensionError("encoder weights must be matrices")
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise DimensionError("encoder layer 1 shapes do not chain")
        if self.b2.shape != (self.w2.shape[1],):
            raise DimensionError("encoder layer 2 bias shape mismatch")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.latent_activation not in LATENT_ACTIVATIONS:
            raise ValueError(f"latent_activation must be one of {LATENT_ACTIVATIONS}, "
                             f"got {self.latent_activation!r}")

    @property
    def d_x(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_z(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"enc.w1": self.w1, "enc.b1": self.b1, "enc.w2": self.w2, "enc.b2": self.b2}


@dataclass
class ClassifierParams:
    """Two dense layers with a ReLU between them; outputs raw logits."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, _leaf(getattr(self, name)))
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise DimensionError("classifier weights must be matrices")
        if self.b1.shape != (self.w1.shape[1],) or self.w2.shape[0] != self.w1.shape[1]:
            raise DimensionError("classifier layer 1 shapes do not chain")
        if self.b2.shape != (self.w2.shape[1],):
            raise DimensionError("classifier layer 2 bias shape mismatch")

    @property
    def d_z(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"cls.w1": self.w1, "cls.b1": self.b1, "cls.w2": self.w2, "cls.b2": self.b2}


def init_encoder(d_x: int, hidden: int = 1024, d_z: int = 512, dropout: float = 0.1,
                 seed: int | np.random.Generator = 0, scheme: str = "he",
                 latent_activation: str = "relu") -> EncoderParams:
    _check_scheme(scheme)
    rng = np.random.default_rng(seed)
    w1, b1 = _dense(rng, d_x, hidden, scheme)
    w2, b2 = _dense(rng, hidden, d_z, scheme)
    return EncoderParams(w1=w1, b1=b1, w2=w2, b2=b2, dropout=dropout,
                         latent_activation=latent_activation)


def init_classifier(d_z: int, n_classes: int, hidden: int = 512,
                    seed: int | np.random.Generator = 0, scheme: str = "he") -> ClassifierParams:
    _check_scheme(scheme)
    rng = np.random.default_rng(seed)
    w1, b1 = _dense(rng, d_z, hidden, scheme)
    w2, b2 = _dense(rng, hidden, n_classes, scheme)
    return ClassifierParams(w1=w1, b1=b1, w2=w2, b2=b2)


def _check_input(x, width: int, what: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what} expects shape (B, {width}), got {x.shape}")
    if not x.is_finite():
        raise ValidityError(f"{what} input contains non-finite values")
    return x


def _dropout(h: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p == 0.0:
        return h
    keep = (rng.random(h.shape) >= p) / (1.0 - p)
    return h * keep


def encoder_forward(x, params: EncoderParams, training: bool = False,
                    rng_seed: int | np.random.Generator | None = None) -> Tensor:
    """Map inputs ``(B, d_x)`` to embeddings ``(B, d_z)``.

    In training mode dropout masks come from ``rng_seed`` and surviving
    activations are scaled by ``1 / (1 - p)``.
    """
    x = _check_input(x, params.d_x, "encoder")
    rng = np.random.default_rng(rng_seed) if training else None
    h = (x @ params.w1 + params.b1).relu()
    if training:
        h = _dropout(h, params.dropout, rng)
    z = h @ params.w2 + params.b2
    if params.latent_activation == "relu":
        z = z.relu()
    if training:
        z = _dropout(z, params.dropout, rng)
    return z


def classifier_forward(z, params: ClassifierParams) -> Tensor:
    z = _check_input(z, params.d_z, "classifier")
    h = (z @ params.w1 + params.b1).relu()
    return h @ params.w2 + params.b2


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    if not logits.is_finite():
        raise ValidityError("softmax input contains non-finite values")
    return logits.softmax(axis=-1)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to each tensor in ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    for p in params.values():
        p.grad = None
    loss.backward()
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for k, p in params.items()}


def param_hash(params: Mapping[str, Tensor | np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        v = params[k]
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.data if isinstance(v, Tensor) else v).tobytes())
    return h.hexdigest()


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads):
        raise DimensionError("params and grads name different tensors")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise DimensionError(f"gradient for {k} has shape {g.shape}, expected {np.shape(p)}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        if m.shape != g.shape:
            raise DimensionError(f"moment for {k} has shape {m.shape}, expected {g.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_params[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = OptimizerState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                               eps=state.eps, step=t, m=new_m, v=new_v)
    return new_params, new_state


def grad_check(objective: Callable[[dict[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], fd_epsilon: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    ``objective`` receives a dict of leaf tensors and returns a scalar tensor.
    With ``max_coords`` set, at most that many coordinates per parameter are
    sampled; otherwise every coordinate is checked.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = objective(leaves)
    if not out.is_finite():
        raise ValidityError("objective is not finite at the given parameters")
    analytic = backward(out, leaves)

    def f(values: dict[str, np.ndarray]) -> float:
        val = objective({k: Tensor(v) for k, v in values.items()}).item()
        if not np.isfinite(val):
            raise ValidityError("objective became non-finite during differencing")
        return val

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, v in base.items():
        coords = np.arange(v.size)
        if max_coords is not None and v.size > max_coords:
            coords = rng.choice(v.size, size=max_coords, replace=False)
        for c in coords:
            idx = np.unravel_index(c, v.shape)
            plus = {kk: vv.copy() for kk, vv in base.items()}
            minus = {kk: vv.copy() for kk, vv in base.items()}
            plus[k][idx] += fd_epsilon
            minus[k][idx] -= fd_epsilon
            numeric = (f(plus) - f(minus)) / (2.0 * fd_epsilon)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
