"""Minimal reverse-mode autodiff on float64 numpy arrays.

A Tape records coarse vector ops (affine layers, activations, reductions);
append order is a topological order, so the backward sweep visits each node
once in reverse.  Everything runs in 64-bit floats and fixed accumulation
order: identical seeds and inputs give bit-identical results.

Parameters live in plain dicts keyed by name; Adam state, checkpoints and
finite-difference checking operate on those dicts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf; names the poisoned node."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Var:
    index: int


class Tape:
    """Single-use computation graph.  One tape per forward pass, single-threaded."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple] = []
        self._backprop: list = []
        self._names: list[str] = []
        self._adjoints: list = []

    # -- graph plumbing --

    def _push(self, value, parents, backprop, name) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value at node {len(self._values)} ({name})")
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._backprop.append(backprop)
        self._names.append(name)
        self._adjoints.append(None)
        return Var(len(self._values) - 1)

    def value(self, v: Var) -> np.ndarray:
        return self._values[v.index]

    def grad(self, v: Var) -> np.ndarray:
        g = self._adjoints[v.index]
        return np.zeros_like(self._values[v.index]) if g is None else g

    def leaf(self, value, name="leaf") -> Var:
        return self._push(value, (), None, name)

    def backward(self, out: Var, seed=None):
        """Reverse sweep from ``out``; accumulates adjoints in fixed order."""
        if seed is None:
            seed = np.ones_like(self._values[out.index])
        self._adjoints[out.index] = np.asarray(seed, dtype=np.float64)
        for i in range(out.index, -1, -1):
            g = self._adjoints[i]
            if g is None or self._backprop[i] is None:
                continue
            for parent, pg in zip(self._parents[i], self._backprop[i](g)):
                if pg is None:
                    continue
                if self._adjoints[parent] is None:
                    self._adjoints[parent] = np.zeros_like(self._values[parent])
                self._adjoints[parent] += pg

    # -- ops --

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = self.value(a), self.value(b)
        return self._push(
            av @ bv, (a, b),
            lambda g: (g @ bv.T, av.T @ g),
            "matmul",
        )

    def add(self, a: Var, b: Var) -> Var:
        av, bv = self.value(a), self.value(b)
        return self._push(
            av + bv, (a, b),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
            "add",
        )

    def sub(self, a: Var, b: Var) -> Var:
        av, bv = self.value(a), self.value(b)
        return self._push(
            av - bv, (a, b),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
            "sub",
        )

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = self.value(a), self.value(b)
        return self._push(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
            "mul",
        )

    def scale(self, a: Var, c: float) -> Var:
        return self._push(self.value(a) * c, (a,), lambda g: (g * c,), "scale")

    def add_const(self, a: Var, c) -> Var:
        return self._push(self.value(a) + c, (a,), lambda g: (g,), "add_const")

    def tanh(self, a: Var) -> Var:
        y = np.tanh(self.value(a))
        return self._push(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self, a: Var) -> Var:
        y = _sigmoid(self.value(a))
        return self._push(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def celu(self, a: Var, alpha: float = 1.0) -> Var:
        x = self.value(a)
        xneg = np.minimum(x, 0.0)
        y = np.where(x >= 0, x, alpha * np.expm1(xneg / alpha))
        dy = np.where(x >= 0, 1.0, np.exp(xneg / alpha))
        return self._push(y, (a,), lambda g: (g * dy,), "celu")

    def relu(self, a: Var) -> Var:
        x = self.value(a)
        return self._push(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")

    def abs(self, a: Var) -> Var:
        x = self.value(a)
        return self._push(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")

    def square(self, a: Var) -> Var:
        x = self.value(a)
        return self._push(x * x, (a,), lambda g: (2.0 * g * x,), "square")

    def log(self, a: Var) -> Var:
        x = self.value(a)
        return self._push(np.log(x), (a,), lambda g: (g / x,), "log")

    def softplus(self, a: Var) -> Var:
        x = self.value(a)
        y = np.logaddexp(0.0, x)
        return self._push(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")

    def softmax(self, a: Var) -> Var:
        """Row softmax over the last axis."""
        x = self.value(a)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((g - dot) * y,)

        return self._push(y, (a,), back, "softmax")

    def sum(self, a: Var) -> Var:
        x = self.value(a)
        return self._push(x.sum(), (a,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")

    def mean(self, a: Var) -> Var:
        x = self.value(a)
        n = x.size
        return self._push(
            x.mean(), (a,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean"
        )

    def sum_axis(self, a: Var, axis: int) -> Var:
        x = self.value(a)
        return self._push(
            x.sum(axis=axis), (a,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),),
            "sum_axis",
        )

    def concat(self, vs, axis: int = -1) -> Var:
        vals = [self.value(v) for v in vs]
        sizes = [v.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]
        return self._push(
            np.concatenate(vals, axis=axis), tuple(vs),
            lambda g: tuple(np.split(g, splits, axis=axis)),
            "concat",
        )

    def slice_cols(self, a: Var, start: int, stop: int) -> Var:
        x = self.value(a)

        def back(g):
            out = np.zeros_like(x)
            out[..., start:stop] = g
            return (out,)

        return self._push(x[..., start:stop], (a,), back, "slice_cols")

    def take(self, a: Var, idx: np.ndarray) -> Var:
        x = self.value(a)
        idx = np.asarray(idx, dtype=np.int64)

        def back(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)

        return self._push(x[idx], (a,), back, "take")

    def repeat(self, a: Var, k: int) -> Var:
        """Flatten and repeat each entry k times (vertex -> coordinate expansion)."""
        x = self.value(a)
        return self._push(
            np.repeat(x.ravel(), k), (a,),
            lambda g: (g.reshape(-1, k).sum(axis=1).reshape(x.shape),), "repeat"
        )

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        """x @ w + b with bias broadcast over the batch."""
        return self.add(self.matmul(x, w), b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] > 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    return _sigmoid(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# parameters and layers

def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int):
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero bias."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)

def init_mlp(rng: np.random.Generator, prefix: str, sizes) -> dict:
    params = {}
    for i in range(len(sizes) - 1):
        w, b = init_affine(rng, sizes[i], sizes[i + 1])
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = b
    return params


def mlp_forward(tape: Tape, leaves: dict, prefix: str, x: Var, hidden: str,
                n_layers: int, out: str = "identity") -> Var:
    """Apply an init_mlp stack; ``leaves`` maps param name -> tape leaf."""
    acts = {
        "tanh": tape.tanh,
        "celu": tape.celu,
        "sigmoid": tape.sigmoid,
        "relu": tape.relu,
        "identity": lambda v: v,
    }
    h = x
    for i in range(n_layers):
        h = tape.affine(h, leaves[f"{prefix}.w{i}"], leaves[f"{prefix}.b{i}"])
        h = acts[hidden](h) if i < n_layers - 1 else acts[out](h)
    return h


def leaves_for(tape: Tape, params: dict) -> dict:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def param_count(params: dict) -> int:
    return sum(v.size for v in params.values())


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Standard Adam moments; beta/eps defaults are the usual ones."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One deterministic Adam update; returns the updated parameter dict."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for k in sorted(params):
        g = grads.get(k)
        p = params[k]
        if g is None:
            out[k] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {k}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[k] = m
        state.v[k] = v
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def gradient_max_rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """inf-norm error of the analytic gradient against a reference, relative
    to max(1, inf-norm of the reference)."""
    analytic = np.asarray(analytic).ravel()
    reference = np.asarray(reference).ravel()
    denom = max(1.0, float(np.abs(reference).max(initial=0.0)))
    return float(np.abs(analytic - reference).max(initial=0.0)) / denom


def check_gradient(f, grad_f, x: np.ndarray, h: float = 1e-5) -> float:
    return gradient_max_rel_error(grad_f(x), finite_difference_gradient(f, x, h))


# ---------------------------------------------------------------------------
# checkpoints: flat float64 payload + JSON shape manifest

def save_checkpoint(path, params: dict):
    path = Path(path)
    order = sorted(params)
    manifest = {
        "version": 1,
        "order": order,
        "shapes": {k: list(params[k].shape) for k in order},
    }
    payload = np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in order]) \
        if order else np.zeros(0)
    path.with_suffix(".bin").write_bytes(payload.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version in {path}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    params = {}
    offset = 0
    for k in manifest["order"]:
        shape = tuple(manifest["shapes"][k])
        n = int(np.prod(shape)) if shape else 1
        params[k] = flat[offset : offset + n].reshape(shape)
        offset += n
    if offset != flat.size:
        raise ValueError(f"checkpoint payload size mismatch in {path}")
    return params
