"""Dense float64 tensors with reverse-mode gradients.

A small tape-based engine: every operation returns a new ``Tensor`` that
remembers its parents and a closure that pushes gradients back to them.
The primitive set is exactly what the predictor needs: linear maps, ReLU,
(masked) softmax, layer normalization, concatenation, slicing, reductions,
squared error, L2 norm and cosine similarity. Everything is float64; there
is no broadcasting beyond the row-wise bias in ``linear``.

Tensors are treated as immutable values once created. Trainable parameters
live in a ``ParameterStore``; the optimizer swaps their ``data`` arrays
between graph constructions, never while a graph is alive.
"""
from __future__ import annotations

import json
from collections.abc import Iterable, Sequence

import numpy as np


class Tensor:
    """One node of the implicit compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_push")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _push=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            tag = f" {name!r}" if name else ""
            raise ValueError(f"non-finite values in tensor{tag}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._push = _push
        # An op output needs gradients iff some ancestor leaf is trainable.
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _bump(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Elementwise arithmetic; the other operand is a same-shape Tensor or a
    # python scalar. No implicit broadcasting of arrays.
    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("add", self, other)
            out = Tensor(self.data + other.data, _parents=(self, other))

            def push(g, a=self, b=other):
                if a.requires_grad:
                    a._bump(g)
                if b.requires_grad:
                    b._bump(g)
        else:
            out = Tensor(self.data + float(other), _parents=(self,))

            def push(g, a=self):
                if a.requires_grad:
                    a._bump(g)
        out._push = push
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("sub", self, other)
            out = Tensor(self.data - other.data, _parents=(self, other))

            def push(g, a=self, b=other):
                if a.requires_grad:
                    a._bump(g)
                if b.requires_grad:
                    b._bump(-g)
        else:
            out = Tensor(self.data - float(other), _parents=(self,))

            def push(g, a=self):
                if a.requires_grad:
                    a._bump(g)
        out._push = push
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("mul", self, other)
            out = Tensor(self.data * other.data, _parents=(self, other))

            def push(g, a=self, b=other):
                if a.requires_grad:
                    a._bump(g * b.data)
                if b.requires_grad:
                    b._bump(g * a.data)
        else:
            c = float(other)
            out = Tensor(self.data * c, _parents=(self,))

            def push(g, a=self, c=c):
                if a.requires_grad:
                    a._bump(g * c)
        out._push = push
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node."""
        if self.data.shape != ():
            raise ValueError(f"backward requires a scalar node, got shape {self.shape}")
        order = _toposort(self)
        self._bump(np.ones_like(self.data))
        for node in reversed(order):
            if node._push is not None and node.requires_grad and node.grad is not None:
                node._push(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def constant(data, name: str | None = None) -> Tensor:
    """Leaf that never receives gradients."""
    return Tensor(data, requires_grad=False, name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b broadcast across rows). x: (n,p), w: (p,q), b: (q,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear: expected 2-D operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"linear: inner dimensions differ, x {x.data.shape} vs w {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ValueError(f"linear: bias shape {b.data.shape} does not match output width {w.data.shape[1]}")
        y = y + b.data
        out = Tensor(y, _parents=(x, w, b))

        def push(g, x=x, w=w, b=b):
            if x.requires_grad:
                x._bump(g @ w.data.T)
            if w.requires_grad:
                w._bump(x.data.T @ g)
            if b.requires_grad:
                b._bump(g.sum(axis=0))
    else:
        out = Tensor(y, _parents=(x, w))

        def push(g, x=x, w=w):
            if x.requires_grad:
                x._bump(g @ w.data.T)
            if w.requires_grad:
                w._bump(x.data.T @ g)
    out._push = push
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def push(g, a=a, b=b):
        if a.requires_grad:
            a._bump(g @ b.data.T)
        if b.requires_grad:
            b._bump(a.data.T @ g)
    out._push = push
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got {x.data.shape}")
    out = Tensor(x.data.T, _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(g.T)
    out._push = push
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(g * (x.data > 0.0))
    out._push = push
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    ``mask`` is an optional boolean array of the same shape; False entries
    get zero probability. Every row must keep at least one True entry.
    """
    if x.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError(f"softmax: mask shape {mask.shape} does not match input {z.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax: mask removes an entire row")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, _parents=(x,))

    def push(g, x=x, s=s):
        if x.requires_grad:
            x._bump(s * (g - (g * s).sum(axis=-1, keepdims=True)))
    out._push = push
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the biased variance; ``eps`` guards the zero-variance case.
    """
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ValueError(f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
                         f"do not match feature width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, _parents=(x, gamma, beta))

    def push(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv=inv):
        if gamma.requires_grad:
            gg = g * xhat
            gamma._bump(gg.sum(axis=0) if gg.ndim == 2 else gg)
        if beta.requires_grad:
            beta._bump(g.sum(axis=0) if g.ndim == 2 else g)
        if x.requires_grad:
            gh = g * gamma.data
            x._bump(inv * (gh - gh.mean(axis=-1, keepdims=True)
                           - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
    out._push = push
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of an empty sequence")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def push(g, parts=tuple(parts), sizes=sizes, axis=axis):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                p._bump(g[tuple(idx)])
            offset += size
    out._push = push
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop], _parents=(x,))

    def push(g, x=x, start=start, stop=stop):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x._bump(full)
    out._push = push
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"slice_cols: expected 2-D, got {x.data.shape}")
    out = Tensor(x.data[:, start:stop], _parents=(x,))

    def push(g, x=x, start=start, stop=stop):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x._bump(full)
    out._push = push
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(g.reshape(x.data.shape))
    out._push = push
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(np.full_like(x.data, float(g)))
    out._push = push
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean(), _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(np.full_like(x.data, float(g) / x.data.size))
    out._push = push
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    out = Tensor(np.log(x.data), _parents=(x,))

    def push(g, x=x):
        if x.requires_grad:
            x._bump(g / x.data)
    out._push = push
    return out


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    """Scalar sum of squared differences."""
    _check_same_shape("squared_error", pred, target)
    diff = pred.data - target.data
    out = Tensor((diff ** 2).sum(), _parents=(pred, target))

    def push(g, pred=pred, target=target, diff=diff):
        if pred.requires_grad:
            pred._bump(2.0 * diff * float(g))
        if target.requires_grad:
            target._bump(-2.0 * diff * float(g))
    out._push = push
    return out


def l2_norm(x: Tensor) -> Tensor:
    n = float(np.sqrt((x.data ** 2).sum()))
    out = Tensor(n, _parents=(x,))

    def push(g, x=x, n=n):
        if x.requires_grad and n > 0.0:
            x._bump(x.data / n * float(g))
    out._push = push
    return out


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors; 0 if either is zero."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError(f"cosine_similarity: expected 1-D vectors, got {a.data.shape} and {b.data.shape}")
    _check_same_shape("cosine_similarity", a, b)
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        c = 0.0
    else:
        c = float(a.data @ b.data) / (na * nb)
    out = Tensor(c, _parents=(a, b))

    def push(g, a=a, b=b, na=na, nb=nb, c=c):
        if na == 0.0 or nb == 0.0:
            return
        s = float(g)
        if a.requires_grad:
            a._bump(s * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            b._bump(s * (a.data / (na * nb) - c * b.data / (nb * nb)))
    out._push = push
    return out


class ParameterStore:
    """Named trainable leaves, iterated in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter sets differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter '{name}' shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()


def gradients(loss: Tensor, store: ParameterStore) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every parameter.

    Missing gradients (parameters unused by this graph) come back as zeros.
    """
    store.zero_grad()
    loss.backward()
    out: dict[str, np.ndarray] = {}
    for name, t in store.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{name}'")
        out[name] = g.copy()
    return out


CHECKPOINT_FORMAT = "hfttc-params-v1"


def save_params(store: ParameterStore, path) -> None:
    """Write parameters as JSON with hex-encoded floats (bit-exact round trip)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "parameters": {
            name: {
                "shape": list(t.data.shape),
                "values": [v.hex() for v in t.data.ravel().tolist()],
            }
            for name, t in store.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    out = {}
    for name, entry in payload["parameters"].items():
        values = np.array([float.fromhex(v) for v in entry["values"]], dtype=np.float64)
        out[name] = values.reshape(entry["shape"])
    return out
