"""Reverse-mode gradients and Hessian-vector products over a flat parameter vector.

Differentiation is delegated to ``torch.autograd`` in float64.  Models are
written against the guarded primitive set below.  Per-node finiteness checks
are off on the fast path; when a loss or gradient comes out non-finite the
evaluation is replayed with checks on, so :class:`NonFiniteError` names the
graph node that first produced a NaN or Inf.
Hessian-vector products use double reverse mode: the gradient graph is built
once per operator and each ``apply`` is one extra backward pass.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        super().__init__(f"non-finite value produced at graph node '{node}'")
        self.node = node


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Layout(tuple):
    """Ordered ``LayoutEntry`` records describing a flat parameter vector."""

    @classmethod
    def build(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> Layout:
        entries = []
        offset = 0
        for name, shape in shapes:
            entry = LayoutEntry(name, tuple(int(s) for s in shape), offset)
            entries.append(entry)
            offset += entry.size
        return cls(entries)

    @property
    def size(self) -> int:
        return sum(e.size for e in self)

    def split(self, flat):
        """Dict of reshaped views into ``flat`` (numpy array or tensor)."""
        return {e.name: flat[e.offset : e.offset + e.size].reshape(e.shape) for e in self}

    def to_json(self) -> list:
        return [[e.name, list(e.shape), e.offset] for e in self]

    @classmethod
    def from_json(cls, data) -> Layout:
        return cls(LayoutEntry(n, tuple(s), int(o)) for n, s, o in data)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.size != self.layout.size:
            raise ValueError(f"vector length {v.size} does not match layout size {self.layout.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def tensors(self):
        return self.layout.split(self.values)

    def replace(self, values) -> ParamVector:
        return ParamVector(values, self.layout)

    def __add__(self, other: ParamVector) -> ParamVector:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")
        return ParamVector(self.values + other.values, self.layout)

    def torch(self, requires_grad: bool = False) -> torch.Tensor:
        t = torch.tensor(self.values, dtype=DTYPE)
        return t.requires_grad_(requires_grad)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, ParamVector):
        return x.torch()
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


# ----------------------------------------------------------------- primitives

_checking = False


@contextmanager
def checked():
    """Enable per-node finiteness checks inside the block."""
    global _checking
    old, _checking = _checking, True
    try:
        yield
    finally:
        _checking = old


def _guard(name: str, out: torch.Tensor) -> torch.Tensor:
    if _checking and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(name)
    return out


def _finite(t: torch.Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def linear(x, weight, bias=None, name="linear"):
    out = x @ weight
    if bias is not None:
        out = out + bias
    return _guard(name, out)


def add(a, b, name="add"):
    return _guard(name, a + b)


def relu(x, name="relu"):
    return _guard(name, torch.relu(x))


def sigmoid(x, name="sigmoid"):
    return _guard(name, torch.sigmoid(x))


def log(x, name="log"):
    return _guard(name, torch.log(x))


def square(x, name="square"):
    return _guard(name, x * x)


def masked_softmax(scores, key_mask, name="softmax"):
    """Softmax over the last axis with ``key_mask == False`` columns at -inf."""
    scores = scores.masked_fill(~key_mask, float("-inf"))
    return _guard(name, torch.softmax(scores, dim=-1))


def layer_norm(x, gain, offset, eps=1e-5, name="layer_norm"):
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return _guard(name, xc / torch.sqrt(var + eps) * gain + offset)


def masked_mean(x, mask, name="mean_pool"):
    """Mean of ``x`` (B, N, D) over real slots of ``mask`` (B, N)."""
    m = mask.to(x.dtype).unsqueeze(-1)
    return _guard(name, (x * m).sum(dim=-2) / m.sum(dim=-2))


def softplus(x, name="softplus"):
    return _guard(name, torch.nn.functional.softplus(x))


# ------------------------------------------------------------------ operators

LossFn = Callable[[torch.Tensor], torch.Tensor]


def _check_grad(g: torch.Tensor, layout: Layout) -> None:
    if _finite(g):
        return
    for e in layout:
        if not _finite(g[e.offset : e.offset + e.size]):
            raise NonFiniteError(f"grad[{e.name}]")
    raise NonFiniteError("grad")


def _diagnose(loss, params: ParamVector) -> None:
    """Replay ``loss`` with node checks on; raises naming the first bad node."""
    with checked():
        value = as_tensor(loss(params.torch()))
    if not _finite(value):
        raise NonFiniteError("loss")


def _bind(loss, batch):
    if batch is None:
        return loss
    return lambda theta: loss(theta, batch)


def value_and_grad(loss, params: ParamVector, batch=None) -> tuple[float, ParamVector]:
    """Loss value and exact gradient of ``loss(theta[, batch])`` at ``params``.

    ``loss`` maps the flat float64 parameter tensor (and ``batch`` when given)
    to a scalar tensor.
    """
    loss = _bind(loss, batch)
    theta = params.torch(requires_grad=True)
    value = as_tensor(loss(theta))
    if not _finite(value):
        _diagnose(loss, params)
    g = None
    if value.requires_grad:
        (g,) = torch.autograd.grad(value, theta, allow_unused=True)
    if g is None:
        g = torch.zeros_like(theta)
    _check_grad(g, params.layout)
    return float(value.detach()), params.replace(g.detach().numpy())


@dataclass(frozen=True)
class HvpOperator:
    apply: Callable[[np.ndarray], np.ndarray]
    dim: int

    def __call__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, a) -> HvpOperator:
        a = np.asarray(a, dtype=np.float64)
        return cls(lambda v: a @ np.asarray(v, dtype=np.float64), a.shape[0])


def make_hvp(loss, params: ParamVector, batch=None) -> HvpOperator:
    """Hessian-vector product operator of ``loss`` at ``params``."""
    loss = _bind(loss, batch)
    theta = params.torch(requires_grad=True)
    value = as_tensor(loss(theta))
    if not _finite(value):
        _diagnose(loss, params)
    g = None
    if value.requires_grad:
        (g,) = torch.autograd.grad(value, theta, create_graph=True, allow_unused=True)
    if g is None or not g.requires_grad:
        dim = len(params)
        return HvpOperator(lambda v: np.zeros(dim), dim)
    _check_grad(g.detach(), params.layout)

    def apply(v):
        vt = torch.as_tensor(np.asarray(v, dtype=np.float64).reshape(-1))
        (hv,) = torch.autograd.grad(g, theta, grad_outputs=vt, retain_graph=True, allow_unused=True)
        if hv is None:
            return np.zeros(len(params))
        if not _finite(hv):
            raise NonFiniteError("hvp")
        return hv.detach().numpy().copy()

    return HvpOperator(apply, len(params))


def dense_hessian(op: HvpOperator) -> np.ndarray:
    """Assemble the full matrix column by column; small problems only."""
    eye = np.eye(op.dim)
    return np.stack([op.apply(eye[i]) for i in range(op.dim)], axis=1)
