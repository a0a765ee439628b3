"""Dense reverse-mode differentiation over float64 matrices.

A :class:`Tape` records every primitive applied to :class:`Var` nodes in
creation order, which is already a topological order. :meth:`Tape.backward`
walks it once in reverse and returns gradients grouped by
:class:`ParamGroup`.

Example::

    tape = Tape()
    w = tape.param(group, 0)
    loss = sum_all(relu(affine(tape.constant(x), w, tape.param(group, 1))))
    grads = tape.backward(loss, [group])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, MHTNError


def dense(values, name: str = "input") -> np.ndarray:
    """Validate external data as a finite 2-D float64 matrix."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"{name}: expected a 2-D matrix, got {arr.ndim} dimensions")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"{name}: non-finite value at row {bad[0]}, column {bad[1]}")
    return arr


@dataclass(eq=False)
class ParamGroup:
    """A named set of trainable matrices sharing one learning rate and decay."""

    name: str
    matrices: list[np.ndarray] = field(default_factory=list)
    learning_rate: float = 0.01
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"group {self.name!r}: learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError(f"group {self.name!r}: weight_decay must be >= 0")

    def zeros(self) -> list[np.ndarray]:
        return [np.zeros_like(m) for m in self.matrices]

    def copy(self) -> "ParamGroup":
        return ParamGroup(self.name, [m.copy() for m in self.matrices], self.learning_rate, self.weight_decay)

    @property
    def size(self) -> int:
        return sum(m.size for m in self.matrices)


class Var:
    __slots__ = ("value", "parents", "backward_fn", "tape", "index", "needs_grad", "param")

    def __init__(self, tape, value, parents=(), backward_fn=None, needs_grad=False, param=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.param = param
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Records primitives for one forward pass.

    With ``record=False`` nothing is kept and :meth:`backward` is unavailable;
    this is the inference mode.
    """

    def __init__(self, record: bool = True):
        self.record_ops = record
        self.nodes: list[Var] = []
        self._params: dict[tuple[int, int], Var] = {}
        self._used = False

    def constant(self, value) -> Var:
        return self._push(Var(self, np.asarray(value, dtype=np.float64)))

    def param(self, group: ParamGroup, idx: int) -> Var:
        key = (id(group), idx)
        var = self._params.get(key)
        if var is None:
            var = Var(self, group.matrices[idx], needs_grad=self.record_ops, param=(group, idx))
            self._params[key] = self._push(var)
        return var

    def record(self, value: np.ndarray, parents: Sequence[Var], backward_fn: Callable) -> Var:
        """Append a node whose ``backward_fn(g)`` returns one gradient per parent."""
        needs = self.record_ops and any(p.needs_grad for p in parents)
        if not needs:
            return self._push(Var(self, value))
        return self._push(Var(self, value, tuple(parents), backward_fn, True))

    def _push(self, var: Var) -> Var:
        if self.record_ops:
            var.index = len(self.nodes)
            self.nodes.append(var)
        return var

    def backward(self, root: Var, groups: Iterable[ParamGroup] = ()) -> dict[str, list[np.ndarray]]:
        """Gradients of scalar ``root`` for every parameter group.

        Groups listed in ``groups`` but never touched by the tape get zeros.
        """
        if not self.record_ops:
            raise MHTNError("backward on a non-recording tape")
        if root.tape is not self:
            raise MHTNError("root was produced on a different tape")
        if root.value.size != 1:
            raise MHTNError(f"backward root must be scalar, got shape {root.value.shape}")
        if self._used:
            raise MHTNError("backward already ran on this tape")
        self._used = True

        out: dict[str, list[np.ndarray]] = {g.name: g.zeros() for g in groups}
        grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                group, idx = node.param
                out.setdefault(group.name, group.zeros())[idx] = g
                continue
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.needs_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return out


# ---------------------------------------------------------------------------
# primitives


def affine(x: Var, w: Var, b: Var) -> Var:
    xv, wv, bv = x.value, w.value, b.value
    if xv.shape[1] != wv.shape[0] or bv.shape != (1, wv.shape[1]):
        raise ConfigurationError(
            f"affine shape mismatch: input {xv.shape}, weight {wv.shape}, bias {bv.shape}"
        )

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return x.tape.record(xv @ wv + bv, (x, w, b), back)


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ConfigurationError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(x: Var, c: float) -> Var:
    return x.tape.record(c * x.value, (x,), lambda g: (c * g,))


def sum_all(x: Var) -> Var:
    shape = x.shape
    return x.tape.record(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def sum_squares(x: Var) -> Var:
    xv = x.value
    return x.tape.record(np.array([[np.sum(xv * xv)]]), (x,), lambda g: (2.0 * g[0, 0] * xv,))


def linear_combination(terms: Sequence[Var], coeffs: Sequence[float]) -> Var:
    """``sum(c * t)`` over scalar vars."""
    if not terms:
        raise ConfigurationError("linear_combination needs at least one term")
    coeffs = [float(c) for c in coeffs]
    total = sum(c * t.item() for c, t in zip(coeffs, terms))
    return terms[0].tape.record(
        np.array([[total]]), tuple(terms), lambda g: tuple(c * g for c in coeffs)
    )


def concat_rows(parts: Sequence[Var]) -> Var:
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ConfigurationError(f"concat_rows width mismatch: {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape.record(np.vstack([p.value for p in parts]), tuple(parts), back)


def gradient_reversal(x: Var, lam: float) -> Var:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ConfigurationError(f"gradient reversal needs lambda >= 0, got {lam}")
    return x.tape.record(x.value, (x,), lambda g: (-lam * g,))


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(group: ParamGroup, grads: Sequence[np.ndarray], lr_scale: float = 1.0) -> None:
    """In-place ``theta -= mu * (grad + weight_decay * theta)``."""
    if len(grads) != len(group.matrices):
        raise MHTNError(f"group {group.name!r}: {len(grads)} gradients for {len(group.matrices)} matrices")
    mu = group.learning_rate * lr_scale
    if mu == 0:
        return
    for theta, g in zip(group.matrices, grads):
        if g.shape != theta.shape:
            raise MHTNError(f"group {group.name!r}: gradient shape {g.shape} != parameter {theta.shape}")
        theta -= mu * (g + group.weight_decay * theta)
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"group {group.name!r}: parameters became non-finite")
