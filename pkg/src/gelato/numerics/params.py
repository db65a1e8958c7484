"""Named parameter store with freeze/train flags, plus the two numeric
guards built on top of it: global gradient clipping and finite-difference
gradient verification."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np

from ..errors import ConfigurationError, DimensionError, NumericError
from .autodiff import Var, backward


class Param:
    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = False):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.trainable = trainable

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class ParamSet:
    """Ordered mapping of unique names to parameters.

    Freeze discipline lives here: optimizer steps and gradient accumulation
    consult the trainable flags, and frozen entries must stay bitwise
    unchanged through any number of steps.
    """

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = False) -> Param:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        p = Param(name, np.asarray(value), trainable)
        self._entries[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigurationError(f"unknown parameter {name!r}") from None

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def params(self) -> list[Param]:
        return list(self._entries.values())

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self._entries.items() if not p.trainable]

    def set_trainable(self, names: Iterable[str]) -> None:
        """Flip exactly `names` to trainable and everything else to frozen."""
        wanted = set(names)
        unknown = wanted - set(self._entries)
        if unknown:
            raise ConfigurationError(f"unknown parameters in scope: {sorted(unknown)}")
        for n, p in self._entries.items():
            p.trainable = n in wanted

    def make_leaves(self, with_grads: bool = True) -> dict[str, Var]:
        """Fresh graph leaves over the stored arrays (no copies)."""
        return {
            n: Var(p.value, requires_grad=(with_grads and p.trainable))
            for n, p in self._entries.items()
        }

    def tensor_hashes(self, names: Iterable[str] | None = None) -> dict[str, str]:
        names = self.names() if names is None else list(names)
        return {
            n: hashlib.sha256(self._entries[n].value.tobytes()).hexdigest()
            for n in names
        }

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, p in self._entries.items():
            out.add(n, p.value.copy(), p.trainable)
        return out


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale every gradient by max_norm/||g|| when the global L2 norm
    exceeds max_norm. Returns (clipped gradients, applied scale)."""
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return dict(grads), 1.0
    s = max_norm / norm
    return {n: g * s for n, g in grads.items()}, s


def grad_check(
    loss_fn: Callable[[dict[str, Var]], Var],
    params: ParamSet,
    h: float = 1e-5,
) -> float:
    """Compare tape gradients against central differences for every
    component of every trainable parameter; returns the worst relative
    error. The finite-difference side re-runs the full forward pass and
    never touches the tape, so the two routes stay independent."""
    if not (1e-7 <= h <= 1e-3):
        raise ConfigurationError(f"step size {h} outside [1e-7, 1e-3]")

    trainable = params.trainable_names()
    if not trainable:
        return 0.0

    leaves = params.make_leaves()
    loss = loss_fn(leaves)
    if loss.value.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value):
        raise NumericError("loss is not finite at the evaluation point")
    backward(loss)

    def eval_loss() -> float:
        out = loss_fn(params.make_leaves(with_grads=False))
        v = float(out.value)
        if not np.isfinite(v):
            raise NumericError("loss became non-finite during finite differencing")
        return v

    worst = 0.0
    for name in trainable:
        tape_grad = leaves[name].grad
        if tape_grad is None:
            tape_grad = np.zeros_like(params[name].value)
        flat_p = params[name].value.reshape(-1)
        flat_g = tape_grad.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = eval_loss()
            flat_p[i] = orig - h
            down = eval_loss()
            flat_p[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = flat_g[i]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
