"""Differentiable op set, seeded dropout streams and a finite-difference checker.

Reverse-mode gradients come from torch.autograd; every op here adds the shape
and finiteness guarantees the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


def _check_finite(out: Tensor, op: str) -> Tensor:
    # one reduction: NaN and +-Inf both propagate through a sum
    if not bool(torch.isfinite(out.detach().sum())):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {tuple(out.shape)}")
    return out


def _shapes(*ts: Tensor) -> str:
    return ", ".join(str(tuple(t.shape)) for t in ts)


@dataclass
class RngStream:
    """Counter-based random stream; draw ``i`` of seed ``s`` is always the same."""

    seed: int
    counter: int = 0

    def generator(self) -> torch.Generator:
        state = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.counter]).generate_state(
            1, dtype=np.uint64
        )[0]
        self.counter += 1
        return torch.Generator().manual_seed(int(state))

    def uniform(self, shape: Sequence[int]) -> Tensor:
        return torch.rand(tuple(shape), generator=self.generator(), dtype=torch.float64)

    def fork(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.counter + offset)


# ---------------------------------------------------------------- op suite


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {_shapes(a, b)}")
    return _check_finite(torch.matmul(a, b), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"add: incompatible shapes {_shapes(a, b)}") from exc
    return _check_finite(a + b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mul: incompatible shapes {_shapes(a, b)}") from exc
    return _check_finite(a * b, "mul")


def relu(x: Tensor) -> Tensor:
    return _check_finite(torch.relu(x), "relu")


def softmax_row(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, truthy = keep) sends
    excluded entries to -inf before normalising; every row needs one kept entry."""
    if mask is not None:
        keep = mask.to(torch.bool)
        try:
            torch.broadcast_shapes(x.shape, keep.shape)
        except RuntimeError as exc:
            raise ShapeError(f"softmax_row: mask {_shapes(keep)} vs input {_shapes(x)}") from exc
        x = x.masked_fill(~keep, float("-inf"))
    return _check_finite(torch.softmax(x, dim=-1), "softmax_row")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {_shapes(x)} with scale/shift {_shapes(gamma, beta)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return _check_finite((x - mu) / torch.sqrt(var + eps) * gamma + beta, "layer_norm")


def dropout(x: Tensor, rate: float, stream: RngStream | None, train: bool) -> Tensor:
    """Inverted dropout; the keep-mask is drawn from ``stream`` only."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if stream is None:
        raise ValueError("dropout: train mode needs an RngStream")
    keep = (stream.uniform(x.shape) >= rate).to(x.dtype)
    return _check_finite(x * keep / (1.0 - rate), "dropout")


def embedding_lookup(table: Tensor, index: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {_shapes(table)}")
    index = torch.as_tensor(index, dtype=torch.long)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table {_shapes(table)}")
    return table[index]


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine between rows: (m, d) x (k, d) -> (m, k)."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {_shapes(a, b)}")
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroDivisionError("cosine_similarity: zero-norm row")
    return _check_finite((a / na) @ (b / nb).T, "cosine_similarity")


def concat(ts: Sequence[Tensor], dim: int = -1) -> Tensor:
    try:
        out = torch.cat(list(ts), dim=dim)
    except RuntimeError as exc:
        raise ShapeError(f"concat: incompatible shapes {_shapes(*ts)}") from exc
    return out


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softmax_row": softmax_row,
    "layer_norm": layer_norm,
    "dropout": dropout,
    "embedding_lookup": embedding_lookup,
    "cosine_similarity": cosine_similarity,
    "concat": concat,
    "mean": mean,
}


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Backpropagate a finite scalar loss.

    Every tensor in ``params`` ends up with a populated ``.grad`` (zeros when the
    loss does not depend on it). A given loss may be backpropagated only once.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f"backward: loss is {loss.item()}")
    if getattr(loss, "_mudok_consumed", False):
        raise BackwardError("backward called twice on the same loss; rebuild the graph first")
    loss._mudok_consumed = True
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    tolerance: float | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` must rebuild its graph on every call and be deterministic (reset any
    RngStream inside it). Parameters are perturbed in place and restored.
    Returns the error; if ``tolerance`` is given and exceeded, raises AssertionError.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    analytic = [p.grad.detach().clone() for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.grad = None
    if tolerance is not None and worst > tolerance:
        raise AssertionError(f"grad_check: max relative error {worst:.3e} > {tolerance:.1e}")
    return worst
