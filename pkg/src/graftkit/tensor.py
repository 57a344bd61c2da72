"""Validated differentiable primitives on top of torch autograd.

Every operator and model in the package is written against the closed set of
primitives below. Each primitive checks its input shapes, runs the torch
kernel and rejects non-finite results, so a NaN never travels silently through
a forward pass. Gradients come from torch's reverse-mode tape; ``grad_check``
verifies them against central finite differences without touching autograd.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_CHECK_FINITE = True


class PrimitiveError(ValueError):
    """Raised when a primitive receives non-conforming shapes or yields non-finite values."""


class NonFiniteError(PrimitiveError):
    pass


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Temporarily enable or disable the post-primitive finiteness check."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


@contextlib.contextmanager
def precision(dtype: str | torch.dtype) -> Iterator[None]:
    """Set the default floating dtype, e.g. ``precision("float64")`` for verification runs."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def _fail(name: str, *tensors: Tensor, why: str = "shape mismatch") -> PrimitiveError:
    shapes = " vs ".join(str(_shape(t)) for t in tensors)
    return PrimitiveError(f"{name}: {why}: {shapes}")


def _finish(name: str, out: Tensor) -> Tensor:
    # NaN and Inf propagate through a sum, so one reduction checks every element;
    # an overflowing sum of finite values is reported too, which is also an error state.
    if _CHECK_FINITE and not math.isfinite(float(out.detach().sum())):
        raise NonFiniteError(f"{name}: non-finite output of shape {_shape(out)}")
    return out


def _broadcastable(a, b) -> bool:
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        return True
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        return False
    return True


# -- primitives -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]``: a batch of rows times one matrix."""
    if b.dim() != 2 or a.dim() < 1 or a.shape[-1] != b.shape[0]:
        raise _fail("matmul", a, b)
    return _finish("matmul", a @ b)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul ``[..., m, k] @ [..., k, n]`` with identical leading dims."""
    if a.dim() < 3 or a.dim() != b.dim() or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise _fail("batched-matmul", a, b)
    return _finish("batched-matmul", a @ b)


def causal_conv1d(x: Tensor, filters: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along the second-to-last axis.

    ``x`` is ``[B, L, C]`` and ``filters`` is ``[C, K]`` where ``filters[c, j]``
    multiplies ``x[:, s - j, c]``; tap 0 is the current position, so a delta
    filter ``[1, 0, ..., 0]`` is the identity.
    """
    if x.dim() != 3 or filters.dim() != 2 or filters.shape[0] != x.shape[-1]:
        raise _fail("depthwise-causal-conv1d", x, filters)
    if bias is not None and _shape(bias) != (x.shape[-1],):
        raise _fail("depthwise-causal-conv1d", x, bias, why="bias must be per-channel")
    channels, taps = filters.shape
    # conv1d is a cross-correlation; flipping the taps makes it a causal convolution.
    weight = filters.flip(-1).unsqueeze(1)
    y = F.conv1d(F.pad(x.transpose(1, 2), (taps - 1, 0)), weight, bias=bias, groups=channels)
    return _finish("depthwise-causal-conv1d", y.transpose(1, 2))


def softmax(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) keeps entries where True.

    Masked entries get an additive -inf before normalisation. Every row must keep
    at least one entry.
    """
    if mask is not None:
        if mask.dtype != torch.bool or not _broadcastable(x, mask):
            raise _fail("row-softmax", x, mask, why="mask must be a broadcastable bool tensor")
        if not bool(mask.any(-1).all()):
            raise _fail("row-softmax", x, mask, why="mask leaves an empty row")
        x = x.masked_fill(~mask, float("-inf"))
    return _finish("row-softmax", torch.softmax(x, dim=-1))


def layernorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer norm over the last axis."""
    if x.dim() < 1:
        raise _fail("layernorm", x)
    return _finish("layernorm", F.layer_norm(x, (x.shape[-1],), eps=eps))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    return _finish("gelu", F.gelu(x))


def silu(x: Tensor) -> Tensor:
    return _finish("silu", F.silu(x))


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if not _broadcastable(a, b):
        raise _fail("add", a, b)
    return _finish("add", a + b)


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if not _broadcastable(a, b):
        raise _fail("mul", a, b)
    return _finish("mul", a * b)


def scale(x: Tensor, factor: float) -> Tensor:
    return _finish("scale", x * factor)


def sum(x: Tensor, dim: int | Sequence[int] | None = None) -> Tensor:  # noqa: A001
    out = x.sum() if dim is None else x.sum(dim=dim)
    return _finish("sum", out)


def mean(x: Tensor, dim: int | Sequence[int] | None = None) -> Tensor:
    out = x.mean() if dim is None else x.mean(dim=dim)
    return _finish("mean", out)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (
        -1 not in shape and math.prod(shape) != x.numel()
    ) or (-1 in shape and (math.prod(known) == 0 or x.numel() % math.prod(known))):
        raise PrimitiveError(f"reshape: cannot view {_shape(x)} as {shape}")
    return x.reshape(shape)


def transpose(x: Tensor, dim0: int, dim1: int) -> Tensor:
    if not (-x.dim() <= dim0 < x.dim() and -x.dim() <= dim1 < x.dim()):
        raise PrimitiveError(f"transpose: dims ({dim0}, {dim1}) out of range for {_shape(x)}")
    return x.transpose(dim0, dim1)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape[:-1] != first.shape[:-1]:
            raise _fail("concat-last-dim", first, t)
    return torch.cat(list(tensors), dim=-1)


def slice(x: Tensor, start: int, stop: int, dim: int = -1) -> Tensor:  # noqa: A001
    size = x.shape[dim]
    if not 0 <= start < stop <= size:
        raise PrimitiveError(f"slice: [{start}:{stop}] out of range for axis of size {size} in {_shape(x)}")
    return x.narrow(dim, start, stop - start)


def embedding(table: Tensor, index: Tensor) -> Tensor:
    if table.dim() != 2:
        raise _fail("embedding-lookup", table, index)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise PrimitiveError(
            f"embedding-lookup: index out of range [0, {table.shape[0]}) for table {_shape(table)}"
        )
    return table[index]


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "batched-matmul": bmm,
    "depthwise-causal-conv1d": causal_conv1d,
    "row-softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "silu": silu,
    "add": add,
    "mul": mul,
    "scale": scale,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat-last-dim": lambda *ts: concat(ts),
    "slice": slice,
    "embedding-lookup": embedding,
}


def primitive_forward(op: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by its id, e.g. ``primitive_forward("row-softmax", x)``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise PrimitiveError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **params)


# -- gradients --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad; repeated calls accumulate."""
    if loss.numel() != 1:
        raise PrimitiveError(f"backward: loss must be a scalar, got shape {_shape(loss)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise PrimitiveError("backward: loss is detached from the tape (no grad_fn)")
    loss.reshape(()).backward()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> tuple[bool, float]:
    """Compare autograd against central differences at ``x``.

    Returns ``(passed, max_error)`` where the error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``. With
    ``max_coords`` only a seeded random subset of coordinates is probed.
    """
    if x.dtype != torch.float64:
        raise PrimitiveError("grad_check: requires a float64 input")
    x = x.detach().clone().requires_grad_(True)
    value = f(x)
    if value.numel() != 1 or not bool(torch.isfinite(value).all()):
        raise PrimitiveError("grad_check: f(x) must be a finite scalar")
    (analytic,) = torch.autograd.grad(value.reshape(()), x)
    analytic = analytic.reshape(-1)

    flat = x.detach().clone().reshape(-1)
    coords = range(flat.numel())
    if max_coords is not None and max_coords < flat.numel():
        gen = torch.Generator().manual_seed(seed)
        coords = torch.randperm(flat.numel(), generator=gen)[:max_coords].tolist()

    worst = 0.0
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            up = f(flat.reshape(x.shape)).item()
            flat[i] = orig - h
            down = f(flat.reshape(x.shape)).item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise PrimitiveError("grad_check: non-finite f during differencing")
            numeric = (up - down) / (2 * h)
            a = analytic[i].item()
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst <= tol, worst
