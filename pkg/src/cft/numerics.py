"""Dense tensor substrate: counted, finite-checked ops over torch tensors.

Every op here returns a regular ``torch.Tensor`` so autograd supplies the
reverse-mode gradients. What this layer adds is

* an :class:`OpCounter` that matmul-style ops report fused multiply-adds to,
* an immediate ``NonFiniteError`` when an op produces NaN/Inf,
* argument validation (axis range, shape compatibility),
* a versioned JSON checkpoint format for named tensors.
"""

from __future__ import annotations

import contextlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

CHECKPOINT_FORMAT = "cft-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised as soon as an op produces NaN or Inf."""


@dataclass
class OpCounter:
    """Fused multiply-add counts keyed by op label.

    ``mul_adds`` holds what was actually computed (padding included);
    ``valid_mul_adds`` holds the share attributable to non-padded rows.
    """

    mul_adds: dict[str, int] = field(default_factory=dict)
    valid_mul_adds: dict[str, int] = field(default_factory=dict)

    def add(self, label: str, count: int, valid: int | None = None) -> None:
        if count < 0:
            raise ValueError("mul-add count must be non-negative")
        self.mul_adds[label] = self.mul_adds.get(label, 0) + int(count)
        self.valid_mul_adds[label] = self.valid_mul_adds.get(label, 0) + int(
            count if valid is None else valid
        )

    def total(self, prefix: str = "", valid: bool = False) -> int:
        table = self.valid_mul_adds if valid else self.mul_adds
        return sum(v for k, v in table.items() if k.startswith(prefix))

    def reset(self) -> None:
        self.mul_adds.clear()
        self.valid_mul_adds.clear()

    @property
    def empty(self) -> bool:
        return not self.mul_adds


_local = threading.local()


def _counters() -> list[OpCounter]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


@contextlib.contextmanager
def counting(counter: OpCounter | None = None) -> Iterator[OpCounter]:
    """Activate ``counter`` (a fresh one if omitted) for the enclosed ops."""
    counter = OpCounter() if counter is None else counter
    stack = _counters()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def active_counter() -> OpCounter | None:
    stack = _counters()
    return stack[-1] if stack else None


def record(label: str, count: int, valid: int | None = None) -> None:
    counter = active_counter()
    if counter is not None:
        counter.add(label, count, valid)


_checks = threading.local()


def finite_checks_enabled() -> bool:
    return getattr(_checks, "enabled", True)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = finite_checks_enabled()
    _checks.enabled = enabled
    try:
        yield
    finally:
        _checks.enabled = prev


def check_finite(x: Tensor, op: str) -> Tensor:
    # a single reduction: any NaN/Inf makes the sum non-finite
    if finite_checks_enabled() and not math.isfinite(float(x.detach().sum())):
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def _axis(x: Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise IndexError(f"axis {axis} out of range for {x.dim()}-d tensor")
    return axis % x.dim()


def tensor(data, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype or torch.get_default_dtype()).clone()
    check_finite(t, "tensor")
    return t.requires_grad_(requires_grad)


# ---------------------------------------------------------------------------
# counted ops


def matmul(a: Tensor, b: Tensor, label: str = "matmul", valid: int | None = None) -> Tensor:
    """Batched matrix product; registers rows x inner x cols per batch entry."""
    if a.dim() < 2 or b.dim() < 2:
        raise ValueError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ValueError(f"batch extents incompatible: {tuple(a.shape)} @ {tuple(b.shape)}") from exc
    out = torch.matmul(a, b)
    record(label, math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1], valid)
    return check_finite(out, label)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, label: str = "linear") -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in) as in torch."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear expects {weight.shape[-1]} input channels, got {x.shape[-1]}")
    out = F.linear(x, weight, bias)
    record(label, x.numel() // max(x.shape[-1], 1) * weight.shape[0] * weight.shape[1])
    return check_finite(out, label)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0,
           label: str = "conv2d") -> Tensor:
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    record(label, out.numel() * weight.shape[1] * weight.shape[2] * weight.shape[3])
    return check_finite(out, label)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 2,
                     label: str = "conv_transpose2d") -> Tensor:
    out = F.conv_transpose2d(x, weight, bias, stride=stride)
    record(label, x.numel() * weight.shape[1] * weight.shape[2] * weight.shape[3])
    return check_finite(out, label)


# ---------------------------------------------------------------------------
# elementwise / normalization


def softmax(x: Tensor, axis: int = -1, mask: Tensor | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable, True = keep) sends others to -inf."""
    axis = _axis(x, axis)
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    return check_finite(torch.softmax(x, dim=axis), "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    if gain is not None and gain.shape != x.shape[-1:]:
        raise ValueError(f"gain shape {tuple(gain.shape)} does not match {x.shape[-1]} channels")
    out = F.layer_norm(x, x.shape[-1:], gain, bias, eps)
    return check_finite(out, "layer_norm")


def sigmoid(x: Tensor) -> Tensor:
    return check_finite(torch.sigmoid(x), "sigmoid")


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b)
    return check_finite(a + b, "add")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b)
    return check_finite(a * b, "mul")


def _broadcastable(a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ValueError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from exc


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    axis = _axis(tensors[0], axis)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        shape = list(t.shape)
        if len(shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(shape, ref)) if i != axis):
            raise ValueError(f"cannot concat {tuple(t.shape)} onto {tuple(ref)} along axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, label: str = "ffn") -> Tensor:
    """Two affine layers with a rectifier between them."""
    hidden = relu(linear(x, w1, b1, label=f"{label}.fc1"))
    return linear(hidden, w2, b2, label=f"{label}.fc2")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


# ---------------------------------------------------------------------------
# RNG + checkpoints


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": {
            name: {
                "shape": list(t.shape),
                "dtype": str(t.dtype).removeprefix("torch."),
                "data": t.detach().cpu().reshape(-1).double().tolist(),
            }
            for name, t in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    out = {}
    for name, entry in doc["tensors"].items():
        dtype = getattr(torch, entry["dtype"])
        data = torch.tensor(entry["data"], dtype=torch.float64).to(dtype)
        if data.numel() != math.prod(entry["shape"]):
            raise ValueError(f"tensor {name}: data length does not match shape")
        out[name] = data.reshape(entry["shape"])
    return out, doc.get("meta", {})


def finite_difference_grad(fn, x: Tensor, eps: float = 1e-5, index: Iterable[int] | None = None) -> Tensor:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (modified in place)."""
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * eps)
    return grad.view_as(x)
