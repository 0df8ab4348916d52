"""Dense-tensor reverse-mode automatic differentiation.

Define-by-run: every forward pass records its primitive ops on a fresh
Tape, and backpropagation replays the tape in exact reverse order.
Storage is float32; reductions (sums, norms, loss means) accumulate in
float64. There is no broadcasting beyond the bias-add patterns; any other
shape mismatch raises ShapeError.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive being applied."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array with an optional accumulated-gradient buffer.

    ``data`` is kept C-contiguous (flat row-major storage). ``grad`` is
    allocated lazily, has the same shape/dtype as ``data``, and accumulates
    additively across backward passes until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_needs_flow")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor '{name}': non-positive dimension in shape {arr.shape}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are always contiguous
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._needs_flow = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach_copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str = "") -> Tensor:
    """A trainable leaf tensor (float32, requires_grad=True)."""
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._needs_flow


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the primitives applied during one forward pass.

    Node order is the execution order, which is a topological order of the
    computation; backward walks it in exact reverse. With ``record=False``
    the tape runs forward-only (used for evaluation passes).
    """

    def __init__(self, record: bool = True):
        self.nodes: list[TapeNode] = []
        self.record = record

    def _emit(self, op, inputs, out_data, backward) -> Tensor:
        out = Tensor(out_data)
        if self.record:
            out._needs_flow = any(_needs(t) for t in inputs)
            self.nodes.append(TapeNode(op, tuple(inputs), out, backward))
        return out

    # -- elementwise -------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

        def bwd(g):
            return (g if _needs(a) else None, g if _needs(b) else None)

        return self._emit("add", (a, b), a.data + b.data, bwd)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")

        def bwd(g):
            return (g if _needs(a) else None, -g if _needs(b) else None)

        return self._emit("sub", (a, b), a.data - b.data, bwd)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")

        def bwd(g):
            return (g * b.data if _needs(a) else None, g * a.data if _needs(b) else None)

        return self._emit("mul", (a, b), a.data * b.data, bwd)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def bwd(g):
            return (g * c if _needs(a) else None,)

        return self._emit("scale", (a,), a.data * np.asarray(c, dtype=a.data.dtype), bwd)

    def relu(self, a: Tensor) -> Tensor:
        mask = a.data > 0

        def bwd(g):
            return (g * mask if _needs(a) else None,)

        return self._emit("relu", (a,), np.where(mask, a.data, 0), bwd)

    def sigmoid(self, a: Tensor) -> Tensor:
        s = 1.0 / (1.0 + np.exp(-a.data))

        def bwd(g):
            return (g * s * (1.0 - s) if _needs(a) else None,)

        return self._emit("sigmoid", (a,), s, bwd)

    def square(self, a: Tensor) -> Tensor:
        def bwd(g):
            return (g * (2.0 * a.data) if _needs(a) else None,)

        return self._emit("square", (a,), a.data * a.data, bwd)

    def absolute(self, a: Tensor) -> Tensor:
        # subgradient at 0 is 0
        def bwd(g):
            return (g * np.sign(a.data) if _needs(a) else None,)

        return self._emit("absolute", (a,), np.abs(a.data), bwd)

    # -- linear algebra ----------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

        def bwd(g):
            ga = g @ b.data.T if _needs(a) else None
            gb = a.data.T @ g if _needs(b) else None
            return (ga, gb)

        return self._emit("matmul", (a, b), a.data @ b.data, bwd)

    def bias_add(self, x: Tensor, b: Tensor) -> Tensor:
        """x + b where b is per-channel: x is (N,F)+b(F) or (N,C,H,W)+b(C)."""
        if b.data.ndim != 1:
            raise ShapeError(f"bias_add: bias must be 1-D, got {b.shape}")
        if x.data.ndim == 2:
            if x.shape[1] != b.shape[0]:
                raise ShapeError(f"bias_add: {x.shape} with bias {b.shape}")
            out = x.data + b.data[None, :]

            def bwd(g):
                gx = g if _needs(x) else None
                gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if _needs(b) else None
                return (gx, gb)

        elif x.data.ndim == 4:
            if x.shape[1] != b.shape[0]:
                raise ShapeError(f"bias_add: {x.shape} with bias {b.shape}")
            out = x.data + b.data[None, :, None, None]

            def bwd(g):
                gx = g if _needs(x) else None
                gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if _needs(b) else None
                return (gx, gb)

        else:
            raise ShapeError(f"bias_add: unsupported rank {x.data.ndim} for {x.shape}")
        return self._emit("bias_add", (x, b), out, bwd)

    # -- convolution and pooling -------------------------------------

    def conv2d(self, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError(f"conv2d: expects 4-D input and kernel, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        co, ci, kh, kw = w.shape
        if ci != c:
            raise ShapeError(f"conv2d: input channels {c} vs kernel channels {ci}")
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, wd)}")
        if stride < 1:
            raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        cols = _im2col(x.data, kh, kw, stride, padding)  # (N, C*kh*kw, ho*wo)
        w2 = w.data.reshape(co, -1)
        out = np.matmul(w2, cols).reshape(n, co, ho, wo)

        def bwd(g):
            g3 = g.reshape(n, co, ho * wo)
            gw = None
            if _needs(w):
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gx = None
            if _needs(x):
                gcols = np.matmul(w2.T, g3)
                gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
            return (gx, gw)

        return self._emit("conv2d", (x, w), out, bwd)

    def max_pool2d(self, x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"max_pool2d: expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        if h < kernel or w < kernel:
            raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {(h, w)}")
        ho = (h - kernel) // stride + 1
        wo = (w - kernel) // stride + 1
        cols = np.empty((n, c, kernel * kernel, ho, wo), dtype=x.data.dtype)
        for i in range(kernel):
            for j in range(kernel):
                cols[:, :, i * kernel + j] = x.data[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        idx = np.argmax(cols, axis=2)  # first max wins ties: deterministic
        out = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]

        def bwd(g):
            if not _needs(x):
                return (None,)
            gcols = np.zeros_like(cols)
            np.put_along_axis(gcols, idx[:, :, None], g[:, :, None], axis=2)
            gx = np.zeros_like(x.data)
            for i in range(kernel):
                for j in range(kernel):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i * kernel + j]
            return (gx,)

        return self._emit("max_pool2d", (x,), out, bwd)

    def global_avg_pool(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"global_avg_pool: expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype)

        def bwd(g):
            if not _needs(x):
                return (None,)
            gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype)
            return (gx,)

        return self._emit("global_avg_pool", (x,), out, bwd)

    def pad_channels(self, x: Tensor, out_channels: int) -> Tensor:
        """Zero-pad the channel axis of (N,C,H,W) up to out_channels."""
        if x.data.ndim != 4:
            raise ShapeError(f"pad_channels: expects 4-D input, got {x.shape}")
        n, c, h, w = x.shape
        if out_channels < c:
            raise ShapeError(f"pad_channels: cannot shrink {c} channels to {out_channels}")
        out = np.zeros((n, out_channels, h, w), dtype=x.data.dtype)
        out[:, :c] = x.data

        def bwd(g):
            return (np.ascontiguousarray(g[:, :c]) if _needs(x) else None,)

        return self._emit("pad_channels", (x,), out, bwd)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"reshape: {x.shape} to {shape} changes element count")

        def bwd(g):
            return (g.reshape(x.shape) if _needs(x) else None,)

        return self._emit("reshape", (x,), x.data.reshape(shape), bwd)

    # -- reductions and loss -----------------------------------------

    def sum_all(self, x: Tensor) -> Tensor:
        out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

        def bwd(g):
            return (np.broadcast_to(g, x.shape).astype(g.dtype) if _needs(x) else None,)

        return self._emit("sum_all", (x,), out, bwd)

    def mean_all(self, x: Tensor) -> Tensor:
        inv = 1.0 / x.size
        out = np.asarray(x.data.sum(dtype=np.float64) * inv, dtype=x.data.dtype)

        def bwd(g):
            return (np.broadcast_to(g * inv, x.shape).astype(g.dtype) if _needs(x) else None,)

        return self._emit("mean_all", (x,), out, bwd)

    def bce_with_logits(self, logits: Tensor, targets: Tensor) -> Tensor:
        """Mean binary cross-entropy over all entries, stable softplus form.

        loss = mean( max(x,0) - x*y + log1p(exp(-|x|)) ), which equals
        mean( -y*log(sigmoid(x)) - (1-y)*log(1-sigmoid(x)) ) for all finite x.
        """
        if logits.shape != targets.shape:
            raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
        y = targets.data
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("bce_with_logits: targets must be binary")
        z = logits.data.astype(np.float64)
        elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        out = np.asarray(elem.mean(), dtype=logits.data.dtype)
        inv = 1.0 / logits.size

        def bwd(g):
            if not _needs(logits):
                return (None, None)
            sig = 1.0 / (1.0 + np.exp(-z))
            gl = (g * (sig - y) * inv).astype(logits.data.dtype)
            return (gl, None)

        return self._emit("bce_with_logits", (logits, targets), out, bwd)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = xshape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        return np.ascontiguousarray(xpad[:, :, padding:padding + h, padding:padding + w])
    return xpad


def forward_eval(program: Callable, inputs: Sequence[Tensor] = ()) -> tuple[Tensor, Tape]:
    """Run a tape-building closure on a fresh tape; returns (output, tape)."""
    tape = Tape()
    out = program(tape, *inputs)
    return out, tape


def backpropagate(tape: Tape, output: Tensor) -> None:
    """Fill grad buffers of every requires_grad leaf reachable from output.

    Gradients accumulate additively across calls until ``zero_grad``.
    """
    if output.size != 1:
        raise ValueError(f"backpropagate: output must be scalar, got shape {output.shape}")
    # id -> [tensor, grad] ; keeping the tensor ref pins ids for the walk
    flows: dict[int, list] = {id(output): [output, np.ones_like(output.data)]}
    for node in reversed(tape.nodes):
        entry = flows.pop(id(node.output), None)
        if entry is None:
            continue
        if node.output.requires_grad:
            _accumulate_leaf(node.output, entry[1])
        for t, g in zip(node.inputs, node.backward(entry[1])):
            if g is None:
                continue
            slot = flows.get(id(t))
            if slot is None:
                flows[id(t)] = [t, g]
            else:
                slot[1] = slot[1] + g
    for t, g in flows.values():
        if t.requires_grad:
            _accumulate_leaf(t, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None or t.grad.dtype != t.data.dtype:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_failed: int
    passed: bool
    worst: tuple[str, int, float, float] | None = None  # (param, flat index, analytic, numeric)
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)


def check_gradients(
    program: Callable,
    params: Sequence[Tensor],
    inputs: Sequence[Tensor] = (),
    step: float = 1e-3,
    tolerance: float = 1e-3,
    max_per_param: int = 10_000,
    seed: int = 0,
    upcast: bool = True,
) -> GradCheckReport:
    """Central finite differences against backpropagated gradients.

    Checks every element of each parameter, or a seeded random subsample
    when a parameter exceeds ``max_per_param`` elements. ``upcast`` runs the
    check with float64 parameter copies (storage elsewhere stays float32);
    the relative error is |fd - an| / max(|fd|, |an|, 1e-6).
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be > 0")
    if tolerance <= 0:
        raise ValueError("check_gradients: tolerance must be > 0")

    saved = [(p.data, p.grad) for p in params]
    try:
        if upcast:
            for p in params:
                p.data = p.data.astype(np.float64)
        for p in params:
            p.grad = None
            p.zero_grad()
        out, tape = forward_eval(program, inputs)
        backpropagate(tape, out)
        analytic = [p.grad.reshape(-1).copy() for p in params]

        def loss_value() -> float:
            o, _ = forward_eval(program, inputs)
            return float(o.data)

        rng = np.random.default_rng(seed)
        max_rel = 0.0
        worst = None
        n_checked = 0
        failures = []
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            if p.size > max_per_param:
                idxs = np.sort(rng.choice(p.size, size=max_per_param, replace=False))
            else:
                idxs = np.arange(p.size)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                f_plus = loss_value()
                flat[i] = orig - step
                f_minus = loss_value()
                flat[i] = orig
                n_checked += 1
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    failures.append((p.name, int(i), float(an[i]), float("nan"), float("inf")))
                    max_rel = float("inf")
                    worst = (p.name, int(i), float(an[i]), float("nan"))
                    continue
                fd = (f_plus - f_minus) / (2.0 * step)
                rel = abs(fd - an[i]) / max(abs(fd), abs(an[i]), 1e-6)
                if rel > max_rel:
                    max_rel = rel
                    worst = (p.name, int(i), float(an[i]), float(fd))
                if rel > tolerance:
                    failures.append((p.name, int(i), float(an[i]), float(fd), float(rel)))
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad

    return GradCheckReport(
        max_rel_error=float(max_rel),
        n_checked=n_checked,
        n_failed=len(failures),
        passed=(len(failures) == 0 and max_rel <= tolerance),
        worst=worst,
        failures=failures,
    )


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
