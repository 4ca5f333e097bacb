"""Reverse-mode automatic differentiation on numpy arrays.

A ``Var`` wraps a float64 array and remembers how it was produced; calling
``backward`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every upstream ``Var``.
Quantizers and the top-K mask are non-differentiable, so their ops register
straight-through adjoints: the quantizer backward returns the upstream
gradient unchanged (bit-equal), and the mask either gates the gradient or is
bypassed, controlled per call site.

Inside ``no_grad()`` ops compute values only and record nothing.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .quantcore import QuantScheme, SchemeKind, dequantize, fake_quant, quantize
from .sparsify import measure_sparsity, topk_mask

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable trace recording for the enclosed forward computations."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MissingTraceError(RuntimeError):
    """backward() was called on a value with no recorded forward trace."""


class Var:
    """Node in the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_traced")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Var, ...] = tuple(parents) if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self._traced = _GRAD_ENABLED

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every upstream Var."""
        if self.value.ndim != 0:
            raise ValueError("backward() requires a scalar loss")
        if not self._traced:
            raise MissingTraceError(
                "no forward trace was recorded (the loss was computed under no_grad)"
            )
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def add_const(a: Var, c) -> Var:
    a = as_var(a)
    return Var(a.value + np.asarray(c, dtype=np.float64), (a,), lambda g: (g,))


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return Var(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    """Batched matrix product; both operands must share their batch dims."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {av.shape} vs {bv.shape}")

    def backward(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return Var(av @ bv, (a, b), backward)


def linear(x: Var, w: Var) -> Var:
    """x @ w.T for a 2-D weight, gradients reduced over all leading dims."""
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"linear shape mismatch: {xv.shape} @ {wv.shape}.T")

    def backward(g):
        g2 = g.reshape(-1, wv.shape[0])
        return g @ wv, g2.T @ xv.reshape(-1, wv.shape[1])

    return Var(xv @ wv.T, (x, w), backward)


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    a = as_var(a)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return Var(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def split_last(a: Var, sizes: tuple[int, ...]) -> list[Var]:
    """Split along the last axis into consecutive chunks of the given sizes."""
    a = as_var(a)
    if sum(sizes) != a.value.shape[-1]:
        raise ValueError(f"split sizes {sizes} do not cover last dim {a.value.shape[-1]}")
    outs = []
    start = 0
    for size in sizes:
        sl = slice(start, start + size)

        def backward(g, sl=sl):
            full = np.zeros_like(a.value)
            full[..., sl] = g
            return (full,)

        outs.append(Var(a.value[..., sl], (a,), backward))
        start += size
    return outs


def embedding(table: Var, tokens: np.ndarray) -> Var:
    table = as_var(table)
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= table.value.shape[0]:
        raise ValueError("token id outside the embedding table")

    def backward(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, tokens.reshape(-1), g.reshape(-1, table.value.shape[1]))
        return (dt,)

    return Var(table.value[tokens], (table,), backward)


def relu2(a: Var) -> Var:
    """ReLU squared; adjoint is 2*ReLU(x)."""
    a = as_var(a)
    r = np.maximum(a.value, 0.0)
    return Var(r * r, (a,), lambda g: (g * 2.0 * r,))


def silu(a: Var) -> Var:
    a = as_var(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * s
    return Var(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def rmsnorm(x: Var, gain: Var, eps: float = 1e-6) -> Var:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    x, gain = as_var(x), as_var(gain)
    xv = x.value
    n = xv.shape[-1]
    r = np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    xhat = xv / r
    gv = gain.value

    def backward(g):
        gg = g * gv
        dx = gg / r - xv * np.sum(gg * xv, axis=-1, keepdims=True) / (n * r**3)
        dgain = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        return dx, dgain

    return Var(xhat * gv, (x, gain), backward)


def softmax(a: Var, axis: int = -1) -> Var:
    a = as_var(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)
    return Var(p, (a,), lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),))


def _rope_angles(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-2.0 * np.arange(half) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope(a: Var, positions: np.ndarray, base: float = 10000.0) -> Var:
    """Rotate interleaved pairs of the last axis by pos * base^(-2i/d).

    Expects (..., T, head_dim) with an even head_dim; positions has length T.
    """
    a = as_var(a)
    d = a.value.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"rope requires an even head_dim, got {d}")
    cos, sin = _rope_angles(positions, d, base)

    def rotate(v, cos, sin):
        even, odd = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = even * cos - odd * sin
        out[..., 1::2] = even * sin + odd * cos
        return out

    # the adjoint of a rotation is the rotation by the opposite angle
    return Var(rotate(a.value, cos, sin), (a,), lambda g: (rotate(g, cos, -sin),))


def fake_quant_ste(a: Var, transform) -> Var:
    """Apply a non-differentiable value transform with an identity adjoint.

    ``transform`` maps ndarray -> ndarray of the same shape (any fake-quant
    composition). The backward returns the upstream gradient object itself,
    so the pass-through is bit-equal by construction.
    """
    a = as_var(a)
    out = np.asarray(transform(a.value), dtype=np.float64)
    if out.shape != a.value.shape:
        raise ValueError("fake-quant transform changed the shape")
    return Var(out, (a,), lambda g: (g,))


def _input_codes(xv: np.ndarray, scheme: QuantScheme, k_fraction: float | None):
    """Quantize a bitlinear input, returning integer-valued codes, the
    per-row multiplier that maps code-products back to values, the
    dequantized operand, and the keep-mask (all-ones when k is off).

    The codes are exact small integers in float64, so code-level matmuls are
    order-free; fp4 grid values live on a half-integer lattice and are
    doubled into integers with the 1/2 folded into the multiplier.
    """
    q = quantize(xv, scheme)
    codes = q.codes.astype(np.float64)
    scales = np.asarray(q.scales, dtype=np.float64)[..., None]
    if scheme.kind is SchemeKind.INT8_ABSMAX:
        factor = scales / 127.0
    elif scheme.kind is SchemeKind.INT4_ABSMEAN:
        factor = scales / np.sqrt(7.0)
    elif scheme.kind is SchemeKind.FP4_MINMAX:
        from .quantcore import E2M1_GRID

        codes = np.sign(codes) * (2.0 * E2M1_GRID[np.abs(q.codes).astype(np.int64)])
        factor = scales / 2.0
    else:
        raise ValueError(f"unsupported bitlinear input scheme {scheme.kind}")
    deq = dequantize(q)
    if k_fraction is not None:
        mask = topk_mask(xv, k_fraction).mask
        codes = codes * mask
        deq = deq * mask
    else:
        mask = None
    return codes, factor, deq, mask


def input_view(xv, scheme: QuantScheme | None, k_fraction: float | None = None) -> np.ndarray:
    """The exact tensor a bitlinear matmul consumes for a given input
    binding: quantized and masked as configured, or the input itself when
    the binding is identity."""
    xv = np.asarray(xv, dtype=np.float64)
    if scheme is None and k_fraction is None:
        return xv
    if scheme is None:
        raise ValueError("top-K masking requires a quantizing input scheme")
    _, _, deq, _ = _input_codes(xv, scheme, k_fraction)
    return deq


def bitlinear(
    x: Var,
    w: Var,
    input_scheme: QuantScheme | None,
    k_fraction: float | None = None,
    weight_scheme: QuantScheme | None = None,
    mask_in_adjoint: bool = True,
    stats: dict | None = None,
    stats_key: str | None = None,
) -> Var:
    """Fused quantized projection y = fq(x) @ fq_w(w).T with STE adjoints.

    When both operands are quantized the product is computed over integer
    codes and rescaled afterwards, which makes the result independent of
    summation order (every partial sum is an exact small integer), so a
    column-subset evaluation is bit-identical to the dense one.

    STE: dx is the upstream gradient times the dequantized weight (gated by
    the top-K mask unless ``mask_in_adjoint`` is off); dw is the upstream
    gradient times the dequantized, masked input.
    """
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"bitlinear shape mismatch: {xv.shape} @ {wv.shape}.T")

    if weight_scheme is None:
        fqw = wv
        wcodes = None
    else:
        qw = quantize(wv, weight_scheme)
        wcodes = qw.codes.astype(np.float64)
        walpha = float(qw.scales)
        fqw = dequantize(qw)

    if input_scheme is None and k_fraction is None:
        fqx = xv
        y = xv @ fqw.T
    else:
        if input_scheme is None:
            raise ValueError("top-K masking requires a quantizing input scheme")
        codes, factor, fqx, mask = _input_codes(xv, input_scheme, k_fraction)
        if wcodes is not None:
            y = (codes @ wcodes.T) * factor * walpha
        else:
            y = fqx @ fqw.T
    if stats is not None and stats_key is not None:
        stats[stats_key] = measure_sparsity(fqx)
        sink = stats.get("capture")
        if sink is not None and stats_key in sink:
            sink[stats_key].append(xv.reshape(-1, xv.shape[-1]).copy())

    def backward(g):
        dx = g @ fqw
        if k_fraction is not None and mask_in_adjoint:
            dx = dx * mask
        g2 = g.reshape(-1, wv.shape[0])
        dw = g2.T @ fqx.reshape(-1, wv.shape[1])
        return dx, dw

    return Var(y, (x, w), backward)


def vsum(a: Var) -> Var:
    a = as_var(a)
    return Var(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean negative log-likelihood over all positions."""
    logits = as_var(logits)
    lv = logits.value
    targets = np.asarray(targets)
    if targets.shape != lv.shape[:-1]:
        raise ValueError(f"target shape {targets.shape} does not match logits {lv.shape}")
    shifted = lv - np.max(lv, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - logz
    flat_idx = targets.reshape(-1)
    picked = logp.reshape(-1, lv.shape[-1])[np.arange(flat_idx.size), flat_idx]
    loss = -np.mean(picked)

    def backward(g):
        p = np.exp(logp).reshape(-1, lv.shape[-1]).copy()
        p[np.arange(flat_idx.size), flat_idx] -= 1.0
        return ((g / flat_idx.size) * p.reshape(lv.shape),)

    return Var(loss, (logits,), backward)
