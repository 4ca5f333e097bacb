"""Top-K magnitude masking, the sparsify-then-quantize composite, and
sparsity measurement.

Masking is per token row along the last axis: each row keeps its
``max(1, round(k_fraction * n))`` largest-magnitude entries, ties broken by
lowest index. The composite quantizes first (scale from the full row) and
masks after, so dropped entries are exact zeros while kept entries see the
same scale they would without masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantcore import Granularity, QuantScheme, _as_checked_array, fake_quant


@dataclass(frozen=True)
class TopKMask:
    """Boolean keep-mask plus the bookkeeping that defines it."""

    mask: np.ndarray
    k_fraction: float
    kept_counts: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    def packed(self) -> np.ndarray:
        """Bit-packed rows for debug dumps."""
        return np.packbits(self.mask, axis=-1)


def kept_count(width: int, k_fraction: float) -> int:
    """Entries kept per row: max(1, round(k * n)), half rounding up."""
    if not 0.0 < k_fraction <= 1.0:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    if width < 1:
        raise ValueError("rows must have at least one entry")
    return max(1, int(np.trunc(k_fraction * width + 0.5)))


def topk_mask(x, k_fraction: float) -> TopKMask:
    """Keep the largest-magnitude entries of each row along the last axis."""
    x = _as_checked_array(x)
    kept = kept_count(x.shape[-1], k_fraction)
    mask = np.zeros(x.shape, dtype=bool)
    if kept >= x.shape[-1]:
        mask[...] = True
    else:
        # stable sort on negated magnitudes puts the lowest index first
        # among ties, which fixes the tie-break deterministically
        order = np.argsort(-np.abs(x), axis=-1, kind="stable")
        np.put_along_axis(mask, order[..., :kept], True, axis=-1)
    counts = np.full(x.shape[:-1], kept, dtype=np.int64)
    return TopKMask(mask=mask, k_fraction=float(k_fraction), kept_counts=counts)


def sparsify_then_quantize(
    x,
    k_fraction: float,
    granularity: Granularity = Granularity.PER_TOKEN,
) -> np.ndarray:
    """Int8 fake-quantize the full tensor, then zero the dropped entries.

    The scale comes from the unmasked input, so masking never changes what
    the kept entries quantize to.
    """
    x = _as_checked_array(x)
    mask = topk_mask(x, k_fraction).mask
    return fake_quant(x, QuantScheme.int8(granularity)) * mask


def measure_sparsity(x) -> float:
    """Fraction of exactly-zero entries."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot measure sparsity of an empty tensor")
    return float(np.mean(x == 0.0))


def gate_active_channels(g) -> list[np.ndarray]:
    """Column indices with nonzero gate activation, one array per token row.

    Rows are the flattened leading dimensions; the gate activation is
    nonnegative by construction, so nonzero means the pre-activation was
    positive.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 0:
        raise ValueError("gate activations must have at least one axis")
    flat = g.reshape(-1, g.shape[-1])
    return [np.flatnonzero(row) for row in flat]
