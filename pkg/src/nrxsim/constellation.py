"""Gray-labeled square QAM constellations with recursive bit labels.

Labels follow the 5G mapping convention: even bit positions steer the real
axis, odd positions the imaginary axis, and within each axis the leading bit
selects the half-plane while later bits recursively refine the amplitude.
Consequently the first two bits of any point are exactly the QPSK label of
its quadrant, which is what LLR masking relies on.

Bit values map to coordinates so that bit=0 selects the positive half-axis;
with LLRs as logits (positive LLR favours bit 1), the exact QPSK APP LLR is
then -2*sqrt(2)*Re(y)/N0 for bit 0 and -2*sqrt(2)*Im(y)/N0 for bit 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_ORDERS = (2, 4, 6)


@dataclass(frozen=True)
class Constellation:
    """Unit-energy square QAM with Gray, quadrant-recursive labels.

    points[i] is the symbol whose label is the m-bit big-endian expansion of
    i (bit 0 is the most significant label position).
    """

    order: int
    points: np.ndarray   # complex128, (2**order,)
    labels: np.ndarray   # uint8, (2**order, order)

    def __post_init__(self):
        assert self.points.shape == (2 ** self.order,)
        energy = np.mean(np.abs(self.points) ** 2)
        assert abs(energy - 1.0) < 1e-12, f"constellation energy {energy} != 1"

    @property
    def bits_per_symbol(self) -> int:
        return self.order

    def map_bits(self, bits: np.ndarray) -> np.ndarray:
        """Map (..., m) bits to complex symbols."""
        if bits.shape[-1] != self.order:
            raise ValueError(f"expected {self.order} bits per symbol, got {bits.shape[-1]}")
        weights = 1 << np.arange(self.order - 1, -1, -1)
        idx = (bits.astype(np.int64) @ weights)
        return self.points[idx]

    def hard_bits(self, symbols: np.ndarray) -> np.ndarray:
        """Nearest-point hard decision, (...,) complex -> (..., m) bits."""
        d2 = np.abs(symbols[..., None] - self.points) ** 2
        return self.labels[np.argmin(d2, axis=-1)]


def _axis_amplitude(bits: np.ndarray) -> np.ndarray:
    """Recursive 1-D amplitude for the bits steering one axis.

    One bit: 1-2b. More bits: (1-2b0) * (2^(n-1) - amp(rest)).
    """
    n = bits.shape[-1]
    amp = 1.0 - 2.0 * bits[..., -1].astype(np.float64)
    for level in range(1, n):
        b = bits[..., n - 1 - level].astype(np.float64)
        amp = (1.0 - 2.0 * b) * (2.0 ** level - amp)
    return amp


def build_constellation(order: int) -> Constellation:
    """Build the unit-energy Gray square QAM for order m in {2, 4, 6}."""
    if order not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported modulation order {order}; expected one of {SUPPORTED_ORDERS}")
    count = 2 ** order
    idx = np.arange(count)
    labels = ((idx[:, None] >> np.arange(order - 1, -1, -1)) & 1).astype(np.uint8)
    re = _axis_amplitude(labels[:, 0::2])
    im = _axis_amplitude(labels[:, 1::2])
    points = re + 1j * im
    points /= np.sqrt(np.mean(np.abs(points) ** 2))
    return Constellation(order=order, points=points, labels=labels)


def quadrant_label(point: complex) -> tuple[int, int]:
    """QPSK label of the quadrant a point falls in (bit=0: positive axis)."""
    return (int(point.real < 0), int(point.imag < 0))
