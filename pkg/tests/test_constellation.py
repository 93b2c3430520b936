import numpy as np
import pytest

from nrxsim.constellation import SUPPORTED_ORDERS, build_constellation, quadrant_label


def test_qpsk_points_unit_energy():
    c = build_constellation(2)
    expected = {(1 + 1j), (1 - 1j), (-1 + 1j), (-1 - 1j)}
    got = {complex(np.round(p * np.sqrt(2), 9)) for p in c.points}
    assert got == expected
    assert abs(np.mean(np.abs(c.points) ** 2) - 1.0) < 1e-12


def test_16qam_normalization_is_sqrt10():
    c = build_constellation(4)
    scaled = c.points * np.sqrt(10)
    grid = {-3, -1, 1, 3}
    assert all(round(p.real, 9) in grid and round(p.imag, 9) in grid for p in scaled)
    # mean of the 16 squared magnitudes on the {+-1,+-3}^2 grid is 10
    assert abs(np.mean(np.abs(scaled) ** 2) - 10.0) < 1e-9


@pytest.mark.parametrize("order", SUPPORTED_ORDERS)
def test_unit_energy(order):
    c = build_constellation(order)
    assert abs(np.mean(np.abs(c.points) ** 2) - 1.0) < 1e-12


@pytest.mark.parametrize("order", SUPPORTED_ORDERS)
def test_gray_property_full_enumeration(order):
    """Points adjacent on the square grid differ in exactly one label bit."""
    c = build_constellation(order)
    side = 2 ** (order // 2)
    # reconstruct the integer grid coordinates
    scale = {2: np.sqrt(2), 4: np.sqrt(10), 6: np.sqrt(42)}[order]
    coords = np.round(c.points * scale).astype(np.complex128)
    lookup = {(int(p.real), int(p.imag)): lab for p, lab in zip(coords, c.labels)}
    amps = sorted({int(p.real) for p in coords})
    assert len(amps) == side
    for re in amps:
        for im in amps:
            lab = lookup[(re, im)]
            for re2, im2 in ((re + 2, im), (re, im + 2)):
                if (re2, im2) in lookup:
                    diff = int(np.sum(lab != lookup[(re2, im2)]))
                    assert diff == 1, f"non-Gray neighbours at ({re},{im})->({re2},{im2})"


@pytest.mark.parametrize("order", (4, 6))
def test_quadrant_bits_equal_qpsk_label(order):
    """Derived by enumeration: leading 2 bits are the QPSK label of the quadrant."""
    c = build_constellation(order)
    for p, lab in zip(c.points, c.labels):
        assert tuple(lab[:2]) == quadrant_label(p)


def test_64qam_next_recursion_level_matches_16qam():
    """Bits 2..3 of a 64-QAM label equal the 16-QAM label bits 2..3 of the
    co-located quadrant sub-square (label prefix property used by masking)."""
    c64 = build_constellation(6)
    c16 = build_constellation(4)
    s64 = c64.points * np.sqrt(42)
    s16 = c16.points * np.sqrt(10)
    for p, lab in zip(s64, c64.labels):
        # collapse the innermost bit: amplitudes {1,3}->1, {5,7}->3 per axis
        fold = lambda a: np.sign(a) * (1 if abs(a) < 4 else 3)
        target = complex(fold(p.real), fold(p.imag))
        match = np.flatnonzero(np.isclose(s16, target))
        assert match.size == 1
        assert tuple(c16.labels[match[0]][:4]) == tuple(lab[:4])


def test_map_bits_round_trip():
    rng = np.random.default_rng(0)
    for order in SUPPORTED_ORDERS:
        c = build_constellation(order)
        bits = (rng.random(size=(50, order)) < 0.5).astype(np.uint8)
        syms = c.map_bits(bits)
        np.testing.assert_array_equal(c.hard_bits(syms), bits)


def test_unsupported_order_raises():
    with pytest.raises(ValueError, match="unsupported"):
        build_constellation(3)
