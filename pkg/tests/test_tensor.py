import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqm.tensor import BinaryReader, BinaryWriter, DimensionError, Rng, derive_seed, gaussian_fill, matmul


def test_rng_reproducible_and_children_independent():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal(100), b.normal(100))
    parent = Rng(7)
    c1 = parent.child("x").uniform(5)
    assert np.array_equal(parent.child("x").uniform(5), c1)
    assert not np.array_equal(parent.child("y").uniform(5), c1)


def test_child_does_not_advance_parent():
    r1, r2 = Rng(3), Rng(3)
    r1.child("anything")
    assert np.array_equal(r1.uniform(4), r2.uniform(4))


def test_normal_moments():
    z = Rng(11).normal(200_000, mean=2.0, std=3.0)
    assert abs(z.mean() - 2.0) < 0.03
    assert abs(z.std() - 3.0) < 0.03
    assert z.shape == (200_000,)
    assert Rng(1).normal((3, 5)).shape == (3, 5)
    assert Rng(1).normal(7).shape == (7,)


def test_seed_validation():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_derive_seed_stable():
    assert derive_seed(1, "base") == derive_seed(1, "base")
    assert derive_seed(1, "base") != derive_seed(2, "base")
    assert 0 <= derive_seed("x") < 2**64


def test_matmul_matches_numpy_and_checks_shapes():
    rng = Rng(0)
    a, b = rng.normal((4, 6)).astype(np.float32), rng.normal((6, 3)).astype(np.float32)
    out = matmul(a, b)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, a.astype(np.float64) @ b.astype(np.float64), rtol=1e-6)
    with pytest.raises(DimensionError):
        matmul(a, a)
    with pytest.raises(DimensionError):
        matmul(a[0], b)


def test_matmul_rejects_overflow():
    big = np.full((2, 2), 3e38, np.float32)
    with pytest.raises(ValueError):
        matmul(big, big)


def test_gaussian_fill():
    m = gaussian_fill(np.zeros((300, 300), np.float32), 1.0, 0.5, Rng(5))
    assert m.dtype == np.float32
    assert abs(m.mean() - 1.0) < 0.01 and abs(m.std() - 0.5) < 0.01
    with pytest.raises(ValueError):
        gaussian_fill(m, 0.0, -1.0, Rng(5))


@given(
    st.integers(0, 255),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    st.text(max_size=20),
    st.lists(st.floats(width=32, allow_nan=False), max_size=10),
)
def test_binary_roundtrip(u8, u32, u64, text, floats):
    w = BinaryWriter()
    w.u8(u8)
    w.u32(u32)
    w.u64(u64)
    w.string(text)
    w.f32_array(np.array(floats, np.float32))
    r = BinaryReader(w.getvalue())
    assert (r.u8(), r.u32(), r.u64(), r.string()) == (u8, u32, u64, text)
    np.testing.assert_array_equal(r.f32_array(len(floats)), np.array(floats, np.float32))
    assert r.at_end()


def test_reader_short_read():
    r = BinaryReader(b"\x01\x02")
    with pytest.raises(EOFError):
        r.u32()


def test_little_endian_layout():
    w = BinaryWriter()
    w.u32(1)
    w.f32(1.0)
    assert w.getvalue() == b"\x01\x00\x00\x00\x00\x00\x80\x3f"
