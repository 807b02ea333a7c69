import numpy as np
import pytest

from nnsplit.rng import SplitMix64

# Reference outputs of the SplitMix64 generator (public test vectors).
SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
SEED1234567 = [6457827717110365317, 3203168211198807973, 9817491932198370423]


@pytest.mark.parametrize("seed,expected", [(0, SEED0), (1234567, SEED1234567)])
def test_reference_vectors(seed, expected):
    rng = SplitMix64(seed)
    assert [rng.next_u64() for _ in expected] == expected


def test_vectorised_matches_scalar():
    a, b = SplitMix64(42), SplitMix64(42)
    bulk = a.u64_array(1000)
    assert [int(v) for v in bulk] == [b.next_u64() for _ in range(1000)]
    assert a.state == b.state


def test_uniform_mapping():
    rng = SplitMix64(0)
    u = rng.uniform(1)[0]
    assert u == (SEED0[0] >> 11) * 2.0**-53


def test_weights_range_and_shape():
    w = SplitMix64(7).weights((3, 5, 2))
    assert w.shape == (3, 5, 2)
    assert np.all(w >= -0.1) and np.all(w < 0.1)


def test_weights_reproducible():
    assert np.array_equal(SplitMix64(9).weights((64,)), SplitMix64(9).weights((64,)))
    assert not np.array_equal(SplitMix64(9).weights((64,)), SplitMix64(10).weights((64,)))
