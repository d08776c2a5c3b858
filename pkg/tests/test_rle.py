import numpy as np
import pytest

from pvseg.rle import decode_mask, encode_mask


def test_listed_examples():
    assert np.array_equal(
        decode_mask({"h": 1, "w": 5, "counts": [2, 2, 1]}), np.array([[0, 0, 1, 1, 0]])
    )
    assert np.array_equal(decode_mask({"h": 2, "w": 2, "counts": [0, 4]}), np.ones((2, 2)))
    assert np.array_equal(decode_mask({"h": 1, "w": 3, "counts": [3]}), np.zeros((1, 3)))


def test_encode_starts_with_zero_run():
    payload = encode_mask(np.array([[1, 1], [0, 0]], dtype=np.uint8))
    assert payload == {"h": 2, "w": 2, "counts": [0, 2, 2]}
    payload = encode_mask(np.zeros((3, 2), dtype=np.uint8))
    assert payload == {"h": 3, "w": 2, "counts": [6]}


def test_round_trip_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        mask = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        assert np.array_equal(decode_mask(encode_mask(mask)), mask)


def test_count_sum_mismatch_rejected():
    with pytest.raises(ValueError, match="count sum"):
        decode_mask({"h": 2, "w": 2, "counts": [1, 2]})
