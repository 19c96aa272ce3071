# test/test_sparsify.py

import itertools

import numpy as np
import pytest

from tools.errors import InvalidArgumentError
from tools.params import partition_packs
from tools.sparsify import (
    SparseMask,
    SparseUpdate,
    decode_mask,
    decode_values,
    encode_mask,
    encode_values,
    pack_scores,
    payload_size,
    sparsify_update,
    topk_count,
    topk_mask,
)


class TestPackScores:
    """Test suite for per-pack delta norms."""

    def test_three_four_five(self):
        """Should score [3, 4, 0, 0] with s=2 as [5, 0]."""
        part = partition_packs(4, 2)
        assert pack_scores(np.array([3.0, 4.0, 0.0, 0.0]), part).tolist() == [5.0, 0.0]

    def test_zero_delta(self):
        """Should give all-zero scores for a zero delta."""
        assert not pack_scores(np.zeros(10), partition_packs(10, 4)).any()

    def test_matches_per_pack_resummation(self):
        """Should match a direct per-pack L2 computation."""
        # Arrange
        rng = np.random.default_rng(3)
        part = partition_packs(16, 4)
        delta = rng.normal(size=16)

        # Act
        scores = pack_scores(delta, part)

        # Assert
        expected = [np.sqrt(sum(delta[j] ** 2 for j in range(a, b))) for a, b in part.ranges()]
        np.testing.assert_allclose(scores, expected, rtol=1e-12)


class TestTopkMask:
    """Test suite for top-k pack selection."""

    def test_selects_highest_scores(self):
        """Should pick packs {1, 2} from [1, 5, 3, 2] at ratio 0.5."""
        assert topk_mask([1, 5, 3, 2], 0.5).indices().tolist() == [1, 2]

    def test_full_ratio_selects_everything(self):
        """Should return a full mask at ratio 1.0."""
        assert topk_mask([1, 5, 3, 2], 1.0) == SparseMask.full(4)

    def test_ties_go_to_lower_index(self):
        """Should break ties by ascending pack index."""
        assert topk_mask([2, 2, 2, 2], 0.5).indices().tolist() == [0, 1]

    def test_selects_at_least_one_pack(self):
        """Should keep k >= 1 for tiny ratios."""
        assert topk_count(10, 0.01) == 1

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_rejects_bad_ratio(self, ratio):
        """Should reject ratios outside (0, 1]."""
        with pytest.raises(InvalidArgumentError):
            topk_mask([1, 2], ratio)

    def test_matches_exhaustive_subset_search(self):
        """Should reach the best total score over every k-subset on 200 random score vectors."""
        rng = np.random.default_rng(21)
        for _ in range(200):
            # Arrange
            P = int(rng.integers(1, 13))
            ratio = float(rng.uniform(0.05, 1.0))
            scores = rng.random(P)
            k = topk_count(P, ratio)

            # Act
            chosen = topk_mask(scores, ratio).indices()

            # Assert
            best = max(sum(scores[list(c)]) for c in itertools.combinations(range(P), k))
            assert len(chosen) == k
            assert sum(scores[chosen]) == pytest.approx(best, rel=1e-12)


class TestSparsifyUpdate:
    """Test suite for building a client's submission."""

    def test_unchanged_model_sends_first_packs(self):
        """Should select the first k packs and send the global's values when nothing moved."""
        # Arrange
        part = partition_packs(8, 2)
        prev = np.arange(8.0)

        # Act
        update = sparsify_update(prev.copy(), prev, part, 0.5, client_id=3, dataset_size=10)

        # Assert
        assert update.mask.indices().tolist() == [0, 1]
        assert update.values.tolist() == [0.0, 1.0, 2.0, 3.0]

    def test_single_changed_pack_is_always_selected(self):
        """Should select the only pack that moved at any ratio."""
        # Arrange
        part = partition_packs(8, 2)
        prev = np.zeros(8)
        local = prev.copy()
        local[6] = 0.5

        # Act
        update = sparsify_update(local, prev, part, 0.1, client_id=0, dataset_size=1)

        # Assert
        assert update.mask.indices().tolist() == [3]
        assert update.values.tolist() == [0.5, 0.0]

    def test_matches_full_sort(self):
        """Should pick the same packs as a brute-force sort of delta norms."""
        # Arrange
        rng = np.random.default_rng(11)
        part = partition_packs(32, 4)
        prev = rng.normal(size=32)
        local = prev + rng.normal(size=32)

        # Act
        update = sparsify_update(local, prev, part, 0.5, client_id=0, dataset_size=1)

        # Assert
        norms = [np.linalg.norm((local - prev)[a:b]) for a, b in part.ranges()]
        expected = sorted(sorted(range(8), key=lambda p: -norms[p])[:4])
        assert update.mask.indices().tolist() == expected

    def test_rejects_non_finite_values(self):
        """Should refuse NaN payloads."""
        with pytest.raises(InvalidArgumentError):
            SparseUpdate(0, SparseMask.full(1), np.array([np.nan]), 1)


class TestMaskCodec:
    """Test suite for the 1-bit-per-pack wire format."""

    def test_first_and_last_bit_of_a_byte(self):
        """Should encode packs {0, 7} of 8 as 0x81."""
        assert encode_mask(SparseMask.from_indices([0, 7], 8)) == bytes([0x81])

    def test_second_byte(self):
        """Should encode pack 9 of 10 as [0x00, 0x02]."""
        assert encode_mask(SparseMask.from_indices([9], 10)) == bytes([0x00, 0x02])

    def test_random_masks_round_trip(self):
        """Should decode 1000 random masks back exactly."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            # Arrange
            P = int(rng.integers(1, 258))
            mask = SparseMask(rng.random(P) < 0.5)

            # Act
            data = encode_mask(mask)

            # Assert
            assert len(data) == -(-P // 8)
            assert decode_mask(data, P) == mask

    def test_rejects_short_input(self):
        """Should reject a byte string shorter than ceil(P/8)."""
        with pytest.raises(InvalidArgumentError):
            decode_mask(bytes([0x01]), 9)

    def test_rejects_trailing_bytes(self):
        """Should reject extra bytes after the mask."""
        with pytest.raises(InvalidArgumentError):
            decode_mask(bytes([0x01, 0x00]), 8)

    def test_rejects_nonzero_pad_bits(self):
        """Should reject set bits beyond pack_count."""
        with pytest.raises(InvalidArgumentError):
            decode_mask(bytes([0x80]), 7)


class TestValueCodec:

    def test_short_last_pack_is_padded_and_trimmed(self):
        """Should pad the short pack on the wire and drop the padding on decode."""
        # Arrange
        part = partition_packs(5, 2)
        mask = SparseMask.from_indices([0, 2], 3)
        update = SparseUpdate(0, mask, np.array([1.0, 2.0, 5.0]), 1)

        # Act
        data = encode_values(update, part)

        # Assert
        assert len(data) == 2 * 2 * 8
        assert decode_values(data, mask, part).tolist() == [1.0, 2.0, 5.0]

    def test_payload_size(self):
        """Should count ceil(P/8) mask bytes plus k*s*8 value bytes."""
        # Arrange
        part = partition_packs(80, 8)
        update = SparseUpdate(0, SparseMask.from_indices([0, 1, 2], 10), np.zeros(24), 1)

        # Act / Assert
        assert payload_size(10, 3, 8) == 2 + 3 * 8 * 8
        assert update.payload_bytes(part) == payload_size(10, 3, 8)
