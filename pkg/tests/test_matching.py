import numpy as np
import pytest

from pairx.errors import ContractError
from pairx.lrp import RelevanceMap
from pairx.matching import MatchSet, Match, decompose, mutual_match, score_matches, top_n

from oracles import mutual_match_loop


def _kd_set(descriptors, layer=0):
    """Wrap raw descriptor rows in a degenerate 1-row grid for matcher tests."""
    desc = np.asarray(descriptors, dtype=np.float32)
    if desc.ndim == 1:
        desc = desc[:, None]
    n = desc.shape[0]
    from pairx.matching import KeypointDescriptorSet

    return KeypointDescriptorSet(
        layer_index=layer,
        keypoints=tuple((i, 0) for i in range(n)),
        descriptors=desc,
        grid_shape=(1, n),
    )


class TestDecompose:
    def test_2x2x2(self):
        act = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        kd = decompose(act, layer_index=3)
        assert len(kd.keypoints) == 4
        assert kd.descriptors.shape == (4, 2)
        assert kd.layer_index == 3

    def test_degenerate_single_cell(self):
        act = np.arange(5, dtype=np.float32).reshape(5, 1, 1)
        kd = decompose(act)
        assert kd.keypoints == ((0, 0),)
        np.testing.assert_array_equal(kd.descriptors[0], act[:, 0, 0])

    def test_column_row_convention(self, rng):
        act = rng.standard_normal((8, 5, 7)).astype(np.float32)
        kd = decompose(act)
        h, w = act.shape[1:]
        idx = 3 * w + 2  # keypoint (i=2, j=3), row-major grid order
        assert kd.keypoints[idx] == (2, 3)
        np.testing.assert_array_equal(kd.descriptors[idx], act[:, 3, 2])

    def test_full_grid(self, rng):
        act = rng.standard_normal((3, 4, 6)).astype(np.float32)
        kd = decompose(act)
        assert len(kd.keypoints) == 24
        assert len(set(kd.keypoints)) == 24


class TestMutualMatch:
    def test_identical_sets_identity_matching(self, rng):
        desc = rng.standard_normal((10, 4)).astype(np.float32)
        a, b = _kd_set(desc), _kd_set(desc)
        ms = mutual_match(a, b)
        assert len(ms) == 10
        for m in ms.matches:
            assert m.kp_a == m.kp_b
            assert m.descriptor_distance == 0.0

    def test_hand_picked_one_dimensional(self):
        a = _kd_set([0.0, 1.0])
        b = _kd_set([0.1, 0.9, 5.0])
        ms = mutual_match(a, b)
        got = {(m.kp_a[0], m.kp_b[0]) for m in ms.matches}
        assert got == {(0, 0), (1, 1)}

    def test_equals_brute_force_oracle(self, rng):
        for trial in range(10):
            da = rng.standard_normal((30, 6)).astype(np.float32)
            db = rng.standard_normal((25, 6)).astype(np.float32)
            ms = mutual_match(_kd_set(da), _kd_set(db))
            got = {(m.kp_a[0], m.kp_b[0]) for m in ms.matches}
            want = {(ia, ib) for ia, ib, _ in mutual_match_loop(da, db)}
            assert got == want

    def test_symmetry(self, rng):
        da = rng.standard_normal((20, 5)).astype(np.float32)
        db = rng.standard_normal((22, 5)).astype(np.float32)
        fwd = {(m.kp_a, m.kp_b) for m in mutual_match(_kd_set(da), _kd_set(db)).matches}
        rev = {(m.kp_b, m.kp_a) for m in mutual_match(_kd_set(db), _kd_set(da)).matches}
        assert fwd == rev

    def test_one_to_one(self, rng):
        da = rng.standard_normal((40, 3)).astype(np.float32)
        db = rng.standard_normal((40, 3)).astype(np.float32)
        ms = mutual_match(_kd_set(da), _kd_set(db))
        kps_a = [m.kp_a for m in ms.matches]
        kps_b = [m.kp_b for m in ms.matches]
        assert len(kps_a) == len(set(kps_a))
        assert len(kps_b) == len(set(kps_b))

    def test_descriptor_length_mismatch_rejected(self, rng):
        a = _kd_set(rng.standard_normal((4, 3)).astype(np.float32))
        b = _kd_set(rng.standard_normal((4, 5)).astype(np.float32))
        with pytest.raises(ContractError, match="length mismatch"):
            mutual_match(a, b)


def _rel_map(values, layer=0):
    return RelevanceMap(layer_index=layer, values=np.asarray(values, dtype=np.float32))


class TestScoreMatches:
    def test_product_of_channel_sums(self):
        rel_a = _rel_map([[[2.0]]])
        rel_b = _rel_map([[[3.0]]])
        ms = MatchSet(layer_index=0, matches=(Match((0, 0), (0, 0), 0.5),))
        out = score_matches(ms, rel_a, rel_b)
        assert out.matches[0].relevance == pytest.approx(6.0)

    def test_zero_endpoint_gives_zero(self):
        rel_a = _rel_map([[[0.0]]])
        rel_b = _rel_map([[[3.0]]])
        ms = MatchSet(layer_index=0, matches=(Match((0, 0), (0, 0), 0.5),))
        assert score_matches(ms, rel_a, rel_b).matches[0].relevance == 0.0

    def test_matches_direct_formula(self, rng):
        c, h, w = 4, 5, 6
        ra = rng.standard_normal((c, h, w)).astype(np.float32)
        rb = rng.standard_normal((c, h, w)).astype(np.float32)
        kps = [((int(rng.integers(w)), int(rng.integers(h))),
                (int(rng.integers(w)), int(rng.integers(h)))) for _ in range(20)]
        ms = MatchSet(layer_index=0, matches=tuple(Match(a, b, 1.0) for a, b in kps))
        out = score_matches(ms, _rel_map(ra), _rel_map(rb))
        for m in out.matches:
            (i1, j1), (i2, j2) = m.kp_a, m.kp_b
            want = float(ra[:, j1, i1].astype(np.float64).sum()) * float(
                rb[:, j2, i2].astype(np.float64).sum())
            assert m.relevance == pytest.approx(want, abs=1e-6)

    def test_scaling_relevance_preserves_top_n_order(self, rng):
        c, h, w = 3, 4, 4
        ra = np.abs(rng.standard_normal((c, h, w))).astype(np.float32)
        rb = np.abs(rng.standard_normal((c, h, w))).astype(np.float32)
        kps = [((i, j), (i, j)) for j in range(h) for i in range(w)]
        ms = MatchSet(layer_index=0, matches=tuple(Match(a, b, 1.0) for a, b in kps))
        base = top_n(score_matches(ms, _rel_map(ra), _rel_map(rb)), 5)
        scaled = top_n(score_matches(ms, _rel_map(ra * 3.5), _rel_map(rb)), 5)
        assert [m.kp_a for m in base.matches] == [m.kp_a for m in scaled.matches]
        for m0, m1 in zip(base.matches, scaled.matches):
            assert m1.relevance == pytest.approx(3.5 * m0.relevance, rel=1e-5)


class TestTopN:
    def test_keeps_n_best_descending(self, rng):
        matches = tuple(
            Match((i, 0), (i, 0), 0.1, relevance=float(rng.standard_normal()))
            for i in range(50)
        )
        out = top_n(MatchSet(0, matches), 20)
        assert len(out) == 20
        rels = [m.relevance for m in out.matches]
        assert rels == sorted(rels, reverse=True)
        assert min(rels) >= max(
            m.relevance for m in matches if m not in out.matches
        )

    def test_n_larger_than_set(self):
        matches = tuple(Match((i, 0), (i, 0), 0.0, relevance=1.0) for i in range(3))
        out = top_n(MatchSet(0, matches), 10)
        assert len(out) == 3

    def test_tie_break_distance_then_row_major(self):
        matches = (
            Match((1, 1), (0, 0), 0.5, relevance=1.0),
            Match((0, 1), (0, 0), 0.5, relevance=1.0),
            Match((2, 0), (0, 0), 0.2, relevance=1.0),
            Match((0, 0), (0, 0), 0.5, relevance=2.0),
        )
        out = top_n(MatchSet(0, matches), 4)
        # highest relevance first; then smaller distance; then (j, i) of kp_a
        assert [m.kp_a for m in out.matches] == [(0, 0), (2, 0), (0, 1), (1, 1)]

    def test_n_below_one_rejected(self):
        with pytest.raises(ContractError):
            top_n(MatchSet(0, ()), 0)
