import numpy as np
import pytest

from storyshots import refinement as rf
from storyshots.errors import ConfigError, IntegrityError


def exhaustive_correspondence(target, anchor):
    """Independent argmax-cosine search over all (frame, patch) candidates."""
    frames, patches, _ = anchor.shape
    matches = []
    for tv in target:
        best = (-2.0, None)
        for f in range(frames):
            for p in range(patches):
                av = anchor[f, p]
                tn = np.linalg.norm(tv.astype(np.float64))
                an = np.linalg.norm(av.astype(np.float64))
                sim = 0.0 if tn == 0 or an == 0 else float(
                    np.clip(tv.astype(np.float64) @ av.astype(np.float64) / (tn * an), -1, 1)
                )
                if sim > best[0]:
                    best = (sim, (f, p))
        matches.append(best[1])
    return matches


class TestBuildCorrespondence:
    def test_exact_copy_gives_identity(self):
        rng = np.random.default_rng(0)
        target = rng.standard_normal((8, 4)).astype(np.float32)
        anchor = rng.standard_normal((3, 8, 4)).astype(np.float32)
        anchor[1] = target
        corr = rf.build_correspondence(target, anchor)
        assert (corr.match_frame == 1).all()
        assert np.array_equal(corr.match_patch, np.arange(8))
        assert np.allclose(corr.score, 1.0, atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal((16, 8)).astype(np.float32)
        anchor = rng.standard_normal((4, 16, 8)).astype(np.float32)
        corr = rf.build_correspondence(target, anchor)
        expected = exhaustive_correspondence(target, anchor)
        got = list(zip(corr.match_frame.tolist(), corr.match_patch.tolist()))
        assert got == expected

    def test_orthogonal_scores_zero_with_tie_rule(self):
        target = np.array([[1.0, 0.0]], dtype=np.float32)
        anchor = np.zeros((2, 3, 2), dtype=np.float32)
        anchor[..., 1] = 1.0  # every candidate orthogonal to the target
        corr = rf.build_correspondence(target, anchor)
        assert corr.score[0] == 0.0
        assert (corr.match_frame[0], corr.match_patch[0]) == (0, 0)

    def test_duplicate_candidates_tie_to_lowest_linear_index(self):
        target = np.array([[1.0, 0.0]], dtype=np.float32)
        anchor = np.zeros((2, 2, 2), dtype=np.float32)
        anchor[0, 1] = [2.0, 0.0]
        anchor[1, 0] = [1.0, 0.0]
        corr = rf.build_correspondence(target, anchor)
        assert (corr.match_frame[0], corr.match_patch[0]) == (0, 1)

    def test_zero_target_flagged_unmatched(self):
        target = np.zeros((2, 3), dtype=np.float32)
        target[1] = [1.0, 0.0, 0.0]
        anchor = np.ones((1, 2, 3), dtype=np.float32)
        corr = rf.build_correspondence(target, anchor)
        assert not corr.matched[0]
        assert corr.matched[1]

    def test_empty_anchor_rejected(self):
        with pytest.raises(ConfigError):
            rf.build_correspondence(np.ones((2, 3)), np.zeros((0, 2, 3)))


class TestInjectRefinement:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.target = rng.standard_normal((6, 4)).astype(np.float32)
        self.anchor = rng.standard_normal((2, 6, 4)).astype(np.float32)
        self.corr = rf.build_correspondence(self.target, self.anchor)
        self.mask = np.array([True, True, False, True, False, True])

    def test_blend_zero_identity(self):
        out = rf.inject_refinement(self.target, self.anchor, self.corr, self.mask, 0.0)
        assert np.array_equal(out, self.target)

    def test_blend_one_identity_map_full_mask_substitutes(self):
        anchor = np.zeros((1, 6, 4), dtype=np.float32)
        anchor[0] = self.target * 2.0
        corr = rf.build_correspondence(self.target, anchor)
        # scaled copy matches identically (cosine is scale invariant)
        out = rf.inject_refinement(self.target, anchor, corr, np.ones(6, dtype=bool), 1.0)
        assert np.array_equal(out, anchor[0])

    def test_empty_mask_unchanged(self):
        out = rf.inject_refinement(self.target, self.anchor, self.corr, np.zeros(6, dtype=bool), 0.9)
        assert np.array_equal(out, self.target)

    def test_background_bit_unchanged(self):
        out = rf.inject_refinement(self.target, self.anchor, self.corr, self.mask, 0.8)
        background = ~self.mask
        assert np.array_equal(out[background], self.target[background])
        assert not np.array_equal(out[self.mask], self.target[self.mask])

    def test_idempotent_at_blend_one_identity_map(self):
        anchor = self.target[None].copy()
        corr = rf.build_correspondence(self.target, anchor)
        once = rf.inject_refinement(self.target, anchor, corr, np.ones(6, dtype=bool), 1.0)
        twice = rf.inject_refinement(once, anchor, corr, np.ones(6, dtype=bool), 1.0)
        assert np.array_equal(once, twice)

    def test_anchor_shape_integrity(self):
        with pytest.raises(IntegrityError):
            rf.inject_refinement(self.target, self.anchor[:1], self.corr, self.mask, 0.5)

    def test_blend_range(self):
        with pytest.raises(ConfigError):
            rf.inject_refinement(self.target, self.anchor, self.corr, self.mask, 1.5)

    def test_map_ids_unique(self):
        a = rf.build_correspondence(self.target, self.anchor)
        b = rf.build_correspondence(self.target, self.anchor)
        assert a.map_id != b.map_id
