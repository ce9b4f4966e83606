import math

import numpy as np
import pytest

from storyshots import attention, tensor_core as tc
from storyshots.errors import ConfigError, DegenerateRowError
from storyshots.subject_mask import SubjectMaskSet


def random_weights(rng, d):
    return attention.LayerWeights(
        *(rng.standard_normal((d, d)).astype(np.float32) * 0.3 for _ in range(4))
    )


def random_feats(rng, shots, frames, patches, d):
    shape = (shots, frames, patches, d)
    return attention.AttnFeatures(
        rng.standard_normal(shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
    )


def mask_set(masks):
    masks = np.asarray(masks, dtype=bool)
    return SubjectMaskSet(
        masks=masks,
        thresholds=np.zeros(masks.shape[:2]),
        saliency=masks.astype(np.float32),
    )


def dense_masked_oracle(q, k, v, allowed):
    """Naive per-element attention with explicit -inf masking."""
    P, d = q.shape
    out = np.zeros((P, v.shape[1]))
    for i in range(P):
        logits = []
        for j in range(k.shape[0]):
            if allowed is not None and not allowed[i, j]:
                logits.append(-math.inf)
            else:
                logits.append(
                    sum(float(q[i, t]) * float(k[j, t]) for t in range(d)) / math.sqrt(d)
                )
        m = max(logits)
        w = [0.0 if l == -math.inf else math.exp(l - m) for l in logits]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j].astype(np.float64)
    return out


class TestSelfAttention:
    def test_single_patch(self):
        rng = np.random.default_rng(0)
        w = random_weights(rng, 6)
        x = rng.standard_normal((1, 6)).astype(np.float32)
        o, (q, k, v) = attention.self_attention(x, w)
        assert np.array_equal(o, tc.matmul(v, w.w_o))

    def test_identical_keys_give_uniform_rows(self):
        rng = np.random.default_rng(1)
        d, P = 8, 5
        w = random_weights(rng, d)
        x = rng.standard_normal((P, d)).astype(np.float32)
        # force identical K rows via identical input rows
        x[:] = x[0]
        q = tc.matmul(x, w.w_q)
        k = tc.matmul(x, w.w_k)
        v = tc.matmul(x, w.w_v)
        _, weights = attention.masked_attention(q, k, v)
        assert np.abs(weights - 1.0 / P).max() < 1e-6

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(2)
        P, d = 16, 8
        w = random_weights(rng, d)
        x = rng.standard_normal((P, d)).astype(np.float32)
        o, (q, k, v) = attention.self_attention(x, w)
        expected = dense_masked_oracle(q, k, v, None) @ w.w_o.astype(np.float64)
        assert np.abs(o - expected).max() < 1e-6


class TestFramewiseSdsa:
    def test_single_shot_matches_self_attention(self):
        rng = np.random.default_rng(3)
        feats = random_feats(rng, 1, 2, 6, 4)
        masks = mask_set(np.ones((1, 2, 6)))
        h = attention.framewise_sdsa(feats, masks, frame=1, shot=0)
        expected, _ = attention.masked_attention(
            feats.q[0, 1], feats.k[0, 1], feats.v[0, 1],
            np.ones((6, 6), dtype=bool),
        )
        assert np.array_equal(h, expected)

    def test_all_foreign_masks_false_reduces_to_self(self):
        rng = np.random.default_rng(4)
        feats = random_feats(rng, 3, 2, 6, 4)
        masks = mask_set(np.zeros((3, 2, 6)))
        h = attention.framewise_sdsa(feats, masks, frame=0, shot=1)
        expected, _ = attention.masked_attention(feats.q[1, 0], feats.k[1, 0], feats.v[1, 0])
        assert np.abs(h - expected).max() < 1e-6

    def test_dense_masked_oracle(self):
        rng = np.random.default_rng(5)
        N, F, P, d = 3, 4, 16, 8
        feats = random_feats(rng, N, F, P, d)
        masks = mask_set(rng.random((N, F, P)) < 0.5)
        for shot in range(N):
            f = 2
            k_ext = np.concatenate([feats.k[j, f] for j in range(N)])
            v_ext = np.concatenate([feats.v[j, f] for j in range(N)])
            row = np.concatenate(
                [np.ones(P, dtype=bool) if j == shot else masks.masks[j, f] for j in range(N)]
            )
            allowed = np.broadcast_to(row, (P, N * P))
            h = attention.framewise_sdsa(feats, masks, frame=f, shot=shot)
            expected = dense_masked_oracle(feats.q[shot, f], k_ext, v_ext, allowed)
            assert np.abs(h - expected).max() < 1e-6

    def test_framewise_locality_exact(self):
        rng = np.random.default_rng(6)
        feats = random_feats(rng, 2, 4, 8, 4)
        masks = mask_set(rng.random((2, 4, 8)) < 0.6)
        before = attention.framewise_sdsa(feats, masks, frame=1, shot=0)
        # perturb every other frame's K/V in every shot
        for g in (0, 2, 3):
            feats.k[:, g] += 5.0
            feats.v[:, g] -= 3.0
        after = attention.framewise_sdsa(feats, masks, frame=1, shot=0)
        assert np.array_equal(before, after)

    def test_masked_keys_get_zero_weight_and_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        N, F, P, d = 2, 1, 6, 4
        feats = random_feats(rng, N, F, P, d)
        m = np.zeros((N, F, P), dtype=bool)
        m[1, 0, :2] = True
        masks = mask_set(m)
        k_ext = np.concatenate([feats.k[j, 0] for j in range(N)])
        v_ext = np.concatenate([feats.v[j, 0] for j in range(N)])
        row = np.concatenate([np.ones(P, dtype=bool), m[1, 0]])
        allowed = np.broadcast_to(row, (P, 2 * P))
        _, weights = attention.masked_attention(feats.q[0, 0], k_ext, v_ext, allowed)
        assert (weights[:, ~row] == 0.0).all()
        assert np.abs(weights.sum(axis=1) - 1.0).max() < 1e-6

    def test_query_pass_through(self):
        rng = np.random.default_rng(8)
        feats = random_feats(rng, 2, 2, 4, 4)
        masks = mask_set(np.ones((2, 2, 4)))
        q_before = feats.q.copy()
        attention.framewise_sdsa(feats, masks, frame=0, shot=0)
        assert np.array_equal(feats.q, q_before)

    def test_degenerate_mask_rejected(self):
        with pytest.raises(DegenerateRowError):
            attention.AttnMask(np.zeros((2, 3), dtype=bool))


class TestSubBatchedAttention:
    def test_full_chunk_equals_unbatched(self):
        rng = np.random.default_rng(9)
        feats = random_feats(rng, 2, 3, 5, 4)
        masks = mask_set(rng.random((2, 3, 5)) < 0.5)
        full = attention.sub_batched_attention(feats, masks, sub_batch=6)
        expected = np.stack(
            [
                np.stack([attention.framewise_sdsa(feats, masks, f, s) for f in range(3)])
                for s in range(2)
            ]
        )
        assert np.array_equal(full, expected)

    def test_chunk_sizes_bit_identical(self):
        rng = np.random.default_rng(10)
        feats = random_feats(rng, 2, 3, 5, 4)
        masks = mask_set(rng.random((2, 3, 5)) < 0.5)
        outs = [
            attention.sub_batched_attention(feats, masks, sub_batch=sb)
            for sb in (1, 2, 4, 6)
        ]
        for other in outs[1:]:
            assert np.array_equal(outs[0], other)

    def test_zero_sub_batch_rejected(self):
        rng = np.random.default_rng(11)
        feats = random_feats(rng, 1, 1, 2, 2)
        masks = mask_set(np.ones((1, 1, 2)))
        with pytest.raises(ConfigError):
            attention.sub_batched_attention(feats, masks, sub_batch=0)
