import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mask_violations, runs
from ctgmae.patchmask import (MaskPattern, apply_mask, generate_mask, mask_target, n_patches,
                              patch_windows, patchify)


class TestPatchify:
    @pytest.mark.parametrize("L, P, S, N", [(1800, 48, 24, 74), (48, 48, 24, 1), (240, 48, 24, 9),
                                            (14, 4, 2, 6), (10, 3, 3, 3)])
    def test_count(self, L, P, S, N):
        assert n_patches(L, P, S) == N
        assert len(patchify(np.zeros(L), P, S)) == N

    def test_single_patch_is_window(self):
        w = np.arange(48.0)
        np.testing.assert_array_equal(patchify(w).patches[0], w)

    def test_too_short(self):
        with pytest.raises(ValueError):
            patchify(np.zeros(47))

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            n_patches(10, 4, 0)

    def test_copied_not_aliased(self):
        w = np.arange(100.0)
        seq = patchify(w, 10, 5)
        seq.patches[0, 0] = -1.0
        assert w[0] == 0.0
        assert seq.patches[1, 0] == 5.0

    @settings(max_examples=100)
    @given(L=st.integers(1, 400), P=st.integers(1, 60), S=st.integers(1, 60))
    def test_rows_index_the_source(self, L, P, S):
        if L < P:
            with pytest.raises(ValueError):
                patch_windows(np.zeros(L), P, S)
            return
        w = np.random.default_rng(L * 1000 + P).random(L)
        patches = patch_windows(w, P, S)
        assert patches.shape == ((L - P) // S + 1, P)
        for k, row in enumerate(patches):
            np.testing.assert_array_equal(row, w[k * S:k * S + P])

    def test_batched_windows(self):
        w = np.random.default_rng(0).random((3, 2, 50))
        out = patch_windows(w, 10, 5)
        assert out.shape == (3, 2, 9, 10)
        np.testing.assert_array_equal(out[2, 1, 4], w[2, 1, 20:30])


class TestMask:
    def test_default_configuration(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = generate_mask(74, 0.4, rng)
            assert m.masked.sum() in (28, 29, 30)
            assert not mask_violations(m.masked, 0.4)

    def test_smallest(self):
        for seed in range(20):
            m = generate_mask(4, 0.5, np.random.default_rng(seed))
            assert m.indices.tolist() == [1, 2]

    def test_deterministic(self):
        a = generate_mask(50, 0.3, np.random.default_rng(9)).masked
        b = generate_mask(50, 0.3, np.random.default_rng(9)).masked
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("n, ratio", [(3, 0.5), (10, 0.0), (10, 1.0), (10, -0.2)])
    def test_rejects(self, n, ratio):
        with pytest.raises(ValueError):
            generate_mask(n, ratio, np.random.default_rng(0))

    def test_target_rounding(self):
        assert mask_target(74, 0.4) == 29
        assert mask_target(4, 0.25) == 1  # 0.5 rounds up
        assert mask_target(5, 0.1) == 0

    def test_target_zero_gives_empty(self):
        assert not generate_mask(5, 0.1, np.random.default_rng(0)).masked.any()

    @settings(max_examples=500, deadline=None)
    @given(n=st.integers(4, 200), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 2**32 - 1))
    def test_legal(self, n, ratio, seed):
        m = generate_mask(n, ratio, np.random.default_rng(seed))
        assert len(m) == n
        assert mask_violations(m.masked, ratio) == []

    def test_placements_cover_interior(self):
        # every interior patch gets masked sometimes, boundaries never
        rng = np.random.default_rng(1)
        hits = sum(generate_mask(30, 0.3, rng).masked.astype(int) for _ in range(2000))
        assert hits[0] == 0 and hits[-1] == 0
        assert (hits[1:-1] > 0).all()

    def test_block_lengths_vary(self):
        rng = np.random.default_rng(2)
        lengths = {length for _ in range(300) for _, length in runs(generate_mask(60, 0.4, rng).masked)}
        assert {2, 3, 4} <= lengths


def digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


class TestApplyMask:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.fhr = patchify(rng.random(14), 4, 2, "FHR")
        self.uc = patchify(rng.random(14), 4, 2, "UC")

    def test_identity(self):
        f, u = apply_mask(self.fhr, self.uc, MaskPattern(np.zeros(6, bool), 0.4))
        np.testing.assert_array_equal(f.patches, self.fhr.patches)
        np.testing.assert_array_equal(u.patches, self.uc.patches)

    def test_zeroes_only_fhr(self):
        masked = np.zeros(6, bool)
        masked[1:3] = True
        f, u = apply_mask(self.fhr, self.uc, MaskPattern(masked, 0.4))
        assert (f.patches[1:3] == 0).all()
        np.testing.assert_array_equal(f.patches[~masked], self.fhr.patches[~masked])
        assert digest(u.patches) == digest(self.uc.patches)

    def test_zero_input_fixed_point(self):
        zero = patchify(np.zeros(14), 4, 2)
        m = generate_mask(6, 0.5, np.random.default_rng(0))
        np.testing.assert_array_equal(apply_mask(zero, self.uc, m)[0].patches, zero.patches)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(self.fhr, self.uc, MaskPattern(np.zeros(5, bool), 0.4))

    @settings(max_examples=200)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_uc_hash_unchanged(self, seed):
        before = digest(self.uc.patches)
        m = generate_mask(6, 0.4, np.random.default_rng(seed))
        assert digest(apply_mask(self.fhr, self.uc, m)[1].patches) == before
