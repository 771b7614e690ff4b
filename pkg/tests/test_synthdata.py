import itertools

import numpy as np
import pytest

from crclip.errors import ConfigurationError, InputError
from crclip.synthdata import (BOS_ID, EOS_ID, Geometry, SampleLabel, build_relevance,
                              class_pattern, generate, make_caption, noun_token, render_clip,
                              split, split_indices, verb_token, vocab_size)
from crclip.tta import hflip


@pytest.fixture(scope="module")
def ds():
    return generate(7, n_samples=64, n_verbs=4, n_nouns=6)


class TestRelevance:
    def test_same_label(self):
        assert build_relevance([SampleLabel(1, 2)], [SampleLabel(1, 2)])[0, 0] == 1.0

    def test_same_verb_only(self):
        assert build_relevance([(1, 2)], [(1, 3)])[0, 0] == 0.5

    def test_same_noun_only(self):
        assert build_relevance([(0, 3)], [(1, 3)])[0, 0] == 0.5

    def test_self_relevance(self, rng):
        labels = rng.integers(0, 3, size=(10, 2))
        C = build_relevance(labels, labels)
        assert np.all(np.diag(C) == 1.0) and np.array_equal(C, C.T)
        assert set(np.unique(C)) <= {0.0, 0.5, 1.0}

    def test_empty(self):
        with pytest.raises(InputError):
            build_relevance([], [(0, 0)])


class TestGenerate:
    def test_deterministic(self):
        a, b = generate(3, 16, 2, 3), generate(3, 16, 2, 3)
        for field in ("clips", "captions", "labels", "relevance"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_seed_changes_data(self):
        assert not np.array_equal(generate(3, 16, 2, 3).clips, generate(4, 16, 2, 3).clips)

    def test_same_label_same_noise_seed(self):
        geom = Geometry()
        a = render_clip(SampleLabel(2, 1), geom, noise_seed=11)
        b = render_clip(SampleLabel(2, 1), geom, noise_seed=11)
        assert np.array_equal(a, b)
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        assert np.array_equal(make_caption(SampleLabel(2, 1), 4, 6, 6, rng_a),
                              make_caption(SampleLabel(2, 1), 4, 6, 6, rng_b))

    def test_single_class_cell_rejected_but_all_ones_relevance(self):
        with pytest.raises(ConfigurationError):
            generate(0, 8, 1, 1)
        labels = [(0, 0)] * 5
        assert np.all(build_relevance(labels, labels) == 1.0)

    def test_balanced_seed7(self, ds):
        counts = np.zeros((4, 6))
        for v, n in ds.labels:
            counts[v, n] += 1
        uniform = 64 / 24
        assert np.all(np.abs(counts - uniform) <= 0.25 * uniform + 1e-12)

    def test_relevance_matches_labels(self, ds):
        assert np.array_equal(ds.relevance, build_relevance(ds.labels, ds.labels))

    def test_shapes_and_range(self, ds):
        assert ds.clips.shape == (64, 2, 16, 16, 3)
        assert ds.clips.min() >= 0.0 and ds.clips.max() <= 1.0
        assert ds.captions.shape == (64, 6)

    def test_captions(self, ds):
        for cap, (v, n) in zip(ds.captions, ds.labels):
            assert cap[0] == BOS_ID and cap[-1] == EOS_ID
            assert cap[1] == verb_token(v) and cap[2] == noun_token(n, 4)
            assert np.all((cap[3:-1] >= 2 + 4 + 6) & (cap[3:-1] < vocab_size(4, 6)))

    def test_invalid_geometry(self):
        with pytest.raises(ConfigurationError):
            generate(0, 8, 2, 2, Geometry(patch=5))
        with pytest.raises(ConfigurationError):
            generate(0, 8, 2, 2, Geometry(frames=0))


class TestPatterns:
    def test_distinct_labels_distinct_patterns(self):
        geom = Geometry()
        pats = {(v, n): class_pattern(v, n, geom) for v in range(4) for n in range(6)}
        for a, b in itertools.combinations(pats, 2):
            assert np.linalg.norm(pats[a] - pats[b]) > 0

    def test_noiseless_pattern_is_mirror_symmetric(self):
        p = class_pattern(3, 5, Geometry())
        assert np.allclose(hflip(p), p, atol=1e-15)

    def test_too_many_classes_for_resolution(self):
        with pytest.raises(ConfigurationError):
            class_pattern(8, 0, Geometry())


class TestSplit:
    def test_half_of_ten(self):
        tr, te = split_indices(10, 0.5, 0)
        assert len(tr) == len(te) == 5 and not set(tr) & set(te)

    def test_seeded(self):
        a, b = split_indices(20, 0.75, 3), split_indices(20, 0.75, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_exhaustive(self):
        tr, te = split_indices(37, 0.7, 1)
        assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(37))

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
    def test_fraction_out_of_range(self, ds, fraction):
        with pytest.raises(InputError):
            split(ds, fraction)

    def test_relevance_sliced(self, ds):
        tr, te = split(ds, 0.75, 0)
        assert len(tr) + len(te) == len(ds)
        assert np.array_equal(te.relevance, build_relevance(te.labels, te.labels))
