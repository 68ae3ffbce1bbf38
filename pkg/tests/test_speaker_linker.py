import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import track_of
from storypipe.errors import ValidationError
from storypipe.speaker_linker import (
    ClusterAssignment,
    LabeledPair,
    UtteranceEmbedding,
    assign_global_ids,
    cluster,
    cluster_from_similarities,
    cosine,
    dump_sweep,
    load_embeddings,
    load_pairs,
    pair_similarities,
    sweep_thresholds,
    threshold_grid,
)
from storypipe.timeline import GlobalSpeakerId, SubtitleTrack

C = GlobalSpeakerId


class TestCosine:
    def test_orthogonal(self):
        assert cosine((1, 0), (0, 1)) == 0.0

    def test_collinear(self):
        assert cosine((1, 1), (2, 2)) == pytest.approx(1.0, abs=1e-15)
        assert cosine((1, 1), (2, 2)) <= 1.0

    def test_opposite(self):
        assert cosine((1, 0), (-1, 0)) == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            cosine((1, 0), (1, 0, 0))

    def test_zero_vector(self):
        with pytest.raises(ValidationError):
            UtteranceEmbedding(1, (0.0, 0.0))

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=3),
           st.lists(st.floats(-100, 100), min_size=3, max_size=3),
           st.floats(0.01, 100))
    def test_symmetry_and_scale(self, a, b, lam):
        if not any(a) or not any(b) or np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        assert cosine(a, b) == cosine(b, a)
        assert cosine([lam * x for x in a], b) == pytest.approx(cosine(a, b), abs=1e-9)
        assert -1.0 <= cosine(a, b) <= 1.0


class TestCluster:
    sims = [[1.0, 0.9, 0.3], [0.9, 1.0, 0.87], [0.3, 0.87, 1.0]]

    def test_chain_merges(self):
        got = cluster_from_similarities([1, 2, 3], self.sims, 0.85)
        assert got.clusters() == [frozenset({1, 2, 3})]

    def test_high_threshold_singletons(self):
        got = cluster_from_similarities([1, 2, 3], self.sims, 0.95)
        assert got.mapping == {1: C(1), 2: C(2), 3: C(3)}

    def test_single(self):
        got = cluster([UtteranceEmbedding(4, (1.0, 2.0))], 0.85)
        assert got.mapping == {4: C(1)}

    def test_empty(self):
        with pytest.raises(ValidationError):
            cluster([], 0.85)

    def test_ids_follow_start_time(self):
        # subtitle 2 starts first, so its cluster becomes C1
        track = track_of([(5000, 6000), (1000, 2000), (7000, 8000)], 10000)
        embs = [UtteranceEmbedding(1, (1, 0)), UtteranceEmbedding(2, (0, 1)), UtteranceEmbedding(3, (1, 0.01))]
        got = cluster(embs, 0.85, track)
        assert got.mapping == {1: C(2), 2: C(1), 3: C(2)}

    def test_threshold_range(self):
        with pytest.raises(ValidationError):
            cluster([UtteranceEmbedding(1, (1.0,))], 1.5)


vectors = st.lists(
    st.lists(st.integers(-5, 5), min_size=3, max_size=3).filter(any),
    min_size=1, max_size=12,
)


@given(vectors, st.randoms(use_true_random=False))
def test_cluster_permutation_invariant(vecs, rnd):
    embs = [UtteranceEmbedding(i, tuple(v)) for i, v in enumerate(vecs, start=1)]
    shuffled = list(embs)
    rnd.shuffle(shuffled)
    assert cluster(shuffled, 0.8).mapping == cluster(embs, 0.8).mapping


@given(vectors, st.floats(-1, 1), st.floats(-1, 1))
def test_cluster_refinement(vecs, t1, t2):
    lo, hi = sorted((t1, t2))
    embs = [UtteranceEmbedding(i, tuple(v)) for i, v in enumerate(vecs, start=1)]
    coarse = cluster(embs, lo).clusters()
    for fine in cluster(embs, hi).clusters():
        assert any(fine <= c for c in coarse)


class TestAssignGlobalIds:
    def test_annotates(self):
        track = track_of([(0, 1), (2, 3), (4, 5)], 10)
        out = assign_global_ids(track, ClusterAssignment({1: C(1), 2: C(1), 3: C(2)}, 0.85))
        assert [ln.global_id for ln in out] == [C(1), C(1), C(2)]
        assert [ln.text for ln in out] == [ln.text for ln in track]

    def test_missing(self):
        track = track_of([(0, 1), (2, 3), (4, 5)], 10)
        with pytest.raises(ValidationError, match="missing \\[2\\]"):
            assign_global_ids(track, ClusterAssignment({1: C(1), 3: C(2)}, 0.85))

    def test_empty(self):
        track = SubtitleTrack((), 10)
        assert assign_global_ids(track, ClusterAssignment({}, 0.85)) == track


# four pairs: sims 0.9 (same), 0.8 (same), 0.7 (different), 0.95 (different)
PAIRS = [LabeledPair(1, 2, True), LabeledPair(3, 4, True), LabeledPair(5, 6, False), LabeledPair(7, 8, False)]
SIMS = {(1, 2): 0.9, (3, 4): 0.8, (5, 6): 0.7, (7, 8): 0.95}


class TestSweep:
    def test_hand_counts(self):
        rows = {r.threshold: r for r in sweep_thresholds(PAIRS, SIMS, [0.85, 0.75])}
        assert rows[0.85].exact() == {"accuracy": Fraction(1, 2), "precision": Fraction(1, 2),
                                      "recall": Fraction(1, 2), "f1": Fraction(1, 2)}
        assert rows[0.75].exact() == {"accuracy": Fraction(3, 4), "precision": Fraction(2, 3),
                                      "recall": Fraction(1), "f1": Fraction(4, 5)}

    def test_rows_sorted(self):
        rows = sweep_thresholds(PAIRS, SIMS, [0.9, 0.5, 0.7])
        assert [r.threshold for r in rows] == [0.5, 0.7, 0.9]

    def test_unknown_pair(self):
        with pytest.raises(ValidationError):
            sweep_thresholds([LabeledPair(1, 9, True)], SIMS, [0.5])

    def test_no_predicted_positives(self):
        (row,) = sweep_thresholds(PAIRS, SIMS, [0.99])
        assert row.precision == 0.0 and row.f1 == 0.0 and row.accuracy == 0.5

    def test_grid_has_no_drift(self):
        grid = threshold_grid(0.5, 1.0, 0.05)
        assert len(grid) == 11 and grid[7] == 0.85 and grid[-1] == 1.0

    def test_dump(self):
        doc = json.loads(dump_sweep(sweep_thresholds(PAIRS, SIMS, [0.85])))
        assert doc["rows"][0]["pair_accuracy"] == 0.5


@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=1, max_size=40), st.floats(-1, 1))
def test_sweep_consistency(scored, t):
    pairs = [LabeledPair(2 * i + 1, 2 * i + 2, y) for i, (_, y) in enumerate(scored)]
    sims = {p.key: s for p, (s, _) in zip(pairs, scored)}
    (row,) = sweep_thresholds(pairs, sims, [t])
    ex = row.exact()
    assert ex["precision"] * (row.tp + row.fp) == row.tp
    assert ex["recall"] * (row.tp + row.fn) == row.tp
    p, r = ex["precision"], ex["recall"]
    assert ex["f1"] == (2 * p * r / (p + r) if p + r else 0)
    assert row.tp + row.fp + row.fn + row.tn == len(pairs)


class TestFiles:
    def test_embeddings(self):
        doc = {"dim": 2, "items": [{"subtitle_index": 1, "vector": [1, 0]}, {"subtitle_index": 2, "vector": [0, 1]}]}
        embs = load_embeddings(json.dumps(doc))
        assert embs[1].vector == (0.0, 1.0)

    def test_embedding_dim_mismatch(self):
        doc = {"dim": 3, "items": [{"subtitle_index": 1, "vector": [1, 0]}]}
        with pytest.raises(ValidationError, match="dim is 3"):
            load_embeddings(json.dumps(doc))

    def test_pairs_and_similarities(self):
        pairs = load_pairs(json.dumps({"pairs": [{"a": 2, "b": 1, "same_speaker": True}]}))
        embs = [UtteranceEmbedding(1, (1, 0)), UtteranceEmbedding(2, (1, 1))]
        sims = pair_similarities(pairs, embs)
        assert sims[(1, 2)] == pytest.approx(2 ** -0.5)

    def test_self_pair(self):
        with pytest.raises(ValidationError):
            LabeledPair(3, 3, False)
