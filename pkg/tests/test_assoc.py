import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_greedy
from seqscene.assoc import (
    AssociationParams,
    AssociationResult,
    Track,
    greedy_associate,
    greedy_match,
    lifecycle_update,
    matching_score,
)
from seqscene.detect import Detection
from seqscene.filter import ParticleSet
from seqscene.geometry import BBox2D, Label, Pose6D

A, B = Label("A"), Label("B")


def _ps():
    return ParticleSet.from_poses([Pose6D()])


def _track(tid, box=(0, 0, 2, 2), label=A):
    return Track(tid, label, BBox2D(*box), _ps())


def _det(box=(0, 0, 2, 2), bc=1.0, conf=None):
    return Detection(BBox2D(*box), bc, conf or {A: 1.0})


def test_matching_score_examples():
    assert matching_score(_track(0), _det()) == 1.0
    assert matching_score(_track(0), _det((5, 5, 6, 6), 0.9, {A: 0.9})) == 0.0
    s = matching_score(_track(0), _det((1, 1, 3, 3), 0.9, {A: 0.8}))
    assert s == pytest.approx(0.9 * 0.8 / 7, abs=1e-5)
    assert matching_score(_track(0, label=B), _det()) == 0.0


def test_greedy_example(monkeypatch):
    import seqscene.assoc as assoc

    s = np.array([[0.9, 0.2], [0.8, 0.1]])
    assert greedy_match(s) == [(0, 0), (1, 1)]
    monkeypatch.setattr(assoc, "score_matrix", lambda t, d: s)
    res = greedy_associate([_track(0), _track(1)], [_det(), _det()], AssociationParams(score_threshold=0.15))
    assert [(p[0], p[1]) for p in res.pairs] == [(0, 0)]
    assert res.unmatched_tracks == [1] and res.unmatched_detections == [1]


def test_single_pair_and_empty():
    res = greedy_associate([_track(0)], [_det((0, 0, 2, 2), 1.0, {A: 0.5})], AssociationParams(score_threshold=0.1))
    assert [(p[0], p[1]) for p in res.pairs] == [(0, 0)]
    res = greedy_associate([_track(0), _track(1)], [], AssociationParams())
    assert res.pairs == [] and res.unmatched_tracks == [0, 1]


def test_zero_scores_never_pair():
    assert greedy_match(np.zeros((3, 3))) == []


matrices = st.tuples(st.integers(0, 6), st.integers(0, 6)).flatmap(
    lambda sh: arrays(np.float64, sh, elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0])
                      | st.floats(0, 1)))


@settings(max_examples=300, deadline=None)
@given(matrices)
def test_greedy_matches_brute_force(s):
    assert greedy_match(s) == brute_force_greedy(s)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_greedy_is_a_matching(s):
    pairs = greedy_match(s)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_pair_score_sum_permutation_invariant(r, c, seed):
    rng = np.random.default_rng(seed)
    s = rng.random((r, c))
    base = sum(s[i, j] for i, j in greedy_match(s))
    pr, pc = rng.permutation(r), rng.permutation(c)
    perm = s[pr][:, pc]
    assert sum(perm[i, j] for i, j in greedy_match(perm)) == pytest.approx(base)


def _spawn(det, label, tid):
    return _ps()


def test_lifecycle_matched_resets_misses():
    t = _track(0)
    t.miss_count = 2
    res = AssociationResult([(0, 0, 0.9)], [], [])
    alive, events, nid = lifecycle_update([t], res, [_det((0, 0, 3, 3))], [[(A, 1.0)]], AssociationParams(), _spawn, 1)
    assert alive[0].miss_count == 0 and alive[0].last_bbox == BBox2D(0, 0, 3, 3)
    assert events[0].event == "matched" and nid == 1


def test_lifecycle_terminates_after_k_misses():
    t = _track(0)
    params = AssociationParams(K=3)
    alive = [t]
    for frame in range(1, 4):
        alive, events, _ = lifecycle_update(alive, AssociationResult([], [0] if alive else [], []), [], [],
                                            params, _spawn, 1)
        if frame < 3:
            assert len(alive) == 1 and alive[0].miss_count == frame
        else:
            assert alive == [] and events[-1].event == "terminated"


def test_lifecycle_spawns_one_track_per_surviving_label():
    d = _det(conf={A: 0.6, B: 0.4})
    res = AssociationResult([], [], [0])
    alive, events, nid = lifecycle_update([], res, [d], [[(A, 0.6), (B, 0.4)]], AssociationParams(), _spawn, 5)
    assert [t.id for t in alive] == [5, 6] and nid == 7
    assert [t.label for t in alive] == [A, B]
    assert alive[0].last_bbox == alive[1].last_bbox == d.bbox
    assert [e.event for e in events] == ["spawned", "spawned"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=0, max_size=6), st.integers(1, 3))
def test_track_loss_bounded_by_tracks_at_last_chance(misses, K):
    tracks = [_track(i) for i in range(len(misses))]
    for t, m in zip(tracks, misses):
        t.miss_count = min(m, K - 1)
    at_edge = sum(t.miss_count == K - 1 for t in tracks)
    res = AssociationResult([], [t.id for t in tracks], [])
    alive, _, _ = lifecycle_update(tracks, res, [], [], AssociationParams(K=K), _spawn, 100)
    assert len(tracks) - len(alive) <= at_edge
