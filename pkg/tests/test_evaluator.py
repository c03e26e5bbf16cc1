import math

import numpy as np
import pytest

from vigait.autodiff import DimensionError
from vigait.data import SilhouetteSequence
from vigait.evaluator import (
    Embedded,
    EvalProtocol,
    EvalReport,
    Selector,
    accuracy,
    distances,
    embed,
    embed_all,
    evaluate,
    rank1,
    rank1_hits,
    view_accuracy,
)
from vigait.model import ViGaitModel
from vigait.trainer import tiny_model_config

from oracles import brute_hits, brute_rank1, random_embedded


@pytest.mark.parametrize("exclude", [True, False])
def test_rank1_matches_brute_force(rng, exclude):
    for _ in range(100):
        views = int(rng.integers(2, 5))
        g = random_embedded(rng, int(rng.integers(1, 8)), 4, views)
        p = random_embedded(rng, int(rng.integers(1, 8)), 4, views)
        if rng.random() < 0.3:
            # force exact ties
            p.features[0] = g.features[0]
            g.features = np.concatenate([g.features, g.features[:1]])
            g.subjects = np.append(g.subjects, "x")
            g.views = np.append(g.views, g.views[0])
        hits = rank1_hits(g, p, exclude)
        assert [None if np.isnan(h) else bool(h) for h in hits] == brute_hits(g, p, exclude)
        report = rank1(g, p, list(range(views)), exclude)
        expected = brute_rank1(g, p, views, exclude)
        got = report.cells["ALL"]
        assert [v is None for v in got] == [v is None for v in expected]
        for a, b in zip(got, expected):
            if a is not None:
                assert a == pytest.approx(b, abs=1e-9)


def test_duplicate_probes_score_hundred(rng):
    g = random_embedded(rng, 6, 6, 1)
    g.subjects = np.array([str(i) for i in range(6)])
    p = Embedded(g.features.copy(), g.subjects.copy(), g.views.copy())
    assert rank1(g, p, [0], exclude_identical_view=False).cells["ALL"] == [100.0]


def test_nearest_gallery_entry_wins():
    g = Embedded(np.array([[[0.0]], [[10.0]]]), np.array(["a", "b"]), np.array([1, 1]))
    p = Embedded(np.array([[[1.0]], [[9.0]]]), np.array(["a", "a"]), np.array([0, 0]))
    np.testing.assert_array_equal(rank1_hits(g, p), [1.0, 0.0])


def test_undefined_cell_when_gallery_has_only_same_view():
    g = Embedded(np.zeros((2, 1, 2)), np.array(["a", "b"]), np.array([0, 0]))
    p = Embedded(np.zeros((2, 1, 2)), np.array(["a", "b"]), np.array([0, 1]))
    report = rank1(g, p, [0, 90])
    assert report.cells["ALL"][0] is None
    assert report.cells["ALL"][1] == 0.0  # tie, first gallery entry is "a"
    assert report.condition_mean("ALL") == 0.0
    assert report.counts["ALL"] == [0, 1]
    assert "NA" in report.to_tsv()


def test_first_index_wins_ties():
    g = Embedded(np.zeros((3, 1, 1)), np.array(["b", "a", "a"]), np.array([1, 1, 1]))
    p = Embedded(np.zeros((1, 1, 1)), np.array(["a"]), np.array([0]))
    assert rank1_hits(g, p)[0] == 0.0


def test_permuting_gallery_keeps_scores(rng):
    g = random_embedded(rng, 12, 5, 3)
    p = random_embedded(rng, 9, 5, 3)
    perm = rng.permutation(12)
    gp = Embedded(g.features[perm], g.subjects[perm], g.views[perm])
    assert rank1(g, p, [0, 1, 2]).cells == rank1(gp, p, [0, 1, 2]).cells


def test_distance_oracle(rng):
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(5, 2, 4))
    d = distances(a, b)
    for i in range(3):
        for j in range(5):
            assert d[i, j] == pytest.approx(((a[i] - b[j]) ** 2).sum())


def test_means():
    r = EvalReport([0, 90], {"NM": [100.0, 80.0], "BG": [50.0, None]})
    assert r.condition_means == {"NM": 90.0, "BG": 50.0}
    assert r.overall_mean == 70.0
    assert "Overall mean: 70.0" in r.to_table()


# ---------------------------------------------------------------- protocol


def test_selector_parse():
    s = Selector.parse("NM#1-4")
    assert (s.condition, s.first, s.last) == ("nm", 1, 4)
    assert s.matches("nm", "03") and not s.matches("nm", "05") and not s.matches("bg", "01")
    assert str(Selector.parse("cl#2")) == "CL#2"
    for bad in ("NM", "NM#0", "NM#4-2", "#1-2"):
        with pytest.raises(ValueError):
            Selector.parse(bad)


def test_protocol_rejects_overlap():
    with pytest.raises(ValueError):
        EvalProtocol(("NM#1-4",), ("NM#4-6",))
    EvalProtocol(("NM#1-4",), ("BG#1-4",))


def test_casia_b_protocol():
    proto = EvalProtocol.casia_b()
    assert proto.in_gallery("nm", "04") and not proto.in_gallery("nm", "05")
    assert proto.probe_group("nm", "06") == "NM"
    assert proto.probe_group("cl", "02") == "CL"
    assert proto.probe_group("nm", "01") is None


# ---------------------------------------------------------------- model-facing


@pytest.fixture(scope="module")
def tiny():
    return ViGaitModel(tiny_model_config(), seed=0)


def seq(rng, subject, view, seq_id, cond="nm"):
    frames = (rng.random((3, 16, 12)) < 0.4).astype(np.uint8) * 255
    return SilhouetteSequence(frames, subject, view, 45.0 * view, cond, seq_id)


def test_embedding_ignores_frame_order(rng, tiny):
    s = seq(rng, "001", 0, "01")
    a, va = embed(tiny, s)
    b, vb = embed(tiny, s.frames[::-1].copy())
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert va == vb


def test_embed_size_mismatch(tiny):
    with pytest.raises(DimensionError):
        embed(tiny, np.zeros((2, 64, 44), np.uint8))


def test_self_match_with_exclusion_off(rng, tiny):
    seqs = [seq(rng, f"{s:03d}", v, "01") for s in range(3) for v in range(3)]
    e = embed_all(tiny, seqs)
    report = rank1(e, e, [0, 45, 90], exclude_identical_view=False)
    assert report.cells["ALL"] == [100.0, 100.0, 100.0]


def test_evaluate_end_to_end(rng, tiny):
    seqs = [seq(rng, f"{s:03d}", v, f"{q:02d}") for s in range(3) for v in range(3) for q in range(1, 5)]
    report = evaluate(tiny, seqs, EvalProtocol())
    assert list(report.cells) == ["NM"]
    assert report.views == [0.0, 45.0, 90.0]
    assert sum(report.counts["NM"]) == 3 * 3 * 2
    assert 0.0 <= report.view_accuracy <= 100.0
    with pytest.raises(ValueError):
        evaluate(tiny, seqs, EvalProtocol(("BG#1",), ("CL#1",)))


def test_accuracy_examples():
    assert accuracy([0, 1, 2, 2], [0, 1, 2, 0]) == 75.0
    assert accuracy([3, 3], [3, 3]) == 100.0
    assert math.isnan(accuracy([], []))
    with pytest.raises(DimensionError):
        accuracy([1], [1, 2])


def test_view_accuracy_matches_predictions(rng, tiny):
    seqs = [seq(rng, "001", v, "01") for v in range(3)]
    preds = [embed(tiny, s)[1] for s in seqs]
    relabelled = [SilhouetteSequence(s.frames, s.subject_id, p, 0.0) for s, p in zip(seqs, preds)]
    assert view_accuracy(tiny, relabelled) == 100.0
