import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsscnet.harness import (
    CorpusManifest,
    EvalReport,
    ManifestError,
    MissingCacheError,
    Speaker,
    aggregate,
    bundled_manifest,
    evaluate,
    evaluate_predictions,
    export_embeddings,
    generate_loso,
    generate_osps,
    load_dataset,
    write_reports,
)
from dsscnet.model import build, desk_clone, preset
from oracles import confusion_recount


def toy_manifest(layout):
    """``layout``: list of speaker counts per severity."""
    speakers = []
    for sev, n in enumerate(layout):
        for k in range(n):
            speakers.append(Speaker(f"s{sev}{k}", sev, [], 10))
    return CorpusManifest("toy", speakers, n_classes=max(len(layout), 2))


# --------------------------------------------------------------------------
# manifests


def test_bundled_torgo_shape():
    m = bundled_manifest("torgo")
    assert m.n_classes == 3
    assert [sum(s.severity == c for s in m.speakers) for c in range(3)] == [3, 2, 3]
    counts = {s.speaker_id: s.n_utterances for s in m.speakers}
    assert counts["F03"] == 1075 and counts["F01"] == 228 and counts["M04"] == 652
    low = sum(s.n_utterances for s in m.speakers if s.severity == 0)
    assert low == 2542


def test_bundled_uaspeech_pool():
    m = bundled_manifest("uaspeech")
    assert len(m.speakers) == 15 and m.n_classes == 4
    assert len(m.pool) == 12
    assert [sum(s.severity == c for s in m.pool) for c in range(4)] == [3, 3, 3, 3]


def test_manifest_roundtrip(tmp_path):
    m = toy_manifest([2, 3])
    m.speakers[0].utterances = ["a.wav", "b.wav"]
    m.speakers[0].n_utterances = 2
    path = m.save(tmp_path / "t.manifest")
    back = CorpusManifest.load(path)
    assert back.to_json() == m.to_json()
    assert back.root == tmp_path


def test_duplicate_speaker_rejected():
    with pytest.raises(ManifestError, match="duplicate"):
        CorpusManifest("x", [Speaker("a", 0), Speaker("a", 1)])


def test_declared_count_mismatch_rejected():
    with pytest.raises(ManifestError, match="declares"):
        CorpusManifest("x", [Speaker("a", 0, ["u.wav"], 3), Speaker("b", 1)])


def test_utterance_under_two_speakers_rejected():
    with pytest.raises(ManifestError, match="both"):
        CorpusManifest("x", [Speaker("a", 0, ["u.wav"]), Speaker("b", 1, ["u.wav"])])


def test_unknown_format(tmp_path):
    (tmp_path / "m.manifest").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ManifestError):
        CorpusManifest.load(tmp_path / "m.manifest")


# --------------------------------------------------------------------------
# split plans


def test_torgo_osps_plans():
    plans = generate_osps(bundled_manifest("torgo"))
    assert len(plans) == 18
    assert all(len(p.train) == 5 and len(p.test) == 3 for p in plans)


def test_uaspeech_osps_plans():
    plans = generate_osps(bundled_manifest("uaspeech"))
    assert len(plans) == 81
    assert all(len(p.train) == 8 and len(p.test) == 4 for p in plans)


@pytest.mark.parametrize("name,n", [("torgo", 8), ("uaspeech", 12)])
def test_loso_plan_count(name, n):
    plans = generate_loso(bundled_manifest(name))
    assert len(plans) == n
    assert all(len(p.test) == 1 and len(p.train) == n - 1 for p in plans)


def test_two_by_two_osps():
    assert len(generate_osps(toy_manifest([2, 2]))) == 4


def test_two_speaker_loso_is_complementary():
    plans = generate_loso(toy_manifest([1, 1]))
    assert [(p.train, p.test) for p in plans] == [(("s10",), ("s00",)), (("s00",), ("s10",))]


def test_single_speaker_severity_named():
    with pytest.raises(ManifestError, match="Medium"):
        generate_osps(toy_manifest([2, 1, 2]))


def test_plan_ids_are_stable_and_sorted():
    plans = generate_osps(bundled_manifest("torgo"))
    assert [p.plan_id for p in plans] == [f"osps-{i:03d}" for i in range(1, 19)]
    assert [p.test for p in plans] == sorted(p.test for p in plans)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 4), min_size=2, max_size=4))
def test_plan_counts_and_disjointness_match_brute_force(layout):
    m = toy_manifest(layout)
    osps = generate_osps(m)
    groups = [[s.speaker_id for s in m.speakers if s.severity == c] for c in range(len(layout))]
    brute = {tuple(sorted(c)) for c in itertools.product(*groups)}
    assert len(osps) == int(np.prod(layout)) == len(brute)
    assert {tuple(sorted(p.test)) for p in osps} == brute
    everyone = {s.speaker_id for s in m.speakers}
    for p in osps + generate_loso(m):
        assert not set(p.train) & set(p.test)
        assert set(p.train) | set(p.test) == everyone
    assert len(generate_loso(m)) == len(everyone)


# --------------------------------------------------------------------------
# metrics


def test_perfect_classifier():
    y = np.array([0, 1, 2, 2, 1, 0])
    r = evaluate_predictions(y, y, 3)
    assert r.accuracy == 1.0
    np.testing.assert_array_equal(r.confusion, np.eye(3))


def test_constant_predictor_balanced_two_class():
    r = evaluate_predictions(np.array([0, 0, 1, 1]), np.zeros(4, int), 2)
    assert r.accuracy == 0.5 and r.recall == 0.5


@pytest.mark.parametrize("seed", range(30))
def test_metrics_match_recount(seed):
    r = np.random.default_rng(seed)
    c = int(r.integers(2, 5))
    n = int(r.integers(1, 40))
    y = r.integers(0, c, n)
    p = r.integers(0, c, n)
    got = evaluate_predictions(y, p, c)
    want = confusion_recount(y.tolist(), p.tolist(), c)
    assert got.accuracy == want["accuracy"]
    assert got.precision == pytest.approx(want["precision"], abs=1e-15)
    assert got.recall == pytest.approx(want["recall"], abs=1e-15)
    assert got.f1 == pytest.approx(want["f1"], abs=1e-15)
    assert got.counts.tolist() == want["counts"]
    assert got.accuracy == np.trace(got.counts) / got.counts.sum()
    sums = got.confusion.sum(axis=1)
    support = got.counts.sum(axis=1) > 0
    np.testing.assert_allclose(sums[support], 1.0, atol=1e-9)
    assert np.all(got.confusion[~support] == 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    y, p = r.integers(0, 4, 25), r.integers(0, 4, 25)
    perm = r.permutation(25)
    a, b = evaluate_predictions(y, p, 4), evaluate_predictions(y[perm], p[perm], 4)
    assert (a.accuracy, a.precision, a.recall, a.f1) == (b.accuracy, b.precision, b.recall, b.f1)


def test_aggregate_identity_and_mean():
    r = evaluate_predictions(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]), 3)
    agg = aggregate([r, r, r])
    assert agg.accuracy == pytest.approx(r.accuracy, abs=1e-15)
    np.testing.assert_allclose(agg.confusion, r.confusion, atol=1e-15)
    a = evaluate_predictions(np.array([0, 0, 1, 1, 1]), np.array([0, 1, 1, 0, 0]), 2)
    b = evaluate_predictions(np.array([0, 0, 1, 1, 1]), np.array([0, 0, 1, 1, 0]), 2)
    assert aggregate([a, b]).accuracy == pytest.approx((2 / 5 + 4 / 5) / 2)


def test_aggregate_eighteen_plans_against_spreadsheet_recount():
    r = np.random.default_rng(7)
    reports = []
    for i in range(18):
        # each plan tests one speaker per class, like a leave-out round
        y = np.repeat(np.arange(3), r.integers(0, 6, 3))
        if y.size == 0:
            y = np.array([0])
        reports.append(evaluate_predictions(y, r.integers(0, 3, y.size), 3, f"p{i}"))
    agg = aggregate(reports)
    # spreadsheet style: per cell, sum over plans with row support, divide by that count
    want = np.zeros((3, 3))
    for row in range(3):
        used = [rep for rep in reports if rep.counts[row].sum() > 0]
        for col in range(3):
            cells = [rep.counts[row, col] / rep.counts[row].sum() for rep in used]
            want[row, col] = sum(cells) / len(cells) if cells else 0.0
    np.testing.assert_allclose(agg.confusion, want, atol=1e-12)
    assert agg.accuracy == pytest.approx(sum(x.accuracy for x in reports) / 18, abs=1e-12)


def test_aggregate_rejects_mixed_classes():
    a = evaluate_predictions(np.array([0, 1]), np.array([0, 1]), 2)
    b = evaluate_predictions(np.array([0, 1]), np.array([0, 1]), 3)
    with pytest.raises(ValueError, match="class"):
        aggregate([a, b])


def test_absent_class_keeps_matrix_shape():
    r = evaluate_predictions(np.array([2, 2, 2]), np.array([2, 0, 2]), 4)
    assert r.confusion.shape == (4, 4)
    assert r.recall == pytest.approx(2 / 3)


# --------------------------------------------------------------------------
# evaluation on cached features


def test_missing_cache_lists_ids(tiny_corpus, tmp_path):
    manifest, _, _ = tiny_corpus
    with pytest.raises(MissingCacheError, match="preprocess") as info:
        load_dataset(manifest, [manifest.speakers[0].speaker_id], tmp_path / "empty")
    assert len(info.value.missing) == 4


def test_evaluate_and_export(tiny_corpus, tmp_path):
    manifest, _, cache = tiny_corpus
    plan = generate_osps(manifest)[0]
    model = build(desk_clone(preset("C1")), seed=0)
    report = evaluate(model, plan, manifest, cache)
    assert isinstance(report, EvalReport) and report.n == 16
    path = export_embeddings(model, plan, manifest, cache, tmp_path / "emb.csv")
    rows = list(csv.reader(path.open()))
    assert len(rows) == 17 and len(rows[0]) == 2 + 128
    again = export_embeddings(model, plan, manifest, cache, tmp_path / "emb2.csv")
    assert path.read_bytes() == again.read_bytes()


def test_c1_embedding_width():
    assert preset("C1").embedding_dim + 2 == 1026


def test_write_reports(tmp_path):
    reps = [evaluate_predictions(np.array([0, 1]), np.array([0, 0]), 2, "p1"),
            evaluate_predictions(np.array([0, 1]), np.array([0, 1]), 2, "p2")]
    paths = write_reports(reps, tmp_path)
    assert (tmp_path / "plans.csv").read_text().count("\n") == 3
    conf = np.loadtxt(paths["confusion"], delimiter=",")
    np.testing.assert_allclose(conf, [[1.0, 0.0], [0.5, 0.5]])
