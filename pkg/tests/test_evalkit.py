import csv
import io
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfperturb import evalkit
from selfperturb.evalkit import (
    ScoredSample,
    UndefinedMetricError,
    accuracy_at,
    auc,
    auc_from_scores,
    cross_matrix,
    downsample_area,
    eps_cross,
    kmeans,
    kmeans_noise,
    noise_vector,
)

SCHEMAS = Path(evalkit.__file__).parent / "schemas"


def pairwise_auc(scores, is_adv):
    """O(n^2) oracle: P(adv score > real score) with ties counted 1/2."""
    pos = [s for s, a in zip(scores, is_adv) if a]
    neg = [s for s, a in zip(scores, is_adv) if not a]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# --- AUC / accuracy ---------------------------------------------------------------------

score_lists = st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.integers(0, 1000).map(lambda i: i / 1000),
                                 st.booleans()),
                       min_size=2, max_size=500).filter(lambda v: 0 < sum(a for _, a in v) < len(v))


@settings(max_examples=80, deadline=None)
@given(score_lists)
def test_auc_matches_pairwise_oracle(data):
    scores, adv = zip(*data)
    assert abs(auc_from_scores(scores, adv) - pairwise_auc(scores, adv)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(score_lists)
def test_auc_monotone_invariance(data):
    scores, adv = zip(*data)
    s = np.array(scores)
    assert auc_from_scores(s ** 3, adv) == pytest.approx(auc_from_scores(s, adv), abs=1e-12)


def test_auc_extremes_and_ties():
    assert auc_from_scores([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc_from_scores([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert auc_from_scores([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([ScoredSample(0.3, 1), ScoredSample(0.6, 1)])


def test_samples_api_uses_label_zero_as_positive():
    samples = [ScoredSample(0.9, 0), ScoredSample(0.2, 1), ScoredSample(0.6, 1)]
    assert auc(samples) == 1.0
    assert accuracy_at(samples) == pytest.approx(2 / 3)
    assert accuracy_at(samples, 0.7) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=100), st.floats(0, 1))
def test_accuracy_oracle(data, thr):
    samples = [ScoredSample(s, y) for s, y in data]
    want = sum((s >= thr) == (y == 0) for s, y in data) / len(data)
    assert accuracy_at(samples, thr) == pytest.approx(want)


@pytest.mark.parametrize("score,label", [(1.5, 0), (-0.1, 1), (0.5, 2)])
def test_scored_sample_validation(score, label):
    with pytest.raises(ValueError):
        ScoredSample(score, label)


# --- noise vectors ------------------------------------------------------------------------

def test_downsample_area_mean():
    f = np.arange(16.0).reshape(4, 4, 1)
    assert np.array_equal(downsample_area(f, 2)[..., 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        downsample_area(np.zeros((6, 6, 3)), 4)


def test_noise_vector_representations():
    f = np.zeros((64, 64, 3))
    f[:2, :2] = -0.02
    assert noise_vector(f, 32)[:3].tolist() == [1.0, 1.0, 1.0]
    assert noise_vector(f, 32, "raw")[0] == pytest.approx(-0.02)
    assert noise_vector(f, 32, "abs")[0] == pytest.approx(0.02)
    assert noise_vector(f, 32).shape == (32 * 32 * 3,)
    with pytest.raises(ValueError):
        noise_vector(f, 32, "fft")


# --- k-means --------------------------------------------------------------------------------

def three_families(rng, n=30, dim=60):
    x = np.zeros((3 * n, dim))
    for fam in range(3):
        x[fam * n : (fam + 1) * n, fam * 20 : (fam + 1) * 20] = rng.uniform(0.5, 1.5, (n, 20))
    return x, np.repeat(np.arange(3), n)


def test_kmeans_separates_disjoint_supports():
    for seed in range(20):
        x, truth = three_families(np.random.default_rng(seed))
        res = kmeans(x, 3, np.random.default_rng(seed))
        purity = sum(np.bincount(truth[res.labels == j]).max() for j in range(3) if (res.labels == j).any()) / len(x)
        assert purity >= 0.95 and res.converged


def test_kmeans_trace_non_increasing():
    x = np.random.default_rng(1).normal(size=(200, 5))
    for seed in range(5):
        tr = kmeans(x, 6, np.random.default_rng(seed)).inertia_trace
        assert all(b <= a * (1 + 1e-12) for a, b in zip(tr, tr[1:]))


def test_kmeans_k_equals_n_zero_inertia():
    x = np.random.default_rng(2).normal(size=(12, 3))
    assert kmeans(x, 12, np.random.default_rng(0)).inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_duplicates_do_not_break_seeding():
    x = np.zeros((5, 2))
    res = kmeans(x, 3, np.random.default_rng(0))
    assert res.inertia == 0.0 and res.converged


@pytest.mark.parametrize("k", [0, 11])
def test_kmeans_bad_k(k):
    with pytest.raises(ValueError):
        kmeans(np.zeros((10, 2)), k, np.random.default_rng(0))


def test_kmeans_noise_report_and_schema():
    rng = np.random.default_rng(3)
    fields, tags = [], []
    for fam, tag in enumerate(["a", "b"]):
        for _ in range(10):
            f = np.zeros((64, 64, 3))
            f[fam * 32 : fam * 32 + 32] = rng.uniform(-0.02, 0.02, (32, 64, 3))
            fields.append(f)
            tags.append(tag)
    rep = kmeans_noise(fields, tags, 2, np.random.default_rng(0), seed=0)
    assert rep.purity == 1.0
    for row in rep.composition:
        assert sum(row) == pytest.approx(1.0)
    doc = rep.to_json()
    jsonschema.validate(doc, json.loads((SCHEMAS / "cluster_report.schema.json").read_text()))
    assert "purity=1.0000" in rep.to_text()
    with pytest.raises(ValueError):
        kmeans_noise(fields[:1], tags[:1], 2, np.random.default_rng(0))


# --- matrices --------------------------------------------------------------------------------

def test_cross_matrix_shape_and_outputs(tmp_path):
    calls = []

    def runner(tr, te):
        calls.append((tr, te))
        return 1.0 if tr == te else 0.5

    rep = cross_matrix(["point", "gc"], ["point", "block", "gc"], runner)
    assert np.array(rep.values).shape == (2, 3) and len(calls) == 6
    assert rep.values[1][2] == 1.0
    rep.write(tmp_path / "m")
    doc = json.loads((tmp_path / "m.json").read_text())
    jsonschema.validate(doc, json.loads((SCHEMAS / "matrix_report.schema.json").read_text()))
    assert doc["kind"] == "mode_matrix"
    rows = list(csv.reader(io.StringIO((tmp_path / "m.csv").read_text())))
    assert rows[0] == ["train\\test", "point", "block", "gc"]
    assert float(rows[2][3]) == 1.0
    assert (tmp_path / "m.txt").read_text().startswith("auc (mode)")


def test_eps_cross_one_by_one():
    rep = eps_cross([5.0], [5.0], lambda a, b: 0.75)
    assert rep.train_keys == ["5"] and rep.values == [[0.75]]
    assert rep.to_json()["kind"] == "eps_matrix"
