import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdml.data import HsiCube, LabelMap
from pdml.errors import ConfigError, RenderError
from pdml.metrics import (center_embeddings, confusion_matrix, default_palette,
                          dump_embeddings, evaluate, metrics_from_confusion, predict_map,
                          read_ppm, render_map)
from pdml.model import BackboneConfig, init_params


class TestMetrics:
    def test_two_class_example(self):
        m = metrics_from_confusion([[40, 10], [20, 30]])
        assert m.oa == pytest.approx(0.70)
        assert m.aa == pytest.approx(0.70)
        assert m.kappa == pytest.approx(0.40)

    def test_perfect(self):
        truth = np.array([1, 2, 3, 3, 2])
        m = metrics_from_confusion(confusion_matrix(truth, truth, 3))
        assert (m.oa, m.aa, m.kappa) == (1.0, 1.0, 1.0)

    def test_constant_predictor_has_zero_kappa(self):
        truth = np.array([1, 1, 1, 2, 3, 3])
        m = metrics_from_confusion(confusion_matrix(truth, np.ones(6, int), 3))
        assert m.oa == pytest.approx(0.5)
        assert m.kappa == pytest.approx(0.0, abs=1e-15)
        assert m.aa == pytest.approx(1 / 3)

    def test_single_class_agreement(self):
        m = metrics_from_confusion([[5, 0], [0, 0]])
        assert m.kappa == 1.0 and m.aa == 1.0 and np.isnan(m.per_class[1])
        assert m.to_dict()["per_class"] == [1.0, None]

    def test_empty(self):
        with pytest.raises(ConfigError):
            metrics_from_confusion(np.zeros((2, 2), int))

    def test_confusion_rows_are_truth(self):
        cm = confusion_matrix([1, 1, 2], [2, 2, 2], 2)
        assert cm.tolist() == [[0, 2], [0, 1]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_invariant_to_label_permutation(self, k, seed):
        rng = np.random.default_rng(seed)
        truth, pred = rng.integers(1, k + 1, 80), rng.integers(1, k + 1, 80)
        perm = rng.permutation(k) + 1
        a = metrics_from_confusion(confusion_matrix(truth, pred, k))
        b = metrics_from_confusion(confusion_matrix(perm[truth - 1], perm[pred - 1], k))
        assert a.oa == pytest.approx(b.oa) and a.kappa == pytest.approx(b.kappa)
        assert a.aa == pytest.approx(b.aa)
        assert -1 <= a.kappa <= 1 and 0 <= a.oa <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_invariant_to_sample_order(self, k, seed):
        rng = np.random.default_rng(seed)
        truth, pred = rng.integers(1, k + 1, 50), rng.integers(1, k + 1, 50)
        order = rng.permutation(50)
        np.testing.assert_array_equal(confusion_matrix(truth, pred, k),
                                      confusion_matrix(truth[order], pred[order], k))


class TestMaps:
    def test_single_unlabeled_pixel(self):
        blob = render_map(np.zeros((1, 1), int), default_palette(3))
        assert blob == b"P6\n1 1\n255\n\x00\x00\x00"

    def test_dimensions(self):
        blob = render_map(np.ones((3, 5), int), default_palette(2))
        assert blob.startswith(b"P6\n5 3\n255\n")
        assert read_ppm(blob).shape == (3, 5, 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 9), st.integers(1, 9), st.integers(0, 999))
    def test_palette_round_trip(self, k, h, w, seed):
        pal = default_palette(k)
        pred = np.random.default_rng(seed).integers(0, k + 1, size=(h, w))
        img = read_ppm(render_map(pred, pal))
        np.testing.assert_array_equal(img, pal[pred])

    def test_palette_colors_distinct(self):
        pal = default_palette(12)
        assert len({tuple(c) for c in pal}) == 13 and tuple(pal[0]) == (0, 0, 0)

    def test_out_of_palette(self):
        with pytest.raises(RenderError):
            render_map(np.array([[4]]), default_palette(3))

    def test_predict_map_shape(self):
        p = init_params(BackboneConfig(d=3, n_classes=2, r=4), 0)
        cube = HsiCube(np.random.default_rng(0).normal(size=(4, 6, 3)))
        pred = predict_map(p, cube, 5)
        assert pred.shape == (4, 6) and set(np.unique(pred)) <= {1, 2}


@pytest.fixture
def small():
    rng = np.random.default_rng(2)
    cube = HsiCube(rng.normal(size=(6, 6, 3)))
    labels = LabelMap(rng.integers(1, 4, size=(6, 6)).astype(np.int32), 3)
    params = init_params(BackboneConfig(d=3, n_classes=3, r=4), 1)
    coords = np.array([[0, 0], [2, 3], [5, 5], [4, 1]])
    return params, cube, labels, coords


class TestEmbeddings:
    def test_csv_round_trip(self, small, tmp_path):
        params, cube, labels, coords = small
        dump_embeddings(params, cube, labels, coords, 5, tmp_path / "e.csv")
        with open(tmp_path / "e.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["label", "m0", "m1", "m2", "m3", "v0", "v1", "v2", "v3"]
        assert len(rows) == 5 and all(len(r) == 9 for r in rows)
        m, v = center_embeddings(params, cube, coords, 5)
        back = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        np.testing.assert_allclose(back, np.hstack([m, v]), rtol=0, atol=1e-9)
        assert [int(r[0]) for r in rows[1:]] == labels.labels[coords[:, 0], coords[:, 1]].tolist()
        assert np.all(v > 0)

    def test_evaluate_rejects_unlabeled(self, small):
        params, cube, labels, coords = small
        labels.labels[0, 0] = 0
        with pytest.raises(ConfigError):
            evaluate(params, cube, labels, coords, 5)
