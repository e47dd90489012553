import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caplab.attacks import AttackSpec
from caplab.evaluation import (ConfusionTally, CorruptionReport, corruption_eval, localization_fraction,
                               localization_hits, metrics, saliency, write_corruption_csv,
                               write_metrics_csv)

from conftest import ConstantModel, LinearModel


def test_hand_built_ten_sample_tally():
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    preds = np.array([1, 1, 1, 0, 0, 0, 0, 0, 1, 1])
    m = metrics(preds, labels)
    assert m.accuracy == pytest.approx(0.7)
    np.testing.assert_array_equal(m.tally.tp, [4, 3])
    np.testing.assert_array_equal(m.tally.fp, [1, 2])
    np.testing.assert_array_equal(m.tally.fn, [2, 1])
    np.testing.assert_array_equal(m.tally.tn, [3, 4])
    np.testing.assert_allclose(m.specificity, [3 / 4, 4 / 6])
    np.testing.assert_allclose(m.f1, [8 / 11, 6 / 9])
    assert m.tally.total == 10


def test_all_correct():
    y = np.array([0, 1, 2, 1])
    m = metrics(y, y)
    assert m.accuracy == 1.0
    np.testing.assert_array_equal(m.f1, 1.0)


def test_absent_class_gives_nan_not_zero(tmp_path):
    m = metrics(np.array([0, 1, 1]), np.array([0, 1, 0]), num_classes=3)
    assert np.isnan(m.f1[2])
    assert m.specificity[2] == 1.0
    p = tmp_path / "m.csv"
    write_metrics_csv(p, m)
    assert p.read_text().splitlines()[3].endswith(",NAN")


def test_tally_sums_to_total(rng):
    preds, labels = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    t = ConfusionTally.from_predictions(preds, labels, 4)
    np.testing.assert_array_equal(t.tp + t.fp + t.tn + t.fn, 50)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_accuracy_is_support_weighted_recall(pairs):
    preds, labels = (np.array(v) for v in zip(*pairs))
    m = metrics(preds, labels, 4)
    t = m.tally
    support = t.tp + t.fn
    weighted = sum(t.tp[c] for c in range(4) if support[c]) / support.sum()
    assert m.accuracy == pytest.approx(weighted)


def test_metric_input_errors():
    with pytest.raises(ValueError):
        metrics(np.array([], int), np.array([], int))
    with pytest.raises(ValueError):
        metrics(np.array([0, 1]), np.array([0]))


def test_cce_ace_arithmetic(tmp_path):
    rep = CorruptionReport(
        {"brightness": np.array([0.1, 0.2, 0.3, 0.4, 0.5]), "contrast": np.array([0.0, 0.0, 0.0, 0.0, 0.5])},
        {"brightness": np.array([0.5, 0.5, 0.5, 0.5, 1.0]), "contrast": np.array([0.2, 0.4, 0.6, 0.8, 1.0])},
    )
    assert rep.cce("brightness") == pytest.approx(0.3)
    assert rep.cce("contrast") == pytest.approx(0.1)
    assert rep.ace("brightness") == pytest.approx(0.6)
    assert rep.ace("contrast") == pytest.approx(0.6)
    assert rep.mean_cce == pytest.approx(0.2)
    assert rep.mean_ace == pytest.approx(0.6)
    p = tmp_path / "c.csv"
    write_corruption_csv(p, rep)
    lines = p.read_text().splitlines()
    assert lines[0] == "kind,severity,clean_error,adv_error"
    assert lines[6] == "brightness,mean,0.3,0.6"
    assert lines[-1] == "all,mean,0.2,0.6"


def test_corruption_eval_on_constant_model(rng):
    x = rng.random((6, 16, 16)).astype(np.float32)
    y = np.array([0, 0, 0, 1, 1, 1])
    rep = corruption_eval(ConstantModel(), x, y, kinds=("brightness", "gaussian_noise"),
                          attack=AttackSpec(steps=2))
    # always predicts class 0 whatever the input
    for k in rep.kinds:
        np.testing.assert_array_equal(rep.clean_errors[k], 0.5)
        np.testing.assert_array_equal(rep.adv_errors[k], 0.5)


def test_saliency_of_linear_model_is_scaled_abs_weight(rng):
    w = rng.standard_normal((5, 5))
    m = LinearModel(w)
    s = saliency(m, rng.random((5, 5)), target=1)
    a = np.abs(w)
    np.testing.assert_allclose(s, (a - a.min()) / (a.max() - a.min()))
    assert s.min() == 0.0 and s.max() == 1.0


def test_flat_gradient_gives_zero_map(rng):
    np.testing.assert_array_equal(saliency(LinearModel(np.ones((4, 4))), rng.random((2, 4, 4)), target=0), 0.0)
    np.testing.assert_array_equal(saliency(ConstantModel(), rng.random((4, 4))), 0.0)


def test_saliency_is_deterministic(tiny_model, tiny_batch):
    x, _ = tiny_batch
    a = saliency(tiny_model, x)
    np.testing.assert_array_equal(a, saliency(tiny_model, x))
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1


def test_localization_hits():
    maps = np.zeros((3, 4, 4))
    maps[:, 0, 0] = 1.0
    lesion = np.zeros((3, 4, 4), bool)
    lesion[0, 0, 0] = True
    lesion[1, 1, 1] = True
    lung = np.zeros((3, 4, 4), bool)
    lung[:, :2, :2] = True
    np.testing.assert_array_equal(localization_hits(maps, lesion, lung), [True, False, False])


def test_localization_fraction_needs_positives(tiny_model, tiny_batch):
    x, _ = tiny_batch
    masks = np.zeros(x.shape, bool)
    with pytest.raises(ValueError):
        localization_fraction(tiny_model, x, np.zeros(6, int), masks, masks)
