import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.fft import dctn

from advforensics.autodiff import forward_eval, grad_check
from advforensics.detectors import (COMPACT_CNN, FEATURE_PROBE, PATCH_CUT, build_compact_cnn,
                                    build_detector, build_feature_probe, embed_batch, highpass_patch_filters,
                                    input_gradient, load_detector, loss_value, predict_label, predict_labels,
                                    save_detector, score, score_batch, train_detector)
from advforensics.metrics import auc_roc
from advforensics.synthdata import FAKE, REAL, LabeledImage, stack
from graphs import linear_detector
from oracles import numeric_grad


def _image(seed=0):
    return np.random.default_rng(seed).random((3, 32, 32))


# -- builders --------------------------------------------------------------------------


def test_probe_has_one_trainable_layer():
    det = build_feature_probe(0, 64)
    assert det.trainable == ["head.w", "head.b"]
    assert det.n_trainable() == 65
    assert set(det.extractor_params) == det.frozen
    assert sum(n.kind == "conv2d" for n in det.graph.nodes) >= 2


def test_probe_feature_dim_validated():
    with pytest.raises(ValueError):
        build_feature_probe(0, 4)
    assert embed_batch(build_feature_probe(0, 8), _image()).shape == (1, 8)


def test_probe_seeds():
    a, b, c = build_feature_probe(0), build_feature_probe(0), build_feature_probe(1)
    x = _image()
    assert not np.array_equal(embed_batch(a, x), embed_batch(c, x))
    for k in a.frozen:
        assert np.array_equal(a.graph.params[k].value, b.graph.params[k].value)
    assert score(a, x) == score(b, x)


def test_patch_filters_live_in_top_band():
    w = highpass_patch_filters(np.random.default_rng(0), 4, 3, 16, PATCH_CUT)
    c = dctn(w, axes=(-2, -1), norm="ortho")
    low = np.add.outer(np.arange(16), np.arange(16)) < PATCH_CUT
    assert np.abs(c[..., low]).max() < 1e-12
    assert np.allclose(np.sum(w * w, axis=(1, 2, 3)), 2.0)


def test_cnn_first_layer_keeps_resolution():
    det = build_compact_cnn(0)
    first = next(n for n in det.graph.nodes if n.kind == "conv2d")
    assert first.attrs["stride"] == 1
    assert det.graph.shape(first.id)[1:] == (32, 32)
    assert not any(n.kind == "avgpool2d" and n.id < first.id for n in det.graph.nodes)
    assert sum(n.kind == "conv2d" for n in det.graph.nodes) >= 3
    out = forward_eval(det.graph, {"image": _image()[None]}, outputs=[first.id])[first.id]
    assert out.shape[-2:] == (32, 32)


def test_cnn_determinism_and_size():
    a, b = build_compact_cnn(3), build_compact_cnn(3)
    for k in a.graph.params:
        assert np.array_equal(a.graph.params[k].value, b.graph.params[k].value)
    assert a.frozen == set()
    assert a.n_trainable() > build_feature_probe(0).n_trainable()


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        build_detector("ResNet", 0)


# -- scoring --------------------------------------------------------------------------------


@given(st.integers(0, 1000))
def test_scores_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    x = r.random((4, 3, 32, 32)) * r.choice([1.0, 0.0, 0.5])
    for det in (build_feature_probe(seed % 3), build_compact_cnn(seed % 3)):
        s = score_batch(det, x)
        assert np.all((s >= 0) & (s <= 1))


def test_score_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        score(build_compact_cnn(0), np.zeros((3, 16, 16)))


def test_scores_independent_of_batch_order(trained_cnn):
    x = np.random.default_rng(0).random((6, 3, 32, 32))
    perm = np.array([3, 0, 5, 1, 4, 2])
    s = score_batch(trained_cnn, x)
    np.testing.assert_array_equal(score_batch(trained_cnn, x[perm]), s[perm])
    assert score(trained_cnn, x[2]) == s[2]


def test_predict_label_tie_rule():
    assert predict_label(0.7) == FAKE
    assert predict_label(0.5) == FAKE
    assert predict_label(0.2) == REAL
    assert list(predict_labels([0.5, 0.49])) == [FAKE, REAL]
    with pytest.raises(ValueError):
        predict_label(0.5, threshold=1.0)


@pytest.mark.parametrize("family", [FEATURE_PROBE, COMPACT_CNN])
def test_input_gradient_matches_finite_differences(family):
    det = build_detector(family, 0)
    if family == FEATURE_PROBE:
        det.graph.params["head.w"].value = np.random.default_rng(0).standard_normal((1, 64))
    x = _image(1)[None]
    y = np.array([1.0])
    _, g = input_gradient(det, x, y)
    rng = np.random.default_rng(2)
    coords = [tuple(rng.integers(0, s) for s in x.shape) for _ in range(12)]
    for c in coords:
        def f(v, c=c):
            xx = x.copy()
            xx[c] = v
            return float(loss_value(det, xx, y)[0])

        num = numeric_grad(lambda a: f(a[0]), np.array([x[c]]))[0]
        assert abs(num - g[c]) <= 1e-4 * max(abs(num), abs(g[c]), 1e-6)


def test_input_gradient_is_per_sample(trained_probe):
    x = np.random.default_rng(4).random((3, 3, 32, 32))
    y = np.array([0.0, 1.0, 1.0])
    _, g_all = input_gradient(trained_probe, x, y)
    _, g_one = input_gradient(trained_probe, x[1:2], y[1:2])
    np.testing.assert_allclose(g_all[1], g_one[0], rtol=1e-12, atol=1e-15)


def test_detector_graph_passes_grad_check():
    det = build_compact_cnn(0, input_shape=(3, 8, 8))
    feeds = {"image": np.random.default_rng(0).random((2, 3, 8, 8)), "label": [0.0, 1.0]}
    assert grad_check(det.graph, "loss", feeds, inputs=["image"]).passed


# -- training --------------------------------------------------------------------------------


def test_separable_toy_reaches_full_accuracy():
    r = np.random.default_rng(0)
    pts = r.standard_normal((80, 2))
    lab = (pts[:, 0] + pts[:, 1] > 0).astype(int)
    pts += np.where(lab[:, None] == 1, 0.5, -0.5)
    data = [LabeledImage.__new__(LabeledImage) for _ in range(80)]
    for im, p, l in zip(data, pts, lab):
        im.pixels, im.label, im.id = p, int(l), ""
    det = train_detector(linear_detector([0.0, 0.0]), data, epochs=50, lr=0.5, seed=0)
    assert np.mean(predict_labels(score_batch(det, pts)) == lab) == 1.0


def test_single_class_rejected(small_corpus):
    train, _ = small_corpus
    with pytest.raises(ValueError):
        train_detector(build_feature_probe(0), [im for im in train if im.label == REAL], epochs=1)
    with pytest.raises(ValueError):
        train_detector(build_feature_probe(0), train, epochs=1, lr=0)


def test_zero_epochs_returns_unchanged(small_corpus):
    det = build_compact_cnn(0)
    out = train_detector(det, small_corpus[0], epochs=0)
    for k in det.graph.params:
        assert np.array_equal(det.graph.params[k].value, out.graph.params[k].value)


def test_probe_training_keeps_extractor_and_learns(trained_probe, small_corpus):
    fresh = build_feature_probe(0)
    for k in fresh.frozen:
        assert np.array_equal(fresh.graph.params[k].value, trained_probe.graph.params[k].value)
    losses = trained_probe.metadata["epoch_losses"]
    assert losses[-1] <= losses[0]
    x, y = stack(small_corpus[1])
    assert auc_roc(score_batch(trained_probe, x), y) >= 0.95


def test_cnn_training_loss_decreases(trained_cnn):
    losses = trained_cnn.metadata["epoch_losses"]
    assert losses[-1] <= losses[0]


def test_training_is_reproducible(small_corpus):
    train = small_corpus[0][:64] + small_corpus[0][-64:]
    a = train_detector(build_compact_cnn(1), train, epochs=2, lr=0.1, seed=5, augment=("flip", "noise", "jpeg"))
    b = train_detector(build_compact_cnn(1), train, epochs=2, lr=0.1, seed=5, augment=("flip", "noise", "jpeg"))
    for k in a.graph.params:
        assert np.array_equal(a.graph.params[k].value, b.graph.params[k].value)
    assert a.metadata["augment"] == ["noise", "flip", "jpeg"]


# -- checkpoints ----------------------------------------------------------------------------


@pytest.mark.parametrize("fixture", ["trained_probe", "trained_cnn"])
def test_checkpoint_round_trip(fixture, request, tmp_path):
    det = request.getfixturevalue(fixture)
    save_detector(det, tmp_path / "d.json")
    back = load_detector(tmp_path / "d.json")
    assert back.family == det.family and back.frozen == det.frozen and back.threshold == det.threshold
    x = np.random.default_rng(0).random((4, 3, 32, 32))
    np.testing.assert_array_equal(score_batch(back, x), score_batch(det, x))
