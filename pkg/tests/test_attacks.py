import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advforensics.attacks import (BIM, FGSM, L2, LINF, LINF_FINE_GRID, LINF_GRID, PGD, AttackConfig, attack_batch, bim, craft,
                                  default_grid, export_result, fgsm, iterate_attack, pgd, project,
                                  random_start, verify_constraint, with_epsilon)
from advforensics.detectors import input_gradient, loss_value, predict_labels, score_batch
from advforensics.metrics import asr_from_arrays
from advforensics.persist import load_png
from advforensics.synthdata import REAL, LabeledImage, stack
from graphs import linear_detector


@pytest.fixture(scope="module")
def batch(small_corpus):
    held = small_corpus[1]
    return held[:20] + held[-20:]


# -- config ----------------------------------------------------------------------------------


def test_config_forcing_rules():
    f = AttackConfig(FGSM, steps=7, relative_step=0.3)
    assert (f.steps, f.relative_step, f.random_start) == (1, 1.0, False)
    b = AttackConfig(BIM)
    assert (b.steps, b.relative_step, b.random_start) == (10, 0.2, False)
    p = AttackConfig(PGD)
    assert (p.steps, p.random_start) == (40, True)
    assert p.relative_step == pytest.approx(1 / 30)
    assert AttackConfig(BIM, epsilon=0.1).alpha == pytest.approx(0.02)


@pytest.mark.parametrize("kw", [dict(method="CW"), dict(norm="L1"), dict(epsilon=-1.0),
                                dict(method=BIM, steps=0), dict(method=BIM, relative_step=1.5)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_default_grid_covers_methods_norms_budgets():
    grid = default_grid()
    assert len(grid) == 3 * 2 * 8
    assert {c.tag() for c in grid} == {c.tag() for c in default_grid()}
    assert with_epsilon(AttackConfig(BIM, steps=5), 0.5).steps == 5


# -- geometry --------------------------------------------------------------------------------


def test_project_examples():
    np.testing.assert_allclose(project([0.3, -0.01], LINF, 0.1), [0.1, -0.01])
    np.testing.assert_allclose(project(np.array([3.0, 4.0]), L2, 1.0), [0.6, 0.8])
    d = np.array([0.01, -0.02])
    assert np.array_equal(project(d, L2, 1.0), d)
    assert np.array_equal(project(d, LINF, 1.0), d)
    with pytest.raises(ValueError):
        project(d, LINF, -0.1)


@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-2, 2)), st.floats(0, 1.5), st.sampled_from([LINF, L2]))
def test_project_lands_in_ball_and_is_idempotent(d, eps, norm):
    p = project(d, norm, eps)
    for i in range(len(d)):
        n = np.abs(p[i]).max() if norm == LINF else np.linalg.norm(p[i])
        assert n <= eps * (1 + 1e-12)
    np.testing.assert_allclose(project(p, norm, eps), p, atol=1e-15)


def test_verify_constraint_examples():
    x = np.full((3, 4, 4), 0.5)
    assert verify_constraint(x, x, LINF, 0.0) and verify_constraint(x, x, L2, 0.0)
    bad = x.copy()
    bad[0, 0, 0] += 2 / 255
    assert not verify_constraint(x, bad, LINF, 0.0, quantized=True)
    assert not verify_constraint(x, bad, LINF, 1 / 255, quantized=True)
    assert verify_constraint(x, bad, LINF, 1.6 / 255, quantized=True)
    with pytest.raises(ValueError):
        verify_constraint(x, x[:2], LINF, 0.1)


def test_random_start_is_seeded_and_inside_ball():
    shape = (3, 2, 4, 4)
    for norm in (LINF, L2):
        a = random_start(shape, norm, 0.3, [np.random.default_rng([5, i]) for i in range(3)])
        b = random_start(shape, norm, 0.3, [np.random.default_rng([5, i]) for i in range(3)])
        assert np.array_equal(a, b)
        assert np.all(project(a, norm, 0.3) == a)


# -- closed forms on a linear model ---------------------------------------------------------------


def test_fgsm_logistic_closed_form():
    det = linear_detector([2.0, -1.0])
    x = np.array([0.3, 0.95])
    res = fgsm(det, LabeledImage(x, REAL, "p"), AttackConfig(FGSM, LINF, 0.1))
    np.testing.assert_allclose(res.adversarial, np.clip(x + 0.1 * np.array([1.0, -1.0]), 0, 1))
    # the sign used matches the autodiff gradient
    _, g = input_gradient(det, x[None], [0.0])
    assert np.array_equal(np.sign(g[0]), [1.0, -1.0])
    # clip at the box edge
    res = fgsm(det, LabeledImage(np.array([0.95, 0.05]), REAL, "q"), AttackConfig(FGSM, LINF, 0.1))
    np.testing.assert_allclose(res.adversarial, [1.0, 0.0])


def test_fgsm_l2_closed_form():
    det = linear_detector([3.0, -4.0])
    x = np.array([0.5, 0.5])
    res = fgsm(det, LabeledImage(x, REAL, "p"), AttackConfig(FGSM, L2, 0.1))
    np.testing.assert_allclose(res.adversarial, x + 0.1 * np.array([0.6, -0.8]), atol=1e-12)


def test_l2_zero_gradient_is_flagged():
    det = linear_detector([0.0, 0.0])
    x = np.array([0.5, 0.5])
    for method in (FGSM, BIM):
        res = attack_batch(det, [LabeledImage(x, REAL, "z")], AttackConfig(method, L2, 0.5), with_quality=False)[0]
        assert np.array_equal(res.adversarial, x)
        assert res.flag == "zero-gradient" and not res.success


def test_method_mismatch_rejected(trained_cnn, batch):
    with pytest.raises(ValueError):
        pgd(trained_cnn, batch[0], AttackConfig(FGSM))
    with pytest.raises(ValueError):
        bim(trained_cnn, batch[0], AttackConfig(PGD))


# -- detector attacks ----------------------------------------------------------------------------


@pytest.mark.parametrize("method", [FGSM, BIM, PGD])
@pytest.mark.parametrize("norm", [LINF, L2])
def test_zero_budget_is_identity(trained_cnn, batch, method, norm):
    x, y = stack(batch[:4])
    adv, stuck = craft(trained_cnn, x, y, AttackConfig(method, norm, 0.0, steps=3 if method != FGSM else None))
    assert np.array_equal(adv, x)
    assert not stuck.any()


def test_one_step_bim_equals_fgsm(trained_probe, batch):
    x, y = stack(batch)
    for norm, eps in ((LINF, 4 / 255), (L2, 1.0)):
        a, _ = craft(trained_probe, x, y, AttackConfig(FGSM, norm, eps))
        b, _ = craft(trained_probe, x, y, AttackConfig(BIM, norm, eps, steps=1, relative_step=1.0))
        assert np.array_equal(a, b)


def test_bim_loss_beats_fgsm(trained_probe, batch):
    x, y = stack(batch)
    eps = 1e-3
    a, _ = craft(trained_probe, x, y, AttackConfig(FGSM, LINF, eps))
    b, _ = craft(trained_probe, x, y, AttackConfig(BIM, LINF, eps))
    la, lb = loss_value(trained_probe, a, y), loss_value(trained_probe, b, y)
    assert np.mean(lb >= la - 1e-12) >= 0.9


@pytest.mark.parametrize("method", [BIM, PGD])
def test_final_loss_not_below_initial(trained_cnn, batch, method):
    x, y = stack(batch)
    adv, _ = craft(trained_cnn, x, y, AttackConfig(method, LINF, 2 / 255, seed=3))
    assert np.mean(loss_value(trained_cnn, adv, y) >= loss_value(trained_cnn, x, y)) >= 0.99


def test_attacks_push_scores_toward_the_wrong_class(trained_cnn, batch):
    x, y = stack(batch)
    adv, _ = craft(trained_cnn, x, y, AttackConfig(BIM, LINF, 2 / 255))
    d = score_batch(trained_cnn, adv) - score_batch(trained_cnn, x)
    assert np.all(d[y == 0] >= -1e-12) and np.all(d[y == 1] <= 1e-12)


@pytest.mark.parametrize("cfg", default_grid(seed=2)[::5], ids=lambda c: c.tag())
def test_outputs_in_box_and_ball(trained_probe, batch, cfg):
    x, y = stack(batch[:10])
    adv, _ = craft(trained_probe, x, y, cfg)
    assert adv.min() >= 0 and adv.max() <= 1
    for i in range(len(x)):
        assert verify_constraint(x[i], adv[i], cfg.norm, cfg.epsilon)


def test_pgd_seeding(trained_cnn, batch):
    x, y = stack(batch[:6])
    a, _ = craft(trained_cnn, x, y, AttackConfig(PGD, LINF, 4 / 255, seed=1))
    b, _ = craft(trained_cnn, x, y, AttackConfig(PGD, LINF, 4 / 255, seed=1))
    c, _ = craft(trained_cnn, x, y, AttackConfig(PGD, LINF, 4 / 255, seed=2))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    # a sample's start depends on its index, not on the batch it rides in
    d, _ = craft(trained_cnn, x[3:], y[3:], AttackConfig(PGD, LINF, 4 / 255, seed=1), indices=[3, 4, 5])
    assert np.array_equal(a[3:], d)


def test_iterate_attack_on_quadratic():
    # gradient ascent on -|x - c|^2 should walk toward c until the ball stops it
    c = np.full((1, 4), 0.9)
    x = np.full((1, 4), 0.5)
    out, _ = iterate_attack(x, lambda z: -2 * (z - c), AttackConfig(BIM, LINF, 0.1, steps=20, relative_step=0.1))
    np.testing.assert_allclose(out, 0.6)


def test_pgd_asr_monotone_in_budget(trained_cnn, batch):
    x, y = stack(batch)
    before = predict_labels(score_batch(trained_cnn, x))
    rates = []
    for eps in sorted(LINF_FINE_GRID + LINF_GRID):
        adv, _ = craft(trained_cnn, x, y, AttackConfig(PGD, LINF, eps, seed=0))
        rates.append(asr_from_arrays(before, predict_labels(score_batch(trained_cnn, adv)), y))
    assert all(b >= a for a, b in zip(rates, rates[1:])), rates


# -- batch plumbing ------------------------------------------------------------------------------


def test_attack_batch_empty(trained_cnn):
    assert attack_batch(trained_cnn, [], AttackConfig()) == []


def test_attack_batch_results(trained_cnn, trained_probe, batch):
    cfg = AttackConfig(PGD, LINF, 4 / 255, seed=4)
    res = attack_batch(trained_cnn, batch, cfg, reference=trained_probe)
    assert [r.original_id for r in res] == [im.id for im in batch]
    again = attack_batch(trained_cnn, batch, cfg, reference=trained_probe)
    assert [r.success for r in res] == [r.success for r in again]
    for r, im in zip(res, batch):
        assert r.success == (r.pred_before != r.pred_after)
        assert set(r.quality) == {"psnr", "ssim", "feature_distance"}
        assert r.label == im.label


def test_single_image_wrappers_match_batch(trained_cnn, batch):
    cfg = AttackConfig(BIM, L2, 1.0)
    one = bim(trained_cnn, batch[5], cfg)
    many = attack_batch(trained_cnn, batch[:8], cfg)
    np.testing.assert_allclose(one.adversarial, many[5].adversarial, atol=1e-12)


def test_failures_are_flagged_not_raised(trained_cnn):
    odd = LabeledImage(np.zeros((3, 16, 16)), REAL, "small")
    res = attack_batch(trained_cnn, [odd], AttackConfig())
    assert len(res) == 1 and res[0].flag.startswith("error") and not res[0].success


def test_export_result_round_trip(trained_cnn, batch, tmp_path):
    cfg = AttackConfig(FGSM, LINF, 4 / 255)
    im = batch[0]
    res = fgsm(trained_cnn, im, cfg)
    png = export_result(res, im.pixels, tmp_path)
    back = load_png(png)
    assert verify_constraint(im.pixels, back, LINF, cfg.epsilon, quantized=True)
    side = json.loads(png.with_suffix(".json").read_text())
    assert side["original_id"] == im.id and side["config"]["method"] == FGSM
    assert verify_constraint(im.pixels, res.adversarial, LINF, cfg.epsilon)
    assert side["linf"] == pytest.approx(cfg.epsilon, abs=1e-15) or side["linf"] < cfg.epsilon
