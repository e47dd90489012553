import numpy as np
import pytest

from caplab import autodiff as ad
from caplab.attacks import (AttackError, AttackSpec, attack, fgsm, inner_max, inner_max_kl, mim, pgd,
                            rfgsm, with_steps)
from caplab.objectives import kl_loss
from caplab.vit import weight_hash

from conftest import ConstantModel, LinearModel

EPS = 8 / 255


def within_budget(x_adv, x, eps=EPS):
    return np.abs(x_adv.astype(np.float64) - x).max() <= eps + 1e-7 and x_adv.min() >= 0 and x_adv.max() <= 1


@pytest.mark.parametrize("method", ["fgsm", "rfgsm", "pgd", "mim"])
def test_budget_range_and_weights_untouched(method, tiny_model, tiny_batch):
    x, y = tiny_batch
    h = weight_hash(tiny_model)
    xa = attack(tiny_model, x, y, AttackSpec(method=method), np.random.default_rng(0))
    assert xa.shape == x.shape and within_budget(xa, x)
    assert weight_hash(tiny_model) == h
    assert all(p.grad is None for p in tiny_model.parameters())


def test_every_iterate_stays_in_budget(tiny_model, tiny_batch):
    x, y = tiny_batch
    seen = []
    pgd(tiny_model, x, y, AttackSpec(steps=6), np.random.default_rng(1),
        on_step=lambda i, xa: seen.append(within_budget(xa, x)))
    mim(tiny_model, x, y, AttackSpec(method="mim", steps=6), on_step=lambda i, xa: seen.append(within_budget(xa, x)))
    assert len(seen) == 12 and all(seen)


def test_pgd_one_step_equals_fgsm(tiny_model, tiny_batch):
    x, y = tiny_batch
    spec = AttackSpec(steps=1, step_size=EPS, random_start=False)
    np.testing.assert_array_equal(pgd(tiny_model, x, y, spec), fgsm(tiny_model, x, y, spec))


def test_mim_without_momentum_equals_pgd(tiny_model, tiny_batch):
    x, y = tiny_batch
    spec = AttackSpec(method="mim", momentum=0.0, steps=5)
    np.testing.assert_array_equal(mim(tiny_model, x, y, spec), pgd(tiny_model, x, y, spec, random_start=False))


def test_constant_model_leaves_input_alone(rng):
    x = rng.random((3, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 0])
    m = ConstantModel()
    np.testing.assert_array_equal(fgsm(m, x, y), x)
    np.testing.assert_array_equal(pgd(m, x, y, AttackSpec(random_start=False)), x)


def test_rfgsm_with_flat_model_is_random_sign_step(rng):
    x = rng.uniform(0.2, 0.8, (2, 16, 16)).astype(np.float32)
    out = rfgsm(ConstantModel(), x, np.array([0, 1]), AttackSpec(method="rfgsm"), np.random.default_rng(3))
    noise = np.random.default_rng(3).standard_normal(x.shape)
    np.testing.assert_allclose(out, x + EPS / 2 * np.sign(noise), atol=1e-7)


def test_rfgsm_is_seeded(tiny_model, tiny_batch):
    x, y = tiny_batch
    a = rfgsm(tiny_model, x, y, rng=np.random.default_rng(5))
    b = rfgsm(tiny_model, x, y, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_fgsm_on_linear_model_moves_along_sign_of_w(rng):
    w = rng.standard_normal((4, 4))
    x = rng.uniform(0.3, 0.7, (1, 4, 4))
    # label 1 means CE pushes the score w.x down
    out = fgsm(LinearModel(w), x, np.array([1]))
    np.testing.assert_allclose(out - x, -EPS * np.sign(w)[None], atol=1e-12)
    out0 = fgsm(LinearModel(w), x, np.array([0]))
    np.testing.assert_allclose(out0 - x, EPS * np.sign(w)[None], atol=1e-12)


def test_mim_and_pgd_agree_for_constant_gradient(rng):
    # linear scorer: the input gradient direction never changes, so momentum is irrelevant
    w = rng.standard_normal((4, 4))
    x = rng.uniform(0.3, 0.7, (1, 4, 4))
    spec = AttackSpec(method="mim", steps=2, step_size=EPS / 2)
    np.testing.assert_array_equal(mim(LinearModel(w), x, np.array([0]), spec),
                                  pgd(LinearModel(w), x, np.array([0]), spec, random_start=False))


def test_inner_max_from_zero_increases_kl(tiny_model, tiny_batch):
    x, _ = tiny_batch
    xa = inner_max_kl(tiny_model, x, AttackSpec(steps=5, random_start=False), start_scale=0.0)
    assert within_budget(xa, x)
    with ad.no_grad():
        p = ad.softmax(tiny_model(x))
        after = kl_loss(p, ad.softmax(tiny_model(xa))).item()
    assert after >= 0.0 and after > 0


def test_inner_max_flat_model(rng):
    x = rng.random((2, 16, 16)).astype(np.float32)
    xa = inner_max(ConstantModel(), x, AttackSpec(random_start=False), start_scale=0.0)
    np.testing.assert_array_equal(xa, x)


def test_inner_max_ce_on_argmax_matches_pgd(tiny_model, tiny_batch):
    x, _ = tiny_batch
    spec = AttackSpec(steps=4, random_start=False)
    y_hat = tiny_model.predict(x)
    np.testing.assert_array_equal(inner_max(tiny_model, x, spec, metric="ce", start_scale=0.0),
                                  pgd(tiny_model, x, y_hat, spec))


def test_inner_max_random_start_is_small(tiny_model, tiny_batch):
    x, _ = tiny_batch
    starts = []
    inner_max(tiny_model, x, AttackSpec(steps=1, random_start=False), rng=np.random.default_rng(0),
              on_step=lambda i, xa: None)
    spec = AttackSpec(steps=1, step_size=1e-6, random_start=False)
    xa = inner_max(tiny_model, x, spec, rng=np.random.default_rng(0), on_step=lambda i, xa: starts.append(xa))
    assert np.abs(xa - x).max() <= EPS / 4 + 1e-6


def test_non_finite_gradient_is_an_error(rng):
    class NanModel(ConstantModel):
        def __call__(self, x):
            return ad.scale(ad.concat([x[:, :1, 0], x[:, :1, 0]], axis=1), float("nan"))

    x = rng.random((2, 4, 4)).astype(np.float32)
    with pytest.raises(AttackError):
        fgsm(NanModel(), ad.Tensor(x).data, np.array([0, 1]))


@pytest.mark.parametrize("kw", [dict(epsilon=0), dict(epsilon=1.5), dict(step_size=1.0), dict(steps=0),
                                dict(method="cw"), dict(loss="hinge")])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        AttackSpec(**kw)


def test_inputs_must_be_images(tiny_model):
    with pytest.raises(ValueError):
        fgsm(tiny_model, np.full((1, 16, 16), 2.0, np.float32), np.array([0]))


def test_with_steps():
    assert with_steps(AttackSpec(), 3).steps == 3
