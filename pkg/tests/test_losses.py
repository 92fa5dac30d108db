from __future__ import annotations

import numpy as np

from splatfield.losses import cosine_feature_loss, l1_loss, rgb_loss, ssim


def numerical_gradient(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def test_l1_forward_value():
    a = np.array([[[0.0], [1.0]], [[0.5], [0.5]]])
    b = np.array([[[0.5], [0.0]], [[0.5], [0.5]]])
    loss, _ = l1_loss(a, b)
    assert abs(loss - (0.5 + 1.0) / 4.0) < 1e-12


def test_l1_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.1, 0.9, size=(6, 7, 3))
    y = rng.uniform(0.1, 0.9, size=(6, 7, 3))
    _, grad = l1_loss(x, y)
    num = numerical_gradient(lambda v: l1_loss(v, y)[0], x.copy())
    np.testing.assert_allclose(grad, num, atol=1e-8)


def test_ssim_identical_images_is_one():
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    value, grad = ssim(img, img.copy())
    assert abs(value - 1.0) < 1e-9
    # at the maximum the gradient vanishes
    assert np.max(np.abs(grad)) < 1e-7


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(20, 20, 1))
    noisy = np.clip(img + rng.normal(0, 0.2, img.shape), 0, 1)
    assert ssim(img, noisy)[0] < ssim(img, img)[0]


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.2, 0.8, size=(14, 12, 2))
    y = rng.uniform(0.2, 0.8, size=(14, 12, 2))
    _, grad = ssim(x, y)
    num = numerical_gradient(lambda v: ssim(v, y)[0], x.copy())
    np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-9)


def test_rgb_loss_combination():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(16, 16, 3))
    y = rng.uniform(size=(16, 16, 3))
    lam = 0.2
    loss, grad, parts = rgb_loss(x, y, lam)
    assert abs(loss - ((1 - lam) * parts["l1"] + lam * (1 - parts["ssim"]))) < 1e-12
    num = numerical_gradient(lambda v: rgb_loss(v, y, lam)[0], x.copy())
    np.testing.assert_allclose(grad, num, rtol=1e-3, atol=1e-7)


def test_cosine_loss_aligned_rows_is_zero():
    t = np.eye(4)[:3]
    pred = 2.5 * t  # scaling must not matter
    loss, grad = cosine_feature_loss(pred, t)
    assert abs(loss) < 1e-12
    # gradient is orthogonal to each row (cosine is scale invariant)
    np.testing.assert_allclose(np.einsum("nd,nd->n", grad, pred), 0.0, atol=1e-12)


def test_cosine_loss_opposed_rows_is_two():
    t = np.array([[1.0, 0.0]])
    loss, _ = cosine_feature_loss(-3.0 * t, t)
    assert abs(loss - 2.0) < 1e-12


def test_cosine_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    d = 6
    pred = rng.normal(size=(10, d))
    t = rng.normal(size=(10, d))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    mask = rng.uniform(size=10) > 0.3
    _, grad = cosine_feature_loss(pred, t, mask)
    num = numerical_gradient(lambda v: cosine_feature_loss(v, t, mask)[0], pred.copy())
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-10)


def test_cosine_loss_empty_mask():
    loss, grad = cosine_feature_loss(np.ones((4, 3)), np.ones((4, 3)), np.zeros(4, dtype=bool))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_cosine_loss_masked_rows_get_zero_gradient():
    rng = np.random.default_rng(6)
    pred = rng.normal(size=(5, 4))
    t = rng.normal(size=(5, 4))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    mask = np.array([True, False, True, False, False])
    _, grad = cosine_feature_loss(pred, t, mask)
    assert np.all(grad[~mask] == 0.0)
    assert np.all(np.any(grad[mask] != 0.0, axis=1))
