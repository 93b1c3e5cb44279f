"""Tests for the image encoder, classifier head, saliency and localization."""

import numpy as np
import pytest

from twostream import tensor as T
from twostream import vision as V
from twostream.errors import ShapeError


def rand_image(rng, size=64):
    return rng.random(size=(3, size, size))


# ---------------------------------------------------------------------------
# forward / scores


def test_scores_are_probability_vector():
    rng = np.random.default_rng(0)
    p = V.init_vision_params(rng, 7)
    _, scores = V.image_forward(rand_image(rng), p)
    assert np.all(scores.scores >= 0)
    assert abs(scores.scores.sum() - 1.0) < 1e-9


def test_zero_params_give_uniform_scores():
    rng = np.random.default_rng(1)
    p = V.init_vision_params(rng, 5)
    for arr in p.to_dict().values():
        arr[:] = 0.0
    _, scores = V.image_forward(rand_image(rng), p)
    assert np.allclose(scores.scores, 0.2)


def test_class_scores_rejects_non_simplex():
    with pytest.raises(ValueError):
        V.ClassScores(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        V.ClassScores(np.array([-0.1, 1.1]))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_vision_gradients(seed):
    rng = np.random.default_rng(seed)
    imgs = rng.random(size=(2, 3, 20, 20))
    labels = np.array([seed % 4, (seed + 1) % 4])

    def f(params):
        vp = V.VisionParams.from_dict(params)
        _, logits, cache = V.vision_forward(imgs, vp)
        loss, dlogits = T.softmax_cross_entropy_batch(logits, labels)
        grads, _ = V.vision_backward(None, dlogits, cache)
        return loss, grads

    p = V.init_vision_params(rng, 4)
    err = T.grad_check(f, p.to_dict(), rng=rng, max_coords_per_param=6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# saliency


def test_saliency_nonnegative():
    rng = np.random.default_rng(2)
    p = V.init_vision_params(rng, 4)
    sal = V.saliency_map(rand_image(rng), p)
    assert sal.shape == (64, 64)
    assert np.all(sal >= 0)


def test_saliency_zero_classifier_weights_gives_zero_map():
    rng = np.random.default_rng(3)
    p = V.init_vision_params(rng, 4)
    p.cls_w[:] = 0.0
    p.cls_b[:] = 0.0
    sal = V.saliency_map(rand_image(rng), p)
    assert np.all(sal == 0.0)


# ---------------------------------------------------------------------------
# extract_box


def brute_force_components(mask):
    """4-connected components by BFS; independent of scipy."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and not seen[sy, sx]:
                stack = [(sy, sx)]
                seen[sy, sx] = True
                comp = []
                while stack:
                    y, x = stack.pop()
                    comp.append((y, x))
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(comp)
    return comps


def test_extract_box_single_bright_pixel():
    sal = np.zeros((64, 64))
    sal[10, 10] = 1.0
    box, fallback = V.extract_box(sal)
    assert not fallback
    # one pixel plus a 5% (3 px) margin each side
    assert (box.x0, box.y0, box.x1, box.y1) == (7, 7, 14, 14)
    assert box.x0 <= 10 < box.x1 and box.y0 <= 10 < box.y1


def test_extract_box_uniform_saliency_full_image():
    box, fallback = V.extract_box(np.ones((64, 64)))
    assert not fallback
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 64, 64)


def test_extract_box_zero_map_falls_back_to_full_image():
    box, fallback = V.extract_box(np.zeros((32, 32)))
    assert fallback
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 0, 32, 32)


def test_extract_box_prefers_larger_component():
    sal = np.zeros((64, 64))
    sal[40:43, 40:43] = 1.0  # size 9
    sal[5:7, 5:7] = 1.0  # size 4
    comps = brute_force_components(sal > 0.25)
    largest = max(comps, key=len)
    ys = [y for y, _ in largest]
    xs = [x for _, x in largest]
    assert (min(ys), min(xs)) == (40, 40)
    box, _ = V.extract_box(sal, margin_frac=0.0)
    assert (box.x0, box.y0, box.x1, box.y1) == (40, 40, 43, 43)


def test_extract_box_matches_bruteforce_components():
    rng = np.random.default_rng(4)
    for _ in range(10):
        sal = (rng.random(size=(24, 24)) > 0.8).astype(float)
        if sal.max() == 0:
            continue
        comps = brute_force_components(sal >= 0.25)
        largest = max(comps, key=len)  # scipy labels in scan order; BFS too
        ys = np.array([y for y, _ in largest])
        xs = np.array([x for _, x in largest])
        box, _ = V.extract_box(sal, margin_frac=0.0)
        assert (box.x0, box.y0, box.x1, box.y1) == (
            xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_extract_box_invariants_random_maps():
    rng = np.random.default_rng(5)
    for _ in range(25):
        sal = np.abs(rng.normal(size=(64, 64))) * (rng.random(size=(64, 64)) > 0.5)
        box, _ = V.extract_box(sal)
        assert 0 <= box.x0 < box.x1 <= 64
        assert 0 <= box.y0 < box.y1 <= 64


# ---------------------------------------------------------------------------
# crop_and_resize


def test_crop_full_frame_is_identity():
    rng = np.random.default_rng(6)
    img = rand_image(rng)
    out = V.crop_and_resize(img, V.BoundingBox(0, 0, 64, 64))
    assert np.array_equal(out, img)


def test_crop_constant_image_stays_constant():
    img = np.full((3, 64, 64), 0.375)
    out = V.crop_and_resize(img, V.BoundingBox(5, 9, 30, 40))
    assert np.allclose(out, 0.375)


def test_crop_checkerboard_corners_preserved():
    img = np.zeros((3, 64, 64))
    # 2x2 checkerboard region at (10,10)
    img[:, 10, 10] = 1.0
    img[:, 11, 11] = 1.0
    out = V.crop_and_resize(img, V.BoundingBox(10, 10, 12, 12))
    # corner-aligned bilinear: corners keep source values
    assert out[0, 0, 0] == 1.0
    assert out[0, 0, 63] == 0.0
    assert out[0, 63, 0] == 0.0
    assert out[0, 63, 63] == 1.0
    # interior follows the bilinear formula for corner values 1,0,0,1
    fy = 31 / 63
    expected = (1 - fy) * (1 - fy) + fy * fy
    assert abs(out[0, 31, 31] - expected) < 1e-12


def test_crop_values_clamped():
    rng = np.random.default_rng(7)
    img = rng.random(size=(3, 64, 64))
    out = V.crop_and_resize(img, V.BoundingBox(2, 2, 50, 60))
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# vision_predict


def test_average_scores_arithmetic():
    a = V.ClassScores(np.array([0.8, 0.2]))
    b = V.ClassScores(np.array([0.4, 0.6]))
    avg = V.average_scores(a, b)
    assert np.allclose(avg.scores, [0.6, 0.4])
    assert avg.argmax() == 0


def test_average_scores_idempotent():
    s = V.ClassScores(np.array([0.3, 0.5, 0.2]))
    assert np.allclose(V.average_scores(s, s).scores, s.scores)


def test_average_scores_order_invariant():
    a = V.ClassScores(np.array([0.7, 0.1, 0.2]))
    b = V.ClassScores(np.array([0.2, 0.5, 0.3]))
    assert np.array_equal(V.average_scores(a, b).scores, V.average_scores(b, a).scores)


def test_average_scores_shape_mismatch():
    with pytest.raises(ShapeError):
        V.average_scores(V.ClassScores(np.array([1.0])), V.ClassScores(np.array([0.5, 0.5])))


def test_predict_argmax_matches_bruteforce():
    rng = np.random.default_rng(8)
    p = V.init_vision_params(rng, 6)
    img = rand_image(rng)
    scores = V.vision_predict(img, p)
    sums = scores.scores
    best = 0
    for k in range(6):
        if sums[k] > sums[best]:
            best = k
    assert scores.argmax() == best
    assert abs(sums.sum() - 1.0) < 1e-9


def test_vision_predict_simplex():
    rng = np.random.default_rng(9)
    p = V.init_vision_params(rng, 4)
    s = V.vision_predict(rand_image(rng), p)
    assert np.all(s.scores >= 0) and abs(s.scores.sum() - 1.0) < 1e-9
