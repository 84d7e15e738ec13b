import os
import sys

import numpy as np
import pytest

from flowedit import guidance
from flowedit import tensor as T

from conftest import assert_grad_close, numeric_grad

FAKE_SIDECAR = f"stdio:{sys.executable} {os.path.join(os.path.dirname(__file__), 'fake_sidecar.py')}"


def test_toy_target_minimum(rng):
    target = rng.random(size=(8, 8, 3)).astype(np.float32)
    scorer = guidance.ToyTargetScorer(target)
    loss, grad = scorer.score_with_gradient(target, "ignored")
    assert loss == 0.0
    assert np.max(np.abs(grad)) < 1e-6


def test_toy_target_full_scale():
    zeros = np.zeros((4, 4, 3), dtype=np.float32)
    ones = np.ones((4, 4, 3), dtype=np.float32)
    scorer = guidance.ToyTargetScorer(ones)
    loss, _ = scorer.score_with_gradient(zeros, "p")
    assert np.isclose(loss, 1.0)


def test_toy_target_analytic_gradient(rng):
    target = rng.random(size=(5, 5, 3)).astype(np.float32)
    image = rng.random(size=(5, 5, 3)).astype(np.float32)
    scorer = guidance.ToyTargetScorer(target)
    _, grad = scorer.score_with_gradient(image, "p")
    expected = 2.0 * (image - target) / image.size
    assert np.allclose(grad, expected, atol=1e-7)


def test_toy_target_descent_decreases_loss(rng):
    target = rng.random(size=(6, 6, 3)).astype(np.float32)
    image = rng.random(size=(6, 6, 3)).astype(np.float32)
    scorer = guidance.ToyTargetScorer(target)
    prev, grad = scorer.score_with_gradient(image, "p")
    for _ in range(5):
        image = image - 5.0 * grad
        loss, grad = scorer.score_with_gradient(image, "p")
        assert loss < prev
        prev = loss


def test_toy_embed_prompt_embedding_deterministic():
    scorer = guidance.ToyEmbedScorer(seed=4)
    a = scorer.embed_prompt("angry face")
    b = scorer.embed_prompt("angry face")
    c = scorer.embed_prompt("smiling face")
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.isclose(np.linalg.norm(a), 1.0, atol=1e-6)


def test_toy_embed_loss_in_cosine_range(rng):
    scorer = guidance.ToyEmbedScorer(seed=0)
    for _ in range(5):
        img = rng.random(size=(16, 16, 3)).astype(np.float32)
        loss, _ = scorer.score_with_gradient(img, "x")
        assert -1.0 <= loss <= 1.0


def test_toy_embed_gradient_matches_fd(rng):
    scorer = guidance.ToyEmbedScorer(seed=3)
    img0 = rng.random(size=(8, 8, 3))

    def build(t):
        return scorer.loss_node(t, "a test prompt")

    xt = T.Tensor(img0, requires_grad=True)
    build(xt).backward()

    def oracle(arr):
        with T.no_grad():
            return build(T.Tensor(arr)).item()

    num = numeric_grad(oracle, img0, eps=1e-4)
    assert_grad_close(xt.grad, num, rtol=1e-2, atol=1e-6)


def test_toy_embed_rejects_empty_prompt(rng):
    scorer = guidance.ToyEmbedScorer()
    with pytest.raises(guidance.GuidanceError, match="non-empty"):
        scorer.score_with_gradient(np.zeros((4, 4, 3), np.float32), "")


def test_scorer_determinism(rng):
    img = rng.random(size=(12, 12, 3)).astype(np.float32)
    a = guidance.ToyEmbedScorer(seed=9).score_with_gradient(img, "p")
    b = guidance.ToyEmbedScorer(seed=9).score_with_gradient(img, "p")
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_gradient_shape_matches_image(rng):
    img = rng.random(size=(10, 7, 3)).astype(np.float32)
    for scorer in (guidance.ToyTargetScorer(img * 0.5), guidance.ToyEmbedScorer()):
        _, grad = scorer.score_with_gradient(img, "p")
        assert grad.shape == img.shape


# -- augmentations -------------------------------------------------------------

def test_augment_magnitude_zero_is_identity(rng):
    img = rng.random(size=(9, 9, 3)).astype(np.float32)
    policy = guidance.AugmentationPolicy(n_ops=3, magnitude=0.0, seed=5)
    for view in guidance.augment_batch(T.Tensor(img), policy, 4):
        assert np.array_equal(view.data, img)


def test_flip_is_involution(rng):
    img = rng.random(size=(6, 8, 3)).astype(np.float32)
    flipped = guidance.horizontal_flip(T.Tensor(img))
    back = guidance.horizontal_flip(flipped)
    assert np.array_equal(back.data, img)
    assert not np.array_equal(flipped.data, img)


def test_augment_deterministic_per_seed(rng):
    img = rng.random(size=(8, 8, 3)).astype(np.float32)
    policy = guidance.AugmentationPolicy(n_ops=2, magnitude=0.8, seed=11)
    a = guidance.augment_batch(T.Tensor(img), policy, 3)
    b = guidance.augment_batch(T.Tensor(img), policy, 3)
    for va, vb in zip(a, b):
        assert np.array_equal(va.data, vb.data)


def test_augmented_guidance_gradient_matches_fd(rng):
    scorer = guidance.ToyEmbedScorer(seed=1)
    policy = guidance.AugmentationPolicy(n_ops=2, magnitude=0.6, seed=3)
    img0 = (rng.random(size=(8, 8, 3)) * 0.8 + 0.1)

    def build(t):
        views = guidance.augment_batch(t, policy, 4)
        acc = scorer.loss_node(views[0], "p")
        for v in views[1:]:
            acc = T.add(acc, scorer.loss_node(v, "p"))
        return T.mul(acc, 0.25)

    xt = T.Tensor(img0, requires_grad=True)
    build(xt).backward()

    def oracle(arr):
        with T.no_grad():
            return build(T.Tensor(arr)).item()

    num = numeric_grad(oracle, img0, eps=1e-4)
    assert_grad_close(xt.grad, num, rtol=1e-2, atol=1e-6)


# -- sidecar client --------------------------------------------------------------

def test_sidecar_stdio_round_trip_deterministic(rng):
    img = rng.random(size=(6, 6, 3)).astype(np.float32)
    scorer = guidance.SidecarScorer(FAKE_SIDECAR)
    try:
        a = scorer.score_with_gradient(img, "hello")
        b = scorer.score_with_gradient(img, "hello")
        assert a[0] == b[0]
        assert np.array_equal(a[1], b[1])
        assert a[1].shape == img.shape
        emb1 = scorer.embed_prompt("hello")
        emb2 = scorer.embed_prompt("hello")
        assert np.array_equal(emb1, emb2)
    finally:
        scorer.close()


def test_sidecar_loss_node_injects_gradient(rng):
    img = rng.random(size=(4, 4, 3)).astype(np.float32)
    scorer = guidance.SidecarScorer(FAKE_SIDECAR)
    try:
        leaf = T.Tensor(img, requires_grad=True)
        loss = scorer.loss_node(leaf, "p")
        loss.backward()
        assert np.allclose(leaf.grad, 1.0 / img.size, atol=1e-7)
    finally:
        scorer.close()


def test_sidecar_unreachable_raises_transport_error():
    scorer = guidance.SidecarScorer("127.0.0.1:1", timeout=0.5)
    with pytest.raises(guidance.GuidanceTransportError):
        scorer.score_with_gradient(np.zeros((2, 2, 3), np.float32), "p")


def test_sidecar_empty_prompt_rejected():
    scorer = guidance.SidecarScorer(FAKE_SIDECAR)
    with pytest.raises(guidance.GuidanceError, match="non-empty"):
        scorer.score_with_gradient(np.zeros((2, 2, 3), np.float32), "")


def test_make_scorer_factory(rng):
    img = rng.random(size=(4, 4, 3)).astype(np.float32)
    assert guidance.make_scorer("toy-target", target_image=img).kind == "toy-target"
    assert guidance.make_scorer("toy-embed", seed=1).kind == "toy-embed"
    assert guidance.make_scorer("sidecar", sidecar_addr="x:1").kind == "sidecar"
    with pytest.raises(guidance.GuidanceError):
        guidance.make_scorer("nope")
    with pytest.raises(guidance.GuidanceError):
        guidance.make_scorer("sidecar")
