"""Objective terms for flow-field optimization.

Total objective: guidance similarity plus structural regularizers —
smoothness and L2 magnitude of the spatial field, color-change magnitude,
and embedding-space identity preservation — combined with per-term weights.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import warp


@dataclass
class LossWeights:
    """Per-term weights. Defaults sit inside the validated working ranges."""

    clip: float = 10.0
    sm: float = 10.0
    reg: float = 0.1
    color: float = 20.0
    id: float = 0.1

    def validate(self):
        for name in ("clip", "sm", "reg", "color", "id"):
            value = getattr(self, name)
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")
        return self


def smoothness_loss(flow):
    """Mean squared forward-difference derivative of the flow field.

    Averages |dU/dx|^2 + |dU/dy|^2 over interior positions (differences in
    pixel units, summed over the flow channels).
    """
    flow = T.as_tensor(flow)
    h, w = flow.data.shape[0], flow.data.shape[1]
    if h < 2 or w < 2:
        raise ValueError(f"smoothness_loss needs at least 2x2 fields, got {h}x{w}")
    dx = T.sub(flow[:, 1:, :], flow[:, :-1, :])[: h - 1, :, :]
    dy = T.sub(flow[1:, :, :], flow[:-1, :, :])[:, : w - 1, :]
    total = T.add(T.reduce_sum(T.square(dx)), T.reduce_sum(T.square(dy)))
    return T.mul(total, 1.0 / ((h - 1) * (w - 1)))


def reg_loss(flow):
    """Mean squared flow component (L2 amplitude regularizer)."""
    return T.reduce_mean(T.square(T.as_tensor(flow)))


def color_loss(image, cflow):
    """Mean squared RGB change caused by the color field alone."""
    image_t = T.as_tensor(image)
    recolored = warp.apply_color_flow(image_t, cflow)
    return T.reduce_mean(T.square(T.sub(recolored, T.Tensor(image_t.data))))


class RandomProjectionEmbedder:
    """Fixed seeded linear projection standing in for a face-recognition net.

    flatten -> dim-sized linear map -> (cosine handles normalization). The
    projection matrix is generated lazily per input size and cached, so the
    embedder works at any resolution while staying deterministic.
    """

    def __init__(self, seed=7, dim=256):
        self.seed = seed
        self.dim = dim
        self._mats = {}

    def _matrix(self, n, dtype):
        key = (n, np.dtype(dtype).name)
        mat = self._mats.get(key)
        if mat is None:
            rng = np.random.default_rng((self.seed, n))
            mat = (rng.standard_normal((n, self.dim)) / np.sqrt(n)).astype(dtype)
            self._mats[key] = mat
        return mat

    def embed_graph(self, image):
        image = T.as_tensor(image)
        n = int(image.data.size)
        flat = T.reshape(image, (1, n))
        proj = T.matmul(flat, T.Tensor(self._matrix(n, image.data.dtype)))
        return T.reshape(proj, (self.dim,))

    def embed(self, image):
        image = np.asarray(image)
        return image.reshape(1, -1) @ self._matrix(image.size, image.dtype)


def identity_loss(original, edited, embedder):
    """1 - cosine(embed(original), embed(edited)); the original side is constant."""
    ref = np.asarray(embedder.embed(np.asarray(original))).reshape(-1)
    emb = embedder.embed_graph(edited)
    return T.sub(1.0, T.cosine_similarity(emb, T.Tensor(ref.astype(emb.data.dtype))))


def total_loss(
    image,
    prompt,
    flow,
    cflow,
    weights,
    guidance,
    embedder=None,
    augment=None,
    augment_n=4,
):
    """Weighted sum of all objective terms for one edit.

    ``flow``/``cflow`` are the effective fields (already smoothed and scaled).
    Returns (scalar loss tensor, per-term float dict, edited image tensor).
    Terms with zero weight are skipped entirely.
    """
    weights.validate()
    image = np.asarray(image)
    edited = warp.warp_full(image, flow, cflow)

    parts = {"clip": 0.0, "sm": 0.0, "reg": 0.0, "color": 0.0, "id": 0.0}
    total = None

    def accumulate(term, weight, name):
        nonlocal total
        parts[name] = term.item()
        weighted = T.mul(term, float(weight))
        total = weighted if total is None else T.add(total, weighted)

    if weights.clip > 0:
        if augment is not None:
            views = _augment_views(edited, augment, augment_n)
            acc = guidance.loss_node(views[0], prompt)
            for view in views[1:]:
                acc = T.add(acc, guidance.loss_node(view, prompt))
            clip_term = T.mul(acc, 1.0 / len(views))
        else:
            clip_term = guidance.loss_node(edited, prompt)
        accumulate(clip_term, weights.clip, "clip")
    if weights.sm > 0:
        accumulate(smoothness_loss(flow), weights.sm, "sm")
    if weights.reg > 0:
        accumulate(reg_loss(flow), weights.reg, "reg")
    if weights.color > 0:
        accumulate(color_loss(image, cflow), weights.color, "color")
    if weights.id > 0:
        if embedder is None:
            embedder = RandomProjectionEmbedder()
        accumulate(identity_loss(image, edited, embedder), weights.id, "id")

    if total is None:
        total = T.Tensor(np.zeros((), dtype=np.float32))
    parts["total"] = total.item()
    return total, parts, edited


def _augment_views(image_t, policy, n):
    from .guidance import augment_batch  # deferred: guidance imports losses

    return augment_batch(image_t, policy, n)
