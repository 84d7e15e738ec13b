"""Pluggable guidance scorers: the similarity signal that drives an edit.

A scorer maps (image, prompt) to a scalar loss and its gradient w.r.t. the
image pixels. Two deterministic in-process scorers ship for offline work
(target-image MSE and a fixed random-projection embedding with cosine
similarity); the sidecar client speaks the newline-delimited JSON protocol
to an external process serving a real vision/language model.
"""

import base64
import hashlib
import json
import shlex
import socket
import subprocess
from dataclasses import dataclass

import numpy as np

from . import tensor as T


class GuidanceError(Exception):
    pass


class GuidanceTransportError(GuidanceError):
    """Sidecar unreachable, protocol violation, or remote failure."""


def _prompt_seed(prompt, salt=0):
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return (int.from_bytes(digest[:8], "little"), salt)


def prompt_embedding(prompt, dim, salt=0):
    """Deterministic unit vector per prompt string (sha256-seeded)."""
    if not prompt:
        raise GuidanceError("prompt must be non-empty")
    rng = np.random.default_rng(_prompt_seed(prompt, salt))
    v = rng.standard_normal(dim).astype(np.float32)
    return v / np.linalg.norm(v)


class GuidanceScorer:
    """Base class: implement ``loss_node`` and the rest follows."""

    kind = "abstract"

    def loss_node(self, image, prompt):
        """Scalar loss Tensor wired into the graph of ``image``."""
        raise NotImplementedError

    def score_with_gradient(self, image, prompt):
        """(loss, d loss / d pixels) for a plain image array."""
        leaf = T.Tensor(np.asarray(image, dtype=np.float32), requires_grad=True)
        loss = self.loss_node(leaf, prompt)
        loss.backward()
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        return loss.item(), grad

    def embed_prompt(self, prompt):
        """Prompt embedding for conditioning (hash-seeded unless overridden)."""
        return prompt_embedding(prompt, 64)

    def close(self):
        pass


class ToyTargetScorer(GuidanceScorer):
    """MSE to a fixed target image; the prompt is ignored.

    Minimal at image == target with an analytic gradient 2(I - target)/N,
    which makes optimization-recovery tests exact.
    """

    kind = "toy-target"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float32)

    def loss_node(self, image, prompt):
        image = T.as_tensor(image)
        if image.data.shape != self.target.shape:
            raise ValueError(
                f"toy-target: image shape {image.data.shape} does not match "
                f"target {self.target.shape}"
            )
        ref = T.Tensor(self.target.astype(image.data.dtype))
        return T.reduce_mean(T.square(T.sub(image, ref)))


class ToyEmbedScorer(GuidanceScorer):
    """Cosine similarity in a fixed random linear embedding space.

    E(image) = P @ flatten(downsample(image, 16x16)) with a seeded projection
    P; E(prompt) is a hash-seeded unit vector. Loss is -cos(E_img, E_txt),
    always in [-1, 1] — the exact shape of the guidance objective, with no
    pretrained weights involved.
    """

    kind = "toy-embed"

    def __init__(self, seed=0, embed_dim=64):
        self.seed = seed
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        n = 16 * 16 * 3
        self._proj = (rng.standard_normal((n, embed_dim)) / np.sqrt(n)).astype(np.float32)

    def embed_prompt(self, prompt):
        if not prompt:
            raise GuidanceError("prompt must be non-empty")
        return prompt_embedding(prompt, self.embed_dim, salt=self.seed)

    def _embed_image_graph(self, image):
        ds = downsample_to(image, 16, 16)
        flat = T.reshape(ds, (1, 16 * 16 * 3))
        proj = T.matmul(flat, T.Tensor(self._proj.astype(ds.data.dtype)))
        return T.reshape(proj, (self.embed_dim,))

    def loss_node(self, image, prompt):
        text = self.embed_prompt(prompt)
        emb = self._embed_image_graph(T.as_tensor(image))
        return T.neg(T.cosine_similarity(emb, T.Tensor(text.astype(emb.data.dtype))))


def downsample_to(image, th, tw):
    """Differentiable resize of (H,W,C) to (th,tw): block mean when the sizes
    divide evenly, bilinear sampling otherwise (also covers upsampling)."""
    image = T.as_tensor(image)
    h, w, c = image.data.shape
    if h == th and w == tw:
        return image
    if h % th == 0 and w % tw == 0:
        bh, bw = h // th, w // tw
        blocks = T.reshape(image, (th, bh, tw, bw, c))
        return T.reduce_mean(blocks, axis=(1, 3))
    ys = ((np.arange(th, dtype=np.float64) + 0.5) * h / th - 0.5)
    xs = ((np.arange(tw, dtype=np.float64) + 0.5) * w / tw - 0.5)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx, gy], axis=-1).astype(image.data.dtype)
    return T.grid_sample_bilinear(image, T.Tensor(coords))


# -- differentiable augmentations ---------------------------------------------

@dataclass
class AugmentationPolicy:
    """Seeded sampler over {affine crop-resize, horizontal flip, brightness}.

    ``magnitude`` in [0,1] scales every op's parameter range; 0 makes each op
    the identity. All ops are differentiable w.r.t. the image.
    """

    n_ops: int = 2
    magnitude: float = 0.5
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"magnitude must be in [0,1], got {self.magnitude}")
        if self.n_ops < 1:
            raise ValueError(f"n_ops must be >= 1, got {self.n_ops}")
        return self


def horizontal_flip(image):
    """Mirror (H,W,C) about the vertical axis; an involution."""
    return T.flip(T.as_tensor(image), axis=1)


def _crop_resize(image, scale, ox_frac, oy_frac):
    h, w, _ = image.data.shape
    if scale == 1.0 and ox_frac == 0.0 and oy_frac == 0.0:
        return image
    span_x = scale * (w - 1)
    span_y = scale * (h - 1)
    ox = ox_frac * ((w - 1) - span_x)
    oy = oy_frac * ((h - 1) - span_y)
    xs = ox + np.arange(w, dtype=np.float64) * (span_x / max(w - 1, 1))
    ys = oy + np.arange(h, dtype=np.float64) * (span_y / max(h - 1, 1))
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx, gy], axis=-1).astype(image.data.dtype)
    return T.grid_sample_bilinear(image, T.Tensor(coords))


def augment_batch(image, policy, n):
    """n independently sampled differentiable views of the image.

    Deterministic per (policy.seed, view index); at magnitude 0 every view
    equals the input exactly.
    """
    policy.validate()
    if n < 1:
        raise ValueError(f"need n >= 1 augmentations, got {n}")
    image = T.as_tensor(image)
    m = policy.magnitude
    views = []
    for i in range(n):
        rng = np.random.default_rng((policy.seed, i))
        out = image
        ops = rng.choice(3, size=policy.n_ops, replace=True)
        for op in ops:
            if op == 0:
                scale = 1.0 - m * 0.3 * rng.random()
                out = _crop_resize(out, scale, rng.random(), rng.random())
            elif op == 1:
                if rng.random() < 0.5 * m:
                    out = horizontal_flip(out)
            else:
                b = 1.0 + m * 0.4 * (2.0 * rng.random() - 1.0)
                if b != 1.0:
                    out = T.clamp(T.mul(out, float(b)), 0.0, 1.0)
        views.append(out)
    return views


# -- sidecar client ------------------------------------------------------------

def encode_image_payload(image):
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape[0], image.shape[1]
    return {
        "h": int(h),
        "w": int(w),
        "rgb_f32_b64": base64.b64encode(image.tobytes()).decode("ascii"),
    }


def decode_f32_b64(payload, shape):
    raw = base64.b64decode(payload)
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise GuidanceTransportError(
            f"sidecar returned {arr.size} floats, expected {expected}"
        )
    return arr.reshape(shape).astype(np.float32)


class _TcpTransport:
    def __init__(self, host, port, timeout):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise GuidanceTransportError(f"cannot connect to sidecar at {host}:{port}: {exc}")
        self._rfile = self._sock.makefile("rb")

    def send_line(self, line):
        try:
            self._sock.sendall(line)
        except OSError as exc:
            raise GuidanceTransportError(f"sidecar connection lost: {exc}")

    def recv_line(self):
        line = self._rfile.readline()
        if not line:
            raise GuidanceTransportError("sidecar closed the connection")
        return line

    def close(self):
        try:
            self._rfile.close()
            self._sock.close()
        except OSError:
            pass


class _StdioTransport:
    def __init__(self, command):
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise GuidanceTransportError(f"cannot launch sidecar {command!r}: {exc}")

    def send_line(self, line):
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise GuidanceTransportError(f"sidecar pipe broken: {exc}")

    def recv_line(self):
        line = self._proc.stdout.readline()
        if not line:
            raise GuidanceTransportError("sidecar process ended")
        return line

    def close(self):
        try:
            self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=5)
        except Exception:
            pass


class SidecarScorer(GuidanceScorer):
    """Client for an external guidance process over the line-JSON protocol.

    Address forms: ``host:port`` (TCP) or ``stdio:<command line>`` (spawn the
    process and speak over its pipes). One request in flight per session.
    """

    kind = "sidecar"

    def __init__(self, address, timeout=30.0):
        self.address = address
        self.timeout = timeout
        self._transport = None
        self._next_id = 0

    def _connect(self):
        if self._transport is not None:
            return
        if self.address.startswith("stdio:"):
            self._transport = _StdioTransport(self.address[len("stdio:"):])
        else:
            host, sep, port = self.address.rpartition(":")
            if not sep:
                raise GuidanceTransportError(
                    f"sidecar address {self.address!r} is not host:port or stdio:<cmd>"
                )
            self._transport = _TcpTransport(host or "127.0.0.1", int(port), self.timeout)

    def _request(self, op, **fields):
        self._connect()
        self._next_id += 1
        req = {"id": self._next_id, "op": op, **fields}
        self._transport.send_line((json.dumps(req) + "\n").encode("utf-8"))
        line = self._transport.recv_line()
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GuidanceTransportError(f"sidecar sent invalid JSON: {exc}")
        if resp.get("id") != req["id"]:
            raise GuidanceTransportError(
                f"sidecar response id {resp.get('id')} does not match request {req['id']}"
            )
        if not resp.get("ok"):
            raise GuidanceTransportError(f"sidecar error: {resp.get('error', 'unknown')}")
        return resp

    def score_with_gradient(self, image, prompt):
        if not prompt:
            raise GuidanceError("prompt must be non-empty")
        image = np.asarray(image, dtype=np.float32)
        resp = self._request(
            "score_grad", prompt=prompt, image=encode_image_payload(image)
        )
        if "score" not in resp or "grad_f32_b64" not in resp:
            raise GuidanceTransportError("sidecar response missing score/grad fields")
        grad = decode_f32_b64(resp["grad_f32_b64"], image.shape)
        return float(resp["score"]), grad

    def loss_node(self, image, prompt):
        image = T.as_tensor(image)
        score, grad = self.score_with_gradient(image.data, prompt)
        return T.external_scalar(image, score, grad.astype(image.data.dtype))

    def embed_prompt(self, prompt):
        if not prompt:
            raise GuidanceError("prompt must be non-empty")
        resp = self._request("embed_text", prompt=prompt)
        if "embedding" not in resp:
            raise GuidanceTransportError("sidecar response missing embedding")
        return np.asarray(resp["embedding"], dtype=np.float32)

    def identity_embed(self, image):
        resp = self._request(
            "identity_embed", image=encode_image_payload(np.asarray(image))
        )
        if "embedding" not in resp:
            raise GuidanceTransportError("sidecar response missing embedding")
        return np.asarray(resp["embedding"], dtype=np.float32)

    def close(self):
        if self._transport is not None:
            self._transport.close()
            self._transport = None


def make_scorer(name, *, target_image=None, seed=0, embed_dim=64, sidecar_addr=None):
    """Factory keyed by the CLI's --guidance choices."""
    if name == "toy-target":
        if target_image is None:
            raise GuidanceError("toy-target guidance needs a target image")
        return ToyTargetScorer(target_image)
    if name == "toy-embed":
        return ToyEmbedScorer(seed=seed, embed_dim=embed_dim)
    if name == "sidecar":
        if not sidecar_addr:
            raise GuidanceError(
                "sidecar guidance needs an address (--sidecar-addr or "
                "FLOWEDIT_SIDECAR_ADDR)"
            )
        return SidecarScorer(sidecar_addr)
    raise GuidanceError(f"unknown guidance scorer {name!r}")
