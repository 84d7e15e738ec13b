"""Implicit neural representation of flow fields.

A field is a small MLP mapping normalized pixel coordinates in [-1,1]^2,
expanded by sinusoidal positional encoding, to per-pixel offsets. The same
parameter vector can be rasterized at any resolution. Spatial fields carry an
output scale in pixels so the raw network outputs stay O(1).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

INR_MAGIC = b"INR1"


def encoding_width(levels):
    """Input width of the MLP: raw (x,y) plus sin/cos pairs per level."""
    return 2 * (1 + 2 * levels)


def positional_encode(coords, levels):
    """Sinusoidal expansion of (...,2) coordinates.

    Per coordinate p: (p, sin(2^0 pi p), cos(2^0 pi p), ...,
    sin(2^(L-1) pi p), cos(2^(L-1) pi p)); the two coordinate blocks are
    concatenated, giving 2*(1+2L) features.
    """
    coords = np.asarray(coords)
    if coords.shape[-1] != 2:
        raise ValueError(f"coordinates must have 2 components, got {coords.shape}")
    parts = []
    for c in range(2):
        p = coords[..., c : c + 1]
        block = [p]
        for lv in range(levels):
            arg = (2.0**lv) * np.pi * p
            block.append(np.sin(arg))
            block.append(np.cos(arg))
        parts.append(np.concatenate(block, axis=-1))
    return np.concatenate(parts, axis=-1)


def normalized_grid(h, w, dtype=np.float32):
    """Pixel-center coordinates mapped to [-1,1]^2, x then y."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xn = 2.0 * (xs + 0.5) / w - 1.0
    yn = 2.0 * (ys + 0.5) / h - 1.0
    return np.stack([xn, yn], axis=-1).astype(dtype)


_encoded_grid_cache = {}


def encoded_grid(h, w, levels, dtype=np.float32):
    key = (h, w, levels, np.dtype(dtype).name)
    enc = _encoded_grid_cache.get(key)
    if enc is None:
        enc = positional_encode(normalized_grid(h, w, np.float64), levels)
        enc = np.ascontiguousarray(enc.reshape(h * w, -1).astype(dtype))
        enc.setflags(write=False)
        _encoded_grid_cache[key] = enc
    return enc


def layer_sizes(dims):
    return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def param_count(dims):
    return sum(fi * fo + fo for fi, fo in layer_sizes(dims))


@dataclass
class InrField:
    """MLP parameters plus the architecture needed to evaluate them.

    ``theta`` is the flat float32 parameter vector (per layer: weight matrix
    (fan_in, fan_out) row-major, then bias). ``out_scale`` multiplies the
    network output; spatial fields use it to express offsets in pixels.
    """

    dims: list
    levels: int = 4
    theta: np.ndarray = field(default=None, repr=False)
    out_scale: float = 1.0

    @property
    def out_channels(self):
        return self.dims[-1]

    def copy(self):
        return InrField(list(self.dims), self.levels, self.theta.copy(), self.out_scale)


def _check_dims(dims, levels):
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    expected = encoding_width(levels)
    if dims[0] != expected:
        raise ValueError(
            f"first layer width {dims[0]} does not match encoding width "
            f"{expected} for L={levels}"
        )


def init_params(dims, seed, levels=4, out_scale=1.0):
    """Glorot-uniform hidden layers, zero-initialized final layer.

    The zero final layer makes a fresh field evaluate to zero everywhere, so
    optimization starts from the identity warp. Deterministic per seed.
    """
    _check_dims(dims, levels)
    rng = np.random.default_rng(seed)
    chunks = []
    last = len(dims) - 2
    for li, (fi, fo) in enumerate(layer_sizes(dims)):
        if li == last:
            w = np.zeros((fi, fo), dtype=np.float32)
            b = np.zeros(fo, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-bound, bound, size=(fi, fo)).astype(np.float32)
            b = np.zeros(fo, dtype=np.float32)
        chunks.append(w.reshape(-1))
        chunks.append(b)
    return InrField(list(dims), levels, np.concatenate(chunks), out_scale)


def flatten_params(field):
    """The flat parameter vector (already the storage format; copied out)."""
    return field.theta.copy()


def flatten_layers(layers):
    """Inverse of ``unflatten_params``: per layer, weights row-major then bias."""
    chunks = []
    for w, b in layers:
        chunks.append(np.asarray(w, dtype=np.float32).reshape(-1))
        chunks.append(np.asarray(b, dtype=np.float32).reshape(-1))
    return np.concatenate(chunks)


def unflatten_params(dims, vector):
    """Split a flat vector into per-layer (weight, bias) arrays."""
    vector = np.asarray(vector)
    expected = param_count(dims)
    if vector.size != expected:
        raise ValueError(
            f"parameter vector has {vector.size} values, dims {dims} need {expected}"
        )
    layers = []
    off = 0
    for fi, fo in layer_sizes(dims):
        w = vector[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = vector[off : off + fo]
        off += fo
        layers.append((w, b))
    return layers


def inr_forward_graph(dims, levels, theta, h, w, out_scale=1.0):
    """Rasterize the field as a graph tensor (H,W,out) differentiable in theta.

    ``theta`` is a flat Tensor; layer weights are sliced out of it so the
    gradient of any downstream loss lands back on the flat vector (the format
    hypernetworks predict).
    """
    theta = T.as_tensor(theta)
    if theta.data.ndim != 1 or theta.data.size != param_count(dims):
        raise ValueError(
            f"theta has shape {theta.data.shape}, dims {dims} need "
            f"({param_count(dims)},)"
        )
    x = T.Tensor(encoded_grid(h, w, levels, theta.data.dtype))
    off = 0
    last = len(dims) - 2
    for li, (fi, fo) in enumerate(layer_sizes(dims)):
        wt = T.reshape(theta[off : off + fi * fo], (fi, fo))
        off += fi * fo
        bt = theta[off : off + fo]
        off += fo
        x = T.linear(x, wt, bt)
        if li != last:
            x = T.relu(x)
    if out_scale != 1.0:
        x = T.mul(x, float(out_scale))
    return T.reshape(x, (h, w, dims[-1]))


def inr_forward(field, h, w):
    """Rasterize an InrField to a plain (H,W,out) array."""
    with T.no_grad():
        out = inr_forward_graph(
            field.dims, field.levels, T.Tensor(field.theta), h, w, field.out_scale
        )
    return out.data


def save_inr(path, field, bake_out_scale=True):
    """Write an INR1 checkpoint: magic, u32 L, u32 #dims, dims, then f32 theta.

    The format has no out-scale slot, so by default the scale is folded into
    the (linear) final layer, which preserves the represented function
    exactly; pass bake_out_scale=False to write raw parameters instead.
    """
    theta = field.theta
    if bake_out_scale and field.out_scale != 1.0:
        layers = unflatten_params(field.dims, theta.copy())
        w, b = layers[-1]
        w *= field.out_scale
        b *= field.out_scale
        theta = np.concatenate([np.concatenate([w.reshape(-1), b]) for w, b in layers])
    with open(path, "wb") as f:
        f.write(INR_MAGIC)
        f.write(struct.pack("<II", field.levels, len(field.dims)))
        f.write(struct.pack(f"<{len(field.dims)}I", *field.dims))
        f.write(theta.astype("<f4").tobytes())


def load_inr(path):
    with open(path, "rb") as f:
        if f.read(4) != INR_MAGIC:
            raise ValueError(f"{path}: not an INR1 checkpoint")
        levels, ndims = struct.unpack("<II", f.read(8))
        dims = list(struct.unpack(f"<{ndims}I", f.read(4 * ndims)))
        theta = np.frombuffer(f.read(param_count(dims) * 4), dtype="<f4")
    if theta.size != param_count(dims):
        raise ValueError(f"{path}: truncated INR1 checkpoint")
    return InrField(dims, levels, theta.astype(np.float32), 1.0)
