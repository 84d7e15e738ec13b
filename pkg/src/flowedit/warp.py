"""The editing transform: spatial warping plus HSV value-channel color shift.

An edit is two fields applied to an (H,W,3) image in [0,1]:

* spatial flow (H,W,2) — per-pixel source offsets (dx, dy) in pixel units;
  output(x,y) samples the input at (x+dx, y+dy) with bilinear interpolation
  and border clamping (a backward/gather warp),
* color flow (H,W,1) — per-pixel offset of the HSV value channel, applied as
  a hue/saturation-preserving RGB rescale.

Both paths are differentiable; fields may be plain arrays or graph tensors.
"""

import struct

import numpy as np

from . import tensor as T

V_EPS = 1e-4

_grid_cache = {}


def identity_grid(h, w, dtype=np.float32):
    """(H,W,2) array of each pixel's own (x, y) coordinates."""
    key = (h, w, np.dtype(dtype).name)
    grid = _grid_cache.get(key)
    if grid is None:
        ys, xs = np.mgrid[0:h, 0:w].astype(dtype)
        grid = np.stack([xs, ys], axis=-1)
        grid.setflags(write=False)
        _grid_cache[key] = grid
    return grid


def _check_field(image, field, channels, name):
    ih, iw = image.shape[0], image.shape[1]
    if field.shape != (ih, iw, channels):
        raise ValueError(
            f"{name}: field shape {tuple(field.shape)} does not match image "
            f"{(ih, iw, channels)}"
        )


def apply_spatial_flow(image, flow):
    """Warp ``image`` by sampling at each pixel's coordinates plus ``flow``."""
    image = T.as_tensor(image)
    flow = T.as_tensor(flow)
    _check_field(image.data, flow.data, 2, "apply_spatial_flow")
    h, w = image.data.shape[:2]
    grid = identity_grid(h, w, image.data.dtype)
    coords = T.add(flow, T.Tensor(grid))
    return T.grid_sample_bilinear(image, coords)


def _expand3(x):
    return T.concat([x, x, x], axis=-1)


def apply_color_flow(image, cflow):
    """Shift the HSV value channel by ``cflow``, preserving hue and saturation.

    V = max(R,G,B); V' = clamp(V + dc, 0, 1); the RGB triple is rescaled by
    V'/V, which edits exactly the value channel of the HSV decomposition.
    Near-black pixels (V < eps) get the offset added to all three channels
    instead, since the rescale direction is undefined there.
    """
    image = T.as_tensor(image)
    cflow = T.as_tensor(cflow)
    _check_field(image.data, cflow.data, 1, "apply_color_flow")
    v = T.reduce_max(image, axis=-1, keepdims=True)
    vp = T.clamp(T.add(v, cflow), 0.0, 1.0)
    scale = T.div(vp, T.clamp(v, V_EPS, np.inf))
    scaled = T.mul(image, _expand3(scale))
    additive = T.add(image, _expand3(T.sub(vp, v)))
    mask = (v.data >= V_EPS).astype(image.data.dtype)
    mask3 = np.repeat(mask, 3, axis=-1)
    out = T.add(T.mul(scaled, T.Tensor(mask3)), T.mul(additive, T.Tensor(1.0 - mask3)))
    return T.clamp(out, 0.0, 1.0)


def warp_full(image, flow, cflow):
    """Full editing transform: spatial warp, then color shift, clamped to [0,1]."""
    warped = apply_spatial_flow(image, flow)
    colored = apply_color_flow(warped, cflow)
    return T.clamp(colored, 0.0, 1.0)


def smooth_and_scale(field, blur_kernel, alpha, sigma=None):
    """Amplitude-scaled, optionally blurred field: alpha * blur(field).

    ``blur_kernel`` 0 means no blur (the INR path, whose output is already
    smooth); otherwise it must be odd. ``alpha`` 0 turns the edit off.
    """
    field = T.as_tensor(field)
    if blur_kernel < 0 or (blur_kernel != 0 and blur_kernel % 2 == 0):
        raise ValueError(f"blur kernel must be odd or 0, got {blur_kernel}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if blur_kernel > 1:
        field = T.gaussian_blur(field, blur_kernel, sigma)
    return T.mul(field, float(alpha))


# -- flow-field file format (VFF1) -------------------------------------------

VFF_MAGIC = b"VFF1"


def save_flow(path, field):
    """Write a flow field as VFF1: magic, u32 H W C, then f32 data (LE)."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 3:
        raise ValueError(f"flow field must be (H,W,C), got shape {field.shape}")
    h, w, c = field.shape
    with open(path, "wb") as f:
        f.write(VFF_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(field.astype("<f4").tobytes())


def load_flow(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VFF_MAGIC:
            raise ValueError(f"{path}: not a VFF1 flow file (magic {magic!r})")
        h, w, c = struct.unpack("<III", f.read(12))
        data = f.read(h * w * c * 4)
    if len(data) != h * w * c * 4:
        raise ValueError(f"{path}: truncated flow file")
    return np.frombuffer(data, dtype="<f4").reshape(h, w, c).astype(np.float32)
