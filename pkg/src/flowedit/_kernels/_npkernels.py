"""Vectorized numpy implementations of the hot sampling/filtering kernels.

Same call signatures as the compiled backend in ``_cykernels.pyx``; which one
the package uses is decided once in ``flowedit._kernels``.
"""

import numpy as np


def grid_sample_forward(image, coords):
    """Bilinear sample of ``image`` (H,W,C) at absolute pixel coords (H,W,2).

    coords[..., 0] is x (column), coords[..., 1] is y (row). Out-of-range
    coordinates are clamped to the border (replicate).
    """
    h, w, _ = image.shape
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]

    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return (top + (bot - top) * fy).astype(image.dtype)


def grid_sample_backward(image, coords, grad_out):
    """Gradients of the bilinear sample w.r.t. image values and coordinates.

    Coordinate gradients are zero where the coordinate was clamped.
    """
    h, w, c = image.shape
    xr = coords[..., 0]
    yr = coords[..., 1]
    x = np.clip(xr, 0.0, w - 1.0)
    y = np.clip(yr, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    grad_image = np.zeros_like(image)
    flat = grad_image.reshape(-1, c)
    g = grad_out.reshape(-1, c)
    idx00 = (y0 * w + x0).ravel()
    idx01 = (y0 * w + x1).ravel()
    idx10 = (y1 * w + x0).ravel()
    idx11 = (y1 * w + x1).ravel()
    n = h * w
    for k in range(c):
        gk = g[:, k]
        acc = np.bincount(idx00, gk * w00.ravel(), minlength=n)
        acc += np.bincount(idx01, gk * w01.ravel(), minlength=n)
        acc += np.bincount(idx10, gk * w10.ravel(), minlength=n)
        acc += np.bincount(idx11, gk * w11.ravel(), minlength=n)
        flat[:, k] = acc.astype(image.dtype)

    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    # d(out)/dx and d(out)/dy of the bilinear form, per channel, then reduced.
    dx = (v01 - v00) * (1 - fy)[..., None] + (v11 - v10) * fy[..., None]
    dy = (v10 - v00) * (1 - fx)[..., None] + (v11 - v01) * fx[..., None]
    gx = np.sum(grad_out * dx, axis=-1)
    gy = np.sum(grad_out * dy, axis=-1)
    # clamp kills the derivative outside the valid range
    gx *= (xr > 0.0) & (xr < w - 1.0)
    gy *= (yr > 0.0) & (yr < h - 1.0)
    grad_coords = np.stack([gx, gy], axis=-1).astype(image.dtype)
    return grad_image, grad_coords


def correlate1d_replicate(field, kernel, axis):
    """1-D correlation along ``axis`` (0 or 1) of (H,W,C) with replicate padding."""
    k = kernel.shape[0]
    r = k // 2
    if axis == 0:
        pad = ((r, r), (0, 0), (0, 0))
    else:
        pad = ((0, 0), (r, r), (0, 0))
    padded = np.pad(field, pad, mode="edge")
    out = np.zeros_like(field)
    for i in range(k):
        if axis == 0:
            out += kernel[i] * padded[i : i + field.shape[0], :, :]
        else:
            out += kernel[i] * padded[:, i : i + field.shape[1], :]
    return out


def correlate1d_replicate_adjoint(grad_out, kernel, axis):
    """Adjoint of ``correlate1d_replicate`` (gradient w.r.t. the input field)."""
    k = kernel.shape[0]
    r = k // 2
    h, w, c = grad_out.shape
    if axis == 0:
        acc = np.zeros((h + 2 * r, w, c), dtype=grad_out.dtype)
        for i in range(k):
            acc[i : i + h, :, :] += kernel[i] * grad_out
        grad_in = acc[r : r + h].copy()
        # fold pad-region contributions back onto the replicated border rows
        if r > 0:
            grad_in[0] += acc[:r].sum(axis=0)
            grad_in[-1] += acc[r + h :].sum(axis=0)
    else:
        acc = np.zeros((h, w + 2 * r, c), dtype=grad_out.dtype)
        for i in range(k):
            acc[:, i : i + w, :] += kernel[i] * grad_out
        grad_in = acc[:, r : r + w].copy()
        if r > 0:
            grad_in[:, 0] += acc[:, :r].sum(axis=1)
            grad_in[:, -1] += acc[:, r + w :].sum(axis=1)
    return grad_in
