# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for bilinear grid sampling and separable filtering.

Mirrors the numpy backend in ``_npkernels.py``; selected at import time by
``flowedit._kernels``.
"""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused real:
    float
    double


def grid_sample_forward(real[:, :, ::1] image, real[:, :, ::1] coords):
    h = image.shape[0]
    w = image.shape[1]
    c = image.shape[2]
    oh = coords.shape[0]
    ow = coords.shape[1]
    if real is float:
        out_np = np.empty((oh, ow, c), dtype=np.float32)
    else:
        out_np = np.empty((oh, ow, c), dtype=np.float64)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t i, j, k, x0, y0, x1, y1
    cdef real x, y, fx, fy, top, bot
    cdef Py_ssize_t H = h, W = w, C = c, OH = oh, OW = ow

    for i in range(OH):
        for j in range(OW):
            x = coords[i, j, 0]
            y = coords[i, j, 1]
            if x < 0:
                x = 0
            if x > W - 1:
                x = W - 1
            if y < 0:
                y = 0
            if y > H - 1:
                y = H - 1
            x0 = <Py_ssize_t>x
            y0 = <Py_ssize_t>y
            x1 = x0 + 1 if x0 + 1 < W else W - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            fx = x - x0
            fy = y - y0
            for k in range(C):
                top = image[y0, x0, k] + (image[y0, x1, k] - image[y0, x0, k]) * fx
                bot = image[y1, x0, k] + (image[y1, x1, k] - image[y1, x0, k]) * fx
                out[i, j, k] = top + (bot - top) * fy
    return out_np


def grid_sample_backward(real[:, :, ::1] image, real[:, :, ::1] coords,
                         real[:, :, ::1] grad_out):
    h = image.shape[0]
    w = image.shape[1]
    c = image.shape[2]
    oh = coords.shape[0]
    ow = coords.shape[1]
    if real is float:
        gi_np = np.zeros((h, w, c), dtype=np.float32)
        gc_np = np.zeros((oh, ow, 2), dtype=np.float32)
    else:
        gi_np = np.zeros((h, w, c), dtype=np.float64)
        gc_np = np.zeros((oh, ow, 2), dtype=np.float64)
    cdef real[:, :, ::1] grad_image = gi_np
    cdef real[:, :, ::1] grad_coords = gc_np
    cdef Py_ssize_t i, j, k, x0, y0, x1, y1
    cdef real xr, yr, x, y, fx, fy, g, gx, gy, dx, dy
    cdef Py_ssize_t H = h, W = w, C = c, OH = oh, OW = ow
    cdef bint x_in, y_in

    for i in range(OH):
        for j in range(OW):
            xr = coords[i, j, 0]
            yr = coords[i, j, 1]
            x = xr
            y = yr
            if x < 0:
                x = 0
            if x > W - 1:
                x = W - 1
            if y < 0:
                y = 0
            if y > H - 1:
                y = H - 1
            x0 = <Py_ssize_t>x
            y0 = <Py_ssize_t>y
            x1 = x0 + 1 if x0 + 1 < W else W - 1
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            fx = x - x0
            fy = y - y0
            x_in = (xr > 0) and (xr < W - 1)
            y_in = (yr > 0) and (yr < H - 1)
            gx = 0
            gy = 0
            for k in range(C):
                g = grad_out[i, j, k]
                grad_image[y0, x0, k] += g * (1 - fx) * (1 - fy)
                grad_image[y0, x1, k] += g * fx * (1 - fy)
                grad_image[y1, x0, k] += g * (1 - fx) * fy
                grad_image[y1, x1, k] += g * fx * fy
                dx = (image[y0, x1, k] - image[y0, x0, k]) * (1 - fy) \
                    + (image[y1, x1, k] - image[y1, x0, k]) * fy
                dy = (image[y1, x0, k] - image[y0, x0, k]) * (1 - fx) \
                    + (image[y1, x1, k] - image[y0, x1, k]) * fx
                gx += g * dx
                gy += g * dy
            if x_in:
                grad_coords[i, j, 0] = gx
            if y_in:
                grad_coords[i, j, 1] = gy
    return gi_np, gc_np


def correlate1d_replicate(real[:, :, ::1] field, real[::1] kernel, int axis):
    h = field.shape[0]
    w = field.shape[1]
    c = field.shape[2]
    k = kernel.shape[0]
    if real is float:
        out_np = np.zeros((h, w, c), dtype=np.float32)
    else:
        out_np = np.zeros((h, w, c), dtype=np.float64)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t i, j, t, m, src
    cdef Py_ssize_t H = h, W = w, C = c, K = k, R = k // 2
    cdef real acc

    if axis == 0:
        for i in range(H):
            for j in range(W):
                for m in range(C):
                    acc = 0
                    for t in range(K):
                        src = i + t - R
                        if src < 0:
                            src = 0
                        elif src > H - 1:
                            src = H - 1
                        acc += kernel[t] * field[src, j, m]
                    out[i, j, m] = acc
    else:
        for i in range(H):
            for j in range(W):
                for m in range(C):
                    acc = 0
                    for t in range(K):
                        src = j + t - R
                        if src < 0:
                            src = 0
                        elif src > W - 1:
                            src = W - 1
                        acc += kernel[t] * field[i, src, m]
                    out[i, j, m] = acc
    return out_np


def correlate1d_replicate_adjoint(real[:, :, ::1] grad_out, real[::1] kernel, int axis):
    h = grad_out.shape[0]
    w = grad_out.shape[1]
    c = grad_out.shape[2]
    k = kernel.shape[0]
    if real is float:
        gi_np = np.zeros((h, w, c), dtype=np.float32)
    else:
        gi_np = np.zeros((h, w, c), dtype=np.float64)
    cdef real[:, :, ::1] grad_in = gi_np
    cdef Py_ssize_t i, j, t, m, dst
    cdef Py_ssize_t H = h, W = w, C = c, K = k, R = k // 2

    # scatter: forward output position i read from clamp(i + t - R)
    if axis == 0:
        for i in range(H):
            for j in range(W):
                for m in range(C):
                    for t in range(K):
                        dst = i + t - R
                        if dst < 0:
                            dst = 0
                        elif dst > H - 1:
                            dst = H - 1
                        grad_in[dst, j, m] += kernel[t] * grad_out[i, j, m]
    else:
        for i in range(H):
            for j in range(W):
                for m in range(C):
                    for t in range(K):
                        dst = j + t - R
                        if dst < 0:
                            dst = 0
                        elif dst > W - 1:
                            dst = W - 1
                        grad_in[i, dst, m] += kernel[t] * grad_out[i, j, m]
    return gi_np
